"""Uniform-fit and distribution-fit benchmark generators.

Both baselines fit each feature on all user steps lumped together and draw
every user/step/feature independently, so they carry no dl/ul correlation.
The distribution fit picks the best of a fixed set of families by maximum
likelihood instead of a broad GAMLSS search.
"""

from __future__ import annotations

import copy
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .trace import TraceTensor, as_array, feature_index

log = logging.getLogger(__name__)


@dataclass
class Sampler:
    """A frozen fitted distribution with its own RNG stream."""

    family: str
    params: tuple
    seed: int | None = None
    loglik: float = float("nan")
    rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        self.rng = np.random.default_rng(self.seed)

    def clone(self, seed: int | None = None) -> "Sampler":
        other = copy.copy(self)
        other.rng = np.random.default_rng(seed) if seed is not None else copy.deepcopy(self.rng)
        return other

    def sample(self, size) -> np.ndarray:
        if self.family == "constant":
            return np.full(size, self.params[0], dtype=float)
        if self.family == "uniform":
            lo, hi = self.params
            return self.rng.uniform(lo, hi, size)
        dist = FAMILIES[self.family].dist(*self.params)
        return dist.rvs(size=size, random_state=self.rng)


def _feature_values(trace, feature) -> np.ndarray:
    arr = np.asarray(trace, dtype=float)
    if arr.ndim == 3:
        arr = arr[:, :, feature_index(feature)]
    return arr.ravel()


def uniform_fit(trace, feature="dl", seed: int | None = None) -> Sampler:
    """Uniform on the observed [min, max] of one feature; constant when min == max."""
    x = _feature_values(trace, feature)
    if x.size == 0:
        raise ValueError("cannot fit an empty trace")
    lo, hi = float(x.min()), float(x.max())
    if lo == hi:
        return Sampler("constant", (lo,), seed)
    n = x.size
    return Sampler("uniform", (lo, hi), seed, loglik=-n * np.log(hi - lo))


@dataclass(frozen=True)
class Family:
    name: str
    nparams: int
    dist: object  # callable(*params) -> frozen scipy distribution

    def feasible(self, x: np.ndarray) -> bool:
        if self.name in ("lognormal", "gamma", "weibull"):
            return bool((x > 0).all())
        if self.name == "beta":
            return bool(((x > 0) & (x < 1)).all())
        return True

    def fit(self, x: np.ndarray) -> tuple:
        # closed forms where they exist; scipy's numerical MLE otherwise
        if self.name == "uniform":
            return (float(x.min()), float(x.max()))
        if self.name == "normal":
            return (float(x.mean()), float(x.std()))
        if self.name == "lognormal":
            lx = np.log(x)
            return (float(lx.std()), float(np.exp(lx.mean())))
        if self.name == "exponential":
            lo = float(x.min())
            return (lo, float(x.mean() - lo))
        if self.name == "gamma":
            a, _, scale = stats.gamma.fit(x, floc=0)
            return (a, scale)
        if self.name == "beta":
            a, b, _, _ = stats.beta.fit(x, floc=0, fscale=1)
            return (a, b)
        if self.name == "weibull":
            c, _, scale = stats.weibull_min.fit(x, floc=0)
            return (c, scale)
        raise ValueError(self.name)


FAMILIES = {
    f.name: f
    for f in (
        Family("uniform", 2, lambda lo, hi: stats.uniform(lo, hi - lo)),
        Family("normal", 2, lambda mu, sd: stats.norm(mu, sd)),
        Family("lognormal", 2, lambda s, scale: stats.lognorm(s, scale=scale)),
        Family("exponential", 1, lambda lo, scale: stats.expon(lo, scale)),
        Family("gamma", 2, lambda a, scale: stats.gamma(a, scale=scale)),
        Family("beta", 2, lambda a, b: stats.beta(a, b)),
        Family("weibull", 2, lambda c, scale: stats.weibull_min(c, scale=scale)),
    )
}


def fit_family(x: np.ndarray, name: str) -> tuple[tuple, float]:
    """Fit one family and return ``(params, loglik)``; loglik is -inf when infeasible."""
    fam = FAMILIES[name]
    if not fam.feasible(x):
        return (), -np.inf
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            params = fam.fit(x)
            ll = float(np.sum(fam.dist(*params).logpdf(x)))
    except (ValueError, RuntimeError, FloatingPointError, ZeroDivisionError):
        return (), -np.inf
    if not np.all(np.isfinite(params)) or not np.isfinite(ll):
        return (), -np.inf
    # degenerate scale parameters make the likelihood meaningless
    if name in ("normal", "exponential") and params[1] <= 0:
        return (), -np.inf
    if name == "uniform" and params[1] <= params[0]:
        return (), -np.inf
    return params, ll


def dist_fit(trace, feature="dl", seed: int | None = None, families=None) -> Sampler:
    """Best maximum-likelihood fit over a fixed set of families.

    Ties on log-likelihood go to the family with fewer parameters. If no
    family fits (for instance constant data) the uniform fit is returned.
    """
    x = _feature_values(trace, feature)
    if x.size < 10:
        raise ValueError("distribution fit needs at least 10 observations")
    best = None
    for name in families or FAMILIES:
        params, ll = fit_family(x, name)
        if not np.isfinite(ll):
            continue
        key = (ll, -FAMILIES[name].nparams)
        if best is None or key > best[0]:
            best = (key, name, params)
    if best is None:
        log.warning("no distribution family fits; falling back to the uniform fit")
        return uniform_fit(x, seed=seed)
    (ll, _), name, params = best
    return Sampler(name, params, seed, loglik=ll)


def baseline_generate(samplers: tuple[Sampler, Sampler], users: int, steps: int) -> TraceTensor:
    """Independent draws for every user, step and feature."""
    if users < 1 or steps < 1:
        raise ValueError("users and steps must be >= 1")
    dl, ul = samplers
    values = np.stack([dl.sample((users, steps)), ul.sample((users, steps))], axis=-1)
    return TraceTensor(values)


def fit_pair(trace, kind: str = "uni", seed: int | None = None) -> tuple[Sampler, Sampler]:
    """Fit both features with ``uni`` or ``dist``; the two samplers get independent streams."""
    as_array(trace)
    fit = {"uni": uniform_fit, "dist": dist_fit}[kind]
    seeds = np.random.SeedSequence(seed).spawn(2) if seed is not None else (None, None)
    return tuple(
        fit(trace, f, seed=None if s is None else int(s.generate_state(1)[0])) for f, s in zip(("dl", "ul"), seeds)
    )
