"""Recurrent generator / bidirectional recurrent discriminator and their losses."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import torch
from torch import nn

from .metrics import corr_vector
from .trace import ContextLabel, as_array

EPS = 1e-7
SIGMA_FLOOR = 1e-8
CHECKPOINT_MAGIC = b"MASSCKPT 1\n"


@dataclass
class GanConfig:
    hidden_size: int = 64
    num_layers: int = 2
    seq_len: int = 12
    batch_users: int = 100
    latent_dim: int = 2
    feature_dim: int = 2

    def __post_init__(self):
        if self.latent_dim != 2 or self.feature_dim != 2:
            raise ValueError("latent and feature dimensions are fixed at 2")
        if self.seq_len < 2 or self.batch_users < 2:
            raise ValueError("seq_len and batch_users must be >= 2")
        if self.hidden_size < 1 or self.num_layers < 1:
            raise ValueError("hidden_size and num_layers must be positive")


@dataclass
class TargetStats:
    """Training-data statistics the generator losses aim for.

    ``c_target`` is the across-user mean dl/ul Pearson coefficient; the
    moment targets hold one value per feature ``(dl, ul)`` and are across-user
    means of per-user moments.
    """

    c_target: float
    mu_target: tuple[float, float]
    sigma_target: tuple[float, float]
    skew_target: tuple[float, float]

    def __post_init__(self):
        if not abs(self.c_target) <= 1:
            raise ValueError(f"c_target {self.c_target} outside [-1, 1]")
        if min(self.sigma_target) < 0:
            raise ValueError("sigma_target must be non-negative")

    @classmethod
    def from_trace(cls, trace) -> "TargetStats":
        arr = as_array(trace)
        mu, sigma, skew = user_moments(torch.as_tensor(arr, dtype=torch.float64))
        return cls(
            c_target=float(corr_vector(arr)[0]),
            mu_target=tuple(float(v) for v in mu.mean(dim=0)),
            sigma_target=tuple(float(v) for v in sigma.mean(dim=0)),
            skew_target=tuple(float(v) for v in skew.mean(dim=0)),
        )

    def as_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        return cls(
            float(d["c_target"]),
            tuple(d["mu_target"]),
            tuple(d["sigma_target"]),
            tuple(d["skew_target"]),
        )


class Generator(nn.Module):
    """Unidirectional LSTM stack with a per-step affine head squashed to [0, 1]."""

    def __init__(self, cfg: GanConfig):
        super().__init__()
        self.lstm = nn.LSTM(cfg.latent_dim, cfg.hidden_size, cfg.num_layers, batch_first=True)
        self.head = nn.Linear(cfg.hidden_size, cfg.feature_dim)

    def forward(self, z):
        h, _ = self.lstm(z)
        return torch.sigmoid(self.head(h))


class Discriminator(nn.Module):
    """Bidirectional LSTM stack with a per-step logit head."""

    def __init__(self, cfg: GanConfig):
        super().__init__()
        self.lstm = nn.LSTM(
            cfg.feature_dim, cfg.hidden_size, cfg.num_layers, batch_first=True, bidirectional=True
        )
        self.head = nn.Linear(2 * cfg.hidden_size, 1)

    def forward(self, x):
        h, _ = self.lstm(x)
        return self.head(h).squeeze(-1)


def _init_uniform(module: nn.Module, generator: torch.Generator) -> None:
    for p in module.parameters():
        bound = 1.0 / math.sqrt(max(p.shape[-1] if p.dim() > 1 else p.shape[0], 1))
        with torch.no_grad():
            p.uniform_(-bound, bound, generator=generator)


class GanModel:
    def __init__(
        self,
        cfg: GanConfig | None = None,
        *,
        seed: int = 0,
        dtype: torch.dtype = torch.float32,
        stats: TargetStats | None = None,
        context: ContextLabel = ContextLabel.GLOBAL,
    ):
        self.cfg = cfg or GanConfig()
        self.dtype = dtype
        self.stats = stats
        self.context = ContextLabel(context)
        self.generator = Generator(self.cfg).to(dtype)
        self.discriminator = Discriminator(self.cfg).to(dtype)
        g = torch.Generator().manual_seed(seed)
        _init_uniform(self.generator, g)
        _init_uniform(self.discriminator, g)

    @property
    def generator_params(self) -> torch.Tensor:
        return nn.utils.parameters_to_vector(self.generator.parameters()).detach()

    @property
    def discriminator_params(self) -> torch.Tensor:
        return nn.utils.parameters_to_vector(self.discriminator.parameters()).detach()

    def set_generator_params(self, vec) -> None:
        nn.utils.vector_to_parameters(torch.as_tensor(vec, dtype=self.dtype), self.generator.parameters())

    def set_discriminator_params(self, vec) -> None:
        nn.utils.vector_to_parameters(
            torch.as_tensor(vec, dtype=self.dtype), self.discriminator.parameters()
        )

    def clone(self) -> "GanModel":
        other = GanModel(self.cfg, dtype=self.dtype, stats=self.stats, context=self.context)
        other.generator.load_state_dict(self.generator.state_dict())
        other.discriminator.load_state_dict(self.discriminator.state_dict())
        return other

    def latent(self, users: int, steps: int, seed: int | torch.Generator | None = None) -> torch.Tensor:
        """I.i.d. uniform latent batch on [0, 1]^2 of shape ``(users, steps, 2)``."""
        if isinstance(seed, torch.Generator):
            gen = seed
        else:
            gen = torch.Generator()
            if seed is None:
                gen.seed()
            else:
                gen.manual_seed(int(seed))
        return torch.rand((users, steps, self.cfg.latent_dim), generator=gen, dtype=self.dtype)

    def generate(self, users: int, steps: int, seed=None) -> np.ndarray:
        """Sample ``users`` traces of ``steps`` steps as a float64 array."""
        with torch.no_grad():
            out = generator_forward(self, self.latent(users, steps, seed))
        return out.double().numpy()


def _check_batch(x: torch.Tensor, name: str, width: int) -> None:
    if x.dim() != 3 or x.shape[2] != width:
        raise ValueError(f"{name} must have shape (b, K, {width}), got {tuple(x.shape)}")


def generator_forward(model: GanModel, z) -> torch.Tensor:
    z = torch.as_tensor(z, dtype=model.dtype)
    _check_batch(z, "latent batch", model.cfg.latent_dim)
    return model.generator(z)


def discriminator_forward(model: GanModel, trace) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-step probabilities and logits, both ``(b, K)``."""
    x = torch.as_tensor(trace, dtype=model.dtype)
    _check_batch(x, "trace", model.cfg.feature_dim)
    logits = model.discriminator(x)
    return torch.sigmoid(logits), logits


def trace_probability(probs: torch.Tensor) -> torch.Tensor:
    """Per-trace probability: mean of the per-step probabilities."""
    return probs.mean(dim=-1)


# -- differentiable statistics --------------------------------------------------


def user_pearson(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Pearson r per row of ``(b, K)`` inputs; 0 where either row is constant."""
    xc = x - x.mean(dim=-1, keepdim=True)
    yc = y - y.mean(dim=-1, keepdim=True)
    sxx = (xc * xc).sum(dim=-1)
    syy = (yc * yc).sum(dim=-1)
    ok = (sxx > 0) & (syy > 0)
    den = torch.sqrt(torch.where(ok, sxx * syy, torch.ones_like(sxx)))
    return torch.where(ok, (xc * yc).sum(dim=-1) / den, torch.zeros_like(sxx))


def user_moments(x: torch.Tensor):
    """Per-row population mean, std and skewness over the step axis (dim 1)."""
    mu = x.mean(dim=1)
    c = x - mu.unsqueeze(1)
    var = (c * c).mean(dim=1)
    ok = var > SIGMA_FLOOR**2
    sigma = torch.sqrt(torch.where(ok, var, torch.ones_like(var)))
    m3 = (c**3).mean(dim=1)
    skew = torch.where(ok, m3 / sigma**3, torch.zeros_like(var))
    sigma = torch.where(ok, sigma, torch.zeros_like(var))
    return mu, sigma, skew


def feature_series(model: GanModel, batch: torch.Tensor, mode: str) -> list[torch.Tensor]:
    """The (dl, ul) sequences the statistic losses act on.

    ``raw`` uses the trace values; ``representation`` runs the discriminator
    on the trace with the other feature zeroed and takes its per-step logits.
    """
    if mode == "raw":
        return [batch[:, :, 0], batch[:, :, 1]]
    if mode != "representation":
        raise ValueError(f"unknown statistics mode {mode!r}")
    out = []
    for f in range(2):
        masked = torch.zeros_like(batch)
        masked[:, :, f] = batch[:, :, f]
        out.append(model.discriminator(masked))
    return out


# -- losses ---------------------------------------------------------------------


def loss_discrimination(p_gen: torch.Tensor) -> torch.Tensor:
    """Mean log(1 - D(G(z))) over per-trace probabilities."""
    return torch.log(torch.clamp(1 - p_gen, min=EPS)).mean()


def loss_discriminator_train(p_real: torch.Tensor, p_gen: torch.Tensor) -> torch.Tensor:
    if p_real.shape != p_gen.shape:
        raise ValueError("real and generated batches must have equal size")
    return (
        -torch.log(torch.clamp(p_real, min=EPS)) - torch.log(torch.clamp(1 - p_gen, min=EPS))
    ).mean()


def loss_corr_dist(model: GanModel, batch: torch.Tensor, stats: TargetStats, mode: str = "raw"):
    x, y = feature_series(model, batch, mode)
    return torch.abs(stats.c_target - user_pearson(x, y).mean())


def loss_mom_dist(model: GanModel, batch: torch.Tensor, stats: TargetStats, mode: str = "raw"):
    total = batch.new_zeros(())
    for f, series in enumerate(feature_series(model, batch, mode)):
        mu, sigma, skew = user_moments(series)
        total = (
            total
            + (stats.mu_target[f] - mu.mean()) ** 2
            + (stats.sigma_target[f] - sigma.mean()) ** 2
            + (stats.skew_target[f] - skew.mean()) ** 2
        )
    return total


@dataclass
class LossParts:
    disc: torch.Tensor
    corr: torch.Tensor
    mom: torch.Tensor
    total: torch.Tensor = field(default=None)


def loss_total(
    model: GanModel,
    batch: torch.Tensor,
    stats: TargetStats,
    delta_corr: int = 1,
    delta_mom: int = 1,
    mode: str = "raw",
) -> LossParts:
    """Generator loss: discrimination + delta-gated correlation and moment terms."""
    if delta_corr not in (0, 1) or delta_mom not in (0, 1):
        raise ValueError("delta values must be 0 or 1")
    p_gen = trace_probability(discriminator_forward(model, batch)[0])
    parts = LossParts(
        disc=loss_discrimination(p_gen),
        corr=loss_corr_dist(model, batch, stats, mode),
        mom=loss_mom_dist(model, batch, stats, mode),
    )
    parts.total = parts.disc + delta_corr * parts.corr + delta_mom * parts.mom
    return parts


GENERATOR_LOSSES = ("disc", "corr", "mom", "total")


def loss_value(model, selector, z, real=None, stats=None, deltas=(1, 1), mode="raw") -> torch.Tensor:
    """Scalar loss selected by name for a latent batch (and real batch for the discriminator)."""
    fake = generator_forward(model, z)
    if selector == "discriminator":
        p_real = trace_probability(discriminator_forward(model, real)[0])
        p_gen = trace_probability(discriminator_forward(model, fake)[0])
        return loss_discriminator_train(p_real, p_gen)
    if selector == "disc":
        return loss_discrimination(trace_probability(discriminator_forward(model, fake)[0]))
    if selector == "corr":
        return loss_corr_dist(model, fake, stats, mode)
    if selector == "mom":
        return loss_mom_dist(model, fake, stats, mode)
    if selector == "total":
        return loss_total(model, fake, stats, *deltas, mode=mode).total
    raise ValueError(f"unknown loss selector {selector!r}")


def gradients(model, selector, z, real=None, stats=None, deltas=(1, 1), mode="raw") -> torch.Tensor:
    """Exact reverse-mode gradient of a loss as a flat parameter-shaped vector.

    Generator losses differentiate with respect to the generator parameters,
    ``"discriminator"`` with respect to the discriminator parameters.
    """
    params = list(
        model.discriminator.parameters() if selector == "discriminator" else model.generator.parameters()
    )
    loss = loss_value(model, selector, z, real, stats, deltas, mode)
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite {selector} loss {loss.item()}")
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    flat = torch.cat(
        [(g if g is not None else torch.zeros_like(p)).reshape(-1) for g, p in zip(grads, params)]
    )
    bad = ~torch.isfinite(flat)
    if bad.any():
        idx = torch.nonzero(bad).flatten()[:5].tolist()
        raise FloatingPointError(
            f"non-finite gradient of {selector} loss at parameter indices {idx} "
            f"(param norm {nn.utils.parameters_to_vector(params).norm().item():.4g})"
        )
    return flat


# -- checkpoints ----------------------------------------------------------------


def _dtype_name(dtype: torch.dtype) -> str:
    return {torch.float32: "float32", torch.float64: "float64"}[dtype]


def save_checkpoint(model: GanModel, path, extra: dict | None = None) -> None:
    """Write a self-describing checkpoint: magic line, JSON header line, raw little-endian params."""
    tensors = []
    blobs = []
    for prefix, module in (("generator", model.generator), ("discriminator", model.discriminator)):
        for name, t in module.state_dict().items():
            arr = t.detach().cpu().numpy()
            tensors.append([f"{prefix}.{name}", list(arr.shape)])
            blobs.append(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    header = {
        "config": asdict(model.cfg),
        "context": model.context.value,
        "dtype": _dtype_name(model.dtype),
        "stats": model.stats.as_dict() if model.stats else None,
        "tensors": tensors,
        "extra": extra or {},
    }
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> GanModel:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    nl = data.index(b"\n", len(CHECKPOINT_MAGIC))
    header = json.loads(data[len(CHECKPOINT_MAGIC):nl])
    dtype = {"float32": torch.float32, "float64": torch.float64}[header["dtype"]]
    np_dtype = np.dtype(header["dtype"]).newbyteorder("<")
    stats = TargetStats.from_dict(header["stats"]) if header.get("stats") else None
    model = GanModel(GanConfig(**header["config"]), dtype=dtype, stats=stats, context=header["context"])
    model.extra = header.get("extra", {})
    offset = nl + 1
    states = {"generator": {}, "discriminator": {}}
    for name, shape in header["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * np_dtype.itemsize
        if offset + nbytes > len(data):
            raise ValueError(f"{path}: truncated checkpoint")
        arr = np.frombuffer(data, dtype=np_dtype, count=count, offset=offset).reshape(shape)
        offset += nbytes
        prefix, key = name.split(".", 1)
        states[prefix][key] = torch.from_numpy(arr.astype(np_dtype.newbyteorder("="), copy=True))
    if offset != len(data):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    model.generator.load_state_dict(states["generator"])
    model.discriminator.load_state_dict(states["discriminator"])
    for module in (model.generator, model.discriminator):
        for p in module.parameters():
            if not torch.isfinite(p).all():
                raise ValueError(f"{path}: non-finite parameters")
    return model
