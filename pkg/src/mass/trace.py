"""Trace data model, ingestion, context labelling and synthetic source data.

A trace tensor is a ``(users, steps, 2)`` array where the last axis holds
``(download, upload)``.
"""

from __future__ import annotations

import csv
import enum
import io
import logging
import math
from dataclasses import dataclass, field
from itertools import groupby
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

DL, UL = 0, 1
FEATURES = {"dl": DL, "download": DL, "ul": UL, "upload": UL}

RSSI_LOW_THRESHOLD = -75.0
STREAM_CATEGORIES = frozenset(
    {"MUSIC_AND_AUDIO", "MAPS_AND_NAVIGATION", "SPORTS", "VIDEO_PLAYERS"}
)
CSV_HEADER = ["user", "timestamp", "rx_bytes", "tx_bytes", "rssi", "app_category"]


def feature_index(feature) -> int:
    if isinstance(feature, str):
        return FEATURES[feature.lower()]
    if feature not in (DL, UL):
        raise ValueError(f"unknown feature {feature!r}")
    return int(feature)


class ContextLabel(str, enum.Enum):
    GLOBAL = "GLOBAL"
    HIGH = "HIGH"
    LOW = "LOW"
    STREAM = "STREAM"
    INTERACT = "INTERACT"
    STREAM_HIGH = "STREAM_HIGH"
    STREAM_LOW = "STREAM_LOW"
    INTERACT_HIGH = "INTERACT_HIGH"
    INTERACT_LOW = "INTERACT_LOW"

    @property
    def app(self) -> str | None:
        head = self.value.split("_")[0]
        return head if head in ("STREAM", "INTERACT") else None

    @property
    def signal(self) -> str | None:
        tail = self.value.split("_")[-1]
        return tail if tail in ("HIGH", "LOW") else None

    @classmethod
    def compose(cls, app: str | None, signal: str | None) -> "ContextLabel":
        parts = [p for p in (app, signal) if p]
        return cls("_".join(parts)) if parts else cls.GLOBAL

    @classmethod
    def parse(cls, name: str | None) -> "ContextLabel":
        """Case-insensitive lookup; ``None`` and ``""`` mean GLOBAL."""
        if not name:
            return cls.GLOBAL
        try:
            return cls(name.strip().upper())
        except ValueError:
            raise ValueError(f"unknown context {name!r}") from None


CONTEXTS = tuple(c for c in ContextLabel if c is not ContextLabel.GLOBAL)


@dataclass(frozen=True)
class SampleRecord:
    user_id: str
    timestamp: float
    rx_bytes: float
    tx_bytes: float
    rssi: float | None = None
    app_category: str | None = None

    def __post_init__(self):
        if self.rx_bytes < 0 or self.tx_bytes < 0:
            raise ValueError(f"negative byte count in {self}")


@dataclass
class TraceTensor:
    values: np.ndarray
    normalization: str = "raw"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 3 or self.values.shape[2] != 2:
            raise ValueError(f"trace must have shape (U, K, 2), got {self.values.shape}")
        if self.normalization not in ("raw", "pos", "minmax"):
            raise ValueError(f"unknown normalization {self.normalization!r}")

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)

    def __len__(self):
        return self.values.shape[0]

    @property
    def users(self) -> int:
        return self.values.shape[0]

    @property
    def steps(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self):
        return self.values.shape


def as_array(trace) -> np.ndarray:
    arr = np.asarray(trace, dtype=float)
    if arr.ndim != 3 or arr.shape[2] != 2:
        raise ValueError(f"trace must have shape (U, K, 2), got {arr.shape}")
    return arr


@dataclass
class HourlySeries:
    """One user's aggregated series with per-step context labels."""

    user_id: str
    hours: np.ndarray  # bucket start, seconds since epoch
    values: np.ndarray  # (T, 2) mean (dl, ul) per bucket
    signal: list[str] = field(default_factory=list)
    app: list[str | None] = field(default_factory=list)

    def __len__(self):
        return len(self.hours)


@dataclass
class AggregationConfig:
    samples_per_bucket: int = 6
    sample_interval: float = 600.0
    rssi_threshold: float = RSSI_LOW_THRESHOLD

    @property
    def bucket_seconds(self) -> float:
        return self.samples_per_bucket * self.sample_interval


def app_context(category: str | None) -> str | None:
    """Map a store category to STREAM/INTERACT; None when it cannot be mapped."""
    if category is None:
        return None
    category = category.strip().upper()
    if not category:
        return None
    return "STREAM" if category in STREAM_CATEGORIES else "INTERACT"


def read_csv(source) -> list[SampleRecord]:
    """Read records from a path or an open text stream in the ingestion CSV format."""
    if isinstance(source, (str, bytes)) or hasattr(source, "__fspath__"):
        with open(source, newline="") as fh:
            return read_csv(fh)
    reader = csv.DictReader(source)
    missing = set(CSV_HEADER) - set(reader.fieldnames or ())
    if missing:
        raise ValueError(f"CSV is missing columns: {sorted(missing)}")
    records = []
    for row in reader:
        rssi = row["rssi"].strip()
        records.append(
            SampleRecord(
                user_id=row["user"],
                timestamp=float(row["timestamp"]),
                rx_bytes=float(row["rx_bytes"]),
                tx_bytes=float(row["tx_bytes"]),
                rssi=float(rssi) if rssi else None,
                app_category=row["app_category"].strip() or None,
            )
        )
    return records


def ingest(records: Iterable[SampleRecord], cfg: AggregationConfig | None = None) -> list[HourlySeries]:
    """Aggregate raw samples into per-user hourly series with context labels.

    Buckets are fixed wall-clock windows of ``samples_per_bucket *
    sample_interval`` seconds. A user's trailing bucket with fewer than
    ``samples_per_bucket`` samples is dropped. The signal label is LOW when
    the bucket's mean RSSI is below the threshold; buckets without RSSI
    inherit the previous label (HIGH at the start). The app label is the last
    mappable category seen up to the end of the bucket.
    """
    cfg = cfg or AggregationConfig()
    width = cfg.bucket_seconds
    ordered = sorted(records, key=lambda r: (r.user_id, r.timestamp))
    out = []
    for user, user_records in groupby(ordered, key=lambda r: r.user_id):
        buckets = [
            (start, list(group))
            for start, group in groupby(user_records, key=lambda r: math.floor(r.timestamp / width))
        ]
        if buckets and len(buckets[-1][1]) < cfg.samples_per_bucket:
            buckets.pop()
        if not buckets:
            continue
        hours, values, signal, app = [], [], [], []
        last_signal, last_app = "HIGH", None
        for start, group in buckets:
            hours.append(start * width)
            values.append(
                (np.mean([r.rx_bytes for r in group]), np.mean([r.tx_bytes for r in group]))
            )
            rssi = [r.rssi for r in group if r.rssi is not None]
            if rssi:
                last_signal = "LOW" if np.mean(rssi) < cfg.rssi_threshold else "HIGH"
            signal.append(last_signal)
            for r in group:
                mapped = app_context(r.app_category)
                if mapped is not None:
                    last_app = mapped
            app.append(last_app)
        out.append(
            HourlySeries(user, np.asarray(hours, dtype=float), np.asarray(values, dtype=float), signal, app)
        )
    return out


def write_series_csv(series: Sequence[HourlySeries], dest) -> None:
    """Write labelled hourly series as ``user,hour,dl,ul,signal,app`` rows."""
    if isinstance(dest, (str, bytes)) or hasattr(dest, "__fspath__"):
        with open(dest, "w", newline="") as fh:
            return write_series_csv(series, fh)
    writer = csv.writer(dest, lineterminator="\n")
    writer.writerow(["user", "hour", "dl", "ul", "signal", "app"])
    for s in series:
        for t in range(len(s)):
            writer.writerow(
                [s.user_id, repr(float(s.hours[t])), repr(float(s.values[t, DL])),
                 repr(float(s.values[t, UL])), s.signal[t], s.app[t] or ""]
            )


def read_series_csv(source) -> list[HourlySeries]:
    if isinstance(source, (str, bytes)) or hasattr(source, "__fspath__"):
        with open(source, newline="") as fh:
            return read_series_csv(fh)
    rows = list(csv.DictReader(source))
    out = []
    for user, group in groupby(rows, key=lambda r: r["user"]):
        group = list(group)
        out.append(
            HourlySeries(
                user,
                np.array([float(r["hour"]) for r in group]),
                np.array([[float(r["dl"]), float(r["ul"])] for r in group]),
                [r["signal"] for r in group],
                [r["app"] or None for r in group],
            )
        )
    return out


def _context_mask(s: HourlySeries, label: ContextLabel) -> np.ndarray:
    sig, app = label.signal, label.app
    return np.array(
        [(sig is None or s.signal[t] == sig) and (app is None or s.app[t] == app) for t in range(len(s))],
        dtype=bool,
    )


def series_to_tensor(series: Sequence[HourlySeries], seq_len: int) -> TraceTensor:
    """Stack the first ``seq_len`` steps of each user.

    Users shorter than ``seq_len`` are padded by carrying their last value
    forward.
    """
    rows = []
    for s in series:
        v = s.values[:seq_len]
        if len(v) == 0:
            continue
        if len(v) < seq_len:
            v = np.concatenate([v, np.repeat(v[-1:], seq_len - len(v), axis=0)])
        rows.append(v)
    if not rows:
        return TraceTensor(np.zeros((0, seq_len, 2)))
    return TraceTensor(np.stack(rows))


def split_series(
    series: Sequence[HourlySeries], seed: int, *, min_hours: int = 10
) -> tuple[list[HourlySeries], list[HourlySeries]]:
    """Discard users with fewer than ``min_hours`` steps, then split 50/50 by user."""
    eligible = [s for s in series if len(s) >= min_hours]
    dropped = len(series) - len(eligible)
    if dropped:
        log.info("discarded %d users with fewer than %d hours", dropped, min_hours)
    if len(eligible) < 2:
        raise ValueError(f"need at least 2 users with >= {min_hours} hours, got {len(eligible)}")
    order = np.random.default_rng(seed).permutation(len(eligible))
    half = (len(eligible) + 1) // 2
    return [eligible[i] for i in order[:half]], [eligible[i] for i in order[half:]]


def split_train_test(
    series: Sequence[HourlySeries], seed: int, *, min_hours: int = 10, seq_len: int = 12
) -> tuple[TraceTensor, TraceTensor]:
    train, test = split_series(series, seed, min_hours=min_hours)
    return series_to_tensor(train, seq_len), series_to_tensor(test, seq_len)


def split_users(trace, seed: int) -> tuple[TraceTensor, TraceTensor]:
    """Random 50/50 split of a trace tensor by user."""
    arr = as_array(trace)
    if arr.shape[0] < 2:
        raise ValueError("need at least 2 users to split")
    order = np.random.default_rng(seed).permutation(arr.shape[0])
    half = (arr.shape[0] + 1) // 2
    return TraceTensor(arr[np.sort(order[:half])]), TraceTensor(arr[np.sort(order[half:])])


@dataclass
class ContextSplit:
    label: ContextLabel
    trace: TraceTensor
    significant: bool
    mean_delta_dl: float
    mean_delta_ul: float
    users: int = 0


def _rel_delta(ctx_mean: float, global_mean: float) -> float:
    if global_mean == 0:
        return 0.0 if ctx_mean == 0 else math.inf
    return (ctx_mean - global_mean) / global_mean


def context_split(
    series: Sequence[HourlySeries],
    *,
    seq_len: int = 12,
    min_users: int = 5,
    min_delta: float = 0.10,
) -> list[ContextSplit]:
    """Build all eight candidate context cohorts and flag the significant ones.

    A user qualifies for a context when it has at least ``seq_len`` steps with
    that context; the cohort trace holds the first ``seq_len`` such steps of
    every qualifying user. Mean deltas compare all steps of the context with
    all steps of the dataset. A cohort is significant when it has
    ``min_users`` qualifying users and either delta exceeds ``min_delta``.
    """
    if series:
        everything = np.concatenate([s.values for s in series if len(s)] or [np.zeros((0, 2))])
    else:
        everything = np.zeros((0, 2))
    global_mean = everything.mean(axis=0) if len(everything) else np.zeros(2)
    splits = []
    for label in CONTEXTS:
        rows, steps = [], []
        for s in series:
            mask = _context_mask(s, label)
            if not mask.any():
                continue
            v = s.values[mask]
            steps.append(v)
            if len(v) >= seq_len:
                rows.append(v[:seq_len])
        ctx = np.concatenate(steps) if steps else np.zeros((0, 2))
        if len(ctx):
            d_dl = _rel_delta(ctx[:, DL].mean(), global_mean[DL])
            d_ul = _rel_delta(ctx[:, UL].mean(), global_mean[UL])
        else:
            d_dl = d_ul = 0.0
        significant = len(rows) >= min_users and (abs(d_dl) > min_delta or abs(d_ul) > min_delta)
        trace = TraceTensor(np.stack(rows) if rows else np.zeros((0, seq_len, 2)))
        splits.append(ContextSplit(label, trace, significant, d_dl, d_ul, len(rows)))
    return splits


def normalize(trace, mode: str = "minmax") -> TraceTensor:
    """Per-user, per-feature min-max scaling to [0, 1], or clamping at zero.

    A constant series maps to all zeros under minmax.
    """
    arr = as_array(trace)
    if mode == "pos":
        return TraceTensor(np.maximum(arr, 0.0), "pos")
    if mode != "minmax":
        raise ValueError(f"unknown normalization mode {mode!r}")
    lo = arr.min(axis=1, keepdims=True)
    span = arr.max(axis=1, keepdims=True) - lo
    safe = np.where(span > 0, span, 1.0)
    out = np.where(span > 0, (arr - lo) / safe, 0.0)
    return TraceTensor(np.clip(out, 0.0, 1.0), "minmax")


# -- synthetic source traces ---------------------------------------------------


def _ar_normals(rng: np.random.Generator, users: int, steps: int, autocorr: float) -> np.ndarray:
    z = rng.standard_normal((users, steps))
    if autocorr:
        scale = math.sqrt(1.0 - autocorr**2)
        for t in range(1, steps):
            z[:, t] = autocorr * z[:, t - 1] + scale * z[:, t]
    return z


def _skew(x: np.ndarray) -> float:
    c = x - x.mean()
    sd = math.sqrt(np.mean(c**2))
    return float(np.mean(c**3) / sd**3) if sd > 0 else 0.0


def _warp(z: np.ndarray, lam: float) -> np.ndarray:
    # exponential warp: right skew for lam > 0, left skew for lam < 0
    if abs(lam) < 1e-12:
        return z
    return np.expm1(lam * z) / lam


def _match_skew(z: np.ndarray, target: float, tol: float = 1e-9) -> np.ndarray:
    lo, hi = -3.0, 3.0
    s_lo, s_hi = _skew(_warp(z, lo)), _skew(_warp(z, hi))
    if not s_lo <= target <= s_hi:
        raise ValueError(f"skewness {target} outside attainable range [{s_lo:.3g}, {s_hi:.3g}]")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if _skew(_warp(z, mid)) < target:
            lo = mid
        else:
            hi = mid
        if hi - lo < tol:
            break
    return _warp(z, 0.5 * (lo + hi))


def _standardize(x: np.ndarray, mu: float, sigma: float) -> np.ndarray:
    sd = x.std()
    return mu + sigma * (x - x.mean()) / sd if sd > 0 else np.full_like(x, mu)


def _mean_user_pearson(a: np.ndarray, b: np.ndarray) -> float:
    ac = a - a.mean(axis=1, keepdims=True)
    bc = b - b.mean(axis=1, keepdims=True)
    den = np.sqrt((ac**2).sum(axis=1) * (bc**2).sum(axis=1))
    r = np.where(den > 0, (ac * bc).sum(axis=1) / np.where(den > 0, den, 1.0), 0.0)
    return float(r.mean())


def synth_dataset(
    seed: int,
    users: int = 100,
    steps: int = 12,
    corr: float = 0.5,
    moments: tuple[float, float, float] = (1.0, 0.5, 1.5),
    ul_moments: tuple[float, float, float] | None = None,
    autocorr: float = 0.0,
) -> TraceTensor:
    """Seeded synthetic traces with a chosen dl/ul correlation and marginal moments.

    ``corr`` is the across-user mean of per-user Pearson coefficients;
    ``moments`` is the lumped ``(mean, std, skew)`` of download (and of
    upload unless ``ul_moments`` is given). Both are hit by bisection on the
    fixed underlying Gaussian draws, so the result matches the targets to
    numerical precision.
    """
    if users < 2 or steps < 2:
        raise ValueError("need at least 2 users and 2 steps")
    if not -1.0 <= corr <= 1.0:
        raise ValueError(f"correlation {corr} outside [-1, 1]")
    targets = [tuple(map(float, moments)), tuple(map(float, ul_moments or moments))]
    for mu, sigma, skew in targets:
        if sigma < 0:
            raise ValueError("standard deviation must be non-negative")
        if sigma == 0 and skew != 0:
            raise ValueError("a constant series cannot have non-zero skewness")
    if any(sigma == 0 for _, sigma, _ in targets) and corr != 0:
        raise ValueError("a constant feature has zero correlation by convention")

    rng = np.random.default_rng(seed)
    z_dl = _ar_normals(rng, users, steps, autocorr)
    noise = _ar_normals(rng, users, steps, autocorr)

    def feature(z, target):
        mu, sigma, skew = target
        if sigma == 0:
            return np.full_like(z, mu)
        return _standardize(_match_skew(z, skew), mu, sigma)

    dl = feature(z_dl, targets[0])
    if abs(corr) == 1.0:
        (mu, sigma, skew), (mu_dl, sigma_dl, skew_dl) = targets[1], targets[0]
        if not math.isclose(skew, corr * skew_dl, abs_tol=1e-12):
            raise ValueError("perfect correlation forces upload skew = corr * download skew")
        ul = mu + corr * sigma * (dl - mu_dl) / sigma_dl
    else:
        def ul_for(rho):
            return feature(rho * z_dl + math.sqrt(1 - rho * rho) * noise, targets[1])

        lo, hi = -0.999, 0.999
        c_lo, c_hi = _mean_user_pearson(dl, ul_for(lo)), _mean_user_pearson(dl, ul_for(hi))
        if not c_lo <= corr <= c_hi:
            raise ValueError(f"correlation {corr} outside attainable range [{c_lo:.3g}, {c_hi:.3g}]")
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if _mean_user_pearson(dl, ul_for(mid)) < corr:
                lo = mid
            else:
                hi = mid
            if hi - lo < 1e-10:
                break
        ul = ul_for(0.5 * (lo + hi))
    values = np.stack([dl, ul], axis=-1)
    if values.min() < 0:
        raise ValueError("target moments require negative volumes; raise the mean or lower the spread")
    return TraceTensor(values, "raw")


# -- text interchange ------------------------------------------------------------


def format_number(x: float) -> str:
    """Shortest round-trip decimal."""
    x = float(x)
    if x == int(x) and abs(x) < 1e16:
        return str(int(x))
    return repr(x)


def format_text(trace) -> str:
    """One ``dl ul`` line per step, a blank line between users."""
    arr = as_array(trace)
    blocks = [
        "".join(f"{format_number(dl)} {format_number(ul)}\n" for dl, ul in user) for user in arr
    ]
    return "\n".join(blocks)


def parse_text(text: str) -> TraceTensor:
    users, current = [], []
    for line in io.StringIO(text):
        line = line.strip()
        if not line:
            if current:
                users.append(current)
                current = []
            continue
        dl, ul = line.split()
        current.append((float(dl), float(ul)))
    if current:
        users.append(current)
    if not users:
        raise ValueError("no trace data found")
    lengths = {len(u) for u in users}
    if len(lengths) != 1:
        raise ValueError(f"users have differing sequence lengths {sorted(lengths)}")
    return TraceTensor(np.asarray(users, dtype=float))


def load_trace(path) -> TraceTensor:
    with open(path) as fh:
        return parse_text(fh.read())


def save_trace(trace, path) -> None:
    with open(path, "w") as fh:
        fh.write(format_text(trace))
