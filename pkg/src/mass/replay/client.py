"""Replay client: trace cache, context selection, epoch plan and execution."""

from __future__ import annotations

import json
import logging
import threading
import time
import urllib.error
import urllib.request
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterator, Protocol, Sequence

import numpy as np

from ..trace import ContextLabel
from .config import ReplayConfig
from .perf import Header, SessionResult, tcp_session, udp_session

log = logging.getLogger(__name__)

RSSI_THRESHOLD = -75.0
APP_CONTEXTS = ("STREAM", "INTERACT")
REPLAY_CONTEXTS = (
    ContextLabel.STREAM_HIGH,
    ContextLabel.STREAM_LOW,
    ContextLabel.INTERACT_HIGH,
    ContextLabel.INTERACT_LOW,
)


class TraceSource(Protocol):
    def fetch(self, context: ContextLabel, seq_len: int) -> np.ndarray: ...


class HttpTraceSource:
    """Fetches one minmax-normalized user trace per call from the generation service."""

    def __init__(self, host: str, port: int, seed: int | None = None, timeout: float = 10.0):
        self.url = f"http://{host}:{port}/generate?format=json"
        self.seed = seed
        self.timeout = timeout
        self.calls = 0

    def fetch(self, context: ContextLabel, seq_len: int) -> np.ndarray:
        body = {"context": context.value, "users": 1, "seq_len": seq_len, "normalize": "minmax"}
        if self.seed is not None:
            body["seed"] = self.seed + self.calls
        self.calls += 1
        req = urllib.request.Request(
            self.url, data=json.dumps(body).encode(), headers={"Content-Type": "application/json"}, method="POST"
        )
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            trace = np.asarray(json.load(resp)["trace"], dtype=float)
        if trace.shape != (1, seq_len, 2):
            raise ValueError(f"unexpected trace shape {trace.shape}")
        return trace[0]


class FetchError(RuntimeError):
    pass


def precache_traces(
    source: TraceSource,
    seq_len: int,
    contexts: Sequence[ContextLabel] = REPLAY_CONTEXTS,
    retries: int = 5,
    backoff: float = 0.5,
    sleep: Callable[[float], None] = time.sleep,
) -> dict[ContextLabel, np.ndarray]:
    """One trace of ``seq_len`` steps per context, fetched before replay starts."""
    cache = {}
    for ctx in contexts:
        delay = backoff
        for attempt in range(retries + 1):
            try:
                cache[ctx] = source.fetch(ctx, seq_len)
                break
            except (OSError, urllib.error.URLError, ValueError) as exc:
                if attempt == retries:
                    raise FetchError(f"could not fetch {ctx.value} trace after {retries + 1} attempts: {exc}") from exc
                log.warning("fetch %s failed (%s); retrying in %.1fs", ctx.value, exc, delay)
                sleep(delay)
                delay *= 2
    return cache


def next_app_context(current: str, stay_probs: dict[str, float], rng: np.random.Generator) -> str:
    if rng.random() < stay_probs[current]:
        return current
    return "INTERACT" if current == "STREAM" else "STREAM"


def signal_context(rssi: float | None, use_signal: bool = True) -> str:
    if use_signal and rssi is not None and rssi < RSSI_THRESHOLD:
        return "LOW"
    return "HIGH"


class SignalProvider(Protocol):
    def rssi(self, epoch: int) -> float | None: ...


@dataclass
class ConstantSignal:
    value: float | None = None

    def rssi(self, epoch: int) -> float | None:
        return self.value


class ScriptedSignal:
    """RSSI per epoch from a list; the last value repeats once the script runs out."""

    def __init__(self, values: Sequence[float | None]):
        if not values:
            raise ValueError("empty signal script")
        self.values = list(values)

    @classmethod
    def from_file(cls, path) -> "ScriptedSignal":
        vals = []
        for line in Path(path).read_text().splitlines():
            line = line.strip()
            if line and not line.startswith("#"):
                vals.append(None if line.lower() in ("none", "nan", "-") else float(line))
        return cls(vals)

    def rssi(self, epoch: int) -> float | None:
        return self.values[min(epoch, len(self.values) - 1)]


class WirelessSignal:
    """Reads the link level of the first interface in /proc/net/wireless (Linux)."""

    def __init__(self, path: str = "/proc/net/wireless"):
        self.path = Path(path)

    def rssi(self, epoch: int) -> float | None:
        try:
            lines = self.path.read_text().splitlines()[2:]
        except OSError:
            return None
        for line in lines:
            fields = line.split()
            if len(fields) >= 4:
                try:
                    return float(fields[3].rstrip("."))
                except ValueError:
                    continue
        return None


@dataclass(frozen=True)
class EpochStep:
    index: int
    app_context: str
    signal_context: str
    dl_rate: float
    ul_rate: float
    transport: str

    @property
    def context(self) -> ContextLabel:
        return ContextLabel.compose(self.app_context, self.signal_context)


class ReplayPlanner:
    """Yields epoch steps; all randomness comes from ``seed``.

    Trace values are clipped to [0, 1] before scaling by the max rates.
    """

    def __init__(self, cfg: ReplayConfig, cache: dict[ContextLabel, np.ndarray], signal: SignalProvider,
                 seed: int | None = None):
        self.cfg = cfg
        self.cache = cache
        self.signal = signal
        app_ss, transport_ss = np.random.SeedSequence(cfg.seed if seed is None else seed).spawn(2)
        self.app_rng = np.random.default_rng(app_ss)
        self.transport_rng = np.random.default_rng(transport_ss)
        self.app = cfg.initial_context
        self.index = 0

    def step(self, position: int) -> EpochStep:
        """Plan the epoch at ``position`` within the current cached sequence."""
        if self.index > 0:
            self.app = next_app_context(self.app, self.cfg.stay_probs, self.app_rng)
        sig = signal_context(self.signal.rssi(self.index), self.cfg.use_signal)
        label = ContextLabel.compose(self.app, sig)
        dl, ul = np.clip(self.cache[label][position], 0.0, 1.0)
        transport = "UDP" if self.transport_rng.random() < self.cfg.udp_prob else "TCP"
        step = EpochStep(self.index, self.app, sig, float(dl) * self.cfg.max_down, float(ul) * self.cfg.max_up,
                         transport)
        self.index += 1
        return step

    def steps(self) -> Iterator[EpochStep]:
        for pos in range(self.cfg.seq_len):
            yield self.step(pos)


def plan_replay(cfg: ReplayConfig, cache, signal: SignalProvider, seed: int | None = None) -> list[EpochStep]:
    return list(ReplayPlanner(cfg, cache, signal, seed).steps())


@dataclass
class PerfRecord:
    epoch: int
    direction: str
    transport: str
    app_context: str
    signal_context: str
    requested_mbps: float
    achieved_mbps: float
    bytes: int
    duration: float
    partial: bool = False
    error: str = ""

    COLUMNS = ("epoch", "direction", "transport", "app_context", "signal_context", "requested_mbps",
               "achieved_mbps", "bytes", "duration", "partial", "error")

    def to_tsv(self) -> str:
        d = asdict(self)
        d["partial"] = int(self.partial)
        d["error"] = self.error.replace("\t", " ").replace("\n", " ")
        return "\t".join(str(d[c]) for c in self.COLUMNS)


def write_history_header(fh) -> None:
    fh.write("\t".join(PerfRecord.COLUMNS) + "\n")


def read_history(path) -> list[PerfRecord]:
    lines = Path(path).read_text().splitlines()
    out = []
    for line in lines[1:]:
        v = line.split("\t")
        out.append(PerfRecord(int(v[0]), v[1], v[2], v[3], v[4], float(v[5]), float(v[6]), int(v[7]),
                              float(v[8]), bool(int(v[9])), v[10] if len(v) > 10 else ""))
    return out


def _session(cfg: ReplayConfig, direction: str, rate: float, transport: str, seed: int) -> SessionResult:
    port = cfg.down_port if direction == "down" else cfg.up_port
    host = cfg.perf_host.strip("\"'") or "localhost"
    header = Header(direction, cfg.epoch_time, rate, cfg.buffer)
    fn = udp_session if transport == "UDP" else tcp_session
    return fn(host, port, header, seed)


def run_epoch(cfg: ReplayConfig, step: EpochStep) -> list[PerfRecord]:
    """Drive download and upload concurrently; both finish before this returns."""
    results: dict[str, SessionResult] = {}

    def worker(direction, rate):
        if rate <= 0:
            results[direction] = SessionResult(direction, step.transport.lower(), 0, cfg.epoch_time)
            return
        results[direction] = _session(cfg, direction, rate, step.transport, seed=step.index)

    threads = [threading.Thread(target=worker, args=a, daemon=True)
               for a in (("down", step.dl_rate), ("up", step.ul_rate))]
    for t in threads:
        t.start()
    for t in threads:
        t.join(cfg.epoch_time + 10)
    records = []
    for direction, rate in (("down", step.dl_rate), ("up", step.ul_rate)):
        r = results.get(direction)
        if r is None:
            r = SessionResult(direction, step.transport.lower(), 0, cfg.epoch_time, True, "timed out")
        if r.error:
            log.warning("epoch %d %s: %s", step.index, direction, r.error)
        records.append(PerfRecord(step.index, direction, step.transport, step.app_context, step.signal_context,
                                  rate, r.mbps, r.bytes, r.duration, r.partial, r.error))
    return records


def run_replay(
    cfg: ReplayConfig,
    source: TraceSource,
    signal: SignalProvider,
    history_path=None,
    sequences: int | None = None,
    seed: int | None = None,
) -> list[PerfRecord]:
    """Replay ``seq_len`` epochs; with ``continuous`` a fresh cache is fetched per sequence.

    ``sequences`` bounds the number of sequences in continuous mode (None runs
    until interrupted); without ``continuous`` exactly one sequence is played.
    """
    if not cfg.continuous:
        sequences = 1
    records: list[PerfRecord] = []
    fh = open(history_path, "w") if history_path else None
    try:
        if fh:
            write_history_header(fh)
        planner = None
        n = 0
        while sequences is None or n < sequences:
            cache = precache_traces(source, cfg.seq_len)
            if planner is None:
                planner = ReplayPlanner(cfg, cache, signal, seed)
            planner.cache = cache
            for pos in range(cfg.seq_len):
                step = planner.step(pos)
                log.info("epoch %d %s %s dl %.3f ul %.3f Mbps", step.index, step.context.value, step.transport,
                         step.dl_rate, step.ul_rate)
                for rec in run_epoch(cfg, step):
                    records.append(rec)
                    if fh:
                        fh.write(rec.to_tsv() + "\n")
                        fh.flush()
            n += 1
    finally:
        if fh:
            fh.close()
    return records


def bias(intended: tuple[float, float], measured: tuple[float, float]) -> float:
    """``intended_up/intended_down - measured_up/measured_down``; positive means download is favoured."""
    (iu, idn), (mu, md) = intended, measured
    if min(iu, idn, mu, md) <= 0:
        raise ValueError("bias needs positive throughputs")
    return iu / idn - mu / md
