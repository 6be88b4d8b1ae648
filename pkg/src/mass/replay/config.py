"""Replay configuration, read from the shell-style environment variables."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, fields, replace
from typing import Mapping

log = logging.getLogger(__name__)

DEFAULT_MASS_PORT = 8000

_BOOL_TRUE = {"1", "true", "yes", "on"}
_BOOL_FALSE = {"0", "false", "no", "off", ""}


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in _BOOL_TRUE:
        return True
    if t in _BOOL_FALSE:
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _unquote(text: str) -> str:
    t = text.strip()
    if len(t) >= 2 and t[0] == t[-1] and t[0] in "\"'":
        t = t[1:-1]
    return t


def split_host(host: str, default_port: int) -> tuple[str, int]:
    """``"name"`` or ``"name:port"`` to ``(name, port)``."""
    host = _unquote(host)
    if host.count(":") == 1:
        name, port = host.split(":")
        return name or "localhost", int(port)
    return host or "localhost", default_port


@dataclass(frozen=True)
class ReplayConfig:
    mass_host: str = "localhost"
    perf_host: str = "localhost"
    seq_len: int = 10
    max_down: float = 1.0
    max_up: float = 1.0
    buffer: int = 1024
    down_port: int = 5557
    up_port: int = 6666
    epoch_time: float = 5.0
    initial_context: str = "INTERACT"
    interact_stay_prob: float = 0.5
    stream_stay_prob: float = 0.5
    use_signal: bool = True
    udp_prob: float = 0.5
    continuous: bool = False
    use_iperf: bool = False
    seed: int | None = None

    def __post_init__(self):
        if self.initial_context not in ("STREAM", "INTERACT"):
            raise ValueError(f"INITIAL_CONTEXT must be STREAM or INTERACT, got {self.initial_context!r}")
        for name in ("interact_stay_prob", "stream_stay_prob", "udp_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name.upper()} must be in [0, 1], got {p}")
        if self.max_down <= 0 or self.max_up <= 0:
            raise ValueError("MAX_DOWN and MAX_UP must be positive")
        if self.epoch_time <= 0:
            raise ValueError("EPOCH_TIME must be positive")
        if self.seq_len < 1:
            raise ValueError("SEQ_LEN must be at least 1")
        if not 1 <= self.buffer <= 65507:
            raise ValueError("BUFFER must be in [1, 65507]")
        for name in ("down_port", "up_port"):
            if not 0 <= getattr(self, name) <= 65535:
                raise ValueError(f"{name.upper()} is not a valid port")

    @property
    def stay_probs(self) -> dict[str, float]:
        return {"INTERACT": self.interact_stay_prob, "STREAM": self.stream_stay_prob}

    @property
    def mass_endpoint(self) -> tuple[str, int]:
        return split_host(self.mass_host, DEFAULT_MASS_PORT)

    @classmethod
    def from_env(cls, environ: Mapping[str, str] | None = None, **overrides) -> "ReplayConfig":
        """Defaults, then environment variables, then explicit ``overrides``."""
        environ = os.environ if environ is None else environ
        values = {}
        for f in fields(cls):
            key = "MASS_SEED" if f.name == "seed" else f.name.upper()
            if key not in environ:
                continue
            raw = _unquote(environ[key])
            if f.name in ("mass_host", "perf_host"):
                values[f.name] = raw
            elif f.name == "initial_context":
                values[f.name] = raw.upper()
            elif f.type in ("bool", bool):
                values[f.name] = _parse_bool(raw)
            elif f.type in ("int", int) or f.name == "seed":
                values[f.name] = int(raw)
            else:
                values[f.name] = float(raw)
        values.update({k: v for k, v in overrides.items() if v is not None})
        cfg = cls(**values)
        if cfg.use_iperf:
            log.warning("USE_IPERF is not supported; using the built-in perf servers")
        return cfg

    def with_(self, **changes) -> "ReplayConfig":
        return replace(self, **changes)
