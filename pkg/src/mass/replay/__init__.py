"""Trace replay: perf servers, the epoch scheduler and bias analysis."""

from .client import (
    REPLAY_CONTEXTS,
    ConstantSignal,
    EpochStep,
    HttpTraceSource,
    PerfRecord,
    ReplayPlanner,
    ScriptedSignal,
    WirelessSignal,
    bias,
    next_app_context,
    plan_replay,
    precache_traces,
    read_history,
    run_epoch,
    run_replay,
    signal_context,
)
from .config import ReplayConfig
from .perf import Header, PerfServer, TokenBucket, parse_header, tcp_session, udp_session

__all__ = [
    "REPLAY_CONTEXTS", "ConstantSignal", "EpochStep", "HttpTraceSource", "PerfRecord", "ReplayPlanner",
    "ScriptedSignal", "WirelessSignal", "bias", "next_app_context", "plan_replay", "precache_traces",
    "read_history", "run_epoch", "run_replay", "signal_context", "ReplayConfig", "Header", "PerfServer",
    "TokenBucket", "parse_header", "tcp_session", "udp_session",
]
