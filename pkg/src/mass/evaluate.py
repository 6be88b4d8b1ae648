"""Benchmark comparison of generators against training and held-out data."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import baselines
from .massgan import GanModel
from .metrics import novelty, trace_corr_distance, trace_moments_distance
from .trace import as_array

BENCHMARKS = ("Uni", "Dist", "MASS")
TSV_HEADER = ("benchmark", "data", "corr_distance", "moments_distance", "novelty")


@dataclass(frozen=True)
class EvalRow:
    benchmark: str
    data: str
    corr_distance: float
    moments_distance: float
    novelty: float | None = None


def benchmark_batch(name: str, train, users: int, steps: int, seed: int, model: GanModel | None = None) -> np.ndarray:
    if name == "MASS":
        if model is None:
            raise ValueError("MASS benchmark needs a model")
        return model.generate(users, steps, seed=seed)
    kind = {"Uni": "uni", "Dist": "dist"}[name]
    return baselines.baseline_generate(baselines.fit_pair(train, kind, seed), users, steps).values


def evaluate(model: GanModel | None, train, test=None, users: int = 100, seed: int = 0,
             benchmarks=BENCHMARKS) -> list[EvalRow]:
    """One train row (with novelty) and one test row per benchmark."""
    train = as_array(train)
    test = None if test is None else as_array(test)
    steps = train.shape[1]
    rows = []
    for i, name in enumerate(benchmarks):
        if name == "MASS" and model is None:
            continue
        batch = benchmark_batch(name, train, users, steps, seed + i, model)
        rows.append(EvalRow(name, "train", trace_corr_distance(train, batch), trace_moments_distance(train, batch),
                            novelty(batch)))
        if test is not None:
            rows.append(EvalRow(name, "test", trace_corr_distance(test, batch), trace_moments_distance(test, batch)))
    return rows


def _fmt(v: float | None) -> str:
    if v is None:
        return ""
    if not math.isfinite(v):
        return str(v)
    return f"{v:.3f}" if abs(v) < 100 else f"{v:.1f}"


def format_table(rows: list[EvalRow]) -> str:
    head = ("Benchmark", "Data", "Corr. distance", "Moments distance", "Novelty")
    body = []
    last = None
    for r in rows:
        body.append((r.benchmark if r.benchmark != last else "", r.data, _fmt(r.corr_distance),
                     _fmt(r.moments_distance), _fmt(r.novelty)))
        last = r.benchmark
    widths = [max(len(x[i]) for x in [head, *body]) for i in range(len(head))]
    rule = "+" + "+".join("-" * (w + 2) for w in widths) + "+"

    def line(cells):
        return "| " + " | ".join(c.ljust(w) for c, w in zip(cells, widths)) + " |"

    out = [rule, line(head), rule]
    for i, cells in enumerate(body):
        out.append(line(cells))
        if i + 1 == len(body) or rows[i + 1].benchmark != rows[i].benchmark:
            out.append(rule)
    return "\n".join(out) + "\n"


def format_tsv(rows: list[EvalRow]) -> str:
    lines = ["\t".join(TSV_HEADER)]
    for r in rows:
        nov = "" if r.novelty is None else repr(r.novelty)
        lines.append("\t".join((r.benchmark, r.data, repr(r.corr_distance), repr(r.moments_distance), nov)))
    return "\n".join(lines) + "\n"
