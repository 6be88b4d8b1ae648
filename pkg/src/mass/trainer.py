"""Conditional gradient descent training and context fine-tuning."""

from __future__ import annotations

import json
import logging
import math
import random
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from . import baselines
from .massgan import (
    GanConfig,
    GanModel,
    TargetStats,
    discriminator_forward,
    generator_forward,
    loss_corr_dist,
    loss_discriminator_train,
    loss_mom_dist,
    loss_total,
    trace_probability,
)
from .trace import ContextSplit, as_array

log = logging.getLogger(__name__)

L_WORST_INIT = 1e9


@dataclass
class TrainConfig:
    max_epochs: int = 2000
    validation_period: int = 50
    delta_window: int = 25
    patience: int = 5
    lr: float = 2e-4
    betas: tuple[float, float] = (0.9, 0.999)
    batch_users: int = 100
    seq_len: int = 12
    hidden_size: int = 64
    num_layers: int = 2
    stats_mode: str = "raw"
    validate_on_new_min: bool = True
    seed: int = 0

    def __post_init__(self):
        for name in ("max_epochs", "validation_period", "delta_window", "patience", "batch_users", "seq_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")

    def gan_config(self) -> GanConfig:
        return GanConfig(
            hidden_size=self.hidden_size,
            num_layers=self.num_layers,
            seq_len=self.seq_len,
            batch_users=self.batch_users,
        )


@dataclass
class TrainState:
    epoch: int = 0
    delta_corr: int = 1
    delta_mom: int = 1
    delta_window_remaining: int = 0
    L_worst_prev: float = L_WORST_INIT
    best_total: float = math.inf
    failed_validations: int = 0
    candidate: GanModel | None = None
    accepted: list[float] = field(default_factory=list)
    rng: random.Random = field(default_factory=random.Random)
    torch_rng: torch.Generator = field(default_factory=torch.Generator)
    g_opt: torch.optim.Optimizer | None = None
    d_opt: torch.optim.Optimizer | None = None

    @property
    def deltas(self) -> tuple[int, int]:
        return self.delta_corr, self.delta_mom


@dataclass
class Validation:
    L_corr: float
    L_mom: float
    L_worst_new: float
    uni_corr: float = float("nan")
    uni_mom: float = float("nan")


@dataclass
class TrainResult:
    model: GanModel
    history: list[dict]
    candidate_saved: bool
    stopped_early: bool = False


def init_state(model: GanModel, cfg: TrainConfig, seed: int) -> TrainState:
    state = TrainState(rng=random.Random(seed), torch_rng=torch.Generator().manual_seed(seed))
    state.g_opt = torch.optim.Adam(model.generator.parameters(), lr=cfg.lr, betas=cfg.betas)
    state.d_opt = torch.optim.Adam(model.discriminator.parameters(), lr=cfg.lr, betas=cfg.betas)
    return state


def sample_real(data: np.ndarray, users: int, steps: int, gen: torch.Generator) -> np.ndarray:
    """Minibatch of real traces: users without replacement when enough exist, random K-windows."""
    n, total_steps, _ = data.shape
    if total_steps < steps:
        raise ValueError(f"training traces have {total_steps} steps, need {steps}")
    if n >= users:
        idx = torch.randperm(n, generator=gen)[:users]
    else:
        idx = torch.randint(n, (users,), generator=gen)
    idx = idx.numpy()
    if total_steps == steps:
        return data[idx]
    starts = torch.randint(total_steps - steps + 1, (users,), generator=gen).numpy()
    return np.stack([data[i, s:s + steps] for i, s in zip(idx, starts)])


def train_epoch(state: TrainState, model: GanModel, data, stats: TargetStats, cfg: TrainConfig) -> dict:
    """One discriminator step on L_D and one generator step on the gated generator loss."""
    data = as_array(data)
    b, k = cfg.batch_users, cfg.seq_len
    real = torch.as_tensor(sample_real(data, b, k, state.torch_rng), dtype=model.dtype)
    z = model.latent(b, k, state.torch_rng)
    g_backup = [p.detach().clone() for p in model.generator.parameters()]
    d_backup = [p.detach().clone() for p in model.discriminator.parameters()]

    state.d_opt.zero_grad()
    with torch.no_grad():
        fake = generator_forward(model, z)
    d_loss = loss_discriminator_train(
        trace_probability(discriminator_forward(model, real)[0]),
        trace_probability(discriminator_forward(model, fake)[0]),
    )
    d_loss.backward()
    state.d_opt.step()

    state.g_opt.zero_grad()
    fake = generator_forward(model, z)
    parts = loss_total(model, fake, stats, state.delta_corr, state.delta_mom, mode=cfg.stats_mode)
    parts.total.backward()
    # statistic losses in representation mode also reach the discriminator; only G steps here
    state.g_opt.step()
    model.discriminator.zero_grad(set_to_none=True)

    record = {
        "epoch": state.epoch,
        "L_D": d_loss.item(),
        "L_disc": parts.disc.item(),
        "L_corr": parts.corr.item(),
        "L_mom": parts.mom.item(),
        "L_total": parts.total.item(),
        "delta_corr": state.delta_corr,
        "delta_mom": state.delta_mom,
    }
    finite = all(math.isfinite(v) for v in record.values())
    params_ok = all(torch.isfinite(p).all() for p in model.generator.parameters()) and all(
        torch.isfinite(p).all() for p in model.discriminator.parameters()
    )
    if not (finite and params_ok):
        with torch.no_grad():
            for p, old in zip(model.generator.parameters(), g_backup):
                p.copy_(old)
            for p, old in zip(model.discriminator.parameters(), d_backup):
                p.copy_(old)
        log.warning("non-finite loss at epoch %d; parameters restored", state.epoch)
        record["aborted"] = True
    state.epoch += 1
    return record


def benchmark_validation(model: GanModel, train_data, stats: TargetStats, seed, cfg: TrainConfig) -> Validation:
    """Fresh model batch and same-size uniform-fit batch; losses on both, worst of the model's two."""
    data = as_array(train_data)
    b, k = cfg.batch_users, cfg.seq_len
    if isinstance(seed, torch.Generator):
        seed = int(torch.randint(2**31 - 1, (1,), generator=seed).item())
    with torch.no_grad():
        batch = generator_forward(model, model.latent(b, k, seed))
        L_corr = loss_corr_dist(model, batch, stats, cfg.stats_mode).item()
        L_mom = loss_mom_dist(model, batch, stats, cfg.stats_mode).item()
        uni = baselines.baseline_generate(baselines.fit_pair(data, "uni", seed), b, k)
        uni_t = torch.as_tensor(uni.values, dtype=model.dtype)
        uni_corr = loss_corr_dist(model, uni_t, stats, cfg.stats_mode).item()
        uni_mom = loss_mom_dist(model, uni_t, stats, cfg.stats_mode).item()
    return Validation(L_corr, L_mom, max(L_corr, L_mom), uni_corr, uni_mom)


def update_deltas(L_corr: float, L_mom: float, coin: bool) -> tuple[int, int]:
    """Keep only the statistic that is currently fitting worse; a fair coin settles ties."""
    if L_corr > L_mom:
        return 1, 0
    if L_mom > L_corr:
        return 0, 1
    return (1, 0) if coin else (0, 1)


def _validate(state: TrainState, model, data, stats, cfg, history, reason: str, validator=None) -> bool:
    if validator is None:
        v = benchmark_validation(model, data, stats, state.torch_rng, cfg)
    else:
        v = validator(model, state)
    improved = v.L_worst_new < state.L_worst_prev
    event = {
        "epoch": state.epoch,
        "event": "validation",
        "reason": reason,
        "L_corr": v.L_corr,
        "L_mom": v.L_mom,
        "L_worst_new": v.L_worst_new,
        "L_worst_prev": state.L_worst_prev,
        "uni_corr": v.uni_corr,
        "uni_mom": v.uni_mom,
        "improved": improved,
    }
    if improved:
        state.candidate = model.clone()
        state.L_worst_prev = v.L_worst_new
        state.accepted.append(v.L_worst_new)
        state.delta_corr, state.delta_mom = update_deltas(v.L_corr, v.L_mom, state.rng.random() < 0.5)
        state.delta_window_remaining = cfg.delta_window
        state.failed_validations = 0
        event["deltas"] = [state.delta_corr, state.delta_mom]
    else:
        state.failed_validations += 1
    history.append(event)
    return improved


def run_training(model: GanModel, data, stats: TargetStats, cfg: TrainConfig, epochs: int | None = None,
                 history: list | None = None, validator: Callable[[GanModel, TrainState], Validation] | None = None
                 ) -> TrainResult:
    """The conditional gradient descent loop on an already initialised model.

    ``validator`` replaces the benchmark validation, e.g. with scripted values.
    """
    data = as_array(data)
    epochs = cfg.max_epochs if epochs is None else epochs
    history = [] if history is None else history
    state = init_state(model, cfg, cfg.seed)
    stopped = False
    for _ in range(epochs):
        record = train_epoch(state, model, data, stats, cfg)
        history.append(record)
        if state.delta_window_remaining > 0:
            state.delta_window_remaining -= 1
            if state.delta_window_remaining == 0:
                state.delta_corr = state.delta_mom = 1
        reason = None
        if state.epoch % cfg.validation_period == 0:
            reason = "periodic"
        elif (
            cfg.validate_on_new_min
            and not record.get("aborted")
            and record["L_total"] < state.best_total
            and state.deltas == (1, 1)
        ):
            reason = "new_min"
        if state.deltas == (1, 1) and not record.get("aborted"):
            state.best_total = min(state.best_total, record["L_total"])
        if reason:
            _validate(state, model, data, stats, cfg, history, reason, validator)
            if state.failed_validations >= cfg.patience:
                log.info("stopping at epoch %d after %d failed validations", state.epoch, cfg.patience)
                stopped = True
                break
    if state.candidate is None:
        log.warning("no candidate checkpoint was saved; returning the final model")
        return TrainResult(model, history, False, stopped)
    return TrainResult(state.candidate, history, True, stopped)


def conditional_gradient_descent(cfg: TrainConfig, train_data, context="GLOBAL") -> TrainResult:
    """Train a generator from scratch on ``train_data`` and return the best candidate."""
    data = as_array(train_data)
    torch.manual_seed(cfg.seed)
    stats = TargetStats.from_trace(data)
    model = GanModel(cfg.gan_config(), seed=cfg.seed, stats=stats, context=context)
    return run_training(model, data, stats, cfg)


def fine_tune(global_model: GanModel, split: ContextSplit, epochs_ft: int, cfg: TrainConfig | None = None) -> TrainResult:
    """Continue training a copy of the global model on one significant context cohort."""
    if not split.significant:
        raise ValueError(f"context {split.label.value} is not significant; use the global model")
    cfg = cfg or TrainConfig()
    data = as_array(split.trace)
    stats = TargetStats.from_trace(data)
    model = global_model.clone()
    model.stats = stats
    model.context = split.label
    if epochs_ft == 0:
        return TrainResult(model, [], False)
    result = run_training(model, data, stats, cfg, epochs=epochs_ft)
    result.model.stats = stats
    result.model.context = split.label
    return result


def write_history(history: list[dict], path) -> None:
    """Line-delimited JSON training log."""
    with open(path, "w") as fh:
        for rec in history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
