import itertools
import math
import random

import numpy as np
import pytest
import torch

from mass.massgan import GanModel, TargetStats
from mass.trace import ContextLabel, ContextSplit, TraceTensor, normalize, synth_dataset
from mass.trainer import (
    L_WORST_INIT,
    TrainConfig,
    Validation,
    benchmark_validation,
    conditional_gradient_descent,
    fine_tune,
    run_training,
    sample_real,
    update_deltas,
    write_history,
)


def tiny_cfg(**kw):
    base = dict(max_epochs=40, validation_period=5, delta_window=2, patience=3, batch_users=6, seq_len=6,
                hidden_size=4, num_layers=1, seed=0, validate_on_new_min=False)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def tiny_data():
    return normalize(synth_dataset(3, users=8, steps=6), "minmax").values


def tiny_model(cfg, data):
    stats = TargetStats.from_trace(data)
    return GanModel(cfg.gan_config(), seed=cfg.seed, stats=stats), stats


def scripted(values):
    """Validator returning fixed (L_corr, L_mom) pairs in order."""
    it = iter(values)

    def validator(model, state):
        c, m = next(it)
        return Validation(c, m, max(c, m))

    return validator


def validations(history):
    return [h for h in history if h.get("event") == "validation"]


def test_update_deltas_indicator():
    assert update_deltas(0.5, 0.2, coin=False) == (1, 0)
    assert update_deltas(0.1, 0.4, coin=True) == (0, 1)
    assert update_deltas(0.3, 0.3, coin=True) == (1, 0)
    assert update_deltas(0.3, 0.3, coin=False) == (0, 1)


def test_update_deltas_tie_is_fair():
    rng = random.Random(11)
    n = 10_000
    corr_kept = sum(update_deltas(0.3, 0.3, rng.random() < 0.5) == (1, 0) for _ in range(n))
    assert abs(corr_kept / n - 0.5) <= 0.05


def test_validation_worst_is_max():
    assert Validation(0.3, 0.1, max(0.3, 0.1)).L_worst_new == 0.3


def test_delta_window_then_restore(tiny_data):
    cfg = tiny_cfg(max_epochs=10, patience=10)
    model, stats = tiny_model(cfg, tiny_data)
    res = run_training(model, tiny_data, stats, cfg, validator=scripted([(0.5, 0.2), (0.9, 0.9)]))
    epochs = [h for h in res.history if "event" not in h]
    deltas = [(h["delta_corr"], h["delta_mom"]) for h in epochs]
    # validation after epoch 5 forces (1, 0) for the next two epochs only
    assert deltas == [(1, 1)] * 5 + [(1, 0)] * 2 + [(1, 1)] * 3
    assert all(d != (0, 0) for d in deltas)


def test_accepted_worst_strictly_decreases(tiny_data):
    cfg = tiny_cfg(max_epochs=40, patience=10)
    model, stats = tiny_model(cfg, tiny_data)
    script = [(0.9, 0.1), (0.95, 0.1), (0.5, 0.6), (0.6, 0.6), (0.2, 0.3), (0.4, 0.1), (0.3, 0.3), (0.1, 0.05)]
    res = run_training(model, tiny_data, stats, cfg, validator=scripted(script))
    vals = validations(res.history)
    accepted = [v["L_worst_new"] for v in vals if v["improved"]]
    assert accepted == [0.9, 0.6, 0.3, 0.1]
    assert all(a > b for a, b in zip(accepted, accepted[1:]))
    assert vals[0]["L_worst_prev"] == L_WORST_INIT


def test_candidate_is_best_checkpoint_not_last(tiny_data):
    cfg = tiny_cfg(max_epochs=20, patience=10)
    model, stats = tiny_model(cfg, tiny_data)
    snapshots = {}

    def validator(m, state):
        snapshots[state.epoch] = m.generator_params.clone()
        return Validation(*{5: (0.2, 0.1, 0.2)}.get(state.epoch, (0.5, 0.5, 0.5)))

    res = run_training(model, tiny_data, stats, cfg, validator=validator)
    assert res.candidate_saved
    assert torch.equal(res.model.generator_params, snapshots[5])
    assert not torch.equal(res.model.generator_params, model.generator_params)


def test_first_improving_validation_saves_candidate(tiny_data):
    cfg = tiny_cfg(max_epochs=5)
    model, stats = tiny_model(cfg, tiny_data)
    res = run_training(model, tiny_data, stats, cfg, validator=scripted([(0.4, 0.3)]))
    assert res.candidate_saved and not res.stopped_early


def test_patience_stops_early(tiny_data):
    cfg = tiny_cfg(max_epochs=1000, patience=3)
    model, stats = tiny_model(cfg, tiny_data)
    script = itertools.chain([(0.3, 0.2)], itertools.repeat((0.5, 0.5)))
    res = run_training(model, tiny_data, stats, cfg, validator=scripted(script))
    assert res.stopped_early
    epochs = [h for h in res.history if "event" not in h]
    assert len(epochs) == 4 * cfg.validation_period
    assert [v["improved"] for v in validations(res.history)] == [True, False, False, False]


def test_no_candidate_returns_final_model(tiny_data):
    cfg = tiny_cfg(max_epochs=10, patience=2)
    model, stats = tiny_model(cfg, tiny_data)
    res = run_training(model, tiny_data, stats, cfg, validator=scripted(itertools.repeat((2e9, 2e9))))
    assert not res.candidate_saved
    assert res.model is model


def test_new_minimum_triggers_validation(tiny_data):
    cfg = tiny_cfg(max_epochs=8, validation_period=100, validate_on_new_min=True, patience=100)
    model, stats = tiny_model(cfg, tiny_data)
    res = run_training(model, tiny_data, stats, cfg, validator=scripted(itertools.repeat((0.5, 0.5))))
    vals = validations(res.history)
    assert vals and vals[0]["reason"] == "new_min" and vals[0]["epoch"] == 1


def test_sample_real_shapes(tiny_data):
    g = torch.Generator().manual_seed(0)
    assert sample_real(tiny_data, 5, 6, g).shape == (5, 6, 2)
    assert sample_real(tiny_data, 20, 4, g).shape == (20, 4, 2)
    with pytest.raises(ValueError):
        sample_real(tiny_data, 4, 7, g)


def test_training_is_deterministic(tiny_data, tmp_path):
    cfg = tiny_cfg(max_epochs=12)
    a = conditional_gradient_descent(cfg, tiny_data)
    b = conditional_gradient_descent(cfg, tiny_data)
    assert torch.equal(a.model.generator_params, b.model.generator_params)
    assert torch.equal(a.model.discriminator_params, b.model.discriminator_params)
    write_history(a.history, tmp_path / "a.jsonl")
    write_history(b.history, tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_discriminator_loss_stays_bounded():
    data = normalize(synth_dataset(0, users=100, steps=12), "minmax").values
    cfg = TrainConfig(max_epochs=200, hidden_size=16, seed=1, patience=100)
    res = conditional_gradient_descent(cfg, data)
    losses = [h["L_D"] for h in res.history if "L_D" in h]
    assert len(losses) == 200
    assert all(math.isfinite(v) and v < 2 * math.log(2) + 1 for v in losses)


def test_benchmark_validation_reports_uniform_losses(tiny_data):
    cfg = tiny_cfg()
    model, stats = tiny_model(cfg, tiny_data)
    v = benchmark_validation(model, tiny_data, stats, 3, cfg)
    assert v.L_worst_new == max(v.L_corr, v.L_mom)
    assert math.isfinite(v.uni_corr) and math.isfinite(v.uni_mom)
    assert benchmark_validation(model, tiny_data, stats, 3, cfg) == v


def _split(data, significant=True, label=ContextLabel.STREAM):
    return ContextSplit(label, TraceTensor(data), significant, 0.2, 0.1, users=len(data))


def test_fine_tune_zero_epochs_is_identity(tiny_data):
    cfg = tiny_cfg()
    model, _ = tiny_model(cfg, tiny_data)
    res = fine_tune(model, _split(tiny_data), 0, cfg)
    assert torch.equal(res.model.generator_params, model.generator_params)
    assert torch.equal(res.model.discriminator_params, model.discriminator_params)
    assert res.model.context is ContextLabel.STREAM


def test_fine_tune_rejects_insignificant(tiny_data):
    cfg = tiny_cfg()
    model, _ = tiny_model(cfg, tiny_data)
    with pytest.raises(ValueError):
        fine_tune(model, _split(tiny_data, significant=False), 5, cfg)


def test_fine_tune_five_users(tiny_data):
    cfg = tiny_cfg(max_epochs=10)
    model, _ = tiny_model(cfg, tiny_data)
    res = fine_tune(model, _split(tiny_data[:5]), 10, cfg)
    assert res.model.stats == TargetStats.from_trace(tiny_data[:5])
    assert res.model.context is ContextLabel.STREAM
    assert np.isfinite(res.model.generate(3, 6, seed=0)).all()
