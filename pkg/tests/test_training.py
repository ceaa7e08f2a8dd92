import json

import numpy as np
import pytest

from acformer.data import SeriesDataset, chronological_split, standardize
from acformer.model import ACFormer, ACFormerConfig
from acformer.tensor import NonFiniteError, Tensor
from acformer.training import (Adam, EarlyStopping, ExperimentReport, TrainConfig, TrainingDivergence, config_hash,
                               evaluate, fit, lr_schedule)


def test_adam_first_step_moves_by_lr():
    p = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    p.grad = np.array([0.5, -4.0, 1e-3])
    Adam({"p": p}).step(0.1)
    # bias-corrected first step is lr * g / (|g| + eps)
    assert np.allclose(p.data, [0.9, -1.9, 2.9], atol=1e-6)


def test_adam_matches_reference_over_steps():
    rng = np.random.default_rng(0)
    p = Tensor(rng.normal(size=4), requires_grad=True)
    ref = p.data.copy()
    m = v = np.zeros(4)
    opt = Adam({"p": p})
    for t in range(1, 6):
        g = rng.normal(size=4)
        p.grad = g
        opt.step(0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    assert np.allclose(p.data, ref, atol=1e-14)


def test_adam_rejects_non_finite_gradient():
    p = Tensor(np.zeros(2), requires_grad=True)
    p.grad = np.array([np.nan, 0.0])
    with pytest.raises(NonFiniteError, match="w1"):
        Adam({"w1": p}).step(0.1)


def test_lr_schedule():
    assert lr_schedule(1) == 1e-3
    assert lr_schedule(3, 0.01) == 0.0025
    with pytest.raises(ValueError):
        lr_schedule(0)


def test_early_stopping():
    es = EarlyStopping(3)
    stops = [es.step(e, s) for e, s in enumerate([1.0, 0.8, 0.9, 0.85, 0.81], start=1)]
    assert stops == [False, False, False, False, True]
    assert es.best_epoch == 2


def test_config_hash_stable():
    assert config_hash({"a": 1, "b": 2}) == config_hash({"b": 2, "a": 1})
    assert len(config_hash({})) == 16


def test_report_round_trip():
    rep = ExperimentReport({"x": 1}, 3, [{"epoch": 1}], {"mse": 1.0, "mae": 0.5}, 1, 12.5)
    d = json.loads(rep.to_json())
    assert ExperimentReport.from_dict(d) == rep
    assert "wall_seconds" not in rep.to_dict(timing=False)


def sine_data(n=600, c=2):
    t = np.arange(n)[:, None]
    vals = np.sin(2 * np.pi * t / 24 + np.arange(c)) + 0.05 * np.random.default_rng(0).normal(size=(n, c))
    return SeriesDataset("sine", vals, tuple(f"c{i}" for i in range(c)))


def small_cfg(**kw):
    return ACFormerConfig(seq_len=48, pred_len=24, n_channels=2, kernel_size=8, stride=8, n_kernels=4,
                          n_layers=1, **kw)


def test_fit_learns_sine_and_is_deterministic():
    ds = sine_data()
    split = chronological_split(ds, (0.6, 0.2, 0.2), 48, 24)
    data = standardize(ds, split).values
    cfg = TrainConfig(epochs=3, batch_size=16, lr=3e-3)
    runs = []
    for _ in range(2):
        model = ACFormer(small_cfg())
        before = evaluate(model, split.segment(data, "test"), 48, 24)
        _, report = fit(model, data, split, cfg)
        after = evaluate(model, split.segment(data, "test"), 48, 24)
        runs.append((report.to_json(timing=False), after))
    assert runs[0] == runs[1]
    assert after["mae"] < before["mae"]
    assert after["mae"] < 0.3


def test_fit_restores_best_epoch():
    ds = sine_data()
    split = chronological_split(ds, (0.6, 0.2, 0.2), 48, 24)
    data = standardize(ds, split).values
    model = ACFormer(small_cfg())
    best, report = fit(model, data, split, TrainConfig(epochs=4, batch_size=32))
    val = evaluate(model, split.segment(data, "val"), 48, 24)
    best_row = report.epochs[report.best_epoch - 1]
    assert val["mae"] == pytest.approx(best_row["val_mae"], abs=1e-12)
    assert all(np.array_equal(model.state_dict()[k], v) for k, v in best.items())


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported():
    ds = sine_data()
    split = chronological_split(ds, (0.6, 0.2, 0.2), 48, 24)
    data = standardize(ds, split).values.copy()
    data[5, 0] = 1e308
    with pytest.raises(TrainingDivergence, match="epoch 1"):
        fit(ACFormer(small_cfg()), data, split, TrainConfig(epochs=1, batch_size=16))


def test_evaluate_perfect_predictor():
    model = ACFormer(small_cfg())
    for p in model.parameters():
        p.data[...] = 0.0
    res = evaluate(model, np.zeros((80, 2)), 48, 24)
    assert res == {"mse": 0.0, "mae": 0.0}
