import json
import math

import numpy as np
import pytest

from longcast import tensor as T
from longcast.data import SeriesFrame, WindowSpec, make_windows, prepare_splits, synth_series
from longcast.errors import ConfigError, ContractError, DataError, NumericError
from longcast.layers import Module
from longcast.model import InformerConfig, build
from longcast.tensor import Tensor
from longcast.training import (Adam, AdamState, MetricsReport, TrainConfig, adam_step, evaluate, lr_schedule,
                               metrics, predict, train)


class Constant(Module):
    """Predicts one learnable scalar at every output position."""

    def __init__(self, value=0.0, pred_len=4):
        self.w = Tensor(np.array([value]), requires_grad=True)
        self.pred_len = pred_len

    def forward(self, x_enc, stamps_enc, stamps_future, *, training=False, rng=None, decode_mode="generative"):
        ones = np.ones((len(x_enc), self.pred_len, 1))
        return T.mul(Tensor(ones), self.w)


def _constant_frame(value, length, split):
    stamps = np.datetime64("2020-01-01T00:00:00") + np.arange(length) * np.timedelta64(3600, "s")
    return SeriesFrame(stamps, np.full((length, 1), value), ("OT",), split=split)


def _tiny(seed=0, **changes):
    cfg = InformerConfig(**{**dict(d_x=1, features="S", seq_len=24, label_len=12, pred_len=6, d_model=16,
                                   enc_heads=2, dec_heads=2, d_ffn=32, stacks="2:1,1:1/2", dec_layers=1),
                            **changes})
    return build(cfg, seed)


def _tiny_data(length=400, stride=1):
    return prepare_splits(synth_series(length=length, seed=1), WindowSpec(24, 12, 6, stride))


def test_adam_first_step():
    (p,), state = adam_step([np.array([1.0])], [np.array([0.5])], AdamState(), lr=0.1)
    assert p[0] - 1.0 == pytest.approx(-0.1 * 0.5 / (0.5 + 1e-8), abs=1e-12)
    assert state.step == 1


def test_adam_zero_gradient_is_identity():
    params = [np.arange(6.0).reshape(2, 3), np.array([-1.5])]
    new, state = adam_step(params, [np.zeros((2, 3)), np.zeros(1)], AdamState(), lr=0.1)
    for a, b in zip(new, params):
        assert np.array_equal(a, b)
    new, _ = adam_step(new, [np.zeros((2, 3)), np.zeros(1)], state, lr=0.1)
    assert np.array_equal(new[0], params[0])


def test_adam_matches_reference_over_steps(gen):
    p, m, v = gen.standard_normal(5), np.zeros(5), np.zeros(5)
    ours, state = [p.copy()], AdamState()
    for t in range(1, 11):
        g = gen.standard_normal(5)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        p = p - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        ours, state = adam_step(ours, [g], state, lr=0.01)
    np.testing.assert_allclose(ours[0], p, atol=1e-14)


def test_adam_deterministic():
    grads = [np.array([0.3, -0.2])]
    a = adam_step([np.ones(2)], grads, AdamState(), 0.1)
    b = adam_step([np.ones(2)], grads, AdamState(), 0.1)
    assert np.array_equal(a[0][0], b[0][0]) and np.array_equal(a[1].m[0], b[1].m[0])


def test_adam_shape_mismatch():
    with pytest.raises(ContractError):
        adam_step([np.ones(2)], [np.ones(3)], AdamState(), 0.1)


def test_adam_clipping():
    w = Tensor(np.zeros(2), requires_grad=True)
    w.grad = np.array([3.0, 4.0])
    opt = Adam([w])
    assert opt.step(0.1, clip_norm=1.0) == 5.0
    np.testing.assert_allclose(w.data, [-0.1, -0.1], atol=1e-9)


def test_lr_schedule():
    assert lr_schedule(1e-4, 0) == 1e-4
    assert lr_schedule(1e-4, 1) == pytest.approx(5e-5, rel=1e-15)
    assert lr_schedule(1e-4, 2) == pytest.approx(2.5e-5, rel=1e-15)
    assert all(lr_schedule(0.0, e) == 0.0 for e in range(10))
    with pytest.raises(ConfigError):
        lr_schedule(1e-4, -1)


@pytest.mark.parametrize("changes", [dict(lr=-1), dict(epochs=0), dict(patience=9), dict(batch_size=0),
                                     dict(clip_norm=0.0)])
def test_train_config_validation(changes):
    with pytest.raises(ConfigError):
        TrainConfig(**changes)


def _constant_windows(value=3.0):
    spec = WindowSpec(8, 4, 4)
    return (make_windows(_constant_frame(value, 60, "train"), spec),
            make_windows(_constant_frame(value, 30, "val"), spec))


def test_quadratic_toy_loss_decreases():
    model = Constant()
    train_w, val_w = _constant_windows()
    result = train(model, train_w, val_w, TrainConfig(lr=0.1, epochs=5, batch_size=8, patience=5))
    losses = [r["train_loss"] for r in result.history]
    vals = [r["val_mse"] for r in result.history]
    assert len(losses) == 5
    assert all(b < a for a, b in zip(losses, losses[1:]))
    assert all(b < a for a, b in zip(vals, vals[1:]))
    assert vals[-1] == pytest.approx((model.w.data[0] - 3.0) ** 2, rel=1e-12)


def test_patience_zero_stops_at_first_non_improvement():
    model = Constant(value=3.0)
    train_w, val_w = _constant_windows()
    result = train(model, train_w, val_w, TrainConfig(lr=0.5, epochs=8, batch_size=64, patience=0))
    assert result.stopped_early and len(result.history) == 2 and result.best_epoch == 0
    assert model.w.data[0] == 3.0


def test_empty_and_test_splits_refused():
    spec = WindowSpec(8, 4, 4)
    train_w, val_w = _constant_windows()
    test_w = make_windows(_constant_frame(3.0, 30, "test"), spec)
    with pytest.raises(ContractError, match="test"):
        train(Constant(), train_w, test_w)
    with pytest.raises(ContractError, match="test"):
        train(Constant(), test_w, val_w)
    empty = train_w.__class__(train_w.frame, spec, np.arange(0), train_w.target_channels)
    with pytest.raises(DataError):
        train(Constant(), empty, val_w)


def test_nan_loss_reports_diagnostics():
    model = Constant(value=0.0)
    model.w.data[0] = np.nan
    train_w, val_w = _constant_windows()
    with pytest.raises(NumericError, match=r"epoch 0, batch 0, lr 0\.1"):
        train(model, train_w, val_w, TrainConfig(lr=0.1, epochs=1, batch_size=8, patience=1))


def test_seeded_history_identical_and_written(tmp_path):
    data = _tiny_data()
    cfg = TrainConfig(lr=1e-3, epochs=2, batch_size=16, patience=2, seed=7)
    runs = []
    for i in range(2):
        path = tmp_path / f"h{i}.log"
        runs.append((train(_tiny(3), data.train, data.val, cfg, history_path=path), path))
    assert runs[0][0].history == runs[1][0].history
    lines = [json.loads(line) for line in runs[0][1].read_text().splitlines()]
    assert lines == runs[0][0].history
    assert set(lines[0]) == {"epoch", "train_loss", "val_mse", "lr"}


def test_restores_best_parameters():
    data = _tiny_data()
    model = _tiny(0)
    seen = []
    result = train(model, data.train, data.val, TrainConfig(lr=3e-2, epochs=4, batch_size=32, patience=4),
                   on_epoch=seen.append)
    assert seen == result.history
    best = min(r["val_mse"] for r in result.history)
    assert result.best_val_mse == best
    assert evaluate(model, data.val).mse == best


def test_evaluate_perfect_and_zero_predictors():
    train_w, _ = _constant_windows(3.0)
    report = evaluate(Constant(3.0), train_w)
    assert (report.mse, report.mae) == (0.0, 0.0)
    data = prepare_splits(synth_series(length=20_000, seed=2), WindowSpec(24, 12, 4), ratios=(0.5, 0.25, 0.25))
    report = evaluate(Constant(0.0), data.train)
    assert abs(report.mse - 1.0) <= 0.05
    assert report.mae <= math.sqrt(report.mse)


def test_evaluate_matches_naive_loop():
    frame = synth_series(length=100, d_x=2, seed=4)
    windows = make_windows(frame, WindowSpec(48, 24, 24))
    assert len(windows) == 29
    model = _tiny(1, d_x=2, features="M", seq_len=48, label_len=24, pred_len=24, stacks="2:1",
                  attn="full", dtype="float64")
    report = evaluate(model, windows, batch_size=8)
    sq = ab = 0.0
    count = 0
    for k in range(29):
        enc, _, target = windows.slices(k)
        stamps = frame.stamps()
        pred = model.forward(frame.values[None, enc], stamps[None, enc], stamps[None, target]).numpy()[0]
        for t in range(24):
            for c in range(2):
                e = pred[t, c] - frame.values[target][t, c]
                sq += e * e
                ab += abs(e)
                count += 1
    assert abs(report.mse - sq / count) <= 1e-12
    assert abs(report.mae - ab / count) <= 1e-12
    assert report.window_count == 29


def test_evaluate_is_side_effect_free():
    data = _tiny_data()
    model = _tiny(2)
    before = [p.data.copy() for p in model.parameters()]
    first = evaluate(model, data.test)
    second = evaluate(model, data.test)
    assert first.mse == second.mse
    for a, p in zip(before, model.parameters()):
        assert np.array_equal(a, p.data) and p.grad is None


def test_metrics_report_fields():
    report = metrics(np.zeros((2, 3, 1)), np.array([[[1.0], [2.0], [0.0]], [[1.0], [0.0], [0.0]]]))
    assert report.mse == pytest.approx(1.0) and report.mae == pytest.approx(4 / 6)
    np.testing.assert_allclose(report.per_horizon, [1.0, 2.0, 0.0])
    assert "mse=1.0" in report.to_text() and isinstance(report, MetricsReport)
    with pytest.raises(DataError):
        metrics(np.zeros((0, 3, 1)), np.zeros((0, 3, 1)))


def test_predict_shapes_and_dynamic_mode():
    data = _tiny_data()
    model = _tiny(0)
    assert predict(model, data.test).shape == (len(data.test), 6, 1)
    model.decoder.forward_calls = 0
    predict(model, data.test, batch_size=len(data.test), decode_mode="dynamic")
    assert model.decoder.forward_calls == 6
