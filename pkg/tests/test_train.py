import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kanet import checkpoint as ckpt_io
from kanet.errors import ConfigError, DimensionError, DomainError, NonFiniteError
from kanet.hsi import LabeledCube, read_pgm, synth_cube
from kanet.model import KANet, count_parameters
from kanet.tensor import grad_check
from kanet.train import (
    Adam,
    CrossEntropyOp,
    TrainConfig,
    cross_entropy,
    evaluate,
    prepare_data,
    train,
)

SMALL_NET = {"stages": [1], "k0": 2, "bottleneck_factor": 1}


def small_cube(seed=0):
    return synth_cube(classes=3, height=12, width=12, bands=6, blob_count=2, seed=seed)


def run_small(tmp_path=None, **train_kw):
    cfg = TrainConfig(**{"epochs": 2, "batch_size": 16, "seed": 0, **train_kw})
    return train(small_cube(), 3, (6, 1, 3), cfg, SMALL_NET, out_dir=tmp_path)


# loss ------------------------------------------------------------------------

def test_cross_entropy_examples():
    loss, grad = cross_entropy(np.zeros((1, 2)), [1])
    assert loss == pytest.approx(math.log(2), abs=1e-12)
    np.testing.assert_allclose(grad, [[-0.5, 0.5]])
    loss, grad = cross_entropy(np.array([[1000.0, 0.0]]), [1])
    assert loss == pytest.approx(0.0, abs=1e-12) and np.all(np.isfinite(grad))


def test_cross_entropy_matches_direct_softmax():
    rng = np.random.default_rng(0)
    z, t = rng.standard_normal((6, 4)), rng.integers(1, 5, 6)
    p = np.exp(z) / np.exp(z).sum(1, keepdims=True)
    loss, grad = cross_entropy(z, t)
    assert loss == pytest.approx(-np.mean(np.log(p[np.arange(6), t - 1])), rel=1e-12)
    onehot = np.eye(4)[t - 1]
    np.testing.assert_allclose(grad, (p - onehot) / 6, atol=1e-15)


def test_cross_entropy_grad_check_and_errors():
    rng = np.random.default_rng(1)
    assert grad_check(CrossEntropyOp(rng.integers(1, 6, 4)), [rng.standard_normal((4, 5))]) < 1e-7
    with pytest.raises(DomainError):
        cross_entropy(np.zeros((2, 3)), [1, 4])
    with pytest.raises(DimensionError):
        cross_entropy(np.zeros((2, 3)), [1])


# optimizer ---------------------------------------------------------------------

def test_adam_first_step_size():
    p = {"w": np.array([1.0, -2.0, 3.0])}
    Adam(lr=0.01).step(p, {"w": np.array([5.0, -0.3, 1e3])})
    delta = np.abs(p["w"] - [1.0, -2.0, 3.0])
    assert np.all((delta >= 0.99 * 0.01) & (delta <= 0.01))


def test_adam_matches_textbook_update():
    rng = np.random.default_rng(2)
    theta = rng.standard_normal(4)
    p = {"w": theta.copy()}
    opt = Adam(lr=0.1, beta1=0.8, beta2=0.9, eps=1e-6)
    m = v = np.zeros(4)
    for t in range(1, 6):
        g = rng.standard_normal(4)
        opt.step(p, {"w": g})
        m = 0.8 * m + 0.2 * g
        v = 0.9 * v + 0.1 * g * g
        theta = theta - 0.1 * (m / (1 - 0.8 ** t)) / (np.sqrt(v / (1 - 0.9 ** t)) + 1e-6)
    np.testing.assert_allclose(p["w"], theta, rtol=1e-13)


def test_adam_zero_gradient_leaves_parameters():
    p = {"w": np.array([0.5, 1.5])}
    opt = Adam()
    for _ in range(10):
        opt.step(p, {"w": np.zeros(2)})
    assert p["w"].tolist() == [0.5, 1.5]


def test_adam_reset_and_non_finite():
    p = {"a.spline_weight": np.ones(2), "a.base_weight": np.ones(2)}
    opt = Adam()
    opt.step(p, {k: np.ones(2) for k in p})
    opt.reset(".spline_weight")
    assert list(opt.state) == ["a.base_weight"]
    with pytest.raises(NonFiniteError, match="a.base_weight"):
        opt.step(p, {"a.spline_weight": np.ones(2), "a.base_weight": np.array([np.nan, 0])})


# config -------------------------------------------------------------------------

def test_train_config_validation():
    for bad in (dict(epochs=0), dict(batch_size=0), dict(learning_rate=0.0), dict(precision=16),
                dict(grid_update_every=-1)):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)


@given(st.integers(1, 200), st.integers(0, 5))
def test_grid_schedule_first_quarter(epochs, every):
    cfg = TrainConfig(epochs=epochs, grid_update_every=every)
    due = [e for e in range(1, epochs + 1) if cfg.grid_update_due(e)]
    if every == 0:
        assert due == []
    else:
        assert due == [e for e in range(every, math.ceil(epochs / 4) + 1, every)]


# data ------------------------------------------------------------------------------

def test_prepare_data_uses_training_statistics_only():
    cube = small_cube()
    data = prepare_data(cube, 3, (6, 1, 3), seed=0)
    r, c = np.nonzero(cube.labels)
    np.testing.assert_allclose(data.mean, cube.reflectance[r[data.train], c[data.train]].astype(float).mean(0))
    assert not set(data.train) & set(data.test) and not set(data.train) & set(data.val)


# training ----------------------------------------------------------------------------

def test_training_runs_and_writes_outputs(tmp_path):
    report = run_small(tmp_path)
    assert len(report.records) == 2 and report.grid_updates == [1]
    assert report.parameter_count == count_parameters(ckpt_io.restore_model(report.checkpoint))
    for name in ("best.kanc", "epochs.csv", "timings.csv", "report.txt"):
        assert (tmp_path / name).exists()
    text = (tmp_path / "report.txt").read_text()
    assert "oa: " in text and "kappa: " in text and "wall" not in text
    assert len((tmp_path / "epochs.csv").read_text().splitlines()) == 3


def test_first_epoch_loss_near_uniform():
    report = run_small(epochs=1)
    ln_k = math.log(3)
    assert 0.8 * ln_k <= report.records[0].train_loss <= 1.3 * ln_k


def test_training_is_deterministic(tmp_path):
    a = run_small(tmp_path / "a")
    b = run_small(tmp_path / "b")
    assert (tmp_path / "a" / "report.txt").read_bytes() == (tmp_path / "b" / "report.txt").read_bytes()
    assert (tmp_path / "a" / "best.kanc").read_bytes() == (tmp_path / "b" / "best.kanc").read_bytes()
    assert [r.train_loss for r in a.records] == [r.train_loss for r in b.records]


def test_grid_update_every_zero_keeps_grids():
    report = run_small(grid_update_every=0)
    fresh = KANet(report.checkpoint.network, seed=0)
    for name, mod in fresh.kan_layers():
        assert np.array_equal(report.checkpoint.tensors[f"{name}.grid"], mod.buffers["grid"].astype(np.float64))
    assert report.grid_updates == []


def test_network_overrides_cannot_set_geometry():
    with pytest.raises(ConfigError, match="patch"):
        train(small_cube(), 3, (6, 1, 3), TrainConfig(epochs=1), {"patch": (3, 3, 6)})


def test_precision_64_round_trips():
    report = run_small(epochs=1, precision=64)
    model = ckpt_io.restore_model(report.checkpoint)
    assert model.dtype == np.float64


# evaluation -------------------------------------------------------------------------

def test_evaluate_reproduces_test_metrics(tmp_path):
    report = run_small(tmp_path)
    ev = evaluate(ckpt_io.load(tmp_path / "best.kanc"), small_cube(), raster_path=tmp_path / "map.pgm")
    assert ev.splits["test"].confusion.tolist() == report.metrics.confusion.tolist()
    # the splits partition the labeled pixels, so their confusions add up to the whole
    total = sum(m.confusion for m in ev.splits.values())
    assert total.tolist() == ev.metrics.confusion.tolist()
    raster = read_pgm(tmp_path / "map.pgm")
    assert raster.shape == (12, 12)
    assert np.array_equal(raster > 0, small_cube().labels > 0)


def test_evaluate_geometry_mismatch(tmp_path):
    report = run_small(epochs=1)
    other = synth_cube(classes=3, height=12, width=12, bands=7, blob_count=2)
    with pytest.raises(DimensionError):
        evaluate(report.checkpoint, other)


def test_constant_prediction_has_zero_kappa():
    from kanet.hsi import compute_metrics
    truth = np.array([1, 2] * 10)
    assert compute_metrics(truth, np.ones(20, int), 2).kappa == 0.0


def test_tiny_cube_without_val_keeps_last_epoch():
    cube = LabeledCube(np.random.default_rng(0).standard_normal((6, 6, 4)).astype(np.float32),
                       np.tile([1, 2], 18).reshape(6, 6), 2)
    report = train(cube, 3, (1, 0, 1), TrainConfig(epochs=2, batch_size=8), SMALL_NET)
    assert report.best_epoch == 2
