import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import tiny_config
from getnet.dataset import LabeledSet
from getnet.errors import DataError, LeakageError
from getnet.model import build, forward, state_arrays
from getnet.rng import RandomState
from getnet.training import (AdamState, TrainConfig, adam_step, bce_loss, binary_accuracy,
                             learning_rate, prepare_training_set, train)


def labeled(y, prefix="w", x=None):
    y = np.asarray(y)
    n = y.size
    x = np.zeros((n, 16, 32)) if x is None else x
    return LabeledSet(x, y, [f"{prefix}{i}" for i in range(n)], ["s"] * n, [2015] * n,
                      [prefix] * n, np.arange(n))


def band_task(n, seed, prefix):
    """Half the windows carry a bright horizontal band on top of uniform noise."""
    gen = np.random.default_rng(seed)
    x = gen.random((n, 16, 32)) * 0.6
    y = np.arange(n) % 2
    x[y == 1, 6:9, :] += 0.4
    return labeled(y, prefix, x)


TOY_MODEL = dict(width_scale=1 / 16, seed=1)
TOY_TRAIN = TrainConfig(epochs=10, lr0=0.01, batch_size=8, seed=1)


@pytest.fixture(scope="module")
def toy_run():
    tr, va = band_task(96, 0, "t"), band_task(48, 1, "v")
    model, hist = train(build(tiny_config(**TOY_MODEL)), tr, va, TOY_TRAIN)
    return model, hist, va


# -- downsampling ------------------------------------------------------------------

def test_downsample_halves_negatives():
    ds = labeled([1] * 10 + [0] * 100)
    out = prepare_training_set(ds, 0.5, RandomState(3))
    assert out.n_pos == 10 and (out.y == 0).sum() == 50


def test_downsample_identity_and_determinism():
    ds = labeled([1] * 5 + [0] * 37)
    assert prepare_training_set(ds, 1.0, RandomState(0)).ids == ds.ids
    a = prepare_training_set(ds, 0.5, RandomState(9)).ids
    assert a == prepare_training_set(ds, 0.5, RandomState(9)).ids
    assert a != prepare_training_set(ds, 0.5, RandomState(10)).ids


def test_downsample_requires_positives():
    with pytest.raises(DataError):
        prepare_training_set(labeled([0] * 8), 0.5, RandomState(0))


@given(npos=st.integers(1, 20), nneg=st.integers(0, 80), frac=st.floats(0.05, 1.0))
def test_downsample_counts(npos, nneg, frac):
    out = prepare_training_set(labeled([1] * npos + [0] * nneg), frac, RandomState(1))
    assert out.n_pos == npos
    assert (out.y == 0).sum() == round(frac * nneg)
    assert len(set(out.ids)) == len(out)


# -- loss --------------------------------------------------------------------------

def test_bce_examples():
    assert math.isclose(bce_loss(np.array([0.5]), np.array([1]))[0], math.log(2))
    assert math.isclose(bce_loss(np.array([0.5]), np.array([0]))[0], math.log(2))
    assert math.isclose(bce_loss(np.array([0.75]), np.array([1]))[0], -math.log(0.75))
    assert abs(bce_loss(np.array([0.75]), np.array([1]))[0] - 0.287682) < 1e-6
    assert bce_loss(np.array([1.0, 0.0]), np.array([1, 0]))[0] <= 1e-6


@given(st.lists(st.tuples(st.floats(0.01, 0.99), st.integers(0, 1)), min_size=1, max_size=10))
def test_bce_gradient_matches_finite_difference(pairs):
    p = np.array([a for a, _ in pairs])
    y = np.array([b for _, b in pairs])
    _, g = bce_loss(p, y)
    h = 1e-6
    for i in range(p.size):
        up, dn = p.copy(), p.copy()
        up[i] += h
        dn[i] -= h
        fd = (bce_loss(up, y)[0] - bce_loss(dn, y)[0]) / (2 * h)
        assert math.isclose(g[i], fd, rel_tol=1e-5, abs_tol=1e-8)


# -- optimizer and schedule --------------------------------------------------------

def test_learning_rate_schedule():
    assert learning_rate(10, 0.01, 5) == 0.0025
    rates = [learning_rate(e, 0.01, 5) for e in range(20)]
    assert all(a >= b for a, b in zip(rates, rates[1:]))
    for e in range(1, 20):
        expected = rates[e - 1] / 2 if e % 5 == 0 else rates[e - 1]
        assert rates[e] == expected


def test_adam_first_step_moves_by_lr():
    p = {"w": np.array([1.0])}
    adam_step(p, {"w": np.array([1.0])}, AdamState.zeros_like(p), lr=0.01)
    # m_hat = 1, v_hat = 1, so the step is lr / (1 + eps)
    assert math.isclose(p["w"][0], 1.0 - 0.01 / (1 + 1e-8), rel_tol=0, abs_tol=1e-15)


def test_adam_matches_hand_recurrence():
    gen = np.random.default_rng(0)
    w = gen.normal(size=4)
    p = {"w": w.copy()}
    st_ = AdamState.zeros_like(p)
    m = v = np.zeros(4)
    for t in range(1, 6):
        g = gen.normal(size=4)
        adam_step(p, {"w": g}, st_, 0.003)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w = w - 0.003 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p["w"], w, rtol=1e-12)


def test_adam_zero_gradient_leaves_params():
    p = {"w": np.array([0.3, -2.0])}
    adam_step(p, {"w": np.zeros(2)}, AdamState.zeros_like(p), lr=0.1)
    np.testing.assert_array_equal(p["w"], [0.3, -2.0])


def test_config_validation():
    for bad in (dict(lr0=-1), dict(halve_every=0), dict(neg_downsample=0), dict(epochs=0)):
        with pytest.raises(DataError):
            TrainConfig(**bad)


# -- training loop -----------------------------------------------------------------

def test_train_rejects_overlap():
    tr = band_task(8, 0, "t")
    with pytest.raises(LeakageError):
        train(build(tiny_config()), tr, tr.subset([0, 1]), TrainConfig(epochs=1))


def test_zero_learning_rate_keeps_weights():
    tr, va = band_task(16, 0, "t"), band_task(9, 1, "v")
    model = build(tiny_config())
    before = {k: v.copy() for k, v in state_arrays(model).items() if "running" not in k}
    model, hist = train(model, tr, va, TrainConfig(epochs=2, lr0=0.0, batch_size=8))
    after = state_arrays(model)
    for k, v in before.items():
        np.testing.assert_array_equal(after[k], v)
    prior = max(va.y.mean(), 1 - va.y.mean())
    p = forward(model, va.x)
    assert hist.val_accuracy[0] == binary_accuracy(p, va.y)
    # a constant-ish untrained model lands on one class
    assert hist.val_accuracy[0] <= prior + 1e-12


def test_separable_toy_task(toy_run):
    _, hist, _ = toy_run
    assert hist.val_accuracy[-1] > 0.9
    assert hist.best_accuracy > 0.9


def test_loss_decreases_early(toy_run):
    _, hist, _ = toy_run
    assert hist.loss[2] < hist.loss[0]
    assert "loss_not_decreasing" not in hist.flags


def test_best_epoch_invariant(toy_run):
    model, hist, va = toy_run
    best = max(hist.val_accuracy)
    assert hist.best_epoch == hist.val_accuracy.index(best)
    # the returned weights are the ones that scored best
    assert binary_accuracy(forward(model, va.x), va.y) == best
    assert hist.lr == [learning_rate(e, 0.01, 5) for e in range(10)]


def test_flat_loss_is_flagged():
    tr, va = band_task(2, 0, "t").subset([1]), band_task(8, 1, "v")
    # no noise, no dropout and a single window: every epoch sees the same loss
    model = build(tiny_config(dropout_p=0.0, noise_sigma=0.0))
    _, hist = train(model, tr, va, TrainConfig(epochs=3, lr0=0.0))
    assert hist.loss[0] == hist.loss[2]
    assert "loss_not_decreasing" in hist.flags


def test_training_is_deterministic(tmp_path):
    tr, va = band_task(24, 0, "t"), band_task(8, 1, "v")
    cfg = TrainConfig(epochs=2, lr0=0.01, batch_size=8, seed=4)
    m1, h1 = train(build(tiny_config(seed=2)), tr, va, cfg, log_path=tmp_path / "a.jsonl")
    m2, h2 = train(build(tiny_config(seed=2)), tr, va, cfg)
    assert h1.loss == h2.loss and h1.val_accuracy == h2.val_accuracy
    for k, v in state_arrays(m1).items():
        np.testing.assert_array_equal(v, state_arrays(m2)[k])
    lines = [json.loads(s) for s in (tmp_path / "a.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in lines] == [0, 1]
    assert lines[0]["loss"] == h1.loss[0]
