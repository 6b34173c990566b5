import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import GRADIENT_CASES
from pil_unlearn import dataset_io as dio
from pil_unlearn import linear_core as lc
from pil_unlearn.errors import ArgumentError, NumericError, ShapeError

logits = arrays(np.float64, st.integers(2, 8), elements=st.floats(-30, 30))


def test_forward_basis_and_zero():
    rng = np.random.default_rng(0)
    w = rng.normal(size=(4, 3))
    for j in range(4):
        assert np.array_equal(lc.forward(np.eye(4)[j], w), w[j])
    assert np.all(lc.forward(np.zeros(4), w) == 0)


def test_forward_matches_dot_products():
    rng = np.random.default_rng(1)
    x, w = rng.normal(size=(5, 3)), rng.normal(size=(3, 2))
    brute = [[sum(x[i, a] * w[a, c] for a in range(3)) for c in range(2)] for i in range(5)]
    assert np.allclose(lc.forward(x, w), brute, atol=1e-12)
    with pytest.raises(ShapeError):
        lc.forward(np.zeros(4), w)


def test_softmax_examples():
    assert np.allclose(lc.softmax(np.zeros(5)), 0.2)
    assert np.allclose(lc.softmax(np.array([0.0, math.log(3)])), [0.25, 0.75])
    with pytest.raises(NumericError):
        lc.softmax(np.array([0.0, np.inf]))


@settings(max_examples=100, deadline=None)
@given(logits, st.floats(-50, 50))
def test_softmax_sum_and_shift(z, c):
    p = lc.softmax(z)
    assert abs(p.sum() - 1) <= 1e-6 and np.all(p >= 0)
    assert np.max(np.abs(lc.softmax(z + c) - p)) <= 1e-6


def test_cross_entropy_examples():
    assert math.isclose(lc.cross_entropy(np.array([0.5, 0.5]), 0), math.log(2), rel_tol=1e-9)
    assert abs(lc.cross_entropy(np.array([0.0, 1.0]), 1)) < 1e-11
    assert math.isclose(lc.cross_entropy(np.array([0.25, 0.75]), 1), -math.log(0.75), rel_tol=1e-9)
    with pytest.raises(ArgumentError):
        lc.cross_entropy(np.array([0.5, 0.5]), 2)


def test_kl_examples():
    assert abs(lc.kl_to_uniform(np.full(4, 0.25))) < 1e-12
    assert math.isclose(lc.kl_to_uniform(np.eye(10)[3]), math.log(10), rel_tol=1e-9)
    with pytest.raises(NumericError):
        lc.kl_to_uniform(np.array([np.nan, 1.0]))


@settings(max_examples=100, deadline=None)
@given(logits)
def test_kl_identity_and_bounds(z):
    p = lc.softmax(z)
    k = p.size
    kl = lc.kl_to_uniform(p)
    assert abs(kl - (math.log(k) - lc.entropy(p))) <= 1e-6
    assert -1e-9 <= kl <= math.log(k) + 1e-9


@pytest.mark.parametrize("name", list(GRADIENT_CASES)[:3])
def test_gradients_match_finite_differences(name):
    fn, tol = GRADIENT_CASES[name]
    rng = np.random.default_rng(42)
    assert max(fn(rng) for _ in range(100)) < tol


def test_grad_w_zero_cases():
    w = np.zeros((3, 2))
    assert np.all(lc.grad_w_ce(np.zeros(3), 1, w) == 0)
    # softmax saturated on the label gives a zero gradient up to roundoff
    big = np.array([[0.0, 800.0], [0.0, 0.0], [0.0, 0.0]])
    assert np.allclose(lc.grad_w_ce(np.array([1.0, 0, 0]), 1, big), 0, atol=1e-300)


def test_grad_x_kl_zero_at_uniform():
    w = np.ones((3, 4))
    assert np.allclose(lc.grad_x_loss(np.array([0.2, 0.3, 0.4]), None, w, "kl_uniform"), 0)


def test_grad_x_ce_by_hand():
    # k=2, w is the identity padded with a zero row; logits equal (x0, x1)
    w = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
    x = np.array([0.3, -0.2, 0.9])
    e0, e1 = math.exp(0.3), math.exp(-0.2)
    p0, p1 = e0 / (e0 + e1), e1 / (e0 + e1)
    want = np.array([p0 - 1, p1, 0.0])
    assert np.allclose(lc.grad_x_loss(x, 0, w, "ce"), want, atol=1e-12)
    with pytest.raises(ArgumentError):
        lc.grad_x_loss(x, 0, w, "mse")


def test_batch_gradient_is_mean():
    rng = np.random.default_rng(3)
    x, w, y = rng.random((6, 4)), rng.normal(size=(4, 3)), rng.integers(0, 3, 6)
    each = np.mean([lc.grad_w_ce(x[i], y[i], w) for i in range(6)], axis=0)
    assert np.allclose(lc.grad_w_ce(x, y, w), each, atol=1e-12)


def test_init_weights_range_and_determinism():
    w = lc.init_weights(16, 5, 3)
    assert np.all(np.abs(w.w) <= 0.25) and w == lc.init_weights(16, 5, 3)
    assert not w == lc.init_weights(16, 5, 4)


def test_lr_schedule():
    h = lc.SgdHyper(epochs=4, learning_rate=0.2)
    assert [round(lc.lr_at(h, e), 10) for e in range(4)] == [0.2, round(0.1 * (1 + math.cos(math.pi / 4)), 10),
                                                              0.1, round(0.1 * (1 + math.cos(3 * math.pi / 4)), 10)]
    assert lc.lr_at(lc.SgdHyper(schedule="constant"), 7) == 0.003


def test_hyper_validation():
    for bad in ({"learning_rate": 0}, {"batch_size": 0}, {"momentum": 1.0}, {"schedule": "step"}):
        with pytest.raises(ArgumentError):
            lc.SgdHyper(**bad)


def test_full_batch_gd_matches_hand_loop():
    rng = np.random.default_rng(5)
    x = rng.random((10, 4)).astype(np.float32)
    y = rng.integers(0, 3, 10)
    h = lc.SgdHyper(epochs=5, learning_rate=0.5, momentum=0.0, weight_decay=0.0,
                    batch_size=10, schedule="constant", shuffle=False)
    w, _ = lc.fit_linear(x, y, 3, h)
    W = lc.init_weights(4, 3, h.seed).w.astype(np.float64)
    x64 = x.astype(np.float64)
    for _ in range(5):
        W -= 0.5 * lc.grad_w_ce(x64, y, W)
    assert np.allclose(w.w, W, atol=1e-5)


def test_train_separable_blobs():
    ds = dio.generate_synthetic(2, 100, 2, 1.0, 0.05, 7)
    # bias-free model: centre the inputs so a separator through the origin exists
    x = ds.pixels - ds.pixels.mean(0)
    w, trace = lc.fit_linear(x, ds.labels, 2, lc.SgdHyper(learning_rate=0.1))
    assert np.mean(lc.predict(w, x) == ds.labels) >= 0.99
    assert len(trace) == 30 and trace[-1] < trace[0]


def test_train_deterministic_and_empty():
    ds = dio.generate_synthetic(3, 20, 8, 0.2, 0.05, 1)
    h = lc.SgdHyper(epochs=3)
    a, ta = lc.train_sgd(ds, h)
    b, tb = lc.train_sgd(ds, h)
    assert a == b and ta == tb
    with pytest.raises(ArgumentError):
        lc.train_sgd(ds.subset(np.arange(0)), h)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_loss_reports_epoch():
    x = np.full((4, 2), 1.0, np.float32)
    w0 = lc.LinearWeights(np.array([[3e38, -3e38], [3e38, -3e38]], np.float32))
    with pytest.raises(NumericError, match="epoch 0"):
        lc.fit_linear(x, np.array([1, 1, 0, 0]), 2, lc.SgdHyper(epochs=2, learning_rate=1e30), w0)


def test_accuracy_tie_break():
    ds = dio.LabeledDataset(np.random.default_rng(0).random((9, 3), dtype=np.float32),
                            np.array([0, 0, 1, 2, 0, 1, 2, 2, 2]), (1, 1, 3), 3)
    assert lc.accuracy(np.zeros((3, 3)), ds) == pytest.approx(3 / 9)
    one = ds.subset([3])
    # every logit favours class 2, the label of row 3
    assert lc.accuracy(np.tile([[0.0, 0.0, 1.0]], (3, 1)), one) == 1.0
    with pytest.raises(ShapeError):
        lc.accuracy(np.zeros((4, 3)), ds)


def test_weights_round_trip(tmp_path):
    w = lc.init_weights(7, 3, 0)
    lc.save_weights(w, tmp_path / "w.pild")
    assert lc.load_weights(tmp_path / "w.pild") == w
