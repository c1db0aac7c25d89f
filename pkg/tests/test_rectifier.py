import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cfrlearn.errors import ConfigError, DimensionError, DivergenceError
from cfrlearn.rectifier import (
    RectifierWeights,
    init_weights,
    reconstruction_grad,
    reconstruction_loss,
    rectify,
    sgd_step_w,
)

from conftest import central_diff, max_rel_err


def brute_loss(X, W, norm="l2sq"):
    n, p = X.shape
    total = 0.0
    for i in range(n):
        for j in range(p):
            for k in range(p):
                if k == j:
                    continue
                r = X[i, k] - X[i, j] * W[j, k]
                total += r * r if norm == "l2sq" else abs(r)
    return total


def random_w(rng, p, scale=1.0):
    w = rng.normal(scale=scale, size=(p, p))
    np.fill_diagonal(w, 0.0)
    return w


# -- weights -----------------------------------------------------------------------

def test_init_zeros():
    W = init_weights(3, "zeros")
    assert np.array_equal(W.w, np.zeros((3, 3)))


def test_init_uniform_small():
    W = init_weights(5, "uniform_small", np.random.default_rng(1))
    assert np.all(np.diag(W.w) == 0)
    assert np.abs(W.w).max() <= 0.01
    assert np.abs(W.w).max() > 0


def test_init_same_seed_identical():
    a = init_weights(6, "uniform_small", np.random.default_rng(9))
    b = init_weights(6, "uniform_small", np.random.default_rng(9))
    assert a == b


def test_init_errors():
    with pytest.raises(DimensionError):
        init_weights(1)
    with pytest.raises(ConfigError):
        init_weights(3, "gaussian")
    with pytest.raises(ConfigError):
        init_weights(3, "uniform_small")


def test_weights_force_zero_diagonal_and_read_only():
    W = RectifierWeights(np.ones((3, 3)))
    assert np.all(np.diag(W.w) == 0)
    with pytest.raises(ValueError):
        W.w[0, 1] = 5.0


def test_weights_reject_non_finite():
    w = np.zeros((2, 2))
    w[0, 1] = np.nan
    with pytest.raises(DivergenceError):
        RectifierWeights(w)


# -- loss --------------------------------------------------------------------------

def test_loss_exact_reconstruction_is_zero():
    X = np.array([[1.0, 2.0]])
    W = RectifierWeights(np.array([[0.0, 2.0], [0.5, 0.0]]))
    assert reconstruction_loss(X, W) == 0.0


def test_loss_zero_weights_leaves_raw_features():
    X = np.array([[1.0, 2.0]])
    assert reconstruction_loss(X, init_weights(2)) == 5.0


@pytest.mark.parametrize("norm", ["l2sq", "l1"])
def test_loss_matches_triple_loop(rng, norm):
    for _ in range(10):
        X = rng.normal(size=(5, 3))
        W = random_w(rng, 3)
        got = reconstruction_loss(X, W, norm=norm)
        assert got == pytest.approx(brute_loss(X, W, norm), abs=1e-12, rel=1e-12)


def test_loss_ignores_diagonal_input(rng):
    X = rng.normal(size=(7, 4))
    w = random_w(rng, 4)
    w_diag = w + np.diag(rng.normal(size=4))
    assert reconstruction_loss(X, RectifierWeights(w_diag)) == reconstruction_loss(X, w)


def test_loss_centering(rng):
    X = rng.normal(size=(8, 3)) + 4.0
    W = random_w(rng, 3)
    assert reconstruction_loss(X, W, center=True) == pytest.approx(
        brute_loss(X - X.mean(axis=0), W), rel=1e-12
    )


def test_loss_dimension_mismatch(rng):
    with pytest.raises(DimensionError):
        reconstruction_loss(rng.normal(size=(4, 3)), init_weights(4))


def test_unknown_norm(rng):
    with pytest.raises(ConfigError):
        reconstruction_loss(rng.normal(size=(4, 3)), init_weights(3), norm="huber")


@settings(max_examples=50, deadline=None)
@given(
    X=arrays(np.float64, (4, 3), elements=st.floats(-10, 10)),
    c=st.floats(0.1, 10),
)
def test_loss_scales_quadratically(X, c):
    W = np.array([[0.0, 0.3, -1.2], [0.7, 0.0, 0.1], [-0.4, 2.0, 0.0]])
    base = reconstruction_loss(X, W)
    assert base >= 0
    assert reconstruction_loss(c * X, W) == pytest.approx(c * c * base, rel=1e-9, abs=1e-9)


# -- gradient ----------------------------------------------------------------------

def test_grad_matches_finite_differences(rng):
    worst = 0.0
    for _ in range(20):
        X = rng.normal(size=(6, 4))
        w0 = random_w(rng, 4)
        mask = ~np.eye(4, dtype=bool)

        def f(flat):
            w = np.zeros((4, 4))
            w[mask] = flat
            return reconstruction_loss(X, w)

        fd = np.zeros((4, 4))
        fd[mask] = central_diff(f, w0[mask])
        worst = max(worst, max_rel_err(reconstruction_grad(X, w0), fd))
    assert worst < 1e-6


def test_grad_zero_at_exact_reconstruction():
    # rank-one data: every column is a multiple of the first
    base = np.array([1.0, -2.0, 0.5, 3.0])
    scales = np.array([1.0, 2.0, -0.5])
    X = base[:, None] * scales[None, :]
    w = scales[None, :] / scales[:, None]
    np.fill_diagonal(w, 0.0)
    assert reconstruction_loss(X, w) == pytest.approx(0.0, abs=1e-20)
    assert np.abs(reconstruction_grad(X, w)).max() < 1e-12


def test_grad_zero_row_for_zero_column(rng):
    X = rng.normal(size=(6, 4))
    X[:, 2] = 0.0
    g = reconstruction_grad(X, random_w(rng, 4))
    assert np.all(g[2] == 0)


def test_grad_diagonal_is_zero(rng):
    g = reconstruction_grad(rng.normal(size=(5, 5)), random_w(rng, 5))
    assert np.all(np.diag(g) == 0)


# -- rectify / sgd -----------------------------------------------------------------

def test_rectify_values():
    assert np.array_equal(rectify([[1.0, 2.0]], [[0.0, 1.0], [0.0, 0.0]]), [[0.0, 1.0]])
    assert np.array_equal(rectify(np.ones((3, 2)), init_weights(2)), np.zeros((3, 2)))


def test_rectify_ignores_diagonal(rng):
    X = rng.normal(size=(5, 3))
    w = random_w(rng, 3)
    W = RectifierWeights(w + 10 * np.eye(3))
    assert np.array_equal(rectify(X, W), X @ w)


def test_sgd_zero_grad_is_identity(rng):
    W = RectifierWeights(random_w(rng, 3))
    assert sgd_step_w(W, np.zeros((3, 3)), 0.005) == W


def test_sgd_rejects_bad_inputs():
    W = init_weights(2)
    with pytest.raises(ConfigError):
        sgd_step_w(W, np.zeros((2, 2)), 0.0)
    with pytest.raises(DivergenceError):
        sgd_step_w(W, np.full((2, 2), np.inf), 0.1)


def test_single_step_descends_on_one_sample(rng):
    X = rng.normal(size=(1, 4))
    W = RectifierWeights(random_w(rng, 4))
    before = reconstruction_loss(X, W)
    W2 = sgd_step_w(W, reconstruction_grad(X, W), 1e-3)
    assert reconstruction_loss(X, W2) < before


def test_full_batch_descent_is_monotone(rng):
    X = rng.normal(size=(40, 5))
    X[:, 1] += 0.8 * X[:, 0]
    # the loss is a separable quadratic in W with curvature 2 * ||X_j||^2 per row
    lr = 0.5 / (2 * (X ** 2).sum(axis=0).max())
    W = init_weights(5)
    losses = [reconstruction_loss(X, W)]
    for _ in range(100):
        W = sgd_step_w(W, reconstruction_grad(X, W), lr)
        losses.append(reconstruction_loss(X, W))
    assert all(b <= a + 1e-9 for a, b in zip(losses, losses[1:]))
    assert losses[-1] < losses[0]
