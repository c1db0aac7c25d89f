"""Feature-rectification weights.

Row ``j`` of ``W`` reconstructs every other feature from feature ``j``::

    L_r = sum_i sum_j || X[i, -j] - X[i, j] * W[j, -j] ||

The diagonal is pinned at zero: no feature reconstructs itself.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .errors import ConfigError, DimensionError, DivergenceError

NORMS = ("l2sq", "l1")
INIT_SCHEMES = ("zeros", "uniform_small")


@dataclass(frozen=True, eq=False)
class RectifierWeights:
    w: NDArray

    def __post_init__(self):
        w = np.array(self.w, dtype=float)
        if w.ndim != 2 or w.shape[0] != w.shape[1] or w.shape[0] < 2:
            raise DimensionError(f"rectifier weights must be a square matrix with p >= 2, got {w.shape}")
        if not np.isfinite(w).all():
            raise DivergenceError("rectifier weights contain non-finite entries")
        np.fill_diagonal(w, 0.0)
        w.flags.writeable = False
        object.__setattr__(self, "w", w)

    @property
    def p(self) -> int:
        return self.w.shape[0]

    def to_list(self) -> list:
        return self.w.tolist()

    def __eq__(self, other):
        return isinstance(other, RectifierWeights) and np.array_equal(self.w, other.w)


def init_weights(p: int, scheme: str = "zeros", rng: np.random.Generator | None = None) -> RectifierWeights:
    if p < 2:
        raise DimensionError(f"rectifier needs p >= 2, got {p}")
    if scheme == "zeros":
        return RectifierWeights(np.zeros((p, p)))
    if scheme == "uniform_small":
        if rng is None:
            raise ConfigError("uniform_small initialization needs a random generator")
        return RectifierWeights(rng.uniform(-0.01, 0.01, size=(p, p)))
    raise ConfigError(f"unknown init scheme {scheme!r}; expected one of {INIT_SCHEMES}")


def _as_matrix(W) -> NDArray:
    return W.w if isinstance(W, RectifierWeights) else np.asarray(W, dtype=float)


def _check(X, W) -> tuple[NDArray, NDArray]:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    w = _as_matrix(W)
    if X.shape[1] != w.shape[0]:
        raise DimensionError(f"batch has {X.shape[1]} columns but W is {w.shape[0]}x{w.shape[1]}")
    return X, w


def _prepare(X: NDArray, center: bool) -> NDArray:
    return X - X.mean(axis=0) if center else X


def _residuals(X: NDArray, w: NDArray) -> NDArray:
    # R[i, j, k] = X[i, k] - X[i, j] * W[j, k]; the k == j slot is masked by callers
    R = X[:, None, :] - X[:, :, None] * w[None, :, :]
    idx = np.arange(w.shape[0])
    R[:, idx, idx] = 0.0
    return R


def reconstruction_loss(X, W, norm: str = "l2sq", center: bool = False) -> float:
    """Sum over samples and features of the reconstruction error (squared L2 by default)."""
    X, w = _check(X, W)
    X = _prepare(X, center)
    if norm == "l2sq":
        # closed form of sum_{i, j, k != j} (X_ik - X_ij W_jk)^2 via the Gram matrix
        G = X.T @ X
        d = np.diag(G)
        off = ~np.eye(w.shape[0], dtype=bool)
        terms = d[None, :] - 2.0 * w * G + w * w * d[:, None]
        return float(terms[off].sum())
    if norm == "l1":
        return float(np.abs(_residuals(X, w)).sum())
    raise ConfigError(f"unknown norm {norm!r}; expected one of {NORMS}")


def reconstruction_grad(X, W, norm: str = "l2sq", center: bool = False) -> NDArray:
    """Gradient of :func:`reconstruction_loss` with respect to ``W``; zero diagonal."""
    X, w = _check(X, W)
    X = _prepare(X, center)
    if norm == "l2sq":
        G = X.T @ X
        grad = -2.0 * (G - w * np.diag(G)[:, None])
    elif norm == "l1":
        grad = -np.einsum("ij,ijk->jk", X, np.sign(_residuals(X, w)))
    else:
        raise ConfigError(f"unknown norm {norm!r}; expected one of {NORMS}")
    np.fill_diagonal(grad, 0.0)
    return grad


def rectify(X, W) -> NDArray:
    X, w = _check(X, W)
    return X @ w


def sgd_step_w(W: RectifierWeights, grad, lr: float) -> RectifierWeights:
    if not lr > 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    grad = np.asarray(grad, dtype=float)
    if not np.isfinite(grad).all():
        raise DivergenceError("non-finite rectifier gradient")
    return RectifierWeights(_as_matrix(W) - lr * grad)
