"""CFR linear regression and the baseline estimators it is compared against.

The CFR regressor predicts ``X (I + W) beta``: the rectified term ``X W beta``
plus the plain term ``X beta`` with one shared coefficient vector. ``W`` and
``beta`` are trained by alternating stochastic gradient steps.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
from numpy.typing import NDArray

from . import rectifier
from .datagen import Dataset
from .errors import (
    ConfigError,
    ConvergenceWarning,
    DataError,
    DimensionError,
    DivergenceError,
    ParseError,
    SingularSystemError,
)
from .rectifier import RectifierWeights

logger = logging.getLogger(__name__)

W_UPDATE_LOSSES = ("reconstruction_only", "joint")
GRAD_SCALES = ("sum", "mean")
ALTERNATIONS = ("batch", "epoch")
PREDICT_MODES = ("coefficients", "rectified")
METHODS = ("ols", "lasso", "ridge", "dwr-like", "cfr")


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for :func:`train_cfr`.

    ``batch_size=None`` means full batch. ``grad_scale`` chooses whether the
    learning rates multiply sum-form (default) or mean-form batch gradients.
    ``predict_mode`` picks how a trained model scores new data: with the
    learned coefficients on raw features, or through the rectified map.
    """

    lr_w: float = 0.005
    lr_beta: float = 0.001
    epochs: int = 50
    batch_size: Optional[int] = 64
    seed: int = 47
    w_update_loss: str = "reconstruction_only"
    convergence_tol: float = 1e-8
    grad_scale: str = "sum"
    alternation: str = "batch"
    w_init: str = "zeros"
    norm: str = "l2sq"
    center: bool = False
    fit_intercept: bool = False
    predict_mode: str = "coefficients"

    def __post_init__(self):
        for name in ("lr_w", "lr_beta"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                raise ConfigError(f"{name} must be a finite non-negative number, got {value!r}")
        if isinstance(self.epochs, bool) or int(self.epochs) != self.epochs or self.epochs < 1:
            raise ConfigError(f"epochs must be an integer >= 1, got {self.epochs!r}")
        if self.batch_size is not None and (int(self.batch_size) != self.batch_size or self.batch_size < 1):
            raise ConfigError(f"batch_size must be a positive integer or null, got {self.batch_size!r}")
        if not self.convergence_tol >= 0:
            raise ConfigError("convergence_tol must be >= 0")
        choices = {
            "w_update_loss": W_UPDATE_LOSSES,
            "grad_scale": GRAD_SCALES,
            "alternation": ALTERNATIONS,
            "w_init": rectifier.INIT_SCHEMES,
            "norm": rectifier.NORMS,
            "predict_mode": PREDICT_MODES,
        }
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class CfrModel:
    beta: NDArray
    weights: RectifierWeights
    history: list = field(default_factory=list)
    config: TrainConfig = field(default_factory=TrainConfig)
    intercept: Optional[float] = None
    initial_losses: Optional[tuple] = None
    converged: bool = False

    method = "cfr"

    @property
    def p(self) -> int:
        return self.beta.size

    def predict(self, X, mode: Optional[str] = None) -> NDArray:
        mode = mode or self.config.predict_mode
        if mode == "rectified":
            out = cfr_predict(X, self.weights, self.beta)
        elif mode == "coefficients":
            out = _linear_predict(X, self.beta)
        else:
            raise ConfigError(f"predict mode must be one of {PREDICT_MODES}, got {mode!r}")
        return out + (self.intercept or 0.0)


@dataclass
class LinearModel:
    beta: NDArray
    method: str
    regularization: Optional[float] = None
    intercept: Optional[float] = None
    sample_weights: Optional[NDArray] = None
    converged: bool = True
    n_iter: Optional[int] = None

    @property
    def p(self) -> int:
        return self.beta.size

    def predict(self, X, mode: Optional[str] = None) -> NDArray:
        return _linear_predict(X, self.beta) + (self.intercept or 0.0)


Model = Union[CfrModel, LinearModel]


# -- CFR objective ------------------------------------------------------------

def _xy(X, Y=None):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if Y is None:
        return X
    Y = np.asarray(Y, dtype=float).ravel()
    if Y.size != X.shape[0]:
        raise DimensionError(f"X has {X.shape[0]} rows but Y has {Y.size} entries")
    return X, Y


def _linear_predict(X, beta) -> NDArray:
    X = _xy(X)
    beta = np.asarray(beta, dtype=float)
    if X.shape[1] != beta.size:
        raise DimensionError(f"X has {X.shape[1]} columns but beta has {beta.size} entries")
    return X @ beta


def _rectified_design(X, W) -> NDArray:
    """``X (I + W)`` computed as ``X + X W``."""
    return X + rectifier.rectify(X, W)


def cfr_predict(X, W, beta) -> NDArray:
    X = _xy(X)
    beta = np.asarray(beta, dtype=float)
    if beta.size != X.shape[1]:
        raise DimensionError(f"X has {X.shape[1]} columns but beta has {beta.size} entries")
    return _rectified_design(X, W) @ beta


def cfr_loss(X, Y, W, beta) -> float:
    X, Y = _xy(X, Y)
    resid = Y - cfr_predict(X, W, beta)
    return float(resid @ resid)


def cfr_grad_beta(X, Y, W, beta) -> NDArray:
    X, Y = _xy(X, Y)
    Xt = _rectified_design(X, W)
    return -2.0 * Xt.T @ (Y - Xt @ np.asarray(beta, dtype=float))


def cfr_grad_w(X, Y, W, beta) -> NDArray:
    """Gradient of :func:`cfr_loss` with respect to ``W`` (zero diagonal)."""
    X, Y = _xy(X, Y)
    beta = np.asarray(beta, dtype=float)
    resid = Y - cfr_predict(X, W, beta)
    grad = -2.0 * np.outer(X.T @ resid, beta)
    np.fill_diagonal(grad, 0.0)
    return grad


# -- training -----------------------------------------------------------------

def _batches(n: int, batch_size: Optional[int], rng: np.random.Generator):
    if batch_size is None or batch_size >= n:
        return [np.arange(n)]
    order = rng.permutation(n)
    return [order[s : s + batch_size] for s in range(0, n, batch_size)]


def _rel_change(old: float, new: float) -> float:
    return abs(new - old) / max(abs(old), np.finfo(float).tiny)


def train_cfr(data, cfg: TrainConfig = TrainConfig(), rng: Optional[np.random.Generator] = None,
              Y=None) -> CfrModel:
    """Fit ``beta`` and the rectifier ``W`` by alternating SGD.

    ``data`` is a :class:`Dataset` or a feature matrix (then pass ``Y``).
    Each step first moves ``W`` against the configured W-loss with ``beta``
    fixed, then moves ``beta`` (and the intercept, if any) against the CFR
    loss using the freshly updated ``W``.
    """
    if isinstance(data, Dataset):
        X, Y = data.X, data.Y
    else:
        if Y is None:
            raise ConfigError("train_cfr needs Y when given a bare feature matrix")
        X, Y = _xy(data, Y)
    n, p = X.shape
    if n == 0:
        raise DataError("cannot train on an empty dataset")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)

    W = rectifier.init_weights(p, cfg.w_init, rng)
    beta = np.zeros(p)
    b0 = 0.0

    def resid_of(xb, yb, W, beta, b0):
        return yb - b0 - _rectified_design(xb, W) @ beta

    def full_losses(W, beta, b0):
        lr_ = rectifier.reconstruction_loss(X, W, cfg.norm, cfg.center)
        r = resid_of(X, Y, W, beta, b0)
        return lr_, float(r @ r)

    def w_step(W, xb, yb, scale, epoch):
        if cfg.lr_w == 0:
            return W
        g = rectifier.reconstruction_grad(xb, W, cfg.norm, cfg.center)
        if cfg.w_update_loss == "joint":
            r = resid_of(xb, yb, W, beta, b0)
            gj = -2.0 * np.outer(xb.T @ r, beta)
            np.fill_diagonal(gj, 0.0)
            g = g + gj
        try:
            return rectifier.sgd_step_w(W, g * scale, cfg.lr_w)
        except DivergenceError:
            raise _diverged(epoch, cfg) from None

    def beta_step(W, xb, yb, scale, epoch):
        nonlocal beta, b0
        if cfg.lr_beta == 0:
            return
        Xt = _rectified_design(xb, W)
        r = yb - b0 - Xt @ beta
        beta = beta + cfg.lr_beta * scale * 2.0 * (Xt.T @ r)
        if cfg.fit_intercept:
            b0 = b0 + cfg.lr_beta * scale * 2.0 * r.sum()
        if not (np.isfinite(beta).all() and math.isfinite(b0)):
            raise _diverged(epoch, cfg)

    initial = full_losses(W, beta, b0)
    history = []
    converged = False
    prev = initial
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(1, cfg.epochs + 1):
            batches = _batches(n, cfg.batch_size, rng)
            scales = [1.0 if cfg.grad_scale == "sum" else 1.0 / idx.size for idx in batches]
            if cfg.alternation == "batch":
                for idx, s in zip(batches, scales):
                    xb, yb = X[idx], Y[idx]
                    W = w_step(W, xb, yb, s, epoch)
                    beta_step(W, xb, yb, s, epoch)
            else:
                for idx, s in zip(batches, scales):
                    W = w_step(W, X[idx], Y[idx], s, epoch)
                for idx, s in zip(batches, scales):
                    beta_step(W, X[idx], Y[idx], s, epoch)
            losses = full_losses(W, beta, b0)
            if not all(math.isfinite(v) for v in losses):
                raise _diverged(epoch, cfg)
            history.append(losses)
            if all(_rel_change(a, b) < cfg.convergence_tol for a, b in zip(prev, losses)):
                converged = True
                break
            prev = losses
    logger.debug("train_cfr finished after %d epochs, losses %s", len(history), history[-1])
    return CfrModel(
        beta=beta, weights=W, history=history, config=cfg,
        intercept=b0 if cfg.fit_intercept else None, initial_losses=initial, converged=converged,
    )


def _diverged(epoch: int, cfg: TrainConfig) -> DivergenceError:
    return DivergenceError(
        f"training diverged at epoch {epoch} (lr_w={cfg.lr_w}, lr_beta={cfg.lr_beta}, "
        f"batch_size={cfg.batch_size}, grad_scale={cfg.grad_scale})"
    )


# -- baselines ----------------------------------------------------------------

def ols_fit(X, Y) -> LinearModel:
    """Least squares through an SVD-based solver; rank deficiency is an error."""
    X, Y = _xy(X, Y)
    beta, _, rank, _ = np.linalg.lstsq(X, Y, rcond=None)
    if rank < X.shape[1]:
        raise SingularSystemError(f"design matrix has rank {rank} < p = {X.shape[1]}")
    return LinearModel(beta=beta, method="ols")


def ridge_fit(X, Y, lam: float) -> LinearModel:
    """Solve ``(X'X + lam I) beta = X'Y`` as the augmented least-squares problem."""
    X, Y = _xy(X, Y)
    if not (lam >= 0 and math.isfinite(lam)):
        raise ConfigError(f"ridge lambda must be finite and >= 0, got {lam!r}")
    p = X.shape[1]
    if lam == 0:
        model = ols_fit(X, Y)
        return LinearModel(beta=model.beta, method="ridge", regularization=0.0)
    A = np.vstack([X, math.sqrt(lam) * np.eye(p)])
    b = np.concatenate([Y, np.zeros(p)])
    beta = np.linalg.lstsq(A, b, rcond=None)[0]
    return LinearModel(beta=beta, method="ridge", regularization=float(lam))


def soft_threshold(x, t):
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def lasso_fit(X, Y, lam: float, max_iter: int = 10_000, tol: float = 1e-8) -> LinearModel:
    """Cyclic coordinate descent for ``||Y - X beta||^2 + lam ||beta||_1``.

    Stops once a full sweep moves no coefficient by more than ``tol``. If
    ``max_iter`` sweeps pass first, a :class:`ConvergenceWarning` is issued and
    the returned model has ``converged=False``.
    """
    X, Y = _xy(X, Y)
    if not (lam >= 0 and math.isfinite(lam)):
        raise ConfigError(f"lasso lambda must be finite and >= 0, got {lam!r}")
    n, p = X.shape
    col_sq = np.einsum("ij,ij->j", X, X)
    beta = np.zeros(p)
    resid = Y.copy()
    half = lam / 2.0
    converged = False
    sweep = 0
    for sweep in range(1, max_iter + 1):
        max_delta = 0.0
        for j in range(p):
            if col_sq[j] == 0.0:
                continue
            old = beta[j]
            rho = X[:, j] @ resid + col_sq[j] * old
            new = float(soft_threshold(rho, half)) / col_sq[j]
            if new != old:
                resid -= X[:, j] * (new - old)
                beta[j] = new
                max_delta = max(max_delta, abs(new - old))
        if max_delta <= tol:
            converged = True
            break
    if not converged:
        warnings.warn(
            f"lasso coordinate descent did not reach tol={tol} in {max_iter} sweeps", ConvergenceWarning,
            stacklevel=2,
        )
    return LinearModel(beta=beta, method="lasso", regularization=float(lam), converged=converged, n_iter=sweep)


def lasso_lambda_max(X, Y) -> float:
    X, Y = _xy(X, Y)
    return float(2.0 * np.max(np.abs(X.T @ Y)))


def weighted_covariance(X, weights) -> NDArray:
    X = np.asarray(X, dtype=float)
    omega = np.asarray(weights, dtype=float) / X.shape[0]
    mu = X.T @ omega
    return (X * omega[:, None]).T @ X - np.outer(mu, mu)


def decorrelation_objective(X, weights) -> float:
    """Sum of squared off-diagonal entries of the weighted covariance (each pair once)."""
    C = weighted_covariance(X, weights)
    return float(np.sum(np.triu(C, 1) ** 2))


def decorrelation_grad(X, weights) -> NDArray:
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    omega = np.asarray(weights, dtype=float) / n
    mu = X.T @ omega
    A = (X * omega[:, None]).T @ X - np.outer(mu, mu)
    np.fill_diagonal(A, 0.0)
    Xc = X - mu
    return (np.sum((Xc @ A) * Xc, axis=1) - mu @ A @ mu) / n


@dataclass(frozen=True)
class DwrHyper:
    lr: float = 0.5
    iterations: int = 2000
    tol: float = 1e-12
    max_halvings: int = 30


def _project_weights(w: NDArray) -> NDArray:
    w = np.maximum(w, 0.0)
    total = w.sum()
    if not total > 0:
        raise DivergenceError("all sample weights collapsed to zero")
    return w * (w.size / total)


def dwr_fit(X, Y, hyper: DwrHyper = DwrHyper()) -> tuple[LinearModel, NDArray]:
    """Decorrelating sample reweighting followed by weighted least squares.

    A stand-in for published DWR: weights start uniform and follow projected
    gradient descent on :func:`decorrelation_objective`, kept nonnegative with
    mean one. The gradient is scaled by ``n`` so ``lr`` does not depend on the
    sample size. A step that fails to lower the objective is halved (up to
    ``max_halvings`` times), so the objective never increases.
    """
    X, Y = _xy(X, Y)
    n, p = X.shape
    if n < p:
        raise ConfigError(f"dwr-like fit needs n >= p, got n={n}, p={p}")
    w = np.ones(n)
    cur = decorrelation_objective(X, w)
    for it in range(hyper.iterations):
        g = decorrelation_grad(X, w) * n
        if not np.isfinite(g).all():
            raise DivergenceError(f"dwr-like reweighting diverged at iteration {it} (lr={hyper.lr})")
        step = hyper.lr
        for _ in range(hyper.max_halvings + 1):
            cand = _project_weights(w - step * g)
            obj = decorrelation_objective(X, cand)
            if obj < cur:
                break
            step *= 0.5
        else:
            break
        done = cur - obj <= hyper.tol * max(cur, 1e-300)
        w, cur = cand, obj
        if done:
            break
    root = np.sqrt(w)
    beta, _, rank, _ = np.linalg.lstsq(X * root[:, None], Y * root, rcond=None)
    if rank < p:
        raise SingularSystemError(f"weighted design has rank {rank} < p = {p}")
    return LinearModel(beta=beta, method="dwr-like", sample_weights=w), w


# -- method registry ------------------------------------------------------------

DEFAULT_HYPER = {
    "ols": {},
    "ridge": {"lam": 1.0},
    "lasso": {"lam": 20.0, "max_iter": 10_000, "tol": 1e-8},
    "dwr-like": {"lr": 0.5, "iterations": 2000},
    "cfr": {},
}


def canonical_method(tag: str) -> str:
    tag = tag.lower()
    if tag == "dwr":
        return "dwr-like"
    if tag not in METHODS:
        raise ConfigError(f"unknown method {tag!r}; valid tags: {', '.join(METHODS)}")
    return tag


def fit_method(method: str, X, Y, hyper: Optional[dict] = None, rng: Optional[np.random.Generator] = None) -> Model:
    """Fit any registered method on ``(X, Y)`` with ``hyper`` overriding the defaults."""
    method = canonical_method(method)
    params = dict(DEFAULT_HYPER[method])
    params.update(hyper or {})
    try:
        if method == "ols":
            if params:
                raise TypeError(f"unexpected hyperparameters {sorted(params)}")
            return ols_fit(X, Y)
        if method == "ridge":
            return ridge_fit(X, Y, **params)
        if method == "lasso":
            return lasso_fit(X, Y, **params)
        if method == "dwr-like":
            return dwr_fit(X, Y, DwrHyper(**params))[0]
        return train_cfr(X, TrainConfig(**params), rng=rng, Y=Y)
    except TypeError as exc:
        raise ConfigError(f"bad hyperparameters for {method}: {exc}") from None


# -- model files -----------------------------------------------------------------

def model_to_dict(model: Model) -> dict:
    if isinstance(model, CfrModel):
        return {
            "method": "cfr",
            "p": model.p,
            "beta": model.beta.tolist(),
            "w": model.weights.to_list(),
            "intercept": model.intercept,
            "train_config": model.config.to_dict(),
            "history": [list(h) for h in model.history],
        }
    extra = {}
    if model.regularization is not None:
        extra["regularization"] = model.regularization
    return {
        "method": model.method,
        "p": model.p,
        "beta": model.beta.tolist(),
        "w": None,
        "intercept": model.intercept,
        "train_config": extra,
        "history": [],
    }


def model_from_dict(d: dict) -> Model:
    try:
        method = canonical_method(d["method"])
        p = int(d["p"])
        beta = np.asarray(d["beta"], dtype=float)
        if beta.shape != (p,):
            raise DataError(f"model declares p={p} but beta has shape {beta.shape}")
        intercept = d.get("intercept")
        if method == "cfr":
            if d.get("w") is None:
                raise DataError("cfr model file has no w matrix")
            w = RectifierWeights(np.asarray(d["w"], dtype=float))
            if w.p != p:
                raise DataError(f"w is {w.p}x{w.p} but p={p}")
            cfg = TrainConfig(**d.get("train_config", {}))
            return CfrModel(beta=beta, weights=w, history=[tuple(h) for h in d.get("history", [])],
                            config=cfg, intercept=intercept)
        return LinearModel(beta=beta, method=method, intercept=intercept,
                           regularization=(d.get("train_config") or {}).get("regularization"))
    except KeyError as exc:
        raise ParseError("model file is missing a field", field=exc.args[0]) from None
    except (TypeError, ValueError) as exc:
        if isinstance(exc, DataError):
            raise
        raise DataError(f"invalid model file: {exc}") from None


def save_model(model: Model, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), indent=2) + "\n")


def load_model(path) -> Model:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", line=exc.lineno) from None
    if not isinstance(d, dict):
        raise ParseError("model file must hold a JSON object")
    return model_from_dict(d)
