"""Evaluation metrics: RMSE, coefficient error, cross-environment AE/SE, accuracy."""

from __future__ import annotations

import math
import statistics
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DataError, DimensionError


@dataclass(frozen=True)
class EnvResult:
    r_test: float
    rmse_values: tuple

    def __post_init__(self):
        vals = tuple(float(v) for v in self.rmse_values)
        if not vals:
            raise DataError(f"environment r_test={self.r_test} has no RMSE values")
        if not all(math.isfinite(v) and v >= 0 for v in vals):
            raise DataError(f"environment r_test={self.r_test} has negative or non-finite RMSE values")
        object.__setattr__(self, "rmse_values", vals)

    @property
    def mean_rmse(self) -> float:
        return float(np.mean(self.rmse_values))


@dataclass(frozen=True)
class StabilityReport:
    per_env: tuple
    ae: float
    se: float
    beta_v_error_mean: Optional[float] = None
    beta_v_error_var: Optional[float] = None
    beta_error_mean: Optional[float] = None
    extra: dict = field(default_factory=dict, compare=False)

    def to_dict(self) -> dict:
        return {
            "beta_v_error_mean": self.beta_v_error_mean,
            "beta_v_error_var": self.beta_v_error_var,
            "beta_error_mean": self.beta_error_mean,
            "ae": self.ae,
            "se": self.se,
            "per_env": [{"r_test": r, "mean_rmse": m} for r, m in self.per_env],
        }


def _pair(pred, truth):
    pred = np.asarray(pred, dtype=float).ravel()
    truth = np.asarray(truth, dtype=float).ravel()
    if pred.shape != truth.shape:
        raise DimensionError(f"length mismatch: {pred.size} predictions vs {truth.size} targets")
    if pred.size == 0:
        raise DataError("empty input")
    return pred, truth


def rmse(pred, truth) -> float:
    pred, truth = _pair(pred, truth)
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


def beta_error(beta_hat, beta_true, index_subset: Optional[Sequence[int]] = None) -> float:
    """Mean absolute coefficient error over ``index_subset`` (all indices when None)."""
    beta_hat, beta_true = _pair(beta_hat, beta_true)
    if index_subset is None:
        idx = np.arange(beta_hat.size)
    else:
        idx = np.asarray(index_subset, dtype=int).ravel()
        if idx.size == 0:
            raise DataError("beta_error needs a non-empty index subset")
        if idx.min() < -beta_hat.size or idx.max() >= beta_hat.size:
            raise DimensionError("index subset out of range")
    return float(np.mean(np.abs(beta_hat[idx] - beta_true[idx])))


def ae_se(env_results: Sequence[EnvResult]) -> tuple[float, float]:
    """Average error and stability error across environments.

    Each environment contributes its mean RMSE over repetitions. SE is the
    sample standard deviation (``|E| - 1`` divisor) of those means, computed
    in exact rational arithmetic so identical means give exactly zero.
    """
    if len(env_results) < 2:
        raise DataError(f"SE needs at least 2 environments, got {len(env_results)}")
    means = sorted(e.mean_rmse for e in env_results)
    return statistics.fmean(means), statistics.stdev(means)


def accuracy(pred_labels, true_labels) -> float:
    pred = np.asarray(pred_labels).ravel()
    true = np.asarray(true_labels).ravel()
    if pred.shape != true.shape:
        raise DimensionError(f"length mismatch: {pred.size} vs {true.size}")
    if pred.size == 0:
        raise DataError("empty input")
    return float(np.mean(pred == true))
