"""Linear softmax classifier with a feature-rectification term.

Logits are ``z(F W) + z(F) + b = F (I + W) Z + b`` where ``Z`` is a shared,
bias-free linear map and ``b`` is a single class bias added once. ``F`` is a
matrix of tabular or precomputed embedding features.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from numpy.typing import NDArray
from scipy.special import logsumexp

from . import rectifier
from .datagen import read_matrix_csv, write_matrix_csv
from .errors import ConfigError, DataError, DimensionError, DivergenceError, ParseError
from .rectifier import RectifierWeights


@dataclass(frozen=True)
class ClassifierTrainConfig:
    lr_model: float = 0.1
    lr_w: float = 5e-6
    epochs: int = 350
    lr_decay_epochs: tuple = (150, 160)
    lr_decay_factor: float = 0.1
    batch_size: Optional[int] = 128
    seed: int = 47
    grad_scale: str = "mean"

    def __post_init__(self):
        object.__setattr__(self, "lr_decay_epochs", tuple(int(e) for e in self.lr_decay_epochs))
        for name in ("lr_model", "lr_w"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                raise ConfigError(f"{name} must be a finite non-negative number, got {value!r}")
        if isinstance(self.epochs, bool) or int(self.epochs) != self.epochs or self.epochs < 1:
            raise ConfigError(f"epochs must be an integer >= 1, got {self.epochs!r}")
        decay = self.lr_decay_epochs
        if any(b <= a for a, b in zip(decay, decay[1:])) or any(e < 1 or e >= self.epochs for e in decay):
            raise ConfigError(f"lr_decay_epochs must be strictly increasing and inside [1, epochs), got {decay}")
        if not 0 < self.lr_decay_factor <= 1:
            raise ConfigError("lr_decay_factor must lie in (0, 1]")
        if self.batch_size is not None and (int(self.batch_size) != self.batch_size or self.batch_size < 1):
            raise ConfigError(f"batch_size must be a positive integer or null, got {self.batch_size!r}")
        if self.grad_scale not in ("sum", "mean"):
            raise ConfigError("grad_scale must be 'sum' or 'mean'")

    def lr_factor(self, epoch: int) -> float:
        """Multiplier in effect during ``epoch`` (1-based): one decay per milestone already passed."""
        return self.lr_decay_factor ** sum(epoch > m for m in self.lr_decay_epochs)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lr_decay_epochs"] = list(self.lr_decay_epochs)
        return d


@dataclass
class CfrClassifier:
    z_weights: NDArray
    class_bias: NDArray
    weights: RectifierWeights
    history: list = field(default_factory=list)
    config: Optional[ClassifierTrainConfig] = None

    def __post_init__(self):
        self.z_weights = np.asarray(self.z_weights, dtype=float)
        self.class_bias = np.asarray(self.class_bias, dtype=float)
        if self.z_weights.ndim != 2 or self.z_weights.shape[1] < 2:
            raise DimensionError("z_weights must be p x C with C >= 2")
        if self.class_bias.shape != (self.C,) or self.weights.p != self.p:
            raise DimensionError("classifier parameter shapes are inconsistent")

    @property
    def p(self) -> int:
        return self.z_weights.shape[0]

    @property
    def C(self) -> int:
        return self.z_weights.shape[1]


def _features(F, p: Optional[int] = None) -> NDArray:
    F = np.atleast_2d(np.asarray(F, dtype=float))
    if p is not None and F.shape[1] != p:
        raise DimensionError(f"features have {F.shape[1]} columns, classifier expects {p}")
    return F


def cfr_logits(F, clf: CfrClassifier) -> NDArray:
    F = _features(F, clf.p)
    return (F + rectifier.rectify(F, clf.weights)) @ clf.z_weights + clf.class_bias


def _labels(labels, b: int, C: int) -> NDArray:
    labels = np.asarray(labels)
    if labels.shape != (b,):
        raise DimensionError(f"expected {b} labels, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        if not np.all(np.mod(labels, 1) == 0):
            raise DataError("labels must be integer class indices")
        labels = labels.astype(int)
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise DataError(f"labels must lie in [0, {C})")
    return labels


def ce_loss(logits, labels) -> float:
    """Summed cross-entropy, with max subtraction for stability."""
    logits = np.atleast_2d(np.asarray(logits, dtype=float))
    b, C = logits.shape
    labels = _labels(labels, b, C)
    lse = logsumexp(logits, axis=1)
    return float(np.sum(lse - logits[np.arange(b), labels]))


def softmax(logits) -> NDArray:
    logits = np.asarray(logits, dtype=float)
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def classifier_grads(F, labels, clf: CfrClassifier):
    """Gradients of ``ce_loss(cfr_logits(F))`` w.r.t. (z_weights, class_bias, W)."""
    F = _features(F, clf.p)
    labels = _labels(labels, F.shape[0], clf.C)
    delta = softmax(cfr_logits(F, clf))
    delta[np.arange(F.shape[0]), labels] -= 1.0
    Ft = F + rectifier.rectify(F, clf.weights)
    d_z = Ft.T @ delta
    d_b = delta.sum(axis=0)
    d_w = F.T @ delta @ clf.z_weights.T
    np.fill_diagonal(d_w, 0.0)
    return d_z, d_b, d_w


def predict_labels(F, clf: CfrClassifier) -> NDArray:
    return np.argmax(cfr_logits(F, clf), axis=1)


def train_cfr_classifier(features, labels, cfg: ClassifierTrainConfig = ClassifierTrainConfig(),
                         rng: Optional[np.random.Generator] = None, n_classes: Optional[int] = None,
                         rectify: bool = True) -> CfrClassifier:
    """Alternating mini-batch SGD on the rectifier (reconstruction loss) and the linear head.

    ``rectify=False`` trains the plain linear-softmax baseline: W stays zero.
    """
    F = _features(features)
    n, p = F.shape
    if n == 0:
        raise DataError("cannot train on an empty feature matrix")
    labels = np.asarray(labels)
    C = n_classes if n_classes is not None else int(labels.max()) + 1
    if C < 2:
        raise DataError("need at least two classes")
    labels = _labels(labels, n, C)
    if rng is None:
        rng = np.random.default_rng(cfg.seed)

    clf = CfrClassifier(np.zeros((p, C)), np.zeros(C), rectifier.init_weights(p, "zeros"), config=cfg)
    lr_w = cfg.lr_w if rectify else 0.0
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(1, cfg.epochs + 1):
            factor = cfg.lr_factor(epoch)
            if cfg.batch_size is None or cfg.batch_size >= n:
                batches = [np.arange(n)]
            else:
                order = rng.permutation(n)
                batches = [order[s : s + cfg.batch_size] for s in range(0, n, cfg.batch_size)]
            for idx in batches:
                fb, yb = F[idx], labels[idx]
                scale = 1.0 if cfg.grad_scale == "sum" else 1.0 / idx.size
                if lr_w > 0:
                    g = rectifier.reconstruction_grad(fb, clf.weights) * scale
                    try:
                        clf.weights = rectifier.sgd_step_w(clf.weights, g, lr_w * factor)
                    except DivergenceError:
                        raise DivergenceError(f"classifier rectifier diverged at epoch {epoch}") from None
                if cfg.lr_model > 0:
                    d_z, d_b, _ = classifier_grads(fb, yb, clf)
                    step = cfg.lr_model * factor * scale
                    clf.z_weights = clf.z_weights - step * d_z
                    clf.class_bias = clf.class_bias - step * d_b
            loss = ce_loss(cfr_logits(F, clf), labels)
            if not (math.isfinite(loss) and np.isfinite(clf.z_weights).all()):
                raise DivergenceError(
                    f"classifier training diverged at epoch {epoch} (lr_model={cfg.lr_model}, lr_w={cfg.lr_w})"
                )
            clf.history.append((rectifier.reconstruction_loss(F, clf.weights), loss))
    return clf


def classifier_to_dict(clf: CfrClassifier) -> dict:
    return {
        "p": clf.p,
        "C": clf.C,
        "z_weights": clf.z_weights.tolist(),
        "class_bias": clf.class_bias.tolist(),
        "w": clf.weights.to_list(),
        "train_config": clf.config.to_dict() if clf.config else {},
    }


def classifier_from_dict(d: dict) -> CfrClassifier:
    try:
        clf = CfrClassifier(
            z_weights=np.asarray(d["z_weights"], dtype=float),
            class_bias=np.asarray(d["class_bias"], dtype=float),
            weights=RectifierWeights(np.asarray(d["w"], dtype=float)),
            config=ClassifierTrainConfig(**d["train_config"]) if d.get("train_config") else None,
        )
    except KeyError as exc:
        raise ParseError("classifier file is missing a field", field=exc.args[0]) from None
    except (TypeError, ValueError) as exc:
        raise DataError(f"invalid classifier file: {exc}") from None
    if clf.p != d.get("p", clf.p) or clf.C != d.get("C", clf.C):
        raise DataError("classifier file p/C fields disagree with its matrices")
    return clf


def save_classifier(clf: CfrClassifier, path) -> None:
    Path(path).write_text(json.dumps(classifier_to_dict(clf), indent=2) + "\n")


def read_embeddings(path):
    """Read an ``f1..fp,label`` CSV into (features, integer labels)."""
    F, labels = read_matrix_csv(path, "f", "label", last_type=int)
    return F, labels.astype(int)


def write_embeddings(path, F, labels: Sequence[int]) -> None:
    write_matrix_csv(path, np.asarray(F, dtype=float), [str(int(c)) for c in labels], "f", "label")
