"""Optimizers, the training loop and the six evaluation metrics."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import autograd as AG
from .layers import Model, predict_proba
from .numerics import Rng

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 0  # 0 = full batch
    learning_rate: float = 1e-3
    optimizer: str = "ADAM"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    balance: AG.BalanceConfig = field(default_factory=AG.BalanceConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        self.optimizer = self.optimizer.upper()
        if self.optimizer not in ("ADAM", "SGD"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if isinstance(self.balance, dict):
            self.balance = AG.BalanceConfig(**self.balance)


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params, self.lr = params, lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            p -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


class SGD:
    def __init__(self, params: dict[str, np.ndarray], lr: float):
        self.params, self.lr = params, lr

    def step(self, grads: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            p -= self.lr * grads[k]


def make_optimizer(model: Model, cfg: TrainConfig):
    params = model.parameters()
    if cfg.optimizer == "SGD":
        return SGD(params, cfg.learning_rate)
    return Adam(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)


@dataclass
class TrainResult:
    model: Model
    losses: list[float]
    train_time_s: float


def train(model: Model, features: np.ndarray, labels, cfg: TrainConfig) -> TrainResult:
    """Train ``model`` in place; returns it with the per-epoch mean loss curve."""
    X = np.ascontiguousarray(features, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("training data must be a non-empty 2-D matrix")
    if X.shape[1] != model.input_dim:
        raise ValueError(f"model expects {model.input_dim} features, data has {X.shape[1]}")
    if len(y) != X.shape[0]:
        raise ValueError("feature and label counts differ")

    opt = make_optimizer(model, cfg)
    shuffle = Rng(cfg.seed, 0x5EED)
    n = X.shape[0]
    bs = n if cfg.batch_size <= 0 else min(cfg.batch_size, n)
    losses = []
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        order = np.arange(n) if bs == n else shuffle.permutation(n)
        total = 0.0
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            loss, grads = AG.loss_and_grads(model, X[idx], y[idx], cfg.balance)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss} at epoch {epoch}, batch at row {start}")
            opt.step(grads)
            total += loss * len(idx)
        losses.append(total / n)
    elapsed = time.perf_counter() - t0
    log.debug("trained %s depth %d in %.2fs, final loss %.4f", model.kind, model.depth, elapsed, losses[-1])
    return TrainResult(model, losses, elapsed)


# ---------------------------------------------------------------- evaluation

@dataclass
class ConfusionCounts:
    tp: int
    fn: int
    tn: int
    fp: int

    @property
    def n(self) -> int:
        return self.tp + self.fn + self.tn + self.fp


@dataclass
class MetricsReport:
    accuracy: float
    sensitivity: float
    specificity: float
    auc: float
    precision: float
    f1: float
    train_time_s: float | None = None

    FIELDS = ("accuracy", "sensitivity", "specificity", "auc", "precision", "f1")

    def as_dict(self) -> dict[str, float | None]:
        d = {k: getattr(self, k) for k in self.FIELDS}
        d["train_time_s"] = self.train_time_s
        return d


def predict_class(probs: np.ndarray) -> np.ndarray:
    # argmax with ties to class 0, i.e. Patient iff P(patient) > P(healthy)
    probs = np.asarray(probs, dtype=np.float64)
    return (probs[:, 1] > probs[:, 0]).astype(np.int64)


def confusion_from_predictions(pred, labels) -> ConfusionCounts:
    pred = np.asarray(pred).astype(np.int64)
    y = np.asarray(labels).astype(np.int64)
    return ConfusionCounts(
        tp=int(np.sum((pred == 1) & (y == 1))),
        fn=int(np.sum((pred == 0) & (y == 1))),
        tn=int(np.sum((pred == 0) & (y == 0))),
        fp=int(np.sum((pred == 1) & (y == 0))),
    )


def confusion(probs: np.ndarray, labels) -> ConfusionCounts:
    return confusion_from_predictions(predict_class(probs), labels)


def auc_mann_whitney(scores, labels) -> float:
    """P(score_pos > score_neg) + 0.5 P(tie), over all positive/negative pairs."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64)
    pos, neg = s[y == 1], s[y == 0]
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("AUC undefined: need at least one positive and one negative label")
    neg_sorted = np.sort(neg)
    below = np.searchsorted(neg_sorted, pos, side="left")
    ties = np.searchsorted(neg_sorted, pos, side="right") - below
    return float((below.sum() + 0.5 * ties.sum()) / (len(pos) * len(neg)))


def _ratio(a: int, b: int) -> float:
    return a / b if b else 0.0


def metrics(c: ConfusionCounts, scores, labels, train_time_s: float | None = None) -> MetricsReport:
    """Six metrics; ``scores`` are P(patient) values (or a (B, 2) probability matrix)."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim == 2:
        scores = scores[:, 1]
    sens = _ratio(c.tp, c.tp + c.fn)
    prec = _ratio(c.tp, c.tp + c.fp)
    f1 = 2 * prec * sens / (prec + sens) if prec + sens > 0 else 0.0
    return MetricsReport(
        accuracy=_ratio(c.tp + c.tn, c.n),
        sensitivity=sens,
        specificity=_ratio(c.tn, c.tn + c.fp),
        auc=auc_mann_whitney(scores, labels),
        precision=prec,
        f1=f1,
        train_time_s=train_time_s,
    )


def evaluate(model: Model, features: np.ndarray, labels, train_time_s: float | None = None) -> MetricsReport:
    probs = predict_proba(model, features)
    return metrics(confusion(probs, labels), probs, labels, train_time_s)
