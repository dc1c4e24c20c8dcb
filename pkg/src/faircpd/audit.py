"""Unfairness audit: how well can a classifier recover the sensitive label from rows of A?

The probe is the two-layer network ``softmax(relu(A W1 + b) W2)`` trained
with plain SGD on the cross-entropy loss. Unfairness is its test accuracy
minus 0.5.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .errors import DimensionError
from .tensor import as_array


@dataclass(frozen=True)
class AuditConfig:
    hidden_width: int = 1500
    lr: float = 0.003
    epochs: int = 100
    train_fraction: float = 0.75
    seed: int = 0
    batch_size: Optional[int] = None  # None: full batch
    standardize: bool = False

    def __post_init__(self):
        if self.hidden_width < 1:
            raise ValueError("hidden_width must be positive")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie in (0, 1)")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive")


@dataclass
class ProbeModel:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    train_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    test_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    warnings: List[str] = field(default_factory=list)
    shift: Optional[np.ndarray] = None
    scale: Optional[np.ndarray] = None

    def transform(self, a: np.ndarray) -> np.ndarray:
        if self.shift is None:
            return a
        return (a - self.shift) / self.scale

    def hidden(self, a: np.ndarray) -> np.ndarray:
        return np.maximum(self.transform(a) @ self.w1 + self.b1, 0.0)

    def forward(self, a) -> np.ndarray:
        """Class probabilities, shape ``(n, 2)``."""
        return softmax(self.hidden(np.asarray(a, dtype=np.float64)) @ self.w2)

    def predict(self, a) -> np.ndarray:
        return np.argmax(self.forward(a), axis=1)


@dataclass(frozen=True)
class AuditResult:
    accuracy: float
    unfairness: float
    majority_floor: float
    n_train: int
    n_test: int
    warnings: tuple = ()

    def csv_row(self, method: str, lam: float) -> str:
        """One line of ``method,lambda,accuracy,unfairness,majority_floor,n_test``."""
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerow(
            [method, repr(float(lam)), repr(self.accuracy), repr(self.unfairness),
             repr(self.majority_floor), self.n_test])
        return buf.getvalue()


AUDIT_CSV_HEADER = "method,lambda,accuracy,unfairness,majority_floor,n_test"


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def split_indices(n: int, train_fraction: float, rng: np.random.Generator):
    """Random train/test split drawn from the row count alone."""
    perm = rng.permutation(n)
    n_train = min(max(int(round(train_fraction * n)), 1), n - 1)
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def _check_inputs(a, labels):
    a = as_array(a, 2, "a")
    labels = np.asarray(labels)
    if labels.shape != (a.shape[0],):
        raise DimensionError(f"labels length {labels.shape} does not match {a.shape[0]} rows")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be binary 0/1")
    if a.shape[0] < 2:
        raise ValueError("need at least two rows to split")
    return a, labels.astype(np.int64)


def train_probe(a, labels, cfg: AuditConfig = AuditConfig()) -> ProbeModel:
    """Split rows, initialize the network and train it with SGD.

    The generator seeded by ``cfg.seed`` draws, in order: the split, ``W1``,
    ``b1``, ``W2`` (each uniform on ``+-1/sqrt(fan_in)``) and the minibatch
    orders.
    """
    a, labels = _check_inputs(a, labels)
    rng = np.random.default_rng(cfg.seed)
    train_idx, test_idx = split_indices(a.shape[0], cfg.train_fraction, rng)
    r, h = a.shape[1], cfg.hidden_width
    lim1, lim2 = 1.0 / np.sqrt(r), 1.0 / np.sqrt(h)
    w1 = rng.uniform(-lim1, lim1, (r, h))
    b1 = rng.uniform(-lim1, lim1, h)
    w2 = rng.uniform(-lim2, lim2, (h, 2))
    probe = ProbeModel(w1, b1, w2, train_idx, test_idx)

    y_train = labels[train_idx]
    if np.unique(y_train).size < 2:
        probe.warnings.append("degenerate labels: training split contains a single class")

    if cfg.standardize:
        mu = a[train_idx].mean(axis=0)
        sd = a[train_idx].std(axis=0)
        sd[sd == 0] = 1.0
        probe.shift, probe.scale = mu, sd
    xt = probe.transform(a[train_idx])
    yt = np.eye(2)[y_train]
    n = xt.shape[0]
    batch = n if cfg.batch_size is None else min(cfg.batch_size, n)
    for _ in range(cfg.epochs):
        order = np.arange(n) if batch == n else rng.permutation(n)
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            _sgd_step(probe, xt[idx], yt[idx], cfg.lr)
    return probe


def _sgd_step(probe: ProbeModel, x, y, lr):
    pre = x @ probe.w1 + probe.b1
    hid = np.maximum(pre, 0.0)
    p = softmax(hid @ probe.w2)
    d_logits = (p - y) / x.shape[0]
    d_w2 = hid.T @ d_logits
    d_pre = (d_logits @ probe.w2.T) * (pre > 0)
    probe.w2 -= lr * d_w2
    probe.w1 -= lr * (x.T @ d_pre)
    probe.b1 -= lr * d_pre.sum(axis=0)


def cross_entropy(probe: ProbeModel, a, labels) -> float:
    p = probe.forward(a)
    return float(-np.mean(np.log(p[np.arange(len(labels)), labels] + 1e-300)))


def unfairness(a, labels, cfg: AuditConfig = AuditConfig()) -> AuditResult:
    """Train a probe and report test accuracy minus 0.5.

    ``majority_floor`` is what always predicting the most frequent test label
    would score, minus 0.5.
    """
    a, labels = _check_inputs(a, labels)
    probe = train_probe(a, labels, cfg)
    y_test = labels[probe.test_idx]
    acc = float(np.mean(probe.predict(a[probe.test_idx]) == y_test))
    counts = np.bincount(y_test, minlength=2)
    floor = float(counts.max() / y_test.size) - 0.5
    return AuditResult(acc, acc - 0.5, floor, probe.train_idx.size, probe.test_idx.size,
                       tuple(probe.warnings))


def threshold_probe(a) -> np.ndarray:
    """Label a row 1 exactly when its first coordinate is nonzero."""
    a = as_array(a, 2, "a")
    if a.shape[1] < 1:
        raise DimensionError("need at least one column")
    return (np.abs(a[:, 0]) > 0).astype(np.int64)
