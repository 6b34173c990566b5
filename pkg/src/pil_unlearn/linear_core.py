"""Bias-free linear classifier with closed-form loss gradients and SGD training."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np

from . import pild
from .errors import ArgumentError, NumericError, ShapeError

LOG_FLOOR = 1e-12

LossKind = Literal["ce", "kl_uniform"]


@dataclass(frozen=True, eq=False)
class LinearWeights:
    w: np.ndarray

    def __post_init__(self):
        w = np.array(self.w, dtype=self.w.dtype if self.w.dtype == np.float64 else np.float32)
        if w.ndim != 2:
            raise ShapeError(f"weights must be a d x k matrix, got shape {w.shape}")
        if not np.all(np.isfinite(w)):
            raise NumericError("weights contain non-finite entries")
        w.setflags(write=False)
        object.__setattr__(self, "w", w)

    @property
    def d(self) -> int:
        return self.w.shape[0]

    @property
    def k(self) -> int:
        return self.w.shape[1]

    def __eq__(self, other):
        return isinstance(other, LinearWeights) and np.array_equal(self.w, other.w)


@dataclass(frozen=True)
class SgdHyper:
    epochs: int = 30
    learning_rate: float = 0.003
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 128
    schedule: Literal["constant", "cosine"] = "cosine"
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ArgumentError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ArgumentError("batch_size must be >= 1")
        if not 0.0 <= self.momentum < 1.0:
            raise ArgumentError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ArgumentError("weight_decay must be >= 0")
        if self.epochs < 0:
            raise ArgumentError("epochs must be >= 0")
        if self.schedule not in ("constant", "cosine"):
            raise ArgumentError(f"unknown schedule {self.schedule!r}")


def _w(w) -> np.ndarray:
    return w.w if isinstance(w, LinearWeights) else np.asarray(w)


def forward(x, w) -> np.ndarray:
    """Logits ``x @ w`` for a single row or a batch; no bias."""
    W = _w(w)
    x = np.asarray(x)
    if x.shape[-1] != W.shape[0]:
        raise ShapeError(f"input dimension {x.shape[-1]} != weight rows {W.shape[0]}")
    return x @ W


def softmax(z) -> np.ndarray:
    z = np.asarray(z)
    if not np.all(np.isfinite(z)):
        raise NumericError("softmax input contains non-finite values")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(probs, label):
    """``-log(p[label] + 1e-12)``; vectorised over leading axes."""
    p = np.asarray(probs)
    label = np.asarray(label)
    k = p.shape[-1]
    if np.any(label < 0) or np.any(label >= k):
        raise ArgumentError(f"label out of range for k={k}")
    picked = np.take_along_axis(p, label[..., None].astype(np.intp), axis=-1)[..., 0]
    return -np.log(picked + LOG_FLOOR)


def kl_to_uniform(probs, k: int | None = None):
    """KL(p || uniform) = sum p log(p k) = log k - H(p)."""
    p = np.asarray(probs)
    if not np.all(np.isfinite(p)):
        raise NumericError("probabilities contain non-finite values")
    k = p.shape[-1] if k is None else k
    return np.sum(p * np.log(np.maximum(p, LOG_FLOOR) * k), axis=-1)


def entropy(probs):
    p = np.asarray(probs)
    return -np.sum(p * np.log(np.maximum(p, LOG_FLOOR)), axis=-1)


def _onehot(labels, k, dtype):
    labels = np.asarray(labels)
    out = np.zeros(labels.shape + (k,), dtype=dtype)
    np.put_along_axis(out, labels[..., None].astype(np.intp), 1, axis=-1)
    return out


def dlogits_ce(probs, labels):
    """d CE / d logits = p - onehot(y)."""
    p = np.asarray(probs)
    return p - _onehot(labels, p.shape[-1], p.dtype)


def dlogits_kl(probs):
    """d KL(softmax(z) || uniform) / dz = p * (log p - sum_j p_j log p_j)."""
    p = np.asarray(probs)
    logp = np.log(np.maximum(p, LOG_FLOOR))
    return p * (logp - np.sum(p * logp, axis=-1, keepdims=True))


def grad_w_ce(x, label, w) -> np.ndarray:
    """Gradient of CE w.r.t. ``w``; a batch of rows gives the batch mean."""
    W = _w(w)
    x = np.asarray(x)
    g = dlogits_ce(softmax(forward(x, W)), label)
    if x.ndim == 1:
        return np.outer(x, g)
    return x.T @ g / x.shape[0]


def grad_x_loss(x, label, w, loss_kind: LossKind = "ce") -> np.ndarray:
    """Input gradient of CE (needs ``label``) or KL-to-uniform (ignores it)."""
    W = _w(w)
    p = softmax(forward(x, W))
    if loss_kind == "ce":
        g = dlogits_ce(p, label)
    elif loss_kind == "kl_uniform":
        g = dlogits_kl(p)
    else:
        raise ArgumentError(f"unknown loss kind {loss_kind!r}")
    return g @ W.T


def init_weights(d: int, k: int, seed: int) -> LinearWeights:
    """Entries i.i.d. uniform in [-1/sqrt(d), 1/sqrt(d)]."""
    s = 1.0 / math.sqrt(d)
    rng = np.random.default_rng(seed)
    return LinearWeights(rng.uniform(-s, s, size=(d, k)).astype(np.float32))


def lr_at(hyper: SgdHyper, epoch: int) -> float:
    if hyper.schedule == "constant" or hyper.epochs == 0:
        return hyper.learning_rate
    return 0.5 * hyper.learning_rate * (1.0 + math.cos(math.pi * epoch / hyper.epochs))


def fit_linear(x: np.ndarray, labels: np.ndarray, k: int, hyper: SgdHyper,
               w0: LinearWeights | None = None):
    """SGD with momentum on raw ``(x, labels)`` arrays.

    Velocity follows ``v = mu v + g + wd w``, ``w -= lr v``; the learning rate is
    annealed once per epoch.  Returns ``(LinearWeights, per-epoch mean loss)``.
    """
    x = np.ascontiguousarray(x, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    n, d = x.shape
    if n == 0:
        raise ArgumentError("cannot train on an empty dataset")
    W = (w0 or init_weights(d, k, hyper.seed)).w.astype(np.float32)
    if W.shape != (d, k):
        raise ShapeError(f"initial weights {W.shape} do not match (d={d}, k={k})")
    W = W.copy()
    V = np.zeros_like(W)
    Y = _onehot(labels, k, np.float32)
    rng = np.random.default_rng([hyper.seed, 7])
    mu = np.float32(hyper.momentum)
    wd = np.float32(hyper.weight_decay)
    trace = []
    for epoch in range(hyper.epochs):
        lr = np.float32(lr_at(hyper, epoch))
        order = rng.permutation(n) if hyper.shuffle else np.arange(n)
        total = 0.0
        for start in range(0, n, hyper.batch_size):
            idx = order[start:start + hyper.batch_size]
            xb = x[idx]
            try:
                p = softmax(xb @ W)
            except NumericError as exc:
                raise NumericError(f"non-finite logits at epoch {epoch}") from exc
            total += float(cross_entropy(p, labels[idx]).sum())
            G = xb.T @ (p - Y[idx]) / np.float32(len(idx))
            if wd:
                G += wd * W
            if mu:
                V = mu * V + G
                W -= lr * V
            else:
                W -= lr * G
        loss = total / n
        if not math.isfinite(loss) or not np.all(np.isfinite(W)):
            raise NumericError(f"non-finite loss at epoch {epoch}")
        trace.append(loss)
    return LinearWeights(W), trace


def train_sgd(ds, hyper: SgdHyper, w0: LinearWeights | None = None):
    """Train the surrogate on a LabeledDataset; returns ``(weights, loss trace)``."""
    if ds.n == 0:
        raise ArgumentError("cannot train on an empty dataset")
    return fit_linear(ds.pixels, ds.labels, ds.k, hyper, w0)


def predict(w, x) -> np.ndarray:
    # np.argmax returns the first maximal index: ties go to the lowest class
    return np.argmax(forward(x, w), axis=-1)


def accuracy(w, ds) -> float:
    if ds.d != _w(w).shape[0]:
        raise ShapeError(f"dataset d={ds.d} != weight rows {_w(w).shape[0]}")
    if ds.n == 0:
        raise ArgumentError("accuracy of an empty dataset is undefined")
    return float(np.mean(predict(w, ds.pixels) == ds.labels))


def save_weights(w: LinearWeights, path, seed: int = 0) -> None:
    pild.write_weights(path, w.w, seed)


def load_weights(path) -> LinearWeights:
    _, w = pild.read_weights(path)
    return LinearWeights(w.copy())
