"""Desk-scale victim network and the gradient/linearity diagnostics run on it."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Literal, Sequence

import numpy as np

from . import linear_core as lc
from . import pild
from .dataset_io import LabeledDataset
from .errors import ArgumentError, NumericError, ShapeError, UndefinedCosineError

PARAM_ORDER = ("W1", "b1", "W2", "b2")


@dataclass(eq=False)
class MlpModel:
    """One-hidden-layer ReLU network ``d -> h -> k``."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    seed: int = 0
    # fixed input shift; equivalent to re-parameterising b1, it only changes conditioning
    offset: float = 0.5

    @classmethod
    def init(cls, d: int, h: int, k: int, seed: int, dtype=np.float32,
             offset: float = 0.5) -> "MlpModel":
        rng = np.random.default_rng(seed)
        s1, s2 = 1.0 / math.sqrt(d), 1.0 / math.sqrt(h)
        return cls(rng.uniform(-s1, s1, (d, h)).astype(dtype),
                   rng.uniform(-s1, s1, h).astype(dtype),
                   rng.uniform(-s2, s2, (h, k)).astype(dtype),
                   rng.uniform(-s2, s2, k).astype(dtype), seed, offset)

    @property
    def widths(self) -> tuple[int, int, int]:
        return self.W1.shape[0], self.W1.shape[1], self.W2.shape[1]

    @property
    def params(self) -> list[np.ndarray]:
        return [self.W1, self.b1, self.W2, self.b2]

    def astype(self, dtype) -> "MlpModel":
        return MlpModel(*(p.astype(dtype) for p in self.params), seed=self.seed,
                        offset=self.offset)

    def copy(self) -> "MlpModel":
        return self.astype(self.W1.dtype)

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def with_flat(self, theta: np.ndarray) -> "MlpModel":
        out, off = [], 0
        for p in self.params:
            out.append(theta[off:off + p.size].reshape(p.shape).astype(p.dtype))
            off += p.size
        return MlpModel(*out, seed=self.seed, offset=self.offset)

    def forward(self, x: np.ndarray):
        if x.shape[-1] != self.W1.shape[0]:
            raise ShapeError(f"input dimension {x.shape[-1]} != {self.W1.shape[0]}")
        xs = x - x.dtype.type(self.offset)
        z1 = xs @ self.W1 + self.b1
        a1 = np.maximum(z1, 0)
        return a1 @ self.W2 + self.b2, (z1, a1, xs)

    def logits(self, x):
        return self.forward(np.asarray(x))[0]

    def predict(self, x):
        return np.argmax(self.logits(x), axis=-1)

    def accuracy(self, ds: LabeledDataset) -> float:
        return float(np.mean(self.predict(ds.pixels) == ds.labels))

    def loss(self, x, y) -> float:
        return float(lc.cross_entropy(lc.softmax(self.logits(x)), y).mean())

    def backward(self, x, y, want_input: bool = False):
        """Mean-CE loss and gradients ``[gW1, gb1, gW2, gb2]`` (plus dL/dx if asked)."""
        x = np.asarray(x)
        z2, (z1, a1, xs) = self.forward(x)
        p = lc.softmax(z2)
        loss = float(lc.cross_entropy(p, y).mean())
        n = x.shape[0]
        dz2 = lc.dlogits_ce(p, y) / x.dtype.type(n)
        da1 = dz2 @ self.W2.T
        dz1 = da1 * (z1 > 0)
        grads = [xs.T @ dz1, dz1.sum(0), a1.T @ dz2, dz2.sum(0)]
        if want_input:
            return loss, grads, dz1 @ self.W1.T
        return loss, grads

    def flat_grad(self, x, y) -> np.ndarray:
        _, g = self.backward(x, y)
        return np.concatenate([gi.ravel() for gi in g])

    def input_grad(self, x, y) -> np.ndarray:
        """Gradient of the summed (not averaged) CE w.r.t. each input row."""
        x = np.asarray(x)
        return self.backward(x, y, want_input=True)[2] * x.dtype.type(x.shape[0])


@dataclass(frozen=True)
class TrainHyper:
    epochs: int = 30
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 128
    schedule: Literal["constant", "cosine"] = "cosine"
    seed: int = 0
    hidden: int = 256
    input_offset: float = 0.5

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ArgumentError("learning_rate must be > 0")
        if self.epochs < 0 or self.batch_size < 1 or self.hidden < 1:
            raise ArgumentError("epochs >= 0, batch_size >= 1 and hidden >= 1 required")

    def as_sgd(self) -> lc.SgdHyper:
        return lc.SgdHyper(epochs=self.epochs, learning_rate=self.learning_rate,
                           momentum=self.momentum, weight_decay=self.weight_decay,
                           batch_size=self.batch_size, schedule=self.schedule, seed=self.seed)


BatchHook = Callable[[int, MlpModel, np.ndarray], None]


def train_mlp(ds: LabeledDataset, hyper: TrainHyper = TrainHyper(),
              batch_hook: BatchHook | None = None):
    """Minibatch SGD with momentum and weight decay on mean CE.

    ``batch_hook(epoch, model, idx)`` runs before each update with the rows of
    the batch.  Returns ``(model, trace)``, one ``{epoch, loss, acc}`` per epoch.
    """
    if ds.n == 0:
        raise ArgumentError("cannot train on an empty dataset")
    model = MlpModel.init(ds.d, hyper.hidden, ds.k, hyper.seed, offset=hyper.input_offset)
    vel = [np.zeros_like(p) for p in model.params]
    rng = np.random.default_rng([hyper.seed, 11])
    mu, wd = np.float32(hyper.momentum), np.float32(hyper.weight_decay)
    x, y = ds.pixels, ds.labels
    sched = hyper.as_sgd()
    trace = []
    for epoch in range(hyper.epochs):
        lr = np.float32(lc.lr_at(sched, epoch))
        order = rng.permutation(ds.n)
        total, correct = 0.0, 0
        for s in range(0, ds.n, hyper.batch_size):
            idx = order[s:s + hyper.batch_size]
            if batch_hook is not None:
                batch_hook(epoch, model, idx)
            z2, _ = model.forward(x[idx])
            correct += int(np.sum(np.argmax(z2, 1) == y[idx]))
            loss, grads = model.backward(x[idx], y[idx])
            total += loss * len(idx)
            for p, v, g in zip(model.params, vel, grads):
                if wd:
                    g += wd * p
                v *= mu
                v += g
                p -= lr * v
        loss = total / ds.n
        if not math.isfinite(loss):
            raise NumericError(f"non-finite loss at epoch {epoch}")
        trace.append({"epoch": epoch, "loss": loss, "acc": correct / ds.n})
    return model, trace


def save_model(model: MlpModel, path) -> None:
    """Layer manifest: W1, b1, W2, b2, then the 1-element input offset."""
    arrays = [*model.params, np.array([model.offset], dtype=np.float32)]
    pild.write_arrays(path, arrays, k=model.widths[2], seed=model.seed)


def load_model(path) -> MlpModel:
    hdr, arrays = pild.read_arrays(path)
    if len(arrays) != 5 or arrays[4].shape != (1,):
        raise ShapeError(f"{path}: expected W1, b1, W2, b2 and offset arrays")
    W1, b1, W2, b2, off = arrays
    d, h = W1.shape
    if b1.shape != (h,) or W2.shape[0] != h or b2.shape != (W2.shape[1],):
        raise ShapeError(f"{path}: inconsistent layer shapes")
    return MlpModel(W1, b1, W2, b2, seed=hdr.seed, offset=float(off[0]))


# ------------------------------------------------------------------ FGSM

def fgsm_attack(model: MlpModel, x, y, step: float) -> np.ndarray:
    """``clip(x + step * sign(dL/dx), 0, 1)``."""
    if step < 0:
        raise ArgumentError("FGSM step must be >= 0")
    x = np.asarray(x)
    if step == 0:
        return x.copy()
    g = model.input_grad(x, y)
    return np.clip(x + x.dtype.type(step) * np.sign(g), 0, 1)


@dataclass(frozen=True)
class FgsmRow:
    step: float
    accuracy: float
    drop: float


def fgsm_accuracy_curve(model: MlpModel, test: LabeledDataset,
                        steps: Sequence[float] = (0, 1 / 255, 2 / 255, 4 / 255, 8 / 255)):
    steps = list(steps)
    if not steps:
        raise ArgumentError("need at least one FGSM step")
    if steps[0] != 0 or any(b < a for a, b in zip(steps, steps[1:])):
        raise ArgumentError("steps must be ascending and start at 0")
    rows, base = [], None
    for s in steps:
        xa = fgsm_attack(model, test.pixels, test.labels, s)
        acc = float(np.mean(model.predict(xa) == test.labels))
        base = acc if base is None else base
        rows.append(FgsmRow(s, acc, base - acc))
    return rows


# ----------------------------------------------------- gradient geometry

def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise UndefinedCosineError("cosine undefined for a zero-norm gradient")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _xy(batch):
    if isinstance(batch, LabeledDataset):
        return batch.pixels, batch.labels
    return np.asarray(batch[0]), np.asarray(batch[1])


def grad_cosine_clean_vs_perturbed(model: MlpModel, clean_batch, pert_batch) -> float:
    """Cosine between batch-averaged parameter gradients of two batches."""
    xc, yc = _xy(clean_batch)
    xp, yp = _xy(pert_batch)
    if len(yc) == 0 or len(yp) == 0:
        raise ArgumentError("batches must be non-empty")
    return cosine(model.flat_grad(xc, yc), model.flat_grad(xp, yp))


@dataclass
class OrthogonalityProbe:
    """Batch hook recording clean-vs-perturbed gradient cosines during training.

    ``mode="split"`` compares the clean and perturbed rows of each mixed batch;
    ``mode="paired"`` compares each batch's rows in clean form against the same
    rows in perturbed form.
    """

    clean: LabeledDataset
    perturbed: LabeledDataset
    mask: np.ndarray
    mode: Literal["split", "paired"] = "split"
    per_epoch: dict = field(default_factory=dict)

    def __call__(self, epoch: int, model: MlpModel, idx: np.ndarray) -> None:
        if self.mode == "split":
            m = self.mask[idx]
            c, p = idx[~m], idx[m]
        else:
            c = p = idx
        if len(c) == 0 or len(p) == 0:
            return
        try:
            cos = grad_cosine_clean_vs_perturbed(
                model, (self.clean.pixels[c], self.clean.labels[c]),
                (self.perturbed.pixels[p], self.perturbed.labels[p]))
        except UndefinedCosineError:
            return
        self.per_epoch.setdefault(epoch, []).append(cos)

    def epoch_means(self) -> dict[int, float]:
        return {e: float(np.mean(v)) for e, v in sorted(self.per_epoch.items())}


def per_sample_gram(model: MlpModel, x, y) -> np.ndarray:
    """Gram matrix of per-sample flattened parameter gradients (CE, not averaged).

    Uses ``<outer(u, v), outer(u', v')> = (u.u')(v.v')`` so the per-sample
    gradients are never materialised.
    """
    x = np.asarray(x, dtype=np.float64)
    m = model.astype(np.float64)
    z2, (z1, a1, xs) = m.forward(x)
    d2 = lc.dlogits_ce(lc.softmax(z2), y)
    d1 = (d2 @ m.W2.T) * (z1 > 0)
    return (a1 @ a1.T + 1.0) * (d2 @ d2.T) + (xs @ xs.T + 1.0) * (d1 @ d1.T)


@dataclass
class IntraClassResult:
    per_class: np.ndarray
    counts: np.ndarray
    warnings: list[str]

    @property
    def mean(self) -> float:
        return float(np.nanmean(self.per_class))


def intra_class_grad_similarity(model: MlpModel, ds: LabeledDataset,
                                per_class_sample_cap: int = 64, seed: int = 0) -> IntraClassResult:
    """Mean pairwise cosine of per-sample parameter gradients within each class."""
    if per_class_sample_cap < 2:
        raise ArgumentError("per_class_sample_cap must be >= 2")
    rng = np.random.default_rng(seed)
    sims = np.full(ds.k, np.nan)
    counts = np.zeros(ds.k, dtype=int)
    warnings = []
    for c in range(ds.k):
        rows = np.flatnonzero(ds.labels == c)
        if rows.size > per_class_sample_cap:
            rows = np.sort(rng.choice(rows, per_class_sample_cap, replace=False))
        counts[c] = rows.size
        if rows.size < 2:
            warnings.append(f"class {c}: {rows.size} sample(s), skipped")
            continue
        G = per_sample_gram(model, ds.pixels[rows], ds.labels[rows])
        norms = np.sqrt(np.diag(G))
        if np.any(norms == 0):
            warnings.append(f"class {c}: zero-norm per-sample gradient, skipped")
            continue
        C = G / np.outer(norms, norms)
        iu = np.triu_indices(rows.size, 1)
        sims[c] = float(np.clip(C[iu], -1, 1).mean())
    return IntraClassResult(sims, counts, warnings)


# ------------------------------------------------------------- first-order check

@dataclass(frozen=True)
class Theorem1Record:
    step: int
    measured: float
    predicted: float
    dot_cu: float
    dot_cc: float
    alpha: float
    eta: float

    @staticmethod
    def predict(alpha: float, eta: float, dot_cu: float, dot_cc: float) -> float:
        return -eta * (alpha * dot_cu + (1 - alpha) * dot_cc)

    @property
    def rel_error(self) -> float:
        return abs(self.measured - self.predicted) / max(abs(self.predicted), 1e-12)


def theorem1_check(model: MlpModel, clean: LabeledDataset, pert: LabeledDataset,
                   alpha: float, eta: float, steps: int = 1) -> list[Theorem1Record]:
    """Full-batch descent on ``alpha L_u + (1 - alpha) L_c`` in float64.

    Each record compares the measured change in the clean loss with the
    first-order prediction ``-eta g_c . (alpha g_u + (1 - alpha) g_c)``.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ArgumentError(f"alpha must lie in [0, 1], got {alpha}")
    if not eta > 0:
        raise ArgumentError("eta must be > 0")
    m = model.astype(np.float64)
    xc, yc = clean.pixels.astype(np.float64), clean.labels
    xu, yu = pert.pixels.astype(np.float64), pert.labels
    out = []
    for t in range(steps):
        lc0, gc = m.loss(xc, yc), m.flat_grad(xc, yc)
        gu = m.flat_grad(xu, yu)
        theta = m.flat() - eta * (alpha * gu + (1 - alpha) * gc)
        m = m.with_flat(theta)
        dot_cu, dot_cc = float(gc @ gu), float(gc @ gc)
        out.append(Theorem1Record(t, m.loss(xc, yc) - lc0,
                                  Theorem1Record.predict(alpha, eta, dot_cu, dot_cc),
                                  dot_cu, dot_cc, alpha, eta))
    return out
