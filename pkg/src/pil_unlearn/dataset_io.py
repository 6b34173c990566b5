"""Labeled image datasets, perturbation sets, and every transformation between them."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Literal

import numpy as np

from . import pild
from .errors import ArgumentError, ConsistencyError, FormatError, IntegrityError, ShapeError

Sign = Literal["subtract", "add"]
SelectionMode = Literal["prefix", "random", "per-class"]

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_SHAPE = (3, 32, 32)


def f32_budget(epsilon: float) -> float:
    """Largest float32 value that does not exceed ``epsilon``.

    Clipping to this bound keeps ``max|delta| <= epsilon`` exact whether the
    comparison is done in float32 or float64.
    """
    b = np.float32(epsilon)
    if float(b) > epsilon:
        b = np.nextafter(b, np.float32(0))
    return float(b)


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    pixels: np.ndarray
    labels: np.ndarray
    shape: tuple[int, int, int]
    k: int

    def __post_init__(self):
        px = np.ascontiguousarray(self.pixels, dtype=np.float32)
        lb = np.ascontiguousarray(self.labels, dtype=np.int64)
        if px.ndim != 2:
            raise ShapeError(f"pixels must be 2-D (n, d), got shape {px.shape}")
        c, h, w = (int(s) for s in self.shape)
        if c * h * w != px.shape[1]:
            raise ShapeError(f"shape {self.shape} does not match d={px.shape[1]}")
        if lb.shape != (px.shape[0],):
            raise ShapeError(f"labels length {lb.shape} != n={px.shape[0]}")
        if self.k < 1 or (lb.size and (lb.min() < 0 or lb.max() >= self.k)):
            raise ConsistencyError(f"labels must lie in [0, {self.k})")
        if px.size and not (px.min() >= 0.0 and px.max() <= 1.0):
            raise IntegrityError("pixel values must lie in [0, 1]")
        if px is self.pixels:
            px = px.copy()
        if lb is self.labels:
            lb = lb.copy()
        object.__setattr__(self, "pixels", _frozen(px))
        object.__setattr__(self, "labels", _frozen(lb))
        object.__setattr__(self, "shape", (c, h, w))
        object.__setattr__(self, "k", int(self.k))

    @property
    def n(self) -> int:
        return self.pixels.shape[0]

    @property
    def d(self) -> int:
        return self.pixels.shape[1]

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx)
        return LabeledDataset(self.pixels[idx], self.labels[idx], self.shape, self.k)

    def images(self) -> np.ndarray:
        return self.pixels.reshape(self.n, *self.shape)

    def __eq__(self, other):
        if not isinstance(other, LabeledDataset):
            return NotImplemented
        return (self.shape == other.shape and self.k == other.k
                and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.pixels, other.pixels))


@dataclass(frozen=True, eq=False)
class PerturbationSet:
    """Per-sample perturbations under an L-infinity budget.

    ``epsilon`` is stored as a float32-representable value (see ``f32_budget``).
    """

    deltas: np.ndarray
    epsilon: float
    seed: int = 0

    def __post_init__(self):
        dl = np.ascontiguousarray(self.deltas, dtype=np.float32)
        if dl.ndim != 2:
            raise ShapeError(f"deltas must be 2-D (n, d), got shape {dl.shape}")
        eps = f32_budget(self.epsilon)
        if not eps > 0:
            raise ArgumentError(f"epsilon must be positive, got {self.epsilon}")
        if not np.all(np.isfinite(dl)):
            raise IntegrityError("perturbations contain non-finite values")
        if dl.size and float(np.abs(dl).max()) > eps:
            raise IntegrityError(
                f"max|delta| = {float(np.abs(dl).max())!r} exceeds epsilon {eps!r}")
        if dl is self.deltas:
            dl = dl.copy()
        object.__setattr__(self, "deltas", _frozen(dl))
        object.__setattr__(self, "epsilon", eps)
        object.__setattr__(self, "seed", int(self.seed))

    @property
    def n(self) -> int:
        return self.deltas.shape[0]

    @property
    def d(self) -> int:
        return self.deltas.shape[1]

    def subset(self, idx) -> "PerturbationSet":
        return PerturbationSet(self.deltas[np.asarray(idx)], self.epsilon, self.seed)

    def __eq__(self, other):
        if not isinstance(other, PerturbationSet):
            return NotImplemented
        return (self.epsilon == other.epsilon and self.seed == other.seed
                and np.array_equal(self.deltas, other.deltas))


@dataclass(frozen=True)
class MixSpec:
    perturb_fraction: float
    selection_seed: int = 0
    selection_mode: SelectionMode = "random"
    # per-class mode only: restrict selection to these classes
    classes: tuple[int, ...] | None = field(default=None)

    def __post_init__(self):
        if not 0.0 <= self.perturb_fraction <= 1.0:
            raise ArgumentError(f"perturb_fraction must be in [0, 1], got {self.perturb_fraction}")
        if self.selection_mode not in ("prefix", "random", "per-class"):
            raise ArgumentError(f"unknown selection_mode {self.selection_mode!r}")


# ---------------------------------------------------------------- loaders

def load_cifar10_binary(paths: Iterable[str | Path]) -> LabeledDataset:
    """Concatenate CIFAR-10 binary batch files (1 label byte + 3072 pixel bytes per record)."""
    chunks, labels = [], []
    for p in paths:
        p = Path(p)
        try:
            raw = np.fromfile(p, dtype=np.uint8)
        except FileNotFoundError as exc:
            raise FileNotFoundError(f"CIFAR-10 batch file not found: {p}") from exc
        if raw.size % CIFAR_RECORD:
            whole = raw.size // CIFAR_RECORD
            raise FormatError(f"{p}: length {raw.size} is not a multiple of {CIFAR_RECORD}; "
                              f"partial record at offset {whole * CIFAR_RECORD}")
        rec = raw.reshape(-1, CIFAR_RECORD)
        bad = np.flatnonzero(rec[:, 0] >= 10)
        if bad.size:
            raise FormatError(f"{p}: record {int(bad[0])} has label byte {int(rec[bad[0], 0])} >= 10")
        labels.append(rec[:, 0].astype(np.int64))
        chunks.append(rec[:, 1:])
    if not chunks:
        raise ArgumentError("no CIFAR-10 batch files given")
    pixels = np.concatenate(chunks).astype(np.float32) / np.float32(255.0)
    return LabeledDataset(pixels, np.concatenate(labels), CIFAR_SHAPE, 10)


def _default_shape(d: int) -> tuple[int, int, int]:
    side = math.isqrt(d)
    if side * side == d:
        return (1, side, side)
    if d % 3 == 0 and math.isqrt(d // 3) ** 2 == d // 3:
        s = math.isqrt(d // 3)
        return (3, s, s)
    return (1, 1, d)


def class_means(k: int, d: int, class_separation: float, seed: int) -> np.ndarray:
    """Blob centres ``0.5 + class_separation * g_c`` with ``g_c`` standard normal, clamped to [0, 1]."""
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((k, d))
    return np.clip(0.5 + class_separation * g, 0.0, 1.0)


def generate_synthetic(k: int, n_per_class: int, d: int, class_separation: float,
                       noise_scale: float, seed: int, *, sample_seed: int | None = None,
                       shape: tuple[int, int, int] | None = None) -> LabeledDataset:
    """k Gaussian blobs with distinct centres, entries clamped to [0, 1].

    ``seed`` fixes the class centres; ``sample_seed`` (defaults to ``seed``)
    fixes the per-sample noise, so train and test splits can share centres.
    Rows are ordered class by class.
    """
    if k < 2:
        raise ArgumentError(f"need at least 2 classes, got k={k}")
    if d < 1 or n_per_class < 1:
        raise ArgumentError("d and n_per_class must be >= 1")
    if noise_scale < 0:
        raise ArgumentError("noise_scale must be >= 0")
    shape = shape or _default_shape(d)
    means = class_means(k, d, class_separation, seed)
    rng = np.random.default_rng([seed, 1] if sample_seed is None else [sample_seed, 2])
    labels = np.repeat(np.arange(k), n_per_class)
    x = means[labels] + noise_scale * rng.standard_normal((labels.size, d))
    return LabeledDataset(np.clip(x, 0.0, 1.0).astype(np.float32), labels, shape, k)


# ---------------------------------------------------------- transformations

def _signed(clean: np.ndarray, deltas: np.ndarray, sign: Sign) -> np.ndarray:
    if sign == "subtract":
        return clean - deltas
    if sign == "add":
        return clean + deltas
    raise ArgumentError(f"sign must be 'subtract' or 'add', got {sign!r}")


def apply_perturbations(clean: LabeledDataset, perts: PerturbationSet,
                        sign: Sign = "subtract", clamp: bool = True) -> LabeledDataset:
    """Return ``x - delta`` (or ``x + delta``) row by row.

    With ``clamp=False`` the result may leave [0, 1]; it is then returned as a
    raw ``(pixels, labels)`` carrier via :class:`UnclampedDataset`.
    """
    if perts.n != clean.n or perts.d != clean.d:
        raise ShapeError(f"perturbations {perts.deltas.shape} do not match dataset {clean.pixels.shape}")
    out = _signed(clean.pixels, perts.deltas, sign)
    if clamp:
        return LabeledDataset(np.clip(out, 0.0, 1.0), clean.labels, clean.shape, clean.k)
    return UnclampedDataset(out, clean.labels, clean.shape, clean.k)


class UnclampedDataset(LabeledDataset):
    """LabeledDataset variant that skips the [0, 1] range check.

    Only produced by ``apply_perturbations(..., clamp=False)`` for algebraic checks.
    """

    def __post_init__(self):
        px = np.array(self.pixels, dtype=np.float32)
        lb = np.array(self.labels, dtype=np.int64)
        c, h, w = (int(s) for s in self.shape)
        if px.ndim != 2 or c * h * w != px.shape[1] or lb.shape != (px.shape[0],):
            raise ShapeError("inconsistent unclamped dataset shapes")
        object.__setattr__(self, "pixels", _frozen(px))
        object.__setattr__(self, "labels", _frozen(lb))
        object.__setattr__(self, "shape", (c, h, w))


def shuffle_pairings(clean: LabeledDataset, perts: PerturbationSet, sign: Sign = "subtract",
                     seed: int | None = 0, pert_labels: np.ndarray | None = None,
                     clamp: bool = True) -> LabeledDataset:
    """Pair image ``i`` with perturbation ``j = perm[i]`` and label ``y_j``.

    ``pert_labels`` are the labels of the samples the perturbations were built
    for; they default to ``clean.labels``.  ``seed=None`` uses the identity
    permutation.
    """
    if perts.n != clean.n or perts.d != clean.d:
        raise ShapeError(f"perturbations {perts.deltas.shape} do not match dataset {clean.pixels.shape}")
    src = clean.labels if pert_labels is None else np.asarray(pert_labels, dtype=np.int64)
    if src.shape != (perts.n,):
        raise ShapeError("pert_labels must have one entry per perturbation")
    perm = np.arange(clean.n) if seed is None else np.random.default_rng(seed).permutation(clean.n)
    out = _signed(clean.pixels, perts.deltas[perm], sign)
    cls = LabeledDataset if clamp else UnclampedDataset
    if clamp:
        out = np.clip(out, 0.0, 1.0)
    return cls(out, src[perm], clean.shape, clean.k)


def _select(n: int, labels: np.ndarray, spec: MixSpec) -> np.ndarray:
    m = int(round(spec.perturb_fraction * n))
    mask = np.zeros(n, dtype=bool)
    if m == 0:
        return mask
    rng = np.random.default_rng(spec.selection_seed)
    if spec.selection_mode == "prefix":
        mask[:m] = True
    elif spec.selection_mode == "random":
        mask[rng.permutation(n)[:m]] = True
    elif spec.classes is not None:
        pool = np.flatnonzero(np.isin(labels, spec.classes))
        if m > pool.size:
            raise ArgumentError(f"need {m} rows but classes {spec.classes} only have {pool.size}")
        mask[rng.permutation(pool)[:m]] = True
    else:
        # stratified: largest-remainder split of m across classes
        classes, counts = np.unique(labels, return_counts=True)
        quota = counts * (m / n)
        take = np.floor(quota).astype(int)
        short = m - take.sum()
        order = np.lexsort((classes, -(quota - take)))
        take[order[:short]] += 1
        for c, t in zip(classes, take):
            rows = np.flatnonzero(labels == c)
            mask[rng.permutation(rows)[:t]] = True
    return mask


def mix(clean: LabeledDataset, unlearnable: LabeledDataset, spec: MixSpec):
    """Replace ``round(fraction * n)`` rows of ``clean`` by their unlearnable versions.

    Returns ``(mixed, mask)``; ``mask[i]`` is True where row ``i`` is perturbed.
    """
    if clean.pixels.shape != unlearnable.pixels.shape or clean.k != unlearnable.k:
        raise ShapeError("clean and unlearnable datasets differ in shape or class count")
    if not np.array_equal(clean.labels, unlearnable.labels):
        raise ConsistencyError("clean and unlearnable datasets have different labels")
    mask = _select(clean.n, clean.labels, spec)
    px = np.where(mask[:, None], unlearnable.pixels, clean.pixels)
    return LabeledDataset(px, clean.labels, clean.shape, clean.k), mask


def train_test_split(ds: LabeledDataset, test_fraction: float, seed: int):
    perm = np.random.default_rng(seed).permutation(ds.n)
    n_test = int(round(test_fraction * ds.n))
    return ds.subset(np.sort(perm[n_test:])), ds.subset(np.sort(perm[:n_test]))


# ------------------------------------------------------------- persistence

def save_dataset(ds: LabeledDataset, path, dtype: str = "f32", seed: int = 0) -> None:
    if ds.k > 256:
        raise ArgumentError("the container stores labels as single bytes (k <= 256)")
    c, h, w = ds.shape
    if dtype == "u8":
        q = np.rint(ds.pixels * 255.0)
        if not np.array_equal(q / np.float32(255.0), ds.pixels):
            raise ArgumentError("pixels are not exact multiples of 1/255; save as f32")
        payload, code = q.astype(np.uint8), pild.DTYPE_U8
    elif dtype == "f32":
        payload, code = ds.pixels, pild.DTYPE_F32
    else:
        raise ArgumentError(f"dtype must be 'f32' or 'u8', got {dtype!r}")
    hdr = pild.Header(pild.KIND_DATASET, code, ds.n, c, h, w, ds.k, 0.0, seed)
    pild.write_rows(path, hdr, payload, ds.labels)


def load_dataset(path) -> LabeledDataset:
    hdr, labels, payload = pild.read_rows(path, pild.KIND_DATASET)
    if hdr.dtype == pild.DTYPE_U8:
        pixels = payload.astype(np.float32) / np.float32(255.0)
    else:
        pixels = payload
    if labels.size and labels.max() >= hdr.k:
        raise FormatError(f"{path}: labels: label {int(labels.max())} >= k={hdr.k}")
    return LabeledDataset(pixels, labels, (hdr.channels, hdr.height, hdr.width), hdr.k)


def save_perturbations(perts: PerturbationSet, path,
                       shape: tuple[int, int, int] | None = None, k: int = 0) -> None:
    c, h, w = shape or _default_shape(perts.d)
    if c * h * w != perts.d:
        raise ShapeError(f"shape {shape} does not match d={perts.d}")
    hdr = pild.Header(pild.KIND_PERTURBATIONS, pild.DTYPE_F32, perts.n, c, h, w, k,
                      perts.epsilon, perts.seed)
    pild.write_rows(path, hdr, perts.deltas)


def load_perturbations(path) -> PerturbationSet:
    hdr, _, payload = pild.read_rows(path, pild.KIND_PERTURBATIONS)
    if hdr.dtype != pild.DTYPE_F32:
        raise FormatError(f"{path}: dtype: perturbations must be stored as f32")
    if not hdr.epsilon > 0:
        raise FormatError(f"{path}: epsilon: stored budget {hdr.epsilon} is not positive")
    peak = float(np.abs(payload).max()) if payload.size else 0.0
    if peak > hdr.epsilon:
        raise IntegrityError(f"{path}: epsilon: stored budget {hdr.epsilon!r} < observed max|delta| {peak!r}")
    return PerturbationSet(payload, hdr.epsilon, hdr.seed)
