"""Imperceptibility metrics, shortcut probes, the SP baseline and the lambda sweep."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, replace
from typing import Literal, Sequence

import numpy as np

from . import linear_core as lc
from . import pil_gen as pg
from . import victim_lab as vl
from .dataset_io import LabeledDataset, PerturbationSet, Sign, f32_budget, shuffle_pairings
from .errors import ArgumentError, ShapeError

METRIC_CSV_HEADER = ("method", "metric", "value", "n_images", "n_infinite")


def _pixels(ds) -> np.ndarray:
    return ds.pixels if isinstance(ds, LabeledDataset) else np.asarray(ds)


@dataclass
class MetricResult:
    per_image: np.ndarray
    mean: float
    n_images: int
    n_infinite: int = 0


def psnr(reference, candidate) -> MetricResult:
    """Per-image ``10 log10(1 / MSE)`` on the [0, 1] scale.

    Identical images give ``inf``; those are left out of the mean and counted.
    """
    a = _pixels(reference).astype(np.float64)
    b = _pixels(candidate).astype(np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2, axis=1)
    with np.errstate(divide="ignore"):
        per = np.where(mse > 0, -10.0 * np.log10(np.where(mse > 0, mse, 1.0)), np.inf)
    finite = per[np.isfinite(per)]
    mean = float(finite.mean()) if finite.size else math.inf
    return MetricResult(per, mean, len(per), int(len(per) - finite.size))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable 'valid' filtering over the last two axes."""
    m = g.size
    h, w = img.shape[-2:]
    rows = sum(g[i] * img[..., i:h - m + 1 + i, :] for i in range(m))
    return sum(g[j] * rows[..., :, j:w - m + 1 + j] for j in range(m))


def ssim_images(ref: np.ndarray, cand: np.ndarray, window: int = 11, sigma: float = 1.5,
                k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0) -> np.ndarray:
    """SSIM for arrays of shape (n, C, H, W); the per-channel means are averaged."""
    x = np.asarray(ref, dtype=np.float64)
    y = np.asarray(cand, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 4:
        raise ShapeError(f"need matching (n, C, H, W) arrays, got {x.shape} and {y.shape}")
    if window > min(x.shape[-2:]):
        raise ArgumentError(f"window {window} larger than image side {min(x.shape[-2:])}")
    g = gaussian_window(window, sigma)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    smap = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    return smap.mean(axis=(-2, -1)).mean(axis=-1)


def ssim(reference: LabeledDataset, candidate, window: int = 11, k1: float = 0.01,
         k2: float = 0.03, sigma: float = 1.5) -> MetricResult:
    cand = _pixels(candidate)
    if cand.shape != reference.pixels.shape:
        raise ShapeError("reference and candidate differ in shape")
    shape = (reference.n, *reference.shape)
    per = ssim_images(reference.pixels.reshape(shape), cand.reshape(shape), window, sigma, k1, k2)
    return MetricResult(per, float(per.mean()), len(per))


def metrics_csv(rows: Sequence[tuple[str, str, MetricResult]]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(METRIC_CSV_HEADER)
    for method, metric, res in rows:
        wr.writerow((method, metric, f"{res.mean:.6f}", res.n_images, res.n_infinite))
    return buf.getvalue()


# ------------------------------------------------------------- probes

@dataclass
class ProbeReport:
    clean_train_acc: float
    shuffled_train_acc: float
    shuffled_test_acc: float
    probe_kind: str
    seeds: dict

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def _fit_probe(ds: LabeledDataset, kind: str, seed: int, hyper=None):
    if kind == "linear":
        hyper = hyper or lc.SgdHyper(seed=seed)
        w, _ = lc.train_sgd(ds, hyper)
        return lambda x: lc.predict(w, x)
    if kind == "mlp":
        hyper = hyper or vl.TrainHyper(seed=seed)
        model, _ = vl.train_mlp(ds, hyper)
        return model.predict
    raise ArgumentError(f"probe_kind must be 'linear' or 'mlp', got {kind!r}")


def shuffled_test_set(clean_test: LabeledDataset, train_labels: np.ndarray,
                      perts: PerturbationSet, sign: Sign, seed: int) -> LabeledDataset:
    """Held-out images, each paired with a random training perturbation and its label."""
    j = np.random.default_rng(seed).integers(0, perts.n, clean_test.n)
    return shuffle_pairings(clean_test, perts.subset(j), sign, seed=None,
                            pert_labels=np.asarray(train_labels)[j])


def shortcut_probe(unlearnable: LabeledDataset, clean_train: LabeledDataset,
                   perts: PerturbationSet, clean_test: LabeledDataset,
                   probe_kind: Literal["linear", "mlp"] = "linear",
                   seeds: dict | None = None, sign: Sign = "subtract",
                   hyper=None) -> ProbeReport:
    """Train a probe on the unlearnable set and test it on clean and shuffled data."""
    seeds = {"probe": 0, "shuffle_train": 1, "shuffle_test": 2, **(seeds or {})}
    if unlearnable.pixels.shape != clean_train.pixels.shape or perts.n != clean_train.n:
        raise ShapeError("unlearnable set, clean train set and perturbations disagree in size")
    predict = _fit_probe(unlearnable, probe_kind, seeds["probe"], hyper)

    def acc(ds):
        return float(np.mean(predict(ds.pixels) == ds.labels))

    sh_train = shuffle_pairings(clean_train, perts, sign, seed=seeds["shuffle_train"])
    sh_test = shuffled_test_set(clean_test, clean_train.labels, perts, sign, seeds["shuffle_test"])
    return ProbeReport(acc(clean_train), acc(sh_train), acc(sh_test), probe_kind, seeds)


# ------------------------------------------------------------- SP baseline

@dataclass(frozen=True)
class SyntheticPatternBaseline:
    """Simplified SP baseline: one Gaussian pattern per class plus small noise.

    Each row is rescaled so its largest entry hits the budget.
    """

    patterns: np.ndarray
    budget: float
    noise: float = 0.1
    label: str = "SP (simplified)"

    @property
    def k(self) -> int:
        return self.patterns.shape[0]

    def perturbations(self, labels, noise_seed: int = 0) -> PerturbationSet:
        labels = np.asarray(labels)
        if labels.size and (labels.min() < 0 or labels.max() >= self.k):
            raise ArgumentError(f"labels must lie in [0, {self.k})")
        rng = np.random.default_rng(noise_seed)
        raw = self.patterns[labels]
        if self.noise:
            raw = raw + self.noise * rng.standard_normal(raw.shape)
        peak = np.abs(raw).max(axis=1, keepdims=True)
        b = f32_budget(self.budget)
        scaled = (raw * (b / np.where(peak > 0, peak, 1.0))).astype(np.float32)
        return PerturbationSet(np.clip(scaled, -b, b), b, noise_seed)


def sp_baseline(k: int, d: int, per_class_scale: float = 8 / 255, seed: int = 0,
                noise: float = 0.1) -> SyntheticPatternBaseline:
    """Class-wise perturbation factory; ``per_class_scale`` is the L-inf budget."""
    if k < 2:
        raise ArgumentError(f"need at least 2 classes, got k={k}")
    if not per_class_scale > 0:
        raise ArgumentError("per_class_scale must be > 0")
    rng = np.random.default_rng(seed)
    return SyntheticPatternBaseline(rng.standard_normal((k, d)), per_class_scale, noise)


# ------------------------------------------------------------- lambda sweep

@dataclass(frozen=True)
class SweepRow:
    lam: float
    victim_test_acc: float
    shortcut_probe_acc: float
    mean_final_loss: float


def lambda_sweep(train: LabeledDataset, test: LabeledDataset, surrogate_hyper: lc.SgdHyper,
                 pil_cfg: pg.PilConfig, lambdas: Sequence[float],
                 victim_hyper: vl.TrainHyper = vl.TrainHyper(),
                 workers: int | None = None) -> list[SweepRow]:
    """Regenerate the unlearnable set per lambda and retrain the victim on it.

    The surrogate is trained once and shared by every lambda.
    """
    lambdas = list(lambdas)
    if not lambdas:
        raise ArgumentError("need at least one lambda")
    if any(not 0.0 <= lam <= 1.0 for lam in lambdas):
        raise ArgumentError("every lambda must lie in [0, 1]")
    w, _ = pg.surrogate_for(train, pil_cfg, surrogate_hyper)
    rows = []
    for lam in lambdas:
        _, du, rep = pg.generate_unlearnable(train, w, replace(pil_cfg, lam=lam), workers)
        model, _ = vl.train_mlp(du, victim_hyper)
        rows.append(SweepRow(lam, model.accuracy(test), rep.shortcut_probe_acc,
                             rep.mean_final_loss))
    return rows
