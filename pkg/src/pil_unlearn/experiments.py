"""Multi-step experiment protocols shared by the CLI and the acceptance suite."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import linear_core as lc
from . import pil_gen as pg
from . import victim_lab as vl
from .dataset_io import LabeledDataset, MixSpec, generate_synthetic, mix


@dataclass(frozen=True)
class SyntheticSpec:
    k: int = 10
    n_per_class: int = 500
    n_test_per_class: int = 200
    d: int = 256
    class_separation: float = 0.015
    noise_scale: float = 0.05
    seed: int = 1

    def make(self) -> tuple[LabeledDataset, LabeledDataset]:
        """Train and test splits drawn around the same class centres."""
        train = generate_synthetic(self.k, self.n_per_class, self.d, self.class_separation,
                                   self.noise_scale, self.seed, sample_seed=self.seed)
        test = generate_synthetic(self.k, self.n_test_per_class, self.d, self.class_separation,
                                  self.noise_scale, self.seed, sample_seed=self.seed + 10_007)
        return train, test


# Desk benchmark: class-centre offsets (std 0.015) sit below the 8/255 budget,
# noise 0.05 per pixel; a clean MLP still separates the classes.
DESK = SyntheticSpec()


@dataclass
class PilRun:
    train: LabeledDataset
    test: LabeledDataset
    weights: lc.LinearWeights
    perts: object
    unlearnable: LabeledDataset
    report: pg.GenerationReport


def run_pil(train: LabeledDataset, test: LabeledDataset, cfg: pg.PilConfig = pg.PilConfig(),
            surrogate: lc.SgdHyper = lc.SgdHyper(), workers: int | None = None) -> PilRun:
    w, _ = pg.surrogate_for(train, cfg, surrogate)
    perts, du, rep = pg.generate_unlearnable(train, w, cfg, workers)
    return PilRun(train, test, w, perts, du, rep)


def clean_subset(train: LabeledDataset, mask: np.ndarray, resample_to: int | None = None,
                 seed: int = 0) -> LabeledDataset:
    """Rows left clean by a mix, optionally resampled with replacement to a fixed size."""
    rows = np.flatnonzero(~mask)
    if resample_to is not None and rows.size:
        rows = np.sort(np.random.default_rng(seed).choice(rows, resample_to, replace=True))
    return train.subset(rows)


@dataclass
class FgsmComparison:
    perturbed: list
    control: list
    mix_accuracy: float
    control_accuracy: float

    def extra_drop(self, i: int = 1) -> float:
        return self.perturbed[i].drop - self.control[i].drop


def fgsm_comparison(run: PilRun, fraction: float, victim: vl.TrainHyper,
                    steps=(0, 1 / 255, 2 / 255, 4 / 255, 8 / 255),
                    selection_seed: int = 0) -> FgsmComparison:
    """Mix-trained victim vs a victim trained on only the clean part of that mix."""
    mixed, mask = mix(run.train, run.unlearnable, MixSpec(fraction, selection_seed))
    m_mix, _ = vl.train_mlp(mixed, victim)
    m_ctl, _ = vl.train_mlp(clean_subset(run.train, mask), victim)
    return FgsmComparison(vl.fgsm_accuracy_curve(m_mix, run.test, steps),
                          vl.fgsm_accuracy_curve(m_ctl, run.test, steps),
                          m_mix.accuracy(run.test), m_ctl.accuracy(run.test))


def orthogonality_run(run: PilRun, fraction: float, victim: vl.TrainHyper,
                      mode: str = "split", selection_seed: int = 0):
    """Per-epoch mean cosine between clean and perturbed batch gradients."""
    mixed, mask = mix(run.train, run.unlearnable, MixSpec(fraction, selection_seed))
    probe = vl.OrthogonalityProbe(run.train, run.unlearnable, mask, mode)
    model, trace = vl.train_mlp(mixed, victim, batch_hook=probe)
    return probe.epoch_means(), model, trace


def intra_class_comparison(run: PilRun, victim: vl.TrainHyper, cap: int = 64, seed: int = 0):
    """Intra-class gradient similarity on the clean train set for PIL- and clean-trained victims."""
    m_pil, _ = vl.train_mlp(run.unlearnable, victim)
    m_clean, _ = vl.train_mlp(run.train, victim)
    return (vl.intra_class_grad_similarity(m_pil, run.train, cap, seed),
            vl.intra_class_grad_similarity(m_clean, run.train, cap, seed))


def theorem1_sets(run: PilRun, n_rows: int = 400, seed: int = 0):
    """Disjoint clean and perturbed subsets for the full-batch first-order check."""
    rng = np.random.default_rng(seed)
    idx = rng.permutation(run.train.n)[:2 * n_rows]
    return run.train.subset(np.sort(idx[:n_rows])), run.unlearnable.subset(np.sort(idx[n_rows:]))


def partial_curve(run: PilRun, fractions, victim: vl.TrainHyper, selection_seed: int = 0):
    """Clean test accuracy of mix-trained and clean-only (resampled) victims per fraction."""
    rows = []
    for a in fractions:
        mixed, mask = mix(run.train, run.unlearnable, MixSpec(a, selection_seed))
        m_mix, _ = vl.train_mlp(mixed, victim)
        rows.append((a, "mixed", m_mix.accuracy(run.test)))
        if (~mask).any():
            sub = clean_subset(run.train, mask, resample_to=run.train.n, seed=selection_seed)
            m_cl, _ = vl.train_mlp(sub, victim)
            rows.append((a, "clean_only", m_cl.accuracy(run.test)))
        else:
            rows.append((a, "clean_only", float("nan")))
    return rows
