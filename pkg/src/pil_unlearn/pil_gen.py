"""Perturbation optimisation against a frozen linear surrogate.

Each perturbation minimises

    lam * CE(softmax(delta @ w), y) + (1 - lam) * KL(softmax((x - delta) @ w) || uniform)

by signed-gradient steps clipped to the L-infinity ball of radius epsilon.  The
unlearnable image is ``x - delta``.
"""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from . import linear_core as lc
from .dataset_io import LabeledDataset, PerturbationSet, apply_perturbations, f32_budget
from .errors import ArgumentError, NumericError, ShapeError

CHUNK_ROWS = 512


@dataclass(frozen=True)
class PilConfig:
    epsilon: float = 8 / 255
    step: float = 8 / 2550
    lam: float = 0.9
    steps: int = 30
    init_seed: int = 0
    pretrain_surrogate: bool = True

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ArgumentError(f"lambda must lie in [0, 1], got {self.lam}")
        if not self.epsilon > 0:
            raise ArgumentError("epsilon must be > 0")
        if not self.step > 0:
            raise ArgumentError("step must be > 0")
        if self.steps < 1:
            raise ArgumentError("steps must be >= 1")


@dataclass
class GenerationReport:
    n: int
    d: int
    k: int
    epsilon: float
    lam: float
    steps: int
    wall_seconds: float
    mean_final_loss: float
    shortcut_probe_acc: float
    workers: int = 1

    def to_json(self) -> str:
        out = asdict(self)
        out["lambda"] = out.pop("lam")
        return json.dumps(out, indent=2, sort_keys=True)


def init_perturbations(n: int, d: int, epsilon: float, seed: int) -> PerturbationSet:
    """Uniform(-epsilon, epsilon) entries, one seeded stream for all samples."""
    if n < 1 or d < 1:
        raise ArgumentError("n and d must be >= 1")
    if not epsilon > 0:
        raise ArgumentError(f"epsilon must be > 0, got {epsilon}")
    b = f32_budget(epsilon)
    rng = np.random.default_rng(seed)
    out = np.empty((n, d), dtype=np.float32)
    # row blocks keep peak memory bounded on CIFAR-sized sets
    for s in range(0, n, 4096):
        blk = rng.uniform(-epsilon, epsilon, size=(min(4096, n - s), d)).astype(np.float32)
        np.clip(blk, -b, b, out=out[s:s + blk.shape[0]])
    return PerturbationSet(out, b, seed)


def _check(delta, x, w):
    W = lc._w(w)
    if np.shape(delta) != np.shape(x) or np.shape(x)[-1] != W.shape[0]:
        raise ShapeError(f"delta {np.shape(delta)}, x {np.shape(x)} and w {W.shape} disagree")
    return W


def _loss_and_dlogits(delta, x, y, W, lam, need_grad=True):
    p_sc = lc.softmax(delta @ W)
    p_ob = lc.softmax((x - delta) @ W)
    loss = lam * lc.cross_entropy(p_sc, y) + (1 - lam) * lc.kl_to_uniform(p_ob)
    if not need_grad:
        return loss, None
    # the obfuscation branch sees x - delta, so its inner derivative is -1
    dz = lam * lc.dlogits_ce(p_sc, y) - (1 - lam) * lc.dlogits_kl(p_ob)
    return loss, dz @ W.T


def total_loss(delta, x, y, w, lam: float):
    W = _check(delta, x, w)
    return _loss_and_dlogits(np.asarray(delta), np.asarray(x), y, W, lam, need_grad=False)[0]


def total_loss_grad(delta, x, y, w, lam: float) -> np.ndarray:
    W = _check(delta, x, w)
    return _loss_and_dlogits(np.asarray(delta), np.asarray(x), y, W, lam)[1]


def _optimize_rows(X, Y, W, cfg: PilConfig, D0, row_offset: int = 0):
    """Run ``cfg.steps`` clipped signed steps on a block of rows.

    Returns ``(delta, losses)`` with ``losses[t]`` the per-row loss after step t+1.
    """
    dt = X.dtype
    W = W.astype(dt, copy=False)
    lam = dt.type(cfg.lam)
    alpha = dt.type(cfg.step)
    b = dt.type(f32_budget(cfg.epsilon))
    D = np.array(D0, dtype=dt)
    losses = np.empty((cfg.steps, X.shape[0]), dtype=np.float64)
    for t in range(cfg.steps + 1):
        loss, g = _loss_and_dlogits(D, X, Y, W, lam, need_grad=t < cfg.steps)
        if t:
            if not np.all(np.isfinite(loss)):
                bad = row_offset + int(np.flatnonzero(~np.isfinite(loss))[0])
                raise NumericError(f"non-finite loss at step {t} (sample {bad})")
            losses[t - 1] = loss
        if g is None:
            break
        D -= alpha * np.sign(g)
        np.clip(D, -b, b, out=D)
    return D, losses


def optimize_perturbation(x, y, w, cfg: PilConfig, delta0):
    """Optimise one perturbation; returns ``(delta*, per-step loss trace)``."""
    W = _check(delta0, x, w)
    x = np.asarray(x)
    delta0 = np.asarray(delta0)
    if x.ndim != 1:
        raise ShapeError("optimize_perturbation works on a single sample; use generate_unlearnable")
    if float(np.abs(delta0).max(initial=0.0)) > f32_budget(cfg.epsilon):
        raise ArgumentError("initial perturbation exceeds the budget")
    dt = np.float64 if x.dtype == np.float64 else np.float32
    D, losses = _optimize_rows(x[None].astype(dt), np.array([y]), W, cfg, delta0[None])
    return D[0], losses[:, 0]


def worker_count(workers: int | None = None) -> int:
    if workers is None:
        env = os.environ.get("PIL_THREADS")
        workers = int(env) if env else (os.cpu_count() or 1)
    return max(1, int(workers))


def optimize_all(X: np.ndarray, labels: np.ndarray, w, cfg: PilConfig, D0: np.ndarray,
                 workers: int | None = None, chunk_rows: int = CHUNK_ROWS):
    """Optimise every row; returns ``(deltas, final per-row loss)``.

    Rows are cut into fixed ``chunk_rows`` blocks independent of the worker
    count and BLAS runs single-threaded inside each task, so the output is
    bit-identical for any ``workers``.
    """
    W = lc._w(w).astype(np.float32)
    X = np.ascontiguousarray(X, dtype=np.float32)
    n = X.shape[0]
    out = np.empty_like(X)
    final = np.empty(n, dtype=np.float64)
    starts = range(0, n, chunk_rows)

    def run(s):
        e = min(s + chunk_rows, n)
        D, losses = _optimize_rows(X[s:e], labels[s:e], W, cfg, D0[s:e], row_offset=s)
        out[s:e] = D
        final[s:e] = losses[-1]

    workers = worker_count(workers)
    with threadpool_limits(limits=1):
        if workers == 1:
            for s in starts:
                run(s)
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                for fut in [pool.submit(run, s) for s in starts]:
                    fut.result()
    return out, final


PROBE_HYPER = lc.SgdHyper(epochs=10, learning_rate=0.01, momentum=0.9, batch_size=128,
                          schedule="cosine", seed=0)


def shortcut_probe_accuracy(perts: PerturbationSet, labels: np.ndarray, k: int,
                            hyper: lc.SgdHyper = PROBE_HYPER) -> float:
    """Train accuracy of a fresh linear model fit on ``(-delta, y)`` pairs.

    Inputs are divided by epsilon; argmax of a bias-free linear model is
    invariant to that scaling, it only conditions the optimisation.
    """
    x = -perts.deltas / np.float32(perts.epsilon)
    w, _ = lc.fit_linear(x, labels, k, hyper)
    return float(np.mean(lc.predict(w, x) == labels))


def surrogate_for(ds: LabeledDataset, cfg: PilConfig, hyper: lc.SgdHyper):
    """Pretrained surrogate, or its random initialisation when pretraining is off."""
    if cfg.pretrain_surrogate:
        return lc.train_sgd(ds, hyper)
    return lc.init_weights(ds.d, ds.k, hyper.seed), []


def generate_unlearnable(ds: LabeledDataset, w, cfg: PilConfig | None = None,
                         workers: int | None = None, probe: bool = True):
    """Optimise all perturbations and build the clamped ``x - delta`` dataset.

    Returns ``(PerturbationSet, unlearnable LabeledDataset, GenerationReport)``.
    """
    cfg = cfg or PilConfig()
    W = lc._w(w)
    if W.shape != (ds.d, ds.k):
        raise ShapeError(f"surrogate {W.shape} does not match dataset (d={ds.d}, k={ds.k})")
    t0 = time.perf_counter()
    init = init_perturbations(ds.n, ds.d, cfg.epsilon, cfg.init_seed)
    deltas, final = optimize_all(ds.pixels, ds.labels, W, cfg, init.deltas, workers)
    perts = PerturbationSet(deltas, cfg.epsilon, cfg.init_seed)
    unlearnable = apply_perturbations(ds, perts, "subtract", clamp=True)
    wall = time.perf_counter() - t0
    acc = shortcut_probe_accuracy(perts, ds.labels, ds.k) if probe else float("nan")
    report = GenerationReport(n=ds.n, d=ds.d, k=ds.k, epsilon=perts.epsilon, lam=cfg.lam,
                              steps=cfg.steps, wall_seconds=wall,
                              mean_final_loss=float(final.mean()),
                              shortcut_probe_acc=acc, workers=worker_count(workers))
    return perts, unlearnable, report
