"""Command-line entry point: ``pil-unlearn <subcommand> [options]``.

Configuration comes from an optional INI file whose sections mirror the
modules (``[data]``, ``[surrogate]``, ``[pil]``, ``[victim]``, ``[mix]``,
``[output]``); command-line flags override file values.  Exit codes: 0 success,
1 domain error, 2 usage error.  Errors are reported as one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import analysis_metrics as am
from . import dataset_io as dio
from . import experiments as ex
from . import linear_core as lc
from . import pil_gen as pg
from . import victim_lab as vl
from .errors import PilError
from .seeding import stream_seed

PROBES = ("shortcut", "orthogonality", "intra-class", "fgsm", "theorem1")


class UsageError(Exception):
    pass


@dataclass
class DataSource:
    kind: str = "synthetic"
    train_paths: list[Path] = field(default_factory=list)
    test_paths: list[Path] = field(default_factory=list)
    synthetic: ex.SyntheticSpec = ex.DESK
    limit: int | None = None

    def load(self) -> tuple[dio.LabeledDataset, dio.LabeledDataset]:
        if self.kind == "synthetic":
            train, test = self.synthetic.make()
        elif self.kind == "cifar10":
            train = dio.load_cifar10_binary(self.train_paths)
            test = dio.load_cifar10_binary(self.test_paths)
        else:
            train = _concat([dio.load_dataset(p) for p in self.train_paths])
            test = _concat([dio.load_dataset(p) for p in self.test_paths])
        if self.limit:
            train = train.subset(np.arange(min(self.limit, train.n)))
        return train, test


def _concat(parts):
    first = parts[0]
    return dio.LabeledDataset(np.concatenate([p.pixels for p in parts]),
                              np.concatenate([p.labels for p in parts]), first.shape, first.k)


@dataclass
class ExperimentConfig:
    data: DataSource
    surrogate: lc.SgdHyper
    pil: pg.PilConfig
    victim: vl.TrainHyper
    mix_fractions: list[float]
    selection_mode: str
    out_dir: Path
    seed: int
    workers: int | None = None

    def validate(self) -> None:
        if self.data.kind not in ("synthetic", "cifar10", "pild"):
            raise UsageError(f"unknown data source {self.data.kind!r}")
        if self.data.kind != "synthetic":
            if not self.data.train_paths or not self.data.test_paths:
                raise UsageError("non-synthetic data needs train and test paths")
            for p in [*self.data.train_paths, *self.data.test_paths]:
                if not Path(p).is_file():
                    raise FileNotFoundError(f"data path does not exist: {p}")
        for a in self.mix_fractions:
            dio.MixSpec(a, selection_mode=self.selection_mode)


def _paths(value: str) -> list[Path]:
    return [Path(v.strip()) for v in value.split(",") if v.strip()]


def _floats(value: str, scale: float = 1.0) -> list[float]:
    return [float(v) * scale for v in value.split(",") if v.strip()]


def _fraction(value: str) -> float:
    if "/" in value:
        a, b = value.split("/")
        return float(a) / float(b)
    return float(value)


def build_config(args) -> ExperimentConfig:
    ini = configparser.ConfigParser()
    if args.config:
        if not Path(args.config).is_file():
            raise FileNotFoundError(f"config file does not exist: {args.config}")
        ini.read(args.config)

    def get(section, key, default, conv=str):
        override = getattr(args, f"{section}_{key}".replace("-", "_"), None)
        if override is not None:
            return override
        if ini.has_option(section, key):
            return conv(ini.get(section, key))
        return default

    seed = args.seed if args.seed is not None else ini.getint("run", "seed", fallback=0)
    syn = ex.SyntheticSpec(
        k=get("data", "k", ex.DESK.k, int),
        n_per_class=get("data", "n_per_class", ex.DESK.n_per_class, int),
        n_test_per_class=get("data", "n_test_per_class", ex.DESK.n_test_per_class, int),
        d=get("data", "d", ex.DESK.d, int),
        class_separation=get("data", "class_separation", ex.DESK.class_separation, float),
        noise_scale=get("data", "noise_scale", ex.DESK.noise_scale, float),
        seed=get("data", "synthetic_seed", ex.DESK.seed, int))
    data = DataSource(kind=get("data", "source", "synthetic"),
                      train_paths=get("data", "train", [], _paths),
                      test_paths=get("data", "test", [], _paths),
                      synthetic=syn, limit=get("data", "limit", None, int))
    surrogate = lc.SgdHyper(
        epochs=get("surrogate", "epochs", 30, int),
        learning_rate=get("surrogate", "learning_rate", 0.003, float),
        momentum=get("surrogate", "momentum", 0.9, float),
        weight_decay=get("surrogate", "weight_decay", 0.0, float),
        batch_size=get("surrogate", "batch_size", 128, int),
        schedule=get("surrogate", "schedule", "cosine"),
        seed=stream_seed(seed, "surrogate-init"))
    pil = pg.PilConfig(
        epsilon=get("pil", "epsilon", 8 / 255, _fraction),
        step=get("pil", "step", 8 / 2550, _fraction),
        lam=get("pil", "lambda", 0.9, float),
        steps=get("pil", "steps", 30, int),
        init_seed=stream_seed(seed, "delta-init"),
        pretrain_surrogate=get("pil", "pretrain", True, lambda v: v.lower() in ("1", "true", "yes", "on")))
    victim = vl.TrainHyper(
        epochs=get("victim", "epochs", 30, int),
        learning_rate=get("victim", "learning_rate", 0.1, float),
        momentum=get("victim", "momentum", 0.9, float),
        weight_decay=get("victim", "weight_decay", 5e-4, float),
        batch_size=get("victim", "batch_size", 128, int),
        schedule=get("victim", "schedule", "cosine"),
        hidden=get("victim", "hidden", 256, int),
        seed=stream_seed(seed, "victim-init"))
    cfg = ExperimentConfig(
        data=data, surrogate=surrogate, pil=pil, victim=victim,
        mix_fractions=get("mix", "alpha", [0.5], _floats),
        selection_mode=get("mix", "selection_mode", "random"),
        out_dir=Path(get("output", "dir", "pil_out")), seed=seed, workers=args.threads)
    cfg.validate()
    return cfg


# ------------------------------------------------------------ helpers

def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        wr.writerows(rows)


def _jsonable(obj):
    # strict JSON has no NaN or infinity; report them as null
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        return float(obj) if np.isfinite(obj) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _emit(obj) -> None:
    print(json.dumps(_jsonable(obj), sort_keys=True, allow_nan=False))


def _shuffle_seed(cfg, name):
    return stream_seed(cfg.seed, f"shuffle-{name}")


def _surrogate(cfg, train, weights_path=None):
    if weights_path:
        w = lc.load_weights(weights_path)
        if w.d != train.d or w.k != train.k:
            raise dio.ShapeError(f"weights {w.w.shape} do not match data (d={train.d}, k={train.k})")
        return w
    return pg.surrogate_for(train, cfg.pil, cfg.surrogate)[0]


def _pil_run(cfg, args, train, test) -> ex.PilRun:
    """Load a previous ``generate`` output if given, else generate afresh."""
    if getattr(args, "perturbations", None):
        perts = dio.load_perturbations(args.perturbations)
        if perts.n != train.n or perts.d != train.d:
            raise dio.ShapeError("perturbation file does not match the training data")
        du = dio.apply_perturbations(train, perts, "subtract", clamp=True)
        return ex.PilRun(train, test, None, perts, du, None)
    w = _surrogate(cfg, train, getattr(args, "weights", None))
    perts, du, rep = pg.generate_unlearnable(train, w, cfg.pil, cfg.workers)
    return ex.PilRun(train, test, w, perts, du, rep)


# ------------------------------------------------------------ commands

def cmd_train_surrogate(cfg: ExperimentConfig, args) -> dict:
    train, test = cfg.data.load()
    w, trace = lc.train_sgd(train, cfg.surrogate)
    lc.save_weights(w, cfg.out_dir / "surrogate.pild", cfg.surrogate.seed)
    _write_csv(cfg.out_dir / "surrogate_trace.csv", ("epoch", "learning_rate", "loss"),
               [(e, f"{lc.lr_at(cfg.surrogate, e):.8g}", f"{l:.8g}") for e, l in enumerate(trace)])
    return {"weights": str(cfg.out_dir / "surrogate.pild"),
            "train_acc": lc.accuracy(w, train), "test_acc": lc.accuracy(w, test)}


def cmd_generate(cfg: ExperimentConfig, args) -> dict:
    train, _ = cfg.data.load()
    w = _surrogate(cfg, train, args.weights)
    perts, du, rep = pg.generate_unlearnable(train, w, cfg.pil, cfg.workers)
    dio.save_perturbations(perts, cfg.out_dir / "perturbations.pild", train.shape, train.k)
    dio.save_dataset(du, cfg.out_dir / "unlearnable.pild", seed=cfg.pil.init_seed)
    (cfg.out_dir / "generation_report.json").write_text(rep.to_json() + "\n")
    return json.loads(rep.to_json())


def cmd_evaluate(cfg: ExperimentConfig, args) -> dict:
    train, test = cfg.data.load()
    if args.unlearnable:
        du = dio.load_dataset(args.unlearnable)
        if du.pixels.shape != train.pixels.shape:
            raise dio.ShapeError("unlearnable file does not match the training data")
        run = ex.PilRun(train, test, None, None, du, None)
    else:
        run = _pil_run(cfg, args, train, test)
    sel = stream_seed(cfg.seed, "mix-selection")
    rows = ex.partial_curve(run, cfg.mix_fractions, cfg.victim, sel)
    _write_csv(cfg.out_dir / "evaluate.csv", ("mix_alpha", "arm", "clean_test_acc"),
               [(f"{a:g}", arm, f"{acc:.6f}") for a, arm, acc in rows])
    return {"rows": [{"mix_alpha": a, "arm": arm, "clean_test_acc": acc} for a, arm, acc in rows]}


def cmd_probe(cfg: ExperimentConfig, args) -> dict:
    train, test = cfg.data.load()
    run = _pil_run(cfg, args, train, test)
    which = args.which
    sel = stream_seed(cfg.seed, "mix-selection")
    frac = cfg.mix_fractions[0]
    if which == "shortcut":
        seeds = {"probe": stream_seed(cfg.seed, "probe-init"),
                 "shuffle_train": _shuffle_seed(cfg, "train"),
                 "shuffle_test": _shuffle_seed(cfg, "test")}
        rep = am.shortcut_probe(run.unlearnable, train, run.perts, test, args.probe_kind,
                                seeds, args.sign)
        (cfg.out_dir / "probe_shortcut.json").write_text(rep.to_json() + "\n")
        return json.loads(rep.to_json())
    if which == "orthogonality":
        means, _, _ = ex.orthogonality_run(run, frac, cfg.victim, args.mode, sel)
        _write_csv(cfg.out_dir / "probe_orthogonality.csv", ("epoch", "cosine"),
                   [(e, f"{c:.6f}") for e, c in means.items()])
        return {"epochs": means}
    if which == "intra-class":
        pil_res, clean_res = ex.intra_class_comparison(run, cfg.victim, args.cap,
                                                       stream_seed(cfg.seed, "intra-class"))
        _write_csv(cfg.out_dir / "probe_intra_class.csv", ("class", "Clean", "PIL"),
                   [(c, f"{a:.6f}", f"{b:.6f}") for c, (a, b)
                    in enumerate(zip(clean_res.per_class, pil_res.per_class))])
        return {"clean": clean_res.per_class.tolist(), "pil": pil_res.per_class.tolist(),
                "warnings": clean_res.warnings + pil_res.warnings}
    if which == "fgsm":
        steps = [s / 255 for s in args.steps]
        cmp_ = ex.fgsm_comparison(run, frac, cfg.victim, steps, sel)
        rows = []
        for arm, curve in (("perturbed", cmp_.perturbed), ("clean", cmp_.control)):
            rows += [(f"{r.step * 255:g}/255", arm, f"{r.accuracy:.6f}", f"{r.drop:.6f}") for r in curve]
        _write_csv(cfg.out_dir / "probe_fgsm.csv", ("fgsm_step", "arm", "accuracy", "drop"), rows)
        return {"extra_drop": [cmp_.extra_drop(i) for i in range(len(steps))]}
    # theorem1
    clean, pert = ex.theorem1_sets(run, args.rows, stream_seed(cfg.seed, "theorem1"))
    model = vl.MlpModel.init(train.d, args.hidden, train.k, cfg.victim.seed)
    recs = vl.theorem1_check(model, clean, pert, args.alpha, args.eta, args.t1_steps)
    _write_csv(cfg.out_dir / "probe_theorem1.csv",
               ("step", "alpha", "eta", "dot_cu", "dot_cc", "predicted", "measured", "rel_error"),
               [(r.step, r.alpha, r.eta, repr(r.dot_cu), repr(r.dot_cc), repr(r.predicted),
                 repr(r.measured), f"{r.rel_error:.6g}") for r in recs])
    return {"records": [r.__dict__ for r in recs]}


def cmd_metrics(cfg: ExperimentConfig, args) -> dict:
    train, _ = cfg.data.load()
    if args.candidate:
        cand = dio.load_dataset(args.candidate)
    else:
        cand = _pil_run(cfg, args, train, train).unlearnable
    p, s = am.psnr(train, cand), am.ssim(train, cand, window=args.window)
    text = am.metrics_csv([(args.method, "PSNR", p), (args.method, "SSIM", s)])
    (cfg.out_dir / "metrics.csv").write_text(text)
    out = {"psnr_db": p.mean, "ssim": s.mean, "n_images": p.n_images, "n_infinite": p.n_infinite}
    if p.n_infinite:
        out["note"] = f"{p.n_infinite} identical image(s) have infinite PSNR and are excluded from the mean"
    return out


def cmd_sweep_lambda(cfg: ExperimentConfig, args) -> dict:
    train, test = cfg.data.load()
    rows = am.lambda_sweep(train, test, cfg.surrogate, cfg.pil, args.lambdas, cfg.victim, cfg.workers)
    _write_csv(cfg.out_dir / "sweep_lambda.csv",
               ("lambda", "victim_clean_test_acc", "shortcut_probe_acc", "mean_final_loss"),
               [(f"{r.lam:g}", f"{r.victim_test_acc:.6f}", f"{r.shortcut_probe_acc:.6f}",
                 f"{r.mean_final_loss:.6f}") for r in rows])
    return {"rows": [r.__dict__ for r in rows]}


COMMANDS = {
    "train-surrogate": cmd_train_surrogate,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
    "probe": cmd_probe,
    "metrics": cmd_metrics,
    "sweep-lambda": cmd_sweep_lambda,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _csv_floats(text):
    try:
        return _floats(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def make_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    g = common.add_argument_group("common")
    g.add_argument("--config", help="INI experiment manifest")
    g.add_argument("--seed", type=int, help="global seed (default 0)")
    g.add_argument("--out", dest="output_dir", type=Path, help="output directory")
    g.add_argument("--threads", type=int, help="worker count (default: PIL_THREADS or CPU count)")
    g.add_argument("--data-source", dest="data_source", choices=("synthetic", "cifar10", "pild"))
    g.add_argument("--train", dest="data_train", type=_paths, help="comma-separated train files")
    g.add_argument("--test", dest="data_test", type=_paths, help="comma-separated test files")
    g.add_argument("--limit", dest="data_limit", type=int, help="use only the first N training rows")
    g.add_argument("--surrogate-epochs", dest="surrogate_epochs", type=int)
    g.add_argument("--surrogate-lr", dest="surrogate_learning_rate", type=float)
    g.add_argument("--batch-size", dest="surrogate_batch_size", type=int)
    g.add_argument("--epsilon", dest="pil_epsilon", type=_fraction)
    g.add_argument("--step", dest="pil_step", type=_fraction)
    g.add_argument("--lambda", dest="pil_lambda", type=float)
    g.add_argument("--steps", dest="pil_steps", type=int)
    g.add_argument("--no-pretrain", dest="pil_pretrain", action="store_const", const=False)
    g.add_argument("--victim-epochs", dest="victim_epochs", type=int)
    g.add_argument("--victim-lr", dest="victim_learning_rate", type=float)
    g.add_argument("--hidden", dest="victim_hidden", type=int)
    g.add_argument("--mix-alpha", dest="mix_alpha", type=_csv_floats,
                   help="comma-separated perturbed fractions")
    g.add_argument("--selection-mode", dest="mix_selection_mode",
                   choices=("prefix", "random", "per-class"))
    g.add_argument("--weights", help="surrogate weights file (skip surrogate training)")
    g.add_argument("--perturbations", help="perturbation file from a previous generate run")

    p = _Parser(prog="pil-unlearn", description="Unlearnable datasets from a linear surrogate.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("train-surrogate", parents=[common], help="train the linear surrogate")
    sub.add_parser("generate", parents=[common], help="generate perturbations and the unlearnable set")
    ev = sub.add_parser("evaluate", parents=[common], help="train victims, report clean test accuracy")
    ev.add_argument("--unlearnable", help="unlearnable dataset file")
    pr = sub.add_parser("probe", parents=[common], help="run one diagnostic")
    pr.add_argument("which", choices=PROBES, metavar="{" + ",".join(PROBES) + "}")
    pr.add_argument("--probe-kind", choices=("linear", "mlp"), default="linear")
    pr.add_argument("--sign", choices=("subtract", "add"), default="subtract")
    pr.add_argument("--mode", choices=("split", "paired"), default="split")
    pr.add_argument("--cap", type=int, default=64)
    pr.add_argument("--fgsm-steps", dest="steps", type=_csv_floats, default=[0, 1, 2, 4, 8],
                    help="FGSM steps in 1/255 units")
    pr.add_argument("--alpha", type=float, default=0.5)
    pr.add_argument("--eta", type=float, default=1e-4)
    pr.add_argument("--t1-steps", type=int, default=1)
    pr.add_argument("--rows", type=int, default=400)
    pr.add_argument("--toy-hidden", dest="hidden", type=int, default=32)
    me = sub.add_parser("metrics", parents=[common], help="PSNR / SSIM table")
    me.add_argument("--candidate", help="perturbed dataset file (default: generate)")
    me.add_argument("--method", default="PIL")
    me.add_argument("--window", type=int, default=11)
    sw = sub.add_parser("sweep-lambda", parents=[common], help="victim accuracy per lambda")
    sw.add_argument("--lambdas", type=_csv_floats, default=[0.0, 0.3, 0.5, 0.7, 0.9, 1.0])
    return p


def _fix_probe_steps(argv: list[str]) -> list[str]:
    # `probe fgsm --steps 0,1,2` means FGSM steps, not PIL optimisation steps
    if len(argv) > 1 and argv[0] == "probe" and "fgsm" in argv:
        return ["--fgsm-steps" if a == "--steps" else a for a in argv]
    return argv


def main(argv: list[str] | None = None) -> int:
    argv = _fix_probe_steps(list(sys.argv[1:] if argv is None else argv))
    try:
        args = make_parser().parse_args(argv)
        cfg = build_config(args)
        cfg.out_dir.mkdir(parents=True, exist_ok=True)
        result = COMMANDS[args.command](cfg, args)
    except UsageError as exc:
        print(json.dumps({"error": "usage", "message": str(exc),
                          "valid_probes": list(PROBES)}), file=sys.stderr)
        return 2
    except (PilError, OSError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    _emit(result)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
