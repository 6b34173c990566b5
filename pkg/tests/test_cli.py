import csv
import hashlib
import json

import numpy as np
import pytest

from pil_unlearn import cli
from pil_unlearn import dataset_io as dio
from pil_unlearn import experiments as ex
from pil_unlearn import linear_core as lc
from pil_unlearn import victim_lab as vl
from pil_unlearn.seeding import stream, stream_seed

TINY = """\
[data]
n_per_class = 30
n_test_per_class = 10
d = 64
[surrogate]
epochs = 3
[pil]
steps = 4
[victim]
epochs = 2
hidden = 16
"""


@pytest.fixture
def cfg(tmp_path):
    p = tmp_path / "run.ini"
    p.write_text(TINY + f"[output]\ndir = {tmp_path / 'out'}\n")
    return p


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, (json.loads(out) if code == 0 else json.loads(err))


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_train_surrogate_deterministic(cfg, tmp_path, capsys):
    code, res = run(capsys, "train-surrogate", "--config", cfg, "--seed", 3)
    assert code == 0 and set(res) == {"weights", "train_acc", "test_acc"}
    first = _sha(tmp_path / "out" / "surrogate.pild")
    run(capsys, "train-surrogate", "--config", cfg, "--seed", 3)
    assert _sha(tmp_path / "out" / "surrogate.pild") == first
    run(capsys, "train-surrogate", "--config", cfg, "--seed", 4)
    assert _sha(tmp_path / "out" / "surrogate.pild") != first
    with open(tmp_path / "out" / "surrogate_trace.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["epoch", "learning_rate", "loss"] and len(rows) == 4


def test_default_settings():
    args = cli.make_parser().parse_args(["generate"])
    c = cli.build_config(args)
    assert (c.surrogate.learning_rate, c.surrogate.momentum, c.surrogate.epochs,
            c.surrogate.schedule) == (0.003, 0.9, 30, "cosine")
    assert (c.pil.epsilon, c.pil.step, c.pil.lam, c.pil.steps) == (8 / 255, 8 / 2550, 0.9, 30)
    assert c.victim.learning_rate == 0.1


def test_flags_override_file(cfg):
    args = cli.make_parser().parse_args(["generate", "--config", str(cfg), "--steps", "7",
                                         "--lambda", "0", "--no-pretrain", "--epsilon", "4/255"])
    c = cli.build_config(args)
    assert c.pil.steps == 7 and c.pil.lam == 0.0 and not c.pil.pretrain_surrogate
    assert c.pil.epsilon == 4 / 255 and c.surrogate.epochs == 3


def test_named_seed_streams():
    names = ["surrogate-init", "delta-init", "victim-init", "shuffle-train"]
    seeds = [stream_seed(0, n) for n in names]
    assert len(set(seeds)) == 4 and stream_seed(0, "delta-init") == seeds[1]
    assert stream(1, "x").random() == stream(1, "x").random()
    args = cli.make_parser().parse_args(["generate", "--seed", "5"])
    c = cli.build_config(args)
    assert c.pil.init_seed == stream_seed(5, "delta-init")
    assert c.victim.seed == stream_seed(5, "victim-init")


def test_generate_outputs_round_trip(cfg, tmp_path, capsys):
    code, rep = run(capsys, "generate", "--config", cfg, "--lambda", "1")
    assert code == 0 and rep["lambda"] == 1.0 and rep["steps"] == 4
    out = tmp_path / "out"
    perts = dio.load_perturbations(out / "perturbations.pild")
    du = dio.load_dataset(out / "unlearnable.pild")
    assert perts.n == du.n == 300 and float(np.abs(perts.deltas).max()) <= 8 / 255
    assert json.loads((out / "generation_report.json").read_text())["n"] == 300


def test_missing_path_fails_before_compute(tmp_path, capsys):
    out = tmp_path / "never"
    code, err = run(capsys, "train-surrogate", "--data-source", "cifar10",
                    "--train", tmp_path / "missing.bin", "--test", tmp_path / "missing.bin",
                    "--out", out)
    assert code == 1 and "missing.bin" in err["message"]
    assert not out.exists()


def test_unknown_probe_is_usage_error(capsys):
    code, err = run(capsys, "probe", "bogus")
    assert code == 2 and err["valid_probes"] == list(cli.PROBES)


def test_bad_value_is_domain_error(cfg, capsys):
    code, err = run(capsys, "generate", "--config", cfg, "--lambda", "2")
    assert code == 1 and err["error"] == "ArgumentError"


def test_evaluate_arms(cfg, tmp_path, capsys):
    code, res = run(capsys, "evaluate", "--config", cfg, "--mix-alpha", "0,1")
    assert code == 0
    arms = {(r["mix_alpha"], r["arm"]): r["clean_test_acc"] for r in res["rows"]}
    assert set(arms) == {(0.0, "mixed"), (0.0, "clean_only"), (1.0, "mixed"), (1.0, "clean_only")}
    assert arms[(1.0, "clean_only")] is None
    # the alpha = 0 arm is the clean baseline
    c = cli.build_config(cli.make_parser().parse_args(["evaluate", "--config", str(cfg)]))
    train, test = c.data.load()
    model, _ = vl.train_mlp(train, c.victim)
    assert arms[(0.0, "mixed")] == model.accuracy(test)
    with open(tmp_path / "out" / "evaluate.csv") as fh:
        assert next(csv.reader(fh)) == ["mix_alpha", "arm", "clean_test_acc"]


def test_probe_theorem1_rows(cfg, tmp_path, capsys):
    code, res = run(capsys, "probe", "theorem1", "--config", cfg, "--alpha", "0.5",
                    "--eta", "1e-4", "--rows", "50")
    assert code == 0 and res["records"][0]["alpha"] == 0.5
    with open(tmp_path / "out" / "probe_theorem1.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert float(rows[0]["eta"]) == 1e-4 and float(rows[0]["rel_error"]) < 0.05


def test_probe_fgsm_step_grid(cfg, tmp_path, capsys):
    code, res = run(capsys, "probe", "fgsm", "--config", cfg, "--steps", "0,1,2,4,8")
    assert code == 0 and len(res["extra_drop"]) == 5 and res["extra_drop"][0] == 0
    with open(tmp_path / "out" / "probe_fgsm.csv") as fh:
        steps = [r["fgsm_step"] for r in csv.DictReader(fh)]
    assert steps[:5] == ["0/255", "1/255", "2/255", "4/255", "8/255"]


@pytest.mark.parametrize("which", ["shortcut", "orthogonality", "intra-class"])
def test_probe_dispatch(cfg, capsys, which):
    code, res = run(capsys, "probe", which, "--config", cfg)
    assert code == 0 and res


def test_metrics_identical_input_note(tmp_path, capsys):
    train, test = ex.SyntheticSpec(k=2, n_per_class=5, n_test_per_class=2, d=256).make()
    dio.save_dataset(train, tmp_path / "train.pild")
    dio.save_dataset(test, tmp_path / "test.pild")
    code, res = run(capsys, "metrics", "--data-source", "pild", "--train", tmp_path / "train.pild",
                    "--test", tmp_path / "test.pild", "--candidate", tmp_path / "train.pild",
                    "--out", tmp_path / "m")
    assert code == 0 and res["n_infinite"] == 10 and "infinite" in res["note"]
    header = (tmp_path / "m" / "metrics.csv").read_text().splitlines()[0]
    assert header == "method,metric,value,n_images,n_infinite"


def test_pil_run_reuses_saved_perturbations(cfg, tmp_path, capsys):
    run(capsys, "generate", "--config", cfg)
    code, res = run(capsys, "probe", "shortcut", "--config", cfg,
                    "--perturbations", tmp_path / "out" / "perturbations.pild")
    assert code == 0 and 0 <= res["shuffled_test_acc"] <= 1


def test_sweep_lambda(cfg, tmp_path, capsys):
    code, res = run(capsys, "sweep-lambda", "--config", cfg, "--lambdas", "0,0.9")
    assert code == 0 and [r["lam"] for r in res["rows"]] == [0.0, 0.9]
    assert (tmp_path / "out" / "sweep_lambda.csv").exists()


def test_weights_flag(cfg, tmp_path, capsys):
    run(capsys, "train-surrogate", "--config", cfg)
    w = lc.load_weights(tmp_path / "out" / "surrogate.pild")
    assert w.d == 64
    code, _ = run(capsys, "generate", "--config", cfg, "--weights", tmp_path / "out" / "surrogate.pild")
    assert code == 0
