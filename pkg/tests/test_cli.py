import json
import subprocess
import sys

import numpy as np
import pytest

from cfrlearn.classifier import write_embeddings
from cfrlearn.cli import build_parser, main


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture
def dataset(tmp_path):
    out = tmp_path / "train.csv"
    assert run("gen", "--n", 300, "--p", 10, "--r-bias", 1.7, "--sampler", "conditional", "--seed", 3,
               "--out", out) == 0
    return out


def write_config(tmp_path, obj):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(obj))
    return path


# -- gen --------------------------------------------------------------------------------

def test_gen_writes_data_and_meta(dataset, capsys):
    meta = json.loads(dataset.with_suffix(".meta.json").read_text())
    assert meta["n"] == 300 and meta["r_bias"] == 1.7 and meta["sampler"] == "conditional"
    lines = dataset.read_text().splitlines()
    assert lines[0] == ",".join([f"x{j}" for j in range(1, 11)] + ["y"])
    assert len(lines) == 301


def test_gen_reports_acceptance(tmp_path, capsys):
    run("gen", "--n", 50, "--p", 6, "--r-bias", 1.5, "--out", tmp_path / "d.csv")
    out = capsys.readouterr().out
    assert out.startswith("accepted 50 / candidates drawn ")


def test_gen_is_byte_identical_on_rerun(tmp_path, dataset):
    again = tmp_path / "again.csv"
    run("gen", "--n", 300, "--p", 10, "--r-bias", 1.7, "--sampler", "conditional", "--seed", 3, "--out", again)
    assert again.read_bytes() == dataset.read_bytes()


def test_gen_rejects_bad_bias_rate(tmp_path, capsys):
    assert run("gen", "--r-bias", 0.5, "--out", tmp_path / "d.csv") == 2
    assert "r" in capsys.readouterr().err


def test_gen_stall_exit_code(tmp_path):
    cfg = write_config(tmp_path, {"environment": {"max_candidates": 50}})
    code = run("gen", "--config", cfg, "--n", 500, "--p", 40, "--r-bias", 3.0, "--out", tmp_path / "d.csv")
    assert code == 3


# -- train / eval -----------------------------------------------------------------------

@pytest.mark.parametrize("method", ["ols", "ridge", "lasso", "dwr", "cfr"])
def test_train_then_eval(tmp_path, dataset, method):
    model = tmp_path / f"{method}.json"
    assert run("train", "--method", method, "--data", dataset, "--out", model) == 0
    saved = json.loads(model.read_text())
    assert saved["method"] == ("dwr-like" if method == "dwr" else method)
    assert (saved["w"] is not None) == (method == "cfr")
    metrics_path = tmp_path / "m.json"
    assert run("eval", "--model", model, "--data", dataset, "--out", metrics_path) == 0
    result = json.loads(metrics_path.read_text())
    assert result["rmse"] > 0 and result["beta_v_error"] >= 0 and result["accuracy"] is None


def test_train_is_byte_identical_on_rerun(tmp_path, dataset):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    run("train", "--method", "cfr", "--data", dataset, "--out", a, "--seed", 5)
    run("train", "--method", "cfr", "--data", dataset, "--out", b, "--seed", 5)
    assert a.read_bytes() == b.read_bytes()


def test_eval_predict_modes_differ(tmp_path, dataset):
    model = tmp_path / "cfr.json"
    run("train", "--method", "cfr", "--data", dataset, "--out", model)
    out = {}
    for mode in ("coefficients", "rectified"):
        run("eval", "--model", model, "--data", dataset, "--predict-mode", mode, "--out", tmp_path / f"{mode}.json")
        out[mode] = json.loads((tmp_path / f"{mode}.json").read_text())["rmse"]
    assert out["coefficients"] != out["rectified"]


def test_unknown_method_lists_valid_tags(tmp_path, dataset, capsys):
    assert run("train", "--method", "svm", "--data", dataset, "--out", tmp_path / "m.json") == 2
    assert "cfr" in capsys.readouterr().err


def test_divergence_exit_code(tmp_path, dataset):
    cfg = write_config(tmp_path, {"train": {"lr_beta": 1.0, "batch_size": None}})
    assert run("train", "--config", cfg, "--method", "cfr", "--data", dataset, "--out", tmp_path / "m.json") == 4


def test_dimension_mismatch_exit_code(tmp_path, dataset):
    model = tmp_path / "ols.json"
    run("train", "--method", "ols", "--data", dataset, "--out", model)
    other = tmp_path / "small.csv"
    run("gen", "--n", 30, "--p", 6, "--out", other)
    assert run("eval", "--model", model, "--data", other, "--out", tmp_path / "m.json") == 5


def test_malformed_data_exit_code(tmp_path, dataset, capsys):
    lines = dataset.read_text().splitlines()
    lines[4] = lines[4].replace(",", ",x", 1)
    dataset.write_text("\n".join(lines) + "\n")
    assert run("train", "--method", "ols", "--data", dataset, "--out", tmp_path / "m.json") == 5
    assert "line 5" in capsys.readouterr().err


def test_classifier_train_and_eval(tmp_path):
    rng = np.random.default_rng(0)
    labels = np.arange(90) % 3
    F = np.eye(3)[labels] * 4 + 0.3 * rng.normal(size=(90, 3))
    F = np.column_stack([F, rng.normal(size=90)])
    emb = tmp_path / "emb.csv"
    write_embeddings(emb, F, labels)
    cfg = write_config(tmp_path, {"classifier": {"epochs": 30, "lr_decay_epochs": [20]}})
    for method in ("cfr-clf", "linear-clf"):
        model = tmp_path / f"{method}.json"
        assert run("train", "--config", cfg, "--method", method, "--data", emb, "--out", model) == 0
        assert run("eval", "--model", model, "--data", emb, "--out", tmp_path / "acc.json") == 0
        assert json.loads((tmp_path / "acc.json").read_text())["accuracy"] >= 0.98


# -- config ---------------------------------------------------------------------------

def test_unknown_config_key_rejected(tmp_path, capsys):
    cfg = write_config(tmp_path, {"train": {"learning_rate": 0.1}})
    assert run("defaults", "--config", cfg) == 2
    assert "learning_rate" in capsys.readouterr().err
    cfg = write_config(tmp_path, {"trian": {}})
    assert run("defaults", "--config", cfg) == 2


def test_defaults_prints_every_section(capsys):
    assert run("defaults") == 0
    cfg = json.loads(capsys.readouterr().out)
    assert set(cfg) == {"environment", "train", "classifier", "scenario"}
    assert cfg["train"]["lr_w"] == 0.005 and cfg["train"]["lr_beta"] == 0.001
    assert cfg["classifier"]["lr_decay_epochs"] == [150, 160]
    assert len(cfg["scenario"]["test_grid"]) == 12


def test_every_subcommand_has_help():
    parser = build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    for name, p in sub.choices.items():
        text = p.format_help()
        for flag in ("--config", "--seed", "--threads", "--out"):
            assert flag in text, (name, flag)
    result = subprocess.run([sys.executable, "-m", "cfrlearn.cli", "sweep", "--help"],
                            capture_output=True, text=True)
    assert result.returncode == 0 and "--scenario" in result.stdout


# -- sweep / report ---------------------------------------------------------------------

def sweep_config(tmp_path):
    return write_config(tmp_path, {
        "environment": {"n": 200, "p": 6},
        "scenario": {"methods": ["ols", {"tag": "cfr", "hyper": {"epochs": 3}}], "test_grid": [-1.5, 1.5, 2.0]},
    })


def test_sweep_and_report(tmp_path, capsys):
    cfg = sweep_config(tmp_path)
    out = tmp_path / "sweep"
    assert run("sweep", "--config", cfg, "--reps", 2, "--sampler", "conditional", "--out", out) == 0
    summary = capsys.readouterr().out
    assert "*" in summary and "cfr" in summary
    rep = tmp_path / "rep"
    assert run("report", "--results", out / "results.csv", "--out", rep) == 0
    assert json.loads((rep / "report.json").read_text()) == json.loads((out / "report.json").read_text())
    curves = (rep / "curves.csv").read_text().splitlines()
    assert curves[0] == "scenario,r_test,method,mean_rmse"
    assert len(curves) == 1 + 2 * 3
    assert (rep / "bars.csv").read_text().startswith("scenario,method,beta_v_error_mean,beta_v_error_var")


def test_sweep_is_deterministic_across_threads(tmp_path):
    cfg = sweep_config(tmp_path)
    for name, threads in (("a", 1), ("b", 1), ("c", 2)):
        run("sweep", "--config", cfg, "--reps", 2, "--sampler", "conditional", "--threads", threads,
            "--out", tmp_path / name)
    a = (tmp_path / "a" / "results.csv").read_bytes()
    assert a == (tmp_path / "b" / "results.csv").read_bytes()
    assert a == (tmp_path / "c" / "results.csv").read_bytes()


def test_report_malformed_csv(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("scenario,method\nx,ols\n")
    assert run("report", "--results", bad, "--out", tmp_path / "r") == 5
    assert "row 1" in capsys.readouterr().err


def test_bad_threads(capsys):
    assert run("defaults", "--threads", 0) == 2
