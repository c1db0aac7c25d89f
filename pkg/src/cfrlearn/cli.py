"""Command-line front end.

Exit codes: 0 success, 2 config/usage, 3 generation stall, 4 divergence,
5 data or dimension errors.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import classifier as clfmod
from . import harness, metrics
from .datagen import EnvironmentSpec, generate_environment, read_dataset, read_matrix_csv, write_dataset
from .errors import CfrError, ConfigError, DataError, DimensionError, ParseError
from .regressors import METHODS, TrainConfig, canonical_method, fit_method, load_model, save_model

log = logging.getLogger("cfrlearn")

CLASSIFIER_METHODS = ("cfr-clf", "linear-clf")
SECTIONS = ("environment", "train", "classifier", "scenario")
SCENARIO_KEYS = ("name", "methods", "test_grid", "train_reps", "test_reps_per_env", "base_seed")


# -- configuration --------------------------------------------------------------

def _field_defaults(cls) -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
        elif f.default_factory is not dataclasses.MISSING:
            out[f.name] = f.default_factory()
        else:
            out[f.name] = None
    return out


def defaults() -> dict:
    env = _field_defaults(EnvironmentSpec)
    env.update(n=2000, p=10, r_bias=1.7)
    clf = _field_defaults(clfmod.ClassifierTrainConfig)
    clf["lr_decay_epochs"] = list(clf["lr_decay_epochs"])
    return {
        "environment": env,
        "train": _field_defaults(TrainConfig),
        "classifier": clf,
        "scenario": {
            "name": "custom",
            "methods": list(METHODS),
            "test_grid": list(harness.DEFAULT_TEST_GRID),
            "train_reps": 50,
            "test_reps_per_env": 50,
            "base_seed": 47,
        },
    }


def _strict(section: str, given: dict, allowed) -> dict:
    if not isinstance(given, dict):
        raise ConfigError(f"config section {section!r} must be an object")
    unknown = sorted(set(given) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in {section!r}: {', '.join(unknown)}")
    return given


def load_config(path: Optional[str]) -> dict:
    """Defaults merged with a JSON file; unknown keys anywhere are rejected."""
    cfg = defaults()
    if not path:
        return cfg
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON (line {exc.lineno}): {exc.msg}") from None
    _strict("<root>", raw, SECTIONS)
    for section, values in raw.items():
        cfg[section].update(_strict(section, values, cfg[section].keys()))
    return cfg


def _env_spec(cfg: dict, **overrides) -> EnvironmentSpec:
    env = dict(cfg["environment"])
    env.update({k: v for k, v in overrides.items() if v is not None})
    return EnvironmentSpec(**env)


def _train_config(cfg: dict, seed: Optional[int]) -> TrainConfig:
    values = dict(cfg["train"])
    if seed is not None:
        values["seed"] = seed
    return TrainConfig(**values)


def _clf_config(cfg: dict, seed: Optional[int]) -> clfmod.ClassifierTrainConfig:
    values = dict(cfg["classifier"])
    if seed is not None:
        values["seed"] = seed
    return clfmod.ClassifierTrainConfig(**values)


def _methods_from(entries) -> tuple:
    out = []
    for e in entries:
        if isinstance(e, str):
            out.append(harness.MethodSpec.make(e))
        elif isinstance(e, dict):
            _strict("scenario.methods[]", e, ("tag", "hyper"))
            out.append(harness.MethodSpec.make(e["tag"], e.get("hyper")))
        else:
            raise ConfigError(f"bad method entry {e!r}")
    return tuple(out)


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, allow_nan=True) + "\n")


# -- commands ------------------------------------------------------------------------

def cmd_gen(args, cfg) -> int:
    spec = _env_spec(cfg, n=args.n, p=args.p, outcome_form=args.form, vb_size=args.vb_size,
                     noise_std=args.noise_std, sampler=args.sampler, seed=args.seed)
    if args.r_bias is not None:
        spec = spec.replace(r_bias=None if args.r_bias.lower() == "none" else float(args.r_bias))
    out = Path(args.out or "dataset.csv")
    meta = Path(args.meta) if args.meta else out.with_suffix(".meta.json")
    ds = generate_environment(spec)
    write_dataset(ds, out, meta)
    print(f"accepted {ds.n} / candidates drawn {ds.n_candidates}")
    print(f"wrote {out} and {meta}")
    return 0


def _meta_for(data: Path, explicit: Optional[str]) -> Optional[Path]:
    if explicit:
        return Path(explicit)
    guess = data.with_suffix(".meta.json")
    return guess if guess.exists() else None


def cmd_train(args, cfg) -> int:
    method = args.method.lower()
    data = Path(args.data)
    out = Path(args.out or "model.json")
    if method in CLASSIFIER_METHODS:
        F, labels = clfmod.read_embeddings(data)
        ccfg = _clf_config(cfg, args.seed)
        clf = clfmod.train_cfr_classifier(F, labels, ccfg, rectify=(method == "cfr-clf"))
        clfmod.save_classifier(clf, out)
        acc = metrics.accuracy(clfmod.predict_labels(F, clf), labels)
        print(f"final ce_loss {clf.history[-1][1]:.6g}  reconstruction_loss {clf.history[-1][0]:.6g}")
        print(f"training accuracy {acc:.4f}")
        print(f"wrote {out}")
        return 0
    try:
        method = canonical_method(method)
    except ConfigError:
        raise ConfigError(
            f"unknown method {args.method!r}; valid tags: {', '.join(METHODS + CLASSIFIER_METHODS)}"
        ) from None
    meta_path = _meta_for(data, args.meta)
    if meta_path is not None:
        ds = read_dataset(data, meta_path)
        X, Y = ds.X, ds.Y
    else:
        ds = None
        X, Y = read_matrix_csv(data, "x", "y")
    hyper = {}
    if method == "cfr":
        hyper = _train_config(cfg, args.seed).to_dict()
    seed = args.seed if args.seed is not None else cfg["train"]["seed"]
    model = fit_method(method, X, Y, hyper or None, rng=np.random.default_rng(seed))
    save_model(model, out)
    if method == "cfr":
        lr_, lcfr = model.history[-1]
        print(f"final L_r {lr_:.6g}  L_CFR {lcfr:.6g}  epochs {len(model.history)}")
    print(f"train rmse {metrics.rmse(model.predict(X), Y):.6g}")
    if ds is not None:
        print(f"beta_error {metrics.beta_error(model.beta, ds.beta):.6g}  "
              f"beta_v_error {metrics.beta_error(model.beta, ds.beta, ds.unstable_index):.6g}")
    print(f"wrote {out}")
    return 0


def cmd_eval(args, cfg) -> int:
    model_path = Path(args.model)
    try:
        raw = json.loads(model_path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid model JSON: {exc.msg}", line=exc.lineno) from None
    result = {"rmse": None, "beta_error": None, "beta_v_error": None, "accuracy": None}
    data = Path(args.data)
    if isinstance(raw, dict) and "z_weights" in raw:
        clf = clfmod.classifier_from_dict(raw)
        F, labels = clfmod.read_embeddings(data)
        if F.shape[1] != clf.p:
            raise DimensionError(f"classifier expects p={clf.p}, data has {F.shape[1]} features")
        result["accuracy"] = metrics.accuracy(clfmod.predict_labels(F, clf), labels)
    else:
        model = load_model(model_path)
        meta_path = _meta_for(data, args.meta)
        if meta_path is not None:
            ds = read_dataset(data, meta_path)
            X, Y = ds.X, ds.Y
        else:
            ds = None
            X, Y = read_matrix_csv(data, "x", "y")
        if X.shape[1] != model.p:
            raise DimensionError(f"model expects p={model.p}, data has {X.shape[1]} features")
        result["rmse"] = metrics.rmse(model.predict(X, args.predict_mode), Y)
        if ds is not None:
            result["beta_error"] = metrics.beta_error(model.beta, ds.beta)
            result["beta_v_error"] = metrics.beta_error(model.beta, ds.beta, ds.unstable_index)
    out = Path(args.out or "metrics.json")
    _write_json(out, result)
    print(json.dumps(result))
    return 0


def _scenarios_for(args, cfg) -> list:
    sc = cfg["scenario"]
    train_reps = args.reps if args.reps is not None else sc["train_reps"]
    test_reps = args.test_reps if args.test_reps is not None else (
        args.reps if args.reps is not None else sc["test_reps_per_env"])
    base_seed = args.seed if args.seed is not None else sc["base_seed"]
    methods = _methods_from(sc["methods"])
    if args.scenario:
        names = list(harness.TABLE1_GROUPS) if args.scenario == "table1" else [args.scenario]
        return harness.table1_scenarios(names, train_reps=train_reps, test_reps=test_reps, base_seed=base_seed,
                                        sampler=args.sampler or "conditional", methods=methods,
                                        test_grid=sc["test_grid"])
    spec = _env_spec(cfg, sampler=args.sampler)
    return [harness.Scenario(name=sc["name"], train_spec=spec, methods=methods, test_grid=tuple(sc["test_grid"]),
                             train_reps=train_reps, test_reps_per_env=test_reps, base_seed=base_seed)]


def _summary(reports: dict) -> str:
    lines = []
    for key, per in reports.items():
        lines.append(key)
        best_bv = min(r.beta_v_error_mean for r in per.values())
        best_se = min(r.se for r in per.values())
        lines.append(f"  {'method':10s} {'beta_v_error':>14s} {'AE':>8s} {'SE':>9s}")
        for m, r in sorted(per.items()):
            bv_mark = "*" if r.beta_v_error_mean == best_bv else " "
            se_mark = "*" if r.se == best_se else " "
            lines.append(f"  {m:10s} {r.beta_v_error_mean:13.4f}{bv_mark} {r.ae:8.4f} {r.se:8.4f}{se_mark}")
    lines.append("(* = lowest beta_v_error / SE in the configuration)")
    return "\n".join(lines)


def cmd_sweep(args, cfg) -> int:
    scenarios = _scenarios_for(args, cfg)
    reports, records = harness.run_suite(scenarios, threads=args.threads)
    out = Path(args.out or "sweep-out")
    out.mkdir(parents=True, exist_ok=True)
    (out / "results.csv").write_text(harness.records_to_csv(records))
    _write_json(out / "report.json", harness.reports_to_dict(reports))
    print(_summary(reports))
    print(f"wrote {out / 'results.csv'} and {out / 'report.json'}")
    return 0


def cmd_report(args, cfg) -> int:
    path = Path(args.results)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise DataError(f"results CSV not found: {path}") from None
    records = harness.records_from_csv(text)
    out = Path(args.out or "report-out")
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "curves.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scenario", "r_test", "method", "mean_rmse"])
        for key, r, m, v in harness.figure_curves(records):
            w.writerow([key, repr(r), m, repr(v)])
    with open(out / "bars.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scenario", "method", "beta_v_error_mean", "beta_v_error_var"])
        for key, m, mean, var in harness.figure_bars(records):
            w.writerow([key, m, repr(mean), repr(var)])
    _write_json(out / "report.json", harness.reports_to_dict(harness.project(records)))
    print(f"wrote {out / 'curves.csv'}, {out / 'bars.csv'} and {out / 'report.json'}")
    return 0


def cmd_defaults(args, cfg) -> int:
    print(json.dumps(cfg, indent=2))
    return 0


# -- parser ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON config file (sections: %s)" % ", ".join(SECTIONS))
    common.add_argument("--seed", type=int, help="seed override (u64); default from config, 47")
    common.add_argument("--threads", type=int, default=1, help="worker processes for sweeps (default 1)")
    common.add_argument("--out", metavar="PATH", help="output file or directory")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="cfrlearn", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    g = sub.add_parser("gen", parents=[common], formatter_class=fmt,
                       help="generate a synthetic dataset (CSV + meta JSON)")
    g.add_argument("--n", type=int, help="sample count (config default 2000)")
    g.add_argument("--p", type=int, help="feature dimension, even >= 4 (config default 10)")
    g.add_argument("--form", choices=("poly", "exp", "linear_only"), help="outcome form (default poly)")
    g.add_argument("--r-bias", help="bias rate in [-3,-1) U (1,3], or 'none' (config default 1.7)")
    g.add_argument("--vb-size", type=int, help="number of biased unstable features (default max(1, p/10))")
    g.add_argument("--noise-std", type=float, help="outcome noise standard deviation (default 0.3)")
    g.add_argument("--sampler", choices=("rejection", "conditional"), help="selection sampler (default rejection)")
    g.add_argument("--meta", help="meta JSON path (default: <out>.meta.json)")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", parents=[common], formatter_class=fmt, help="fit a model to a dataset")
    t.add_argument("--method", required=True,
                   help="one of: " + ", ".join(METHODS + CLASSIFIER_METHODS) + " (dwr is accepted for dwr-like)")
    t.add_argument("--data", required=True, help="dataset CSV (x1..xp,y) or embedding CSV (f1..fp,label)")
    t.add_argument("--meta", help="meta JSON (default: <data>.meta.json when present)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], formatter_class=fmt, help="score a saved model on a dataset")
    e.add_argument("--model", required=True, help="model JSON written by train")
    e.add_argument("--data", required=True, help="dataset CSV or embedding CSV")
    e.add_argument("--meta", help="meta JSON (default: <data>.meta.json when present)")
    e.add_argument("--predict-mode", choices=("coefficients", "rectified"), default=None,
                   help="CFR scoring path (default: the model's train_config.predict_mode)")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", parents=[common], formatter_class=fmt,
                       help="run a scenario sweep, write results.csv and report.json")
    s.add_argument("--scenario", choices=tuple(harness.TABLE1_GROUPS) + ("table1",),
                   help="built-in benchmark group; omit to use the config's scenario + environment sections")
    s.add_argument("--reps", type=int, help="training repetitions (also test reps unless --test-reps)")
    s.add_argument("--test-reps", type=int, help="test datasets per test bias rate")
    s.add_argument("--sampler", choices=("rejection", "conditional"),
                   help="selection sampler (default conditional for built-in scenarios)")
    s.set_defaults(func=cmd_sweep)

    r = sub.add_parser("report", parents=[common], formatter_class=fmt,
                       help="turn a results CSV into plot-ready curve and bar CSVs")
    r.add_argument("--results", required=True, help="results.csv from sweep")
    r.set_defaults(func=cmd_report)

    d = sub.add_parser("defaults", parents=[common], formatter_class=fmt, help="print every default setting")
    d.set_defaults(func=cmd_defaults)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except CfrError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (TypeError, ValueError) as exc:
        # malformed values reaching dataclass constructors from config files
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
