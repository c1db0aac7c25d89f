"""Experiment protocol: repeated biased training, cross-environment testing, aggregation.

For every configuration, each training replicate draws a fresh biased training
set shared by all methods. Every trained model is scored on the same family of
test environments (``test_reps_per_env`` datasets per test bias rate). Seeds
come from :func:`derive_seed`, so results never depend on execution order or
on the number of worker processes.
"""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import metrics
from .datagen import EnvironmentSpec, generate_environment, _check_bias_rate
from .errors import CfrError, ConfigError, DataError
from .regressors import DEFAULT_HYPER, METHODS, canonical_method, fit_method

logger = logging.getLogger(__name__)

DEFAULT_TEST_GRID = (-3.0, -2.5, -2.0, -1.7, -1.5, -1.3, 1.3, 1.5, 1.7, 2.0, 2.5, 3.0)
RESULT_COLUMNS = ("scenario", "method", "n", "p", "r_train", "r_test", "rep", "seed", "rmse",
                  "beta_error", "beta_v_error")


def derive_seed(base_seed: int, *parts) -> int:
    """Unsigned 64-bit seed from a base seed and any tuple of labels."""
    text = repr((int(base_seed),) + tuple(_canon(p) for p in parts)).encode()
    return int.from_bytes(hashlib.blake2b(text, digest_size=8).digest(), "little")


def _canon(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return x


def config_key(spec: EnvironmentSpec) -> tuple:
    """Everything about a training environment that shapes the data, except its seed."""
    return (spec.n, spec.p, spec.outcome_form, spec.r_bias, spec.vb_size, spec.noise_std, spec.sampler)


@dataclass(frozen=True)
class MethodSpec:
    tag: str
    hyper: tuple = ()

    @classmethod
    def make(cls, tag: str, hyper: Optional[dict] = None) -> "MethodSpec":
        return cls(canonical_method(tag), tuple(sorted((hyper or {}).items())))

    @property
    def params(self) -> dict:
        return dict(self.hyper)


def default_methods() -> tuple:
    return tuple(MethodSpec.make(m) for m in METHODS)


@dataclass(frozen=True)
class Scenario:
    name: str
    train_spec: EnvironmentSpec
    methods: tuple = field(default_factory=default_methods)
    test_grid: tuple = DEFAULT_TEST_GRID
    train_reps: int = 50
    test_reps_per_env: int = 50
    base_seed: int = 47

    def __post_init__(self):
        if self.train_spec.r_bias is None:
            raise ConfigError("a scenario needs a biased training environment (r_train)")
        methods = tuple(m if isinstance(m, MethodSpec) else MethodSpec.make(m) for m in self.methods)
        if not methods:
            raise ConfigError("a scenario needs at least one method")
        object.__setattr__(self, "methods", methods)
        grid = tuple(float(r) for r in self.test_grid)
        for r in grid:
            _check_bias_rate(r)
        if len(set(grid)) != len(grid):
            raise ConfigError("test_grid contains duplicates")
        object.__setattr__(self, "test_grid", grid)
        if self.train_reps < 1 or self.test_reps_per_env < 1:
            raise ConfigError("reps must be >= 1")

    @property
    def key(self) -> str:
        s = self.train_spec
        return f"{self.name}[n={s.n},p={s.p},r_train={s.r_bias!r}]"

    def train_seed(self, rep: int) -> int:
        return derive_seed(self.base_seed, "train", config_key(self.train_spec), rep)

    def fit_seed(self, method: MethodSpec, rep: int) -> int:
        return derive_seed(self.base_seed, "fit", config_key(self.train_spec), method.tag, method.hyper, rep)

    def eval_env_spec(self, r_test: float, rep: int) -> EnvironmentSpec:
        return eval_env_spec(self.train_spec, r_test, rep, self.base_seed)


def eval_env_spec(template: EnvironmentSpec, r_test: float, rep: int, base_seed: int) -> EnvironmentSpec:
    seed = derive_seed(base_seed, "test", config_key(template), float(r_test), rep)
    return template.replace(r_bias=float(r_test), seed=seed)


@dataclass(frozen=True)
class RunRecord:
    scenario: str
    method: str
    n: int
    p: int
    r_train: float
    r_test: Optional[float]
    rep: int
    seed: int
    rmse: Optional[float]
    beta_error: float
    beta_v_error: float

    def sort_key(self):
        return (self.scenario, self.n, self.p, self.r_train, self.method, self.rep,
                -math.inf if self.r_test is None else self.r_test)


# -- single cells --------------------------------------------------------------

def run_single(train_spec: EnvironmentSpec, method, seed: int, fit_seed: Optional[int] = None):
    """Generate one training set from ``seed``, fit ``method`` and score its coefficients.

    Returns ``(model, beta_v_error, beta_error)``.
    """
    m = method if isinstance(method, MethodSpec) else MethodSpec.make(method)
    ds = generate_environment(train_spec.replace(seed=seed))
    model = _fit(m, ds, fit_seed if fit_seed is not None else seed)
    return model, *_coef_errors(model, ds)


def _fit(m: MethodSpec, ds, fit_seed: int):
    return fit_method(m.tag, ds.X, ds.Y, m.params, rng=np.random.default_rng(fit_seed))


def _coef_errors(model, ds):
    bv = metrics.beta_error(model.beta, ds.beta, ds.unstable_index)
    b = metrics.beta_error(model.beta, ds.beta)
    return bv, b


def evaluate_across_envs(model, test_grid: Sequence[float], spec_template: EnvironmentSpec, reps: int,
                         base_seed: int) -> list:
    """RMSE of ``model`` on ``reps`` fresh datasets per test bias rate."""
    out = []
    for r in test_grid:
        vals = []
        for rep in range(reps):
            ds = generate_environment(eval_env_spec(spec_template, r, rep, base_seed))
            vals.append(metrics.rmse(model.predict(ds.X), ds.Y))
        out.append(metrics.EnvResult(float(r), tuple(vals)))
    return out


# -- scenario runs -----------------------------------------------------------------

def _train_task(args):
    scenario, rep = args
    seed = scenario.train_seed(rep)
    ds = generate_environment(scenario.train_spec.replace(seed=seed))
    fitted = []
    for m in scenario.methods:
        try:
            model = _fit(m, ds, scenario.fit_seed(m, rep))
        except CfrError as exc:
            raise type(exc)(f"{scenario.key} method={m.tag} rep={rep}: {exc}") from None
        fitted.append((model, *_coef_errors(model, ds)))
    return seed, fitted


def _test_task(args):
    scenario, r_test, rep, models = args
    ds = generate_environment(scenario.eval_env_spec(r_test, rep))
    out = np.empty(len(models))
    for i, model in enumerate(models):
        pred = model.predict(ds.X)
        if not np.isfinite(pred).all():
            raise DataError(f"{scenario.key}: non-finite prediction at r_test={r_test} rep={rep}")
        out[i] = metrics.rmse(pred, ds.Y)
    return out


def _single_thread_init():
    # BLAS threading can perturb the last bits of reductions; pin it so
    # results do not depend on how many workers the sweep uses.
    threadpool_limits(limits=1)


def _map(fn, items, threads: int):
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        with threadpool_limits(limits=1):
            return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=threads, initializer=_single_thread_init) as pool:
        return list(pool.map(fn, items, chunksize=1))


def run_scenario(s: Scenario, threads: int = 1):
    """Run one configuration. Returns ``(reports, records)``.

    ``reports`` maps method tag to :class:`~cfrlearn.metrics.StabilityReport`;
    ``records`` is the canonical list of :class:`RunRecord`.
    """
    trained = _map(_train_task, [(s, rep) for rep in range(s.train_reps)], threads)
    models = [model for _, fitted in trained for model, _, _ in fitted]
    cells = [(r, k) for r in s.test_grid for k in range(s.test_reps_per_env)]
    rmses = _map(_test_task, [(s, r, k, models) for r, k in cells], threads)

    n_methods = len(s.methods)
    grid_index = {r: i for i, r in enumerate(s.test_grid)}
    # rmse_cube[env, train rep, method, test rep]
    cube = np.empty((len(s.test_grid), s.train_reps, n_methods, s.test_reps_per_env))
    for (r, k), vals in zip(cells, rmses):
        cube[grid_index[r], :, :, k] = vals.reshape(s.train_reps, n_methods)

    spec = s.train_spec
    records = []
    for rep, (seed, fitted) in enumerate(trained):
        for mi, (m, (_, bv, b)) in enumerate(zip(s.methods, fitted)):
            common = dict(scenario=s.name, method=m.tag, n=spec.n, p=spec.p, r_train=spec.r_bias, rep=rep,
                          seed=seed, beta_error=b, beta_v_error=bv)
            records.append(RunRecord(r_test=None, rmse=None, **common))
            for r in s.test_grid:
                cell = float(np.mean(cube[grid_index[r], rep, mi]))
                records.append(RunRecord(r_test=r, rmse=cell, **common))
    records.sort(key=RunRecord.sort_key)
    return project(records)[s.key], records


def scenario_key(name: str, n: int, p: int, r_train: float) -> str:
    return f"{name}[n={n},p={p},r_train={float(r_train)!r}]"


def project(records: Iterable[RunRecord]) -> dict:
    """Recompute every aggregate from a record table: ``{scenario key: {method: StabilityReport}}``."""
    groups: dict = {}
    for rec in records:
        key = scenario_key(rec.scenario, rec.n, rec.p, rec.r_train)
        groups.setdefault(key, {}).setdefault(rec.method, []).append(rec)
    out = {}
    for key in sorted(groups):
        out[key] = {}
        for method, recs in groups[key].items():
            train_rows = sorted((r for r in recs if r.r_test is None), key=lambda r: r.rep)
            bv = np.array([r.beta_v_error for r in train_rows])
            b = np.array([r.beta_error for r in train_rows])
            by_env: dict = {}
            for r in sorted((r for r in recs if r.r_test is not None), key=lambda r: r.rep):
                by_env.setdefault(r.r_test, []).append(r.rmse)
            envs = [metrics.EnvResult(r, tuple(v)) for r, v in sorted(by_env.items())]
            ae, se = metrics.ae_se(envs) if len(envs) >= 2 else (
                envs[0].mean_rmse if envs else math.nan, math.nan)
            out[key][method] = metrics.StabilityReport(
                per_env=tuple((e.r_test, e.mean_rmse) for e in envs),
                ae=ae,
                se=se,
                beta_v_error_mean=float(bv.mean()) if bv.size else None,
                beta_v_error_var=float(bv.var(ddof=1)) if bv.size > 1 else 0.0,
                beta_error_mean=float(b.mean()) if b.size else None,
            )
    return out


# -- benchmark grid ------------------------------------------------------------------

TABLE1_GROUPS = {
    "table1-s1": [dict(n=n, p=10, r=1.7) for n in (1000, 2000, 4000)],
    "table1-s2": [dict(n=2000, p=p, r=1.7) for p in (10, 20, 40)],
    "table1-s3": [dict(n=2000, p=20, r=r) for r in (1.5, 1.7, 2.0)],
}


def table1_scenarios(groups: Optional[Sequence[str]] = None, train_reps: int = 50, test_reps: int = 50,
                     base_seed: int = 47, sampler: str = "conditional", outcome_form: str = "poly",
                     methods: Optional[Sequence] = None, test_grid: Sequence[float] = DEFAULT_TEST_GRID) -> list:
    groups = list(groups or TABLE1_GROUPS)
    out = []
    for g in groups:
        if g not in TABLE1_GROUPS:
            raise ConfigError(f"unknown scenario {g!r}; known: {', '.join(TABLE1_GROUPS)}")
        for c in TABLE1_GROUPS[g]:
            spec = EnvironmentSpec(n=c["n"], p=c["p"], outcome_form=outcome_form, r_bias=c["r"],
                                   sampler=sampler, seed=base_seed)
            out.append(Scenario(name=g, train_spec=spec, methods=tuple(methods or default_methods()),
                                test_grid=tuple(test_grid), train_reps=train_reps,
                                test_reps_per_env=test_reps, base_seed=base_seed))
    return out


def _run_identity(s: Scenario) -> tuple:
    return (config_key(s.train_spec), s.methods, s.test_grid, s.train_reps, s.test_reps_per_env, s.base_seed)


def run_suite(scenarios: Sequence[Scenario], threads: int = 1):
    """Run several scenarios, computing configurations that coincide only once.

    Returns ``(reports, records)`` with reports keyed by :attr:`Scenario.key`.
    """
    cache: dict = {}
    reports, records = {}, []
    for s in scenarios:
        ident = _run_identity(s)
        if ident not in cache:
            logger.info("running %s", s.key)
            cache[ident] = run_scenario(s, threads)[1]
        recs = [RunRecord(**{**rec.__dict__, "scenario": s.name}) for rec in cache[ident]]
        records.extend(recs)
    records.sort(key=RunRecord.sort_key)
    reports = project(records)
    return reports, records


def table1_suite(train_reps: int = 50, test_reps: int = 50, threads: int = 1, **kw):
    return run_suite(table1_scenarios(train_reps=train_reps, test_reps=test_reps, **kw), threads)


# -- files -----------------------------------------------------------------------------

def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def records_to_csv(records: Sequence[RunRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_COLUMNS)
    for rec in sorted(records, key=RunRecord.sort_key):
        w.writerow([_fmt(getattr(rec, c)) for c in RESULT_COLUMNS])
    return buf.getvalue()


def records_from_csv(text: str) -> list:
    """Parse a results CSV; raises :class:`DataError` naming the offending row."""
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise DataError("results CSV is empty (row 1)") from None
    missing = [c for c in RESULT_COLUMNS if c not in header]
    if missing:
        raise DataError(f"results CSV is missing column {missing[0]!r} (row 1)")
    pos = {c: header.index(c) for c in RESULT_COLUMNS}
    out = []
    for rowno, row in enumerate(reader, start=2):
        if not row:
            continue
        try:
            get = {c: row[i] for c, i in pos.items()}
            out.append(RunRecord(
                scenario=get["scenario"], method=get["method"], n=int(get["n"]), p=int(get["p"]),
                r_train=float(get["r_train"]),
                r_test=float(get["r_test"]) if get["r_test"] else None,
                rep=int(get["rep"]), seed=int(get["seed"]),
                rmse=float(get["rmse"]) if get["rmse"] else None,
                beta_error=float(get["beta_error"]), beta_v_error=float(get["beta_v_error"]),
            ))
        except (IndexError, ValueError) as exc:
            raise DataError(f"malformed results CSV at row {rowno}: {exc}") from None
    return out


def reports_to_dict(reports: dict) -> dict:
    return {key: {m: r.to_dict() for m, r in sorted(per.items())} for key, per in reports.items()}


def figure_curves(records: Sequence[RunRecord]) -> list:
    """Rows ``(scenario key, r_test, method, mean_rmse)`` for stability curves."""
    rows = []
    for key, per in project(records).items():
        for method, rep in sorted(per.items()):
            rows.extend((key, r, method, m) for r, m in rep.per_env)
    return rows


def figure_bars(records: Sequence[RunRecord]) -> list:
    rows = []
    for key, per in project(records).items():
        for method, rep in sorted(per.items()):
            rows.append((key, method, rep.beta_v_error_mean, rep.beta_v_error_var))
    return rows
