"""Synthetic stable/unstable-feature data with environment-specific selection bias.

Features are ``X = [S, V]``. Stable features ``S`` are built from an
auxiliary Gaussian matrix ``Z`` (``S_i = 0.8 Z_i + 0.2 Z_{i+1}``), unstable
features ``V`` are independent standard normals, and the outcome depends on
``S`` only::

    Y = S @ beta_s + g(S_1 S_2 S_3) + noise,    g in {x, exp(x), 0}

An environment is produced by biased sample selection: a candidate row is
kept with probability ``prod_i |r| ** (-5 * |f(S) - sign(r) V_i|)`` over the
biased columns ``V_b`` (the first ``vb_size`` unstable features).
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from numpy.typing import NDArray
from scipy import special, stats

from .errors import ConfigError, DataError, GenerationStalledError, ParseError

OUTCOME_FORMS = ("poly", "exp", "linear_only")
SAMPLERS = ("rejection", "conditional")

_BETA_CYCLE = np.array([1 / 3, -2 / 3, 1.0, -1 / 3, 2 / 3, -1.0])
# rows per candidate chunk are capped so one chunk stays around 32 MB
_CHUNK_ELEMENTS = 1 << 22


def default_vb_size(p: int) -> int:
    return max(1, int(math.floor(0.1 * p)))


def _check_bias_rate(r: float) -> None:
    if not math.isfinite(r) or abs(r) <= 1 or abs(r) > 3:
        raise ConfigError(f"bias rate r={r!r} outside the valid range [-3, -1) U (1, 3]")


@dataclass(frozen=True)
class EnvironmentSpec:
    """Recipe for one synthetic environment.

    ``vb_size=None`` resolves to ``max(1, floor(0.1 p))``. ``r_bias=None``
    means unbiased sampling. ``sampler`` selects between literal rejection
    sampling and the exact conditional sampler (same distribution, far fewer
    wasted candidates at strong bias).
    """

    n: int
    p: int
    outcome_form: str = "poly"
    r_bias: Optional[float] = None
    vb_size: Optional[int] = None
    noise_std: float = 0.3
    seed: int = 47
    sampler: str = "rejection"
    max_candidates: int = 10**8

    def __post_init__(self):
        if isinstance(self.n, bool) or not isinstance(self.n, (int, np.integer)) or self.n < 1:
            raise ConfigError(f"n must be a positive integer, got {self.n!r}")
        if isinstance(self.p, bool) or not isinstance(self.p, (int, np.integer)) or self.p < 4 or self.p % 2:
            raise ConfigError(f"p must be an even integer >= 4, got {self.p!r}")
        if self.outcome_form not in OUTCOME_FORMS:
            raise ConfigError(f"outcome_form must be one of {OUTCOME_FORMS}, got {self.outcome_form!r}")
        if self.r_bias is not None:
            object.__setattr__(self, "r_bias", float(self.r_bias))
            _check_bias_rate(self.r_bias)
        if self.vb_size is None:
            object.__setattr__(self, "vb_size", default_vb_size(self.p))
        if not 0 <= self.vb_size <= self.p // 2:
            raise ConfigError(f"vb_size must lie in [0, {self.p // 2}], got {self.vb_size}")
        if self.r_bias is not None and self.vb_size == 0:
            raise ConfigError("biased sampling needs vb_size >= 1")
        if not (self.noise_std >= 0 and math.isfinite(self.noise_std)):
            raise ConfigError(f"noise_std must be finite and >= 0, got {self.noise_std!r}")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed!r}")
        if self.sampler not in SAMPLERS:
            raise ConfigError(f"sampler must be one of {SAMPLERS}, got {self.sampler!r}")
        if self.max_candidates < 1:
            raise ConfigError("max_candidates must be positive")

    @property
    def p_s(self) -> int:
        return self.p // 2

    @property
    def p_v(self) -> int:
        return self.p // 2

    def replace(self, **changes) -> "EnvironmentSpec":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class SelectionWeight:
    d: NDArray
    prob: float


@dataclass(frozen=True, eq=False)
class Dataset:
    X: NDArray
    Y: NDArray
    beta_s: NDArray
    beta_v: NDArray
    stable_mask: NDArray
    spec: EnvironmentSpec
    trace: Optional[NDArray] = None
    n_candidates: Optional[int] = field(default=None, compare=False)

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        Y = np.asarray(self.Y, dtype=float)
        if X.ndim != 2 or Y.ndim != 1 or X.shape[0] != Y.shape[0]:
            raise DataError(f"inconsistent shapes X{X.shape} Y{Y.shape}")
        p = X.shape[1]
        beta_s = np.asarray(self.beta_s, dtype=float)
        beta_v = np.asarray(self.beta_v, dtype=float)
        mask = np.asarray(self.stable_mask, dtype=bool)
        if beta_s.size + beta_v.size != p or mask.shape != (p,):
            raise DataError("coefficient vectors / stable mask do not match the feature count")
        if not mask[: beta_s.size].all() or mask[beta_s.size :].any():
            raise DataError("stable_mask must mark exactly the leading p_s columns")
        arrays = {"X": X, "Y": Y, "beta_s": beta_s, "beta_v": beta_v, "stable_mask": mask}
        if self.trace is not None:
            arrays["trace"] = np.asarray(self.trace, dtype=float)
        for name, arr in arrays.items():
            arr = arr.copy() if arr is getattr(self, name) else arr
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def p_s(self) -> int:
        return self.beta_s.size

    @property
    def beta(self) -> NDArray:
        return np.concatenate([self.beta_s, self.beta_v])

    @property
    def S(self) -> NDArray:
        return self.X[:, : self.p_s]

    @property
    def V(self) -> NDArray:
        return self.X[:, self.p_s :]

    @property
    def unstable_index(self) -> NDArray:
        return np.flatnonzero(~self.stable_mask)


def true_coefficients(p_s: int) -> NDArray:
    """Stable coefficients: the cycle (1/3, -2/3, 1, -1/3, 2/3, -1) truncated to ``p_s``."""
    if p_s < 1:
        raise ConfigError(f"p_s must be >= 1, got {p_s}")
    return np.resize(_BETA_CYCLE, p_s)


def generate_covariates(spec: EnvironmentSpec, rng: np.random.Generator):
    """Draw ``spec.n`` unbiased rows. Returns ``(S, V, Z)``."""
    return _draw_covariates(spec.n, spec.p, rng)


def _draw_covariates(m: int, p: int, rng: np.random.Generator):
    p_s = p // 2
    Z = rng.standard_normal((m, p))
    V = rng.standard_normal((m, p - p_s))
    S = 0.8 * Z[:, :p_s] + 0.2 * Z[:, 1 : p_s + 1]
    return S, V, Z


def stable_signal(S, beta_s, outcome_form: str):
    """Noiseless stable response f(S) for one row or a matrix of rows."""
    S = np.asarray(S, dtype=float)
    beta_s = np.asarray(beta_s, dtype=float)
    if outcome_form not in OUTCOME_FORMS:
        raise ConfigError(f"unknown outcome_form {outcome_form!r}")
    single = S.ndim == 1
    S2 = np.atleast_2d(S)
    if S2.shape[1] != beta_s.size:
        raise DataError(f"S has {S2.shape[1]} columns but beta_s has {beta_s.size} entries")
    out = S2 @ beta_s
    if outcome_form != "linear_only":
        if S2.shape[1] < 3:
            raise ConfigError(f"outcome_form {outcome_form!r} needs p_s >= 3, got {S2.shape[1]}")
        prod = S2[:, 0] * S2[:, 1] * S2[:, 2]
        out = out + (prod if outcome_form == "poly" else np.exp(prod))
    return float(out[0]) if single else out


def generate_outcomes(S, V, beta_s, beta_v, outcome_form: str, noise_std: float, rng: np.random.Generator):
    S = np.asarray(S, dtype=float)
    V = np.asarray(V, dtype=float)
    if S.shape[0] != V.shape[0] or V.shape[1] != np.size(beta_v):
        raise DataError("S, V and beta_v dimensions are inconsistent")
    noise = rng.standard_normal(S.shape[0]) * noise_std
    return stable_signal(S, beta_s, outcome_form) + V @ np.asarray(beta_v, dtype=float) + noise


def selection_probability(fS: float, v_b, r: float) -> SelectionWeight:
    _check_bias_rate(r)
    v_b = np.atleast_1d(np.asarray(v_b, dtype=float))
    if v_b.size < 1:
        raise ConfigError("selection needs at least one biased feature")
    sign = 1.0 if r > 0 else -1.0
    d = np.abs(fS - sign * v_b)
    prob = float(np.exp(-5.0 * math.log(abs(r)) * d.sum()))
    return SelectionWeight(d=d, prob=prob)


def _log_tilt_mass(f: NDArray, a: float) -> NDArray:
    """log of E_w[exp(-a |f - w|)] for w ~ N(0, 1), minus a**2 / 2."""
    return np.logaddexp(-a * f + special.log_ndtr(f - a), a * f + special.log_ndtr(-f - a))


def _sample_tilted(f: NDArray, a: float, rng: np.random.Generator) -> NDArray:
    """Draw w with density proportional to phi(w) exp(-a |f - w|), one per entry of f.

    The density splits at f into N(a, 1) truncated to (-inf, f) and
    N(-a, 1) truncated to (f, inf).
    """
    log_left = -a * f + special.log_ndtr(f - a)
    log_total = _log_tilt_mass(f, a)
    go_left = np.log(rng.random(f.shape)) < log_left - log_total
    out = np.empty_like(f)
    if go_left.any():
        fl = f[go_left]
        out[go_left] = a + stats.truncnorm.rvs(-np.inf, fl - a, random_state=rng)
    if (~go_left).any():
        fr = f[~go_left]
        out[~go_left] = -a + stats.truncnorm.rvs(fr + a, np.inf, random_state=rng)
    return out


def _chunk_rows(spec: EnvironmentSpec, needed: int, rate: Optional[float], width: int) -> int:
    cap = max(4 * spec.n, _CHUNK_ELEMENTS // width)
    if rate is None:
        return 4 * spec.n
    return int(min(cap, max(needed / rate * 1.2, 1024)))


def _stall(spec: EnvironmentSpec, drawn: int, accepted: int):
    return GenerationStalledError(
        f"generation stalled after {drawn} candidates ({accepted}/{spec.n} accepted) for {spec!r}"
    )


def _rejection(spec: EnvironmentSpec, beta_s: NDArray, rng: np.random.Generator):
    sign = 1.0 if spec.r_bias > 0 else -1.0
    log_base = 5.0 * math.log(abs(spec.r_bias))
    S_parts, V_parts, Z_parts = [], [], []
    accepted = drawn = 0
    rate = None
    while accepted < spec.n:
        if drawn >= spec.max_candidates:
            raise _stall(spec, drawn, accepted)
        m = _chunk_rows(spec, spec.n - accepted, rate, spec.p + spec.p_v)
        m = min(m, spec.max_candidates - drawn)
        S, V, Z = _draw_covariates(m, spec.p, rng)
        u = rng.random(m)
        f = stable_signal(S, beta_s, spec.outcome_form)
        d = np.abs(f[:, None] - sign * V[:, : spec.vb_size]).sum(axis=1)
        with np.errstate(divide="ignore"):
            keep = np.log(u) < -log_base * d
        drawn += m
        accepted += int(keep.sum())
        rate = max(accepted / drawn, 1e-9)
        S_parts.append(S[keep])
        V_parts.append(V[keep])
        Z_parts.append(Z[keep])
    n = spec.n
    return (np.concatenate(S_parts)[:n], np.concatenate(V_parts)[:n], np.concatenate(Z_parts)[:n], drawn)


def _conditional(spec: EnvironmentSpec, beta_s: NDArray, rng: np.random.Generator):
    # Selection factorizes: given S, each biased V_i is independent with density
    # proportional to phi(v) |r|^(-5|f - sign(r) v|), and S itself is tilted by the
    # product of those masses. Rejection on S against the bound at f = 0 (the mass
    # is symmetric and log-concave in f) followed by exact draws of V_b gives the
    # same joint law as literal rejection sampling.
    sign = 1.0 if spec.r_bias > 0 else -1.0
    a = 5.0 * math.log(abs(spec.r_bias))
    log_peak = float(_log_tilt_mass(np.zeros(1), a)[0])
    p_s, vb = spec.p_s, spec.vb_size
    S_parts, Z_parts = [], []
    accepted = drawn = 0
    rate = None
    while accepted < spec.n:
        if drawn >= spec.max_candidates:
            raise _stall(spec, drawn, accepted)
        m = _chunk_rows(spec, spec.n - accepted, rate, p_s + 1)
        m = min(m, spec.max_candidates - drawn)
        Zs = rng.standard_normal((m, p_s + 1))
        u = rng.random(m)
        S = 0.8 * Zs[:, :p_s] + 0.2 * Zs[:, 1:]
        f = stable_signal(S, beta_s, spec.outcome_form)
        with np.errstate(divide="ignore"):
            keep = np.log(u) < vb * (_log_tilt_mass(f, a) - log_peak)
        drawn += m
        accepted += int(keep.sum())
        rate = max(accepted / drawn, 1e-9)
        S_parts.append(S[keep])
        Z_parts.append(Zs[keep])
    n = spec.n
    S = np.concatenate(S_parts)[:n]
    Z = np.hstack([np.concatenate(Z_parts)[:n], rng.standard_normal((n, spec.p - p_s - 1))])
    f = stable_signal(S, beta_s, spec.outcome_form)
    V = rng.standard_normal((n, spec.p_v))
    for i in range(vb):
        V[:, i] = sign * _sample_tilted(f, a, rng)
    return S, V, Z, drawn


def generate_environment(spec: EnvironmentSpec, rng: Optional[np.random.Generator] = None) -> Dataset:
    """Generate one environment; ``rng`` defaults to a PCG64 stream seeded by ``spec.seed``."""
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    beta_s = true_coefficients(spec.p_s)
    beta_v = np.zeros(spec.p_v)
    if spec.outcome_form != "linear_only" and spec.p_s < 3:
        raise ConfigError(f"outcome_form {spec.outcome_form!r} needs p_s >= 3")
    if spec.r_bias is None:
        S, V, Z = generate_covariates(spec, rng)
        drawn = spec.n
    elif spec.sampler == "rejection":
        S, V, Z, drawn = _rejection(spec, beta_s, rng)
    else:
        S, V, Z, drawn = _conditional(spec, beta_s, rng)
    Y = generate_outcomes(S, V, beta_s, beta_v, spec.outcome_form, spec.noise_std, rng)
    mask = np.arange(spec.p) < spec.p_s
    return Dataset(
        X=np.hstack([S, V]), Y=Y, beta_s=beta_s, beta_v=beta_v, stable_mask=mask,
        spec=spec, trace=Z, n_candidates=drawn,
    )


# -- files ------------------------------------------------------------------

META_FIELDS = (
    "n", "p", "p_s", "p_v", "outcome_form", "r_bias", "vb_size", "noise_std",
    "seed", "beta_s", "beta_v", "stable_mask",
)


def spec_to_meta(ds: Dataset) -> dict:
    spec = ds.spec
    return {
        "n": ds.n,
        "p": ds.p,
        "p_s": ds.p_s,
        "p_v": ds.p - ds.p_s,
        "outcome_form": spec.outcome_form,
        "r_bias": spec.r_bias,
        "vb_size": spec.vb_size,
        "noise_std": spec.noise_std,
        "seed": int(spec.seed),
        "sampler": spec.sampler,
        "beta_s": ds.beta_s.tolist(),
        "beta_v": ds.beta_v.tolist(),
        "stable_mask": ds.stable_mask.tolist(),
    }


def write_matrix_csv(path, X: NDArray, last, prefix: str, last_name: str) -> None:
    header = [f"{prefix}{j + 1}" for j in range(X.shape[1])] + [last_name]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row, tail in zip(X, last):
            w.writerow([repr(float(v)) for v in row] + [tail])


def read_matrix_csv(path, prefix: str, last_name: str, last_type=float, p: Optional[int] = None):
    """Read a ``<prefix>1..<prefix>p,<last_name>`` CSV; returns (matrix, last column).

    When ``p`` is given the header must name exactly that many feature columns.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", line=1) from None
        if p is None:
            p = len(header) - 1
        expected = [f"{prefix}{j + 1}" for j in range(p)] + [last_name]
        if p < 1 or header != expected:
            bad = next((h for h, e in zip(header, expected) if h != e), None)
            if bad is None and len(header) != len(expected):
                bad = expected[len(header)] if len(header) < len(expected) else header[len(expected)]
            raise ParseError(
                f"bad header: expected {prefix}1..{prefix}{max(p, 1)},{last_name}", line=1, field=bad
            )
        rows, tail = [], []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != p + 1:
                raise ParseError(f"expected {p + 1} fields, found {len(rec)}", line=lineno)
            values = []
            for name, text in zip(expected, rec):
                try:
                    values.append(float(text) if name != last_name else last_type(text))
                except ValueError:
                    raise ParseError(f"cannot parse {text!r}", line=lineno, field=name) from None
            rows.append(values[:-1])
            tail.append(values[-1])
    X = np.array(rows, dtype=float).reshape(len(rows), p)
    return X, np.array(tail)


def write_dataset(ds: Dataset, data_path, meta_path) -> None:
    write_matrix_csv(data_path, ds.X, [repr(float(y)) for y in ds.Y], "x", "y")
    Path(meta_path).write_text(json.dumps(spec_to_meta(ds), indent=2) + "\n")


def read_meta(meta_path) -> dict:
    try:
        meta = json.loads(Path(meta_path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", line=exc.lineno) from None
    if not isinstance(meta, dict):
        raise ParseError("meta file must hold a JSON object")
    missing = [k for k in META_FIELDS if k not in meta]
    if missing:
        raise ParseError("meta file is missing fields", field=missing[0])
    return meta


def read_dataset(data_path, meta_path) -> Dataset:
    meta = read_meta(meta_path)
    X, Y = read_matrix_csv(data_path, "x", "y", p=int(meta["p"]))
    if X.shape[0] != meta["n"]:
        raise DataError(f"meta declares n={meta['n']} but the data file has {X.shape[0]} rows")
    if X.shape[1] != meta["p"]:
        raise DataError(f"meta declares p={meta['p']} but the data file has {X.shape[1]} feature columns")
    try:
        spec = EnvironmentSpec(
            n=int(meta["n"]), p=int(meta["p"]), outcome_form=meta["outcome_form"],
            r_bias=meta["r_bias"], vb_size=int(meta["vb_size"]), noise_std=float(meta["noise_std"]),
            seed=int(meta["seed"]), sampler=meta.get("sampler", "rejection"),
        )
    except ConfigError as exc:
        raise DataError(f"meta file holds an invalid environment: {exc}") from None
    return Dataset(
        X=X, Y=Y.astype(float), beta_s=meta["beta_s"], beta_v=meta["beta_v"],
        stable_mask=meta["stable_mask"], spec=spec,
    )
