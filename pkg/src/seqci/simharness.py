"""Synthetic scenarios, replicated experiments, and their summaries.

The data generating process: (x, z_1..z_{q-1}) jointly Gaussian with a
Toeplitz covariance, z presented with a leading intercept one, binary y
from the logistic model with x-coefficient ``beta`` and z-coefficients
drawn uniformly on [-1, 1] per replication.  All methods of a replication
consume the same dataset (paired comparison); every (replication, purpose)
pair draws from its own substream of the master seed, so runs are
reproducible byte for byte and adding a method never perturbs the draws of
another.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass
from typing import Iterator, Optional, Sequence

import numpy as np
from scipy.special import expit

from .baselines import RmleProcess, crt_pvalue_from_arrays, lrt_pvalue_from_arrays
from .errors import ConfigError, InsufficientReplications
from .evalue import MartingaleState, Observation, update_martingale
from .logistic import EcrtEngine, FitConfig, LogisticParams, ecrt_factor
from .modelx import (
    ConditionalModel,
    GaussianConditional,
    distort_mean,
    fit_gaussian_conditional,
    gaussian_conditional_from_joint,
    toeplitz_joint,
)
from .seeds import substream_rng, substream_seed

__all__ = [
    "ScenarioSpec",
    "Dataset",
    "RunRecord",
    "PowerCell",
    "PowerSummary",
    "METHODS",
    "SEQUENTIAL_METHODS",
    "FIXED_N_METHODS",
    "RECORD_COLUMNS",
    "SCHEMA_VERSION",
    "gen_dataset",
    "run_replications",
    "power_curve",
    "robustness_experiment",
    "calibration_summary",
    "write_records",
    "summary_to_json",
]

SCHEMA_VERSION = 1

SEQUENTIAL_METHODS = ("ecrt", "ecrt-oracle", "rmle")
FIXED_N_METHODS = ("crt", "crt-corr", "lrt")
METHODS = SEQUENTIAL_METHODS + FIXED_N_METHODS

MISSPEC_KINDS = ("cubic", "quadratic", "tanh")
Q_SOURCES = ("exact", "fitted", "shared-data")


@dataclass(frozen=True)
class ScenarioSpec:
    """Everything that defines one synthetic experiment.

    ``misspec`` distorts the conditional model handed to the *test* while
    the data keep coming from the true model; ``q_source`` selects between
    the exact conditional, one fitted on a fresh unlabeled sample per
    replication, and the shared-data mode where the fitted model is updated
    with all covariate pairs seen so far before each step.
    """

    q: int = 4
    alternating: bool = False
    beta: float = 0.0
    n_max: int = 1000
    replications: int = 400
    alpha: float = 0.05
    m_draws: int = 500
    eps_trunc: float = 0.05
    master_seed: int = 0
    gamma_fixed: bool = False
    misspec: Optional[tuple[str, float]] = None  # (kind, xi)
    q_source: str = "exact"
    unlabeled_n: int = 50
    n_grid: Optional[tuple[int, ...]] = None
    stop_on_cross: bool = False
    crt_resamples: Optional[int] = None  # defaults to m_draws

    def __post_init__(self):
        if self.q < 2:
            raise ConfigError("q must be >= 2")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError("beta must be in [0, 1]")
        if self.n_max < 5 * self.q + 1:
            raise ConfigError(f"n_max must be at least 5q+1 = {5 * self.q + 1}")
        if self.replications < 0:
            raise ConfigError("replications must be >= 0")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError("alpha must be in (0, 1)")
        if self.q_source not in Q_SOURCES:
            raise ConfigError(f"q_source must be one of {Q_SOURCES}")
        if self.misspec is not None:
            kind, xi = self.misspec
            if kind not in MISSPEC_KINDS:
                raise ConfigError(f"misspec kind must be one of {MISSPEC_KINDS}")
            if xi < 0:
                raise ConfigError("misspec xi must be >= 0")
            if self.q_source != "exact":
                raise ConfigError("misspec requires q_source='exact'")

    @property
    def resolved_n_grid(self) -> tuple[int, ...]:
        if self.n_grid is not None:
            return tuple(self.n_grid)
        return tuple(n for n in range(100, 2001, 100) if n <= self.n_max)


@dataclass(frozen=True)
class Dataset:
    """One replication's data: x (n,), z (n, q) with intercept, y (n,)."""

    x: np.ndarray
    z: np.ndarray
    y: np.ndarray
    gamma: np.ndarray
    q_true: GaussianConditional

    @property
    def n(self) -> int:
        return self.x.size

    def observations(self, upto: Optional[int] = None) -> Iterator[Observation]:
        end = self.n if upto is None else min(upto, self.n)
        for i in range(end):
            yield Observation(x=self.x[i], y=self.y[i], z=self.z[i])

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.x.tobytes())
        h.update(self.y.tobytes())
        h.update(self.z.tobytes())
        return h.hexdigest()[:16]


@dataclass(frozen=True)
class RunRecord:
    """One evaluated (method, replication, budget) cell.

    Sequential methods carry the first-crossing index at the scenario's
    alpha and the running maximum of the log e-process over the whole
    budget; fixed-n methods carry the p-value at their budget n.
    """

    method: str
    rep: int
    beta: float
    sweep: Optional[float]  # xi or unlabeled_n in robustness sweeps
    n: int
    stop_index: Optional[int]
    max_log_s: Optional[float]
    p_value: Optional[float]
    seed: int
    dataset_hash: str


RECORD_COLUMNS = (
    "method",
    "rep",
    "beta",
    "sweep",
    "n",
    "stop_index",
    "max_log_s",
    "p_value",
    "seed",
    "dataset_hash",
)


def gen_dataset(
    spec: ScenarioSpec,
    rep: int,
    n: int,
    rng: Optional[np.random.Generator] = None,
    gamma: Optional[np.ndarray] = None,
) -> Dataset:
    """Draw one dataset of size n from the scenario's generating process.

    Draw order (fixed for reproducibility): gamma, the Gaussian block via
    the Cholesky factor of the Toeplitz covariance, then the label
    uniforms.
    """
    if rng is None:
        rng = substream_rng(spec.master_seed, rep, "data")
    sigma = toeplitz_joint(spec.q, spec.alternating)
    if gamma is None:
        gamma = rng.uniform(-1.0, 1.0, size=spec.q)
    chol = np.linalg.cholesky(sigma)
    block = rng.standard_normal((n, spec.q)) @ chol.T
    x = block[:, 0]
    z = np.column_stack([np.ones(n), block[:, 1:]])
    lp = spec.beta * x + z @ gamma
    y = (rng.random(n) < expit(lp)).astype(float)
    return Dataset(x=x, z=z, y=y, gamma=np.asarray(gamma, float), q_true=gaussian_conditional_from_joint(sigma))


def _fixed_gamma(spec: ScenarioSpec) -> Optional[np.ndarray]:
    if not spec.gamma_fixed:
        return None
    return substream_rng(spec.master_seed, 0, "gamma-fixed").uniform(-1.0, 1.0, size=spec.q)


def _q_for_test(spec: ScenarioSpec, ds: Dataset, rep: int) -> ConditionalModel:
    """Conditional model handed to the test (shared-data handled in-runner)."""
    if spec.q_source == "fitted":
        rng = substream_rng(spec.master_seed, rep, "unlabeled")
        sigma = toeplitz_joint(spec.q, spec.alternating)
        block = rng.standard_normal((spec.unlabeled_n, spec.q)) @ np.linalg.cholesky(sigma).T
        return fit_gaussian_conditional(block[:, 0], block[:, 1:])
    q = ds.q_true
    if spec.misspec is not None:
        kind, xi = spec.misspec
        q = distort_mean(q, kind, xi)
    return q


def _run_rmle_method(spec: ScenarioSpec, ds: Dataset, rng):
    cfg = FitConfig(eps_trunc=spec.eps_trunc)
    proc = RmleProcess(1, spec.q, cfg)
    threshold = math.log(1.0 / spec.alpha)
    stop = None
    max_log = 0.0
    for i in range(min(spec.n_max, ds.n)):
        st = proc.update(Observation(x=ds.x[i], y=ds.y[i], z=ds.z[i]))
        max_log = max(max_log, st.log_e)
        if stop is None and st.log_e >= threshold:
            stop = st.n
            if spec.stop_on_cross:
                break
    return stop, max_log


def _run_one_rep(spec: ScenarioSpec, methods: Sequence[str], rep: int, gamma) -> list[RunRecord]:
    ds = gen_dataset(spec, rep, spec.n_max, gamma=gamma)
    digest = ds.digest()
    q_test = _q_for_test(spec, ds, rep)
    grid = spec.resolved_n_grid
    crt_m = spec.crt_resamples if spec.crt_resamples is not None else spec.m_draws
    records: list[RunRecord] = []
    sweep = _sweep_value(spec)
    for method in methods:
        seed = substream_seed(spec.master_seed, rep, f"method:{method}")
        rng = np.random.default_rng(seed)
        if method in SEQUENTIAL_METHODS:
            if method == "ecrt":
                stop, max_log = _run_ecrt(spec, ds, q_test, rep, rng, oracle=None)
            elif method == "ecrt-oracle":
                oracle = LogisticParams(beta=[spec.beta], gamma=ds.gamma)
                stop, max_log = _run_ecrt(spec, ds, q_test, rep, rng, oracle=oracle)
            else:
                stop, max_log = _run_rmle_method(spec, ds, rng)
            records.append(
                RunRecord(method, rep, spec.beta, sweep, spec.n_max, stop, max_log, None, seed, digest)
            )
        else:
            cfg = FitConfig(eps_trunc=spec.eps_trunc)
            for n in grid:
                if method == "lrt":
                    p = lrt_pvalue_from_arrays(ds.x[:n], ds.z[:n], ds.y[:n], cfg).p_value
                else:
                    statistic = "logistic-likelihood" if method == "crt" else "abs-correlation"
                    q_n = _crt_q_model(spec, ds, q_test, n)
                    p = crt_pvalue_from_arrays(
                        ds.x[:n], ds.z[:n], ds.y[:n], q_n, crt_m, statistic, rng, cfg
                    ).p_value
                records.append(
                    RunRecord(method, rep, spec.beta, sweep, n, None, None, p, seed, digest)
                )
    return records


def _crt_q_model(spec: ScenarioSpec, ds: Dataset, q_test, n: int) -> ConditionalModel:
    """Shared-data CRT estimates the conditional on the very rows it tests."""
    if spec.q_source == "shared-data":
        return fit_gaussian_conditional(ds.x[:n], ds.z[:n, 1:])
    return q_test


def _run_ecrt(spec, ds, q_test, rep, rng, oracle):
    """Sequential E-CRT over one dataset, including shared-data refitting."""
    cfg = FitConfig(eps_trunc=spec.eps_trunc)
    engine = EcrtEngine(1, spec.q, cfg, oracle=oracle)
    state = MartingaleState.initial(spec.alpha)
    shared = spec.q_source == "shared-data"
    if shared:
        init_rng = substream_rng(spec.master_seed, rep, "unlabeled")
        sigma = toeplitz_joint(spec.q, spec.alternating)
        block = init_rng.standard_normal((spec.unlabeled_n, spec.q)) @ np.linalg.cholesky(sigma).T
        pool_x = list(block[:, 0])
        pool_z = list(block[:, 1:])
    for i in range(min(spec.n_max, ds.n)):
        obs = Observation(x=ds.x[i], y=ds.y[i], z=ds.z[i])
        if shared:
            q_step = fit_gaussian_conditional(np.asarray(pool_x), np.asarray(pool_z))
            pool_x.append(ds.x[i])
            pool_z.append(ds.z[i, 1:])
        else:
            q_step = q_test
        factor = ecrt_factor(engine, obs, q_step, spec.m_draws, rng)
        state = update_martingale(state, factor)
        if spec.stop_on_cross and state.crossed:
            break
    return state.stopped_at, state.max_log_s


def _sweep_value(spec: ScenarioSpec) -> Optional[float]:
    if spec.misspec is not None:
        return float(spec.misspec[1])
    if spec.q_source in ("fitted", "shared-data"):
        return float(spec.unlabeled_n)
    return None


def run_replications(
    spec: ScenarioSpec,
    methods: Sequence[str],
    n_jobs: int = 1,
) -> list[RunRecord]:
    """Evaluate all methods on the same data, one dataset per replication.

    Replications are independent work units with per-(rep, method)
    substreams, so parallel execution is bit-identical to serial; records
    come back sorted by (method, rep, n) regardless of scheduling.
    """
    for method in methods:
        if method not in METHODS:
            raise ConfigError(f"unknown method {method!r}; known: {METHODS}")
    gamma = _fixed_gamma(spec)
    reps = range(spec.replications)
    if n_jobs != 1 and spec.replications > 1:
        from joblib import Parallel, delayed

        chunks = Parallel(n_jobs=n_jobs)(
            delayed(_run_one_rep)(spec, tuple(methods), rep, gamma) for rep in reps
        )
    else:
        chunks = [_run_one_rep(spec, tuple(methods), rep, gamma) for rep in reps]
    records = [rec for chunk in chunks for rec in chunk]
    records.sort(key=lambda r: (r.method, r.rep, r.n))
    return records


def _rejected_by(rec: RunRecord, n: int, alpha: float) -> bool:
    if rec.p_value is not None:
        return rec.p_value <= alpha
    return rec.stop_index is not None and rec.stop_index <= n


@dataclass(frozen=True)
class PowerCell:
    method: str
    beta: float
    rejection_by_n: dict  # n -> (rate, se)
    n_hat: dict  # eta -> n or None
    n_av: dict  # eta -> float or None (sequential methods only)


@dataclass(frozen=True)
class PowerSummary:
    alpha: float
    etas: tuple[float, ...]
    grid: tuple[int, ...]
    cells: tuple[PowerCell, ...]

    def cell(self, method: str, beta: float) -> PowerCell:
        for c in self.cells:
            if c.method == method and c.beta == beta:
                return c
        raise KeyError((method, beta))


def power_curve(
    records: Sequence[RunRecord],
    etas: Sequence[float],
    alpha: float,
    grid: Optional[Sequence[int]] = None,
) -> PowerSummary:
    """Minimum budgets for target power, and expected stopped sample sizes.

    N_hat(beta, eta) is the smallest grid n whose empirical rejection rate
    reaches 1 - eta (None when never reached inside the budget); for
    sequential methods N_av(beta, eta) averages min(N_hat, first crossing)
    over replications.  Raises InsufficientReplications when the rejection
    rate at a decision boundary has standard error above 0.05.
    """
    by_key: dict[tuple[str, float], list[RunRecord]] = {}
    for rec in records:
        by_key.setdefault((rec.method, rec.beta), []).append(rec)
    cells = []
    grid_all: set[int] = set(grid) if grid else set()
    for (method, beta), recs in sorted(by_key.items()):
        sequential = method in SEQUENTIAL_METHODS
        if sequential:
            ns = sorted(grid_all) if grid_all else sorted({r.n for r in recs})
            stops = [r.stop_index for r in recs]
            n_reps = len(recs)
            rates = {}
            for n in ns:
                k = sum(1 for s in stops if s is not None and s <= n)
                rate = k / n_reps
                rates[n] = (rate, math.sqrt(rate * (1 - rate) / n_reps))
        else:
            ns = sorted({r.n for r in recs})
            n_reps = len({r.rep for r in recs})
            rates = {}
            for n in ns:
                sub = [r for r in recs if r.n == n]
                rate = sum(r.p_value <= alpha for r in sub) / len(sub)
                rates[n] = (rate, math.sqrt(rate * (1 - rate) / len(sub)))
        n_hat = {}
        n_av = {}
        for eta in etas:
            target = 1.0 - eta
            found = None
            for n in ns:
                if rates[n][0] >= target:
                    found = n
                    break
            n_hat[eta] = found
            if found is not None and rates[found][1] > 0.05:
                raise InsufficientReplications(
                    f"SE {rates[found][1]:.3f} > 0.05 at the decision boundary "
                    f"(method={method}, beta={beta}, n={found})"
                )
            if sequential:
                if found is None:
                    n_av[eta] = None
                else:
                    n_av[eta] = float(
                        np.mean([min(found, s) if s is not None else found for s in stops])
                    )
        cells.append(PowerCell(method, beta, rates, n_hat, n_av if sequential else {}))
    grid_out = tuple(sorted(grid_all)) if grid_all else tuple(sorted({r.n for r in records}))
    return PowerSummary(alpha, tuple(etas), grid_out, tuple(cells))


def calibration_summary(records: Sequence[RunRecord], alphas: Sequence[float]) -> list[dict]:
    """Rejection rate with binomial SE per (method, alpha), at full budget."""
    rows = []
    methods = sorted({r.method for r in records})
    for method in methods:
        recs = [r for r in records if r.method == method]
        if method in SEQUENTIAL_METHODS:
            per_alpha = {
                a: np.mean([r.max_log_s >= math.log(1 / a) for r in recs]) for a in alphas
            }
            n_reps = len(recs)
        else:
            n_full = max(r.n for r in recs)
            full = [r for r in recs if r.n == n_full]
            per_alpha = {a: np.mean([r.p_value <= a for r in full]) for a in alphas}
            n_reps = len(full)
        for a in alphas:
            rate = float(per_alpha[a])
            rows.append(
                {
                    "method": method,
                    "alpha": a,
                    "rate": rate,
                    "se": math.sqrt(rate * (1 - rate) / n_reps) if n_reps else 0.0,
                    "replications": n_reps,
                }
            )
    return rows


def robustness_experiment(
    spec: ScenarioSpec,
    methods: Sequence[str],
    sweep: dict,
    n_jobs: int = 1,
) -> tuple[list[dict], list[RunRecord]]:
    """Null rejection rates along a misspecification or estimation sweep.

    ``sweep`` is {"kind": <cubic|quadratic|tanh>, "xis": [...]} or
    {"q_source": <fitted|shared-data>, "unlabeled_ns": [...]}.  All runs
    share the master seed, so sweep points are paired.  Enforces beta = 0:
    robustness is about type-I error only.
    """
    if spec.beta != 0.0:
        raise ConfigError("robustness experiments must run under the null (beta = 0)")
    variants: list[tuple[float, ScenarioSpec]] = []
    if "kind" in sweep:
        kind = sweep["kind"]
        for xi in sweep["xis"]:
            variants.append((float(xi), dataclasses.replace(spec, misspec=(kind, float(xi)))))
    elif "q_source" in sweep:
        source = sweep["q_source"]
        if source not in ("fitted", "shared-data"):
            raise ConfigError("sweep q_source must be 'fitted' or 'shared-data'")
        for u_n in sweep["unlabeled_ns"]:
            variants.append(
                (float(u_n), dataclasses.replace(spec, q_source=source, unlabeled_n=int(u_n)))
            )
    else:
        raise ConfigError("sweep must contain 'kind'+'xis' or 'q_source'+'unlabeled_ns'")
    rows: list[dict] = []
    all_records: list[RunRecord] = []
    for value, variant in variants:
        records = run_replications(variant, methods, n_jobs=n_jobs)
        all_records.extend(records)
        for entry in calibration_summary(records, [spec.alpha]):
            entry["sweep"] = value
            rows.append(entry)
    return rows, all_records


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_records(path, records: Sequence[RunRecord], header_comment: Optional[str] = None) -> None:
    """Comma-separated records, schema v1; deterministic bytes.

    ``header_comment`` (e.g. a timestamp) goes on a leading '#' line and is
    the only part of the file allowed to differ between identical runs.
    """
    with open(path, "w", encoding="utf-8") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        fh.write(f"# schema={SCHEMA_VERSION}\n")
        fh.write(",".join(RECORD_COLUMNS) + "\n")
        for rec in records:
            fh.write(",".join(_fmt(getattr(rec, col)) for col in RECORD_COLUMNS) + "\n")


def summary_to_json(payload: dict) -> str:
    """Deterministic JSON for summaries (schema-versioned)."""
    body = {"schema_version": SCHEMA_VERSION, **payload}
    return json.dumps(body, sort_keys=True, indent=2, default=_json_default)


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return dataclasses.asdict(obj)
    raise TypeError(f"not JSON-serializable: {type(obj).__name__}")
