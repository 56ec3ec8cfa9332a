"""Conditional e-factors and the test martingale they accumulate into.

The construction: given a nonnegative test function ``h`` chosen before
seeing the current data point, and the conditional law ``Q_z`` of ``x``
given ``z``, the ratio

    h(x, y, z) / E_{Q_z}[h(X, y, z)]

has conditional expectation one whenever ``x`` is truly drawn from ``Q_z``
independently of ``y`` given ``z``.  Multiplying these ratios over a stream
yields a test martingale, so by Ville's inequality the running product
exceeds ``1/alpha`` with probability at most ``alpha`` under the null, at
any data-dependent stopping time.

When the normalizing expectation has no closed form it is replaced by the
leave-nothing-out Monte-Carlo average that includes the observed point
itself; this keeps the conditional mean exactly one (see
:func:`e_factor_mc`).  Dropping the observed point from the average is
anti-conservative and is exposed only as a test hook
(:func:`naive_e_factor_mc`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import DimensionMismatch, UnsupportedModel, ZeroDenominator
from .modelx import ConditionalModel

__all__ = [
    "Observation",
    "TestFunction",
    "CallableTestFunction",
    "EFactor",
    "MartingaleState",
    "TestConfig",
    "StepRecord",
    "e_factor_exact",
    "e_factor_mc",
    "naive_e_factor_mc",
    "mc_factor",
    "update_martingale",
    "run_sequential_test",
    "run_factored_stream",
    "symmetry_e_factor",
    "write_trace",
]


@dataclass(frozen=True)
class Observation:
    """One data point (x, y, z) of a stream.

    ``x`` and ``z`` are stored as 1-D float arrays; scalars are promoted.
    The first coordinate of ``z`` may be a constant-one intercept slot.
    """

    x: np.ndarray
    y: float
    z: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x", np.atleast_1d(np.asarray(self.x, dtype=float)))
        object.__setattr__(self, "z", np.atleast_1d(np.asarray(self.z, dtype=float)))
        object.__setattr__(self, "y", float(self.y))
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.z)) and math.isfinite(self.y)):
            raise ValueError("observation coordinates must be finite")


class TestFunction:
    """A nonnegative function h(x, y, z), possibly with fitted state.

    ``evaluate`` must be pure; any internal state only changes through
    ``observe``, which the stream driver calls strictly *after* the factor
    for the current observation has been produced.
    """

    __test__ = False  # not a pytest case, despite the statistics name

    def evaluate(self, x, y: float, z) -> float:
        raise NotImplementedError

    def evaluate_many(self, xs: np.ndarray, y: float, z) -> np.ndarray:
        """Vectorized evaluation over candidate x values (same y, z)."""
        return np.array([self.evaluate(x, y, z) for x in xs], dtype=float)

    def observe(self, obs: Observation) -> None:
        """Absorb a processed observation.  Default: stateless, no-op."""

    def is_trivial(self) -> bool:
        """True when the function is currently the constant 1 (factor 1)."""
        return False


class CallableTestFunction(TestFunction):
    """Wrap a plain ``fn(x, y, z) -> float`` as a stateless test function."""

    def __init__(self, fn: Callable, vectorized: Optional[Callable] = None):
        self._fn = fn
        self._vectorized = vectorized

    def evaluate(self, x, y, z) -> float:
        return float(self._fn(x, y, z))

    def evaluate_many(self, xs, y, z) -> np.ndarray:
        if self._vectorized is not None:
            return np.asarray(self._vectorized(xs, y, z), dtype=float)
        return super().evaluate_many(xs, y, z)


@dataclass(frozen=True)
class EFactor:
    """One conditional e-factor.

    ``value == numerator / denominator`` up to floating-point rounding and
    ``denominator > 0``, except in the degenerate 0/0 case (test function
    vanished at the observed point and at every draw), where ``value`` is 1
    and ``degenerate`` is set.  Monte-Carlo factors satisfy
    ``value <= m_draws + 1`` exactly.
    """

    value: float
    numerator: float
    denominator: float
    method: str  # "exact-integral" | "monte-carlo"
    m_draws: int = 0
    degenerate: bool = False


TRIVIAL_FACTOR = EFactor(value=1.0, numerator=1.0, denominator=1.0, method="exact-integral")


def e_factor_exact(h: TestFunction, obs: Observation, q: ConditionalModel) -> EFactor:
    """E-factor with the normalizing integral computed by exact summation.

    Requires a model with enumerable support.  Raises
    :class:`UnsupportedModel` otherwise and :class:`ZeroDenominator` when
    the integral vanishes while h is positive at the observed point.
    """
    if not q.supports_exact:
        raise UnsupportedModel(f"no exact integrator for model {type(q).__name__}")
    support = q.support(obs.z)
    probs = q.weights_at(obs.z)
    numerator = float(h.evaluate(obs.x, obs.y, obs.z))
    values = h.evaluate_many(support, obs.y, obs.z)
    if np.any(values < 0) or numerator < 0:
        raise ValueError("test function must be nonnegative")
    denominator = float(values @ probs)
    if denominator <= 0.0:
        if numerator == 0.0:
            return EFactor(1.0, 0.0, 0.0, "exact-integral", degenerate=True)
        raise ZeroDenominator("integral of h under Q_z is zero but h(x_obs) > 0")
    return EFactor(numerator / denominator, numerator, denominator, "exact-integral")


def mc_factor(h_obs: float, h_draws: np.ndarray) -> EFactor:
    """Monte-Carlo e-factor from already-evaluated test-function values.

    The observed value enters the denominator average, so the factor is
    bounded by ``m + 1`` and has conditional expectation exactly one.
    """
    h_draws = np.asarray(h_draws, dtype=float)
    m = h_draws.size
    if h_obs < 0 or np.any(h_draws < 0):
        raise ValueError("test function must be nonnegative")
    total = h_obs + float(h_draws.sum())
    if total == 0.0:
        return EFactor(1.0, 0.0, 0.0, "monte-carlo", m_draws=m, degenerate=True)
    # (m+1) * h/(h+sum) rather than h / ((h+sum)/(m+1)): the first form
    # cannot round above m+1.
    value = (m + 1) * (h_obs / total)
    return EFactor(value, h_obs, total / (m + 1), "monte-carlo", m_draws=m)


def e_factor_mc(
    h: TestFunction,
    obs: Observation,
    q: ConditionalModel,
    m: int,
    rng: np.random.Generator,
) -> EFactor:
    """E-factor with the integral replaced by the (m+1)-point average over
    the observed x and m fresh draws from Q_z."""
    if m < 1:
        raise ValueError("m must be >= 1")
    draws = q.sample_many(obs.z, m, rng)
    h_obs = float(h.evaluate(obs.x, obs.y, obs.z))
    h_draws = h.evaluate_many(draws, obs.y, obs.z)
    return mc_factor(h_obs, h_draws)


def naive_e_factor_mc(
    h: TestFunction,
    obs: Observation,
    q: ConditionalModel,
    m: int,
    rng: np.random.Generator,
) -> EFactor:
    """Anti-conservative variant that leaves the observed point out of the
    denominator average.  Mean > 1 for h nonconstant in x: DO NOT use for
    testing, kept only as a negative control."""
    if m < 1:
        raise ValueError("m must be >= 1")
    draws = q.sample_many(obs.z, m, rng)
    h_obs = float(h.evaluate(obs.x, obs.y, obs.z))
    h_draws = h.evaluate_many(draws, obs.y, obs.z)
    denom = float(h_draws.mean())
    if denom == 0.0:
        if h_obs == 0.0:
            return EFactor(1.0, 0.0, 0.0, "monte-carlo", m_draws=m, degenerate=True)
        return EFactor(math.inf, h_obs, 0.0, "monte-carlo", m_draws=m)
    return EFactor(h_obs / denom, h_obs, denom, "monte-carlo", m_draws=m)


@dataclass(frozen=True)
class MartingaleState:
    """Running state of the test martingale, in log domain.

    ``log_s`` is the exact sum of logs of all accepted factors (a factor of
    zero pins it at -inf for good); ``stopped_at`` is the index of the first
    step at which the product reached ``1/alpha``.
    """

    n: int
    log_s: float
    max_log_s: float
    threshold_log: float
    stopped_at: Optional[int] = None

    @classmethod
    def initial(cls, alpha: float) -> "MartingaleState":
        if not 0.0 < alpha < 1.0:
            raise ValueError("alpha must be in (0, 1)")
        return cls(n=0, log_s=0.0, max_log_s=0.0, threshold_log=math.log(1.0 / alpha))

    @property
    def crossed(self) -> bool:
        return self.stopped_at is not None

    @property
    def s(self) -> float:
        return math.exp(self.log_s) if self.log_s < 700 else math.inf


def update_martingale(state: MartingaleState, factor: EFactor) -> MartingaleState:
    """Multiply one factor into the martingale; returns a new state."""
    if factor.value < 0:
        raise ValueError("e-factor must be nonnegative")
    log_f = math.log(factor.value) if factor.value > 0 else -math.inf
    log_s = state.log_s + log_f
    n = state.n + 1
    max_log_s = max(state.max_log_s, log_s)
    stopped_at = state.stopped_at
    if stopped_at is None and log_s >= state.threshold_log:
        stopped_at = n
    return MartingaleState(n, log_s, max_log_s, state.threshold_log, stopped_at)


@dataclass(frozen=True)
class TestConfig:
    """Knobs of a sequential run.

    ``stop_on_cross`` defaults to False: the driver keeps accumulating past
    the threshold so that one trace supports stopping-time queries against
    any later budget.
    """

    __test__ = False  # not a pytest case, despite the statistics name

    alpha: float = 0.05
    m_draws: int = 500
    rng_seed: int = 0
    stop_on_cross: bool = False

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must be in (0, 1)")
        if self.m_draws < 1:
            raise ValueError("m_draws must be >= 1")


@dataclass(frozen=True)
class StepRecord:
    n: int
    factor: float
    log_s: float
    crossed: bool


def _factor_for(
    h: TestFunction,
    obs: Observation,
    q: ConditionalModel,
    cfg: TestConfig,
    rng: np.random.Generator,
) -> EFactor:
    if h.is_trivial():
        return TRIVIAL_FACTOR
    if q.supports_exact:
        return e_factor_exact(h, obs, q)
    return e_factor_mc(h, obs, q, cfg.m_draws, rng)


def run_factored_stream(
    pairs: Iterable[tuple[Observation, ConditionalModel]],
    h: TestFunction,
    cfg: TestConfig,
    rng: Optional[np.random.Generator] = None,
) -> tuple[MartingaleState, list[StepRecord]]:
    """Sequential test over (observation, model) pairs.

    Per step, strictly in this order: compute the e-factor for the current
    observation (exact integration when the model supports it, Monte-Carlo
    otherwise), fold it into the martingale, record the trace row, and only
    then let ``h`` update its internal state with the observation.  The
    ordering is what makes h predictable, hence the product a martingale;
    the driver owns it, not the test function.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.rng_seed)
    state = MartingaleState.initial(cfg.alpha)
    trace: list[StepRecord] = []
    dims: Optional[tuple[int, int]] = None
    for obs, q in pairs:
        if dims is None:
            dims = (obs.x.size, obs.z.size)
        elif (obs.x.size, obs.z.size) != dims:
            raise DimensionMismatch(
                f"observation {state.n + 1} has dims {(obs.x.size, obs.z.size)}, expected {dims}"
            )
        factor = _factor_for(h, obs, q, cfg, rng)
        state = update_martingale(state, factor)
        trace.append(StepRecord(state.n, factor.value, state.log_s, state.crossed))
        h.observe(obs)
        if cfg.stop_on_cross and state.crossed:
            break
    return state, trace


def run_sequential_test(
    stream: Iterable[Observation],
    h: TestFunction,
    q: ConditionalModel,
    cfg: TestConfig,
    rng: Optional[np.random.Generator] = None,
) -> tuple[MartingaleState, list[StepRecord]]:
    """Sequential test of a stream against a single conditional model."""
    return run_factored_stream(((obs, q) for obs in stream), h, cfg, rng)


def symmetry_e_factor(d: float, lam: float) -> float:
    """E-factor for a null of symmetry around zero, with h(d) = exp(lam*d):
    2*exp(lam*d) / (exp(lam*d) + exp(-lam*d)).  Saturates at 2 without
    overflow for large |lam*d|."""
    # 2*e^{t}/(e^{t}+e^{-t}) = 2/(1+e^{-2t})
    t = lam * d
    if t >= 0:
        return 2.0 / (1.0 + math.exp(-2.0 * t))
    e = math.exp(2.0 * t)
    return 2.0 * e / (e + 1.0)


def write_trace(path, trace: Sequence[StepRecord]) -> None:
    """Write a trace as comma-separated text: n,factor,log_s,crossed."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("n,factor,log_s,crossed\n")
        for rec in trace:
            fh.write(f"{rec.n},{rec.factor!r},{rec.log_s!r},{int(rec.crossed)}\n")
