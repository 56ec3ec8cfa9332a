"""Working logistic model for binary y and the sequential E-CRT engine.

The model: P(Y=1 | x, z) = expit(beta @ x + gamma @ z), with z carrying the
intercept in its first slot.  The E-CRT engine uses the fitted conditional
probability of the *observed* label, truncated away from 0 and 1, as the
test function of the e-factor construction; the coefficient estimate is
refit after every observation, and factors during the warmup phase (before
the first fit has enough data) are exactly one.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np
from scipy.special import expit

from .errors import DimensionMismatch, RankDeficient, SeqciError
from .evalue import (
    EFactor,
    MartingaleState,
    Observation,
    StepRecord,
    TestConfig,
    TestFunction,
    TRIVIAL_FACTOR,
    e_factor_exact,
    e_factor_mc,
    run_sequential_test,
)
from .modelx import ConditionalModel

__all__ = [
    "LogisticParams",
    "FitConfig",
    "FitDiagnostics",
    "predict_prob",
    "prob_of_label",
    "log_likelihood",
    "fit_mle",
    "fit_logistic_design",
    "EcrtEngine",
    "ecrt_factor",
    "run_ecrt",
]

# |linear predictor| above this at the optimum hints at (quasi-)separation.
_SEPARATION_LP = 30.0
_FALLBACK_RIDGE = 1e-6


@dataclass(frozen=True)
class LogisticParams:
    """Coefficients (beta for x, gamma for z including the intercept slot)."""

    beta: np.ndarray
    gamma: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "beta", np.atleast_1d(np.asarray(self.beta, dtype=float)))
        object.__setattr__(self, "gamma", np.atleast_1d(np.asarray(self.gamma, dtype=float)))
        if not (np.all(np.isfinite(self.beta)) and np.all(np.isfinite(self.gamma))):
            raise ValueError("coefficients must be finite")

    @property
    def theta(self) -> np.ndarray:
        return np.concatenate([self.beta, self.gamma])


@dataclass(frozen=True)
class FitConfig:
    """Fitting and truncation knobs.

    ``min_fit_n`` is the number of stored observations required before the
    first fit; ``None`` resolves to 5 * dim(z) at runtime, so the first
    non-trivial factor occurs at observation 5q + 1.  ``ridge`` is a fallback
    stabilizer, not a modelling choice; an automatic 1e-6 ridge retry kicks
    in when the unpenalized fit does not converge.
    """

    eps_trunc: float = 0.05
    min_fit_n: Optional[int] = None
    ridge: float = 0.0
    max_iter: int = 100
    tol: float = 1e-8

    def __post_init__(self):
        if not 0.0 <= self.eps_trunc < 0.5:
            raise ValueError("eps_trunc must be in [0, 0.5)")
        if self.ridge < 0:
            raise ValueError("ridge must be >= 0")


@dataclass(frozen=True)
class FitDiagnostics:
    converged: bool  # gradient criterion met on the requested problem
    n_iter: int
    ridge_fallback: bool
    separation_suspected: bool


def predict_prob(params: LogisticParams, x, z) -> float:
    """P(Y = 1 | x, z); stable for |linear predictor| up to ~700 and beyond."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    z = np.atleast_1d(np.asarray(z, dtype=float))
    if x.size != params.beta.size or z.size != params.gamma.size:
        raise DimensionMismatch(
            f"x/z have dims {(x.size, z.size)}, params expect {(params.beta.size, params.gamma.size)}"
        )
    lp = float(params.beta @ x + params.gamma @ z)
    return float(expit(lp))


def prob_of_label(params: LogisticParams, x, z, y: float) -> float:
    """P(Y = y | x, z) for y in {0, 1}."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    z = np.atleast_1d(np.asarray(z, dtype=float))
    lp = float(params.beta @ x + params.gamma @ z)
    sign = 1.0 if y == 1 else -1.0
    return float(expit(sign * lp))


def _nll(design: np.ndarray, y: np.ndarray, theta: np.ndarray, ridge: float) -> float:
    lp = design @ theta
    # log(1 + exp(lp)) - y*lp, summed; stable for large |lp|
    val = float(np.logaddexp(0.0, lp).sum() - y @ lp)
    if ridge > 0:
        val += 0.5 * ridge * float(theta @ theta)
    return val


def log_likelihood(design: np.ndarray, y: np.ndarray, theta: np.ndarray) -> float:
    """Unpenalized log-likelihood of a logistic model at theta."""
    return -_nll(design, y, theta, 0.0)


def _newton(design, y, ridge, max_iter, tol, theta0):
    """Damped Newton / IRLS on the penalized negative log-likelihood.

    Returns (theta, converged, n_iter, failed); ``failed`` means a singular
    Hessian or non-finite iterates, not mere non-convergence.
    """
    n, d = design.shape
    theta = np.zeros(d) if theta0 is None else np.asarray(theta0, dtype=float).copy()
    current = _nll(design, y, theta, ridge)
    if not math.isfinite(current):
        theta = np.zeros(d)
        current = _nll(design, y, theta, ridge)
    for it in range(1, max_iter + 1):
        lp = design @ theta
        p = expit(lp)
        grad = design.T @ (y - p)
        if ridge > 0:
            grad -= ridge * theta
        if float(np.max(np.abs(grad))) < tol:
            return theta, True, it, False
        w = p * (1.0 - p)
        hess = (design * w[:, None]).T @ design
        if ridge > 0:
            hess[np.diag_indices(d)] += ridge
        try:
            delta = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            return theta, False, it, True
        if not np.all(np.isfinite(delta)):
            return theta, False, it, True
        step = 1.0
        while step > 1e-12:
            cand = theta + step * delta
            value = _nll(design, y, cand, ridge)
            if value <= current + 1e-10:
                theta, current = cand, value
                break
            step *= 0.5
        else:
            # no descent direction left; report the best point found
            return theta, False, it, False
    return theta, False, max_iter, False


def fit_logistic_design(
    design: np.ndarray,
    y: np.ndarray,
    cfg: FitConfig,
    theta0: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, FitDiagnostics]:
    """Fit on a prebuilt design matrix; the array-level workhorse.

    Attempts the requested problem first; on numerical failure or
    non-convergence with ridge == 0, retries once with the fallback ridge.
    ``converged`` in the diagnostics always refers to the requested problem.
    """
    design = np.asarray(design, dtype=float)
    y = np.asarray(y, dtype=float)
    theta, converged, n_iter, failed = _newton(
        design, y, cfg.ridge, cfg.max_iter, cfg.tol, theta0
    )
    fallback = False
    if (failed or not converged) and cfg.ridge == 0.0:
        fallback = True
        theta2, _, extra_iter, failed2 = _newton(
            design, y, _FALLBACK_RIDGE, cfg.max_iter, cfg.tol, None
        )
        n_iter += extra_iter
        if failed2 or not np.all(np.isfinite(theta2)):
            raise RankDeficient("logistic fit failed even with ridge fallback")
        theta = theta2
    elif failed:
        raise RankDeficient("logistic fit failed (singular Hessian) with ridge > 0")
    separation = bool(np.max(np.abs(design @ theta)) > _SEPARATION_LP) if design.size else False
    return theta, FitDiagnostics(converged, n_iter, fallback, separation)


def _split_theta(theta: np.ndarray, p_dim: int) -> LogisticParams:
    return LogisticParams(beta=theta[:p_dim], gamma=theta[p_dim:])


def _stack(observations) -> tuple[np.ndarray, np.ndarray, np.ndarray, int]:
    obs = list(observations)
    if not obs:
        raise ValueError("need at least one observation")
    p_dim = obs[0].x.size
    xs = np.array([o.x for o in obs], dtype=float)
    zs = np.array([o.z for o in obs], dtype=float)
    ys = np.array([o.y for o in obs], dtype=float)
    return xs, zs, ys, p_dim


def fit_mle(observations: Iterable[Observation], cfg: FitConfig = FitConfig()) -> tuple[LogisticParams, FitDiagnostics]:
    """Maximum-likelihood fit of the full model on a batch of observations."""
    xs, zs, ys, p_dim = _stack(observations)
    design = np.hstack([xs, zs])
    theta, diag = fit_logistic_design(design, ys, cfg)
    return _split_theta(theta, p_dim), diag


class _Buffer:
    """Row buffer with doubling capacity; cheap append and zero-copy view."""

    def __init__(self, width: int):
        self._data = np.empty((64, width) if width > 1 else (64,), dtype=float)
        self._n = 0

    def append(self, row) -> None:
        if self._n == self._data.shape[0]:
            grown = np.empty((2 * self._data.shape[0],) + self._data.shape[1:], dtype=float)
            grown[: self._n] = self._data
            self._data = grown
        self._data[self._n] = row
        self._n += 1

    def view(self) -> np.ndarray:
        return self._data[: self._n]

    def __len__(self) -> int:
        return self._n


class EcrtEngine(TestFunction):
    """Test function h(x, y, z) = truncated fitted probability of label y.

    The factor for observation n only ever uses the fit on observations
    1..n-1 (the stream driver calls ``observe`` after producing the factor).
    During warmup, and after a hard fit failure, the engine reports the
    constant function 1, which yields a factor of exactly one.  In oracle
    mode the supplied coefficients are used from the first observation on
    and never refit.
    """

    def __init__(self, p_dim: int, q_dim: int, cfg: FitConfig = FitConfig(), oracle: Optional[LogisticParams] = None):
        self.p_dim = int(p_dim)
        self.q_dim = int(q_dim)
        self.cfg = cfg
        self.oracle = oracle
        self.min_fit_n = cfg.min_fit_n if cfg.min_fit_n is not None else 5 * self.q_dim
        self._design = _Buffer(self.p_dim + self.q_dim)
        self._y = _Buffer(1)
        self._theta: Optional[np.ndarray] = None if oracle is None else oracle.theta
        self.fit_failures = 0
        self.last_diagnostics: Optional[FitDiagnostics] = None

    @property
    def n_observed(self) -> int:
        return len(self._y)

    @property
    def params(self) -> Optional[LogisticParams]:
        if self._theta is None:
            return None
        return _split_theta(self._theta, self.p_dim)

    def is_trivial(self) -> bool:
        return self._theta is None

    def _clamp(self, probs):
        eps = self.cfg.eps_trunc
        if eps > 0:
            return np.clip(probs, eps, 1.0 - eps)
        return probs

    def evaluate(self, x, y, z) -> float:
        if self._theta is None:
            return 1.0
        x = np.atleast_1d(np.asarray(x, dtype=float))
        z = np.atleast_1d(np.asarray(z, dtype=float))
        lp = float(self._theta[: self.p_dim] @ x + self._theta[self.p_dim :] @ z)
        sign = 1.0 if y == 1 else -1.0
        return float(self._clamp(expit(sign * lp)))

    def evaluate_many(self, xs, y, z) -> np.ndarray:
        if self._theta is None:
            return np.ones(len(xs))
        xs = np.asarray(xs, dtype=float)
        beta = self._theta[: self.p_dim]
        z_part = float(self._theta[self.p_dim :] @ np.atleast_1d(np.asarray(z, dtype=float)))
        if xs.ndim == 1:
            lp = beta[0] * xs + z_part
        else:
            lp = xs @ beta + z_part
        sign = 1.0 if y == 1 else -1.0
        return self._clamp(expit(sign * lp))

    def observe(self, obs: Observation) -> None:
        if self.oracle is not None:
            return
        if obs.x.size != self.p_dim or obs.z.size != self.q_dim:
            raise DimensionMismatch(
                f"observation dims {(obs.x.size, obs.z.size)} do not match engine {(self.p_dim, self.q_dim)}"
            )
        self._design.append(np.concatenate([obs.x, obs.z]))
        self._y.append(obs.y)
        if len(self._y) < self.min_fit_n:
            return
        try:
            theta, diag = fit_logistic_design(
                self._design.view(), self._y.view(), self.cfg, theta0=self._theta
            )
            self._theta = theta
            self.last_diagnostics = diag
        except SeqciError:
            # keep the stream alive: report the constant function until a
            # later refit succeeds
            self._theta = None
            self.fit_failures += 1


def ecrt_factor(
    engine: EcrtEngine,
    obs: Observation,
    q: ConditionalModel,
    m: int,
    rng: np.random.Generator,
) -> EFactor:
    """One E-CRT step: produce the factor for ``obs`` (exactly 1 during
    warmup), then let the engine absorb the observation and refit."""
    if engine.is_trivial():
        factor = TRIVIAL_FACTOR
    elif q.supports_exact:
        factor = e_factor_exact(engine, obs, q)
    else:
        factor = e_factor_mc(engine, obs, q, m, rng)
    engine.observe(obs)
    return factor


def run_ecrt(
    stream: Iterable[Observation],
    q: ConditionalModel,
    fit_cfg: FitConfig = FitConfig(),
    test_cfg: TestConfig = TestConfig(),
    oracle: Optional[LogisticParams] = None,
    rng: Optional[np.random.Generator] = None,
) -> tuple[MartingaleState, list[StepRecord]]:
    """Run the E-CRT over a stream against a fixed conditional model.

    With ``oracle`` set, the supplied coefficients are used from the first
    observation (no warmup, no refitting).
    """
    it = iter(stream)
    try:
        first = next(it)
    except StopIteration:
        return MartingaleState.initial(test_cfg.alpha), []
    engine = EcrtEngine(first.x.size, first.z.size, fit_cfg, oracle=oracle)
    return run_sequential_test(itertools.chain([first], it), engine, q, test_cfg, rng)
