"""Batch and sequential comparators for the e-value test.

* Conditional randomization test: Monte-Carlo p-value from resampled
  covariates, with the refitted logistic likelihood or the absolute
  correlation with the centered covariate as statistic.
* Fixed-sample asymptotic likelihood-ratio test for the x-coefficients.
* Running-MLE e-process (universal inference): predictable full-model
  likelihood over the best null-model likelihood on everything seen.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np
from scipy.special import expit
from scipy.stats import chi2

from .errors import SeqciError
from .evalue import Observation
from .logistic import FitConfig, _Buffer, _stack, fit_logistic_design, log_likelihood
from .modelx import ConditionalModel

__all__ = [
    "CrtResult",
    "crt_pvalue",
    "crt_pvalue_from_arrays",
    "LrtResult",
    "lrt_pvalue",
    "lrt_pvalue_from_arrays",
    "RmleState",
    "RmleProcess",
    "rmle_evalue",
]

CRT_STATISTICS = ("logistic-likelihood", "abs-correlation")


@dataclass(frozen=True)
class CrtResult:
    """p_value = (1 + #{resampled stats >= observed}) / (m + 1), ties
    counted in the >= direction."""

    p_value: float
    observed_stat: float
    resample_stats: np.ndarray


def _loglik_stat(design: np.ndarray, y: np.ndarray, cfg: FitConfig, theta0=None):
    """Maximized log-likelihood, or -inf if the fit fails outright."""
    try:
        theta, _ = fit_logistic_design(design, y, cfg, theta0=theta0)
    except SeqciError:
        return -math.inf, None
    return log_likelihood(design, y, theta), theta


def _abs_correlation(y: np.ndarray, v: np.ndarray) -> float:
    """|cor(y, v)|, with 0 when either side has no variance."""
    y_c = y - y.mean()
    v_c = v - v.mean()
    denom = math.sqrt(float(y_c @ y_c) * float(v_c @ v_c))
    if denom == 0.0:
        return 0.0
    return abs(float(y_c @ v_c)) / denom


def _batched_loglik_refit(designs: np.ndarray, y: np.ndarray, theta0: np.ndarray, cfg: FitConfig):
    """Maximized log-likelihoods of m designs at once, or None on trouble.

    The resampled designs differ from the observed one only in the x
    column, so one damped Newton run over the whole batch (warm-started at
    the observed fit) converges in a couple of iterations.  Any singular
    Hessian or non-finite iterate aborts the batch; the caller falls back
    to the one-at-a-time path.
    """
    m, n, d = designs.shape
    theta = np.tile(np.asarray(theta0, dtype=float), (m, 1))
    designs_t = designs.transpose(0, 2, 1)  # (m, d, n)

    def batch_nll(th):
        lp = np.matmul(designs, th[:, :, None])[:, :, 0]
        return np.logaddexp(0.0, lp).sum(axis=1) - lp @ y

    current = batch_nll(theta)
    finished = np.zeros(m, dtype=bool)  # converged or stuck
    for _ in range(cfg.max_iter):
        lp = np.matmul(designs, theta[:, :, None])[:, :, 0]
        p = expit(lp)
        grad = np.matmul(designs_t, (y[None, :] - p)[:, :, None])[:, :, 0]
        finished |= np.abs(grad).max(axis=1) < cfg.tol
        if finished.all():
            break
        w = p * (1.0 - p)
        hess = np.matmul(designs_t * w[:, None, :], designs)
        try:
            delta = np.linalg.solve(hess, grad[:, :, None])[:, :, 0]
        except np.linalg.LinAlgError:
            return None
        if not np.all(np.isfinite(delta)):
            return None
        step = np.where(finished, 0.0, 1.0)
        accepted = finished.copy()
        for _ in range(40):
            if accepted.all():
                break
            prop = theta + step[:, None] * delta
            pn = batch_nll(prop)
            ok = ~accepted & (pn <= current + 1e-10)
            theta[ok] = prop[ok]
            current[ok] = pn[ok]
            accepted |= ok
            step = np.where(accepted, 0.0, step * 0.5)
        finished |= ~accepted  # no descent left: report the point reached
    return -current


def crt_pvalue_from_arrays(
    xs: np.ndarray,
    zs: np.ndarray,
    ys: np.ndarray,
    q: ConditionalModel,
    m: int,
    statistic: str,
    rng: np.random.Generator,
    fit_cfg: FitConfig = FitConfig(),
) -> CrtResult:
    """Array-level CRT; see :func:`crt_pvalue`."""
    if m < 1:
        raise ValueError("m must be >= 1")
    if statistic not in CRT_STATISTICS:
        raise ValueError(f"statistic must be one of {CRT_STATISTICS}")
    xs = np.asarray(xs, dtype=float)
    if xs.ndim == 1:
        xs = xs[:, None]
    zs = np.asarray(zs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    n, q_dim = zs.shape
    if statistic == "logistic-likelihood" and n < q_dim + 2:
        raise ValueError(f"need at least q+2={q_dim + 2} observations for the likelihood statistic")
    # (n, m): resample j for row i sits at [i, j]
    x_tilde = np.empty((n, m))
    for i in range(n):
        x_tilde[i] = q.sample_many(zs[i], m, rng)

    if statistic == "abs-correlation":
        centers = np.array([q.mean(zs[i]) for i in range(n)])
        observed = _abs_correlation(ys, xs[:, 0] - centers)
        resampled = np.array(
            [_abs_correlation(ys, x_tilde[:, j] - centers) for j in range(m)]
        )
    else:
        design = np.hstack([xs, zs])
        observed, theta_obs = _loglik_stat(design, ys, fit_cfg)
        # resampled covariates carry no signal, so their optima sit near the
        # null solution: warm-start the refits there
        _, theta_null = _loglik_stat(zs, ys, fit_cfg)
        p_dim = xs.shape[1]
        if theta_null is not None:
            warm = np.concatenate([np.zeros(p_dim), theta_null])
        else:
            warm = theta_obs
        resampled = None
        if warm is not None and fit_cfg.ridge == 0.0:
            designs = np.broadcast_to(design, (m,) + design.shape).copy()
            designs[:, :, 0] = x_tilde.T
            resampled = _batched_loglik_refit(designs, ys, warm, fit_cfg)
        if resampled is None:
            resampled = np.empty(m)
            for j in range(m):
                design[:, 0] = x_tilde[:, j]
                resampled[j], _ = _loglik_stat(design, ys, fit_cfg, theta0=warm)

    p_value = (1 + int(np.sum(resampled >= observed))) / (m + 1)
    return CrtResult(p_value, observed, resampled)


def crt_pvalue(
    observations: Iterable[Observation],
    q: ConditionalModel,
    m: int,
    statistic: str,
    rng: np.random.Generator,
    fit_cfg: FitConfig = FitConfig(),
) -> CrtResult:
    """Nonsequential conditional randomization test on a batch.

    Resampled covariates are drawn row by row from Q_z (m per row,
    consumed in file order).  For the logistic-likelihood statistic the
    model is refit on every resampled design; for abs-correlation the
    statistic is |cor(y, x - E_Q[x])| with the same centering applied to
    resamples.  A resample whose refit fails outright scores -inf; a
    failed fit on the observed data itself forces p = 1.
    """
    xs, zs, ys, _ = _stack(observations)
    return crt_pvalue_from_arrays(xs, zs, ys, q, m, statistic, rng, fit_cfg)


@dataclass(frozen=True)
class LrtResult:
    statistic: float
    dof: int
    p_value: float


def lrt_pvalue_from_arrays(
    xs: np.ndarray, zs: np.ndarray, ys: np.ndarray, fit_cfg: FitConfig = FitConfig()
) -> LrtResult:
    """Array-level LRT; see :func:`lrt_pvalue`."""
    xs = np.asarray(xs, dtype=float)
    if xs.ndim == 1:
        xs = xs[:, None]
    zs = np.asarray(zs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    p_dim = xs.shape[1]
    full_design = np.hstack([xs, zs])
    theta_full, _ = fit_logistic_design(full_design, ys, fit_cfg)
    theta_null, _ = fit_logistic_design(zs, ys, fit_cfg)
    stat = 2.0 * (log_likelihood(full_design, ys, theta_full) - log_likelihood(zs, ys, theta_null))
    if stat < -1e-9:
        raise SeqciError(f"negative LRT statistic {stat}: fits inconsistent")
    stat = max(stat, 0.0)
    return LrtResult(stat, p_dim, float(chi2.sf(stat, p_dim)))


def lrt_pvalue(observations: Iterable[Observation], fit_cfg: FitConfig = FitConfig()) -> LrtResult:
    """Classical asymptotic likelihood ratio test of "all x-coefficients
    zero": twice the log-likelihood gap against chi-square with dim(x)
    degrees of freedom."""
    xs, zs, ys, _ = _stack(observations)
    return lrt_pvalue_from_arrays(xs, zs, ys, fit_cfg)


@dataclass(frozen=True)
class RmleState:
    """Snapshot of the running-MLE e-process after n observations.

    ``log_numerator`` is the sum of (truncated) predictable full-model log
    probabilities past warmup; ``null_log_tail`` is the null-model MLE's
    log-likelihood over the same steps, with the null fit refreshed on all
    n observations.  Warmup steps contribute identical terms to both sides
    and cancel, i.e. factor one.
    """

    n: int
    log_numerator: float
    null_log_tail: float
    log_e: float

    @property
    def e_value(self) -> float:
        return math.exp(self.log_e) if self.log_e < 700 else math.inf


class RmleProcess:
    """Streaming universal-inference e-process for the logistic null.

    The numerator term for observation n uses the full-model MLE on
    observations 1..n-1 (first fit after ``min_fit_n`` observations, 5q by
    default; earlier steps contribute factor one).  The null-model MLE is
    refit on all data every ``refit_every`` steps; between refits the new
    step's term is appended under the stale fit.  A step whose numerator
    side is unavailable (hard fit failure) contributes factor one: it is
    left out of both the numerator and the null tail.
    """

    def __init__(self, p_dim: int, q_dim: int, cfg: FitConfig = FitConfig(), refit_every: int = 1):
        if refit_every < 1:
            raise ValueError("refit_every must be >= 1")
        self.p_dim = int(p_dim)
        self.q_dim = int(q_dim)
        self.cfg = cfg
        self.refit_every = refit_every
        self.warmup = cfg.min_fit_n if cfg.min_fit_n is not None else 5 * self.q_dim
        self._design = _Buffer(self.p_dim + self.q_dim)
        self._z = _Buffer(self.q_dim)
        self._y = _Buffer(1)
        self._theta_full: Optional[np.ndarray] = None
        self._theta_null: Optional[np.ndarray] = None
        self._active: list[int] = []  # 0-based rows contributing to both sides
        self._log_num = 0.0
        self._null_tail = 0.0
        self.state = RmleState(0, 0.0, 0.0, 0.0)

    def _numerator_term(self, obs: Observation) -> float:
        lp = float(self._theta_full[: self.p_dim] @ obs.x + self._theta_full[self.p_dim :] @ obs.z)
        sign = 1.0 if obs.y == 1 else -1.0
        p = float(expit(sign * lp))
        eps = self.cfg.eps_trunc
        if eps > 0:
            p = min(max(p, eps), 1.0 - eps)
        return math.log(p)

    def _null_terms(self, z_rows: np.ndarray, y_rows: np.ndarray) -> float:
        lp = z_rows @ self._theta_null
        signs = 2.0 * y_rows - 1.0
        return float(np.sum(np.log(expit(signs * lp))))

    def _refit_null(self) -> bool:
        try:
            self._theta_null, _ = fit_logistic_design(
                self._z.view(), self._y.view(), self.cfg, theta0=self._theta_null
            )
            return True
        except SeqciError:
            return False  # keep the stale fit, if any

    def update(self, obs: Observation) -> RmleState:
        n = len(self._y) + 1
        term = None
        if n > self.warmup and self._theta_full is not None:
            term = self._numerator_term(obs)  # uses the fit on 1..n-1
        self._design.append(np.concatenate([obs.x, obs.z]))
        self._z.append(obs.z)
        self._y.append(obs.y)

        if n >= self.warmup:
            try:
                theta, _ = fit_logistic_design(
                    self._design.view(), self._y.view(), self.cfg, theta0=self._theta_full
                )
                self._theta_full = theta
            except SeqciError:
                self._theta_full = None

        if term is not None:
            refresh = self._theta_null is None or n % self.refit_every == 0
            if refresh:
                self._refit_null()
            if self._theta_null is None:
                term = None  # no null fit ever succeeded: factor one
            else:
                self._active.append(n - 1)
                self._log_num += term
                if refresh:
                    idx = np.asarray(self._active)
                    self._null_tail = self._null_terms(self._z.view()[idx], self._y.view()[idx])
                else:
                    self._null_tail += self._null_terms(obs.z[None, :], np.array([obs.y]))

        log_e = self._log_num - self._null_tail
        self.state = RmleState(n, self._log_num, self._null_tail, log_e)
        return self.state


def rmle_evalue(
    observations: Iterable[Observation],
    cfg: FitConfig = FitConfig(),
    refit_every: int = 1,
) -> RmleState:
    """E-value of the running-MLE process after the whole prefix."""
    obs_list = list(observations)
    if not obs_list:
        return RmleState(0, 0.0, 0.0, 0.0)
    proc = RmleProcess(obs_list[0].x.size, obs_list[0].z.size, cfg, refit_every)
    state = proc.state
    for obs in obs_list:
        state = proc.update(obs)
    return state
