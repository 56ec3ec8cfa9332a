"""Conditional models Q_z for x given z, and operations on them.

Covers the Gaussian conditionals induced by a joint covariance matrix (the
simulation design), discrete conditionals with enumerable support (used for
exact integration and total-variation oracles), mean-distorted variants for
robustness experiments, least-squares estimation from unlabeled (x, z)
samples, and total-variation distances between discrete conditionals.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, toeplitz

from .errors import (
    DimensionMismatch,
    RankDeficient,
    SingularMatrix,
    SupportMismatch,
    UnsupportedModel,
)

__all__ = [
    "ConditionalModel",
    "GaussianConditional",
    "FixedGaussian",
    "DiscreteConditional",
    "DistortedGaussian",
    "MIN_VARIANCE",
    "toeplitz_joint",
    "gaussian_conditional_from_joint",
    "distort_mean",
    "fit_gaussian_conditional",
    "tv_distance_discrete",
    "tv_distance_product",
    "model_to_json",
    "model_from_json",
]

# Fitted conditional variances are floored here: a degenerate (zero-noise)
# fit would otherwise produce densities and e-factors that blow up.
MIN_VARIANCE = 1e-8

_SQRT_2PI = math.sqrt(2.0 * math.pi)


class ConditionalModel:
    """Conditional law of a univariate x given z: sampling plus, where
    defined, density/pmf evaluation and enumerable support."""

    #: True when the support is finite and enumerable, enabling exact
    #: integration of test functions.
    supports_exact: bool = False

    def sample(self, z, rng: np.random.Generator) -> float:
        return float(self.sample_many(z, 1, rng)[0])

    def sample_many(self, z, m: int, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def mean(self, z) -> float:
        """E[X | Z = z]."""
        raise NotImplementedError

    def density(self, x, z) -> float:
        raise UnsupportedModel(f"{type(self).__name__} has no density")

    def support(self, z) -> np.ndarray:
        raise UnsupportedModel(f"{type(self).__name__} has no enumerable support")

    def weights_at(self, z) -> np.ndarray:
        """Probability vector over ``support(z)``."""
        raise UnsupportedModel(f"{type(self).__name__} has no enumerable support")


def _covariate_part(z, n_weights: int) -> np.ndarray:
    """Strip the leading intercept slot when z carries one.

    Accepts z of length ``n_weights`` (raw covariates) or ``n_weights + 1``
    (with the constant-one intercept in front, as observations carry it).
    """
    z = np.atleast_1d(np.asarray(z, dtype=float))
    if z.size == n_weights:
        return z
    if z.size == n_weights + 1:
        return z[1:]
    raise DimensionMismatch(f"z has length {z.size}, expected {n_weights} or {n_weights + 1}")


@dataclass(frozen=True)
class GaussianConditional(ConditionalModel):
    """X | Z = z  ~  Normal(intercept + weights @ z, sigma2)."""

    weights: np.ndarray
    intercept: float
    sigma2: float

    def __post_init__(self):
        object.__setattr__(self, "weights", np.atleast_1d(np.asarray(self.weights, dtype=float)))
        object.__setattr__(self, "intercept", float(self.intercept))
        object.__setattr__(self, "sigma2", float(self.sigma2))
        if not self.sigma2 > 0:
            raise ValueError("sigma2 must be positive")
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("weights must be finite")

    def mean(self, z) -> float:
        zc = _covariate_part(z, self.weights.size)
        return self.intercept + float(self.weights @ zc)

    def sample_many(self, z, m, rng):
        return rng.normal(self.mean(z), math.sqrt(self.sigma2), size=m)

    def density(self, x, z) -> float:
        mu = self.mean(z)
        sd = math.sqrt(self.sigma2)
        u = (float(x) - mu) / sd
        return math.exp(-0.5 * u * u) / (sd * _SQRT_2PI)


@dataclass(frozen=True)
class FixedGaussian(ConditionalModel):
    """Normal(mu, sigma2) regardless of z.

    Used in CSV stream mode, where each row carries its own precomputed
    conditional mean and standard deviation.
    """

    mu: float
    sigma2: float

    def __post_init__(self):
        if not self.sigma2 > 0:
            raise ValueError("sigma2 must be positive")

    def mean(self, z) -> float:
        return self.mu

    def sample_many(self, z, m, rng):
        return rng.normal(self.mu, math.sqrt(self.sigma2), size=m)

    def density(self, x, z) -> float:
        sd = math.sqrt(self.sigma2)
        u = (float(x) - self.mu) / sd
        return math.exp(-0.5 * u * u) / (sd * _SQRT_2PI)


class DiscreteConditional(ConditionalModel):
    """Finite-support conditional: one probability vector per z value.

    z values are matched exactly against a declared finite alphabet
    (continuous z is not supported for discrete models).
    """

    supports_exact = True

    def __init__(self, support, table: dict):
        self._support = np.atleast_1d(np.asarray(support, dtype=float))
        self._table = {}
        for key, probs in table.items():
            probs = np.asarray(probs, dtype=float)
            if probs.shape != self._support.shape:
                raise ValueError("each probability vector must match the support length")
            if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-12:
                raise ValueError(f"probabilities for z={key} must be nonnegative and sum to 1")
            self._table[self._normalize_key(key)] = probs

    @staticmethod
    def _normalize_key(z) -> tuple:
        arr = np.atleast_1d(np.asarray(z, dtype=float))
        return tuple(arr.tolist())

    def support(self, z=None) -> np.ndarray:
        return self._support

    def weights_at(self, z) -> np.ndarray:
        key = self._normalize_key(z)
        try:
            return self._table[key]
        except KeyError:
            raise KeyError(f"z value {key} not in the declared alphabet") from None

    def mean(self, z) -> float:
        return float(self._support @ self.weights_at(z))

    def pmf(self, x, z) -> float:
        probs = self.weights_at(z)
        matches = np.nonzero(self._support == float(x))[0]
        return float(probs[matches[0]]) if matches.size else 0.0

    def density(self, x, z) -> float:
        return self.pmf(x, z)

    def sample_many(self, z, m, rng):
        # inverse-CDF sampling; much cheaper than rng.choice for small supports
        cum = np.cumsum(self.weights_at(z))
        idx = np.searchsorted(cum, rng.random(m), side="right")
        return self._support[np.minimum(idx, self._support.size - 1)]

    @property
    def table(self) -> dict:
        return dict(self._table)


_DISTORTIONS = ("cubic", "quadratic", "tanh")


@dataclass(frozen=True)
class DistortedGaussian(ConditionalModel):
    """Gaussian conditional with a deliberately misspecified mean.

    The base model's conditional mean mu is replaced by
      cubic:      mu - xi * mu^3
      quadratic:  mu + xi * mu^2
      tanh:       tanh(xi * mu) / xi    (identity in the limit xi -> 0)
    while the conditional variance is left untouched.
    """

    base: GaussianConditional
    kind: str
    xi: float

    def __post_init__(self):
        if self.kind not in _DISTORTIONS:
            raise ValueError(f"kind must be one of {_DISTORTIONS}")
        if self.xi < 0:
            raise ValueError("xi must be >= 0")

    def mean(self, z) -> float:
        mu = self.base.mean(z)
        if self.xi == 0.0:
            return mu
        if self.kind == "cubic":
            return mu - self.xi * mu**3
        if self.kind == "quadratic":
            return mu + self.xi * mu**2
        return math.tanh(self.xi * mu) / self.xi

    def sample_many(self, z, m, rng):
        return rng.normal(self.mean(z), math.sqrt(self.base.sigma2), size=m)

    def density(self, x, z) -> float:
        mu = self.mean(z)
        sd = math.sqrt(self.base.sigma2)
        u = (float(x) - mu) / sd
        return math.exp(-0.5 * u * u) / (sd * _SQRT_2PI)


def distort_mean(spec: GaussianConditional, kind: str, xi: float) -> ConditionalModel:
    """Misspecified copy of a Gaussian conditional (see DistortedGaussian)."""
    return DistortedGaussian(spec, kind, float(xi))


def toeplitz_joint(q: int, alternating: bool = False) -> np.ndarray:
    """q x q covariance with entries 1/(1+|i-j|), or (-1)^(i-j)/(1+|i-j|)
    when ``alternating`` (negative correlations between the covariates)."""
    if q < 2:
        raise ValueError("q must be >= 2")
    lags = np.arange(q)
    col = 1.0 / (1.0 + lags)
    if alternating:
        col = col * (-1.0) ** lags
    return toeplitz(col)


def _solve_spd(mat: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve an SPD system by Cholesky; never form an explicit inverse."""
    try:
        factor = cho_factor(mat, lower=True)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrix(str(exc)) from None
    diag = np.diag(factor[0])
    if np.min(diag) ** 2 <= 1e-10:
        raise SingularMatrix("smallest Cholesky pivot below 1e-10")
    return cho_solve(factor, rhs)


def gaussian_conditional_from_joint(sigma: np.ndarray) -> GaussianConditional:
    """Conditional of the first coordinate given the rest, for a jointly
    Gaussian zero-mean vector with covariance ``sigma``:
    weights = Sigma_{1,-1} Sigma_{-1,-1}^{-1},
    sigma2  = Sigma_{1,1} - Sigma_{1,-1} Sigma_{-1,-1}^{-1} Sigma_{-1,1}.
    """
    sigma = np.asarray(sigma, dtype=float)
    if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1] or sigma.shape[0] < 2:
        raise ValueError("sigma must be a square matrix of size >= 2")
    if not np.allclose(sigma, sigma.T, atol=1e-12):
        raise ValueError("sigma must be symmetric")
    cross = sigma[0, 1:]
    weights = _solve_spd(sigma[1:, 1:], cross)
    sigma2 = float(sigma[0, 0] - cross @ weights)
    if sigma2 <= 0:
        raise SingularMatrix("conditional variance is not positive")
    return GaussianConditional(weights=weights, intercept=0.0, sigma2=sigma2)


def fit_gaussian_conditional(x, z) -> GaussianConditional:
    """Least-squares fit of x on z (intercept added here; pass z without a
    constant column).  The conditional variance is the maximum-likelihood
    mean squared residual (divisor n), floored at MIN_VARIANCE."""
    x = np.asarray(x, dtype=float).ravel()
    z = np.asarray(z, dtype=float)
    if z.ndim == 1:
        z = z[:, None]
    n, k = z.shape
    if n <= k + 1:
        raise RankDeficient(f"need more than {k + 1} samples to fit, got {n}")
    design = np.column_stack([np.ones(n), z])
    coef, _, rank, _ = np.linalg.lstsq(design, x, rcond=None)
    if rank < design.shape[1]:
        raise RankDeficient(f"design has rank {rank} < {design.shape[1]}")
    residuals = x - design @ coef
    sigma2 = max(float(residuals @ residuals) / n, MIN_VARIANCE)
    return GaussianConditional(weights=coef[1:], intercept=float(coef[0]), sigma2=sigma2)


def _check_same_support(p: DiscreteConditional, q: DiscreteConditional) -> None:
    if not np.array_equal(p.support(), q.support()):
        raise SupportMismatch("discrete models have different supports")


def tv_distance_discrete(p: DiscreteConditional, q: DiscreteConditional, z) -> float:
    """Total variation between the two conditionals at a single z value:
    half the L1 distance between the probability vectors."""
    _check_same_support(p, q)
    return 0.5 * float(np.abs(p.weights_at(z) - q.weights_at(z)).sum())


def tv_distance_product(
    p: DiscreteConditional,
    q: DiscreteConditional,
    z_seq,
    enumeration_limit: int = 1_000_000,
) -> tuple[float, str]:
    """Total variation between the product measures of p and q along a z
    sequence.

    Exact by enumeration of all |support|^n outcomes when that count does
    not exceed ``enumeration_limit``; otherwise falls back to the
    subadditive upper bound (sum of per-step distances) and says so in the
    returned method tag ("exact" or "upper-bound").
    """
    _check_same_support(p, q)
    z_seq = list(z_seq)
    n = len(z_seq)
    k = p.support().size
    if k**n <= enumeration_limit:
        joint_p = np.array([1.0])
        joint_q = np.array([1.0])
        for z in z_seq:
            joint_p = np.outer(joint_p, p.weights_at(z)).ravel()
            joint_q = np.outer(joint_q, q.weights_at(z)).ravel()
        return 0.5 * float(np.abs(joint_p - joint_q).sum()), "exact"
    bound = sum(tv_distance_discrete(p, q, z) for z in z_seq)
    return min(bound, 1.0), "upper-bound"


def model_to_json(model: ConditionalModel) -> str:
    """Serialize a Gaussian or discrete conditional; exact round-trip."""
    if isinstance(model, GaussianConditional):
        payload = {
            "type": "gaussian",
            "weights": model.weights.tolist(),
            "intercept": model.intercept,
            "sigma2": model.sigma2,
        }
    elif isinstance(model, DiscreteConditional):
        payload = {
            "type": "discrete",
            "support": model.support().tolist(),
            "table": {json.dumps(list(k)): v.tolist() for k, v in model.table.items()},
        }
    else:
        raise UnsupportedModel(f"cannot serialize {type(model).__name__}")
    return json.dumps(payload, sort_keys=True)


def model_from_json(text: str) -> ConditionalModel:
    payload = json.loads(text)
    kind = payload.get("type")
    if kind == "gaussian":
        return GaussianConditional(
            weights=np.asarray(payload["weights"], dtype=float),
            intercept=payload["intercept"],
            sigma2=payload["sigma2"],
        )
    if kind == "discrete":
        table = {tuple(json.loads(k)): np.asarray(v, dtype=float) for k, v in payload["table"].items()}
        return DiscreteConditional(payload["support"], table)
    raise UnsupportedModel(f"unknown model type {kind!r}")
