"""Low-rank Gaussian posteriors for LLA/QLA, predictives and evidence tuning.

A posterior ``N(theta*, Sigma)`` is stored through its precision

    Sigma^{-1} = Z^T Z + I / s0^2

where the rows of ``Z`` are per-datum rank-one factors. All covariance work
goes through the N x N matrix ``M = I + s0^2 Z Z^T`` (Woodbury identity), so
Sigma itself is only materialized on request for small P.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .curvature import FactorBatch, lla_factors, refined_factors
from .likelihood import LOG_2PI, GaussianLikelihood
from .nnet import DEFAULT_DENSE_CAP, CapacityError, NetworkSpec, dense_hessian, forward, jacobian, \
    jacobian_batch, predict


class NumericalFailure(ArithmeticError):
    """A matrix that must be positive definite was not."""


@dataclass(frozen=True)
class IsotropicPrior:
    variance: float

    def __post_init__(self):
        v = float(self.variance)
        if not (math.isfinite(v) and v > 0):
            raise ValueError(f"prior variance must be finite and > 0, got {self.variance!r}")
        object.__setattr__(self, "variance", v)


@dataclass(frozen=True)
class PredictiveGaussian:
    mean: float
    variance: float
    includes_observation_noise: bool = False

    def __post_init__(self):
        if not (math.isfinite(self.mean) and math.isfinite(self.variance)) or self.variance < 0:
            raise ValueError(f"invalid predictive (mean={self.mean}, variance={self.variance})")

    @property
    def std(self) -> float:
        return math.sqrt(self.variance)


def _cholesky(A, what):
    try:
        return linalg.cho_factor(A, lower=True, check_finite=True)
    except (linalg.LinAlgError, ValueError) as exc:
        raise NumericalFailure(f"{what} is not positive definite") from exc


@dataclass
class LowRankPosterior:
    """Gaussian posterior with precision ``Z^T Z + I / prior.variance``."""

    theta_star: np.ndarray
    prior: IsotropicPrior
    factors: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.theta_star = np.asarray(self.theta_star, dtype=np.float64)
        P = self.theta_star.shape[0]
        Z = np.asarray(self.factors, dtype=np.float64)
        if Z.size == 0:
            Z = Z.reshape(0, P)
        if Z.ndim != 2 or Z.shape[1] != P:
            raise ValueError(f"factors must have shape (N, {P}), got {Z.shape}")
        self.factors = Z
        s0 = self.prior.variance
        core = np.eye(Z.shape[0]) + s0 * (Z @ Z.T)
        self._core = _cholesky(core, "posterior core matrix") if Z.shape[0] else None

    @property
    def n_params(self) -> int:
        return self.theta_star.shape[0]

    @property
    def n_factors(self) -> int:
        return self.factors.shape[0]

    def quadform(self, v) -> float:
        """``v^T Sigma v``."""
        return float(self.quadform_rows(np.asarray(v, dtype=np.float64)[None, :])[0])

    def quadform_rows(self, V) -> np.ndarray:
        """``v^T Sigma v`` for every row of ``V``."""
        V = np.asarray(V, dtype=np.float64)
        s0 = self.prior.variance
        q = s0 * np.einsum("np,np->n", V, V)
        if self._core is not None:
            U = self.factors @ V.T                       # (N, rows)
            sol = linalg.cho_solve(self._core, U)
            q -= s0 * s0 * np.einsum("nr,nr->r", U, sol)
        return np.maximum(q, 0.0)

    def precision_dense(self, cap: int = DEFAULT_DENSE_CAP) -> np.ndarray:
        if self.n_params > cap:
            raise CapacityError(f"dense precision needs P={self.n_params} <= cap={cap}")
        return self.factors.T @ self.factors + np.eye(self.n_params) / self.prior.variance

    def covariance_dense(self, cap: int = DEFAULT_DENSE_CAP) -> np.ndarray:
        """Sigma from the Woodbury form, ``s0 I - s0^2 Z^T M^{-1} Z``."""
        if self.n_params > cap:
            raise CapacityError(f"dense covariance needs P={self.n_params} <= cap={cap}")
        s0 = self.prior.variance
        S = s0 * np.eye(self.n_params)
        if self._core is not None:
            S -= s0 * s0 * self.factors.T @ linalg.cho_solve(self._core, self.factors)
        return 0.5 * (S + S.T)


def posterior_quadform(post: LowRankPosterior, v) -> float:
    return post.quadform(v)


def build_lla_posterior(spec: NetworkSpec, theta_star, lik: GaussianLikelihood, X,
                        prior_var: float) -> LowRankPosterior:
    """GGN posterior: factor rows ``sqrt(Lambda) J(x_n)``."""
    X = np.asarray(X, dtype=np.float64).reshape(-1, spec.input_dim)
    Z = lla_factors(spec, theta_star, lik, X)
    return LowRankPosterior(theta_star, IsotropicPrior(prior_var), Z,
                            meta={"method": "lla", "noise_precision": lik.noise_precision})


def build_qla_posterior(spec: NetworkSpec, theta_star, lik: GaussianLikelihood, X, y,
                        prior_var: float, k: int = 10, scaling_mode: str = "rayleigh",
                        return_factors: bool = False):
    """Refined-Jacobian posterior: factor rows from per-datum power iteration."""
    X = np.asarray(X, dtype=np.float64).reshape(-1, spec.input_dim)
    fb: FactorBatch = refined_factors(spec, theta_star, lik, X, y, k=k, scaling_mode=scaling_mode)
    post = LowRankPosterior(theta_star, IsotropicPrior(prior_var), fb.factors,
                            meta={"method": "qla", "noise_precision": lik.noise_precision,
                                  "power_iterations": k, "scaling_mode": scaling_mode,
                                  "n_clamped": fb.n_clamped})
    if return_factors:
        return post, fb
    return post


def glm_predictive(post: LowRankPosterior, spec: NetworkSpec, x, lik: GaussianLikelihood,
                   with_noise: bool = True) -> PredictiveGaussian:
    """Linearized-model predictive ``N(f(x, theta*), J^T Sigma J [+ 1/beta])``."""
    mean = forward(spec, post.theta_star, x)
    var = post.quadform(jacobian(spec, post.theta_star, x))
    if with_noise:
        var += lik.noise_variance
    return PredictiveGaussian(mean, var, with_noise)


def glm_predictive_batch(post: LowRankPosterior, spec: NetworkSpec, X, lik: GaussianLikelihood,
                         with_noise: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`glm_predictive`; returns ``(means, variances)``."""
    means = predict(spec, post.theta_star, X)
    var = post.quadform_rows(jacobian_batch(spec, post.theta_star, X))
    if with_noise:
        var = var + lik.noise_variance
    return means, var


def qte_predictive_diagnostic(post: LowRankPosterior, spec: NetworkSpec, x,
                              cap: int = DEFAULT_DENSE_CAP) -> PredictiveGaussian:
    """Predictive moments of the quadratic model (dense; diagnostic use only).

    mean = f + tr(Sigma H) / 2,  variance = J^T Sigma J + tr((H Sigma)^2) / 2
    """
    S = post.covariance_dense(cap)
    H = dense_hessian(spec, post.theta_star, x, cap=cap)
    J = jacobian(spec, post.theta_star, x)
    HS = H @ S
    mean = forward(spec, post.theta_star, x) + 0.5 * np.trace(HS)
    var = float(J @ S @ J) + 0.5 * float(np.sum(HS * HS.T))
    return PredictiveGaussian(float(mean), max(var, 0.0), False)


# ---------------------------------------------------------------------------
# evidence of the linearized model
# ---------------------------------------------------------------------------

def _evidence_targets(spec, theta_star, X, y, J, prior_mean):
    r = np.asarray(y, dtype=np.float64) - predict(spec, theta_star, X)
    if prior_mean == "map":
        return r
    if prior_mean == "zero":
        return r + J @ np.asarray(theta_star, dtype=np.float64)
    raise ValueError(f"prior_mean must be 'map' or 'zero', got {prior_mean!r}")


def log_marginal_likelihood(spec: NetworkSpec, theta_star, X, y, prior_var: float,
                            noise_prec: float, prior_mean: str = "map") -> float:
    """Log evidence of the linear-Gaussian surrogate built from LLA Jacobians.

    The surrogate is ``y_n ~ N(f_n + J_n (theta - theta*), 1/beta)``. With the
    prior centred at ``theta*`` (``prior_mean="map"``) the marginal of the MAP
    residuals ``y - f`` is ``N(0, C)`` with ``C = I / beta + s0^2 J J^T``.
    With ``prior_mean="zero"`` the prior is ``N(0, s0^2 I)`` and the same
    ``C`` applies to the shifted targets ``y - f + J theta*``.
    """
    X = np.asarray(X, dtype=np.float64).reshape(-1, spec.input_dim)
    N = X.shape[0]
    if N == 0:
        return 0.0
    J = jacobian_batch(spec, theta_star, X)
    r = _evidence_targets(spec, theta_star, X, y, J, prior_mean)
    C = np.eye(N) / noise_prec + prior_var * (J @ J.T)
    cf = _cholesky(C, "evidence covariance")
    alpha = linalg.cho_solve(cf, r)
    logdet = 2.0 * np.sum(np.log(np.diag(cf[0])))
    return float(-0.5 * r @ alpha - 0.5 * logdet - 0.5 * N * LOG_2PI)


class EvidenceSurface:
    """Evidence as a cheap function of ``(s0^2, beta)``.

    One eigendecomposition of the Jacobian Gram matrix makes every
    subsequent evaluation O(N).
    """

    def __init__(self, spec: NetworkSpec, theta_star, X, y, prior_mean: str = "map"):
        X = np.asarray(X, dtype=np.float64).reshape(-1, spec.input_dim)
        J = jacobian_batch(spec, theta_star, X)
        r = _evidence_targets(spec, theta_star, X, y, J, prior_mean)
        evals, evecs = np.linalg.eigh(J @ J.T)
        self.eigvals = np.maximum(evals, 0.0)
        self.proj2 = (evecs.T @ r) ** 2
        self.n = X.shape[0]

    def __call__(self, prior_var: float, noise_prec: float) -> float:
        c = 1.0 / noise_prec + prior_var * self.eigvals
        return float(-0.5 * np.sum(self.proj2 / c) - 0.5 * np.sum(np.log(c)) - 0.5 * self.n * LOG_2PI)


@dataclass(frozen=True)
class HyperparameterFit:
    prior_var: float
    noise_prec: float
    log_evidence: float
    # final grid: log10 spacing along each axis
    step_log10_prior: float
    step_log10_noise: float


def fit_hyperparameters(spec: NetworkSpec, theta_star, X, y, n_points: int = 61,
                        prior_range=(-3.0, 3.0), noise_range=(-2.0, 2.0),
                        refinements: int = 3, full: bool = False, prior_mean: str = "zero"):
    """Coordinate ascent on log-spaced grids, then ``refinements`` zoom-ins x10.

    The default ``prior_mean="zero"`` scores the zero-mean prior: centring
    the prior at ``theta*`` makes the MAP residuals (nearly orthogonal to
    the Jacobian columns at a stationary point) look like pure noise, and the
    prior variance then runs to the bottom of its range.

    Returns ``(prior_var, noise_prec)``, or a :class:`HyperparameterFit` when
    ``full`` is set.
    """
    surface = EvidenceSurface(spec, theta_star, X, y, prior_mean)
    lo_s, hi_s = prior_range
    lo_b, hi_b = noise_range
    cs, cb = 0.5 * (lo_s + hi_s), 0.5 * (lo_b + hi_b)
    hs, hb = 0.5 * (hi_s - lo_s), 0.5 * (hi_b - lo_b)
    best = surface(10.0 ** cs, 10.0 ** cb)
    for _ in range(refinements + 1):
        # zoomed grids never leave the requested ranges
        gs = np.unique(np.clip(np.linspace(cs - hs, cs + hs, n_points), lo_s, hi_s))
        gb = np.unique(np.clip(np.linspace(cb - hb, cb + hb, n_points), lo_b, hi_b))
        for _sweep in range(200):
            moved = False
            vals = [surface(10.0 ** s, 10.0 ** cb) for s in gs]
            i = int(np.argmax(vals))
            if vals[i] > best:
                best, cs, moved = vals[i], gs[i], True
            vals = [surface(10.0 ** cs, 10.0 ** b) for b in gb]
            j = int(np.argmax(vals))
            if vals[j] > best:
                best, cb, moved = vals[j], gb[j], True
            if not moved:
                break
        hs /= 10.0
        hb /= 10.0
    step_s = 2 * hs * 10.0 / (n_points - 1)
    step_b = 2 * hb * 10.0 / (n_points - 1)
    s0, beta = 10.0 ** cs, 10.0 ** cb
    if full:
        return HyperparameterFit(s0, beta, best, step_s, step_b)
    return s0, beta


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def save_posterior(path, post: LowRankPosterior, spec: NetworkSpec) -> None:
    meta = {"spec": spec.to_dict(), "prior_variance": post.prior.variance, **post.meta}
    with open(path, "wb") as fh:
        np.savez(fh, theta_star=post.theta_star.astype("<f8"), factors=post.factors.astype("<f8"),
                 meta=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8))


def load_posterior(path) -> tuple[LowRankPosterior, NetworkSpec]:
    with np.load(path) as z:
        meta = json.loads(z["meta"].tobytes().decode())
        theta = z["theta_star"].astype(np.float64)
        factors = z["factors"].astype(np.float64)
    spec = NetworkSpec.from_dict(meta.pop("spec"))
    prior = IsotropicPrior(meta.pop("prior_variance"))
    return LowRankPosterior(theta, prior, factors, meta=meta), spec
