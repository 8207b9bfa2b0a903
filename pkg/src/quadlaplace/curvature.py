"""Per-datum log-likelihood curvature of the quadratic network model.

For a datapoint ``(x, y)`` and MAP parameters ``theta*`` the operator is

    A v = r * H(x) v - Lambda * J(x) (J(x)^T v)

with ``r`` the likelihood residual and ``Lambda`` the noise precision, both at
``f(x, theta*)``. Its magnitude-dominant eigenvector, found by power
iteration started at the Jacobian, gives a rank-one precision factor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .likelihood import GaussianLikelihood
from .nnet import HvpWorkspace, NetworkSpec, forward, hvp, hvp_batch, jacobian, jacobian_batch, predict

SCALING_MODES = ("rayleigh", "unit")
TINY = 1e-300


class CurvatureOperator:
    """Matrix-free ``A`` for one datapoint; ``J``, ``f`` and ``r`` are cached."""

    def __init__(self, spec: NetworkSpec, theta_star, x, y, lik: GaussianLikelihood):
        self.spec = spec
        self.theta = np.asarray(theta_star, dtype=np.float64)
        self.x = np.asarray(x, dtype=np.float64)
        self.y = float(y)
        self.lik = lik
        self.f = forward(spec, self.theta, self.x)
        self.jac = jacobian(spec, self.theta, self.x)
        self.resid = lik.residual(self.y, self.f)
        self.noise = lik.noise()
        self._ws = HvpWorkspace(spec)

    @property
    def dim(self) -> int:
        return self.spec.n_params

    def apply(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.dim,):
            raise ValueError(f"v must have shape ({self.dim},), got {v.shape}")
        out = self.resid * hvp(self.spec, self.theta, self.x, v, self._ws)
        out -= self.noise * (self.jac @ v) * self.jac
        return out

    __call__ = apply

    def dense(self, cap: int = 2000) -> np.ndarray:
        """Materialized ``A`` (diagnostics and tests only)."""
        from .nnet import dense_hessian
        H = dense_hessian(self.spec, self.theta, self.x, cap=cap)
        return self.resid * H - self.noise * np.outer(self.jac, self.jac)


class MatrixOperator:
    """Wrap an explicit symmetric matrix so it can be fed to :func:`power_iteration`."""

    def __init__(self, matrix):
        self.matrix = np.asarray(matrix, dtype=np.float64)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def apply(self, v):
        return self.matrix @ v

    __call__ = apply


@dataclass(frozen=True)
class RefinedFactor:
    z_hat: np.ndarray
    rayleigh: float
    scaled_factor: np.ndarray
    clamped: bool


def _canonical_sign(z, ref):
    """Flip ``z`` to point along ``ref``; fall back to first nonzero entry positive."""
    d = float(z @ ref)
    if d < 0:
        return -z
    if d > 0:
        return z
    nz = np.flatnonzero(z)
    if nz.size and z[nz[0]] < 0:
        return -z
    return z


def power_iteration(op, z0, k: int) -> RefinedFactor:
    """Exactly ``k`` normalized multiplications by ``op`` starting from ``z0``.

    ``op`` is anything with an ``apply`` method, a callable, or a matrix. The
    returned ``scaled_factor`` uses rayleigh scaling; see :func:`scale_factor`
    for the alternatives.
    """
    if k < 1:
        raise ValueError("power iteration needs k >= 1")
    if isinstance(op, np.ndarray):
        op = MatrixOperator(op)
    apply = op.apply if hasattr(op, "apply") else op
    z0 = np.asarray(z0, dtype=np.float64)
    n0 = np.linalg.norm(z0)
    if n0 == 0.0:
        zero = np.zeros_like(z0)
        return RefinedFactor(zero, 0.0, zero.copy(), True)
    z = z0 / n0
    for _ in range(k):
        w = apply(z)
        nw = np.linalg.norm(w)
        if nw < TINY:
            break
        z = w / nw
    z = _canonical_sign(z, z0)
    lam = float(z @ apply(z))
    return _with_scaling(z, lam, "rayleigh")


def _with_scaling(z, lam, mode):
    if mode == "rayleigh":
        clamped = lam >= 0.0
        factor = np.zeros_like(z) if clamped else np.sqrt(-lam) * z
    elif mode == "unit":
        clamped = False
        factor = z.copy()
    else:
        raise ValueError(f"scaling_mode must be one of {SCALING_MODES}, got {mode!r}")
    return RefinedFactor(z, lam, factor, bool(clamped))


def scale_factor(factor: RefinedFactor, scaling_mode: str) -> RefinedFactor:
    """Re-derive ``scaled_factor`` under another scaling mode."""
    return _with_scaling(factor.z_hat, factor.rayleigh, scaling_mode)


def refined_factor(spec: NetworkSpec, theta_star, lik: GaussianLikelihood, x, y,
                   k: int = 10, scaling_mode: str = "rayleigh") -> RefinedFactor:
    """Refined-Jacobian factor for one datapoint, power iteration seeded at ``J(x)``."""
    if scaling_mode not in SCALING_MODES:
        raise ValueError(f"scaling_mode must be one of {SCALING_MODES}, got {scaling_mode!r}")
    op = CurvatureOperator(spec, theta_star, x, y, lik)
    fac = power_iteration(op, op.jac, k)
    if fac.z_hat.any():
        return _with_scaling(fac.z_hat, fac.rayleigh, scaling_mode)
    # annihilated start: zero factor whatever the mode
    return fac


@dataclass(frozen=True)
class FactorBatch:
    """Refined factors for many datapoints, one row each."""

    z_hat: np.ndarray          # (N, P)
    rayleigh: np.ndarray       # (N,)
    factors: np.ndarray        # (N, P) scaled factors
    clamped: np.ndarray        # (N,) bool

    @property
    def n_clamped(self) -> int:
        return int(self.clamped.sum())


def refined_factors(spec: NetworkSpec, theta_star, lik: GaussianLikelihood, X, y,
                    k: int = 10, scaling_mode: str = "rayleigh") -> FactorBatch:
    """Vectorized :func:`refined_factor` over the rows of ``X``.

    Each row follows the single-datapoint recursion exactly, including the
    early stop when its iterate is annihilated.
    """
    if scaling_mode not in SCALING_MODES:
        raise ValueError(f"scaling_mode must be one of {SCALING_MODES}, got {scaling_mode!r}")
    if k < 1:
        raise ValueError("power iteration needs k >= 1")
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    N, P = X.shape[0], spec.n_params
    if N == 0:
        empty = np.zeros((0, P))
        return FactorBatch(empty, np.zeros(0), empty.copy(), np.zeros(0, dtype=bool))
    f = predict(spec, theta_star, X)
    J = jacobian_batch(spec, theta_star, X)
    r = lik.residual(y, f)
    lam_noise = lik.noise()

    def apply(Z):
        out = r[:, None] * hvp_batch(spec, theta_star, X, Z)
        out -= lam_noise * np.einsum("np,np->n", J, Z)[:, None] * J
        return out

    n0 = np.linalg.norm(J, axis=1)
    live = n0 > 0
    Z = np.zeros_like(J)
    Z[live] = J[live] / n0[live, None]
    for _ in range(k):
        if not live.any():
            break
        W = apply(Z)
        nw = np.linalg.norm(W, axis=1)
        step = live & (nw >= TINY)
        Z[step] = W[step] / nw[step, None]
        live = step
    for n in range(N):
        if n0[n] > 0:
            Z[n] = _canonical_sign(Z[n], J[n])
    lam = np.einsum("np,np->n", Z, apply(Z))
    zero_start = n0 == 0
    if scaling_mode == "rayleigh":
        clamped = (lam >= 0) | zero_start
        scale = np.where(clamped, 0.0, np.sqrt(np.maximum(-lam, 0.0)))
    else:
        clamped = zero_start.copy()
        scale = np.where(zero_start, 0.0, 1.0)
    return FactorBatch(Z, lam, scale[:, None] * Z, clamped)


def lla_factors(spec: NetworkSpec, theta_star, lik: GaussianLikelihood, X) -> np.ndarray:
    """GGN factors ``sqrt(Lambda) * J(x_n)`` stacked by row."""
    return np.sqrt(lik.noise()) * jacobian_batch(spec, theta_star, X)
