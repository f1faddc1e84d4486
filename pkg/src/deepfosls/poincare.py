"""Energy-norm Poincare constant: discrete estimate on the trial space and a 1D two-material reference."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg as sla
from scipy.optimize import brentq

from .errors import InvalidArgumentError, NumericalError
from .fields import Lifting
from .geometry import QuadratureRule
from .network import Network, SpanningSample, spanning_sample

DEFAULT_ALPHA1 = 1e-8
DEFAULT_ALPHA2 = 1e-10


@dataclass(frozen=True)
class PoincareEstimate:
    value: float
    lambda_min: float
    iteration: int
    running_max: float

    def updated(self, new: "PoincareEstimate") -> "PoincareEstimate":
        """Fold a newer estimate in, keeping the largest constant seen so far."""
        return PoincareEstimate(new.value, new.lambda_min, new.iteration, max(self.running_max, new.value))


def mass_from_sample(sample: SpanningSample, weights: np.ndarray) -> np.ndarray:
    phi = sample.phi * np.sqrt(weights)[:, None]
    M = phi.T @ phi
    return 0.5 * (M + M.T)


def assemble_mass(net: Network, lifting: Lifting, rule: QuadratureRule) -> np.ndarray:
    return mass_from_sample(spanning_sample(net, lifting, rule.points), rule.weights)


def estimate_poincare(
    H_uu: np.ndarray,
    M: np.ndarray,
    D_u: np.ndarray,
    alpha1: float = DEFAULT_ALPHA1,
    alpha2: float = DEFAULT_ALPHA2,
    iteration: int = 0,
    previous: Optional[PoincareEstimate] = None,
) -> PoincareEstimate:
    """Smallest eigenvalue of ``(H~ + a1 I) a = lam (M~ + a2 I) a`` with ``X~ = D^-1 X D^-1``.

    Pass ``alpha1 = alpha2 = 0`` only for well-posed pencils (tests).
    """
    if alpha1 < 0 or alpha2 < 0:
        raise InvalidArgumentError("regularisation parameters must be non-negative")
    D_u = np.asarray(D_u, dtype=float)
    scale = np.outer(D_u, D_u)
    n = D_u.size
    A = np.asarray(H_uu) / scale + alpha1 * np.eye(n)
    B = np.asarray(M) / scale + alpha2 * np.eye(n)
    try:
        # Cholesky of B followed by a symmetric standard eigensolve
        lam = sla.eigh(A, B, eigvals_only=True, subset_by_index=[0, 0])[0]
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise NumericalError(f"generalised eigensolve failed: {exc}") from exc
    if not (np.isfinite(lam) and lam > 0):
        raise NumericalError(f"smallest eigenvalue is not positive: {lam}")
    value = float(lam) ** -0.5
    running = value if previous is None else max(previous.running_max, value)
    return PoincareEstimate(value, float(lam), int(iteration), running)


def _dispersion(lam, k1, k2, x0):
    # The tangent form sqrt(k2) tan(a x0) + sqrt(k1) tan(b (1 - x0)) = 0 multiplied by
    # cos(a x0) cos(b (1 - x0)); same roots, no poles.
    a = np.sqrt(lam / k1)
    b = np.sqrt(lam / k2)
    s = 1.0 - x0
    return np.sqrt(k2) * np.sin(a * x0) * np.cos(b * s) + np.sqrt(k1) * np.cos(a * x0) * np.sin(b * s)


def oracle_lambda1(kappa1: float, kappa2: float, x0: float, grid_points: int = 10_000) -> float:
    """Smallest Dirichlet eigenvalue of ``-(kappa u')' = lam u`` on (0, 1) with a jump at ``x0``."""
    kappa1, kappa2, x0 = float(kappa1), float(kappa2), float(x0)
    if not (kappa1 > 0 and kappa2 > 0):
        raise InvalidArgumentError("coefficients must be positive")
    if not 0.0 < x0 < 1.0:
        raise InvalidArgumentError("x0 must lie strictly inside (0, 1)")
    # Rayleigh quotient bounds: min(k) pi^2 <= lam_1 <= max(k) pi^2
    lo = 0.5 * min(kappa1, kappa2) * np.pi**2
    hi = 2.0 * max(kappa1, kappa2) * np.pi**2
    grid = np.geomspace(lo, hi, grid_points)
    vals = _dispersion(grid, kappa1, kappa2, x0)
    if vals[0] <= 0:
        raise NumericalError(f"dispersion relation not positive at the scan start {lo:.6e}")
    change = np.flatnonzero(vals <= 0)
    if change.size == 0:
        raise NumericalError(f"no sign change of the dispersion relation on [{lo:.6e}, {hi:.6e}]")
    i = change[0]
    if vals[i] == 0:
        return float(grid[i])
    return float(brentq(_dispersion, grid[i - 1], grid[i], args=(kappa1, kappa2, x0), xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500))


def oracle_poincare(kappa1: float, kappa2: float, x0: float) -> float:
    return oracle_lambda1(kappa1, kappa2, x0) ** -0.5
