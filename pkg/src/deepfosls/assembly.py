"""Block Gram assembly of the weighted FOSLS functional, diagonal scaling and the Tikhonov solve.

Coefficient ordering: the ``n_u`` potential coefficients first, then the flux
coefficients grouped by direction ``k`` and, inside each group, by unit ``j``
(flat index ``n_u + k * n_L + j``).

At every point the functional is ``|B1 c|^2 + |B2 c - sqrt(2) C f|^2`` with

    B1 c = kappa^{1/2} grad u + kappa^{-1/2} q,    B2 c = sqrt(2) C div q,

so that ``H = sum_i w_i (B1^T B1 + B2^T B2)``, ``f = sqrt(2) C sum_i w_i f B2``
and ``ell = 2 C^2 sum_i w_i f^2``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg as sla

from .errors import AssemblyError, InvalidArgumentError, NumericalError
from .fields import ProblemSpec
from .geometry import QuadratureRule
from .network import Network, SpanningSample, spanning_sample

DEFAULT_MU = 1e-12
DEFAULT_EPSILON = 1e-15
NEGATIVE_LOSS_GUARD = 1e-12


@dataclass(frozen=True)
class Coefficients:
    c_u: np.ndarray
    c_q: np.ndarray

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.c_u, self.c_q])

    @classmethod
    def from_vector(cls, c: np.ndarray, n_u: int) -> "Coefficients":
        c = np.asarray(c, dtype=float)
        return cls(c[:n_u].copy(), c[n_u:].copy())

    @classmethod
    def zeros(cls, n_u: int, n_q: int) -> "Coefficients":
        return cls(np.zeros(n_u), np.zeros(n_q))

    def flux_matrix(self, n_l: int, d: int) -> np.ndarray:
        """Flux coefficients as an (n_L, d) array: column k multiplies Phi_L e_k."""
        return self.c_q.reshape(d, n_l).T


@dataclass(frozen=True)
class DesignMatrices:
    b1: np.ndarray      # (N, d, n)
    b2: np.ndarray      # (N, n)
    rhs2: np.ndarray    # sqrt(2) C f, (N,)


@dataclass(frozen=True)
class AssembledSystem:
    H: np.ndarray
    f_vec: np.ndarray
    ell: float
    poincare: float
    n_u: int
    rule_fingerprint: str = ""

    @property
    def n(self) -> int:
        return self.H.shape[0]

    @property
    def H_uu(self) -> np.ndarray:
        return self.H[: self.n_u, : self.n_u]

    @property
    def H_uq(self) -> np.ndarray:
        return self.H[: self.n_u, self.n_u:]

    @property
    def H_qq(self) -> np.ndarray:
        return self.H[self.n_u:, self.n_u:]

    def to_dict(self) -> dict:
        return {
            "ordering": "u-block, then q-blocks by direction k then unit j; matrices row-major",
            "n_u": self.n_u,
            "n": self.n,
            "H": self.H.ravel().tolist(),
            "f": self.f_vec.tolist(),
            "ell": self.ell,
            "poincare": self.poincare,
            "rule": self.rule_fingerprint,
        }


@dataclass(frozen=True)
class ScaledSystem:
    D: np.ndarray
    H_tilde: np.ndarray
    f_tilde: np.ndarray
    n_u: int


def design_matrices(sample: SpanningSample, kappa: np.ndarray, source: np.ndarray, poincare: float) -> DesignMatrices:
    n_pts, n_l, d = sample.div_tau.shape
    n_u = n_l
    n = n_u + d * n_l
    sk = np.sqrt(kappa)
    b1 = np.zeros((n_pts, d, n))
    b1[:, :, :n_u] = sk[:, None, None] * np.transpose(sample.grad_phi, (0, 2, 1))
    tau = sample.tau_values / sk[:, None]
    for k in range(d):
        b1[:, k, n_u + k * n_l: n_u + (k + 1) * n_l] = tau
    s = np.sqrt(2.0) * poincare
    b2 = np.zeros((n_pts, n))
    # column n_u + k n_L + j holds d_k Phi_j
    b2[:, n_u:] = s * np.transpose(sample.div_tau, (0, 2, 1)).reshape(n_pts, d * n_l)
    return DesignMatrices(b1, b2, s * source)


def _check_finite(name: str, arr: np.ndarray, points: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        flat = arr.reshape(arr.shape[0], -1) if arr.ndim > 1 and arr.shape[0] == points.shape[0] else None
        where = ""
        if flat is not None:
            bad = np.argwhere(~np.isfinite(flat).all(axis=1))[0, 0]
            where = f" at point {points[bad]}"
        raise AssemblyError(f"non-finite entry in {name}{where}")


def assemble_from_sample(
    sample: SpanningSample,
    kappa: np.ndarray,
    source: np.ndarray,
    weights: np.ndarray,
    poincare: float,
    fingerprint: str = "",
) -> AssembledSystem:
    """Block-wise Gram assembly; equal to ``sum_i w_i (B1^T B1 + B2^T B2)`` from :func:`design_matrices`."""
    if not poincare > 0:
        raise InvalidArgumentError(f"Poincare constant must be positive, got {poincare}")
    x = sample.points
    kappa = np.asarray(kappa, dtype=float)
    source = np.asarray(source, dtype=float)
    _check_finite("grad phi", sample.grad_phi, x)
    _check_finite("tau", sample.tau_values, x)
    _check_finite("div tau", sample.div_tau, x)
    _check_finite("source", source, x)
    n_pts, n_l, d = sample.div_tau.shape
    n_u = sample.n_u
    n = n_u + d * n_l
    two_c2 = 2.0 * poincare**2
    H = np.zeros((n, n))
    f_vec = np.zeros(n)
    wk = weights * kappa
    tw = sample.tau_values * (weights / kappa)[:, None]
    tau_block = tw.T @ sample.tau_values
    # strided slices would bypass BLAS
    grads = [np.ascontiguousarray(sample.grad_phi[:, :, k]) for k in range(d)]
    divs = [np.ascontiguousarray(sample.div_tau[:, :, k]) for k in range(d)]
    for k in range(d):
        gk = grads[k]
        qk = slice(n_u + k * n_l, n_u + (k + 1) * n_l)
        H[:n_u, :n_u] += (gk * wk[:, None]).T @ gk
        # kappa^{1/2} grad u . kappa^{-1/2} q: the weights cancel
        cross = (gk * weights[:, None]).T @ sample.tau_values
        H[:n_u, qk] = cross
        H[qk, :n_u] = cross.T
        jk = divs[k] * weights[:, None]
        for l in range(d):
            ql = slice(n_u + l * n_l, n_u + (l + 1) * n_l)
            H[qk, ql] = two_c2 * (jk.T @ divs[l])
        H[qk, qk] += tau_block
        f_vec[qk] = two_c2 * (jk.T @ source)
    H = 0.5 * (H + H.T)
    ell = float(two_c2 * np.dot(weights, source**2))
    return AssembledSystem(H, f_vec, ell, float(poincare), n_u, fingerprint)


def assemble(net: Network, problem: ProblemSpec, rule: QuadratureRule, poincare: float) -> AssembledSystem:
    sample = spanning_sample(net, problem.lifting, rule.points)
    return assemble_from_sample(
        sample,
        problem.kappa(rule.points),
        np.asarray(problem.source(rule.points), dtype=float),
        rule.weights,
        poincare,
        rule.fingerprint,
    )


def scale(system: AssembledSystem, epsilon: float = DEFAULT_EPSILON) -> ScaledSystem:
    if not epsilon > 0:
        raise InvalidArgumentError("epsilon must be positive")
    D = np.sqrt(np.diag(system.H) + epsilon)
    H_tilde = system.H / np.outer(D, D)
    return ScaledSystem(D, H_tilde, system.f_vec / D, system.n_u)


def solve_ls(scaled: ScaledSystem, mu: float = DEFAULT_MU) -> Coefficients:
    """Solve ``(H~ + mu I) c~ = f~`` by Cholesky and return ``c = D^{-1} c~``."""
    if not mu > 0:
        raise InvalidArgumentError("mu must be positive")
    A = scaled.H_tilde + mu * np.eye(scaled.H_tilde.shape[0])
    try:
        factor = sla.cho_factor(A, lower=True, check_finite=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        cond = np.linalg.cond(A) if np.all(np.isfinite(A)) else np.inf
        raise NumericalError(f"Cholesky of the regularised system failed (cond ~ {cond:.3e}): {exc}") from exc
    c_tilde = sla.cho_solve(factor, scaled.f_tilde)
    return Coefficients.from_vector(c_tilde / scaled.D, scaled.n_u)


def scaled_residual(scaled: ScaledSystem, c: Coefficients, mu: float = DEFAULT_MU) -> float:
    c_tilde = scaled.D * c.vector
    r = scaled.H_tilde @ c_tilde + mu * c_tilde - scaled.f_tilde
    return float(np.linalg.norm(r))


def loss_at(system: AssembledSystem, c: Coefficients) -> float:
    v = c.vector
    val = float(v @ system.H @ v - 2.0 * v @ system.f_vec + system.ell)
    if val < 0.0:
        if val >= -NEGATIVE_LOSS_GUARD * max(system.ell, np.finfo(float).tiny):
            return 0.0
        raise AssemblyError(f"quadratic form is negative ({val:.3e}); assembly is inconsistent")
    return val


@dataclass(frozen=True)
class RitzSystem:
    """Energy ``1/2 c^T A c - c^T F`` of the Ritz functional on the potential space."""

    A: np.ndarray
    F: np.ndarray

    def energy(self, c_u: np.ndarray) -> float:
        return float(0.5 * c_u @ self.A @ c_u - c_u @ self.F)


def assemble_ritz(sample: SpanningSample, kappa: np.ndarray, source: np.ndarray, weights: np.ndarray) -> RitzSystem:
    g = sample.grad_phi * np.sqrt(weights * kappa)[:, None, None]
    n_pts, n_u, d = g.shape
    g2 = np.transpose(g, (0, 2, 1)).reshape(n_pts * d, n_u)
    A = g2.T @ g2
    A = 0.5 * (A + A.T)
    F = sample.phi.T @ (weights * source)
    _check_finite("Ritz stiffness", A, sample.points)
    return RitzSystem(A, F)


def solve_ritz(system: RitzSystem, mu: float = DEFAULT_MU, epsilon: float = DEFAULT_EPSILON) -> np.ndarray:
    """Minimiser of the Ritz energy with the same diagonal scaling and Tikhonov shift."""
    D = np.sqrt(np.diag(system.A) + epsilon)
    scaled = ScaledSystem(D, system.A / np.outer(D, D), system.F / D, system.A.shape[0])
    return solve_ls(scaled, mu).c_u
