"""Weighted energy-norm errors, loss/error robustness ratios and the gradient-error total variation."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidArgumentError
from .fields import ExactSolution, PiecewiseConstantCoefficient, ProblemSpec
from .geometry import Box, QuadratureRule, trapezoid_rule

# sqrt(c1), sqrt(c2) with c1 = 1/8, c2 = 2
ROBUST_RATIO_BOUNDS = (math.sqrt(1.0 / 8.0), math.sqrt(2.0))
GRADIENT_JUMP_INTERFACE_3 = 2.0 * math.pi * (1.0 - 1.0 / 3.0)


@dataclass
class ErrorReport:
    rel_u: float
    rel_q: float
    rel_total: float
    loss_fine: float
    ratio: Optional[float]
    err_u: float
    err_q: float
    norm_u: float
    norm_q: float
    poincare: float
    standard_loss: float = math.nan
    standard_ratio: Optional[float] = None

    def to_dict(self) -> dict:
        return asdict(self)


def default_fine_rule(box: Box, nodes: Optional[int] = None) -> QuadratureRule:
    """Fine trapezoid rule: 10^5 + 1 nodes in 1D, 1001 per axis otherwise."""
    if nodes is None:
        nodes = 100_001 if box.dim == 1 else 1001
    return trapezoid_rule(box, [nodes] * box.dim)


class FineEvaluator:
    """Caches exact fields on a fixed deterministic rule so that per-iteration errors are cheap."""

    def __init__(self, exact: ExactSolution, kappa: PiecewiseConstantCoefficient, rule: QuadratureRule):
        self.rule = rule
        x = rule.points
        self.w = rule.weights
        self.kappa = kappa(x)
        self.grad_u = np.asarray(exact.grad_u(x))
        self.q = np.asarray(exact.q(x))
        self.div_q = np.asarray(exact.div_q(x))
        # energy pieces of the exact pair that do not depend on the Poincare constant
        self.norm_u2 = float(self.w @ (self.kappa * np.sum(self.grad_u**2, axis=1)))
        self.norm_q_l2k = float(self.w @ (np.sum(self.q**2, axis=1) / self.kappa))
        self.norm_divq = float(self.w @ self.div_q**2)

    @classmethod
    def for_problem(cls, problem: ProblemSpec, nodes: Optional[int] = None) -> "FineEvaluator":
        if problem.exact is None:
            raise InvalidArgumentError(f"problem {problem.name} has no exact solution")
        return cls(problem.exact, problem.kappa, default_fine_rule(problem.box, nodes))

    def report(self, fields: dict, poincare: float) -> ErrorReport:
        """``fields`` holds grad_u (N, d), q (N, d) and div_q (N,) at the rule points."""
        w, k = self.w, self.kappa
        c2 = poincare**2
        eg = self.grad_u - fields["grad_u"]
        eq = self.q - fields["q"]
        ed = self.div_q - fields["div_q"]
        err_u2 = float(w @ (k * np.sum(eg**2, axis=1)))
        eq_l2k = float(w @ (np.sum(eq**2, axis=1) / k))
        ed2 = float(w @ ed**2)
        err_q2 = eq_l2k + c2 * ed2
        norm_q2 = self.norm_q_l2k + c2 * self.norm_divq

        sk = np.sqrt(k)[:, None]
        r1 = fields["q"] / sk + sk * fields["grad_u"]
        r1sq = float(w @ np.sum(r1**2, axis=1))
        # f = div q* on the rule
        loss = r1sq + 2.0 * c2 * ed2
        err_total = math.sqrt(err_u2 + err_q2)

        std_err2 = float(w @ np.sum(eg**2, axis=1)) + float(w @ np.sum(eq**2, axis=1)) + ed2
        std_loss = r1sq + ed2
        return ErrorReport(
            rel_u=math.sqrt(err_u2 / self.norm_u2),
            rel_q=math.sqrt(err_q2 / norm_q2),
            rel_total=err_total / math.sqrt(self.norm_u2 + norm_q2),
            loss_fine=loss,
            ratio=math.sqrt(loss) / err_total if err_total > 0 else None,
            err_u=math.sqrt(err_u2),
            err_q=math.sqrt(err_q2),
            norm_u=math.sqrt(self.norm_u2),
            norm_q=math.sqrt(norm_q2),
            poincare=float(poincare),
            standard_loss=std_loss,
            standard_ratio=math.sqrt(std_loss / std_err2) if std_err2 > 0 else None,
        )

    def ritz_energy(self, u: np.ndarray, grad_u: np.ndarray) -> float:
        """Fine-rule Ritz energy ``1/2 kappa |grad u|^2 - f u`` with ``f = div q*``."""
        return float(self.w @ (0.5 * self.kappa * np.sum(grad_u**2, axis=1) - self.div_q * u))

    def potential_error(self, grad_u: np.ndarray) -> float:
        """Relative energy error of a potential alone (Ritz runs have no flux)."""
        eg = self.grad_u - grad_u
        return math.sqrt(float(self.w @ (self.kappa * np.sum(eg**2, axis=1))) / self.norm_u2)


def energy_errors(sol, exact: ExactSolution, kappa: PiecewiseConstantCoefficient, poincare: float, fine_rule: QuadratureRule) -> ErrorReport:
    """Errors of ``sol`` (anything with ``fields(points)``) in the weighted norms, relative to the exact pair."""
    ev = FineEvaluator(exact, kappa, fine_rule)
    if ev.norm_u2 <= 0 or ev.norm_q_l2k + poincare**2 * ev.norm_divq <= 0:
        raise InvalidArgumentError("exact solution has zero norm; relative errors are undefined")
    return ev.report(sol.fields(fine_rule.points), poincare)


def robustness_ratio(report: ErrorReport) -> Optional[float]:
    """``sqrt(loss) / |||e|||``; None when the error vanishes (0/0)."""
    return report.ratio


def tv_gradient_error(
    sol,
    exact: ExactSolution,
    interval: Sequence[float] = (0.4, 0.6),
    grid_nodes: int = 4001,
    box: Box = Box.unit(1),
    kappa: Optional[PiecewiseConstantCoefficient] = None,
) -> float:
    """Discrete ``L1`` norm of the second derivative of ``u* - u`` over ``interval``.

    Increments are taken on a half-step-offset uniform grid.  When ``kappa`` is
    given, grid cells straddling a material interface are left out: their
    error increment is replaced by the mean of the neighbouring increments, so a
    gradient jump located exactly at the interface costs nothing.
    """
    return gradient_error_profile(sol, exact, interval, grid_nodes, box, kappa)[2]


def gradient_error_profile(sol, exact, interval=(0.4, 0.6), grid_nodes=4001, box: Box = Box.unit(1), kappa=None):
    """Grid, gradient error ``(u* - u)'`` on it and the total variation of :func:`tv_gradient_error`."""
    a, b = float(interval[0]), float(interval[1])
    if box.dim != 1:
        raise InvalidArgumentError("total variation diagnostic is one-dimensional")
    if not (box.lower[0] <= a < b <= box.upper[0]):
        raise InvalidArgumentError(f"window [{a}, {b}] is not inside {box.lower[0]}..{box.upper[0]}")
    if grid_nodes < 3:
        raise InvalidArgumentError("need at least three grid nodes")
    h = (b - a) / grid_nodes
    x = (a + (np.arange(grid_nodes) + 0.5) * h)[:, None]
    ge = np.asarray(exact.grad_u(x))[:, 0]
    ga = np.asarray(sol.grad_u(x))[:, 0]
    de = np.diff(ge - ga)
    if kappa is not None:
        reg = kappa.region_index(x)
        for i in np.flatnonzero(reg[1:] != reg[:-1]):
            nb = [de[j] for j in (i - 1, i + 1) if 0 <= j < de.size and reg[j] == reg[j + 1]]
            de[i] = float(np.mean(nb)) if nb else 0.0
    tv = float(np.sum(np.abs(de)))
    return x[:, 0], ge - ga, tv
