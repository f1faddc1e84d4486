"""Material coefficients, Dirichlet cutoffs and the benchmark transmission problems.

Every callable is vectorised over an ``(N, d)`` array of points.  Interface
points are resolved by the first region whose (closed) predicate matches.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import InvalidArgumentError
from .geometry import Box

PointFn = Callable[[np.ndarray], np.ndarray]
TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class PiecewiseConstantCoefficient:
    regions: Sequence[tuple]  # (predicate, value) pairs, first match wins
    default: float

    def __post_init__(self):
        values = [v for _, v in self.regions] + [self.default]
        if min(values) <= 0:
            raise InvalidArgumentError("coefficient values must be positive")

    @property
    def min_value(self) -> float:
        return float(min([v for _, v in self.regions] + [self.default]))

    @property
    def max_value(self) -> float:
        return float(max([v for _, v in self.regions] + [self.default]))

    def region_index(self, x: np.ndarray) -> np.ndarray:
        """Index of the matching region per point; ``len(regions)`` means the default value."""
        x = np.atleast_2d(x)
        idx = np.full(x.shape[0], len(self.regions), dtype=int)
        free = np.ones(x.shape[0], dtype=bool)
        for i, (pred, _) in enumerate(self.regions):
            hit = free & np.asarray(pred(x), dtype=bool)
            idx[hit] = i
            free &= ~hit
        return idx

    def __call__(self, x: np.ndarray) -> np.ndarray:
        table = np.array([v for _, v in self.regions] + [self.default], dtype=float)
        return table[self.region_index(x)]

    def scaled(self, s: float) -> "PiecewiseConstantCoefficient":
        return PiecewiseConstantCoefficient([(p, s * v) for p, v in self.regions], s * self.default)


@dataclass(frozen=True)
class Lifting:
    """Cutoff ``g_D`` vanishing on the boundary, with its gradient."""

    value: PointFn
    gradient: PointFn


@dataclass(frozen=True)
class ExactSolution:
    u: PointFn
    grad_u: PointFn
    q: PointFn
    div_q: PointFn


@dataclass(frozen=True)
class ProblemSpec:
    name: str
    box: Box
    kappa: PiecewiseConstantCoefficient
    source: PointFn
    lifting: Lifting
    exact: Optional[ExactSolution] = None
    poincare_reference: Optional[float] = None
    params: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.box.dim


def product_lifting(box: Box) -> Lifting:
    """``g_D = prod_k (x_k - a_k)(b_k - x_k)``; reduces to x(1-x) and x(1-x)y(1-y) on unit boxes."""
    lo, hi = box.lower, box.upper

    def value(x):
        x = np.atleast_2d(x)
        return np.prod((x - lo) * (hi - x), axis=1)

    def gradient(x):
        x = np.atleast_2d(x)
        factors = (x - lo) * (hi - x)
        dfac = (hi - x) - (x - lo)
        out = np.empty_like(x)
        for k in range(x.shape[1]):
            others = np.prod(np.delete(factors, k, axis=1), axis=1) if x.shape[1] > 1 else 1.0
            out[:, k] = dfac[:, k] * others
        return out

    return Lifting(value, gradient)


def _col(x):
    return np.atleast_2d(x)[:, 0]


def problem_smooth_1d() -> ProblemSpec:
    box = Box.unit(1)
    kappa = PiecewiseConstantCoefficient([], 1.0)
    exact = ExactSolution(
        u=lambda x: np.sin(TWO_PI * _col(x)),
        grad_u=lambda x: (TWO_PI * np.cos(TWO_PI * _col(x)))[:, None],
        q=lambda x: (-TWO_PI * np.cos(TWO_PI * _col(x)))[:, None],
        div_q=lambda x: 4 * np.pi**2 * np.sin(TWO_PI * _col(x)),
    )
    return ProblemSpec(
        name="smooth1d",
        box=box,
        kappa=kappa,
        source=lambda x: 4 * np.pi**2 * np.sin(TWO_PI * _col(x)),
        lifting=product_lifting(box),
        exact=exact,
        poincare_reference=1.0 / np.pi,
    )


def problem_interface_1d(kappa0: float) -> ProblemSpec:
    """kappa = kappa0 on [0, 1/2], 1 on (1/2, 1]; f = 4 pi^2 sin(2 pi x)."""
    kappa0 = float(kappa0)
    if not kappa0 > 0:
        raise InvalidArgumentError(f"kappa0 must be positive, got {kappa0}")
    box = Box.unit(1)
    left = lambda x: _col(x) <= 0.5
    kappa = PiecewiseConstantCoefficient([(left, kappa0)], 1.0)

    def u(x):
        s = np.sin(TWO_PI * _col(x))
        return np.where(left(x), s / kappa0, s)

    def grad_u(x):
        c = TWO_PI * np.cos(TWO_PI * _col(x))
        return np.where(left(x), c / kappa0, c)[:, None]

    exact = ExactSolution(
        u=u,
        grad_u=grad_u,
        q=lambda x: (-TWO_PI * np.cos(TWO_PI * _col(x)))[:, None],
        div_q=lambda x: 4 * np.pi**2 * np.sin(TWO_PI * _col(x)),
    )
    from .poincare import oracle_lambda1

    ref = oracle_lambda1(kappa0, 1.0, 0.5) ** -0.5
    return ProblemSpec(
        name="interface1d",
        box=box,
        kappa=kappa,
        source=lambda x: 4 * np.pi**2 * np.sin(TWO_PI * _col(x)),
        lifting=product_lifting(box),
        exact=exact,
        poincare_reference=ref,
        params={"kappa0": kappa0},
    )


def problem_circle_2d() -> ProblemSpec:
    """kappa = 1 in the closed disk of radius 1/4 about (1/2, 1/2), 3 outside.

    With ``P = sin(2 pi x) sin(2 pi y) (r^2 - 1/16)`` the exact solution is
    ``u = P / kappa``, so the flux ``q = -grad P`` is continuous and ``f = -lap P``.
    """
    box = Box.unit(2)

    def rr(x):
        x = np.atleast_2d(x)
        return (x[:, 0] - 0.5) ** 2 + (x[:, 1] - 0.5) ** 2

    inside = lambda x: rr(x) <= 1.0 / 16.0
    kappa = PiecewiseConstantCoefficient([(inside, 1.0)], 3.0)

    def parts(x):
        x = np.atleast_2d(x)
        sx, sy = np.sin(TWO_PI * x[:, 0]), np.sin(TWO_PI * x[:, 1])
        cx, cy = np.cos(TWO_PI * x[:, 0]), np.cos(TWO_PI * x[:, 1])
        s = sx * sy
        grad_s = np.stack([TWO_PI * cx * sy, TWO_PI * sx * cy], axis=1)
        r = rr(x) - 1.0 / 16.0
        grad_r = 2.0 * (x - 0.5)
        return s, grad_s, r, grad_r

    def P(x):
        s, _, r, _ = parts(x)
        return s * r

    def grad_P(x):
        s, gs, r, gr = parts(x)
        return gs * r[:, None] + s[:, None] * gr

    def lap_P(x):
        s, gs, r, gr = parts(x)
        # lap s = -8 pi^2 s, lap r = 4
        return -8.0 * np.pi**2 * s * r + 2.0 * np.sum(gs * gr, axis=1) + 4.0 * s

    exact = ExactSolution(
        u=lambda x: P(x) / kappa(x),
        grad_u=lambda x: grad_P(x) / kappa(x)[:, None],
        q=lambda x: -grad_P(x),
        div_q=lambda x: -lap_P(x),
    )
    return ProblemSpec(
        name="circle2d",
        box=box,
        kappa=kappa,
        source=lambda x: -lap_P(x),
        lifting=product_lifting(box),
        exact=exact,
    )


def problem_plane_2d() -> ProblemSpec:
    """kappa = 1 for x <= 1/2, 3 otherwise; u = (cos(2 pi x) - 1) sin(pi y)."""
    box = Box.unit(2)
    left = lambda x: np.atleast_2d(x)[:, 0] <= 0.5
    kappa = PiecewiseConstantCoefficient([(left, 1.0)], 3.0)

    def u(x):
        x = np.atleast_2d(x)
        return (np.cos(TWO_PI * x[:, 0]) - 1.0) * np.sin(np.pi * x[:, 1])

    def grad_u(x):
        x = np.atleast_2d(x)
        gx = -TWO_PI * np.sin(TWO_PI * x[:, 0]) * np.sin(np.pi * x[:, 1])
        gy = np.pi * (np.cos(TWO_PI * x[:, 0]) - 1.0) * np.cos(np.pi * x[:, 1])
        return np.stack([gx, gy], axis=1)

    def lap_u(x):
        x = np.atleast_2d(x)
        c = np.cos(TWO_PI * x[:, 0])
        s = np.sin(np.pi * x[:, 1])
        return -4.0 * np.pi**2 * c * s - np.pi**2 * (c - 1.0) * s

    exact = ExactSolution(
        u=u,
        grad_u=grad_u,
        q=lambda x: -kappa(x)[:, None] * grad_u(x),
        div_q=lambda x: -kappa(x) * lap_u(x),
    )
    return ProblemSpec(
        name="plane2d",
        box=box,
        kappa=kappa,
        source=lambda x: -kappa(x) * lap_u(x),
        lifting=product_lifting(box),
        exact=exact,
    )


PROBLEMS = {
    "smooth1d": lambda **kw: problem_smooth_1d(),
    "interface1d": lambda kappa0=3.0, **kw: problem_interface_1d(kappa0),
    "circle2d": lambda **kw: problem_circle_2d(),
    "plane2d": lambda **kw: problem_plane_2d(),
}


def make_problem(problem_id: str, **params) -> ProblemSpec:
    try:
        factory = PROBLEMS[problem_id]
    except KeyError:
        raise InvalidArgumentError(
            f"unknown problem {problem_id!r}; choose from {sorted(PROBLEMS)}"
        ) from None
    return factory(**params)
