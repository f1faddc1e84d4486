"""Box domains, uniform partitions and the quadrature rules used for training and evaluation.

All point arrays have shape ``(N, d)``; integrands are vectorised callables
mapping such an array to ``(N,)`` values.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import InvalidArgumentError, NonFiniteSampleError

Integrand = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class Box:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise InvalidArgumentError("lower and upper must be vectors of equal length")
        if not 1 <= lo.size <= 3:
            raise InvalidArgumentError(f"dimension must be 1, 2 or 3, got {lo.size}")
        if np.any(lo >= hi):
            raise InvalidArgumentError(f"degenerate box: lower={lo}, upper={hi}")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def unit(cls, dim: int) -> "Box":
        return cls(np.zeros(dim), np.ones(dim))

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def widths(self) -> np.ndarray:
        return self.upper - self.lower

    @property
    def volume(self) -> float:
        return float(np.prod(self.widths))

    def contains(self, points: np.ndarray, tol: float = 0.0) -> np.ndarray:
        points = np.atleast_2d(points)
        return np.all((points >= self.lower - tol) & (points <= self.upper + tol), axis=1)


@dataclass(frozen=True)
class Partition:
    """Uniform tensor partition of a box; cells are stored as lower corners plus one shared width."""

    box: Box
    cells_per_axis: tuple
    cell_lower: np.ndarray = field(repr=False)
    cell_width: np.ndarray = field(repr=False)

    @property
    def n_cells(self) -> int:
        return self.cell_lower.shape[0]

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.cell_width))

    def cell(self, index: int) -> Box:
        lo = self.cell_lower[index]
        return Box(lo, lo + self.cell_width)

    @property
    def cells(self) -> list:
        return [self.cell(i) for i in range(self.n_cells)]


class QuadratureKind(str, enum.Enum):
    MONTE_CARLO = "mc"
    STRATIFIED_P1 = "p1"
    TENSOR_TRAPEZOID = "trapezoid"


@dataclass(frozen=True)
class QuadratureRule:
    points: np.ndarray
    weights: np.ndarray
    kind: QuadratureKind
    seed: Optional[int] = None

    def __post_init__(self):
        pts = np.ascontiguousarray(np.atleast_2d(self.points), dtype=float)
        w = np.ascontiguousarray(self.weights, dtype=float)
        if pts.shape[0] != w.shape[0]:
            raise InvalidArgumentError("points and weights have different lengths")
        if np.any(w <= 0):
            raise InvalidArgumentError("quadrature weights must be positive")
        pts.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    def __len__(self) -> int:
        return self.weights.size

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def fingerprint(self) -> str:
        return f"{self.kind.value}:{self.seed}:{len(self)}"


def partition_uniform(box: Box, cells_per_axis: Sequence[int]) -> Partition:
    counts = tuple(int(c) for c in np.atleast_1d(cells_per_axis))
    if len(counts) != box.dim:
        raise InvalidArgumentError(f"expected {box.dim} cell counts, got {len(counts)}")
    if any(c < 1 for c in counts):
        raise InvalidArgumentError(f"cell counts must be >= 1, got {counts}")
    width = box.widths / np.asarray(counts, dtype=float)
    # C-order over axes: the last axis varies fastest
    idx = np.stack(np.meshgrid(*[np.arange(c) for c in counts], indexing="ij"), axis=-1)
    idx = idx.reshape(-1, box.dim)
    lower = box.lower + idx * width
    lower.setflags(write=False)
    return Partition(box, counts, lower, width)


def _philox(seed: int) -> np.random.Generator:
    # counter-based: the k-th draw of the stream depends only on (seed, k)
    return np.random.Generator(np.random.Philox(key=int(seed) & (2**64 - 1)))


def sample_p1(partition: Partition, rng_seed: int) -> QuadratureRule:
    """Stratified antithetic rule: two reflected points per cell, each with half the cell volume.

    The reference draw for cell ``K`` occupies positions ``K*d .. K*d+d-1`` of a
    Philox stream keyed by ``rng_seed``, so the rule is a pure function of
    ``(seed, cell index)``.
    """
    d = partition.box.dim
    ref = 2.0 * _philox(rng_seed).random((partition.n_cells, d)) - 1.0
    half = 0.5 * partition.cell_width
    centre = partition.cell_lower + half
    pts = np.empty((2 * partition.n_cells, d))
    pts[0::2] = centre + half * ref
    pts[1::2] = centre - half * ref
    # |J_F| * 2^(d-1) = cell volume / 2
    w = np.full(2 * partition.n_cells, 0.5 * partition.cell_volume)
    return QuadratureRule(pts, w, QuadratureKind.STRATIFIED_P1, int(rng_seed))


def sample_mc(box: Box, n_points: int, rng_seed: int) -> QuadratureRule:
    if n_points < 1:
        raise InvalidArgumentError("n_points must be >= 1")
    u = _philox(rng_seed).random((n_points, box.dim))
    pts = box.lower + u * box.widths
    w = np.full(n_points, box.volume / n_points)
    return QuadratureRule(pts, w, QuadratureKind.MONTE_CARLO, int(rng_seed))


def trapezoid_rule(box: Box, nodes_per_axis: Sequence[int]) -> QuadratureRule:
    counts = [int(c) for c in np.atleast_1d(nodes_per_axis)]
    if len(counts) == 1 and box.dim > 1:
        counts = counts * box.dim
    if len(counts) != box.dim or any(c < 2 for c in counts):
        raise InvalidArgumentError(f"need >= 2 nodes on each of {box.dim} axes, got {counts}")
    axes, axis_w = [], []
    for k, n in enumerate(counts):
        x = np.linspace(box.lower[k], box.upper[k], n)
        h = (box.upper[k] - box.lower[k]) / (n - 1)
        w = np.full(n, h)
        w[0] = w[-1] = 0.5 * h
        axes.append(x)
        axis_w.append(w)
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, box.dim)
    weights = axis_w[0]
    for w in axis_w[1:]:
        weights = np.multiply.outer(weights, w)
    return QuadratureRule(grid, weights.reshape(-1), QuadratureKind.TENSOR_TRAPEZOID)


def check_finite(values: np.ndarray, points: np.ndarray, what: str = "integrand") -> None:
    values = np.asarray(values)
    if values.size and not np.all(np.isfinite(values)):
        bad = np.argwhere(~np.isfinite(values.reshape(values.shape[0], -1)).all(axis=1))[0, 0]
        raise NonFiniteSampleError(f"non-finite {what} at point {points[bad]}", point=points[bad])


def integrate(rule: QuadratureRule, integrand: Integrand) -> float:
    values = np.asarray(integrand(rule.points), dtype=float).reshape(-1)
    if values.shape[0] != len(rule):
        raise InvalidArgumentError("integrand returned the wrong number of values")
    check_finite(values, rule.points)
    return float(np.dot(rule.weights, values))
