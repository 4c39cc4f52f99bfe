"""Uniform vertex-centred grids on boxes in 1D/2D, with trapezoid-consistent quadrature.

Nodes include the boundary and are ordered lexicographically by axis index
(C order), so a 2D node (i, j) sits at flat index ``i * ny + j``.  Boundary
nodes carry half quadrature weight per touching boundary axis, which makes
the rectangular rule integrate constants exactly.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

__all__ = ["Grid", "ScalarField", "build_grid", "integrate", "moment_integrals"]


@dataclass(frozen=True)
class Grid:
    """Uniform structured discretisation of a box domain.

    Attributes
    ----------
    dim : int
        Spatial dimension, 1 or 2.
    bounds : tuple of (lo, hi) pairs
        Per-axis interval, hi > lo.
    nodes_per_axis : tuple of int
        Node count per axis, at least 3.
    """

    dim: int
    bounds: tuple[tuple[float, float], ...]
    nodes_per_axis: tuple[int, ...]

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple(
            (hi - lo) / (n - 1) for (lo, hi), n in zip(self.bounds, self.nodes_per_axis)
        )

    @property
    def total_nodes(self) -> int:
        return int(np.prod(self.nodes_per_axis))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.nodes_per_axis

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def volume(self) -> float:
        return float(np.prod([hi - lo for lo, hi in self.bounds]))

    @cached_property
    def axes(self) -> tuple[np.ndarray, ...]:
        """Per-axis node coordinates, strictly increasing."""
        return tuple(
            np.linspace(lo, hi, n)
            for (lo, hi), n in zip(self.bounds, self.nodes_per_axis)
        )

    @cached_property
    def coords(self) -> np.ndarray:
        """Node coordinates, shape (total_nodes, dim), lexicographic order."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        out = np.stack([m.ravel(order="C") for m in mesh], axis=1)
        out.flags.writeable = False
        return out

    @cached_property
    def quad_weights(self) -> np.ndarray:
        """Quadrature weights: tensor product of 1D trapezoid weights."""
        w = None
        for (lo, hi), n in zip(self.bounds, self.nodes_per_axis):
            h = (hi - lo) / (n - 1)
            w1 = np.full(n, h)
            w1[0] = w1[-1] = 0.5 * h
            w = w1 if w is None else np.outer(w, w1).ravel(order="C")
        w.flags.writeable = False
        return w

    def nearest_node(self, points: np.ndarray) -> np.ndarray:
        """Flat index of the node nearest each point; ties go to the lower index."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if pts.shape[1] != self.dim:
            raise ValueError(f"expected points of dimension {self.dim}, got {pts.shape[1]}")
        per_axis = []
        for a, ((lo, _hi), n, h) in enumerate(
            zip(self.bounds, self.nodes_per_axis, self.spacing)
        ):
            t = (pts[:, a] - lo) / h
            # ceil(t - 1/2) rounds exact half-way points down, per the tie rule
            idx = np.ceil(t - 0.5).astype(np.int64)
            np.clip(idx, 0, n - 1, out=idx)
            per_axis.append(idx)
        return np.ravel_multi_index(per_axis, self.nodes_per_axis)


@dataclass(frozen=True)
class ScalarField:
    """Real values attached to every node of a grid."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self) -> None:
        vals = np.ascontiguousarray(self.values, dtype=float)
        if vals.ndim != 1 or vals.size != self.grid.total_nodes:
            raise ValueError(
                f"field needs {self.grid.total_nodes} values, got shape {vals.shape}"
            )
        if not np.all(np.isfinite(vals)):
            raise ValueError("field values must all be finite")
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    def reshape(self) -> np.ndarray:
        """Values as an array with one axis per grid axis."""
        return self.values.reshape(self.grid.shape)


def build_grid(dim, bounds, nodes_per_axis) -> Grid:
    """Build a uniform vertex-centred grid.

    Parameters
    ----------
    dim : int
        1 or 2.
    bounds : sequence
        Either a single (lo, hi) pair (1D) or one pair per axis.
    nodes_per_axis : int or sequence of int
        Nodes per axis (>= 3); a scalar is broadcast to every axis.
    """
    if dim not in (1, 2):
        raise ValueError(f"dim must be 1 or 2, got {dim}")
    bnds = np.asarray(bounds, dtype=float)
    if bnds.ndim == 1:
        bnds = bnds.reshape(1, 2)
    if bnds.shape != (dim, 2):
        raise ValueError(f"expected {dim} (lo, hi) pairs, got shape {bnds.shape}")
    if np.isscalar(nodes_per_axis) or np.ndim(nodes_per_axis) == 0:
        counts = (int(nodes_per_axis),) * dim
    else:
        counts = tuple(int(n) for n in nodes_per_axis)
    if len(counts) != dim:
        raise ValueError(f"expected {dim} node counts, got {len(counts)}")
    for (lo, hi), n in zip(bnds, counts):
        if not hi > lo:
            raise ValueError(f"degenerate bounds [{lo}, {hi}]")
        if n < 3:
            raise ValueError(f"need at least 3 nodes per axis, got {n}")
    return Grid(dim=dim, bounds=tuple(map(tuple, bnds.tolist())), nodes_per_axis=counts)


def integrate(field) -> float:
    """Quadrature of a field over the whole domain."""
    return float(np.dot(field.grid.quad_weights, field.values))


def moment_integrals(weight, density) -> tuple[float, np.ndarray, np.ndarray]:
    """Raw moments of ``weight * density``: mass, first moment, second moment.

    Returns ``(∫ w f, ∫ x w f, ∫ x xᵗ w f)`` with the second moment uncentred;
    callers centre with their own mean.
    """
    grid = weight.grid
    if density.grid is not grid and density.grid != grid:
        raise ValueError("weight and density live on different grids")
    wf = weight.values * density.values * grid.quad_weights
    mass = float(wf.sum())
    x = grid.coords
    mean = x.T @ wf
    second = (x.T * wf) @ x
    return mass, mean, second
