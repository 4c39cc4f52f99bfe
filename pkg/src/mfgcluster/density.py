"""Data-set densities on grids.

A density can come from a point cloud (histogram over nearest nodes, with
optional Gaussian smoothing), from the grey-level histogram of an image, or
from a nonnegative analytic profile.  Every constructor normalises to unit
mass.  The two built-in 1D benchmark profiles live here as well.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .grid import Grid, ScalarField, build_grid, integrate
from .pgm import GreyImage

__all__ = [
    "DensityField",
    "PointSet",
    "density_field",
    "density_from_points",
    "density_from_grey_image",
    "density_from_function",
    "builtin_density",
    "three_plateau_profile",
    "folded_wave_profile",
    "load_points_csv",
    "sample_gaussian_blobs",
    "support_bounding_box",
]

MASS_TOL = 1e-10

# Stand-in for the piecewise-constant benchmark: (lo, hi, height) per plateau.
TEST1_PLATEAUS = ((0.1, 0.3, 1.0), (0.45, 0.55, 3.0), (0.7, 0.9, 2.0))


@dataclass(frozen=True)
class DensityField:
    """A nonnegative scalar field with unit total mass."""

    base: ScalarField

    def __post_init__(self) -> None:
        vals = self.base.values
        if np.any(vals < 0):
            node = int(np.argmin(vals))
            raise ValueError(f"density is negative at node {node}")
        mass = integrate(self.base)
        if abs(mass - 1.0) > MASS_TOL:
            raise ValueError(f"density mass is {mass!r}, expected 1 within {MASS_TOL}")

    @property
    def grid(self) -> Grid:
        return self.base.grid

    @property
    def values(self) -> np.ndarray:
        return self.base.values


@dataclass(frozen=True)
class PointSet:
    """A finite set of observation points in R^d."""

    dim: int
    points: np.ndarray  # shape (count, dim)

    def __post_init__(self) -> None:
        pts = np.ascontiguousarray(np.atleast_2d(self.points), dtype=float)
        if pts.size == 0:
            raise ValueError("point set must not be empty")
        if pts.ndim != 2 or pts.shape[1] != self.dim:
            raise ValueError(f"points must have shape (n, {self.dim}), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return len(self.points)


def density_field(grid: Grid, values, normalize: bool = True) -> DensityField:
    """Wrap raw nonnegative values into a unit-mass density."""
    vals = np.asarray(values, dtype=float)
    if normalize:
        mass = float(np.dot(grid.quad_weights, vals))
        if mass <= 0:
            raise ValueError("cannot normalise a field with nonpositive mass")
        vals = vals / mass
    return DensityField(base=ScalarField(grid, vals))


def density_from_points(points: PointSet, grid: Grid, bandwidth: float | None = None) -> DensityField:
    """Histogram of a point cloud over nearest grid nodes, normalised to unit mass.

    With a ``bandwidth`` the histogram is replaced by a Gaussian kernel sum, which
    avoids empty cells when the cloud is sparse relative to the grid.
    """
    if points.dim != grid.dim:
        raise ValueError(f"points have dimension {points.dim}, grid has {grid.dim}")
    pts = points.points
    for a, (lo, hi) in enumerate(grid.bounds):
        bad = np.nonzero((pts[:, a] < lo) | (pts[:, a] > hi))[0]
        if bad.size:
            raise ValueError(
                f"point {int(bad[0])} lies outside the grid bounds on axis {a}"
            )
    if bandwidth is not None:
        if bandwidth <= 0:
            raise ValueError("bandwidth must be positive")
        vals = np.zeros(grid.total_nodes)
        coords = grid.coords
        inv = 1.0 / (2.0 * bandwidth**2)
        for start in range(0, len(pts), 2048):
            chunk = pts[start : start + 2048]
            d2 = ((coords[:, None, :] - chunk[None, :, :]) ** 2).sum(axis=2)
            vals += np.exp(-d2 * inv).sum(axis=1)
    else:
        idx = grid.nearest_node(pts)
        vals = np.bincount(idx, minlength=grid.total_nodes).astype(float)
    return density_field(grid, vals)


def density_from_grey_image(image: GreyImage, levels: int = 256) -> DensityField:
    """Grey-level histogram of an image as a density on [0, 1] with one node per level."""
    grid = build_grid(1, [(0.0, 1.0)], levels)
    counts = np.bincount(image.pixels.ravel(), minlength=levels).astype(float)
    if counts.size > levels:
        raise ValueError(f"image has grey levels beyond {levels - 1}")
    return density_field(grid, counts)


def density_from_function(sampler, grid: Grid) -> DensityField:
    """Evaluate a nonnegative profile at the grid nodes and normalise it."""
    xs = grid.coords[:, 0] if grid.dim == 1 else grid.coords
    vals = None
    try:
        cand = np.asarray(sampler(xs), dtype=float)
        if cand.shape == (grid.total_nodes,):
            vals = cand
    except Exception:
        vals = None
    if vals is None:
        vals = np.array([float(sampler(x)) for x in xs])
    if np.any(vals < 0):
        node = int(np.argmin(vals))
        raise ValueError(f"sampler is negative at node {node}")
    if not np.any(vals > 0):
        raise ValueError("sampler is zero everywhere; cannot normalise")
    return density_field(grid, vals)


def three_plateau_profile(x: np.ndarray) -> np.ndarray:
    """Piecewise-constant profile with three plateaux of different widths and heights."""
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    for lo, hi, height in TEST1_PLATEAUS:
        out[(x >= lo) & (x <= hi)] = height
    return out


def folded_wave_profile(x: np.ndarray) -> np.ndarray:
    """|x sin(4 pi x)|: four humps on [0, 1] with increasing heights."""
    x = np.asarray(x, dtype=float)
    return np.abs(x * np.sin(4.0 * np.pi * x))


def builtin_density(name: str, grid: Grid) -> DensityField:
    """One of the built-in 1D benchmark densities: 'test1' or 'test2'."""
    if grid.dim != 1:
        raise ValueError("built-in densities are one-dimensional")
    if name == "test1":
        return density_from_function(three_plateau_profile, grid)
    if name == "test2":
        return density_from_function(folded_wave_profile, grid)
    raise ValueError(f"unknown built-in density {name!r}")


def load_points_csv(path) -> PointSet:
    """Read one point per row from a CSV file; a non-numeric first token marks a header."""
    rows: list[list[float]] = []
    width = None
    with open(Path(path), newline="", encoding="utf-8") as handle:
        for lineno, row in enumerate(csv.reader(handle), start=1):
            if not row or all(not tok.strip() for tok in row):
                continue
            if not rows and lineno == 1:
                try:
                    float(row[0])
                except ValueError:
                    continue  # header row
            try:
                parsed = [float(tok) for tok in row]
            except ValueError:
                raise ValueError(f"{path}: line {lineno}: non-numeric value") from None
            if width is None:
                width = len(parsed)
            elif len(parsed) != width:
                raise ValueError(
                    f"{path}: line {lineno}: expected {width} columns, got {len(parsed)}"
                )
            rows.append(parsed)
    if not rows:
        raise ValueError(f"{path}: no data rows")
    pts = np.asarray(rows)
    return PointSet(dim=pts.shape[1], points=pts)


def sample_gaussian_blobs(
    seed: int,
    counts: tuple[int, ...] = (700, 700, 600),
    means: tuple[tuple[float, float], ...] = ((0.25, 0.28), (0.75, 0.25), (0.5, 0.78)),
    sigma: float = 0.08,
    bounds: tuple[tuple[float, float], ...] = ((0.0, 1.0), (0.0, 1.0)),
) -> tuple[PointSet, np.ndarray]:
    """Seeded 2D mixture of isotropic Gaussian blobs, resampled to stay inside bounds.

    Returns the point set and the generating component label of each point.
    The default geometry keeps every pair of means at least four sigma apart.
    """
    rng = np.random.default_rng(seed)
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    pts = []
    labels = []
    for k, (count, mean) in enumerate(zip(counts, means)):
        mean = np.asarray(mean, dtype=float)
        got = 0
        while got < count:
            draw = rng.normal(mean, sigma, size=(count - got, len(mean)))
            keep = draw[np.all((draw >= lo) & (draw <= hi), axis=1)]
            if keep.size:
                pts.append(keep)
                got += len(keep)
        labels.append(np.full(count, k))
    points = PointSet(dim=len(bounds), points=np.concatenate(pts))
    return points, np.concatenate(labels)


def support_bounding_box(f: DensityField) -> np.ndarray:
    """Per-axis (min, max) of the node coordinates where the density is positive."""
    mask = f.values > 0
    if not np.any(mask):
        raise ValueError("density has empty support")
    pts = f.grid.coords[mask]
    return np.stack([pts.min(axis=0), pts.max(axis=0)], axis=1)
