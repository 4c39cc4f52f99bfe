"""Mixture state and the soft-clustering operations built on it.

Responsibilities are computed with a per-node rescaling (divide by the largest
weighted component before normalising) so that partition of unity holds to
rounding precision even where all components are deep in their tails.  Nodes
where the mixture underflows to exactly zero fall back to the prior weights.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np
import scipy.linalg

from .density import DensityField, density_field
from .grid import Grid, ScalarField, integrate

__all__ = [
    "MixtureState",
    "ConsistencyReport",
    "IllConditionedMixtureError",
    "responsibilities",
    "update_moments",
    "coupling_cost",
    "gaussian_pdf",
    "gaussian_field",
    "mixture_field",
    "field_moments",
    "check_consistency",
    "moment_match_check",
    "hard_assign",
]

log = logging.getLogger(__name__)

# Smallest admissible covariance eigenvalue; degenerate clusters are lifted to it.
COV_EIG_FLOOR = 1e-4


class IllConditionedMixtureError(RuntimeError):
    """The mixture density cannot support a responsibility computation."""


@dataclass(frozen=True)
class MixtureState:
    """Weights, component densities, responsibilities and moments of a K-mixture."""

    alpha: np.ndarray                      # (K,)
    components: tuple[DensityField, ...]   # K unit-mass fields
    means: np.ndarray                      # (K, d)
    covariances: np.ndarray                # (K, d, d)
    responsibilities: tuple[ScalarField, ...] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "alpha", np.asarray(self.alpha, dtype=float))
        object.__setattr__(self, "means", np.asarray(self.means, dtype=float))
        object.__setattr__(self, "covariances", np.asarray(self.covariances, dtype=float))
        k = len(self.components)
        d = self.grid.dim
        if self.alpha.shape != (k,):
            raise ValueError(f"expected {k} weights, got shape {self.alpha.shape}")
        if self.means.shape != (k, d) or self.covariances.shape != (k, d, d):
            raise ValueError("means/covariances shapes do not match K and the grid dimension")

    @property
    def k(self) -> int:
        return len(self.components)

    @property
    def grid(self) -> Grid:
        return self.components[0].grid

    def with_moments(self, alpha, means, covariances, responsibilities) -> "MixtureState":
        return replace(
            self,
            alpha=alpha,
            means=means,
            covariances=covariances,
            responsibilities=responsibilities,
        )


def _component_matrix(components) -> np.ndarray:
    return np.stack([c.values for c in components])


def _scaled_ratios(alpha: np.ndarray, vals: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Ratios m_k / m evaluated stably; returns (ratios, dead-node mask).

    Dead nodes are those where the weighted mixture is exactly zero; the ratio
    there is set to 1 so that alpha_k * ratio falls back to the prior.
    """
    weighted = alpha[:, None] * vals
    mix = weighted.sum(axis=0)
    neg = np.nonzero(mix < 0)[0]
    if neg.size:
        raise IllConditionedMixtureError(
            f"mixture density is negative at node {int(neg[0])}"
        )
    scale = vals.max(axis=0)
    dead = mix <= 0.0
    if np.all(dead):
        raise IllConditionedMixtureError(
            "mixture density vanishes at every node (first offending node 0)"
        )
    safe_scale = np.where(scale > 0, scale, 1.0)
    t = vals / safe_scale
    mix_scaled = (alpha[:, None] * t).sum(axis=0)
    ratios = np.where(dead, 1.0, t / np.where(dead, 1.0, mix_scaled))
    n_dead = int(dead.sum())
    if n_dead:
        log.warning("mixture underflowed at %d nodes; using prior weights there", n_dead)
    return ratios, dead


def responsibilities(alpha, components) -> tuple[ScalarField, ...]:
    """Posterior membership fields gamma_k = alpha_k m_k / m, one per component.

    Partition of unity holds at every node; where the mixture underflows to
    zero the responsibilities fall back to the prior weights (logged).
    """
    alpha = np.asarray(alpha, dtype=float)
    grid = components[0].grid
    ratios, _dead = _scaled_ratios(alpha, _component_matrix(components))
    gamma = alpha[:, None] * ratios
    gamma /= gamma.sum(axis=0)
    return tuple(ScalarField(grid, g) for g in gamma)


def update_moments(state: MixtureState, f: DensityField):
    """Weights, barycentres and covariances of the mixture against the data density.

    Uses the ratio form (m_k / m, no division by alpha_k): the weight is
    ∫ gamma_k f, the barycentre ∫ x (m_k/m) f and the covariance the matching
    centred second moment.  Covariances are lifted onto the eigenvalue floor.
    """
    grid = state.grid
    vals = _component_matrix(state.components)
    ratios, _dead = _scaled_ratios(state.alpha, vals)
    wf = f.values * grid.quad_weights
    gamma = state.alpha[:, None] * ratios
    alpha_new = gamma @ wf
    x = grid.coords
    d = grid.dim
    means = np.empty((state.k, d))
    covs = np.empty((state.k, d, d))
    lifted = 0
    for k in range(state.k):
        rw = ratios[k] * wf
        mu = x.T @ rw
        diff = x - mu
        cov = (diff.T * rw) @ diff
        cov = 0.5 * (cov + cov.T)
        if np.linalg.eigvalsh(cov).min() < COV_EIG_FLOOR:
            cov = cov + COV_EIG_FLOOR * np.eye(d)
            lifted += 1
        means[k] = mu
        covs[k] = cov
    if lifted:
        log.debug("lifted %d covariance(s) onto the eigenvalue floor", lifted)
    return alpha_new, means, covs


def coupling_cost(grid: Grid, mean, cov) -> ScalarField:
    """Anisotropic quadratic attraction cost 0.5 |cov^{-1}(x - mean)|^2 on the nodes."""
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    try:
        c, low = scipy.linalg.cho_factor(cov)
    except scipy.linalg.LinAlgError as exc:
        raise ValueError(f"covariance is not positive definite: {exc}") from None
    diff = (grid.coords - mean).T
    y = scipy.linalg.cho_solve((c, low), diff)
    return ScalarField(grid, 0.5 * np.einsum("an,an->n", y, y))


def gaussian_pdf(points: np.ndarray, mean, cov) -> np.ndarray:
    """Multivariate normal density evaluated at rows of ``points``."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    mean = np.asarray(mean, dtype=float)
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise ValueError("covariance is not positive definite") from None
    sol = scipy.linalg.solve_triangular(chol, (points - mean).T, lower=True)
    quad = np.einsum("an,an->n", sol, sol)
    norm = (2.0 * np.pi) ** (0.5 * len(mean)) * np.prod(np.diag(chol))
    return np.exp(-0.5 * quad) / norm


def gaussian_field(grid: Grid, mean, cov) -> DensityField:
    """Gaussian density restricted to the domain, renormalised to unit mass."""
    vals = gaussian_pdf(grid.coords, mean, cov)
    return density_field(grid, vals, normalize=True)


def mixture_field(state: MixtureState) -> ScalarField:
    """The combined density sum_k alpha_k m_k."""
    vals = state.alpha @ _component_matrix(state.components)
    return ScalarField(state.grid, vals)


def field_moments(grid: Grid, values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of a mass distribution given by nodal values."""
    w = values * grid.quad_weights
    mass = w.sum()
    if mass <= 0:
        raise ValueError("cannot take moments of a massless field")
    mu = (grid.coords.T @ w) / mass
    diff = grid.coords - mu
    cov = (diff.T * w) @ diff / mass
    return mu, 0.5 * (cov + cov.T)


@dataclass(frozen=True)
class ConsistencyReport:
    """Defects of a mixture against the fixed-point relations tying it to the data.

    Per component: gap between the component's own barycentre and the
    responsibility-weighted data mean; gap between the component's covariance
    and epsilon times the responsibility-weighted data covariance (centred at
    the component barycentre); gap between the weight and its integral form.
    """

    mean_residuals: np.ndarray
    cov_residuals: np.ndarray
    weight_residuals: np.ndarray

    @property
    def max_residual(self) -> float:
        return float(
            max(
                self.mean_residuals.max(),
                self.cov_residuals.max(),
                self.weight_residuals.max(),
            )
        )


def check_consistency(state: MixtureState, f: DensityField, epsilon: float) -> ConsistencyReport:
    """Measure how far the state is from being a self-consistent fit of ``f``."""
    grid = state.grid
    gamma = state.responsibilities
    if gamma is None:
        gamma = responsibilities(state.alpha, state.components)
    res_mean = np.zeros(state.k)
    res_cov = np.zeros(state.k)
    res_w = np.zeros(state.k)
    wq = grid.quad_weights
    x = grid.coords
    for k in range(state.k):
        nu, t_field = field_moments(grid, state.components[k].values)
        gw = gamma[k].values * f.values * wq
        denom = gw.sum()
        if denom <= 0:
            res_mean[k] = res_cov[k] = np.inf
            res_w[k] = abs(float(state.alpha[k]))
            continue
        gmean = (x.T @ gw) / denom
        diff = x - nu
        gcov = (diff.T * gw) @ diff / denom
        res_mean[k] = float(np.linalg.norm(nu - gmean))
        res_cov[k] = float(np.abs(t_field - epsilon * gcov).max())
        res_w[k] = abs(float(state.alpha[k]) - denom)
    return ConsistencyReport(res_mean, res_cov, res_w)


def moment_match_check(state: MixtureState, f: DensityField, epsilon: float = 1.0) -> tuple[float, float]:
    """Gap between mixture moments and data moments (covariance scaled by epsilon)."""
    mix_mean, mix_cov = field_moments(state.grid, mixture_field(state).values)
    f_mean, f_cov = field_moments(state.grid, f.values)
    mean_gap = float(np.linalg.norm(mix_mean - f_mean))
    cov_gap = float(np.abs(mix_cov - epsilon * f_cov).max())
    return mean_gap, cov_gap


def hard_assign(state: MixtureState, x) -> int:
    """Index of the component with the largest responsibility at the node nearest x.

    Compares the weighted component values directly (same argmax, no division),
    so it stays well defined arbitrarily deep in the tails.  Ties go to the
    lower index.
    """
    node = int(state.grid.nearest_node(np.atleast_2d(x))[0])
    scores = state.alpha * np.array([c.values[node] for c in state.components])
    return int(np.argmax(scores))
