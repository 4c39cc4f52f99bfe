"""One population's stationary mean field game system, discretised and solved.

The value equation (HJB) uses a centred Laplacian and centred gradients with
Neumann boundary conditions imposed by ghost-node reflection, so the normal
difference at a wall vanishes identically.  The density equation (FP) is not
discretised independently: its transport term is the adjoint, in the
quadrature-weighted pairing, of the linearised Hamiltonian term of the HJB
equation.  That construction bakes the no-flux boundary condition into the
boundary rows and makes discrete mass conservation and the duality identity
hold to machine precision.

The two normalisation conditions (unit mass for the density, zero mean for
the value) enter as residual rows, giving 2N+2 equations in 2N+1 unknowns.
The nonlinear system is solved by damped Newton steps whose linear subproblems
are least-squares solves of the rectangular Jacobian.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .density import DensityField, density_field
from .grid import Grid, ScalarField
from .mixture import gaussian_pdf

__all__ = [
    "HamiltonianSpec",
    "NewtonConfig",
    "PopulationSolution",
    "SolverStagnationError",
    "SolverNonConvergenceError",
    "hjb_residual",
    "fp_residual",
    "hamiltonian_jacobian",
    "fp_transport_weighted",
    "assemble_system",
    "newton_least_squares",
    "solve_population",
    "gaussian_closed_form",
    "interior_mask",
]

log = logging.getLogger(__name__)


class SolverStagnationError(RuntimeError):
    """Line search found no descent direction above the minimum step."""

    def __init__(self, residual_norm: float):
        super().__init__(f"line search stagnated at residual norm {residual_norm:.3e}")
        self.residual_norm = residual_norm


class SolverNonConvergenceError(RuntimeError):
    """Newton iteration cap reached before the residual tolerance."""

    def __init__(self, residual_norm: float, iterations: int):
        super().__init__(
            f"no convergence after {iterations} iterations "
            f"(residual norm {residual_norm:.3e})"
        )
        self.residual_norm = residual_norm
        self.iterations = iterations


@dataclass(frozen=True)
class HamiltonianSpec:
    """Hamiltonian family R |p|^r - H0(x); the default recovers 0.5 |p|^2."""

    R: float = 0.5
    r: float = 2.0
    h0: ScalarField | None = None

    def __post_init__(self) -> None:
        if not self.R > 0:
            raise ValueError("R must be positive")
        if not self.r > 1:
            raise ValueError("the exponent r must exceed 1")

    def value(self, g: np.ndarray) -> np.ndarray:
        """R |p|^r at each node, g of shape (dim, N)."""
        g2 = np.einsum("an,an->n", g, g)
        if self.r == 2.0:
            return self.R * g2
        return self.R * g2 ** (0.5 * self.r)

    def grad(self, g: np.ndarray) -> np.ndarray:
        """D_p H = R r |p|^(r-2) p, per axis; zero at p = 0."""
        if self.r == 2.0:
            return 2.0 * self.R * g
        g2 = np.einsum("an,an->n", g, g)
        with np.errstate(divide="ignore", invalid="ignore"):
            factor = np.where(g2 > 0, g2 ** (0.5 * self.r - 1.0), 0.0)
        return self.R * self.r * factor * g

    def hess(self, g: np.ndarray) -> np.ndarray:
        """Hessian of H in p, shape (dim, dim, N); zero at p = 0 for r != 2."""
        dim, n = g.shape
        eye = np.eye(dim)[:, :, None]
        if self.r == 2.0:
            return 2.0 * self.R * np.broadcast_to(eye, (dim, dim, n)).copy()
        g2 = np.einsum("an,an->n", g, g)
        with np.errstate(divide="ignore", invalid="ignore"):
            f1 = np.where(g2 > 0, g2 ** (0.5 * self.r - 1.0), 0.0)
            f2 = np.where(g2 > 0, g2 ** (0.5 * self.r - 2.0), 0.0)
        outer = g[:, None, :] * g[None, :, :]
        return self.R * self.r * ((self.r - 2.0) * f2 * outer + f1 * eye)


@dataclass(frozen=True)
class NewtonConfig:
    """Damped Newton and least-squares settings for one population solve.

    The stopping test uses ``residual_tolerance`` scaled by max(1, |F|_inf) so
    that strongly peaked coupling costs, whose residuals start many orders of
    magnitude above 1, stop at the same relative accuracy.
    """

    epsilon: float = 1.0
    max_iterations: int = 60
    residual_tolerance: float = 1e-9
    armijo: float = 1e-4
    contraction: float = 0.5
    min_step: float = 2.0**-20
    positivity_floor: float = 1e-10
    dense_threshold: int = 1500
    log_path: str | None = None

    def __post_init__(self) -> None:
        if self.epsilon <= 0 or self.residual_tolerance <= 0:
            raise ValueError("epsilon and residual_tolerance must be positive")
        if not 0 < self.contraction < 1:
            raise ValueError("contraction must lie in (0, 1)")


@dataclass(frozen=True)
class PopulationSolution:
    """Value field, ergodic constant and density of one converged population."""

    u: ScalarField
    lam: float
    m: DensityField
    iterations: int = 0
    residual_norm: float = float("nan")


def _lap1d(n: int, h: float) -> sp.csr_matrix:
    main = np.full(n, -2.0)
    off = np.ones(n - 1)
    lap = sp.diags([off, main, off], [-1, 0, 1], format="lil")
    lap[0, 1] = 2.0  # reflected ghost value
    lap[n - 1, n - 2] = 2.0
    return (lap / h**2).tocsr()


def _grad1d(n: int, h: float) -> sp.csr_matrix:
    off = np.ones(n - 1) / (2.0 * h)
    grad = sp.diags([-off, off], [-1, 1], format="lil")
    grad[0, 1] = 0.0  # reflection cancels the normal difference at the walls
    grad[n - 1, n - 2] = 0.0
    return grad.tocsr()


@dataclass(frozen=True)
class _Operators:
    lap: sp.csr_matrix
    grads: tuple[sp.csr_matrix, ...]


@lru_cache(maxsize=32)
def _operators(grid: Grid) -> _Operators:
    parts_l = []
    parts_g = []
    for a, (n, h) in enumerate(zip(grid.nodes_per_axis, grid.spacing)):
        parts_l.append(_lap1d(n, h))
        parts_g.append(_grad1d(n, h))
    if grid.dim == 1:
        return _Operators(lap=parts_l[0], grads=(parts_g[0],))
    eyes = [sp.identity(n, format="csr") for n in grid.nodes_per_axis]
    lap = sp.kron(parts_l[0], eyes[1]) + sp.kron(eyes[0], parts_l[1])
    gx = sp.kron(parts_g[0], eyes[1])
    gy = sp.kron(eyes[0], parts_g[1])
    return _Operators(lap=lap.tocsr(), grads=(gx.tocsr(), gy.tocsr()))


def _gradient(u: np.ndarray, grid: Grid) -> np.ndarray:
    ops = _operators(grid)
    return np.stack([g @ u for g in ops.grads])


def interior_mask(grid: Grid, depth: int = 2) -> np.ndarray:
    """Nodes at least ``depth`` cells away from every boundary face."""
    mask = np.ones(grid.shape, dtype=bool)
    for a, n in enumerate(grid.nodes_per_axis):
        idx = np.arange(n)
        keep = (idx >= depth) & (idx <= n - 1 - depth)
        shape = [1] * grid.dim
        shape[a] = n
        mask &= keep.reshape(shape)
    return mask.ravel(order="C")


def hjb_residual(
    u: np.ndarray | ScalarField,
    lam: float,
    cost: np.ndarray | ScalarField,
    ham: HamiltonianSpec,
    grid: Grid,
    epsilon: float,
) -> np.ndarray:
    """Per-node residual of -eps Lap u + R|Du|^r - H0 + lambda - F."""
    u = u.values if isinstance(u, ScalarField) else np.asarray(u, dtype=float)
    f_vals = cost.values if isinstance(cost, ScalarField) else np.asarray(cost, dtype=float)
    ops = _operators(grid)
    g = _gradient(u, grid)
    res = -epsilon * (ops.lap @ u) + ham.value(g) + lam - f_vals
    if ham.h0 is not None:
        res = res - ham.h0.values
    return res


def hamiltonian_jacobian(u: np.ndarray | ScalarField, ham: HamiltonianSpec, grid: Grid) -> sp.csr_matrix:
    """Linearisation of the Hamiltonian term: A[i, j] = d(R|Du|^r)_i / du_j."""
    u = u.values if isinstance(u, ScalarField) else np.asarray(u, dtype=float)
    ops = _operators(grid)
    q = ham.grad(_gradient(u, grid))
    blocks = [sp.diags(q[a]) @ ops.grads[a] for a in range(grid.dim)]
    out = blocks[0]
    for b in blocks[1:]:
        out = out + b
    return out.tocsr()


def fp_transport_weighted(u: np.ndarray | ScalarField, ham: HamiltonianSpec, grid: Grid) -> sp.csr_matrix:
    """Transport block of the density equation in the weighted pairing.

    Equals the transpose of W A, where A is the Hamiltonian linearisation and
    W the diagonal of quadrature weights; built by column-scaling so the
    transpose identity holds entrywise exactly.
    """
    a_mat = hamiltonian_jacobian(u, ham, grid)
    return (a_mat.T @ sp.diags(grid.quad_weights)).tocsr()


def fp_residual(
    m: np.ndarray | ScalarField,
    u: np.ndarray | ScalarField,
    ham: HamiltonianSpec,
    grid: Grid,
    epsilon: float,
) -> np.ndarray:
    """Per-node residual of the density equation, assembled as the discrete adjoint.

    The row is the weighted adjoint of the linearised HJB operator applied to m;
    its kernel is exactly the stationary no-flux density.  The quadrature-weighted
    sum of the rows vanishes for every (u, m) — the discrete divergence theorem.
    """
    m = m.values if isinstance(m, ScalarField) else np.asarray(m, dtype=float)
    u = u.values if isinstance(u, ScalarField) else np.asarray(u, dtype=float)
    ops = _operators(grid)
    tw = fp_transport_weighted(u, ham, grid)
    return -epsilon * (ops.lap @ m) + (tw @ m) / grid.quad_weights


def _fp_jacobian_u(u: np.ndarray, m: np.ndarray, ham: HamiltonianSpec, grid: Grid) -> sp.csr_matrix:
    """Derivative of the FP transport term with respect to u (exact)."""
    ops = _operators(grid)
    g = _gradient(u, grid)
    hess = ham.hess(g)
    w = grid.quad_weights
    inv_w = sp.diags(1.0 / w)
    out = None
    for a in range(grid.dim):
        for b in range(grid.dim):
            block = inv_w @ ops.grads[a].T @ sp.diags(w * m * hess[a, b]) @ ops.grads[b]
            out = block if out is None else out + block
    return out.tocsr()


def assemble_system(
    u: np.ndarray,
    m: np.ndarray,
    lam: float,
    cost: np.ndarray,
    ham: HamiltonianSpec,
    grid: Grid,
    epsilon: float,
) -> tuple[np.ndarray, sp.csr_matrix]:
    """Full residual (2N+2) and its exact Jacobian (2N+2) x (2N+1).

    Rows: N value-equation residuals, N density-equation residuals, the mass
    defect of m, and the quadrature mean of u.  Columns: u, m, lambda.
    """
    n = grid.total_nodes
    w = grid.quad_weights
    ops = _operators(grid)
    res_h = hjb_residual(u, lam, cost, ham, grid, epsilon)
    tw = fp_transport_weighted(u, ham, grid)
    res_f = -epsilon * (ops.lap @ m) + (tw @ m) / w
    residual = np.concatenate([res_h, res_f, [w @ m - 1.0], [w @ u]])

    a_mat = hamiltonian_jacobian(u, ham, grid)
    block_hu = -epsilon * ops.lap + a_mat
    block_fm = -epsilon * ops.lap + sp.diags(1.0 / w) @ tw
    block_fu = _fp_jacobian_u(u, m, ham, grid)
    ones_col = sp.csr_matrix(np.ones((n, 1)))
    w_row = sp.csr_matrix(w)
    jac = sp.bmat(
        [
            [block_hu, None, ones_col],
            [block_fu, block_fm, None],
            [None, w_row, None],
            [w_row, None, None],
        ],
        format="csr",
    )
    return residual, jac


def _system_residual(
    z: np.ndarray, cost: np.ndarray, ham: HamiltonianSpec, grid: Grid, epsilon: float
) -> np.ndarray:
    n = grid.total_nodes
    u, m, lam = z[:n], z[n : 2 * n], z[2 * n]
    w = grid.quad_weights
    res_h = hjb_residual(u, lam, cost, ham, grid, epsilon)
    res_f = fp_residual(m, u, ham, grid, epsilon)
    return np.concatenate([res_h, res_f, [w @ m - 1.0], [w @ u]])


def _lsq_solve(jac: sp.csr_matrix, rhs: np.ndarray, dense_threshold: int) -> np.ndarray:
    """Minimum-norm least-squares step: dense QR when small, else a sparse
    augmented (KKT) solve with two rounds of iterative refinement."""
    rows, cols = jac.shape
    if cols <= dense_threshold:
        sol, *_ = np.linalg.lstsq(jac.toarray(), rhs, rcond=None)
        return sol
    scale = max(float(abs(jac).max()), 1.0)
    alpha = 1e-3 * scale
    kkt = sp.bmat(
        [[alpha * sp.identity(rows), jac], [jac.T, None]], format="csc"
    )
    lu = spla.splu(kkt)
    full = lu.solve(np.concatenate([rhs, np.zeros(cols)]))
    s, x = full[:rows], full[rows:]
    for _ in range(2):
        top = rhs - (alpha * s + jac @ x)
        bottom = -(jac.T @ s)
        corr = lu.solve(np.concatenate([top, bottom]))
        s = s + corr[:rows]
        x = x + corr[rows:]
    return x


def newton_least_squares(
    initial: PopulationSolution,
    cost: ScalarField,
    ham: HamiltonianSpec,
    grid: Grid,
    config: NewtonConfig,
) -> PopulationSolution:
    """Damped Newton on the overdetermined system, steps in the least-squares sense.

    Backtracks until the residual 2-norm satisfies the Armijo-type decrease
    test; raises on stagnation or when the iteration cap is hit.  The returned
    solution has its normalisations re-enforced: zero quadrature mean for u,
    tiny negative density values clamped, and the density mass rescaled to 1.
    """
    n = grid.total_nodes
    w = grid.quad_weights
    f_vals = cost.values
    z = np.concatenate([initial.u.values, initial.m.values, [initial.lam]])
    if initial.m.values.min() <= 0:
        raise ValueError("initial density must be strictly positive")
    eff_tol = config.residual_tolerance * max(1.0, float(np.abs(f_vals).max()))
    res = _system_residual(z, f_vals, ham, grid, config.epsilon)
    res_norm = float(np.linalg.norm(res))
    trace: list[tuple[int, float, float]] = []
    iterations = 0
    for iteration in range(config.max_iterations):
        if res_norm < eff_tol:
            break
        residual, jac = assemble_system(
            z[:n], z[n : 2 * n], z[2 * n], f_vals, ham, grid, config.epsilon
        )
        step = _lsq_solve(jac, -residual, config.dense_threshold)
        t = 1.0
        while True:
            z_try = z + t * step
            res_try = _system_residual(z_try, f_vals, ham, grid, config.epsilon)
            norm_try = float(np.linalg.norm(res_try))
            if norm_try <= (1.0 - config.armijo * t) * res_norm:
                break
            t *= config.contraction
            if t < config.min_step:
                raise SolverStagnationError(res_norm)
        z = z_try
        res_norm = norm_try
        iterations = iteration + 1
        trace.append((iterations, res_norm, t))
    else:
        raise SolverNonConvergenceError(res_norm, config.max_iterations)
    if config.log_path:
        with open(config.log_path, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(["iteration", "residual_norm", "step"])
            writer.writerows(trace)

    u_vals = z[:n] - (w @ z[:n]) / grid.volume
    m_vals = z[n : 2 * n].copy()
    genuinely_negative = int((m_vals < -config.positivity_floor).sum())
    if genuinely_negative:
        log.warning(
            "clamping %d density values below -%.1e", genuinely_negative, config.positivity_floor
        )
    np.maximum(m_vals, 0.0, out=m_vals)
    return PopulationSolution(
        u=ScalarField(grid, u_vals),
        lam=float(z[2 * n]),
        m=density_field(grid, m_vals, normalize=True),
        iterations=iterations,
        residual_norm=res_norm,
    )


def solve_population(
    cost: ScalarField,
    ham: HamiltonianSpec,
    grid: Grid,
    config: NewtonConfig,
    warm_start: PopulationSolution | None = None,
) -> PopulationSolution:
    """Solve one population system, warm-starting from a previous solution if given.

    The cold start is u = 0, a uniform density and lambda equal to the
    quadrature mean of the cost, which is exact for constant costs.
    """
    if warm_start is None:
        uniform = density_field(grid, np.ones(grid.total_nodes), normalize=True)
        lam0 = float(grid.quad_weights @ cost.values) / grid.volume
        warm_start = PopulationSolution(
            u=ScalarField(grid, np.zeros(grid.total_nodes)), lam=lam0, m=uniform
        )
    return newton_least_squares(warm_start, cost, ham, grid, config)


def gaussian_closed_form(
    grid: Grid, mean, t_cov, epsilon: float
) -> tuple[ScalarField, float, DensityField]:
    """Closed-form solution of the quadratic model with cost built from T/epsilon.

    For the quadratic Hamiltonian 0.5|p|^2 and the anisotropic quadratic cost
    with covariance parameter T/epsilon, the triple

        u = (epsilon/2) (x-mu)^t T^{-1} (x-mu),  lambda = epsilon^2 tr(T^{-1}),
        m = N(mu, T)

    solves the population system on the whole space.  u is returned shifted to
    zero quadrature mean and m renormalised on the domain.
    """
    mean = np.asarray(mean, dtype=float)
    t_cov = np.atleast_2d(np.asarray(t_cov, dtype=float))
    t_inv = np.linalg.inv(t_cov)
    diff = grid.coords - mean
    u_vals = 0.5 * epsilon * np.einsum("ni,ij,nj->n", diff, t_inv, diff)
    u_vals -= (grid.quad_weights @ u_vals) / grid.volume
    lam = float(epsilon**2 * np.trace(t_inv))
    m = density_field(grid, gaussian_pdf(grid.coords, mean, t_cov), normalize=True)
    return ScalarField(grid, u_vals), lam, m
