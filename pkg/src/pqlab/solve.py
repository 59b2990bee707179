"""Discrete Dirichlet problems for integral functionals on tensor grids.

The energy of a nodal field is the midpoint rule over cells, with the
gradient in each cell taken as the average of its edge differences.  This
makes the energy of an affine field exact.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import _kernels
from .density import DensityModel, regularize_infinity  # noqa: F401  (re-exported)
from .fields import DiscreteField, Grid

log = logging.getLogger(__name__)


class LineSearchError(RuntimeError):
    """Backtracking found no decrease along a descent direction."""


@dataclass(frozen=True)
class SolveConfig:
    grad_tol: float = 1e-7
    max_iters: int = 20000
    c1: float = 1e-4
    backtrack: float = 0.5
    restart_every: int = 50

    def __post_init__(self):
        if not self.grad_tol > 0:
            raise ValueError("grad_tol must be positive")
        if not 0 < self.c1 < 0.5:
            raise ValueError("Armijo c1 must lie in (0, 1/2)")
        if not 0 < self.backtrack < 1:
            raise ValueError("backtracking factor must lie in (0, 1)")
        if self.max_iters < 1 or self.restart_every < 1:
            raise ValueError("max_iters and restart_every must be positive")


@dataclass
class SolveResult:
    field: DiscreteField
    energy: float
    grad_norm: float
    iters: int
    converged: bool
    trace: list = field(default_factory=list, repr=False)
    message: str = ""


class Energy:
    """Discrete energy of a density (or approximant) on a fixed grid."""

    def __init__(self, model, grid: Grid):
        self.model = model
        self.grid = grid
        self.density = model.pinned(grid.cell_centers())

    def value(self, u: np.ndarray) -> float:
        du = _kernels.cell_gradients(u, self.grid.spacing)
        cells = self.density.value(du)
        return float(np.sum(cells) * self.grid.cell_volume)

    def value_and_grad(self, u: np.ndarray):
        g = self.grid
        du = _kernels.cell_gradients(u, g.spacing)
        e = float(np.sum(self.density.value(du)) * g.cell_volume)
        flux = self.density.grad(du) * g.cell_volume
        return e, _kernels.scatter_cell_flux(flux, g.spacing)


def _cell_values(model, field: DiscreteField) -> np.ndarray:
    du = _kernels.cell_gradients(field.values, field.grid.spacing)
    return model.pinned(field.grid.cell_centers()).value(du)


def discrete_energy(model, field: DiscreteField) -> float:
    """Midpoint-rule energy: sum over cells of vol * f(x_c, Du_c)."""
    return Energy(model, field.grid).value(field.values)


def discrete_energy_gradient(model, field: DiscreteField) -> np.ndarray:
    """Partial derivatives of ``discrete_energy`` at interior nodes (zero on the boundary)."""
    _, g = Energy(model, field.grid).value_and_grad(field.values)
    g[field.boundary_mask] = 0.0
    return g


def cell_gradient_norms(field: DiscreteField) -> np.ndarray:
    du = _kernels.cell_gradients(field.values, field.grid.spacing)
    return np.linalg.norm(du, axis=-1)


def gradient_operator(grid: Grid) -> list:
    """Sparse matrices D_j with (D_j u)[cell] = j-th component of the cell gradient."""
    N, h = grid.N, grid.spacing
    diff = sp.diags([-np.ones(N - 1), np.ones(N - 1)], [0, 1], shape=(N - 1, N)) / h
    avg = sp.diags([0.5 * np.ones(N - 1), 0.5 * np.ones(N - 1)], [0, 1], shape=(N - 1, N))
    ops = []
    for j in range(grid.n):
        mat = None
        for k in range(grid.n):
            factor = diff if k == j else avg
            mat = factor if mat is None else sp.kron(mat, factor)
        ops.append(sp.csr_matrix(mat))
    return ops


def _stiffness(grid: Grid):
    return sum(D.T @ D for D in gradient_operator(grid)).tocsr()


class _LaplacePreconditioner:
    """Inverse of the interior discrete Laplacian (sparse LU, factorised once)."""

    def __init__(self, grid: Grid, mask: np.ndarray):
        L = _stiffness(grid) * grid.cell_volume
        self.inner = ~mask.ravel()
        self.shape = grid.shape
        self.lu = spla.splu(L[self.inner][:, self.inner].tocsc())

    def __call__(self, g: np.ndarray) -> np.ndarray:
        out = np.zeros(g.size)
        out[self.inner] = self.lu.solve(g.ravel()[self.inner])
        return out.reshape(self.shape)


def harmonic_extension(boundary: DiscreteField) -> DiscreteField:
    """Minimiser of the discrete Dirichlet energy sum |Du_c|^2 with the given boundary values."""
    grid = boundary.grid
    L = _stiffness(grid)
    mask = boundary.boundary_mask.ravel()
    u = boundary.values.ravel().copy()
    inner = ~mask
    if inner.any():
        A = L[inner][:, inner]
        rhs = -(L[inner][:, mask] @ u[mask])
        u[inner] = spla.spsolve(A.tocsc(), rhs)
    return boundary.with_values(u.reshape(grid.shape))


def _check_model(model):
    degenerate = getattr(model, "raw", False) and model.envelope.p < 2
    if degenerate and getattr(model, "infinity_k", None) is None:
        raise ValueError(
            "raw-power densities with p < 2 are not accepted by minimize; apply regularize_infinity first"
        )


def minimize(model, boundary: DiscreteField, cfg: SolveConfig | None = None, initial=None) -> SolveResult:
    """Minimise the discrete energy over fields with the boundary values of ``boundary``.

    Polak-Ribiere (PR+) nonlinear conjugate gradients with periodic restarts
    and Armijo backtracking, started from the discrete harmonic extension
    unless ``initial`` (an array or field) is given.  Search directions are
    preconditioned by the discrete Laplacian, which makes the iteration
    count nearly independent of the grid size for densities close to
    quadratic.  The stopping test uses the unpreconditioned gradient.

    Once energy differences drop to round-off level the Armijo test can no
    longer tell a decrease from noise.  From then on steps are chosen on the
    directional derivative instead: for a convex energy, phi'(alpha) <= 0
    certifies that the step lowered the energy, and the trace is advanced
    by the integrated directional derivative.
    """
    cfg = cfg or SolveConfig()
    _check_model(model)
    grid = boundary.grid
    mask = boundary.boundary_mask
    if not np.all(np.isfinite(boundary.values[mask])):
        raise ValueError("non-finite boundary values")
    energy = Energy(model, grid)

    if initial is None:
        u = harmonic_extension(boundary).values.copy()
    else:
        u = np.array(getattr(initial, "values", initial), dtype=float)
        u[mask] = boundary.values[mask]

    def value_and_grad(v):
        e, gr = energy.value_and_grad(v)
        gr[mask] = 0.0
        return e, gr

    E, g = value_and_grad(u)
    if not math.isfinite(E):
        raise ValueError("initial energy is not finite")
    trace = [E]
    precond = _LaplacePreconditioner(grid, mask) if (~mask).any() else (lambda r: r * 0.0)
    z = precond(g)
    d = -z
    gz = float(np.vdot(g, z))
    gg = float(np.vdot(g, g))
    alpha_prev = slope_prev = None
    since_restart = 0
    floor_mode = False
    best_gnorm, since_best = math.inf, 0
    message = "max_iters reached"
    it = 0
    for it in range(cfg.max_iters):
        gnorm = math.sqrt(gg)
        if gnorm <= cfg.grad_tol:
            break
        if gnorm < best_gnorm * (1 - 1e-3):
            best_gnorm, since_best = gnorm, 0
        else:
            since_best += 1
            if since_best > 4 * cfg.restart_every:
                message = "stalled: gradient norm stopped decreasing"
                break
        slope = float(np.vdot(g, d))
        if slope >= 0 or since_restart >= cfg.restart_every:
            d = -z
            slope = -gz
            since_restart = 0
        if slope >= 0:
            message = "stalled: no descent direction at working precision"
            break
        a0 = 1.0 if alpha_prev is None else max(alpha_prev * slope_prev / slope, 1e-300)

        step = None
        if not floor_mode:
            try:
                step = _armijo(energy, u, d, E, slope, a0, cfg)
            except LineSearchError:
                floor_mode = True
            else:
                if trace[-1] - step[1] <= 1e3 * np.finfo(float).eps * max(abs(E), 1.0):
                    floor_mode = True
        if step is not None:
            alpha = step[0]
            u = u + alpha * d
            E_new, g_new = value_and_grad(u)
            if E_new > trace[-1]:
                raise AssertionError("energy increased during descent")
            trace.append(E_new)
        else:
            try:
                alpha, dE, g_new = _slope_search(value_and_grad, u, d, slope, a0)
            except LineSearchError as exc:
                message = str(exc)
                break
            u = u + alpha * d
            E_new = energy.value(u)
            trace.append(trace[-1] + dE)
        z_new = precond(g_new)
        gz_new = float(np.vdot(g_new, z_new))
        beta = max(0.0, float(np.vdot(z_new, g_new - g)) / gz) if gz > 0 else 0.0
        d = -z_new + beta * d
        since_restart += 1
        alpha_prev, slope_prev = alpha, slope
        E, g, z, gz = E_new, g_new, z_new, gz_new
        gg = float(np.vdot(g, g))
    else:
        it = cfg.max_iters
    gnorm = math.sqrt(gg)
    converged = gnorm <= cfg.grad_tol
    if converged:
        message = "gradient tolerance reached"
    return SolveResult(boundary.with_values(u), E, gnorm, it, converged, trace, message)


def _armijo(energy: Energy, u, d, E, slope, a0, cfg: SolveConfig):
    """Backtrack until the Armijo condition holds.

    The first trial is the minimiser of the quadratic through E, the slope
    and the energy at ``a0`` (capped at 10 a0).
    """
    E0 = energy.value(u + a0 * d)
    alpha = a0
    if math.isfinite(E0):
        curv = E0 - E - slope * a0
        if curv > 0:
            alpha = min(-slope * a0 * a0 / (2.0 * curv), 10.0 * a0)
    if alpha != a0 and math.isfinite(E0) and E0 <= E + cfg.c1 * a0 * slope:
        fallback = (a0, E0)
    else:
        fallback = None
    for _ in range(60):
        Et = energy.value(u + alpha * d)
        if math.isfinite(Et) and Et <= E + cfg.c1 * alpha * slope:
            if fallback is not None and fallback[1] < Et:
                return fallback
            return alpha, Et
        alpha *= cfg.backtrack
    if fallback is not None:
        return fallback
    raise LineSearchError("line search failed: no sufficient decrease along the search direction")


def _slope_search(value_and_grad, u, d, slope0, a0):
    """Largest step found with phi'(alpha) <= 0, by bracketing and regula falsi.

    Returns (alpha, estimated energy change, gradient at the new point).
    """

    def dphi(a):
        _, gr = value_and_grad(u + a * d)
        return float(np.vdot(gr, d)), gr

    lo, s_lo, g_lo = 0.0, slope0, None
    hi = s_hi = None
    a = a0
    for _ in range(60):
        s, gr = dphi(a)
        if s <= 0:
            lo, s_lo, g_lo = a, s, gr
            if s == 0:
                break
            a *= 2.0
        else:
            hi, s_hi = a, s
            break
    if hi is not None:
        side = 0
        for _ in range(80):
            if (lo > 0 and abs(s_lo) <= 0.1 * abs(slope0)) or hi - lo <= 1e-14 * hi:
                break
            # Illinois variant of regula falsi: damp the endpoint that keeps surviving
            a = lo - s_lo * (hi - lo) / (s_hi - s_lo)
            if not lo < a < hi:
                a = 0.5 * (lo + hi)
            s, gr = dphi(a)
            if s <= 0:
                lo, s_lo, g_lo = a, s, gr
                if side == -1:
                    s_hi *= 0.5
                side = -1
            else:
                hi, s_hi = a, s
                if side == 1:
                    s_lo *= 0.5
                side = 1
    if lo == 0.0:
        raise LineSearchError("stalled: no step with nonpositive directional derivative")
    s_end, _ = dphi(lo)
    s_mid, _ = dphi(0.5 * lo)
    dE = min(lo / 6.0 * (slope0 + 4.0 * s_mid + s_end), 0.0)
    return lo, dE, g_lo


def interior_sup_gradient(field: DiscreteField, rho: float, center=None) -> float:
    """max |Du_c| over cells whose centres lie in the Euclidean ball B_rho."""
    g = field.grid
    c = g.center if center is None else np.asarray(center, dtype=float)
    room = g.half_width - np.max(np.abs(c - g.center))
    if rho + 2 * g.spacing > room + 1e-12:
        raise ValueError(f"ball radius {rho} too large: needs two cells of clearance inside the grid")
    centers = g.cell_centers()
    inside = np.linalg.norm(centers - c, axis=-1) <= rho + 1e-12
    return float(cell_gradient_norms(field)[inside].max())


def compute_example_iv_K(p: float, q: float, M_coef: float, samples: int = 20001) -> float:
    """max over t in [0, 1) of (1 - t^q) / (t^p + M (t^q - 1) + 1).

    Dense grid search followed by golden-section refinement around the best
    grid point.
    """
    if not (p > 1 and q > 1):
        raise ValueError("exponents must exceed 1")

    def ratio(t):
        return (1.0 - t**q) / (t**p + M_coef * (t**q - 1.0) + 1.0)

    t = np.linspace(0.0, 1.0, samples, endpoint=False)
    den = t**p + M_coef * (t**q - 1.0) + 1.0
    if np.any(den <= 0):
        raise ValueError("nonpositive denominator on [0, 1)")
    vals = ratio(t)
    i = int(np.argmax(vals))
    lo = t[max(i - 1, 0)]
    hi = t[min(i + 1, samples - 1)] if i + 1 < samples else 1.0 - 1e-15
    invphi = (math.sqrt(5) - 1) / 2
    a, b = lo, hi
    c_, d_ = b - invphi * (b - a), a + invphi * (b - a)
    fc, fd = ratio(c_), ratio(d_)
    for _ in range(100):
        if fc >= fd:
            b, d_, fd = d_, c_, fc
            c_ = b - invphi * (b - a)
            fc = ratio(c_)
        else:
            a, c_, fc = c_, d_, fd
            d_ = a + invphi * (b - a)
            fd = ratio(d_)
    return float(max(vals[i], fc, fd, ratio(lo)))
