"""Backward parabolic system, coordinate change, and its diagnostics.

``solve_backward_pde`` discretises the vector system

    d_t u + 1/2 Lap u + b . grad u - lam u + Phi = 0,   u(T, .) = 0

on a box with homogeneous Dirichlet boundary, implicit in diffusion and
reaction and explicit first-order upwind in advection.  With Phi = b and
``lam`` large enough that ``sup || grad u || <= 1/2``, the map
``gamma(t, x) = x + u(t, x)`` is invertible with a uniformly bounded
inverse Jacobian; ``calibrate_lambda`` finds such a ``lam`` by doubling.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .drift import DriftField, MixedNormParams
from .errors import (
    CalibrationError,
    DomainError,
    EvaluationError,
    ExtrapolationError,
    InversionError,
    ValidationError,
)

__all__ = [
    "SpaceTimeGrid",
    "GridField",
    "ZvonkinSolution",
    "HolderDiagnostics",
    "solve_backward_pde",
    "calibrate_lambda",
    "gamma_forward",
    "gamma_inverse",
    "holder_diagnostics",
    "save_gridfield_csv",
    "load_gridfield_csv",
    "diagnostics_report",
]


@dataclass(frozen=True)
class SpaceTimeGrid:
    """Uniform tensor grid on [0, T] x [-L, L]^d with d in {1, 2}."""

    T: float
    L: float
    n_t: int
    n_x: int
    d: int = 1

    def __post_init__(self):
        if self.T <= 0 or self.L <= 0 or self.n_t < 1:
            raise ValidationError("grid extents must be positive")
        if self.n_x < 3 or self.n_x % 2 == 0:
            raise ValidationError("n_x must be odd and at least 3 so x = 0 is a node")
        if self.d not in (1, 2):
            raise ValidationError("only d = 1 or 2 grids are supported")

    @property
    def dt(self) -> float:
        return self.T / self.n_t

    @property
    def dx(self) -> float:
        return 2.0 * self.L / (self.n_x - 1)

    @property
    def t_nodes(self) -> np.ndarray:
        return np.arange(self.n_t + 1) * self.dt

    @property
    def x_nodes(self) -> np.ndarray:
        return np.linspace(-self.L, self.L, self.n_x)

    @property
    def space_shape(self) -> tuple[int, ...]:
        return (self.n_x,) * self.d

    def points(self) -> np.ndarray:
        """All spatial nodes, shape (prod(space_shape), d)."""
        xs = self.x_nodes
        if self.d == 1:
            return xs[:, None]
        g0, g1 = np.meshgrid(xs, xs, indexing="ij")
        return np.stack([g0.ravel(), g1.ravel()], axis=-1)

    def interior_points(self) -> np.ndarray:
        xs = self.x_nodes[1:-1]
        if self.d == 1:
            return xs[:, None]
        g0, g1 = np.meshgrid(xs, xs, indexing="ij")
        return np.stack([g0.ravel(), g1.ravel()], axis=-1)


@dataclass(frozen=True)
class GridField:
    """Vector field sampled on the nodes of a space-time grid."""

    grid: SpaceTimeGrid
    values: np.ndarray  # (n_t + 1,) + space_shape + (m,)
    error_estimate: Optional[float] = None

    def __post_init__(self):
        expected = (self.grid.n_t + 1,) + self.grid.space_shape
        if self.values.shape[:-1] != expected:
            raise ValidationError(
                f"grid field shape {self.values.shape} does not match grid {expected}"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValidationError("grid field contains non-finite entries")

    @property
    def n_comp(self) -> int:
        return self.values.shape[-1]


# ---------------------------------------------------------------------------
# parabolic marching core (shared by the backward system and the forward
# Kolmogorov solver)


def _interior(arr: np.ndarray, d: int) -> np.ndarray:
    return arr[1:-1] if d == 1 else arr[1:-1, 1:-1]


def _laplacian_full(w: np.ndarray, dx: float, d: int) -> np.ndarray:
    """Five/three-point Laplacian of a full-grid array, interior values."""
    if d == 1:
        return (w[:-2] - 2.0 * w[1:-1] + w[2:]) / dx**2
    core = (w[:-2, 1:-1] - 2.0 * w[1:-1, 1:-1] + w[2:, 1:-1]) / dx**2
    core = core + (w[1:-1, :-2] - 2.0 * w[1:-1, 1:-1] + w[1:-1, 2:]) / dx**2
    return core


def _upwind(w: np.ndarray, c: np.ndarray, dx: float, d: int) -> np.ndarray:
    """First-order upwind approximation of (c . grad w) at interior nodes.

    ``w`` is the full-grid array (space_shape + (m,)); ``c`` holds interior
    velocities shaped space_interior + (d,).  Velocity component > 0 uses
    the forward difference, < 0 the backward one, which keeps the explicit
    update monotone under the advection CFL condition.
    """
    if d == 1:
        fwd = (w[2:] - w[1:-1]) / dx
        bwd = (w[1:-1] - w[:-2]) / dx
        c0 = c[..., 0][..., None]
        return np.where(c0 > 0, c0 * fwd, c0 * bwd)
    out = np.zeros_like(w[1:-1, 1:-1])
    fwd = (w[2:, 1:-1] - w[1:-1, 1:-1]) / dx
    bwd = (w[1:-1, 1:-1] - w[:-2, 1:-1]) / dx
    c0 = c[..., 0][..., None]
    out += np.where(c0 > 0, c0 * fwd, c0 * bwd)
    fwd = (w[1:-1, 2:] - w[1:-1, 1:-1]) / dx
    bwd = (w[1:-1, 1:-1] - w[1:-1, :-2]) / dx
    c1 = c[..., 1][..., None]
    out += np.where(c1 > 0, c1 * fwd, c1 * bwd)
    return out


def _interior_operator(grid: SpaceTimeGrid, lam: float):
    """LU factorisation of (1 + lam dt) I - dt/2 Lap on interior nodes."""
    n = grid.n_x - 2
    dt, dx = grid.dt, grid.dx
    one = sp.identity(n, format="csc")
    lap1 = sp.diags(
        [np.ones(n - 1), -2.0 * np.ones(n), np.ones(n - 1)], [-1, 0, 1], format="csc"
    ) / dx**2
    if grid.d == 1:
        lap = lap1
        size = n
    else:
        lap = sp.kron(one, lap1) + sp.kron(lap1, one)
        size = n * n
    a = sp.identity(size, format="csc") * (1.0 + lam * dt) - 0.5 * dt * lap
    return spla.splu(a.tocsc())


def _march(
    grid: SpaceTimeGrid,
    w0: np.ndarray,
    boundary: np.ndarray,
    coeff_at: Callable[[float], np.ndarray],
    lam: float,
    forcing_at: Optional[Callable[[float], np.ndarray]],
) -> np.ndarray:
    """March d_tau w = 1/2 Lap w + c . grad w - lam w + f from w0.

    ``boundary`` is a full-grid array whose boundary entries hold the
    (time-independent) Dirichlet values; its interior is ignored.
    Returns the trajectory, shape (n_t + 1,) + space_shape + (m,).
    """
    d, dt, dx = grid.d, grid.dt, grid.dx
    m = w0.shape[-1]
    n_int = (grid.n_x - 2) ** d
    lu = _interior_operator(grid, lam)

    template = boundary.copy()
    bc_only = boundary.copy()
    _interior(bc_only, d)[...] = 0.0
    bc_lap = 0.5 * dt * _laplacian_full(bc_only, dx, d).reshape(n_int, m)

    out = np.empty((grid.n_t + 1,) + w0.shape)
    w = template.copy()
    _interior(w, d)[...] = _interior(w0, d)
    out[0] = w
    warned = False
    int_shape = ((grid.n_x - 2),) * d
    for k in range(grid.n_t):
        tau = k * dt
        c = coeff_at(tau).reshape(int_shape + (d,))
        cfl = float(np.max(np.abs(c))) * dt / dx
        if cfl > 1.0 and not warned:
            warnings.warn(
                f"advection CFL {cfl:.3g} > 1 at tau={tau:.4g}; "
                f"suggest dt <= {dx / max(np.max(np.abs(c)), 1e-300):.3g}",
                RuntimeWarning,
            )
            warned = True
        rhs = _interior(w, d).reshape(n_int, m) + dt * _upwind(w, c, dx, d).reshape(n_int, m)
        if forcing_at is not None:
            rhs += dt * forcing_at(tau).reshape(n_int, m)
        rhs += bc_lap
        new_int = lu.solve(rhs)
        w = template.copy()
        _interior(w, d)[...] = new_int.reshape(int_shape + (m,))
        if not np.all(np.isfinite(w)):
            raise EvaluationError(f"scheme produced non-finite values at time level {k + 1}")
        out[k + 1] = w
    return out


def solve_backward_pde(
    b: DriftField,
    phi: DriftField,
    lam: float,
    grid: SpaceTimeGrid,
    *,
    error_estimate: bool = False,
) -> GridField:
    """Solve the backward system with terminal value 0 and Dirichlet box.

    The solution is returned on forward time nodes ``t_k = k dt``; marching
    happens in reverse time, implicit in diffusion and reaction, explicit
    upwind in advection.
    """
    if lam <= 0:
        raise DomainError(f"lam={lam} must be positive")
    if b.d != grid.d or phi.d != grid.d:
        raise ValidationError("field dimension does not match the grid")

    def run(g: SpaceTimeGrid) -> np.ndarray:
        pts = g.interior_points()
        traj = _march(
            g,
            w0=np.zeros(g.space_shape + (g.d,)),
            boundary=np.zeros(g.space_shape + (g.d,)),
            coeff_at=lambda tau: b(g.T - tau, pts),
            lam=lam,
            forcing_at=lambda tau: phi(g.T - tau, pts),
        )
        return traj[::-1].copy()

    values = run(grid)
    est = None
    if error_estimate:
        coarse_grid = _coarsen(grid)
        coarse = run(coarse_grid)
        est = _grid_difference(grid, values, coarse_grid, coarse)
    return GridField(grid=grid, values=values, error_estimate=est)


def _coarsen(grid: SpaceTimeGrid) -> SpaceTimeGrid:
    n_t = max(1, grid.n_t // 2)
    if (grid.n_x - 1) % 4 == 0:
        n_x = (grid.n_x - 1) // 2 + 1
    else:
        n_x = grid.n_x
    return SpaceTimeGrid(T=grid.T, L=grid.L, n_t=n_t, n_x=n_x, d=grid.d)


def _grid_difference(fine_grid, fine, coarse_grid, coarse) -> float:
    """Max interior difference on shared nodes of two solves."""
    st = fine_grid.n_t // coarse_grid.n_t
    sx = (fine_grid.n_x - 1) // (coarse_grid.n_x - 1)
    if fine_grid.d == 1:
        sub = fine[::st, ::sx]
    else:
        sub = fine[::st, ::sx, ::sx]
    diff = np.abs(sub - coarse)
    interior = _interior(np.moveaxis(diff, 0, -1), coarse_grid.d)
    return float(np.max(interior))


# ---------------------------------------------------------------------------
# interpolation on grids


def _space_index(grid: SpaceTimeGrid, pts: np.ndarray, extend: bool):
    """Cell indices, weights and an out-of-box mask for batched points."""
    inside = np.all(np.abs(pts) <= grid.L + 1e-12, axis=-1)
    if not extend and not np.all(inside):
        bad = pts[~inside][0]
        raise ExtrapolationError(f"point {bad} lies outside the box |x| <= {grid.L}")
    u = (pts + grid.L) / grid.dx
    np.clip(u, 0.0, grid.n_x - 1.0, out=u)
    idx = u.astype(np.int64)
    np.minimum(idx, grid.n_x - 2, out=idx)
    frac = u - idx
    return idx, frac, inside


def _interp_level(level: np.ndarray, idx, frac, d: int) -> np.ndarray:
    """Multilinear interpolation of one time level at batched points."""
    tail = level.ndim - d
    expand = (slice(None),) + (None,) * tail

    if d == 1:
        i = idx[:, 0]
        w = frac[:, 0][expand]
        return level[i] * (1.0 - w) + level[i + 1] * w
    i, j = idx[:, 0], idx[:, 1]
    wi = frac[:, 0][expand]
    wj = frac[:, 1][expand]
    v00 = level[i, j]
    v10 = level[i + 1, j]
    v01 = level[i, j + 1]
    v11 = level[i + 1, j + 1]
    return (
        v00 * (1 - wi) * (1 - wj)
        + v10 * wi * (1 - wj)
        + v01 * (1 - wi) * wj
        + v11 * wi * wj
    )


def _interp_spacetime(grid, values, t, pts, extend) -> np.ndarray:
    """Linear-in-time, multilinear-in-space interpolation of node values."""
    if not -1e-12 <= t <= grid.T + 1e-12:
        raise ValidationError(f"t={t} outside [0, {grid.T}]")
    pts = np.asarray(pts, dtype=float)
    squeeze = pts.ndim == 1
    pts2 = pts.reshape(-1, grid.d)
    idx, frac, inside = _space_index(grid, pts2, extend)
    s = min(max(t / grid.dt, 0.0), float(grid.n_t))
    k = min(int(s), grid.n_t - 1)
    wt = s - k
    out = _interp_level(values[k], idx, frac, grid.d) * (1.0 - wt)
    if wt > 0.0:
        out += _interp_level(values[k + 1], idx, frac, grid.d) * wt
    if extend and not np.all(inside):
        out[~inside] = 0.0
    return out[0] if squeeze else out


# ---------------------------------------------------------------------------
# gradient norms


def _operator_norm(mats: np.ndarray) -> np.ndarray:
    """Spectral norm of a (..., d, d) stack for d in {1, 2}."""
    d = mats.shape[-1]
    if d == 1:
        return np.abs(mats[..., 0, 0])
    fro2 = np.sum(mats**2, axis=(-2, -1))
    det = mats[..., 0, 0] * mats[..., 1, 1] - mats[..., 0, 1] * mats[..., 1, 0]
    inner = np.sqrt(np.maximum(fro2**2 - 4.0 * det**2, 0.0))
    return np.sqrt(np.maximum((fro2 + inner) / 2.0, 0.0))


def _node_gradient(grid: SpaceTimeGrid, values: np.ndarray) -> np.ndarray:
    """Central-difference Jacobian at every node, one-sided at edges."""
    comps = [np.gradient(values, grid.dx, axis=1 + a) for a in range(grid.d)]
    return np.stack(comps, axis=-1)  # (..., d_comp, d_axis)


# ---------------------------------------------------------------------------
# calibrated solution


@dataclass(frozen=True)
class ZvonkinSolution:
    """The vector solution u, its grid derivatives, and the accepted rate."""

    grid: SpaceTimeGrid
    u: GridField
    grad_u: np.ndarray  # (n_t+1,) + space + (d, d)
    hess_u: np.ndarray  # (n_t+1,) + space + (d, d, d)
    lam: float
    trace: tuple[tuple[float, float], ...]
    diagnostics: dict

    def __post_init__(self):
        xs = self.grid.x_nodes
        vals = self.u.values
        for a in range(self.grid.d):
            axis = 1 + a
            shape = [1] * vals.ndim
            shape[axis] = self.grid.n_x
            gamma_axis = vals[..., a] + xs.reshape(shape[:-1])
            if not np.all(np.diff(gamma_axis, axis=axis) > 0.0):
                raise ValidationError(
                    "x + u is not strictly increasing along axis "
                    f"{a}: the grid map is not injective"
                )

    def u_at(self, t, pts, extend=False):
        return _interp_spacetime(self.grid, self.u.values, t, pts, extend)

    def grad_u_at(self, t, pts, extend=False):
        return _interp_spacetime(self.grid, self.grad_u, t, pts, extend)

    def hess_u_at(self, t, pts, extend=False):
        return _interp_spacetime(self.grid, self.hess_u, t, pts, extend)

    @property
    def sup_grad_u(self) -> float:
        return self.diagnostics["sup_grad_u"]


def calibrate_lambda(
    b: DriftField,
    grid: SpaceTimeGrid,
    target: float = 0.5,
    *,
    lam0: float = 1.0,
    lam_max: float = float(2**20),
) -> ZvonkinSolution:
    """Double the reaction rate until the solution gradient is small.

    Solves the backward system with forcing Phi = b at lam = lam0, 2 lam0,
    4 lam0, ... and accepts the first rate whose node-wise spectral norm of
    grad u drops to ``target``.  The full (lam, sup norm) trace travels
    with the result.
    """
    if not 0.0 < target < 1.0:
        raise DomainError(f"target={target} must lie in (0, 1)")
    trace: list[tuple[float, float]] = []
    lam = lam0
    while lam <= lam_max:
        u = solve_backward_pde(b, b, lam, grid)
        grad_u = _node_gradient(grid, u.values)
        sup = float(np.max(_operator_norm(grad_u)))
        trace.append((lam, sup))
        if sup <= target:
            hess = np.stack(
                [np.gradient(grad_u, grid.dx, axis=1 + a) for a in range(grid.d)],
                axis=-1,
            )
            eye = np.eye(grid.d)
            inv_jac = np.linalg.inv(eye + grad_u)
            light = _holder_ratios(grid, grad_u, 0.2, 400, seed=11)
            diagnostics = {
                "lambda": lam,
                "sup_grad_u": sup,
                "sup_grad_gamma_inv": float(np.max(_operator_norm(inv_jac))),
                "holder_time_ratio": light[0],
                "holder_space_ratio": light[1],
            }
            return ZvonkinSolution(
                grid=grid,
                u=u,
                grad_u=grad_u,
                hess_u=hess,
                lam=lam,
                trace=tuple(trace),
                diagnostics=diagnostics,
            )
        lam *= 2.0
    raise CalibrationError(
        f"sup ||grad u|| did not reach {target} by lam={lam_max}", trace=trace
    )


# ---------------------------------------------------------------------------
# the coordinate change and its inverse


def gamma_forward(sol: ZvonkinSolution, t: float, x):
    """gamma(t, x) = x + u(t, x), multilinear between nodes."""
    pts = np.asarray(x, dtype=float)
    return pts + sol.u_at(t, pts, extend=False)


def gamma_inverse(
    sol: ZvonkinSolution,
    t: float,
    y,
    *,
    x0=None,
    tol: float = 1e-10,
    max_iter: int = 200,
):
    """Invert gamma(t, .) by damped-free fixed point x <- y - u(t, x).

    The iteration contracts at rate sup ||grad u|| <= 1/2, so about 35
    iterations reach the 1e-10 residual from a cold start; a warm start
    converges much faster.
    """
    pts = np.asarray(y, dtype=float)
    squeeze = pts.ndim == 1
    y2 = pts.reshape(-1, sol.grid.d)
    x = y2.copy() if x0 is None else np.array(x0, dtype=float).reshape(y2.shape).copy()
    for _ in range(max_iter):
        x_new = y2 - sol.u_at(t, x, extend=True)
        step = np.max(np.abs(x_new - x))
        x = x_new
        if step <= 0.5 * tol:
            residual = np.max(np.abs(x + sol.u_at(t, x, extend=True) - y2))
            if residual <= tol:
                return x[0] if squeeze else x
    residual = float(np.max(np.abs(x + sol.u_at(t, x, extend=True) - y2)))
    raise InversionError(
        f"fixed-point inversion stalled after {max_iter} iterations, residual {residual:g}"
    )


# ---------------------------------------------------------------------------
# Hoelder diagnostics of grad u


@dataclass(frozen=True)
class HolderDiagnostics:
    eps: float
    max_time_ratio: float
    max_space_ratio: float
    n_samples: int


def _holder_ratios(grid, grad_u, eps, n_samples, seed):
    rng = np.random.default_rng(seed)
    shape = grad_u.shape
    n_t1 = shape[0]
    flat = grad_u.reshape(n_t1, -1, grid.d, grid.d)
    n_nodes = flat.shape[1]
    # time pairs at a fixed spatial node
    k1 = rng.integers(0, n_t1, n_samples)
    k2 = rng.integers(0, n_t1, n_samples)
    jx = rng.integers(0, n_nodes, n_samples)
    keep = k1 != k2
    dts = np.abs(k1[keep] - k2[keep]) * grid.dt
    dgrad = flat[k1[keep], jx[keep]] - flat[k2[keep], jx[keep]]
    num = np.sqrt(np.sum(dgrad**2, axis=(-2, -1)))
    time_ratio = float(np.max(num / dts ** (eps / 2.0))) if np.any(keep) else 0.0
    # space pairs at a fixed time
    pts = grid.points()
    j1 = rng.integers(0, n_nodes, n_samples)
    j2 = rng.integers(0, n_nodes, n_samples)
    kk = rng.integers(0, n_t1, n_samples)
    keep = j1 != j2
    dxs = np.sqrt(np.sum((pts[j1[keep]] - pts[j2[keep]]) ** 2, axis=-1))
    dgrad = flat[kk[keep], j1[keep]] - flat[kk[keep], j2[keep]]
    num = np.sqrt(np.sum(dgrad**2, axis=(-2, -1)))
    space_ratio = float(np.max(num / dxs**eps)) if np.any(keep) else 0.0
    return time_ratio, space_ratio


def holder_diagnostics(
    sol: ZvonkinSolution,
    eps: float,
    params: Optional[MixedNormParams] = None,
    *,
    n_samples: int = 2000,
    seed: int = 202,
) -> HolderDiagnostics:
    """Empirical Hoelder ratio maxima of grad u over sampled node pairs.

    The time ratio uses exponent eps/2, the space ratio exponent eps; a
    finite maximum under refinement is the testable content.  When mixed
    norm parameters are supplied, ``eps + d/p + 2/q < 1`` is enforced.
    """
    if not 0.0 < eps < 1.0:
        raise DomainError(f"eps={eps} must lie in (0, 1)")
    if params is not None and eps + params.deficiency() >= 1.0:
        raise DomainError(
            f"eps + d/p + 2/q = {eps + params.deficiency():g} violates the bound < 1"
        )
    tr, sr = _holder_ratios(sol.grid, sol.grad_u, eps, n_samples, seed)
    return HolderDiagnostics(
        eps=eps, max_time_ratio=tr, max_space_ratio=sr, n_samples=n_samples
    )


# ---------------------------------------------------------------------------
# serialisation


def save_gridfield_csv(gf: GridField, path) -> None:
    """Write node values as CSV columns t,x1..xd,U1..Ud (17 digits)."""
    grid = gf.grid
    pts = grid.points()
    m = gf.n_comp
    header = (
        ["t"]
        + [f"x{j + 1}" for j in range(grid.d)]
        + [f"U{j + 1}" for j in range(m)]
    )
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for k, t in enumerate(grid.t_nodes):
            level = gf.values[k].reshape(-1, m)
            for row_pt, row_val in zip(pts, level):
                cells = [f"{t:.17g}"]
                cells += [f"{v:.17g}" for v in row_pt]
                cells += [f"{v:.17g}" for v in row_val]
                fh.write(",".join(cells) + "\n")


def load_gridfield_csv(path) -> GridField:
    """Reload a grid field written by :func:`save_gridfield_csv`."""
    with open(path, newline="") as fh:
        header = fh.readline().strip().split(",")
        data = np.array(
            [[float(v) for v in line.split(",")] for line in fh if line.strip()]
        )
    d = sum(1 for h in header if h.startswith("x"))
    m = sum(1 for h in header if h.startswith("U"))
    t_nodes = np.unique(data[:, 0])
    x_nodes = np.unique(data[:, 1])
    n_t = t_nodes.size - 1
    n_x = x_nodes.size
    grid = SpaceTimeGrid(
        T=float(t_nodes[-1]), L=float(abs(x_nodes).max()), n_t=n_t, n_x=n_x, d=d
    )
    values = data[:, 1 + d:].reshape((n_t + 1,) + grid.space_shape + (m,))
    return GridField(grid=grid, values=values)


def diagnostics_report(sol: ZvonkinSolution) -> str:
    """Flat key=value report of the calibration diagnostics."""
    lines = [f"lambda={sol.lam:.17g}"]
    for key in sorted(sol.diagnostics):
        if key == "lambda":
            continue
        lines.append(f"{key}={sol.diagnostics[key]:.17g}")
    for i, (lam, sup) in enumerate(sol.trace):
        lines.append(f"trace_{i}_lambda={lam:.17g}")
        lines.append(f"trace_{i}_sup_grad_u={sup:.17g}")
    return "\n".join(lines)
