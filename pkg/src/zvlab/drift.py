"""Drift coefficients, mixed space-time norms, and mollification.

The drift class of interest is the space of vector fields with finite
mixed norm ``( int_0^T ( int |f(t,x)|^p dx )^{q/p} dt )^{1/q}`` under the
admissibility condition ``d/p + 2/q < 1`` with ``p, q > 2``.  Singular
members of the class enter the rest of the library only through smooth,
compactly supported mollifications built here.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import brownian
from .errors import DomainError, EvaluationError, ValidationError

__all__ = [
    "MixedNormParams",
    "DriftField",
    "MollifiedFamily",
    "ConvergenceGap",
    "QuadratureSpec",
    "NormEstimate",
    "RunningCost",
    "check_admissible",
    "mixed_norm",
    "mollify",
    "mollified_family",
    "convergence_gap",
    "gaussian_running_cost",
    "make_drift",
    "load_drift_csv",
    "DRIFT_PRESETS",
]


# ---------------------------------------------------------------------------
# parameters and admissibility


@dataclass(frozen=True)
class MixedNormParams:
    """Exponents (p, q), dimension d and horizon T of the drift class."""

    p: float
    q: float
    d: int = 1
    T: float = 1.0

    def __post_init__(self):
        if self.p <= 2.0:
            raise DomainError(f"spatial exponent p={self.p} violates p > 2")
        if self.q <= 2.0:
            raise DomainError(f"temporal exponent q={self.q} violates q > 2")
        if self.d < 1 or int(self.d) != self.d:
            raise DomainError(f"dimension d={self.d} must be a positive integer")
        if self.T <= 0.0:
            raise DomainError(f"horizon T={self.T} must be positive")

    def deficiency(self) -> float:
        return self.d / self.p + 2.0 / self.q

    def admissible(self) -> bool:
        return self.deficiency() < 1.0


def check_admissible(params: MixedNormParams) -> bool:
    """True iff d/p + 2/q < 1 (exact arithmetic on the given reals)."""
    return params.admissible()


# ---------------------------------------------------------------------------
# drift fields


def _as_points(x, d: int) -> np.ndarray:
    pts = np.asarray(x, dtype=float)
    if pts.ndim == 0:
        if d != 1:
            raise ValidationError("scalar point given for a multi-dimensional field")
        pts = pts.reshape(1)
    if pts.shape[-1] != d:
        raise ValidationError(f"points have last axis {pts.shape[-1]}, expected {d}")
    return pts


@dataclass(frozen=True)
class DriftField:
    """A time-space vector field with optional spatial gradient.

    ``fn(t, x)`` maps a scalar time and points of shape (..., d) to values
    of shape (..., d); ``grad(t, x)`` returns (..., d, d) Jacobians.  The
    ``time_varying`` flag is metadata used to enable cached evaluation of
    mollifications; ``support_radius`` asserts that the field vanishes
    outside the centred ball of that radius.
    """

    fn: Callable[[float, np.ndarray], np.ndarray]
    d: int = 1
    grad: Optional[Callable[[float, np.ndarray], np.ndarray]] = None
    smooth: bool = False
    support_radius: Optional[float] = None
    time_varying: bool = True
    label: str = "custom"

    def __post_init__(self):
        if self.smooth and self.grad is None:
            raise ValidationError("a smooth drift must carry its gradient")
        if self.support_radius is not None and self.support_radius < 0:
            raise ValidationError("support_radius must be nonnegative")

    def __call__(self, t: float, x) -> np.ndarray:
        return self.fn(t, _as_points(x, self.d))

    def grad_at(self, t: float, x) -> np.ndarray:
        if self.grad is None:
            raise ValidationError(f"drift '{self.label}' has no gradient")
        return self.grad(t, _as_points(x, self.d))


def zero_drift(d: int = 1) -> DriftField:
    return DriftField(
        fn=lambda t, x: np.zeros_like(x),
        d=d,
        grad=lambda t, x: np.zeros(x.shape + (d,)),
        smooth=True,
        support_radius=0.0,
        time_varying=False,
        label="zero",
    )


def constant_drift(mu, d: int = 1) -> DriftField:
    mu_vec = np.broadcast_to(np.asarray(mu, dtype=float), (d,)).copy()

    def fn(t, x):
        return np.broadcast_to(mu_vec, x.shape).copy()

    return DriftField(
        fn=fn,
        d=d,
        grad=lambda t, x: np.zeros(x.shape + (d,)),
        smooth=True,
        time_varying=False,
        label=f"constant(mu={mu})",
    )


def ou_drift(rate: float = 1.0, d: int = 1) -> DriftField:
    """Linear mean-reverting drift b(t, x) = -rate * x."""
    eye = np.eye(d)

    def grad(t, x):
        return np.broadcast_to(-rate * eye, x.shape + (d,)).copy()

    return DriftField(
        fn=lambda t, x: -rate * x,
        d=d,
        grad=grad,
        smooth=True,
        time_varying=False,
        label=f"ou(rate={rate})",
    )


def sign_drift(d: int = 1) -> DriftField:
    """Discontinuous componentwise sign drift."""
    return DriftField(
        fn=lambda t, x: np.sign(x),
        d=d,
        smooth=False,
        time_varying=False,
        label="sign",
    )


DRIFT_PRESETS = {
    "zero": zero_drift,
    "constant": constant_drift,
    "ou": ou_drift,
    "sign": sign_drift,
}


def make_drift(name: str, d: int = 1, **params) -> DriftField:
    """Construct a preset drift by name."""
    if name == "custom-grid":
        return load_drift_csv(params["path"])
    if name not in DRIFT_PRESETS:
        raise ValidationError(
            f"unknown drift preset '{name}'; known: {sorted(DRIFT_PRESETS) + ['custom-grid']}"
        )
    return DRIFT_PRESETS[name](d=d, **params)


def load_drift_csv(path) -> DriftField:
    """Load a grid-backed drift from CSV columns t,x1..xd,b1..bd.

    Rows are expected in row-major time-then-space order on a regular
    grid.  Evaluation interpolates multilinearly and returns zero outside
    the tabulated box.
    """
    from scipy.interpolate import RegularGridInterpolator

    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = np.array([[float(v) for v in row] for row in reader])
    n_x_cols = sum(1 for h in header if h.startswith("x"))
    n_b_cols = sum(1 for h in header if h.startswith("b"))
    if header[0] != "t" or n_x_cols != n_b_cols or n_x_cols < 1:
        raise ValidationError(f"bad drift CSV header {header}")
    d = n_x_cols
    if d > 2:
        raise ValidationError("grid drifts support d <= 2")
    t_nodes = np.unique(rows[:, 0])
    axes = [np.unique(rows[:, 1 + j]) for j in range(d)]
    shape = (t_nodes.size,) + tuple(ax.size for ax in axes)
    if int(np.prod(shape)) != rows.shape[0]:
        raise ValidationError("drift CSV rows do not fill a regular grid")
    values = rows[:, 1 + d:].reshape(shape + (d,))
    interps = [
        RegularGridInterpolator(
            (t_nodes, *axes), values[..., j], bounds_error=False, fill_value=0.0
        )
        for j in range(d)
    ]
    t_lo, t_hi = float(t_nodes[0]), float(t_nodes[-1])
    radius = float(max(abs(ax[0]) for ax in axes) if axes else 0.0)
    radius = max(radius, float(max(abs(ax[-1]) for ax in axes)))

    def fn(t, x):
        tc = min(max(float(t), t_lo), t_hi)
        flat = x.reshape(-1, d)
        pts = np.concatenate([np.full((flat.shape[0], 1), tc), flat], axis=1)
        out = np.stack([ip(pts) for ip in interps], axis=-1)
        return out.reshape(x.shape)

    return DriftField(
        fn=fn,
        d=d,
        smooth=False,
        support_radius=radius * math.sqrt(d),
        time_varying=t_nodes.size > 1,
        label=f"grid[{path}]",
    )


# ---------------------------------------------------------------------------
# mixed norms


@dataclass(frozen=True)
class QuadratureSpec:
    """Tensor-product midpoint quadrature on [0,T] x [-L, L]^d."""

    half_width: float
    n_space: int = 128
    n_time: int = 64

    def __post_init__(self):
        if self.half_width <= 0 or self.n_space < 2 or self.n_time < 1:
            raise ValidationError("quadrature spec must be positive")


@dataclass(frozen=True)
class NormEstimate:
    """A quadrature value with a refinement-based error estimate."""

    value: float
    error: float


def _midpoints(lo: float, hi: float, n: int) -> tuple[np.ndarray, float]:
    h = (hi - lo) / n
    return lo + (np.arange(n) + 0.5) * h, h


def _mixed_norm_raw(f: DriftField, params: MixedNormParams, L, n_space, n_time) -> float:
    d = params.d
    t_nodes, dt = _midpoints(0.0, params.T, n_time)
    x1, dx = _midpoints(-L, L, n_space)
    if d == 1:
        pts = x1[:, None]
        cell = dx
    elif d == 2:
        g0, g1 = np.meshgrid(x1, x1, indexing="ij")
        pts = np.stack([g0.ravel(), g1.ravel()], axis=-1)
        cell = dx * dx
    else:
        raise ValidationError("mixed_norm quadrature supports d <= 2")
    inner = np.empty(n_time)
    for i, t in enumerate(t_nodes):
        vals = f(t, pts)
        if not np.all(np.isfinite(vals)):
            bad = np.argwhere(~np.isfinite(vals))[0]
            raise EvaluationError(
                f"drift '{f.label}' is not finite at t={t}, x={pts[bad[0]]}"
            )
        mag = np.sqrt(np.sum(vals * vals, axis=-1))
        inner[i] = np.sum(mag**params.p) * cell
    time_integral = np.sum(inner ** (params.q / params.p)) * dt
    return float(time_integral ** (1.0 / params.q))


def mixed_norm(f: DriftField, params: MixedNormParams, quad: QuadratureSpec) -> NormEstimate:
    """Mixed space-time norm by midpoint quadrature.

    Returns the value on the refined (2x) grid together with the
    difference against the coarse grid as the error estimate; refining by
    another factor of two moves the value by less than that estimate on
    fields with convergent quadrature.
    """
    if f.support_radius is not None and quad.half_width < f.support_radius:
        raise ValidationError(
            f"quadrature box {quad.half_width} does not cover support radius "
            f"{f.support_radius}"
        )
    coarse = _mixed_norm_raw(f, params, quad.half_width, quad.n_space, quad.n_time)
    fine = _mixed_norm_raw(f, params, quad.half_width, 2 * quad.n_space, 2 * quad.n_time)
    return NormEstimate(value=fine, error=abs(fine - coarse))


# ---------------------------------------------------------------------------
# mollification

# Polynomial bump (1 - |u|^2)^4 on |u| <= 1: cheap, three continuous
# derivatives at the support boundary, exact unit mass after discrete
# normalisation of the quadrature weights.


def _bump(u2: np.ndarray) -> np.ndarray:
    w = np.clip(1.0 - u2, 0.0, None)
    return w**4


def _bump_grad_factor(u2: np.ndarray) -> np.ndarray:
    # d/du of (1-u^2)^4 = -8 u (1-u^2)^3; returned without the u factor.
    w = np.clip(1.0 - u2, 0.0, None)
    return -8.0 * w**3


def _cutoff(r: np.ndarray, eps: float) -> np.ndarray:
    """Septic smoothstep, 1 for |x| <= 1/(2 eps), 0 for |x| >= 1/eps."""
    s = np.clip(2.0 * (eps * r - 0.5), 0.0, 1.0)
    return 1.0 - s**4 * (35.0 - 84.0 * s + 70.0 * s**2 - 20.0 * s**3)


def _cutoff_deriv(r: np.ndarray, eps: float) -> np.ndarray:
    """Derivative of the cutoff with respect to r = |x|."""
    s = np.clip(2.0 * (eps * r - 0.5), 0.0, 1.0)
    return -140.0 * s**3 * (1.0 - s) ** 3 * 2.0 * eps


def _kernel_nodes(eps: float, d: int, cells: int):
    """Midpoint nodes, normalised mass weights and gradient weights."""
    u1, h = _midpoints(-eps, eps, cells)
    if d == 1:
        nodes = u1[:, None]
        measure = h
    else:
        g0, g1 = np.meshgrid(u1, u1, indexing="ij")
        nodes = np.stack([g0.ravel(), g1.ravel()], axis=-1)
        measure = h * h
    u2 = np.sum((nodes / eps) ** 2, axis=-1)
    keep = u2 < 1.0
    nodes = nodes[keep]
    u2 = u2[keep]
    raw = _bump(u2)
    scale = 1.0 / np.sum(raw)  # discrete unit mass
    w = raw * scale
    # gradient of the kernel at the nodes, with the same normalisation
    gw = _bump_grad_factor(u2)[:, None] * (nodes / eps**2) * scale
    return nodes, w, gw, measure


class _UniformTable:
    """Piecewise-linear lookup on a uniform 1-D grid with clamped ends."""

    __slots__ = ("lo", "inv_h", "n", "values")

    def __init__(self, lo: float, hi: float, values: np.ndarray):
        self.lo = float(lo)
        self.n = values.shape[0]
        self.inv_h = (self.n - 1) / (hi - lo)
        self.values = values

    def __call__(self, x: np.ndarray) -> np.ndarray:
        u = (x - self.lo) * self.inv_h
        np.clip(u, 0.0, self.n - 1.0, out=u)
        idx = u.astype(np.int64)
        np.minimum(idx, self.n - 2, out=idx)
        frac = u - idx
        base = self.values[idx]
        return base + (self.values[idx + 1] - base) * frac


def _validate_bandwidths(bandwidths: Sequence[float]) -> tuple[float, ...]:
    bw = tuple(float(e) for e in bandwidths)
    if not bw or any(e <= 0 for e in bw):
        raise ValidationError("bandwidths must be positive")
    if any(b <= a for a, b in zip(bw, bw[1:])):
        raise ValidationError("bandwidths must decrease strictly")
    return bw


def mollify(
    b: DriftField,
    n: int,
    bandwidths: Sequence[float],
    *,
    kernel_cells: int = 32,
    table_per_eps: int = 64,
    tabulate: bool = True,
) -> DriftField:
    """Smooth, compactly supported approximation of ``b`` at bandwidth n.

    Convolves spatially with the polynomial bump of width ``eps_n`` and
    multiplies by a smooth cutoff at radius ``1/eps_n``.  The gradient is
    assembled from the analytic kernel derivative, never from finite
    differences of the smoothed field.

    Time-invariant one-dimensional bases are tabulated once on a fine
    grid so that evaluation along large path ensembles stays cheap; the
    generic path evaluates the kernel quadrature directly.
    """
    bw = _validate_bandwidths(bandwidths)
    if not 0 <= n < len(bw):
        raise ValidationError(f"bandwidth index {n} out of range")
    eps = bw[n]
    d = b.d
    cut_radius = 1.0 / eps
    nodes, w, gw, _ = _kernel_nodes(eps, d, kernel_cells)
    label = f"mollified[{b.label}, eps={eps:g}]"

    if tabulate and not b.time_varying and d == 1:
        r_tab = cut_radius + 2.0 * eps
        n_tab = int(min(max(2 * r_tab * table_per_eps / eps, 4096), 1_000_000))
        n_tab += 1 - n_tab % 2  # odd, so x = 0 is a node
        xs = np.linspace(-r_tab, r_tab, n_tab)
        m_tab = np.zeros(n_tab)
        g_tab = np.zeros(n_tab)
        pts = xs[:, None]
        for j in range(nodes.shape[0]):
            vals = b.fn(0.0, pts - nodes[j])[:, 0]
            m_tab += w[j] * vals
            g_tab += gw[j, 0] * vals
        smooth_tab = _UniformTable(-r_tab, r_tab, m_tab)
        grad_tab = _UniformTable(-r_tab, r_tab, g_tab)

        def fn(t, x):
            xx = x[..., 0]
            return (_cutoff(np.abs(xx), eps) * smooth_tab(xx))[..., None]

        def grad(t, x):
            xx = x[..., 0]
            r = np.abs(xx)
            chi = _cutoff(r, eps)
            dchi = _cutoff_deriv(r, eps) * np.sign(xx)
            out = dchi * smooth_tab(xx) + chi * grad_tab(xx)
            return out[..., None, None]

    else:

        def fn(t, x):
            acc = np.zeros_like(x)
            for j in range(nodes.shape[0]):
                acc += w[j] * b.fn(t, x - nodes[j])
            r = np.sqrt(np.sum(x * x, axis=-1))
            return _cutoff(r, eps)[..., None] * acc

        def grad(t, x):
            acc = np.zeros_like(x)
            jac = np.zeros(x.shape + (d,))
            for j in range(nodes.shape[0]):
                vals = b.fn(t, x - nodes[j])
                acc += w[j] * vals
                jac += vals[..., :, None] * gw[j][None, :]
            r = np.sqrt(np.sum(x * x, axis=-1))
            chi = _cutoff(r, eps)
            safe_r = np.where(r > 0, r, 1.0)
            dchi = (_cutoff_deriv(r, eps) / safe_r)[..., None] * x
            return chi[..., None, None] * jac + acc[..., :, None] * dchi[..., None, :]

    return DriftField(
        fn=fn,
        d=d,
        grad=grad,
        smooth=True,
        support_radius=cut_radius,
        time_varying=b.time_varying,
        label=label,
    )


@dataclass(frozen=True)
class MollifiedFamily:
    """A base drift together with its mollifications at decreasing widths."""

    base: DriftField
    bandwidths: tuple[float, ...]
    members: tuple[DriftField, ...]

    def __post_init__(self):
        _validate_bandwidths(self.bandwidths)
        if len(self.members) != len(self.bandwidths):
            raise ValidationError("one member per bandwidth required")
        for m in self.members:
            if not m.smooth or m.support_radius is None:
                raise ValidationError("family members must be smooth with compact support")

    def __len__(self) -> int:
        return len(self.members)


def mollified_family(base: DriftField, bandwidths: Sequence[float], **kw) -> MollifiedFamily:
    bw = _validate_bandwidths(bandwidths)
    members = tuple(mollify(base, i, bw, **kw) for i in range(len(bw)))
    return MollifiedFamily(base=base, bandwidths=bw, members=members)


# ---------------------------------------------------------------------------
# approximation gap along Brownian paths


@dataclass(frozen=True)
class ConvergenceGap:
    """Monte Carlo estimate of the path gap functional for one member."""

    n: int
    j_n: float
    stderr: float

    def __post_init__(self):
        if self.j_n < 0 or self.stderr < 0:
            raise ValidationError("gap estimates are nonnegative")


def convergence_gap(
    b: DriftField,
    b_n: DriftField,
    eps: float,
    ens: brownian.BrownianEnsemble,
    *,
    index: int = 0,
    x0=0.0,
) -> ConvergenceGap:
    """Path-gap functional between a drift and one approximant.

    Along Brownian paths, accumulates per coordinate j the integrals
    ``int_0^T (b_n - b)_j^2 ds`` and ``int_0^T (b_j^2 - (b_n)_j^2) ds`` by
    left-point quadrature and averages
    ``sum_j 2 |I1_j|^{p_eps/2} + |I2_j|^{p_eps}`` with ``p_eps = 1 + eps``.
    """
    if not 0.0 < eps < 1.0:
        raise ValidationError(f"eps={eps} must lie in (0, 1)")
    p_eps = 1.0 + eps
    d = b.d
    start = np.broadcast_to(np.asarray(x0, dtype=float), (d,))
    dt = ens.dt

    def block(blk, i0, i1, dB):
        nb = i1 - i0
        x = np.tile(start, (nb, 1))
        i_sq = np.zeros((nb, d))
        i_diff = np.zeros((nb, d))
        for k in range(ens.n_t):
            t = k * dt
            vb = b(t, x)
            vn = b_n(t, x)
            if not (np.all(np.isfinite(vb)) and np.all(np.isfinite(vn))):
                bad = np.argwhere(~np.isfinite(vb + vn))[0][0]
                raise EvaluationError(
                    f"non-finite gap integrand on path {i0 + bad} at step {k}"
                )
            i_sq += (vn - vb) ** 2 * dt
            i_diff += (vb**2 - vn**2) * dt
            x += dB[:, k, :]
        j_vals = np.sum(
            2.0 * np.abs(i_sq) ** (p_eps / 2.0) + np.abs(i_diff) ** p_eps, axis=1
        )
        return j_vals.sum(), (j_vals**2).sum(), nb

    partials = brownian.map_blocks(ens, block)
    res = brownian.reduce_moments(
        partials,
        brownian.fingerprint(op="convergence_gap", eps=eps, seed=ens.seed, M=ens.M),
        ens.seed,
    )
    return ConvergenceGap(n=index, j_n=res.scalar, stderr=res.scalar_stderr)


# ---------------------------------------------------------------------------
# Gaussian running cost


@dataclass(frozen=True)
class RunningCost:
    """Quadrature value of a running cost along the Gaussian marginal."""

    value: float
    small_time_bound: float
    error: float


def gaussian_running_cost(
    f: DriftField,
    delta: float,
    params: MixedNormParams,
    *,
    n_time: int = 256,
    n_hermite: int = 64,
    s_floor: float = 1e-3,
) -> RunningCost:
    """Expected running cost ``E[int_0^T |f(s, B_s)|^{2(1+delta)} ds]``.

    Integrates the Gaussian-marginal identity with Gauss-Hermite nodes in
    space and composite midpoint in time over ``[s_floor, T]``.  The
    ``[0, s_floor]`` slice is closed with the integrand value at the floor
    and, separately, bounded by ``s_floor * sup |f|^{2(1+delta)}`` over a
    sample box (reported, not added).
    """
    if delta < 0:
        raise DomainError(f"delta={delta} must be nonnegative")
    if (1.0 + delta) * params.deficiency() >= 2.0:
        raise DomainError(
            "derived exponents violate d/p' + 2/q' < 2: "
            f"(1+delta)*(d/p + 2/q) = {(1 + delta) * params.deficiency():g} >= 2"
        )
    power = 2.0 * (1.0 + delta)
    d = params.d
    nodes, weights = np.polynomial.hermite_e.hermegauss(n_hermite)
    if d == 1:
        z = nodes[:, None]
        wz = weights / math.sqrt(2.0 * math.pi)
    elif d == 2:
        g0, g1 = np.meshgrid(nodes, nodes, indexing="ij")
        z = np.stack([g0.ravel(), g1.ravel()], axis=-1)
        wz = np.outer(weights, weights).ravel() / (2.0 * math.pi)
    else:
        raise ValidationError("gaussian_running_cost supports d <= 2")

    def integrand(s: float) -> float:
        pts = math.sqrt(s) * z
        vals = f(s, pts)
        if not np.all(np.isfinite(vals)):
            bad = np.argwhere(~np.isfinite(vals))[0]
            raise EvaluationError(f"non-finite field at s={s}, x={pts[bad[0]]}")
        mag = np.sqrt(np.sum(vals * vals, axis=-1))
        return float(np.sum(wz * mag**power))

    def total(nt: int) -> float:
        s_nodes, ds = _midpoints(s_floor, params.T, nt)
        bulk = sum(integrand(s) for s in s_nodes) * ds
        return bulk + s_floor * integrand(s_floor)

    fine = total(n_time)
    coarse = total(max(1, n_time // 2))

    # crude sup bound for the omitted initial slice
    span = 6.0 * math.sqrt(max(s_floor, 1e-12))
    probe_x, _ = _midpoints(-span, span, 65)
    if d == 1:
        probe_pts = probe_x[:, None]
    else:
        g0, g1 = np.meshgrid(probe_x, probe_x, indexing="ij")
        probe_pts = np.stack([g0.ravel(), g1.ravel()], axis=-1)
    sup = 0.0
    for s in (0.0, s_floor / 2.0, s_floor):
        vals = f(s, probe_pts)
        mag = np.sqrt(np.sum(vals * vals, axis=-1))
        sup = max(sup, float(np.max(mag**power)))
    return RunningCost(value=fine, small_time_bound=s_floor * sup, error=abs(fine - coarse))
