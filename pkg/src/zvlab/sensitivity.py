"""Variation processes, noise derivatives, and gradient estimators.

With unit noise the first-variation process solves the linear matrix ODE
``dZ = grad b(t, X_t) Z dt, Z_0 = I`` along each path, and the noise
derivative at time r is the flow quotient ``D_r X_t = Z_t Z_r^{-1}`` for
``t >= r`` (zero before r, by adaptedness).  The derivative-free gradient
representation contracts a payoff at time t against the Ito sum
``sum_k a(t_k) Z_k^T dB_k`` for any averaging function with integral one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import brownian
from .brownian import BrownianEnsemble, EstimatorResult, fingerprint, node_index
from .drift import DriftField
from .errors import ValidationError
from .pde import ZvonkinSolution
from .sde import PathEnsemble, _start

__all__ = [
    "Payoff",
    "WeightFunction",
    "VariationEnsemble",
    "HolderScan",
    "FdGradient",
    "make_payoff",
    "make_weight",
    "first_variation",
    "malliavin_derivative",
    "holder_scan",
    "v_exponential_moment",
    "bel_gradient",
    "bel_gradient_multi",
    "fd_gradient_oracle",
    "pathwise_gradient",
]


# ---------------------------------------------------------------------------
# payoffs and averaging weights


@dataclass(frozen=True)
class Payoff:
    """Scalar payoff with an optional gradient."""

    fn: Callable[[np.ndarray], np.ndarray]  # (..., d) -> (...)
    grad: Optional[Callable[[np.ndarray], np.ndarray]] = None  # (..., d) -> (..., d)
    bounded: bool = False
    label: str = "payoff"


def make_payoff(name: str, d: int = 1, **params) -> Payoff:
    """Preset payoffs: first-coordinate, squared radius, tanh, constant."""
    if name == "x":
        return Payoff(
            fn=lambda x: x[..., 0],
            grad=lambda x: np.concatenate(
                [np.ones_like(x[..., :1]), np.zeros_like(x[..., 1:])], axis=-1
            ),
            bounded=False,
            label="x",
        )
    if name == "square":
        return Payoff(
            fn=lambda x: np.sum(x * x, axis=-1),
            grad=lambda x: 2.0 * x,
            bounded=False,
            label="square",
        )
    if name == "tanh":
        def grad(x):
            g = np.zeros_like(x)
            g[..., 0] = 1.0 - np.tanh(x[..., 0]) ** 2
            return g

        return Payoff(
            fn=lambda x: np.tanh(x[..., 0]), grad=grad, bounded=True, label="tanh"
        )
    if name == "const":
        c = float(params.get("c", 1.0))
        return Payoff(
            fn=lambda x: np.full(x.shape[:-1], c),
            grad=lambda x: np.zeros_like(x),
            bounded=True,
            label=f"const({c:g})",
        )
    raise ValidationError(f"unknown payoff preset '{name}'")


@dataclass(frozen=True)
class WeightFunction:
    """Averaging function on [0, t] with unit integral."""

    fn: Callable[[np.ndarray], np.ndarray]
    t: float
    label: str

    def __post_init__(self):
        if self.t <= 0:
            raise ValidationError("weight horizon must be positive")
        s, h = np.linspace(0.0, self.t, 2001, retstep=True)
        vals = np.asarray(self.fn(s), dtype=float)
        total = float(np.trapezoid(vals, dx=h))
        if abs(total - 1.0) > 1e-8:
            raise ValidationError(
                f"weight '{self.label}' integrates to {total:.12g}, expected 1"
            )


def make_weight(name: str, t: float) -> WeightFunction:
    """Presets: constant 1/t, front-loaded 2(t-s)/t^2, back-loaded 2s/t^2."""
    if name == "constant":
        return WeightFunction(fn=lambda s: np.full_like(np.asarray(s, float), 1.0 / t), t=t, label="constant")
    if name == "front":
        return WeightFunction(fn=lambda s: 2.0 * (t - np.asarray(s, float)) / t**2, t=t, label="front")
    if name == "back":
        return WeightFunction(fn=lambda s: 2.0 * np.asarray(s, float) / t**2, t=t, label="back")
    raise ValidationError(f"unknown weight preset '{name}'")


# ---------------------------------------------------------------------------
# first variation and noise derivatives (materialised, moderate scale)


@dataclass(frozen=True)
class VariationEnsemble:
    """Flow-derivative matrices per (path, node), started at r_start."""

    Z: np.ndarray  # (M, n_t + 1, d, d)
    times: np.ndarray
    r_start: float
    base: PathEnsemble

    def __post_init__(self):
        if not np.all(np.isfinite(self.Z)):
            raise ValidationError("variation matrices contain non-finite entries")
        k0 = node_index(self.r_start, float(self.times[1] - self.times[0]), self.times.size - 1)
        eye = np.eye(self.Z.shape[-1])
        if not np.allclose(self.Z[:, k0], eye):
            raise ValidationError("variation is not the identity at its start node")


def first_variation(b: DriftField, paths: PathEnsemble) -> VariationEnsemble:
    """Euler integration of dZ = grad b(t, X_t) Z dt along stored paths."""
    if not b.smooth:
        raise ValidationError("first variation needs a smooth drift with a gradient")
    M, n_nodes, d = paths.states.shape
    dt = float(paths.times[1] - paths.times[0])
    Z = np.empty((M, n_nodes, d, d))
    Z[:, 0] = np.eye(d)
    cur = Z[:, 0].copy()
    for k in range(n_nodes - 1):
        G = b.grad_at(k * dt, paths.states[:, k, :])
        cur = cur + dt * np.einsum("pij,pjk->pik", G, cur)
        Z[:, k + 1] = cur
    return VariationEnsemble(Z=Z, times=paths.times, r_start=0.0, base=paths)


def malliavin_derivative(var: VariationEnsemble, r: float) -> VariationEnsemble:
    """Noise derivative D_r X_t = Z_t Z_r^{-1} for t >= r, zero before.

    Requires the flow matrices at node r to be well conditioned.
    """
    if var.r_start != 0.0:
        raise ValidationError("flow quotients need a variation started at r = 0")
    dt = float(var.times[1] - var.times[0])
    k_r = node_index(r, dt, var.times.size - 1)
    Zr = var.Z[:, k_r]
    cond = float(np.max(np.linalg.cond(Zr)))
    if not np.isfinite(cond) or cond > 1e12:
        raise ValidationError(
            f"flow matrix at r={r:g} is numerically singular (condition {cond:.3g})"
        )
    inv = np.linalg.inv(Zr)
    D = np.zeros_like(var.Z)
    D[:, k_r:] = np.einsum("pnij,pjk->pnik", var.Z[:, k_r:], inv)
    return VariationEnsemble(Z=D, times=var.times, r_start=r, base=var.base)


# ---------------------------------------------------------------------------
# streaming scans


@dataclass(frozen=True)
class HolderScan:
    """Mean-square differences of noise derivatives over a grid of r's."""

    r_grid: np.ndarray
    pair_lags: np.ndarray
    pair_msd: np.ndarray
    lag_values: np.ndarray
    lag_means: np.ndarray
    delta_hat: float
    r2: float
    second_moments: np.ndarray  # E ||D_r X_t||_F^2 per r
    degenerate: bool
    M: int
    seed: int

    @property
    def sup_second_moment(self) -> float:
        return float(np.max(self.second_moments))


def holder_scan(
    b_n: DriftField,
    t: float,
    r_grid: Sequence[float],
    ens: BrownianEnsemble,
    *,
    x0=0.5,
) -> HolderScan:
    """Monte Carlo regularity scan of r -> D_r X_t for a smooth drift.

    Streams paths, snapshotting the flow at the r nodes and at t, forms
    ``E || D_{r'} X_t - D_r X_t ||_F^2`` on all grid pairs, averages pairs
    with a common lag, and fits the log-log slope.  Also reports the
    second moments ``E || D_r X_t ||_F^2`` whose maximum over r is the
    uniform-boundedness proxy.
    """
    if not b_n.smooth:
        raise ValidationError("regularity scan needs a smooth drift")
    d = b_n.d
    dt = ens.dt
    k_t = node_index(t, dt, ens.n_t)
    r_nodes = [node_index(r, dt, ens.n_t) for r in r_grid]
    if any(k >= k_t for k in r_nodes) or len(r_nodes) < 2:
        raise ValidationError("r grid must lie strictly below t and have >= 2 nodes")
    start = _start(x0, d)
    n_r = len(r_nodes)
    pairs = [(i, j) for i in range(n_r) for j in range(i + 1, n_r)]
    lookup = {k: j for j, k in enumerate(sorted(set(r_nodes)))}

    def block(blk, i0, i1, dB):
        nb = i1 - i0
        x = np.tile(start, (nb, 1))
        Z = np.tile(np.eye(d), (nb, 1, 1))
        snaps = np.empty((nb, len(lookup), d, d))
        for k in range(k_t):
            if k in lookup:
                snaps[:, lookup[k]] = Z
            G = b_n.grad_at(k * dt, x)
            Z = Z + dt * np.einsum("pij,pjk->pik", G, Z)
            x = x + b_n(k * dt, x) * dt + dB[:, k, :]
        # flow quotients D_r X_t = Z_t Z_r^{-1}
        D = np.empty((nb, n_r, d, d))
        for jr, kr in enumerate(r_nodes):
            inv = np.linalg.inv(snaps[:, lookup[kr]])
            D[:, jr] = np.einsum("pij,pjk->pik", Z, inv)
        msd_sums = np.array(
            [np.sum((D[:, i] - D[:, j]) ** 2) for i, j in pairs]
        )
        m2_sums = np.array([np.sum(D[:, j] ** 2) for j in range(n_r)])
        return msd_sums, m2_sums, nb

    partials = brownian.map_blocks(ens, block)
    count = sum(p[2] for p in partials)
    pair_msd = np.sum([p[0] for p in partials], axis=0) / count
    second = np.sum([p[1] for p in partials], axis=0) / count
    pair_lags = np.array([(r_nodes[j] - r_nodes[i]) * dt for i, j in pairs])

    degenerate = bool(np.max(pair_msd) < 1e-280)
    if degenerate:
        lag_values = np.unique(pair_lags)
        return HolderScan(
            r_grid=np.asarray(r_grid, float),
            pair_lags=pair_lags,
            pair_msd=pair_msd,
            lag_values=lag_values,
            lag_means=np.zeros_like(lag_values),
            delta_hat=float("nan"),
            r2=float("nan"),
            second_moments=second,
            degenerate=True,
            M=count,
            seed=ens.seed,
        )
    lag_values = np.unique(np.round(pair_lags / dt).astype(int)) * dt
    lag_means = np.array(
        [
            pair_msd[np.isclose(pair_lags, lv)].mean()
            for lv in lag_values
        ]
    )
    from .sde import log_log_fit

    slope, r2 = log_log_fit(lag_values, lag_means)
    return HolderScan(
        r_grid=np.asarray(r_grid, float),
        pair_lags=pair_lags,
        pair_msd=pair_msd,
        lag_values=lag_values,
        lag_means=lag_means,
        delta_hat=slope,
        r2=r2,
        second_moments=second,
        degenerate=False,
        M=count,
        seed=ens.seed,
    )


def v_exponential_moment(
    sol: ZvonkinSolution, paths: PathEnsemble, alpha: float
) -> EstimatorResult:
    """Exponential moment of the quadratic-variation cost along paths.

    Accumulates ``V_T = int || hess u (I + grad u)^{-1} ||_F^2 ds`` by
    left-point quadrature along the recovered states of a transformed
    ensemble and estimates ``E[exp(alpha V_T)]``; overflowing paths are
    excluded and counted.
    """
    grid = sol.grid
    d = grid.d
    M, n_nodes, _ = paths.states.shape
    dt = float(paths.times[1] - paths.times[0])
    eye = np.eye(d)
    v_total = np.zeros(M)
    for k in range(n_nodes - 1):
        t_k = k * dt
        x = paths.states[:, k, :]
        hess = sol.hess_u_at(t_k, x, extend=True)  # (M, d, d, d)
        inv_jac = np.linalg.inv(eye[None] + sol.grad_u_at(t_k, x, extend=True))
        contracted = np.einsum("pijl,plk->pijk", hess, inv_jac)
        v_total += np.sum(contracted**2, axis=(1, 2, 3)) * dt
    arg = alpha * v_total
    bad = ~np.isfinite(arg) | (arg > 700.0)
    vals = np.where(bad, 0.0, np.exp(np.where(bad, 0.0, arg)))
    n_ok = int((~bad).sum())
    fp = fingerprint(
        op="v_exp_moment", alpha=alpha, lam=sol.lam, M=M, seed=paths.seed
    )
    return brownian.reduce_moments(
        [(np.array([vals.sum()]), np.array([(vals**2).sum()]), n_ok)],
        fp,
        paths.seed,
        n_excluded=int(bad.sum()),
    )


# ---------------------------------------------------------------------------
# gradient estimators


def _discrete_weights(weight: WeightFunction, k_t: int, dt: float) -> np.ndarray:
    """Left-point weight samples rescaled to unit discrete integral."""
    a_vals = np.asarray(weight.fn(np.arange(k_t) * dt), dtype=float)
    total = float(np.sum(a_vals) * dt)
    if total <= 0:
        raise ValidationError("weight function has nonpositive discrete mass")
    return a_vals / total


def bel_gradient_multi(
    payoff: Payoff,
    b: DriftField,
    x0,
    t: float,
    weights: Sequence[WeightFunction],
    ens: BrownianEnsemble,
) -> list[EstimatorResult]:
    """Derivative-free gradient estimates for several averaging weights.

    One pass integrates the state and its first variation and accumulates
    the Ito sums ``sum_k a(t_k) Z_k^T dB_k`` for every weight; the payoff
    at time t then multiplies each sum.  Returns one d-vector estimate per
    weight.
    """
    if not b.smooth:
        raise ValidationError("the gradient representation needs a smooth drift")
    d = b.d
    dt = ens.dt
    k_t = node_index(t, dt, ens.n_t)
    if k_t < 1:
        raise ValidationError("gradient requires t > 0")
    for w in weights:
        if abs(w.t - t) > 1e-12:
            raise ValidationError(f"weight '{w.label}' built for t={w.t}, not {t}")
    a_mats = np.stack([_discrete_weights(w, k_t, dt) for w in weights])  # (W, k_t)
    start = _start(x0, d)
    n_w = len(weights)

    def block(blk, i0, i1, dB):
        nb = i1 - i0
        x = np.tile(start, (nb, 1))
        Z = np.tile(np.eye(d), (nb, 1, 1))
        ito = np.zeros((n_w, nb, d))
        for k in range(k_t):
            zt_db = np.einsum("pji,pj->pi", Z, dB[:, k, :])
            ito += a_mats[:, k][:, None, None] * zt_db[None]
            G = b.grad_at(k * dt, x)
            Z = Z + dt * np.einsum("pij,pjk->pik", G, Z)
            x = x + b(k * dt, x) * dt + dB[:, k, :]
        pay = np.asarray(payoff.fn(x), dtype=float)
        vals = pay[None, :, None] * ito  # (W, nb, d)
        return vals.sum(axis=1), (vals**2).sum(axis=1), nb

    partials = brownian.map_blocks(ens, block)
    out = []
    for wi, w in enumerate(weights):
        fp = fingerprint(
            op="bel_gradient", drift=b.label, payoff=payoff.label, weight=w.label,
            t=t, x0=repr(list(start)), M=ens.M, dt=ens.dt, seed=ens.seed,
        )
        out.append(
            brownian.reduce_moments(
                [(p[0][wi], p[1][wi], p[2]) for p in partials], fp, ens.seed
            )
        )
    return out


def bel_gradient(
    payoff: Payoff,
    b: DriftField,
    x0,
    t: float,
    weight: WeightFunction,
    ens: BrownianEnsemble,
) -> EstimatorResult:
    """Derivative-free gradient of x -> E[payoff(X_t^x)] at x0."""
    return bel_gradient_multi(payoff, b, x0, t, [weight], ens)[0]


@dataclass(frozen=True)
class FdGradient:
    """Central-difference gradient with a half-step consistency check."""

    mean: np.ndarray  # (d,) at step h
    stderr: np.ndarray
    mean_half: np.ndarray  # (d,) at step h/2
    stderr_half: np.ndarray
    h: float
    M: int
    seed: int
    config_fingerprint: str

    @property
    def richardson_slack(self) -> np.ndarray:
        return np.abs(self.mean - self.mean_half)

    def result(self) -> EstimatorResult:
        return EstimatorResult(
            self.mean, self.stderr, self.M, self.seed, self.config_fingerprint
        )


def fd_gradient_oracle(
    payoff: Payoff,
    b: DriftField,
    x0,
    t: float,
    ens: BrownianEnsemble,
    *,
    h: float = 0.05,
) -> FdGradient:
    """Common-random-number central differences of x -> E[payoff(X_t^x)].

    For every axis the states from the four shifted starts (+-h, +-h/2)
    evolve under identical increments, so the per-path differences stay
    low variance; the half-step estimate provides the consistency slack.
    """
    if h <= 0:
        raise ValidationError("h must be positive")
    d = b.d
    dt = ens.dt
    k_t = node_index(t, dt, ens.n_t)
    start = _start(x0, d)
    shifts = []
    for axis in range(d):
        e = np.zeros(d)
        e[axis] = 1.0
        for sgn in (+1.0, -1.0):
            for step in (h, h / 2.0):
                shifts.append(start + sgn * step * e)
    shifts = np.array(shifts)  # (4d, d)
    n_states = shifts.shape[0]

    def block(blk, i0, i1, dB):
        nb = i1 - i0
        x = np.repeat(shifts[:, None, :], nb, axis=1)  # (4d, nb, d)
        for k in range(k_t):
            tk = k * dt
            for j in range(n_states):
                x[j] += b(tk, x[j]) * dt
            x += dB[None, :, k, :]
        sums = np.zeros((d, 2))
        sqs = np.zeros((d, 2))
        for axis in range(d):
            base = 4 * axis
            g_h = (payoff.fn(x[base]) - payoff.fn(x[base + 2])) / (2.0 * h)
            g_half = (payoff.fn(x[base + 1]) - payoff.fn(x[base + 3])) / h
            sums[axis, 0] = g_h.sum()
            sums[axis, 1] = g_half.sum()
            sqs[axis, 0] = (g_h**2).sum()
            sqs[axis, 1] = (g_half**2).sum()
        return sums, sqs, nb

    partials = brownian.map_blocks(ens, block)
    fp = fingerprint(
        op="fd_gradient", drift=b.label, payoff=payoff.label, t=t, h=h,
        x0=repr(list(start)), M=ens.M, dt=ens.dt, seed=ens.seed,
    )
    full = brownian.reduce_moments(
        [(p[0][:, 0], p[1][:, 0], p[2]) for p in partials], fp, ens.seed
    )
    half = brownian.reduce_moments(
        [(p[0][:, 1], p[1][:, 1], p[2]) for p in partials], fp, ens.seed
    )
    return FdGradient(
        mean=full.mean,
        stderr=full.stderr,
        mean_half=half.mean,
        stderr_half=half.stderr,
        h=h,
        M=ens.M,
        seed=ens.seed,
        config_fingerprint=fp,
    )


def pathwise_gradient(
    payoff: Payoff, b: DriftField, x0, t: float, ens: BrownianEnsemble
) -> EstimatorResult:
    """Gradient via the chain rule: mean of grad payoff(X_t) . Z_t."""
    if payoff.grad is None:
        raise ValidationError("pathwise gradient needs the payoff gradient")
    if not b.smooth:
        raise ValidationError("pathwise gradient needs a smooth drift")
    d = b.d
    dt = ens.dt
    k_t = node_index(t, dt, ens.n_t)
    start = _start(x0, d)

    def block(blk, i0, i1, dB):
        nb = i1 - i0
        x = np.tile(start, (nb, 1))
        Z = np.tile(np.eye(d), (nb, 1, 1))
        for k in range(k_t):
            G = b.grad_at(k * dt, x)
            Z = Z + dt * np.einsum("pij,pjk->pik", G, Z)
            x = x + b(k * dt, x) * dt + dB[:, k, :]
        gp = np.asarray(payoff.grad(x), dtype=float)
        vals = np.einsum("pi,pij->pj", gp, Z)
        return vals.sum(axis=0), (vals**2).sum(axis=0), nb

    partials = brownian.map_blocks(ens, block)
    fp = fingerprint(
        op="pathwise_gradient", drift=b.label, payoff=payoff.label, t=t,
        x0=repr(list(start)), M=ens.M, dt=ens.dt, seed=ens.seed,
    )
    return brownian.reduce_moments(partials, fp, ens.seed)
