"""Path simulation, change-of-measure weights, and weighted estimators.

All drift evaluations are left-point (Ito) both in the Euler-Maruyama
step and in the stochastic integral of the exponential weight, and the
weight always reuses the increments of the driftless paths it reweights.
Heavy estimators never materialise full path arrays; they stream the
ensemble block by block.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import brownian
from .brownian import BrownianEnsemble, EstimatorResult, fingerprint, node_index
from .drift import DriftField
from .errors import EstimationError, EvaluationError, SizingError, ValidationError
from .pde import ZvonkinSolution

__all__ = [
    "PathEnsemble",
    "DoleansWeights",
    "MomentScaling",
    "simulate_em",
    "simulate_em_sigma",
    "simulate_transformed",
    "em_snapshots",
    "em_payoff_mean",
    "doleans_weight",
    "girsanov_estimate",
    "exp_moment_diagnostic",
    "fourth_moment_scaling",
    "save_paths_csv",
]

# Log-weights above this are treated as overflowed and excluded.
LOG_WEIGHT_CAP = 700.0


@dataclass(frozen=True)
class PathEnsemble:
    """States along every path plus the running log weight per path."""

    states: np.ndarray  # (M, n_t + 1, d)
    times: np.ndarray  # (n_t + 1,)
    log_weight: np.ndarray  # (M,)
    drift_label: str
    x0: np.ndarray  # (d,)
    seed: int
    excluded: Optional[np.ndarray] = None  # (M,) bool, for flagged paths

    def __post_init__(self):
        if not np.all(np.isfinite(self.states)):
            raise ValidationError("path states contain non-finite entries")
        if not np.allclose(self.states[:, 0, :], self.x0[None, :]):
            raise ValidationError("paths do not start at x0")

    @property
    def M(self) -> int:
        return self.states.shape[0]

    @property
    def d(self) -> int:
        return self.states.shape[2]

    @property
    def n_excluded(self) -> int:
        return 0 if self.excluded is None else int(self.excluded.sum())


def _start(x0, d: int) -> np.ndarray:
    out = np.broadcast_to(np.asarray(x0, dtype=float), (d,)).astype(float)
    return out


def _check_horizon(T: float, ens: BrownianEnsemble) -> None:
    if abs(ens.n_t * ens.dt - T) > 1e-9 * max(1.0, T):
        raise ValidationError(
            f"ensemble horizon {ens.n_t * ens.dt:g} does not match T={T:g}"
        )


def simulate_em(b: DriftField, x0, T: float, ens: BrownianEnsemble) -> PathEnsemble:
    """Euler-Maruyama for unit-noise dynamics: X <- X + b dt + dB.

    Materialises all states (subject to the ensemble memory budget); use
    the streaming estimators for large path counts.
    """
    _check_horizon(T, ens)
    d = b.d
    if d != ens.d:
        raise ValidationError("drift dimension does not match ensemble")
    ens.check_budget(ens.M * (ens.n_t + 1) * d, "path ensemble states")
    start = _start(x0, d)
    states = np.empty((ens.M, ens.n_t + 1, d))

    def block(blk, i0, i1, dB):
        x = np.tile(start, (i1 - i0, 1))
        states[i0:i1, 0] = x
        for k in range(ens.n_t):
            x = x + b(k * ens.dt, x) * ens.dt + dB[:, k, :]
            if not np.all(np.isfinite(x)):
                bad = int(np.argwhere(~np.isfinite(x))[0][0])
                raise EvaluationError(
                    f"non-finite state on path {i0 + bad} at step {k + 1}"
                )
            states[i0:i1, k + 1] = x
        return None

    brownian.map_blocks(ens, block)
    return PathEnsemble(
        states=states,
        times=ens.times,
        log_weight=np.zeros(ens.M),
        drift_label=b.label,
        x0=start,
        seed=ens.seed,
    )


def simulate_em_sigma(
    b_fn: Callable, sigma_fn: Callable, x0, T: float, ens: BrownianEnsemble
) -> PathEnsemble:
    """Euler-Maruyama with scalar state-dependent noise (d = 1).

    Direct integrator for dX = b(X) dt + sigma(X) dB, used as the oracle
    against unit-noise reductions.
    """
    if ens.d != 1:
        raise ValidationError("general-noise integrator is one-dimensional")
    _check_horizon(T, ens)
    ens.check_budget(ens.M * (ens.n_t + 1), "path ensemble states")
    start = _start(x0, 1)
    states = np.empty((ens.M, ens.n_t + 1, 1))

    def block(blk, i0, i1, dB):
        x = np.full(i1 - i0, start[0])
        states[i0:i1, 0, 0] = x
        for k in range(ens.n_t):
            x = x + b_fn(x) * ens.dt + sigma_fn(x) * dB[:, k, 0]
            if not np.all(np.isfinite(x)):
                bad = int(np.argwhere(~np.isfinite(x))[0][0])
                raise EvaluationError(
                    f"non-finite state on path {i0 + bad} at step {k + 1}"
                )
            states[i0:i1, k + 1, 0] = x
        return None

    brownian.map_blocks(ens, block)
    return PathEnsemble(
        states=states,
        times=ens.times,
        log_weight=np.zeros(ens.M),
        drift_label="general-noise",
        x0=start,
        seed=ens.seed,
    )


def em_snapshots(
    b: DriftField, x0, nodes: Sequence[int], ens: BrownianEnsemble
) -> np.ndarray:
    """States of the unit-noise dynamics at selected nodes, shape (M, n, d).

    Streams the ensemble, so memory scales with the number of snapshot
    nodes instead of the number of time steps.
    """
    d = b.d
    nodes = sorted(set(int(k) for k in nodes))
    if nodes and (nodes[0] < 0 or nodes[-1] > ens.n_t):
        raise ValidationError("snapshot nodes outside the time grid")
    ens.check_budget(ens.M * len(nodes) * d, "snapshot states")
    start = _start(x0, d)
    out = np.empty((ens.M, len(nodes), d))
    lookup = {k: j for j, k in enumerate(nodes)}

    def block(blk, i0, i1, dB):
        x = np.tile(start, (i1 - i0, 1))
        if 0 in lookup:
            out[i0:i1, lookup[0]] = x
        last = nodes[-1] if nodes else 0
        for k in range(last):
            x = x + b(k * ens.dt, x) * ens.dt + dB[:, k, :]
            if k + 1 in lookup:
                out[i0:i1, lookup[k + 1]] = x
        return None

    brownian.map_blocks(ens, block)
    if not np.all(np.isfinite(out)):
        raise EvaluationError("non-finite snapshot state")
    return out


def em_payoff_mean(
    payoff_fn: Callable,
    b: DriftField,
    x0,
    times: Sequence[float],
    ens: BrownianEnsemble,
    *,
    label: str = "payoff",
) -> list[EstimatorResult]:
    """Monte Carlo means of a scalar payoff at several times, one pass."""
    nodes = [node_index(t, ens.dt, ens.n_t) for t in times]
    order = sorted(set(nodes))
    start = _start(x0, b.d)
    lookup = {k: j for j, k in enumerate(order)}

    def block(blk, i0, i1, dB):
        x = np.tile(start, (i1 - i0, 1))
        sums = np.zeros(len(order))
        sqs = np.zeros(len(order))
        if 0 in lookup:
            vals = payoff_fn(x)
            sums[lookup[0]] = vals.sum()
            sqs[lookup[0]] = (vals**2).sum()
        for k in range(order[-1]):
            x = x + b(k * ens.dt, x) * ens.dt + dB[:, k, :]
            if k + 1 in lookup:
                vals = payoff_fn(x)
                j = lookup[k + 1]
                sums[j] = vals.sum()
                sqs[j] = (vals**2).sum()
        return sums, sqs, i1 - i0

    partials = brownian.map_blocks(ens, block)
    results = []
    for t, k in zip(times, nodes):
        j = lookup[k]
        fp = fingerprint(
            op="em_payoff_mean", drift=b.label, payoff=label, t=t,
            x0=repr(list(start)), M=ens.M, dt=ens.dt, seed=ens.seed,
        )
        results.append(
            brownian.reduce_moments(
                [(np.array([p[0][j]]), np.array([p[1][j]]), p[2]) for p in partials],
                fp,
                ens.seed,
            )
        )
    return results


# ---------------------------------------------------------------------------
# exponential weights and weighted estimators


@dataclass(frozen=True)
class DoleansWeights:
    """Per-path exponential weights for the change of measure."""

    log_weights: np.ndarray  # (M,)
    excluded: np.ndarray  # (M,) bool
    seed: int

    @property
    def weights(self) -> np.ndarray:
        w = np.exp(np.where(self.excluded, 0.0, self.log_weights))
        w[self.excluded] = np.nan
        return w

    @property
    def n_excluded(self) -> int:
        return int(self.excluded.sum())


def _weight_block(b: DriftField, start: np.ndarray, ens: BrownianEnsemble, upto: int):
    """Log-weight accumulator along driftless paths, one block at a time."""

    def block(blk, i0, i1, dB):
        x = np.tile(start, (i1 - i0, 1))
        logw = np.zeros(i1 - i0)
        for k in range(upto):
            bv = b(k * ens.dt, x)
            logw += np.einsum("pj,pj->p", bv, dB[:, k, :])
            logw -= 0.5 * np.sum(bv * bv, axis=-1) * ens.dt
            x += dB[:, k, :]
        return logw, x

    return block


def doleans_weight(b: DriftField, x0, ens: BrownianEnsemble) -> DoleansWeights:
    """Stochastic exponential of the drift along driftless paths.

    Per path: exp( sum_k b(t_k, x0 + B_k) . dB_k - 1/2 sum_k |b|^2 dt )
    over the whole horizon, computed from the same increments as the
    paths themselves.  Overflowing weights are flagged, never clipped.
    """
    start = _start(x0, b.d)
    base = _weight_block(b, start, ens, ens.n_t)
    logs = np.empty(ens.M)

    def block(blk, i0, i1, dB):
        logw, _ = base(blk, i0, i1, dB)
        logs[i0:i1] = logw
        return None

    brownian.map_blocks(ens, block)
    excluded = ~np.isfinite(logs) | (logs > LOG_WEIGHT_CAP)
    return DoleansWeights(log_weights=logs, excluded=excluded, seed=ens.seed)


def girsanov_estimate(
    f: Callable,
    b: DriftField,
    x0,
    t: float,
    ens: BrownianEnsemble,
    *,
    f_label: str = "f",
) -> EstimatorResult:
    """Weighted mean of f(x0 + B_t) under the drift change of measure.

    The weight runs over the whole horizon [0, T]; by the martingale
    property the estimate equals the strong-solution mean E[f(X_t)].
    """
    k_t = node_index(t, ens.dt, ens.n_t)
    start = _start(x0, b.d)

    def block(blk, i0, i1, dB):
        x = np.tile(start, (i1 - i0, 1))
        logw = np.zeros(i1 - i0)
        f_val = None
        if k_t == 0:
            f_val = np.asarray(f(x), dtype=float)
        for k in range(ens.n_t):
            bv = b(k * ens.dt, x)
            logw += np.einsum("pj,pj->p", bv, dB[:, k, :])
            logw -= 0.5 * np.sum(bv * bv, axis=-1) * ens.dt
            x += dB[:, k, :]
            if k + 1 == k_t:
                f_val = np.asarray(f(x), dtype=float)
        bad = ~np.isfinite(logw) | (logw > LOG_WEIGHT_CAP)
        vals = np.where(bad, 0.0, np.exp(np.where(bad, 0.0, logw)) * f_val)
        return vals.sum(), (vals**2).sum(), int((~bad).sum()), int(bad.sum())

    partials = brownian.map_blocks(ens, block)
    n_excl = sum(p[3] for p in partials)
    if n_excl >= ens.M:
        raise EstimationError("all paths excluded by weight overflow")
    fp = fingerprint(
        op="girsanov", drift=b.label, f=f_label, t=t,
        x0=repr(list(start)), M=ens.M, dt=ens.dt, seed=ens.seed,
    )
    return brownian.reduce_moments(
        [(np.array([p[0]]), np.array([p[1]]), p[2]) for p in partials],
        fp,
        ens.seed,
        n_excluded=n_excl,
    )


def exp_moment_diagnostic(
    b: DriftField, k_coef: float, x0, ens: BrownianEnsemble
) -> EstimatorResult:
    """Monte Carlo estimate of E[exp(k int_0^T |b(s, x0 + B_s)|^2 ds)]."""
    start = _start(x0, b.d)

    def block(blk, i0, i1, dB):
        x = np.tile(start, (i1 - i0, 1))
        integral = np.zeros(i1 - i0)
        for kk in range(ens.n_t):
            bv = b(kk * ens.dt, x)
            integral += np.sum(bv * bv, axis=-1) * ens.dt
            x += dB[:, kk, :]
        arg = k_coef * integral
        bad = ~np.isfinite(arg) | (arg > LOG_WEIGHT_CAP)
        vals = np.where(bad, 0.0, np.exp(np.where(bad, 0.0, arg)))
        return vals.sum(), (vals**2).sum(), int((~bad).sum()), int(bad.sum())

    partials = brownian.map_blocks(ens, block)
    n_excl = sum(p[3] for p in partials)
    if n_excl >= ens.M:
        raise EstimationError("all paths excluded by exponential overflow")
    fp = fingerprint(
        op="exp_moment", drift=b.label, k=k_coef,
        x0=repr(list(start)), M=ens.M, dt=ens.dt, seed=ens.seed,
    )
    return brownian.reduce_moments(
        [(np.array([p[0]]), np.array([p[1]]), p[2]) for p in partials],
        fp,
        ens.seed,
        n_excluded=n_excl,
    )


# ---------------------------------------------------------------------------
# fourth-moment scaling


@dataclass(frozen=True)
class MomentScaling:
    """Log-log regression of fourth moments of increments against lag."""

    lags: np.ndarray
    moments: np.ndarray
    slope: float
    r2: float
    M: int
    seed: int


def log_log_fit(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """Least-squares slope and R^2 of log y against log x."""
    lx, ly = np.log(x), np.log(y)
    slope, intercept = np.polyfit(lx, ly, 1)
    pred = slope * lx + intercept
    ss_res = float(np.sum((ly - pred) ** 2))
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(slope), r2


def fourth_moment_scaling(
    b: DriftField,
    x0,
    ens: BrownianEnsemble,
    pairs: Sequence[tuple[float, float]],
) -> MomentScaling:
    """Estimate E[(X_t - X_u)^4] on a ladder of lags and fit the log-log slope.

    For d > 1 the per-coordinate fourth moments are averaged.  Pairs must
    sit on the time grid of the ensemble.
    """
    idx_pairs = [
        (node_index(u, ens.dt, ens.n_t), node_index(t, ens.dt, ens.n_t))
        for u, t in pairs
    ]
    for ku, kt in idx_pairs:
        if kt <= ku:
            raise ValidationError("pairs must satisfy u < t")
    nodes = sorted({k for p in idx_pairs for k in p})
    snaps = em_snapshots(b, x0, nodes, ens)
    lookup = {k: j for j, k in enumerate(nodes)}
    lags = np.array([(kt - ku) * ens.dt for ku, kt in idx_pairs])
    moments = np.empty(len(idx_pairs))
    for i, (ku, kt) in enumerate(idx_pairs):
        diff = snaps[:, lookup[kt], :] - snaps[:, lookup[ku], :]
        moments[i] = float(np.mean(diff**4))
    order = np.argsort(lags)
    lags, moments = lags[order], moments[order]
    slope, r2 = log_log_fit(lags, moments)
    return MomentScaling(
        lags=lags, moments=moments, slope=slope, r2=r2, M=ens.M, seed=ens.seed
    )


def lag_ladder(anchor: float, exponents: Sequence[int]) -> list[tuple[float, float]]:
    """Pairs (anchor, anchor + 2^e) for a dyadic ladder of lags."""
    return [(anchor, anchor + 2.0**e) for e in exponents]


# ---------------------------------------------------------------------------
# dynamics in transformed coordinates


def _invert_block(sol: ZvonkinSolution, t: float, y: np.ndarray, x_start: np.ndarray):
    """Vectorised fixed point x <- y - u(t, x) with a warm start."""
    x = x_start.copy()
    for it in range(200):
        x_new = y - sol.u_at(t, x, extend=True)
        step = float(np.max(np.abs(x_new - x))) if x.size else 0.0
        x = x_new
        if step <= 5e-11:
            return x
    residual = float(np.max(np.abs(x + sol.u_at(t, x, extend=True) - y)))
    raise EvaluationError(
        f"coordinate inversion stalled at t={t:g}, residual {residual:g}"
    )


def simulate_transformed(sol: ZvonkinSolution, x0, ens: BrownianEnsemble) -> PathEnsemble:
    """Integrate the transformed dynamics and return recovered states.

    The auxiliary state follows
    ``dY = lam u(t, x) dt + (I + grad u(t, x)) dB`` with ``x`` the running
    inverse image of ``Y``; the returned ensemble holds ``x`` per node.
    The drift uses the fixed-point identity ``u(t, x) = Y - x``.
    """
    grid = sol.grid
    if ens.d != grid.d:
        raise ValidationError("ensemble dimension does not match solution grid")
    _check_horizon(grid.T, ens)
    ens.check_budget(ens.M * (ens.n_t + 1) * grid.d, "transformed path states")
    start = _start(x0, grid.d)
    states = np.empty((ens.M, ens.n_t + 1, grid.d))
    eye = np.eye(grid.d)

    def block(blk, i0, i1, dB):
        nb = i1 - i0
        x = np.tile(start, (nb, 1))
        y = x + sol.u_at(0.0, x, extend=True)
        states[i0:i1, 0] = x
        for k in range(ens.n_t):
            t_k = k * ens.dt
            diffusion = eye[None, :, :] + sol.grad_u_at(t_k, x, extend=True)
            y = (
                y
                + sol.lam * (y - x) * ens.dt
                + np.einsum("pij,pj->pi", diffusion, dB[:, k, :])
            )
            x = _invert_block(sol, (k + 1) * ens.dt, y, x)
            states[i0:i1, k + 1] = x
        return None

    brownian.map_blocks(ens, block)
    return PathEnsemble(
        states=states,
        times=ens.times,
        log_weight=np.zeros(ens.M),
        drift_label=f"transformed(lam={sol.lam:g})",
        x0=start,
        seed=ens.seed,
    )


# ---------------------------------------------------------------------------
# serialisation


def save_paths_csv(paths: PathEnsemble, path) -> None:
    """Write a path ensemble as CSV rows (path, t, x1..xd, log_weight)."""
    d = paths.d
    header = ["path", "t"] + [f"x{j + 1}" for j in range(d)] + ["log_weight"]
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for i in range(paths.M):
            lw = paths.log_weight[i]
            for k, t in enumerate(paths.times):
                cells = [str(i), f"{t:.17g}"]
                cells += [f"{v:.17g}" for v in paths.states[i, k]]
                cells.append(f"{lw:.17g}")
                fh.write(",".join(cells) + "\n")
