"""Forward parabolic solver and its Monte Carlo cross-validation.

Solves ``d_t v = b . grad v + 1/2 Lap v`` from ``v(0, .) = payoff`` with
the boundary frozen at the payoff's boundary values, and checks the grid
solution against the probabilistic representation ``v(t, x) = E[payoff(X_t^x)]``
and the derivative-free gradient estimates at probe points.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .brownian import BrownianEnsemble, EstimatorResult, node_index
from .drift import DriftField
from .errors import ValidationError
from .pde import (
    GridField,
    SpaceTimeGrid,
    _coarsen,
    _grid_difference,
    _interp_spacetime,
    _march,
    _node_gradient,
)
from .sde import em_payoff_mean
from .sensitivity import Payoff

__all__ = [
    "KolmogorovSolution",
    "ComparisonRecord",
    "solve_kolmogorov",
    "compare_mc",
    "gradient_field_check",
    "build_probes",
    "save_solution_csv",
]


@dataclass(frozen=True)
class KolmogorovSolution:
    """Scalar grid solution with its node gradient and provenance."""

    grid: SpaceTimeGrid
    v: GridField  # scalar values, component axis of size 1
    grad_v: np.ndarray  # (n_t + 1,) + space + (d,)
    payoff_label: str
    drift_label: str
    error_estimate: Optional[float] = None

    def v_at(self, t: float, pts) -> np.ndarray:
        return _interp_spacetime(self.grid, self.v.values, t, pts, extend=False)[..., 0]

    def grad_v_at(self, t: float, pts) -> np.ndarray:
        return _interp_spacetime(self.grid, self.grad_v, t, pts, extend=False)


def solve_kolmogorov(
    b: DriftField,
    payoff: Payoff,
    grid: SpaceTimeGrid,
    *,
    error_estimate: bool = False,
) -> KolmogorovSolution:
    """Semi-implicit forward march of the generator equation.

    Shares the stepping core with the backward system: implicit diffusion,
    explicit upwind advection, no reaction and no forcing, with initial
    values on the nodes equal to the payoff exactly.
    """
    if b.d != grid.d:
        raise ValidationError("drift dimension does not match the grid")

    def run(g: SpaceTimeGrid) -> np.ndarray:
        pts_all = g.points()
        v0 = np.asarray(payoff.fn(pts_all), dtype=float).reshape(g.space_shape + (1,))
        pts_int = g.interior_points()
        return _march(
            g,
            w0=v0,
            boundary=v0,
            coeff_at=lambda tau: b(tau, pts_int),
            lam=0.0,
            forcing_at=None,
        )

    values = run(grid)
    est = None
    if error_estimate:
        cg = _coarsen(grid)
        est = _grid_difference(grid, values, cg, run(cg))
    return KolmogorovSolution(
        grid=grid,
        v=GridField(grid=grid, values=values),
        grad_v=_node_gradient(grid, values[..., 0][..., None])[..., 0, :],
        payoff_label=payoff.label,
        drift_label=b.label,
        error_estimate=est,
    )


# ---------------------------------------------------------------------------
# probes and comparisons


def build_probes(
    grid: SpaceTimeGrid,
    *,
    n_points: int = 11,
    time_fractions: Sequence[float] = (0.25, 0.5, 1.0),
    span: float = 0.5,
) -> list[tuple[float, np.ndarray]]:
    """Equispaced probe ladder in the interior, default |x| <= L/2."""
    xs = np.linspace(-span * grid.L, span * grid.L, n_points)
    probes = []
    for frac in time_fractions:
        t = frac * grid.T
        for x in xs:
            pt = np.full(grid.d, x)
            probes.append((float(t), pt))
    return probes


@dataclass(frozen=True)
class ComparisonRecord:
    """Per-probe comparison rows and the worst-case margin."""

    rows: list[dict]
    worst_gap: float
    worst_tol: float
    passed: bool


def compare_mc(
    sol: KolmogorovSolution,
    probes: Sequence[tuple[float, np.ndarray]],
    payoff: Payoff,
    b: DriftField,
    ens: BrownianEnsemble,
    *,
    grid_slack: float = 5e-3,
) -> ComparisonRecord:
    """Grid solution against Monte Carlo payoff means at every probe.

    Probes sharing a start point reuse one simulation pass with snapshots
    at the requested times.  The per-probe tolerance is
    ``3 stderr + grid_slack``.
    """
    by_x: dict[tuple, list[float]] = {}
    for t, x in probes:
        by_x.setdefault(tuple(np.asarray(x, float)), []).append(float(t))
    rows = []
    worst_gap, worst_tol = 0.0, 0.0
    ok = True
    for x_key, times in by_x.items():
        x = np.array(x_key)
        results = em_payoff_mean(
            payoff.fn, b, x, times, ens, label=payoff.label
        )
        for t, res in zip(times, results):
            v_grid = float(sol.v_at(t, x))
            gap = abs(v_grid - res.scalar)
            tol = 3.0 * res.scalar_stderr + grid_slack
            rows.append(
                {
                    "t": t,
                    **{f"x{j + 1}": x[j] for j in range(x.size)},
                    "v_grid": v_grid,
                    "mc_mean": res.scalar,
                    "mc_stderr": res.scalar_stderr,
                    "tol": tol,
                    "ok": gap <= tol,
                }
            )
            if gap - tol > worst_gap - worst_tol:
                worst_gap, worst_tol = gap, tol
            ok = ok and gap <= tol
    return ComparisonRecord(rows=rows, worst_gap=worst_gap, worst_tol=worst_tol, passed=ok)


def gradient_field_check(
    sol: KolmogorovSolution,
    bel_results: Sequence[tuple[float, np.ndarray, EstimatorResult]],
    *,
    grid_slack: float = 5e-3,
) -> ComparisonRecord:
    """Grid gradient against derivative-free estimates at probe points."""
    rows = []
    worst_gap, worst_tol = 0.0, 0.0
    ok = True
    for t, x, res in bel_results:
        x = np.asarray(x, dtype=float)
        gv = sol.grad_v_at(t, x)
        gap = float(np.max(np.abs(gv - res.mean)))
        tol = 3.0 * float(np.max(res.stderr)) + grid_slack
        rows.append(
            {
                "t": float(t),
                **{f"x{j + 1}": x[j] for j in range(x.size)},
                **{f"grad_v{j + 1}": gv[j] for j in range(x.size)},
                **{f"bel{j + 1}": res.mean[j] for j in range(x.size)},
                "tol": tol,
                "ok": gap <= tol,
            }
        )
        if gap - tol > worst_gap - worst_tol:
            worst_gap, worst_tol = gap, tol
        ok = ok and gap <= tol
    return ComparisonRecord(rows=rows, worst_gap=worst_gap, worst_tol=worst_tol, passed=ok)


def save_solution_csv(sol: KolmogorovSolution, path) -> None:
    """CSV rows (t, x1..xd, v, gradv1..gradvd) over all nodes."""
    grid = sol.grid
    pts = grid.points()
    d = grid.d
    header = ["t"] + [f"x{j + 1}" for j in range(d)] + ["v"] + [
        f"gradv{j + 1}" for j in range(d)
    ]
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for k, t in enumerate(grid.t_nodes):
            vals = sol.v.values[k].reshape(-1)
            grads = sol.grad_v[k].reshape(-1, d)
            for pt, v, g in zip(pts, vals, grads):
                cells = [f"{t:.17g}"]
                cells += [f"{c:.17g}" for c in pt]
                cells.append(f"{v:.17g}")
                cells += [f"{c:.17g}" for c in g]
                fh.write(",".join(cells) + "\n")
