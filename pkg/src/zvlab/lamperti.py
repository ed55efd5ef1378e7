"""Scale reduction of one-dimensional diffusions to unit noise.

For dX = b(X) dt + sigma(X) dB with sigma bounded away from zero on a
working interval, the primitive ``Lam(y) = int_{y0}^y dz / sigma(z)``
turns the dynamics into dZ = b_*(Z) dt + dB with

    b_*(z) = Lam'(y) b(y) + 1/2 Lam''(y) sigma(y)^2,   y = Lam^{-1}(z).

The primitive is tabulated with nodes equidistributed in Lam so that the
monotone cubic interpolants of the map and its inverse stay accurate even
where sigma is small.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.interpolate import PchipInterpolator

from . import brownian
from .brownian import BrownianEnsemble
from .drift import DriftField
from .errors import DegeneracyError, EvaluationError, ValidationError
from .sde import PathEnsemble, _check_horizon, _start

__all__ = ["LampertiMap", "lamperti_transform", "simulate_lamperti"]

# Gauss-Legendre nodes/weights on [0, 1] for per-interval quadrature
_GL_NODES = np.array([0.5 - math.sqrt(3.0 / 5.0) / 2.0, 0.5, 0.5 + math.sqrt(3.0 / 5.0) / 2.0])
_GL_WEIGHTS = np.array([5.0 / 18.0, 8.0 / 18.0, 5.0 / 18.0])


@dataclass(frozen=True)
class LampertiMap:
    """Monotone scale map with numeric inverse and transformed drift."""

    sigma: Callable[[np.ndarray], np.ndarray]
    b_star: DriftField
    y0: float
    y_min: float
    y_max: float
    sigma_min: float
    _forward: PchipInterpolator
    _inverse: PchipInterpolator

    def forward(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        if np.any(y < self.y_min - 1e-12) or np.any(y > self.y_max + 1e-12):
            raise ValidationError("argument outside the working interval")
        return self._forward(y)

    def inverse(self, z) -> np.ndarray:
        return self._inverse(np.clip(z, self.z_min, self.z_max))

    def deriv(self, y) -> np.ndarray:
        """Lam'(y) = 1 / sigma(y)."""
        return 1.0 / np.asarray(self.sigma(np.asarray(y, dtype=float)), dtype=float)

    def interp_deriv(self, y) -> np.ndarray:
        """Derivative of the tabulated map (quality check against 1/sigma)."""
        return self._forward.derivative()(np.asarray(y, dtype=float))

    @property
    def z_min(self) -> float:
        return float(self._forward(self.y_min))

    @property
    def z_max(self) -> float:
        return float(self._forward(self.y_max))


def _cumulative_gl(f: Callable, nodes: np.ndarray) -> np.ndarray:
    """Cumulative integral of f over a sorted node sequence, 3-point GL."""
    h = np.diff(nodes)
    left = nodes[:-1]
    acc = np.zeros_like(h)
    for c, w in zip(_GL_NODES, _GL_WEIGHTS):
        acc += w * f(left + c * h)
    out = np.empty(nodes.size)
    out[0] = 0.0
    np.cumsum(acc * h, out=out[1:])
    return out


def lamperti_transform(
    sigma: Callable,
    b: Callable,
    y_min: float,
    y_max: float,
    *,
    y0: float | None = None,
    n_tab: int = 10_000,
    sigma_min: float = 1e-8,
) -> LampertiMap:
    """Build the scale map, its inverse, and the transformed drift.

    ``sigma`` and ``b`` are vectorised scalar fields of the state.  The
    base point defaults to the midpoint of the working interval.  Raises
    :class:`DegeneracyError` if sigma dips below ``sigma_min``.
    """
    if y_max <= y_min:
        raise ValidationError("empty working interval")
    y0 = 0.5 * (y_min + y_max) if y0 is None else float(y0)
    if not y_min <= y0 <= y_max:
        raise ValidationError("base point outside the working interval")

    sig = lambda y: np.asarray(sigma(np.asarray(y, dtype=float)), dtype=float)
    probe = np.linspace(y_min, y_max, max(4 * n_tab, 4001))
    sig_probe = sig(probe)
    if not np.all(np.isfinite(sig_probe)):
        raise EvaluationError("sigma is not finite on the working interval")
    if np.min(sig_probe) < sigma_min:
        raise DegeneracyError(
            f"sigma reaches {np.min(sig_probe):g} < sigma_min={sigma_min:g}"
        )

    inv_sig = lambda y: 1.0 / sig(y)
    # pass 1: cumulative primitive on a uniform grid
    rough = _cumulative_gl(inv_sig, probe)
    # pass 2: re-grid with nodes equidistributed in the primitive
    targets = np.linspace(0.0, rough[-1], n_tab)
    y_nodes = np.interp(targets, rough, probe)
    y_nodes[0], y_nodes[-1] = y_min, y_max
    y_nodes = np.maximum.accumulate(y_nodes)
    lam_vals = _cumulative_gl(inv_sig, y_nodes)
    # anchor Lam(y0) = 0
    offset = float(np.interp(y0, y_nodes, lam_vals))
    lam_vals -= offset

    keep = np.concatenate([[True], np.diff(y_nodes) > 0])
    y_nodes, lam_vals = y_nodes[keep], lam_vals[keep]
    forward = PchipInterpolator(y_nodes, lam_vals, extrapolate=True)
    inverse = PchipInterpolator(lam_vals, y_nodes, extrapolate=True)

    h_second = (y_max - y_min) * 1e-7

    def b_star_fn(t, x):
        z = x[..., 0]
        y = inverse(np.clip(z, lam_vals[0], lam_vals[-1]))
        yl = np.clip(y - h_second, y_min, y_max)
        yr = np.clip(y + h_second, y_min, y_max)
        lam2 = (1.0 / sig(yr) - 1.0 / sig(yl)) / (yr - yl)
        sv = sig(y)
        bv = np.asarray(b(y), dtype=float)
        out = bv / sv + 0.5 * lam2 * sv**2
        return out[..., None]

    b_star = DriftField(
        fn=b_star_fn,
        d=1,
        smooth=False,
        time_varying=False,
        label="lamperti-star",
    )
    return LampertiMap(
        sigma=sig,
        b_star=b_star,
        y0=y0,
        y_min=float(y_min),
        y_max=float(y_max),
        sigma_min=float(sigma_min),
        _forward=forward,
        _inverse=inverse,
    )


def simulate_lamperti(
    lam_map: LampertiMap, x0, T: float, ens: BrownianEnsemble
) -> PathEnsemble:
    """Integrate the unit-noise reduction and map the states back.

    Paths whose reduced state leaves the tabulated range are flagged as
    excluded (their stored states are clamped into the working interval);
    the count travels with the ensemble.
    """
    if ens.d != 1:
        raise ValidationError("the scale reduction is one-dimensional")
    _check_horizon(T, ens)
    ens.check_budget(ens.M * (ens.n_t + 1), "reduced path states")
    x0 = float(np.asarray(x0).reshape(()))
    if not lam_map.y_min <= x0 <= lam_map.y_max:
        raise ValidationError("x0 outside the working interval")
    z0 = float(lam_map.forward(x0))
    z_lo, z_hi = lam_map.z_min, lam_map.z_max
    states = np.empty((ens.M, ens.n_t + 1, 1))
    excluded = np.zeros(ens.M, dtype=bool)

    def block(blk, i0, i1, dB):
        nb = i1 - i0
        z = np.full(nb, z0)
        out_mask = np.zeros(nb, dtype=bool)
        states[i0:i1, 0, 0] = x0
        for k in range(ens.n_t):
            drift = lam_map.b_star(k * ens.dt, z[:, None])[:, 0]
            z = z + drift * ens.dt + dB[:, k, 0]
            out_mask |= (z < z_lo) | (z > z_hi)
            states[i0:i1, k + 1, 0] = lam_map.inverse(z)
        excluded[i0:i1] = out_mask
        return None

    brownian.map_blocks(ens, block)
    return PathEnsemble(
        states=states,
        times=ens.times,
        log_weight=np.zeros(ens.M),
        drift_label="lamperti",
        x0=np.array([x0]),
        seed=ens.seed,
        excluded=excluded,
    )
