"""Reproducible Brownian increment ensembles and block-parallel reduction.

Increments are generated from counter-style Philox streams keyed by
``(seed, block)`` with a fixed block size, which makes the increment of
(path i, step k) a pure function of ``(seed, i, k)``: the same values are
produced no matter how many paths are requested, how the work is split
across workers, or how often a path is regenerated.

Estimators consume ensembles block by block.  Per-block partial sums are
combined in block order, so Monte Carlo results are bit-identical for any
value of the ``ZVLAB_THREADS`` environment variable.
"""

from __future__ import annotations

import hashlib
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numpy.random import Generator, Philox

from .errors import SizingError, ValidationError

# Paths per generation/accumulation block.  Fixed forever: both the RNG
# keying and the grouping of partial sums depend on it.
BLOCK_PATHS = 16384

# Default budget for materialised arrays, in float64 elements (512 MiB).
DEFAULT_MAX_ELEMENTS = 2**26


def worker_count() -> int:
    """Number of worker threads, capped by the ZVLAB_THREADS env var."""
    raw = os.environ.get("ZVLAB_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        return 1
    return max(1, n)


@dataclass(frozen=True)
class BrownianEnsemble:
    """A lazily generated ensemble of Brownian increments.

    Attributes:
      M: number of paths
      n_t: number of time steps
      dt: step size; increments have standard deviation sqrt(dt)
      d: spatial dimension
      seed: 64-bit stream seed
      max_elements: budget for any single materialised array
    """

    M: int
    n_t: int
    dt: float
    d: int = 1
    seed: int = 42
    max_elements: int = DEFAULT_MAX_ELEMENTS

    def __post_init__(self):
        if self.M < 1 or self.n_t < 1 or self.d < 1 or self.dt <= 0.0:
            raise ValidationError("ensemble sizes and step must be positive")
        block = min(self.M, BLOCK_PATHS)
        if block * self.n_t * self.d > self.max_elements:
            raise SizingError(
                f"one increment block needs {block * self.n_t * self.d} doubles, "
                f"budget is {self.max_elements}"
            )

    @property
    def T(self) -> float:
        return self.n_t * self.dt

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_t + 1) * self.dt

    @property
    def n_blocks(self) -> int:
        return (self.M + BLOCK_PATHS - 1) // BLOCK_PATHS

    def block_bounds(self, blk: int) -> tuple[int, int]:
        i0 = blk * BLOCK_PATHS
        return i0, min(i0 + BLOCK_PATHS, self.M)

    def increments_block(self, blk: int) -> np.ndarray:
        """Increments for block `blk`, shape (paths_in_block, n_t, d)."""
        i0, i1 = self.block_bounds(blk)
        key = np.array([self.seed & 0xFFFFFFFFFFFFFFFF, blk], dtype=np.uint64)
        rg = Generator(Philox(key=key))
        out = rg.standard_normal((i1 - i0, self.n_t, self.d))
        out *= math.sqrt(self.dt)
        return out

    def regenerate_path(self, i: int) -> np.ndarray:
        """Increments of a single path, shape (n_t, d)."""
        if not 0 <= i < self.M:
            raise ValidationError(f"path index {i} out of range")
        blk = i // BLOCK_PATHS
        return self.increments_block(blk)[i - blk * BLOCK_PATHS]

    @property
    def increments(self) -> np.ndarray:
        """The full (M, n_t, d) increment array; raises if over budget."""
        total = self.M * self.n_t * self.d
        if total > self.max_elements:
            raise SizingError(
                f"materialising {total} doubles exceeds budget {self.max_elements}; "
                "use block streaming instead"
            )
        out = np.empty((self.M, self.n_t, self.d))
        for blk in range(self.n_blocks):
            i0, i1 = self.block_bounds(blk)
            out[i0:i1] = self.increments_block(blk)
        return out

    def check_budget(self, elements: int, what: str) -> None:
        if elements > self.max_elements:
            raise SizingError(
                f"{what} needs {elements} doubles, budget is {self.max_elements}"
            )

    def child(self, tag: str) -> "BrownianEnsemble":
        """An independent ensemble whose seed is derived from (seed, tag)."""
        digest = hashlib.sha256(f"{self.seed}/{tag}".encode()).digest()
        sub = int.from_bytes(digest[:8], "big") & 0x7FFFFFFFFFFFFFFF
        return BrownianEnsemble(self.M, self.n_t, self.dt, self.d, sub, self.max_elements)


def generate_brownian(M, n_t, dt, d=1, seed=42, max_elements=None) -> BrownianEnsemble:
    """Build a reproducible Brownian ensemble specification."""
    kw = {} if max_elements is None else {"max_elements": int(max_elements)}
    return BrownianEnsemble(int(M), int(n_t), float(dt), int(d), int(seed), **kw)


def map_blocks(ens: BrownianEnsemble, fn):
    """Apply ``fn(blk, i0, i1, dB)`` to every block; results in block order.

    With ZVLAB_THREADS > 1 blocks are processed concurrently, but the
    returned list is always ordered by block index, so any reduction the
    caller performs is independent of the worker count.
    """

    def run(blk):
        i0, i1 = ens.block_bounds(blk)
        return fn(blk, i0, i1, ens.increments_block(blk))

    workers = min(worker_count(), ens.n_blocks)
    if workers <= 1:
        return [run(blk) for blk in range(ens.n_blocks)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run, range(ens.n_blocks)))


def node_index(t: float, dt: float, n_t: int) -> int:
    """Grid-node index of time t; t must sit on the step grid."""
    k = int(round(t / dt))
    if not 0 <= k <= n_t or abs(k * dt - t) > 1e-9 * max(1.0, abs(t)):
        raise ValidationError(f"t={t} is not a node of the grid with dt={dt}")
    return k


@dataclass(frozen=True)
class EstimatorResult:
    """A Monte Carlo mean with its standard error and provenance."""

    mean: np.ndarray
    stderr: np.ndarray
    M: int
    seed: int
    config_fingerprint: str
    n_excluded: int = 0

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        stderr = np.atleast_1d(np.asarray(self.stderr, dtype=float))
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "stderr", stderr)
        if not np.all(np.isfinite(mean)):
            raise ValidationError("estimator mean is not finite")
        if np.any(stderr < 0) or not np.all(np.isfinite(stderr)):
            raise ValidationError("estimator stderr must be finite and nonnegative")

    @property
    def scalar(self) -> float:
        return float(self.mean[0])

    @property
    def scalar_stderr(self) -> float:
        return float(self.stderr[0])


def reduce_moments(partials, fingerprint_, seed, n_excluded=0) -> EstimatorResult:
    """Combine per-block (sum, sum_sq, count) partials into a result."""
    total = np.sum([p[0] for p in partials], axis=0)
    total_sq = np.sum([p[1] for p in partials], axis=0)
    count = int(sum(p[2] for p in partials))
    if count < 1:
        raise ValidationError("no samples to reduce")
    mean = total / count
    if count > 1:
        var = np.maximum(total_sq / count - mean**2, 0.0) * count / (count - 1)
        stderr = np.sqrt(var / count)
    else:
        stderr = np.zeros_like(mean)
    return EstimatorResult(mean, stderr, count, seed, fingerprint_, n_excluded)


def fingerprint(**kwargs) -> str:
    """Stable digest of a flat configuration mapping."""
    lines = []
    for key in sorted(kwargs):
        val = kwargs[key]
        if isinstance(val, float):
            rep = repr(val)
        elif isinstance(val, (int, str, bool)) or val is None:
            rep = str(val)
        else:
            rep = repr(val)
        lines.append(f"{key}={rep}")
    blob = "\n".join(lines).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def ks_statistic(a, b) -> float:
    """Two-sample Kolmogorov-Smirnov statistic."""
    a = np.sort(np.asarray(a, dtype=float).ravel())
    b = np.sort(np.asarray(b, dtype=float).ravel())
    grid = np.concatenate([a, b])
    grid.sort(kind="mergesort")
    cdf_a = np.searchsorted(a, grid, side="right") / a.size
    cdf_b = np.searchsorted(b, grid, side="right") / b.size
    return float(np.abs(cdf_a - cdf_b).max())


def ks_critical(m: int, n: int, alpha: float = 0.01) -> float:
    """Asymptotic two-sample KS critical value c(alpha)*sqrt((m+n)/(m*n))."""
    c = math.sqrt(-0.5 * math.log(alpha / 2.0))
    return c * math.sqrt((m + n) / (m * n))
