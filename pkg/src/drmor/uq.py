"""Monte-Carlo ensembles, probe extraction, Gaussian KDE and PDF/mse metrics."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .dynsys import TimeGrid, Trajectory

log = logging.getLogger(__name__)

__all__ = [
    "EnsembleSpec",
    "EnsembleResult",
    "KdeEstimate",
    "sample_parameters",
    "split_indices",
    "run_ensemble",
    "nearest_index",
    "silverman_bandwidth",
    "kde_estimate",
    "shared_grid",
    "kde_l1_distance",
    "ensemble_mse",
]

KDE_POINTS = 512
KDE_PAD = 4.0


@dataclass(frozen=True)
class EnsembleSpec:
    """Independent uniform parameters ``bounds[i] = (lo, hi)``; ``split = (train, test)``."""

    bounds: tuple
    count: int
    seed: int = 0
    split: Optional[tuple] = None

    def __post_init__(self):
        object.__setattr__(self, "bounds", tuple(tuple(map(float, b)) for b in self.bounds))
        for i, (lo, hi) in enumerate(self.bounds):
            if lo > hi:
                raise ValueError(f"bounds for parameter {i} are not ordered: ({lo}, {hi})")
        if self.count < 1:
            raise ValueError("count must be at least 1")
        if self.split is not None:
            if len(self.split) != 2 or min(self.split) < 0 or sum(self.split) > self.count:
                raise ValueError(f"split {self.split} does not fit {self.count} samples")

    @property
    def dim(self) -> int:
        return len(self.bounds)


def sample_parameters(spec: EnsembleSpec) -> np.ndarray:
    """Seeded uniform draws, shape ``(count, dim)``."""
    rng = np.random.default_rng(spec.seed)
    lo = np.array([b[0] for b in spec.bounds])
    hi = np.array([b[1] for b in spec.bounds])
    return lo + (hi - lo) * rng.random((spec.count, spec.dim))


def split_indices(spec: EnsembleSpec):
    """Disjoint ``(train, test)`` index arrays: the first samples train, the next ones test.

    Draws are i.i.d., so a prefix split is as random as a shuffled one.
    """
    train, test = spec.split if spec.split is not None else (spec.count, 0)
    return np.arange(train), np.arange(train, train + test)


@dataclass
class EnsembleResult:
    """Per-sample trajectories; ``failures`` maps sample index to an error message."""

    samples: np.ndarray
    trajectories: list
    failures: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float)
        if len(self.trajectories) != len(self.samples):
            raise ValueError("one trajectory slot per sample required")

    def __len__(self):
        return len(self.trajectories)

    @property
    def succeeded(self) -> np.ndarray:
        return np.array([t is not None for t in self.trajectories], dtype=bool)

    @classmethod
    def from_array(cls, samples, states, grid: TimeGrid) -> "EnsembleResult":
        """Wrap batched states ``(L, T+1, n)``."""
        return cls(samples, [Trajectory(s.T, grid) for s in np.asarray(states)])

    def stacked(self) -> np.ndarray:
        """States ``(L, T+1, n)`` with NaN rows for failed samples."""
        ref = next(t for t in self.trajectories if t is not None)
        out = np.full((len(self), ref.states.shape[1], ref.n), np.nan)
        for i, t in enumerate(self.trajectories):
            if t is not None:
                out[i] = t.states.T
        return out

    def probe(self, variable: int, time_index: int) -> np.ndarray:
        """Values of one state component at one time index (NaN for failures)."""
        return np.array([np.nan if t is None else t.states[variable, time_index]
                         for t in self.trajectories])


def run_ensemble(runner: Callable[[np.ndarray], Trajectory], samples,
                 threads: int = 1) -> EnsembleResult:
    """Evaluate ``runner`` on every sample, optionally on a thread pool.

    Results are stored by sample index, so they do not depend on the
    schedule.  Exceptions are recorded in ``failures`` rather than raised.
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=float))

    def call(i):
        try:
            return runner(samples[i]), None
        except Exception as exc:  # collected per sample
            return None, f"{type(exc).__name__}: {exc}"

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(call, range(len(samples))))
    else:
        results = [call(i) for i in range(len(samples))]
    trajs = [r[0] for r in results]
    failures = {i: r[1] for i, r in enumerate(results) if r[1] is not None}
    if failures:
        log.warning("%d of %d ensemble members failed", len(failures), len(samples))
    return EnsembleResult(samples, trajs, failures)


def nearest_index(values, target: float) -> int:
    """Index of the entry of ``values`` closest to ``target`` (first on ties)."""
    return int(np.argmin(np.abs(np.asarray(values, dtype=float) - target)))


@dataclass
class KdeEstimate:
    grid: np.ndarray
    density: np.ndarray
    bandwidth: float

    def integral(self) -> float:
        return float(np.trapezoid(self.density, self.grid))


def silverman_bandwidth(values) -> float:
    values = np.asarray(values, dtype=float).ravel()
    if values.size < 2 or np.ptp(values) == 0:
        raise ValueError("automatic bandwidth needs at least two distinct values")
    return 1.06 * float(np.std(values, ddof=1)) * values.size ** (-0.2)


def _padded_grid(lo, hi, h, points=KDE_POINTS):
    return np.linspace(lo - KDE_PAD * h, hi + KDE_PAD * h, points)


def kde_estimate(values, grid=None, bandwidth: Optional[float] = None) -> KdeEstimate:
    """Gaussian-kernel density estimate of ``values`` (non-finite entries dropped).

    The default grid has 512 points spanning the data padded by four bandwidths.
    """
    values = np.asarray(values, dtype=float).ravel()
    values = values[np.isfinite(values)]
    if values.size == 0:
        raise ValueError("kde_estimate needs at least one finite value")
    h = silverman_bandwidth(values) if bandwidth is None else float(bandwidth)
    if not h > 0:
        raise ValueError("bandwidth must be positive")
    grid = _padded_grid(values.min(), values.max(), h) if grid is None else np.asarray(grid, dtype=float)
    density = np.zeros_like(grid)
    norm = 1.0 / (values.size * h * np.sqrt(2.0 * np.pi))
    for chunk in np.array_split(values, max(1, values.size // 256)):
        z = (grid[:, None] - chunk[None, :]) / h
        density += np.exp(-0.5 * z * z).sum(axis=1)
    return KdeEstimate(grid, density * norm, h)


def shared_grid(value_sets: Sequence, points: int = KDE_POINTS) -> np.ndarray:
    """Grid covering every set padded by the widest Silverman bandwidth."""
    sets = [np.asarray(v, dtype=float).ravel() for v in value_sets]
    sets = [v[np.isfinite(v)] for v in sets]
    h = max(silverman_bandwidth(v) for v in sets)
    lo = min(v.min() for v in sets)
    hi = max(v.max() for v in sets)
    return _padded_grid(lo, hi, h, points)


def kde_l1_distance(a: KdeEstimate, b: KdeEstimate) -> float:
    """``int |p_a - p_b| dx`` by the trapezoid rule on the shared grid."""
    if a.grid.shape != b.grid.shape or not np.array_equal(a.grid, b.grid):
        raise ValueError("KDE estimates live on different grids")
    return float(np.trapezoid(np.abs(a.density - b.density), a.grid))


def ensemble_mse(pred: EnsembleResult, ref: EnsembleResult,
                 lift: Optional[Callable[[np.ndarray], np.ndarray]] = None) -> float:
    """Trajectory mse over samples that succeeded in both ensembles.

    Squared errors are summed over components and time steps after the
    initial one, then averaged over samples.  ``lift`` maps reduced states
    ``(T+1, r)`` to full states before comparison.
    """
    if len(pred) != len(ref):
        raise ValueError(f"ensembles differ in size: {len(pred)} vs {len(ref)}")
    both = np.flatnonzero(pred.succeeded & ref.succeeded)
    if both.size == 0:
        raise ValueError("no sample succeeded in both ensembles")
    total = 0.0
    for i in both:
        p = pred.trajectories[i].states.T
        if lift is not None:
            p = lift(p)
        q = ref.trajectories[i].states.T
        if p.shape != q.shape:
            raise ValueError(f"sample {i}: shapes {p.shape} and {q.shape} differ")
        d = p[1:] - q[1:]
        total += float(np.sum(d * d))
    return total / both.size
