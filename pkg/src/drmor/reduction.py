"""Snapshot POD, Galerkin projection and DEIM hyper-reduction.

Reduced systems keep the structured nonlinearity ``C f(E y)`` of the full
model: Galerkin projection replaces ``C`` by ``U_r^T C`` and ``E`` by
``E U_r``; DEIM additionally replaces ``f`` by its interpolant at ``m``
sampled rows, so ``f`` is only ever evaluated at ``m`` points.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .dynsys import DimensionError, FomSystem, Pointwise, Trajectory

__all__ = [
    "SnapshotMatrix",
    "PodBasis",
    "DeimOperator",
    "RomSystem",
    "DeimError",
    "assemble_snapshots",
    "compute_pod_basis",
    "galerkin_project",
    "deim_select",
    "build_deim_operator",
    "build_pod_deim_rom",
]

COND_WARN = 1e8


class DeimError(np.linalg.LinAlgError):
    """DEIM selection or interpolation hit a singular system."""


@dataclass
class SnapshotMatrix:
    """Snapshots as columns; ``labels[j] = (run, time_index)``."""

    data: np.ndarray
    labels: Optional[list] = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if self.data.ndim != 2:
            raise DimensionError("snapshot data must be 2-D")
        if self.labels is not None and len(self.labels) != self.data.shape[1]:
            raise DimensionError("one label per column required")

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]


@dataclass
class PodBasis:
    basis: np.ndarray
    singular_values: np.ndarray

    @property
    def r(self) -> int:
        return self.basis.shape[1]

    @property
    def n(self) -> int:
        return self.basis.shape[0]

    def truncate(self, r: int) -> "PodBasis":
        """Nested basis made of the leading ``r`` modes."""
        if not 1 <= r <= self.r:
            raise ValueError(f"rank {r} outside 1..{self.r}")
        return PodBasis(self.basis[:, :r].copy(), self.singular_values)


@dataclass
class DeimOperator:
    indices: np.ndarray
    nonlinearity_basis: np.ndarray
    deim_matrix: np.ndarray
    sampling_rows_of_Ur: np.ndarray
    condition: float

    @property
    def m(self) -> int:
        return self.indices.shape[0]

    def approximate(self, F) -> np.ndarray:
        """DEIM reconstruction ``D P^T F`` of full vectors (rows)."""
        F = np.asarray(F, dtype=float)
        return F[..., self.indices] @ self.deim_matrix.T


@dataclass(frozen=True, eq=False)
class RomSystem(FomSystem):
    """Reduced system in POD coordinates; ``basis`` maps coefficients to full states."""

    basis: Optional[np.ndarray] = None
    deim: Optional[DeimOperator] = None

    def lift(self, coeffs) -> np.ndarray:
        return np.asarray(coeffs, dtype=float) @ self.basis.T

    def project(self, y) -> np.ndarray:
        return np.asarray(y, dtype=float) @ self.basis


def assemble_snapshots(trajectories: Sequence[Trajectory],
                       map: Optional[Callable[[np.ndarray], np.ndarray]] = None) -> SnapshotMatrix:
    """Concatenate all states of all runs (initial states included) as columns.

    With ``map`` the columns are ``map(state)`` instead, e.g. nonlinearity snapshots.
    """
    if len(trajectories) == 0:
        raise ValueError("no trajectories given")
    n = trajectories[0].n
    blocks, labels = [], []
    for run, traj in enumerate(trajectories):
        if traj.n != n:
            raise DimensionError(f"trajectory {run} has dimension {traj.n}, expected {n}")
        X = traj.states
        if map is not None:
            X = np.asarray(map(X.T), dtype=float).T
        blocks.append(X)
        labels.extend((run, j) for j in range(X.shape[1]))
    return SnapshotMatrix(np.hstack(blocks), labels)


def compute_pod_basis(X, r: int) -> PodBasis:
    """Leading ``r`` left singular vectors of the snapshot matrix (economy SVD)."""
    data = X.data if isinstance(X, SnapshotMatrix) else np.asarray(X, dtype=float)
    kmax = min(data.shape)
    if not 1 <= r <= kmax:
        raise ValueError(f"rank {r} outside 1..{kmax}")
    U, s, _ = np.linalg.svd(data, full_matrices=False)
    return PodBasis(U[:, :r].copy(), s)


def _project_pointwise(pw: Pointwise, basis: np.ndarray, left: np.ndarray) -> Pointwise:
    """Pointwise nonlinearity seen through ``y = U_r c`` and projected by ``left^T``."""
    C = left.T if pw.coupling is None else left.T @ pw.coupling
    E = basis if pw.sampler is None else pw.sampler @ basis
    return Pointwise(pw.fn, pw.deriv, coupling=C, sampler=E)


def _reduce_linear(system: FomSystem, U: np.ndarray):
    A = U.T @ system.linear_op @ U
    b = None if system.forcing is None else system.forcing @ U
    return A, b


def galerkin_project(system: FomSystem, basis: PodBasis) -> RomSystem:
    """Galerkin ROM ``dc/dt = U^T A U c + U^T F(U c) + U^T b``."""
    U = basis.basis
    if U.shape[0] != system.n:
        raise DimensionError(f"basis has {U.shape[0]} rows, system dimension is {system.n}")
    A, b = _reduce_linear(system, U)
    fn = jac = pw = None
    if system.pointwise is not None:
        pw = _project_pointwise(system.pointwise, U, U)
    elif system.nonlinear_fn is not None:
        def fn(c):
            return system.nonlinear(c @ U.T) @ U

        def jac(c):
            return U.T @ system.nonlinear_jac(c @ U.T) @ U
    return RomSystem(A, fn, jac, b, dict(system.params), pw, None, basis=U)


def deim_select(V) -> np.ndarray:
    """Greedy DEIM interpolation indices for the columns of ``V`` (n, m).

    ``np.argmax`` returns the first maximiser, so ties go to the lowest index.
    """
    V = np.asarray(V, dtype=float)
    if V.ndim != 2 or V.shape[1] > V.shape[0]:
        raise DimensionError(f"need an n x m basis with m <= n, got {V.shape}")
    m = V.shape[1]
    idx = [int(np.argmax(np.abs(V[:, 0])))]
    if V[idx[0], 0] == 0.0:
        raise DeimError("column 0 of the nonlinearity basis is zero")
    for l in range(1, m):
        P_V = V[idx, :l]
        try:
            if np.linalg.cond(P_V) > 1.0 / np.finfo(float).eps:
                raise np.linalg.LinAlgError("ill-conditioned")
            c = np.linalg.solve(P_V, V[idx, l])
        except np.linalg.LinAlgError as exc:
            raise DeimError(f"singular interpolation system at column {l}") from exc
        rho = V[:, l] - V[:, :l] @ c
        j = int(np.argmax(np.abs(rho)))
        if np.abs(rho[j]) <= 1e-14 * max(1.0, np.abs(V[:, l]).max()):
            raise DeimError(f"column {l} is linearly dependent on the previous columns")
        idx.append(j)
    return np.asarray(idx, dtype=int)


def build_deim_operator(V_m, indices, basis: PodBasis) -> DeimOperator:
    """``D = V_m (P^T V_m)^{-1}`` and the sampled rows ``P^T U_r``."""
    V_m = np.asarray(V_m, dtype=float)
    indices = np.asarray(indices, dtype=int)
    n, m = V_m.shape
    if indices.shape != (m,):
        raise DimensionError(f"need {m} indices, got {indices.shape[0]}")
    if len(np.unique(indices)) != m or indices.min() < 0 or indices.max() >= n:
        raise ValueError("indices must be distinct and lie in [0, n)")
    if basis.n != n:
        raise DimensionError("basis and nonlinearity basis differ in row count")
    PV = V_m[indices]
    cond = float(np.linalg.cond(PV))
    if not np.isfinite(cond) or cond > 1.0 / np.finfo(float).eps:
        raise DeimError(f"P^T V_m is singular (condition number {cond:.3e})")
    if cond > COND_WARN:
        warnings.warn(f"P^T V_m is ill-conditioned (condition number {cond:.3e})",
                      RuntimeWarning, stacklevel=2)
    # D = V_m (P^T V_m)^{-1}, via a solve on the transpose
    D = np.linalg.solve(PV.T, V_m.T).T
    return DeimOperator(indices, V_m, D, basis.basis[indices].copy(), cond)


def build_pod_deim_rom(system: FomSystem, basis: PodBasis, deim: DeimOperator) -> RomSystem:
    """POD-DEIM ROM: ``F(U c) ~ U^T C D f(P^T E U c)``.

    Requires the full system's nonlinearity in pointwise form ``C f(E y)``;
    ``f`` is evaluated at the ``m`` interpolation points only.
    """
    pw = system.pointwise
    if pw is None:
        raise ValueError("POD-DEIM needs a pointwise nonlinearity C f(E y)")
    U = basis.basis
    if U.shape[0] != system.n:
        raise DimensionError(f"basis has {U.shape[0]} rows, system dimension is {system.n}")
    E = U if pw.sampler is None else pw.sampler @ U
    if deim.deim_matrix.shape[0] != E.shape[0]:
        raise DimensionError("DEIM operator does not match the nonlinearity dimension")
    CD = deim.deim_matrix if pw.coupling is None else pw.coupling @ deim.deim_matrix
    red = Pointwise(pw.fn, pw.deriv, coupling=U.T @ CD, sampler=E[deim.indices])
    A, b = _reduce_linear(system, U)
    return RomSystem(A, None, None, b, dict(system.params), red, None, basis=U, deim=deim)
