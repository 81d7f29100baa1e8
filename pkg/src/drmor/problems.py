"""The five benchmark systems: a 3-state nonlinear ODE, 1-D heat diffusion and
1-D two-phase (water/oil) flow in porous media."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .dynsys import (
    FomSystem,
    IntegrationError,
    NewtonConfig,
    NewtonError,
    Pointwise,
    TimeGrid,
    Trajectory,
    newton_step_solve,
    von_neumann_dt_bound,
)

# --------------------------------------------------------------------------
# Problems 1-3: y1' = y1 y3, y2' = -y2 y3, y3' = -y1^2 + y2^2

STOCHASTIC_DIM = {"P1": 1, "P2": 2, "P3": 3}


@dataclass(frozen=True)
class OdeFamilySpec:
    variant: str
    inputs: tuple

    def __post_init__(self):
        if self.variant not in STOCHASTIC_DIM:
            raise ValueError(f"unknown variant {self.variant!r}; expected P1, P2 or P3")
        object.__setattr__(self, "inputs", tuple(float(x) for x in np.atleast_1d(self.inputs)))
        if len(self.inputs) != STOCHASTIC_DIM[self.variant]:
            raise ValueError(
                f"{self.variant} takes {STOCHASTIC_DIM[self.variant]} inputs, got {len(self.inputs)}")


def ode3_rhs(y):
    y1, y2, y3 = y[..., 0], y[..., 1], y[..., 2]
    return np.stack([y1 * y3, -y2 * y3, -y1 ** 2 + y2 ** 2], axis=-1)


def ode3_jacobian(y):
    y1, y2, y3 = y[..., 0], y[..., 1], y[..., 2]
    z = np.zeros_like(y1)
    return np.stack([
        np.stack([y3, z, y1], axis=-1),
        np.stack([z, -y3, -y2], axis=-1),
        np.stack([-2 * y1, 2 * y2, z], axis=-1),
    ], axis=-2)


ODE3_SYSTEM = FomSystem(np.zeros((3, 3)), nonlinear_fn=ode3_rhs, nonlinear_jacobian=ode3_jacobian)


def ode3_initial_state(variant: str, inputs) -> np.ndarray:
    """Initial states for one or many input draws (``inputs`` shape ``(..., d)``)."""
    x = np.asarray(inputs, dtype=float)
    if x.ndim == 0 or x.shape[-1] != STOCHASTIC_DIM[variant]:
        x = x[..., None]
    ones = np.ones(x.shape[:-1])
    if variant == "P1":
        return np.stack([ones, 0.1 * x[..., 0], 0 * ones], axis=-1)
    if variant == "P2":
        return np.stack([ones, 0.1 * x[..., 0], x[..., 1]], axis=-1)
    if variant == "P3":
        return x.copy()
    raise ValueError(f"unknown variant {variant!r}")


def build_problem123(spec: OdeFamilySpec):
    """Return ``(system, y0)`` for one member of the Problem 1-3 family."""
    y0 = ode3_initial_state(spec.variant, spec.inputs)
    system = FomSystem(ODE3_SYSTEM.linear_op, ode3_rhs, ode3_jacobian,
                       params={"variant": spec.variant, "inputs": spec.inputs})
    return system, y0


# --------------------------------------------------------------------------
# Problem 4: heat diffusion with a box source


@dataclass(frozen=True)
class HeatProblemSpec:
    alpha: float = 0.045
    dx: float = 0.01
    source_support: tuple = (0.4, 0.6)
    source_amplitude: float = 1.0

    @property
    def n(self) -> int:
        cells = round(1.0 / self.dx)
        if abs(cells * self.dx - 1.0) > 1e-12:
            raise ValueError(f"dx={self.dx} does not divide [0, 1] evenly")
        return cells - 1

    @property
    def nodes(self) -> np.ndarray:
        return self.dx * np.arange(1, self.n + 1)


def laplacian_1d(n: int, dx: float) -> np.ndarray:
    """Second-order central-difference Laplacian with homogeneous Dirichlet ends."""
    L = -2.0 * np.eye(n) + np.eye(n, k=1) + np.eye(n, k=-1)
    return L / dx ** 2


def heat_source(spec: HeatProblemSpec) -> np.ndarray:
    x = spec.nodes
    lo, hi = spec.source_support
    inside = (x >= lo - 1e-12) & (x <= hi + 1e-12)
    return np.where(inside, spec.source_amplitude, 0.0)


def build_heat_fom(spec: HeatProblemSpec):
    """Return ``(system, y0)`` for ``dy/dt = alpha y_xx + g`` on the interior nodes."""
    A = spec.alpha * laplacian_1d(spec.n, spec.dx)
    system = FomSystem(A, forcing=heat_source(spec), params={"alpha": spec.alpha})
    return system, np.zeros(spec.n)


# --------------------------------------------------------------------------
# Problem 5: sequential implicit two-phase flow


@dataclass(frozen=True)
class TwoPhaseSpec:
    """Inputs of the 1-D water-flooding problem.

    ``corey`` selects the effective-saturation map: ``"normalized"`` uses
    ``(s - s_ow) / (1 - s_or - s_ow)``; ``"verbatim"`` uses ``s - s_or - s_ow``
    clipped to ``[0, 1]``.
    """

    n_cells: int = 64
    porosity: float = 0.2
    permeability: Optional[tuple] = None
    mu_w: float = 0.1
    mu_o: float = 1.0
    s_or: float = 0.2
    s_ow: float = 0.2
    q_inj: float = 0.1
    q_prod: float = -0.1
    rho_w: float = 1.0
    rho_o: float = 1.0
    corey: str = "normalized"

    def __post_init__(self):
        if self.corey not in ("normalized", "verbatim"):
            raise ValueError(f"unknown corey mode {self.corey!r}")
        if self.permeability is not None:
            k = tuple(float(v) for v in self.permeability)
            if len(k) != self.n_cells:
                raise ValueError(f"permeability has {len(k)} values, expected {self.n_cells}")
            object.__setattr__(self, "permeability", k)

    @property
    def dx(self) -> float:
        return 1.0 / self.n_cells

    @property
    def perm(self) -> np.ndarray:
        if self.permeability is None:
            return np.ones(self.n_cells)
        return np.asarray(self.permeability)

    @property
    def s_bounds(self) -> tuple:
        return (self.s_ow, 1.0 - self.s_or)

    @property
    def initial_saturation(self) -> np.ndarray:
        return np.full(self.n_cells, self.s_ow)

    def sources(self) -> np.ndarray:
        """Volumetric well rates per cell (injector first cell, producer last)."""
        q = np.zeros(self.n_cells)
        q[0] += self.q_inj / self.rho_w
        q[-1] += self.q_prod / self.rho_o
        return q


def _effective_saturation(s, spec: TwoPhaseSpec):
    """Return ``(s*, ds*/ds)``; the derivative is zero where ``s*`` is clipped."""
    s = np.asarray(s, dtype=float)
    if spec.corey == "normalized":
        lo, hi = spec.s_bounds
        scale = 1.0 / (hi - lo)
        raw = (s - lo) * scale
    else:
        scale = 1.0
        raw = s - spec.s_or - spec.s_ow
    star = np.clip(raw, 0.0, 1.0)
    dstar = np.where((raw >= 0.0) & (raw <= 1.0), scale, 0.0)
    return star, dstar


def brooks_corey(s, spec: TwoPhaseSpec):
    """Relative permeabilities ``(k_rw, k_ro) = (s*^2, (1 - s*)^2)``."""
    star, _ = _effective_saturation(s, spec)
    return star ** 2, (1.0 - star) ** 2


def mobilities(s, spec: TwoPhaseSpec):
    krw, kro = brooks_corey(s, spec)
    return krw / spec.mu_w, kro / spec.mu_o


def fractional_flow(s, spec: TwoPhaseSpec):
    """Water fractional flow ``f = lw / (lw + lo)`` and ``df/ds``."""
    star, dstar = _effective_saturation(s, spec)
    lw = star ** 2 / spec.mu_w
    lo = (1.0 - star) ** 2 / spec.mu_o
    dlw = 2.0 * star / spec.mu_w
    dlo = -2.0 * (1.0 - star) / spec.mu_o
    tot = lw + lo
    f = lw / tot
    df = (dlw * lo - lw * dlo) / tot ** 2 * dstar
    return f, df


@dataclass
class PressureField:
    pressure: np.ndarray
    velocity: np.ndarray


def solve_pressure(s, spec: TwoPhaseSpec) -> PressureField:
    """Finite-volume solve of ``d/dx(lambda K dp/dx) + q = 0`` with no-flow ends.

    Interface transmissibilities use the harmonic mean of ``lambda K``; the
    last cell's pressure is pinned to zero.  Edge velocities are Darcy fluxes
    ``-lambda K dp/dx`` (zero on the two boundary edges).
    """
    s = np.asarray(s, dtype=float)
    n = spec.n_cells
    if s.shape != (n,):
        raise ValueError(f"saturation has shape {s.shape}, expected ({n},)")
    lw, lo = mobilities(s, spec)
    lk = (lw + lo) * spec.perm
    if np.any(lk <= 0):
        raise np.linalg.LinAlgError("zero total mobility in some cell; pressure system is singular")
    dx = spec.dx
    trans = 2.0 * lk[:-1] * lk[1:] / (lk[:-1] + lk[1:]) / dx  # interior faces 1..n-1
    M = np.zeros((n, n))
    i = np.arange(n - 1)
    # outflow through face between i and i+1 is trans*(p_i - p_{i+1})
    M[i, i] += trans
    M[i, i + 1] -= trans
    M[i + 1, i + 1] += trans
    M[i + 1, i] -= trans
    rhs = spec.sources().copy()
    M[-1, :] = 0.0
    M[-1, -1] = 1.0
    rhs[-1] = 0.0
    p = np.linalg.solve(M, rhs)
    v = np.zeros(n + 1)
    v[1:-1] = -trans * (p[1:] - p[:-1])
    return PressureField(p, v)


def upwind_operator(velocity, spec: TwoPhaseSpec) -> np.ndarray:
    """Matrix ``A`` with ``(A f)_i`` = net upwind water inflow into cell ``i``
    divided by ``phi dx``; producer wells withdraw ``|q| f`` from their cell."""
    v = np.asarray(velocity, dtype=float)
    n = spec.n_cells
    A = np.zeros((n, n))
    for face in range(1, n):
        left, right = face - 1, face
        vf = v[face]
        up = left if vf >= 0 else right
        A[right, up] += vf
        A[left, up] -= vf
    q = spec.sources()
    for cell in np.flatnonzero(q < 0):
        A[cell, cell] += q[cell]
    return A / (spec.porosity * spec.dx)


def saturation_forcing(spec: TwoPhaseSpec) -> np.ndarray:
    q = spec.sources()
    return np.where(q > 0, q, 0.0) / (spec.porosity * spec.dx)


class _FlowFunctions:
    """Componentwise fractional flow bound to one fluid description."""

    def __init__(self, spec: TwoPhaseSpec):
        self.spec = spec

    def fn(self, s):
        return fractional_flow(s, self.spec)[0]

    def deriv(self, s):
        return fractional_flow(s, self.spec)[1]


_FLOW_CACHE: dict = {}


def flow_functions(spec: TwoPhaseSpec) -> _FlowFunctions:
    """Shared callables for a fluid description, so systems built from the
    same fluids can be stacked."""
    key = (spec.mu_w, spec.mu_o, spec.s_or, spec.s_ow, spec.corey)
    if key not in _FLOW_CACHE:
        _FLOW_CACHE[key] = _FlowFunctions(spec)
    return _FLOW_CACHE[key]


def build_saturation_fom(vel: PressureField, spec: TwoPhaseSpec) -> FomSystem:
    """``ds/dt = A f(s) + b`` with upwind ``A`` for a frozen velocity field."""
    ff = flow_functions(spec)
    A = upwind_operator(vel.velocity, spec)
    n = spec.n_cells
    return FomSystem(
        np.zeros((n, n)),
        forcing=saturation_forcing(spec),
        pointwise=Pointwise(ff.fn, ff.deriv, coupling=A),
        params={"porosity": spec.porosity},
        bounds=spec.s_bounds,
    )


def sequential_implicit_run(spec: TwoPhaseSpec, grid: TimeGrid,
                            cfg: NewtonConfig = NewtonConfig(),
                            pressure_update_every: int = 5,
                            s0=None) -> Trajectory:
    """Alternate pressure solves with implicit-Euler saturation steps."""
    if pressure_update_every < 1:
        raise ValueError("pressure_update_every must be at least 1")
    s = spec.initial_saturation if s0 is None else np.asarray(s0, dtype=float)
    states = np.empty((spec.n_cells, grid.steps + 1))
    states[:, 0] = s
    system = None
    for t in range(grid.steps):
        try:
            if t % pressure_update_every == 0:
                system = build_saturation_fom(solve_pressure(s, spec), spec)
            s, _ = newton_step_solve(system, s, grid.dt, cfg)
        except (NewtonError, np.linalg.LinAlgError) as exc:
            raise IntegrationError(f"step {t + 1}: {exc}", t + 1, exc) from exc
        states[:, t + 1] = s
    return Trajectory(states, grid)


def stability_bound(spec: TwoPhaseSpec, velocity=None, samples: int = 10_000) -> float:
    """Explicit-scheme time-step bound for the given (default: initial) velocity."""
    if velocity is None:
        velocity = solve_pressure(spec.initial_saturation, spec).velocity
    return von_neumann_dt_bound(
        spec.porosity, spec.dx, velocity,
        lambda s: fractional_flow(s, spec)[1], spec.s_bounds, samples)


def load_permeability_csv(path, column: int = 0) -> tuple:
    data = np.loadtxt(path, delimiter=",", ndmin=2, comments="#")
    return tuple(data[:, column])


