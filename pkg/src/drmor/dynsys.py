"""Semi-linear dynamical systems, implicit-Euler residuals and Newton stepping.

Every system has the form ``dy/dt = A y + F(y) + b``.  States are rows: a
single state has shape ``(n,)`` and a batch of states has shape ``(B, n)``.
A system may itself be *stacked* over a batch (``linear_op`` of shape
``(B, n, n)``), which is how per-sample parameters travel through the
vectorised DR-RNN code.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "NewtonError",
    "IntegrationError",
    "Pointwise",
    "FomSystem",
    "TimeGrid",
    "Trajectory",
    "NewtonConfig",
    "SolveStats",
    "eval_rhs",
    "assemble_residual",
    "residual_jacobian",
    "newton_step_solve",
    "integrate_implicit_euler",
    "integrate_implicit_euler_batch",
    "von_neumann_dt_bound",
    "stack_systems",
]


class DimensionError(ValueError):
    """A state or operator does not have the dimension the system expects."""


class NewtonError(RuntimeError):
    """Newton iteration failed; carries the last iterate and statistics."""

    def __init__(self, message, last_iterate=None, stats=None):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.stats = stats


class IntegrationError(RuntimeError):
    """Time integration aborted at ``step`` (index of the state being computed)."""

    def __init__(self, message, step, cause=None):
        super().__init__(message)
        self.step = step
        self.cause = cause


def _matvec(mat, y):
    """``mat @ y`` for row states, with an optional leading batch on ``mat``."""
    if mat.ndim == 2:
        return y @ mat.T
    return np.einsum("bij,bj->bi", mat, y)


def _rmatvec(mat, v):
    """``mat.T @ v`` for row vectors, with an optional leading batch on ``mat``."""
    if mat.ndim == 2:
        return v @ mat
    return np.einsum("bij,bi->bj", mat, v)


@dataclass(frozen=True, eq=False)
class Pointwise:
    """Nonlinearity of the form ``F(y) = C f(E y)`` with ``f`` acting componentwise.

    ``coupling`` (C) and ``sampler`` (E) default to the identity.  This is the
    structure DEIM exploits: ``f`` only ever needs the sampled components.
    ``coupling`` may carry a leading batch axis.
    """

    fn: Callable[[np.ndarray], np.ndarray]
    deriv: Callable[[np.ndarray], np.ndarray]
    coupling: Optional[np.ndarray] = None
    sampler: Optional[np.ndarray] = None

    def inner(self, y):
        return y if self.sampler is None else y @ self.sampler.T

    def __call__(self, y):
        fv = self.fn(self.inner(y))
        return fv if self.coupling is None else _matvec(self.coupling, fv)

    def jacobian(self, y):
        z = self.inner(y)
        d = self.deriv(z)
        # C diag(d) E
        if self.coupling is None:
            left = np.eye(d.shape[-1]) * d[..., None, :]
        else:
            left = self.coupling * d[..., None, :]
        if self.sampler is None:
            return left
        return left @ self.sampler

    def vjp(self, y, v):
        """``J_F(y)^T v`` without forming the Jacobian."""
        z = self.inner(y)
        d = self.deriv(z)
        u = v if self.coupling is None else _rmatvec(self.coupling, v)
        u = u * d
        return u if self.sampler is None else u @ self.sampler


@dataclass(frozen=True, eq=False)
class FomSystem:
    """A semi-linear system ``dy/dt = A y + F(y) + b``.

    Parameters
    ----------
    linear_op : ndarray
        ``A``, shape ``(n, n)`` or stacked ``(B, n, n)``.
    nonlinear_fn, nonlinear_jacobian : callable, optional
        ``F`` and ``J_F`` acting on ``(..., n)`` arrays.  Ignored when
        ``pointwise`` is given.  ``None`` means ``F = 0``.
    forcing : ndarray, optional
        Constant source ``b``, shape ``(n,)`` or ``(B, n)``.
    params : mapping
        Physical parameter values the system was built from.
    pointwise : Pointwise, optional
        Structured nonlinearity ``C f(E y)``.
    bounds : (lo, hi), optional
        Box that Newton iterates are clipped to.
    """

    linear_op: np.ndarray
    nonlinear_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None
    nonlinear_jacobian: Optional[Callable[[np.ndarray], np.ndarray]] = None
    forcing: Optional[np.ndarray] = None
    params: Mapping = field(default_factory=dict)
    pointwise: Optional[Pointwise] = None
    bounds: Optional[tuple] = None

    def __post_init__(self):
        A = np.asarray(self.linear_op, dtype=float)
        object.__setattr__(self, "linear_op", A)
        if A.ndim not in (2, 3) or A.shape[-1] != A.shape[-2]:
            raise DimensionError(f"linear_op must be square, got shape {A.shape}")
        if self.forcing is not None:
            b = np.asarray(self.forcing, dtype=float)
            if b.shape[-1] != A.shape[-1]:
                raise DimensionError(
                    f"forcing has length {b.shape[-1]}, expected {A.shape[-1]}")
            object.__setattr__(self, "forcing", b)

    @property
    def n(self) -> int:
        return self.linear_op.shape[-1]

    @property
    def batch(self) -> Optional[int]:
        """Leading batch size for stacked systems, else ``None``."""
        if self.linear_op.ndim == 3:
            return self.linear_op.shape[0]
        if self.forcing is not None and self.forcing.ndim == 2:
            return self.forcing.shape[0]
        pw = self.pointwise
        if pw is not None and pw.coupling is not None and pw.coupling.ndim == 3:
            return pw.coupling.shape[0]
        return None

    @property
    def has_nonlinearity(self) -> bool:
        return self.pointwise is not None or self.nonlinear_fn is not None

    def check_state(self, y):
        y = np.asarray(y, dtype=float)
        if y.shape[-1] != self.n:
            raise DimensionError(f"state has length {y.shape[-1]}, expected {self.n}")
        return y

    def nonlinear(self, y):
        if self.pointwise is not None:
            return self.pointwise(y)
        if self.nonlinear_fn is None:
            return np.zeros_like(y)
        out = np.asarray(self.nonlinear_fn(y), dtype=float)
        if out.shape[-1] != self.n:
            raise DimensionError(f"nonlinear_fn returned length {out.shape[-1]}, expected {self.n}")
        return out

    def nonlinear_jac(self, y):
        if self.pointwise is not None:
            return self.pointwise.jacobian(y)
        if self.nonlinear_jacobian is None:
            return np.zeros(y.shape + (self.n,))
        return np.asarray(self.nonlinear_jacobian(y), dtype=float)

    def nonlinear_vjp(self, y, v):
        """``J_F(y)^T v`` for row-stacked ``y`` and ``v``."""
        if self.pointwise is not None:
            return self.pointwise.vjp(y, v)
        if self.nonlinear_fn is None:
            return np.zeros_like(v)
        J = self.nonlinear_jac(y)
        return np.einsum("...ij,...i->...j", J, v)

    def rhs(self, y):
        out = _matvec(self.linear_op, y) + self.nonlinear(y)
        if self.forcing is not None:
            out = out + self.forcing
        return out

    def residual(self, y_next, y_prev, dt):
        return y_next - y_prev - dt * self.rhs(y_next)

    def residual_jac(self, y_next, dt):
        J = self.linear_op + self.nonlinear_jac(y_next)
        return np.eye(self.n) - dt * J

    def residual_vjp(self, y_next, v, dt):
        """``(I - dt A - dt J_F(y_next))^T v``."""
        return v - dt * (_rmatvec(self.linear_op, v) + self.nonlinear_vjp(y_next, v))

    def clip(self, y):
        if self.bounds is None:
            return y
        return np.clip(y, self.bounds[0], self.bounds[1])


def stack_systems(systems: Sequence[FomSystem]) -> FomSystem:
    """Stack per-sample systems that share their nonlinearity callables.

    Linear operators, forcings and pointwise couplings are stacked along a new
    leading axis; the result evaluates all members at once on ``(B, n)`` states.
    """
    first = systems[0]
    for s in systems:
        if s.batch is not None:
            raise ValueError("cannot stack already-stacked systems")
        if s.n != first.n:
            raise DimensionError("systems differ in dimension")
        if s.nonlinear_fn != first.nonlinear_fn:
            raise ValueError("systems must share nonlinear_fn to be stacked")
        if (s.pointwise is None) != (first.pointwise is None):
            raise ValueError("systems mix pointwise and general nonlinearities")
    A = np.stack([s.linear_op for s in systems])
    b = None
    if any(s.forcing is not None for s in systems):
        b = np.stack([s.forcing if s.forcing is not None else np.zeros(s.n) for s in systems])
    pw = None
    if first.pointwise is not None:
        p0 = first.pointwise
        for s in systems:
            p = s.pointwise
            if p.fn != p0.fn or p.deriv != p0.deriv:
                raise ValueError("pointwise nonlinearities differ between systems")
            if (p.sampler is None) != (p0.sampler is None) or (
                    p.sampler is not None and not np.array_equal(p.sampler, p0.sampler)):
                raise ValueError("pointwise samplers differ between systems")
        C = None
        if p0.coupling is not None:
            C = np.stack([s.pointwise.coupling for s in systems])
        pw = Pointwise(p0.fn, p0.deriv, coupling=C, sampler=p0.sampler)
    return FomSystem(
        linear_op=A,
        nonlinear_fn=first.nonlinear_fn,
        nonlinear_jacobian=first.nonlinear_jacobian,
        forcing=b,
        params={"stacked": [s.params for s in systems]},
        pointwise=pw,
        bounds=first.bounds,
    )


@dataclass(frozen=True)
class TimeGrid:
    dt: float
    steps: int
    t0: float = 0.0

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.steps < 0:
            raise ValueError(f"steps must be non-negative, got {self.steps}")

    @property
    def times(self):
        return self.t0 + self.dt * np.arange(self.steps + 1)


@dataclass
class Trajectory:
    """Snapshots as columns: ``states[:, j]`` is the state at time index ``j``."""

    states: np.ndarray
    grid: TimeGrid

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        if self.states.ndim != 2 or self.states.shape[1] != self.grid.steps + 1:
            raise DimensionError(
                f"trajectory has shape {self.states.shape}, expected (n, {self.grid.steps + 1})")

    @property
    def n(self):
        return self.states.shape[0]

    @property
    def initial(self):
        return self.states[:, 0]

    @property
    def final(self):
        return self.states[:, -1]


@dataclass(frozen=True)
class NewtonConfig:
    tol: float = 1e-9
    max_iters: int = 50
    damping: float = 1.0
    line_search: bool = True
    max_halvings: int = 30

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")


@dataclass(frozen=True)
class SolveStats:
    iterations: int
    final_residual_norm: float


def eval_rhs(system: FomSystem, y) -> np.ndarray:
    """Return ``A y + F(y) + b``."""
    return system.rhs(system.check_state(y))


def assemble_residual(system: FomSystem, y_next, y_prev, dt: float) -> np.ndarray:
    """Implicit-Euler residual ``y_next - y_prev - dt (A y_next + F(y_next) + b)``."""
    y_next = system.check_state(y_next)
    y_prev = system.check_state(y_prev)
    if y_next.shape != y_prev.shape:
        raise DimensionError(f"state shapes differ: {y_next.shape} vs {y_prev.shape}")
    return system.residual(y_next, y_prev, dt)


def residual_jacobian(system: FomSystem, y_next, dt: float) -> np.ndarray:
    """``I - dt A - dt J_F(y_next)``."""
    return system.residual_jac(system.check_state(y_next), dt)


def newton_step_solve(system: FomSystem, y_prev, dt: float,
                      cfg: NewtonConfig = NewtonConfig()):
    """Solve one implicit-Euler step by Newton's method, starting from ``y_prev``.

    With ``cfg.line_search`` the Newton step is halved until the residual norm
    decreases.  Returns ``(y_next, SolveStats)``.  Raises :class:`NewtonError` when the
    residual 2-norm does not reach ``cfg.tol`` within ``cfg.max_iters``
    iterations or the Jacobian is singular.
    """
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    y_prev = system.check_state(y_prev)
    if y_prev.ndim != 1:
        raise DimensionError("newton_step_solve works on a single state")
    y = system.clip(y_prev.copy())
    r = system.residual(y, y_prev, dt)
    norm = float(np.linalg.norm(r))
    it = 0
    while norm > cfg.tol:
        if it >= cfg.max_iters:
            raise NewtonError(
                f"Newton did not converge in {cfg.max_iters} iterations "
                f"(residual {norm:.3e})", y, SolveStats(it, norm))
        J = system.residual_jac(y, dt)
        try:
            delta = np.linalg.solve(J, r)
        except np.linalg.LinAlgError as exc:
            raise NewtonError(f"singular Newton system at iteration {it}: {exc}",
                              y, SolveStats(it, norm)) from exc
        step = cfg.damping
        trial = system.clip(y - step * delta)
        r_trial = system.residual(trial, y_prev, dt)
        n_trial = float(np.linalg.norm(r_trial))
        if cfg.line_search:
            # backtrack until the residual norm decreases
            halvings = 0
            while not n_trial < norm and halvings < cfg.max_halvings:
                step *= 0.5
                halvings += 1
                trial = system.clip(y - step * delta)
                r_trial = system.residual(trial, y_prev, dt)
                n_trial = float(np.linalg.norm(r_trial))
        y, r, norm = trial, r_trial, n_trial
        it += 1
        if not np.isfinite(norm):
            raise NewtonError("non-finite residual", y, SolveStats(it, norm))
    return y, SolveStats(it, norm)


def integrate_implicit_euler(system: FomSystem, y0, grid: TimeGrid,
                             cfg: NewtonConfig = NewtonConfig()) -> Trajectory:
    """March ``grid.steps`` backward-Euler steps from ``y0``.

    Aborts with :class:`IntegrationError` on the first Newton failure.
    """
    y = system.check_state(y0)
    states = np.empty((system.n, grid.steps + 1))
    states[:, 0] = y
    for t in range(grid.steps):
        try:
            y, _ = newton_step_solve(system, y, grid.dt, cfg)
        except NewtonError as exc:
            raise IntegrationError(f"step {t + 1}: {exc}", t + 1, exc) from exc
        states[:, t + 1] = y
    return Trajectory(states, grid)


def von_neumann_dt_bound(porosity: float, dx: float, velocity, dflux_dsat,
                         s_range, samples: int = 10_000) -> float:
    """Explicit-transport time-step bound ``phi dx / max(v f'(s))``.

    The maximum runs over all edge velocities and over ``samples`` evenly
    spaced saturations in ``s_range``.  Returns ``inf`` when the denominator
    vanishes.
    """
    if not porosity > 0 or not dx > 0:
        raise ValueError("porosity and dx must be positive")
    v = np.abs(np.asarray(velocity, dtype=float))
    s = np.linspace(s_range[0], s_range[1], samples)
    slope = np.max(np.abs(np.asarray(dflux_dsat(s), dtype=float)))
    denom = float(v.max(initial=0.0) * slope)
    if denom == 0.0:
        return float("inf")
    return porosity * dx / denom


def integrate_implicit_euler_batch(system: FomSystem, y0, grid: TimeGrid,
                                   cfg: NewtonConfig = NewtonConfig()) -> np.ndarray:
    """Backward Euler for a batch of initial states ``(B, n)``; returns ``(B, T+1, n)``.

    ``system`` is either shared or stacked with batch ``B``.  Each member runs
    its own Newton iteration (converged members are frozen), so results agree
    with per-sample :func:`integrate_implicit_euler` calls to Newton tolerance.
    """
    Y = np.atleast_2d(system.check_state(y0)).astype(float)
    B = Y.shape[0]
    out = np.empty((B, grid.steps + 1, system.n))
    out[:, 0] = Y
    eye = np.eye(system.n)
    for t in range(grid.steps):
        prev = out[:, t]
        y = system.clip(prev.copy())
        r = system.residual(y, prev, grid.dt)
        norm = np.linalg.norm(r, axis=1)
        for it in range(cfg.max_iters + 1):
            active = norm > cfg.tol
            if not active.any():
                break
            if it == cfg.max_iters:
                bad = np.flatnonzero(active).tolist()
                raise IntegrationError(
                    f"step {t + 1}: Newton did not converge for samples {bad}", t + 1)
            J = eye - grid.dt * (system.linear_op + system.nonlinear_jac(y))
            if J.ndim == 2:
                J = np.broadcast_to(J, (B,) + J.shape)
            try:
                delta = np.linalg.solve(J[active], r[active][..., None])[..., 0]
            except np.linalg.LinAlgError as exc:
                raise IntegrationError(f"step {t + 1}: singular Newton system", t + 1, exc) from exc
            step = np.full(delta.shape[0], cfg.damping)
            base = y[active]
            trial = system.clip(base - step[:, None] * delta)
            full = y.copy()
            full[active] = trial
            r_new = system.residual(full, prev, grid.dt)
            n_new = np.linalg.norm(r_new, axis=1)
            if cfg.line_search:
                for _ in range(cfg.max_halvings):
                    worse = ~(n_new[active] < norm[active])
                    if not worse.any():
                        break
                    step[worse] *= 0.5
                    trial = system.clip(base - step[:, None] * delta)
                    full[active] = trial
                    r_new = system.residual(full, prev, grid.dt)
                    n_new = np.linalg.norm(r_new, axis=1)
            y = np.where(active[:, None], full, y)
            r = np.where(active[:, None], r_new, r)
            norm = np.where(active, n_new, norm)
            if not np.all(np.isfinite(norm)):
                raise IntegrationError(f"step {t + 1}: non-finite residual", t + 1)
        out[:, t + 1] = y
    return out
