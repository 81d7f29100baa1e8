"""Deep residual recurrent network (DR-RNN) time stepper.

Each time step starts from ``y_t`` and applies ``K`` layers that drive the
implicit-Euler residual of the bound system towards zero::

    k = 1:  y <- y - w * tanh(U r)
    k > 1:  G_k = gamma |r|^2 + zeta G_{k-1};   y <- y - eta_k / sqrt(G_k + eps) * r

where ``r`` is the residual evaluated at the current layer input.  Gradients
of the trajectory mse are computed by hand-written reverse-mode sweeps.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .dynsys import FomSystem, TimeGrid, Trajectory


class RolloutError(FloatingPointError):
    """A rollout produced non-finite states at time index ``step``."""

    def __init__(self, message, step, where=None):
        super().__init__(message)
        self.step = step
        self.where = where


@dataclass(eq=False)
class DrRnnModel:
    """DR-RNN parameters bound to a residual function.

    ``system`` and ``dt`` define the residual; ``U`` is trained only when
    ``train_U`` is set.  The output map is the identity.
    """

    w: np.ndarray
    eta: np.ndarray
    U: np.ndarray
    system: Optional[FomSystem] = None
    dt: float = 0.1
    zeta: float = 0.9
    gamma: float = 0.1
    eps: float = 1e-8
    train_U: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=float)
        self.eta = np.atleast_1d(np.asarray(self.eta, dtype=float))
        self.U = np.asarray(self.U, dtype=float)
        n = self.w.shape[0]
        if self.U.shape != (n, n):
            raise ValueError(f"U has shape {self.U.shape}, expected ({n}, {n})")
        if not self.eps > 0 or self.zeta < 0 or self.gamma < 0:
            raise ValueError("need eps > 0 and zeta, gamma >= 0")

    @property
    def K(self) -> int:
        return self.eta.shape[0] + 1

    @property
    def n(self) -> int:
        return self.w.shape[0]

    @classmethod
    def zeros(cls, n: int, K: int, **kw):
        if K < 1:
            raise ValueError("K must be at least 1")
        return cls(np.zeros(n), np.zeros(K - 1), np.eye(n), **kw)

    def params(self) -> dict:
        p = {"w": self.w.copy(), "eta": self.eta.copy()}
        if self.train_U:
            p["U"] = self.U.copy()
        return p

    def with_params(self, params: dict) -> "DrRnnModel":
        return replace(self, w=params["w"].copy(), eta=params["eta"].copy(),
                       U=params["U"].copy() if "U" in params else self.U)

    def bind(self, system: FomSystem, dt: Optional[float] = None) -> "DrRnnModel":
        return replace(self, system=system, dt=self.dt if dt is None else dt)

    # training protocol -----------------------------------------------------

    def predict(self, batch) -> np.ndarray:
        """Predicted targets ``(B, T, n)`` (initial state excluded)."""
        return rollout_batch(self, batch.initial, batch.steps, batch.system(self.system))[:, 1:]

    def loss_and_grad(self, batch):
        return bptt_gradients(self, batch, return_loss=True)


def count_parameters(model) -> int:
    """Number of trained scalars."""
    return sum(np.size(v) for v in model.params().values())


def _system(model, system):
    system = model.system if system is None else system
    if system is None:
        raise ValueError("DR-RNN has no residual binding; pass a system")
    return system


def drrnn_layer_update(model: DrRnnModel, y_candidate, y_prev, k: int,
                       G_prev: float = 0.0, system: Optional[FomSystem] = None):
    """Apply layer ``k`` (1-based) to ``y_candidate``; return ``(y, G_k)``."""
    if not 1 <= k <= model.K:
        raise ValueError(f"layer index {k} outside 1..{model.K}")
    system = _system(model, system)
    r = system.residual(y_candidate, y_prev, model.dt)
    G = model.gamma * np.sum(r * r, axis=-1) + model.zeta * np.asarray(G_prev)
    if k == 1:
        y = y_candidate - model.w * np.tanh(r @ model.U.T)
    else:
        scale = model.eta[k - 2] / np.sqrt(G + model.eps)
        y = y_candidate - np.asarray(scale)[..., None] * r
    return y, G


def drrnn_forward_step(model: DrRnnModel, y_t, system: Optional[FomSystem] = None):
    """One DR-RNN time step: ``K`` layer updates starting from ``y_t``."""
    system = _system(model, system)
    y_t = np.asarray(y_t, dtype=float)
    y = y_t
    G = np.zeros(y_t.shape[:-1])
    for k in range(1, model.K + 1):
        y, G = drrnn_layer_update(model, y, y_t, k, G, system)
    return y


def rollout_batch(model: DrRnnModel, y0, steps: int, system: Optional[FomSystem] = None):
    """Roll out from a batch of initial states; returns ``(B, steps + 1, n)``."""
    system = _system(model, system)
    y = np.atleast_2d(np.asarray(y0, dtype=float))
    out = np.empty((y.shape[0], steps + 1, y.shape[1]))
    out[:, 0] = y
    for t in range(steps):
        y = drrnn_forward_step(model, y, system)
        if not np.all(np.isfinite(y)):
            bad = np.flatnonzero(~np.all(np.isfinite(y), axis=1))
            raise RolloutError(f"non-finite state at time index {t + 1} for samples {bad.tolist()}",
                               t + 1, bad)
        out[:, t + 1] = y
    return out


def drrnn_rollout(model: DrRnnModel, y0, steps: int, system: Optional[FomSystem] = None,
                  dt: Optional[float] = None) -> Trajectory:
    """Roll out a single trajectory; the grid step is the model's ``dt``."""
    if steps < 0:
        raise ValueError("steps must be non-negative")
    states = rollout_batch(model, np.asarray(y0)[None, :], steps, system)[0]
    return Trajectory(states.T, TimeGrid(model.dt if dt is None else dt, steps))


def bptt_gradients(model: DrRnnModel, batch, return_loss: bool = False):
    """Exact gradients of the batch mse with respect to ``w``, ``eta`` (and ``U``).

    ``batch`` provides ``initial`` (B, n), ``targets`` (B, T, n) and a
    ``system(default)`` method returning the residual system for the batch.
    The loss is ``sum_{t,i} (y - target)^2`` averaged over the batch.
    """
    system = batch.system(model.system)
    dt, zeta, gamma, eps = model.dt, model.zeta, model.gamma, model.eps
    w, eta, U = model.w, model.eta, model.U
    K = model.K
    y0 = np.atleast_2d(batch.initial)
    targets = batch.targets
    B, T = targets.shape[0], targets.shape[1]

    grads = {"w": np.zeros_like(w), "eta": np.zeros_like(eta)}
    if model.train_U:
        grads["U"] = np.zeros_like(U)
    if B == 0 or T == 0:
        return (grads, 0.0) if return_loss else grads

    # forward sweep, caching every layer input, residual and G
    ys = np.empty((T + 1, K + 1, B, model.n))   # ys[t, k] = layer-k output of step t
    rs = np.empty((T, K, B, model.n))
    Gs = np.empty((T, K, B))
    acts = np.empty((T, B, model.n))
    y = y0
    for t in range(T):
        ys[t, 0] = y
        G = np.zeros(B)
        yk = y
        for k in range(K):
            r = system.residual(yk, y, dt)
            G = gamma * np.sum(r * r, axis=1) + zeta * G
            rs[t, k] = r
            Gs[t, k] = G
            if k == 0:
                a = np.tanh(r @ U.T)
                acts[t] = a
                yk = yk - w * a
            else:
                yk = yk - (eta[k - 1] / np.sqrt(G + eps))[:, None] * r
            ys[t, k + 1] = yk
        if not np.all(np.isfinite(yk)):
            raise RolloutError(f"non-finite state at time index {t + 1} during BPTT", t + 1)
        y = yk
    pred = ys[:T, K]
    diff = pred - np.swapaxes(targets, 0, 1)
    loss = float(np.sum(diff * diff) / B)

    # reverse sweep
    carry = np.zeros((B, model.n))   # dL/dy_{t+1} from later steps
    for t in range(T - 1, -1, -1):
        y_prev = ys[t, 0]
        ybar = carry + 2.0 * diff[t] / B
        ybar_prev = np.zeros_like(ybar)
        Gbar = np.zeros(B)
        for k in range(K - 1, 0, -1):
            r = rs[t, k]
            G = Gs[t, k]
            inv = 1.0 / np.sqrt(G + eps)
            scale = eta[k - 1] * inv
            rbar = -scale[:, None] * ybar
            sbar = -np.sum(ybar * r, axis=1)
            grads["eta"][k - 1] += np.sum(sbar * inv)
            Gtot = Gbar - 0.5 * sbar * eta[k - 1] * inv ** 3
            rbar = rbar + 2.0 * gamma * Gtot[:, None] * r
            Gbar = zeta * Gtot
            ybar_prev -= rbar
            ybar = ybar + system.residual_vjp(ys[t, k], rbar, dt)
        # layer 1
        r = rs[t, 0]
        a = acts[t]
        grads["w"] -= np.sum(ybar * a, axis=0)
        zbar = -(ybar * w) * (1.0 - a * a)
        if model.train_U:
            grads["U"] += zbar.T @ r
        rbar = zbar @ U + 2.0 * gamma * Gbar[:, None] * r
        ybar_prev -= rbar
        ybar = ybar + system.residual_vjp(ys[t, 0], rbar, dt)
        carry = ybar + ybar_prev
        if not np.all(np.isfinite(carry)):
            raise RolloutError(f"non-finite adjoint at time index {t}", t, "adjoint")
    return (grads, loss) if return_loss else grads
