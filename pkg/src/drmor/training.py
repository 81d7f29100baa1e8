"""Datasets, the mse objective, rmsprop and the mini-batch training loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .drrnn import DrRnnModel
from .dynsys import FomSystem, stack_systems

log = logging.getLogger(__name__)


class TrainingError(FloatingPointError):
    def __init__(self, message, epoch):
        super().__init__(message)
        self.epoch = epoch


@dataclass
class Dataset:
    """``L`` target sequences of equal length ``T``.

    ``initial`` has shape ``(L, n)`` and ``targets`` ``(L, T, n)``; ``targets[:, t]``
    is the state one ``dt`` after ``targets[:, t - 1]``.  ``systems`` holds an
    optional residual system per sequence (parametric problems); ``inputs``
    holds per-step inputs ``(L, T, p)`` for input-driven models.
    """

    initial: np.ndarray
    targets: np.ndarray
    dt: float
    systems: Optional[Sequence[FomSystem]] = None
    inputs: Optional[np.ndarray] = None

    def __post_init__(self):
        self.initial = np.atleast_2d(np.asarray(self.initial, dtype=float))
        self.targets = np.asarray(self.targets, dtype=float)
        if self.targets.ndim != 3 or self.targets.shape[0] != self.initial.shape[0]:
            raise ValueError(
                f"targets shape {self.targets.shape} does not match {self.initial.shape[0]} sequences")
        if self.systems is not None and len(self.systems) != len(self):
            raise ValueError("need one system per sequence")

    def __len__(self):
        return self.initial.shape[0]

    @property
    def steps(self) -> int:
        return self.targets.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        return Dataset(
            self.initial[idx], self.targets[idx], self.dt,
            None if self.systems is None else [self.systems[i] for i in idx],
            None if self.inputs is None else self.inputs[idx])

    def system(self, default: Optional[FomSystem] = None) -> Optional[FomSystem]:
        """Residual system for the whole dataset (stacked when per-sequence)."""
        if self.systems is None:
            return default
        return stack_systems(self.systems)

    @classmethod
    def from_trajectories(cls, states, dt, stride: int = 1, systems=None, inputs=None):
        """Build from full trajectories ``(L, T+1, n)``, keeping every ``stride``-th state."""
        states = np.asarray(states, dtype=float)[:, ::stride]
        return cls(states[:, 0], states[:, 1:], dt * stride, systems, inputs)


def mse_loss(pred, target) -> float:
    """Squared error summed over time and components, averaged over sequences."""
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    if pred.ndim == 2:
        pred, target = pred[None], target[None]
    d = pred - target
    return float(np.sum(d * d) / pred.shape[0])


@dataclass
class RmspropState:
    learning_rate: float = 1e-3
    decay: float = 0.9
    eps: float = 1e-8
    G: dict = field(default_factory=dict)


def rmsprop_update(params: dict, grads: dict, state: RmspropState):
    """One rmsprop step; returns new ``(params, state)`` without mutating inputs."""
    G = {}
    new = {}
    for key, theta in params.items():
        g = grads[key]
        acc = state.G.get(key, np.zeros_like(theta))
        acc = (1.0 - state.decay) * g * g + state.decay * acc
        G[key] = acc
        new[key] = theta - state.learning_rate * g / np.sqrt(acc + state.eps)
    return new, replace(state, G=G)


@dataclass(frozen=True)
class InitConfig:
    w_std: float = 0.1
    eta_range: tuple = (0.1, 0.4)
    U: str = "identity"            # "identity" or "uniform"
    U_range: tuple = (0.1, 0.5)


@dataclass(frozen=True)
class TrainingConfig:
    batch_size: int = 15
    iterations: int = 15
    seed: int = 42
    learning_rate: float = 1e-3
    decay: float = 0.9
    eps: float = 1e-8
    init: InitConfig = InitConfig()

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")


def initialize_model(template, cfg: TrainingConfig, rng: np.random.Generator):
    """Draw fresh trainable parameters for ``template``.

    DR-RNN: ``w ~ N(0, w_std^2)``, ``eta_k ~ U[eta_range]``; ``U`` is the
    identity or ``U[U_range]`` entrywise.  Other models supply ``initialized(rng)``.
    """
    if not isinstance(template, DrRnnModel):
        return template.initialized(rng)
    init = cfg.init
    n, K = template.n, template.K
    w = rng.normal(0.0, init.w_std, size=n)
    eta = rng.uniform(init.eta_range[0], init.eta_range[1], size=K - 1)
    if init.U == "identity":
        U = np.eye(n)
    elif init.U == "uniform":
        U = rng.uniform(init.U_range[0], init.U_range[1], size=(n, n))
    else:
        raise ValueError(f"unknown U initialisation {init.U!r}")
    return replace(template, w=w, eta=eta, U=U)


@dataclass
class History:
    epoch: list = field(default_factory=list)
    train_mse: list = field(default_factory=list)
    test_mse: list = field(default_factory=list)

    def append(self, epoch, train, test):
        self.epoch.append(epoch)
        self.train_mse.append(train)
        self.test_mse.append(test)

    def rows(self):
        return list(zip(self.epoch, self.train_mse, self.test_mse))


def evaluate(model, data: Dataset) -> float:
    return mse_loss(model.predict(data), data.targets)


def train(template, data: Dataset, cfg: TrainingConfig = TrainingConfig(),
          test: Optional[Dataset] = None, initialize: bool = True):
    """Mini-batch rmsprop on exact BPTT gradients.

    Returns ``(model, history)``; history row 0 holds the initial model's
    errors, row ``e`` the errors after epoch ``e``.
    """
    if len(data) == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(cfg.seed)
    model = initialize_model(template, cfg, rng) if initialize else template
    state = RmspropState(cfg.learning_rate, cfg.decay, cfg.eps)
    params = model.params()
    history = History()

    def record(epoch):
        try:
            tr = evaluate(model, data)
            te = evaluate(model, test) if test is not None else float("nan")
        except FloatingPointError as exc:
            raise TrainingError(f"evaluation after epoch {epoch}: {exc}", epoch) from exc
        if not np.isfinite(tr):
            raise TrainingError(f"non-finite training loss after epoch {epoch}", epoch)
        history.append(epoch, tr, te)
        log.debug("epoch %d train %.3e test %.3e", epoch, tr, te)

    record(0)
    for epoch in range(1, cfg.iterations + 1):
        order = rng.permutation(len(data))
        for start in range(0, len(data), cfg.batch_size):
            batch = data.subset(order[start:start + cfg.batch_size])
            try:
                grads, _ = model.loss_and_grad(batch)
            except FloatingPointError as exc:
                raise TrainingError(f"epoch {epoch}: {exc}", epoch) from exc
            params, state = rmsprop_update(params, grads, state)
            model = model.with_params(params)
        record(epoch)
    return model, history
