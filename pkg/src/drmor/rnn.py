"""Standard Elman RNN baseline: ``h' = tanh(U^T h + V^T [a; 1])``, ``y = W^T h'``."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .drrnn import RolloutError


@dataclass(eq=False)
class StandardRnnModel:
    """Hidden transition ``U`` (m, m), input weights ``V`` (p + 1, m) whose last
    row is the bias, output weights ``W`` (m, q)."""

    U: np.ndarray
    V: np.ndarray
    W: np.ndarray

    def __post_init__(self):
        self.U = np.asarray(self.U, dtype=float)
        self.V = np.asarray(self.V, dtype=float)
        self.W = np.asarray(self.W, dtype=float)
        m = self.U.shape[0]
        if self.U.shape != (m, m) or self.V.shape[1] != m or self.W.shape[0] != m:
            raise ValueError(
                f"inconsistent shapes U{self.U.shape} V{self.V.shape} W{self.W.shape}")

    @property
    def hidden_dim(self) -> int:
        return self.U.shape[0]

    @property
    def input_dim(self) -> int:
        return self.V.shape[0] - 1

    @property
    def output_dim(self) -> int:
        return self.W.shape[1]

    @classmethod
    def zeros(cls, hidden_dim: int, input_dim: int, output_dim: int):
        return cls(np.zeros((hidden_dim, hidden_dim)),
                   np.zeros((input_dim + 1, hidden_dim)),
                   np.zeros((hidden_dim, output_dim)))

    def initialized(self, rng: np.random.Generator) -> "StandardRnnModel":
        """Orthogonal recurrent weights, Glorot-uniform input/output weights, zero bias."""
        m, p, q = self.hidden_dim, self.input_dim, self.output_dim
        U, _ = np.linalg.qr(rng.normal(size=(m, m)))
        lim_v = np.sqrt(6.0 / (p + m))
        V = np.vstack([rng.uniform(-lim_v, lim_v, size=(p, m)), np.zeros((1, m))])
        lim_w = np.sqrt(6.0 / (m + q))
        W = rng.uniform(-lim_w, lim_w, size=(m, q))
        return StandardRnnModel(U, V, W)

    def params(self) -> dict:
        return {"U": self.U.copy(), "V": self.V.copy(), "W": self.W.copy()}

    def with_params(self, params: dict) -> "StandardRnnModel":
        return replace(self, U=params["U"].copy(), V=params["V"].copy(), W=params["W"].copy())

    def predict(self, batch) -> np.ndarray:
        return rnn_rollout(self, batch.inputs)

    def loss_and_grad(self, batch):
        return rnn_bptt_gradients(self, batch, return_loss=True)


def _augment(a):
    return np.concatenate([a, np.ones(a.shape[:-1] + (1,))], axis=-1)


def rnn_forward_step(model: StandardRnnModel, h_t, a_next):
    """Return ``(h_{t+1}, y_{t+1})``."""
    h = np.tanh(np.asarray(h_t) @ model.U + _augment(np.asarray(a_next, dtype=float)) @ model.V)
    return h, h @ model.W


def rnn_rollout(model: StandardRnnModel, inputs) -> np.ndarray:
    """Outputs ``(B, T, q)`` for inputs ``(B, T, p)`` from a zero hidden state."""
    inputs = np.asarray(inputs, dtype=float)
    B, T = inputs.shape[:2]
    h = np.zeros((B, model.hidden_dim))
    out = np.empty((B, T, model.output_dim))
    for t in range(T):
        h, out[:, t] = rnn_forward_step(model, h, inputs[:, t])
    if not np.all(np.isfinite(out)):
        raise RolloutError("non-finite RNN output", T)
    return out


def rnn_bptt_gradients(model: StandardRnnModel, batch, return_loss: bool = False):
    """Exact gradients of the batch mse with respect to ``U``, ``V`` and ``W``."""
    inputs = _augment(np.asarray(batch.inputs, dtype=float))
    targets = batch.targets
    B, T = targets.shape[:2]
    grads = {k: np.zeros_like(v) for k, v in model.params().items()}
    if B == 0 or T == 0:
        return (grads, 0.0) if return_loss else grads
    hs = np.zeros((T + 1, B, model.hidden_dim))
    for t in range(T):
        hs[t + 1] = np.tanh(hs[t] @ model.U + inputs[:, t] @ model.V)
    pred = hs[1:] @ model.W
    diff = pred - np.swapaxes(targets, 0, 1)
    loss = float(np.sum(diff * diff) / B)

    dh_next = np.zeros((B, model.hidden_dim))
    for t in range(T - 1, -1, -1):
        dy = 2.0 * diff[t] / B
        grads["W"] += hs[t + 1].T @ dy
        dh = dy @ model.W.T + dh_next
        dz = dh * (1.0 - hs[t + 1] ** 2)
        grads["U"] += hs[t].T @ dz
        grads["V"] += inputs[:, t].T @ dz
        dh_next = dz @ model.U.T
    return (grads, loss) if return_loss else grads


def impulse_inputs(x, steps: int) -> np.ndarray:
    """Feed the random inputs ``x`` (L, p) at the first step and zeros afterwards."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    a = np.zeros((x.shape[0], steps, x.shape[1]))
    a[:, 0] = x
    return a
