import numpy as np
import pytest

from drmor.dynsys import FomSystem


def scalar_decay():
    """``dy/dt = -y``."""
    return FomSystem(np.array([[-1.0]]))


def zero_system(n=3):
    return FomSystem(np.zeros((n, n)))


def central_jacobian(fun, y, rel=1e-6):
    """Column-by-column central differences with step ``rel * (1 + |y_i|)``."""
    y = np.asarray(y, dtype=float)
    cols = []
    for i in range(y.size):
        h = rel * (1.0 + abs(y[i]))
        e = np.zeros_like(y)
        e[i] = h
        cols.append((fun(y + e) - fun(y - e)) / (2 * h))
    return np.stack(cols, axis=-1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def loss_of(model, data):
    from drmor.training import mse_loss
    return mse_loss(model.predict(data), data.targets)


def finite_difference_gradient(model, data, rel=1e-6):
    """Central differences of the batch loss with step ``rel * (1 + |theta_i|)``."""
    params = model.params()
    out = {}
    for key, value in params.items():
        fd = np.zeros(value.size)
        for i in range(value.size):
            h = rel * (1.0 + abs(value.reshape(-1)[i]))
            up = {k: v.copy() for k, v in params.items()}
            dn = {k: v.copy() for k, v in params.items()}
            up[key].reshape(-1)[i] += h
            dn[key].reshape(-1)[i] -= h
            fd[i] = (loss_of(model.with_params(up), data) - loss_of(model.with_params(dn), data)) / (2 * h)
        out[key] = fd.reshape(value.shape)
    return out


def gradient_error(grads, fd):
    """Normwise relative error ``|g - fd| / max(|g|, |fd|)`` over all parameters.

    Componentwise ratios are not used: with ``h = 1e-6`` every difference
    carries an absolute rounding error near ``1e-16 * loss / h``, which swamps
    components many decades below the gradient scale.
    """
    g = np.concatenate([grads[k].ravel() for k in sorted(fd)])
    f = np.concatenate([fd[k].ravel() for k in sorted(fd)])
    return float(np.linalg.norm(g - f) / max(np.linalg.norm(g), np.linalg.norm(f), 1e-300))


def worst_gradient_error(model, data, grads, rel=1e-6):
    return gradient_error(grads, finite_difference_gradient(model, data, rel))


def random_drrnn_instance(r):
    """Small random DR-RNN (n <= 3, K <= 4, T <= 5) with a matching batch."""
    from drmor.drrnn import DrRnnModel
    from drmor.problems import ODE3_SYSTEM
    from drmor.training import Dataset

    n = int(r.integers(1, 4))
    K = int(r.integers(1, 5))
    T = int(r.integers(1, 6))
    B = int(r.integers(1, 4))
    kind = r.integers(0, 3)
    if kind == 0 and n == 3:
        system = ODE3_SYSTEM
    elif kind == 1:
        system = FomSystem(r.normal(size=(B, n, n)), forcing=r.normal(size=(B, n)))
    else:
        from drmor.dynsys import Pointwise
        system = FomSystem(-np.eye(n) + 0.3 * r.normal(size=(n, n)),
                           pointwise=Pointwise(np.tanh, lambda z: 1 - np.tanh(z) ** 2,
                                               coupling=r.normal(size=(n, n))))
    model = DrRnnModel(r.normal(0, 0.5, n), r.uniform(0.1, 0.4, K - 1),
                       r.uniform(-0.5, 0.5, (n, n)), system, dt=float(r.uniform(0.05, 0.2)),
                       eps=float(10 ** r.uniform(-2, 3)), train_U=bool(r.integers(0, 2)))
    data = Dataset(r.uniform(-1, 1, (B, n)), r.uniform(-1, 1, (B, T, n)), model.dt)
    return model, data
