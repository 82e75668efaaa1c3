"""Dense building blocks, losses, regularizers and the Adam optimizer.

Everything works on float64 numpy arrays. Layers cache what they need on
``forward`` and accumulate parameter gradients on ``backward``; the caller
zeroes gradients between optimizer steps (``Adam.step`` does it).
"""
from dataclasses import dataclass

import numpy as np

DTYPE = np.float64
KL_CLAMP = 1e-7


class Param:
    """A named trainable tensor with a gradient buffer of the same shape."""

    def __init__(self, value, name):
        self.value = np.array(value, dtype=DTYPE)
        self.grad = np.zeros_like(self.value)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.size

    def zero_grad(self):
        self.grad.fill(0.0)

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.value.shape})"


def sigmoid(z):
    # tanh form: no overflow, saturates to exact 0/1 far from the origin
    return 0.5 * (1.0 + np.tanh(0.5 * z))


ACTIVATIONS = ("sigmoid", "tanh", "identity")


def _activate(z, kind):
    if kind == "sigmoid":
        return sigmoid(z)
    if kind == "tanh":
        return np.tanh(z)
    if kind == "identity":
        return z
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def _activation_grad(a, kind):
    """Derivative of the activation expressed through its output ``a``."""
    if kind == "sigmoid":
        return a * (1.0 - a)
    if kind == "tanh":
        return 1.0 - a * a
    return np.ones_like(a)


def uniform_init(rng, fan_in, shape):
    limit = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-limit, limit, size=shape)


class Dense:
    """Fully connected layer computing ``activation(x @ W.T + b)``.

    Weights are stored ``(n_out, n_in)``.
    """

    def __init__(self, n_in, n_out, activation="sigmoid", rng=None, name="dense"):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        rng = np.random.default_rng(rng)
        self.n_in = int(n_in)
        self.n_out = int(n_out)
        self.activation = activation
        self.name = name
        self.W = Param(uniform_init(rng, n_in, (n_out, n_in)), f"{name}.W")
        self.b = Param(np.zeros(n_out), f"{name}.b")
        self._x = None
        self._a = None

    def params(self):
        return [self.W, self.b]

    def weight_params(self):
        return [self.W]

    def forward(self, x):
        a = _activate(x @ self.W.value.T + self.b.value, self.activation)
        self._x, self._a = x, a
        return a

    def backward(self, da):
        dz = da * _activation_grad(self._a, self.activation)
        # leading axes (batch, time) are flattened for the weight gradient
        x2 = self._x.reshape(-1, self.n_in)
        dz2 = dz.reshape(-1, self.n_out)
        self.W.grad += dz2.T @ x2
        self.b.grad += dz2.sum(axis=0)
        return dz @ self.W.value


class Dropout:
    """Inverted dropout. Identity unless ``training`` is set and rate > 0."""

    def __init__(self, rate=0.0):
        if not 0.0 <= rate < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")
        self.rate = float(rate)
        self._mask = None

    def forward(self, x, training=False, rng=None):
        if not training or self.rate == 0.0:
            self._mask = None
            return x
        keep = 1.0 - self.rate
        self._mask = (rng.random(x.shape) < keep) / keep
        return x * self._mask

    def backward(self, dx):
        return dx if self._mask is None else dx * self._mask


def mse_loss(pred, target):
    """Mean squared error and its gradient with respect to ``pred``."""
    pred = np.asarray(pred, dtype=DTYPE)
    target = np.asarray(target, dtype=DTYPE)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs target {target.shape}")
    if pred.size == 0:
        raise ValueError("mse_loss needs at least one element")
    diff = pred - target
    n = diff.size
    return float(np.sum(diff * diff) / n), 2.0 * diff / n


def l2_penalty(params):
    """Return ``0.5 * sum(w**2)`` over weight params and the per-param gradients."""
    total = 0.0
    grads = []
    for p in params:
        value = p.value if isinstance(p, Param) else np.asarray(p, dtype=DTYPE)
        total += 0.5 * float(np.sum(value * value))
        grads.append(value.copy())
    return total, grads


def sparse_kl_penalty(activations, target):
    """Bernoulli KL sparsity penalty on a batch of hidden activations.

    ``activations`` is ``(batch, units)`` with entries in (0, 1). For each unit
    the mean activation ``rho_hat`` is compared to ``target`` via
    ``KL(target || rho_hat)``; the penalty is the sum over units. The returned
    gradient is with respect to every entry of ``activations``.
    """
    if not 0.0 < target < 1.0:
        raise ValueError("sparsity target must lie in (0, 1)")
    a = np.clip(np.asarray(activations, dtype=DTYPE), KL_CLAMP, 1.0 - KL_CLAMP)
    a = a.reshape(-1, a.shape[-1])
    batch = a.shape[0]
    rho_hat = a.mean(axis=0)
    rho = target
    penalty = np.sum(
        rho * np.log(rho / rho_hat) + (1.0 - rho) * np.log((1.0 - rho) / (1.0 - rho_hat))
    )
    drho_hat = -rho / rho_hat + (1.0 - rho) / (1.0 - rho_hat)
    grad = np.broadcast_to(drho_hat / batch, a.shape).copy()
    return float(penalty), grad


@dataclass
class RegularizerWeights:
    l2_weight: float = 0.0
    sparse_weight: float = 0.0
    sparsity_target: float = 0.1

    def __post_init__(self):
        if self.l2_weight < 0 or self.sparse_weight < 0:
            raise ValueError("regularizer weights must be non-negative")
        if not 0.0 < self.sparsity_target < 1.0:
            raise ValueError("sparsity_target must lie in (0, 1)")


@dataclass
class EarlyStopSpec:
    patience: int = 10
    min_delta: float = 0.0
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")


class Adam:
    """Adam with bias correction. Moments are keyed by ``id`` of each Param."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.t = 0
        self._m = {}
        self._v = {}

    def step(self, params):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1 ** self.t
        corr2 = 1.0 - b2 ** self.t
        for p in params:
            key = id(p)
            if key not in self._m:
                self._m[key] = np.zeros_like(p.value)
                self._v[key] = np.zeros_like(p.value)
            m, v = self._m[key], self._v[key]
            m *= b1
            m += (1.0 - b1) * p.grad
            v *= b2
            v += (1.0 - b2) * p.grad * p.grad
            p.value -= self.lr * (m / corr1) / (np.sqrt(v / corr2) + self.epsilon)
            p.zero_grad()


def adam_step(state, params):
    """Functional alias: apply one update of ``state`` to ``params``."""
    state.step(params)
    return params


def grad_check(model, X, Y, epsilon=1e-5, floor=1e-6):
    """Max relative error between analytic and central-difference gradients.

    ``model`` must expose ``params()`` and ``loss_and_grad(X, Y)`` that returns
    the scalar loss and leaves fresh gradients in every Param. A ``loss(X, Y)``
    method, when present, is used for the perturbed evaluations. The relative
    error of each entry is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if getattr(model, "dropout_rate", 0.0) > 0.0:
        raise ValueError("gradient check requires a deterministic loss; disable dropout")
    params = model.params()
    value = getattr(model, "loss", None) or model.loss_and_grad
    for p in params:
        p.zero_grad()
    model.loss_and_grad(X, Y)
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.value.reshape(-1)
        numeric = np.empty(flat.size)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + epsilon
            up = value(X, Y)
            flat[k] = orig - epsilon
            down = value(X, Y)
            flat[k] = orig
            numeric[k] = (up - down) / (2.0 * epsilon)
        ga = ga.reshape(-1)
        denom = np.maximum(np.maximum(np.abs(ga), np.abs(numeric)), floor)
        worst = max(worst, float(np.max(np.abs(ga - numeric) / denom)))
    for p in params:
        p.zero_grad()
    return worst
