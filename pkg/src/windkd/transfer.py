"""Divergences, the sparse and MMD-regularized losses, and the transfer net.

``UnivariateTLNet`` is the 7-15-10-15-7 sigmoid network used both for the
error relation between park models and for the test-time corrector.
``fine_tune`` adapts a trained copy of it to a new domain by adding the
kernel MMD between hidden activations of the frozen source net (on source
data) and the adapting net (on target data) to the sparse loss.
"""
import copy
from dataclasses import dataclass, field

import numpy as np

from .nn.core import (
    Adam,
    Dense,
    EarlyStopSpec,
    RegularizerWeights,
    l2_penalty,
    sparse_kl_penalty,
)
from .nn.recurrent import weighted_mse
from .nn.training import train_network

TL_WIDTHS = (7, 15, 10, 15, 7)


def kl_divergence(p, q, atol=1e-9):
    """Discrete relative entropy ``sum p ln(p / q)``."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError("distributions must share a support")
    if np.any(p < 0) or np.any(q < 0):
        raise ValueError("probabilities must be non-negative")
    if abs(p.sum() - 1.0) > atol or abs(q.sum() - 1.0) > atol:
        raise ValueError("distributions must sum to 1")
    support = p > 0
    if np.any(q[support] <= 0):
        raise ValueError("q must be positive wherever p is")
    return float(np.sum(p[support] * np.log(p[support] / q[support])))


@dataclass(frozen=True)
class KernelSpec:
    """``kind`` is ``"rbf"`` or ``"linear"``; RBF bandwidth is a float or ``"median"``."""

    kind: str = "rbf"
    bandwidth: object = "median"

    def __post_init__(self):
        if self.kind not in ("rbf", "linear"):
            raise ValueError(f"unknown kernel {self.kind!r}")
        if self.bandwidth != "median" and not float(self.bandwidth) > 0:
            raise ValueError("bandwidth must be positive or 'median'")


def _sq_dists(a, b):
    d = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d, 0.0)


def median_heuristic(x, y):
    """Median pairwise Euclidean distance over the pooled, distinct pairs."""
    z = np.concatenate([x, y])
    d = np.sqrt(_sq_dists(z, z))
    iu = np.triu_indices(len(z), k=1)
    med = float(np.median(d[iu])) if len(iu[0]) else 0.0
    return med if med > 0 else 1.0


def resolve_bandwidth(kernel, x, y):
    if kernel.kind == "linear":
        return None
    if kernel.bandwidth == "median":
        return median_heuristic(x, y)
    return float(kernel.bandwidth)


def kernel_matrix(a, b, kernel, bandwidth=None):
    if kernel.kind == "linear":
        return a @ b.T
    sigma = bandwidth if bandwidth is not None else resolve_bandwidth(kernel, a, b)
    return np.exp(-_sq_dists(a, b) / (2.0 * sigma * sigma))


def _check_samples(x, xt):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    xt = np.atleast_2d(np.asarray(xt, dtype=np.float64))
    if x.shape[0] < 1 or xt.shape[0] < 1:
        raise ValueError("both sample sets need at least one sample")
    if x.shape[1] != xt.shape[1]:
        raise ValueError(f"dimension mismatch: {x.shape[1]} vs {xt.shape[1]}")
    return x, xt


def mmd_squared(x, xt, kernel=KernelSpec(), bandwidth=None):
    x, xt = _check_samples(x, xt)
    if bandwidth is None:
        bandwidth = resolve_bandwidth(kernel, x, xt)
    kxx = kernel_matrix(x, x, kernel, bandwidth).mean()
    kxy = kernel_matrix(x, xt, kernel, bandwidth).mean()
    kyy = kernel_matrix(xt, xt, kernel, bandwidth).mean()
    return float(kxx - 2.0 * kxy + kyy)


def mmd(x, xt, kernel=KernelSpec(), bandwidth=None):
    """Biased kernel MMD estimate; tiny negative round-off is clamped to 0."""
    return float(np.sqrt(max(mmd_squared(x, xt, kernel, bandwidth), 0.0)))


def mmd_and_grad(x, xt, kernel=KernelSpec(), bandwidth=None, tiny=1e-12):
    """MMD and its gradient with respect to the second sample set ``xt``.

    The RBF bandwidth is held fixed when differentiating.
    """
    x, xt = _check_samples(x, xt)
    if bandwidth is None:
        bandwidth = resolve_bandwidth(kernel, x, xt)
    N, Nt = len(x), len(xt)
    kxx = kernel_matrix(x, x, kernel, bandwidth)
    kxy = kernel_matrix(x, xt, kernel, bandwidth)
    kyy = kernel_matrix(xt, xt, kernel, bandwidth)
    m2 = kxx.mean() - 2.0 * kxy.mean() + kyy.mean()
    value = float(np.sqrt(max(m2, 0.0)))
    if value < tiny:
        return value, np.zeros_like(xt)
    if kernel.kind == "linear":
        g2 = (2.0 / Nt ** 2) * xt.sum(0)[None, :] - (2.0 / (N * Nt)) * x.sum(0)[None, :]
        g2 = np.broadcast_to(g2, xt.shape)
    else:
        s2 = bandwidth * bandwidth
        # d k(a, y)/dy = k(a, y) (a - y) / s2
        g_yy = (kyy.sum(0)[:, None] * -xt + kyy.T @ xt) / s2
        g_xy = (kxy.sum(0)[:, None] * -xt + kxy.T @ x) / s2
        g2 = (2.0 / Nt ** 2) * g_yy - (2.0 / (N * Nt)) * g_xy
    return value, g2 / (2.0 * value)


@dataclass
class TLConfig:
    """Transfer weight and regularizers for MMD fine-tuning.

    ``mmd_layers`` indexes hidden layers (0-based); ``None`` means all.
    """

    gamma: float = 0.6
    reg: RegularizerWeights = field(default_factory=RegularizerWeights)
    mmd_layers: tuple = None
    kernel: KernelSpec = field(default_factory=KernelSpec)
    source_batch: int = 128
    max_epochs: int = 60
    batch_size: int = 64
    learning_rate: float = 1e-3
    patience: int = 8
    validation_fraction: float = 0.1

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")


class UnivariateTLNet:
    """Dense 7 -> 15 -> 10 -> 15 -> 7 with sigmoid hidden layers and linear output."""

    kind = "tlnet"

    def __init__(self, widths=TL_WIDTHS, reg=None, seed=0):
        rng = np.random.default_rng(seed)
        self.widths = tuple(int(w) for w in widths)
        self.reg = RegularizerWeights() if reg is None else reg
        self.layers = []
        for k, (a, b) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            act = "identity" if k == len(self.widths) - 2 else "sigmoid"
            self.layers.append(Dense(a, b, activation=act, rng=rng, name=f"fc{k}"))
        self.output_weights = None
        self.dropout_rate = 0.0
        self.hidden = []

    @property
    def n_hidden_layers(self):
        return len(self.layers) - 1

    def topology(self):
        return {"kind": self.kind, "widths": list(self.widths)}

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def weight_params(self):
        return [p for layer in self.layers for p in layer.weight_params()]

    def param_count(self):
        return int(sum(p.size for p in self.params()))

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()

    def forward(self, X, training=False, rng=None):
        a = np.asarray(X, dtype=np.float64)
        self.hidden = []
        for k, layer in enumerate(self.layers):
            a = layer.forward(a)
            if k < len(self.layers) - 1:
                self.hidden.append(a)
        return a

    def backward(self, dout, dhidden=None):
        """Backprop ``dout``; ``dhidden`` maps hidden index -> extra gradient."""
        dhidden = dhidden or {}
        g = dout
        for k in range(len(self.layers) - 1, -1, -1):
            if k < len(self.layers) - 1 and k in dhidden:
                g = g + dhidden[k]
            g = self.layers[k].backward(g)
        return g

    def loss(self, X, Y):
        return loss_d1(self.forward(X), Y, self, self.reg)

    def loss_and_grad(self, X, Y, training=False, rng=None):
        """Sparse deep-learning loss: MSE + beta * L2 + delta * sparse KL."""
        self.zero_grad()
        pred = self.forward(X)
        value, dpred, dhidden = loss_d1_terms(pred, Y, self, self.reg)
        self.backward(dpred, dhidden)
        if self.reg.l2_weight:
            for p in self.weight_params():
                p.grad += self.reg.l2_weight * p.value
        return value


def loss_d1_terms(pred, target, model, reg):
    """Value of the sparse loss plus gradients on predictions and hidden layers.

    The L2 gradient is left to the caller because it goes straight to weights.
    """
    value, dpred = weighted_mse(pred, target)
    dhidden = {}
    if reg.l2_weight:
        value += reg.l2_weight * l2_penalty(model.weight_params())[0]
    if reg.sparse_weight:
        for k, a in enumerate(model.hidden):
            pen, grad = sparse_kl_penalty(a, reg.sparsity_target)
            value += reg.sparse_weight * pen
            dhidden[k] = reg.sparse_weight * grad
    return value, dpred, dhidden


def loss_d1(pred, target, model, reg):
    """Scalar sparse loss using the hidden activations cached in ``model``."""
    return loss_d1_terms(pred, target, model, reg)[0]


def _mmd_layers(config, model):
    if config.mmd_layers is None:
        return tuple(range(model.n_hidden_layers))
    return tuple(config.mmd_layers)


def loss_d2(loss_d1_value, source_activations, target_activations, config, bandwidths=None):
    """``L_D1 + gamma * sum over layers of MMD(source layer, target layer)``."""
    if len(source_activations) != len(target_activations):
        raise ValueError("source and target provide different layer sets")
    if config.gamma == 0:
        return float(loss_d1_value)
    total = 0.0
    for k, (s, t) in enumerate(zip(source_activations, target_activations)):
        bw = None if bandwidths is None else bandwidths[k]
        total += mmd(s, t, config.kernel, bw)
    return float(loss_d1_value) + config.gamma * total


def mmd_backward(model, source_acts, config, bandwidths):
    """Given ``model.hidden`` from a target-domain forward pass, return the
    MMD penalty (times gamma) and per-hidden-layer gradients."""
    layers = _mmd_layers(config, model)
    if len(layers) != len(source_acts):
        raise ValueError("source activations do not match the configured layers")
    value = 0.0
    grads = {}
    for idx, s, bw in zip(layers, source_acts, bandwidths):
        v, g = mmd_and_grad(s, model.hidden[idx], config.kernel, bw)
        value += v
        grads[idx] = config.gamma * g
    return config.gamma * value, grads


def source_activations(source_net, X, config):
    source_net.forward(X)
    return [source_net.hidden[k].copy() for k in _mmd_layers(config, source_net)]


def fine_tune(source_net, target_set, source_set, config, seed=0, early_stop=None):
    """Adapt a trained ``UnivariateTLNet`` to the target domain.

    ``target_set`` and ``source_set`` are ``(X, Y)`` pairs. When the target
    labels are ``None`` the supervised part of the loss runs on the source
    pairs and the target inputs only enter through the MMD term. The last
    ``validation_fraction`` of the supervised pairs and of the target inputs
    is held out and scored with the full transfer loss; the starting weights
    compete too, so the result never validates worse than the source net.
    The source net is never modified; a trained copy is returned with its
    history in ``history_``.
    """
    Xt, Yt = target_set
    Xs, Ys = source_set
    Xt = np.asarray(Xt, dtype=np.float64)
    Xs = np.asarray(Xs, dtype=np.float64)
    if len(Xt) == 0:
        raise ValueError("target set is empty")
    labelled = Yt is not None
    X_sup, Y_sup = (Xt, np.asarray(Yt, dtype=np.float64)) if labelled else (Xs, np.asarray(Ys, dtype=np.float64))

    net = copy.deepcopy(source_net)
    net.reg = config.reg
    stop = early_stop or EarlyStopSpec(patience=config.patience)
    budget = dict(optimizer=Adam(lr=config.learning_rate), early_stop=stop, batch_size=config.batch_size,
                  max_epochs=config.max_epochs, seed=seed, include_initial=True,
                  validation_fraction=config.validation_fraction)
    if config.gamma == 0:
        net.history_ = train_network(net, X_sup, Y_sup, **budget)
        return net

    n_tval = max(1, int(round(len(Xt) * config.validation_fraction)))
    Xt_fit = Xt[:-n_tval] if len(Xt) > n_tval else Xt
    Xt_val = Xt[-n_tval:]
    src_rng = np.random.default_rng([seed, 1])
    tgt_rng = np.random.default_rng([seed, 2])
    layers = _mmd_layers(config, net)
    val_src = source_activations(source_net, Xs[np.random.default_rng([seed, 3]).choice(
        len(Xs), size=min(config.source_batch, len(Xs)), replace=False)], config)
    state = {"acts": None, "step": 0}
    steps_per_epoch = max(1, int(np.ceil((1 - config.validation_fraction) * len(X_sup) / config.batch_size)))

    def mmd_pass(model, Xm, acts):
        model.forward(Xm)
        bws = [resolve_bandwidth(config.kernel, s, model.hidden[k]) for s, k in zip(acts, layers)]
        return mmd_backward(model, acts, config, bws)

    def loss_fn(model, Xb, Yb, rng):
        if state["step"] % steps_per_epoch == 0:
            pick = src_rng.choice(len(Xs), size=min(config.source_batch, len(Xs)), replace=False)
            state["acts"] = source_activations(source_net, Xs[pick], config)
        state["step"] += 1
        value = model.loss_and_grad(Xb, Yb)
        if labelled:
            Xm = Xb
        else:
            Xm = Xt_fit[tgt_rng.choice(len(Xt_fit), size=min(len(Xb), len(Xt_fit)), replace=False)]
        keep = [p.grad.copy() for p in model.params()]
        model.zero_grad()
        penalty, grads = mmd_pass(model, Xm, state["acts"])
        model.backward(np.zeros((len(Xm), model.widths[-1])), grads)
        for p, g in zip(model.params(), keep):
            p.grad += g
        return value + penalty

    def val_loss_fn(model, Xv, Yv):
        pred = model.forward(Xv)
        value = loss_d1(pred, Yv, model, config.reg)
        penalty, _ = mmd_pass(model, Xv if labelled else Xt_val, val_src)
        return value + penalty

    net.history_ = train_network(net, X_sup, Y_sup, loss_fn=loss_fn, val_loss_fn=val_loss_fn, **budget)
    return net
