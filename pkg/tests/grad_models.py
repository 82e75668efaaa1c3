"""Small models with a ``loss_and_grad`` interface for finite-difference checks."""
import numpy as np

from windkd.data_prep import ChannelScaler
from windkd.distill import KDConfig, RelErrBatch, _StudentView, kd_loss, rel_error
from windkd.nn.core import Dense, RegularizerWeights, l2_penalty, mse_loss
from windkd.nn.recurrent import BiLSTMNet, EDLSTMNet, LSTMCell, LSTMLayer
from windkd.transfer import KernelSpec, TLConfig, UnivariateTLNet, loss_d1, loss_d2, mmd_backward, resolve_bandwidth


class DenseModel:
    def __init__(self, n_in, n_out, activation, seed, l2_weight=0.0):
        self.layer = Dense(n_in, n_out, activation, rng=np.random.default_rng(seed))
        self.l2_weight = l2_weight

    def params(self):
        return self.layer.params()

    def loss_and_grad(self, X, Y):
        for p in self.params():
            p.zero_grad()
        loss, d = mse_loss(self.layer.forward(X), Y)
        self.layer.backward(d)
        if self.l2_weight:
            pen, grads = l2_penalty(self.layer.weight_params())
            loss += self.l2_weight * pen
            for p, g in zip(self.layer.weight_params(), grads):
                p.grad += self.l2_weight * g
        return loss


class LSTMSeqModel:
    """One LSTM layer over a sequence with an MSE on every hidden state."""

    def __init__(self, n_in, hidden, seed, reverse=False):
        self.layer = LSTMLayer(LSTMCell(n_in, hidden, np.random.default_rng(seed)), reverse=reverse)

    def params(self):
        return self.layer.params()

    def loss_and_grad(self, X, Y):
        for p in self.params():
            p.zero_grad()
        hs, _ = self.layer.forward(X)
        loss, d = mse_loss(hs, Y)
        self.layer.backward(d)
        return loss


def bilstm(n_features, seed, hidden=7, n_layers=1):
    return BiLSTMNet(n_features, hidden=hidden, n_layers=n_layers, n_outputs=7, seed=seed,
                     output_weights=np.linspace(1.0, 0.2, 7))


def edlstm(n_features, seed, hidden=7, n_layers=3, steps=7):
    return EDLSTMNet(n_features, hidden=hidden, n_layers=n_layers, decoder_steps=steps, seed=seed)


class LD1Model:
    """The univariate transfer net under MSE + beta * L2 + delta * sparse KL."""

    def __init__(self, seed, l2_weight=0.05, sparse_weight=0.3):
        self.net = UnivariateTLNet(reg=RegularizerWeights(l2_weight, sparse_weight, 0.2), seed=seed)

    def params(self):
        return self.net.params()

    def loss_and_grad(self, X, Y):
        value = self.net.loss_and_grad(X, Y)
        assert abs(value - loss_d1(self.net.forward(X), Y, self.net, self.net.reg)) < 1e-12
        return value


class LD2Model:
    """L_D1 on (X, Y) plus gamma * sum of hidden-layer MMDs against fixed source activations."""

    def __init__(self, seed, Xt, kernel="rbf", gamma=0.7):
        rng = np.random.default_rng(seed)
        self.net = UnivariateTLNet(reg=RegularizerWeights(0.05, 0.3, 0.2), seed=seed)
        self.config = TLConfig(gamma=gamma, reg=self.net.reg, kernel=KernelSpec(kernel))
        self.Xt = Xt
        src = UnivariateTLNet(seed=seed + 1000)
        src.forward(rng.normal(loc=2.0, scale=2.0, size=(9, 7)))
        self.src = [h.copy() for h in src.hidden]
        self.net.forward(Xt)
        self.bws = [resolve_bandwidth(self.config.kernel, s, h) for s, h in zip(self.src, self.net.hidden)]

    def params(self):
        return self.net.params()

    def loss(self, X, Y):
        value = self.net.loss(X, Y)
        self.net.forward(self.Xt)
        return loss_d2(value, self.src, self.net.hidden, self.config, self.bws)

    def loss_and_grad(self, X, Y):
        net = self.net
        value = net.loss_and_grad(X, Y)
        keep = [p.grad.copy() for p in net.params()]
        net.zero_grad()
        net.forward(self.Xt)
        penalty, grads = mmd_backward(net, self.src, self.config, self.bws)
        total = loss_d2(value, self.src, net.hidden, self.config, self.bws)
        assert abs(total - (value + penalty)) < 1e-12
        net.backward(np.zeros((len(self.Xt), 7)), grads)
        for p, g in zip(net.params(), keep):
            p.grad += g
        return total


class KDModel:
    """Bi-LSTM student under the KD loss with the comparison gate open."""

    def __init__(self, seed, X, hidden=7):
        rng = np.random.default_rng(seed)
        self.net = BiLSTMNet(X.shape[2], hidden=hidden, n_outputs=7, seed=seed)
        self.config = KDConfig(alpha=0.6)
        self.cap = 3000.0
        self.measured = rng.uniform(300, 2500, len(X))
        self.p_T = rng.uniform(0.0, 0.02, len(X))
        self.view = _StudentView(self.net, 0, ChannelScaler.from_dict({"mean": 1200.0, "std": 800.0}))
        self.gate_open = None

    def params(self):
        return self.net.params()

    def loss(self, X, Y):
        p_S = rel_error(self.measured, self.view.predict_kw(X), self.cap, self.config.floor_frac)
        return kd_loss(RelErrBatch(self.p_T, p_S), self.config)

    def loss_and_grad(self, X, Y):
        terms = self.view.loss_and_grad(X, self.measured, self.p_T, self.cap, self.config, None)
        self.gate_open = terms["gate_open"]
        return terms["total"]


def sequence_batch(seed, batch=3, steps=5, features=2):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(batch, steps, features))
