"""LSTM cell with backpropagation through time and the two sequence networks.

Gate order inside the stacked weight matrix is input, forget, output,
candidate. Sequences are ``(batch, time, features)``.
"""
import numpy as np

from .core import DTYPE, Dense, Dropout, Param, sigmoid, uniform_init


class LSTMCell:
    """Weights for one LSTM layer: ``W`` is ``(4H, D + H)``, ``b`` is ``(4H,)``."""

    def __init__(self, n_in, n_hidden=7, rng=None, name="lstm", forget_bias=1.0):
        rng = np.random.default_rng(rng)
        self.n_in = int(n_in)
        self.n_hidden = int(n_hidden)
        H, D = self.n_hidden, self.n_in
        self.W = Param(uniform_init(rng, D + H, (4 * H, D + H)), f"{name}.W")
        b = np.zeros(4 * H)
        b[H:2 * H] = forget_bias
        self.b = Param(b, f"{name}.b")

    def params(self):
        return [self.W, self.b]

    def weight_params(self):
        return [self.W]

    @property
    def Wx(self):
        return self.W.value[:, :self.n_in]

    @property
    def Wh(self):
        return self.W.value[:, self.n_in:]

    def param_count(self):
        H, D = self.n_hidden, self.n_in
        return 4 * (H * (H + D) + H)


def _gates(z, H):
    a = np.empty_like(z)
    a[..., :3 * H] = sigmoid(z[..., :3 * H])
    a[..., 3 * H:] = np.tanh(z[..., 3 * H:])
    return a


def lstm_step(cell, x_t, h_prev, c_prev):
    """One LSTM step. Returns ``(h_t, c_t, cache)``."""
    H = cell.n_hidden
    x_t = np.atleast_2d(np.asarray(x_t, dtype=DTYPE))
    h_prev = np.atleast_2d(np.asarray(h_prev, dtype=DTYPE))
    c_prev = np.atleast_2d(np.asarray(c_prev, dtype=DTYPE))
    if x_t.shape[-1] != cell.n_in or h_prev.shape[-1] != H or c_prev.shape[-1] != H:
        raise ValueError(
            f"shape mismatch: x {x_t.shape}, h {h_prev.shape}, c {c_prev.shape} "
            f"for cell with D={cell.n_in}, H={H}"
        )
    a = _gates(x_t @ cell.Wx.T + h_prev @ cell.Wh.T + cell.b.value, H)
    i, f, o, g = a[:, :H], a[:, H:2 * H], a[:, 2 * H:3 * H], a[:, 3 * H:]
    c_t = f * c_prev + i * g
    tc = np.tanh(c_t)
    h_t = o * tc
    return h_t, c_t, (x_t, h_prev, c_prev, a, tc)


def lstm_step_backward(cell, dh, dc, cache):
    """Backward through :func:`lstm_step`; accumulates into the cell's grads.

    Returns ``(dx, dh_prev, dc_prev)``.
    """
    x_t, h_prev, c_prev, a, tc = cache
    H = cell.n_hidden
    i, f, o, g = a[:, :H], a[:, H:2 * H], a[:, 2 * H:3 * H], a[:, 3 * H:]
    dc = dc + dh * o * (1.0 - tc * tc)
    dz = np.concatenate(
        [dc * g * i * (1 - i), dc * c_prev * f * (1 - f), dh * tc * o * (1 - o), dc * i * (1 - g * g)],
        axis=1,
    )
    cell.W.grad += dz.T @ np.concatenate([x_t, h_prev], axis=1)
    cell.b.grad += dz.sum(axis=0)
    dxh = dz @ cell.W.value
    return dxh[:, :cell.n_in], dxh[:, cell.n_in:], dc * f


class LSTMLayer:
    """Runs a cell over a whole sequence, forward or reversed in time.

    Outputs are always indexed in the original time order; the final state is
    the state after the last *processed* step (t = 0 for a reversed layer).
    """

    def __init__(self, cell, reverse=False):
        self.cell = cell
        self.reverse = reverse
        self._cache = None

    def params(self):
        return self.cell.params()

    def weight_params(self):
        return self.cell.weight_params()

    def forward(self, x, h0=None, c0=None):
        cell = self.cell
        B, T, D = x.shape
        if D != cell.n_in:
            raise ValueError(f"expected {cell.n_in} input features, got {D}")
        H = cell.n_hidden
        h = np.zeros((B, H)) if h0 is None else h0
        c = np.zeros((B, H)) if c0 is None else c0
        xproj = x @ cell.Wx.T + cell.b.value
        Wh_T = cell.Wh.T
        hs = np.empty((B, T, H))
        A = np.empty((B, T, 4 * H))
        Cp = np.empty((B, T, H))
        Hp = np.empty((B, T, H))
        TC = np.empty((B, T, H))
        order = range(T - 1, -1, -1) if self.reverse else range(T)
        for t in order:
            Hp[:, t] = h
            Cp[:, t] = c
            a = _gates(xproj[:, t] + h @ Wh_T, H)
            c = a[:, H:2 * H] * c + a[:, :H] * a[:, 3 * H:]
            tc = np.tanh(c)
            h = a[:, 2 * H:3 * H] * tc
            A[:, t] = a
            TC[:, t] = tc
            hs[:, t] = h
        self._cache = (x, A, Cp, Hp, TC)
        return hs, (h, c)

    def backward(self, dhs, dh_final=None, dc_final=None):
        """Returns ``(dx, dh0, dc0)`` given gradients on every output step."""
        cell = self.cell
        x, A, Cp, Hp, TC = self._cache
        B, T, H = dhs.shape
        Wh = cell.Wh
        dh_next = np.zeros((B, H)) if dh_final is None else dh_final.copy()
        dc_next = np.zeros((B, H)) if dc_final is None else dc_final.copy()
        dZ = np.empty((B, T, 4 * H))
        order = range(T) if self.reverse else range(T - 1, -1, -1)
        for t in order:
            a = A[:, t]
            i, f, o, g = a[:, :H], a[:, H:2 * H], a[:, 2 * H:3 * H], a[:, 3 * H:]
            tc = TC[:, t]
            dh = dhs[:, t] + dh_next
            dc = dc_next + dh * o * (1.0 - tc * tc)
            dz = dZ[:, t]
            dz[:, :H] = dc * g * i * (1.0 - i)
            dz[:, H:2 * H] = dc * Cp[:, t] * f * (1.0 - f)
            dz[:, 2 * H:3 * H] = dh * tc * o * (1.0 - o)
            dz[:, 3 * H:] = dc * i * (1.0 - g * g)
            dh_next = dz @ Wh
            dc_next = dc * f
        D = cell.n_in
        dZ2 = dZ.reshape(B * T, 4 * H)
        cell.W.grad[:, :D] += dZ2.T @ x.reshape(B * T, D)
        cell.W.grad[:, D:] += dZ2.T @ Hp.reshape(B * T, H)
        cell.b.grad += dZ2.sum(axis=0)
        dx = dZ @ cell.Wx
        return dx, dh_next, dc_next


class _SequenceNet:
    """Shared plumbing: parameter access and a weighted-MSE loss."""

    dropout_rate = 0.0
    output_weights = None

    def params(self):
        raise NotImplementedError

    def weight_params(self):
        raise NotImplementedError

    def param_count(self):
        return int(sum(p.size for p in self.params()))

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()

    def loss(self, X, Y):
        """Inference-mode weighted MSE without touching gradients."""
        return weighted_mse(self.forward(X), Y, self.output_weights)[0]

    def loss_and_grad(self, X, Y, training=False, rng=None):
        """Weighted MSE over output columns; leaves gradients in the params."""
        self.zero_grad()
        pred = self.forward(X, training=training, rng=rng)
        loss, dpred = weighted_mse(pred, Y, self.output_weights)
        self.backward(dpred)
        return loss


def weighted_mse(pred, target, col_weights=None):
    """``sum_{b,c} w_c (pred - target)^2 / (B * sum(w))`` and its gradient.

    Equal weights reduce this to the plain mean over all entries.
    """
    pred = np.asarray(pred, dtype=DTYPE)
    target = np.asarray(target, dtype=DTYPE)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs target {target.shape}")
    if pred.ndim == 1:
        pred = pred[:, None]
        target = target[:, None]
    w = np.ones(pred.shape[1]) if col_weights is None else np.asarray(col_weights, dtype=DTYPE)
    norm = pred.shape[0] * w.sum()
    diff = pred - target
    loss = float(np.sum(w * diff * diff) / norm)
    grad = 2.0 * w * diff / norm
    return loss, grad.reshape(np.shape(pred))


class BiLSTMNet(_SequenceNet):
    """Bidirectional LSTM with a dense linear head.

    Each bidirectional layer holds a forward-time and a reverse-time LSTM of
    ``hidden`` units; stacked layers consume the concatenated sequences. The
    head reads the final forward state and the final reverse state.
    """

    kind = "bilstm"

    def __init__(self, n_features, hidden=7, n_layers=1, n_outputs=7, dropout_rate=0.0,
                 seed=0, output_weights=None):
        rng = np.random.default_rng(seed)
        self.n_features = int(n_features)
        self.hidden = int(hidden)
        self.n_layers = int(n_layers)
        self.n_outputs = int(n_outputs)
        self.dropout_rate = float(dropout_rate)
        self.output_weights = output_weights
        self.layers = []
        width = self.n_features
        for k in range(self.n_layers):
            fwd = LSTMLayer(LSTMCell(width, hidden, rng, name=f"bi{k}.fwd"))
            bwd = LSTMLayer(LSTMCell(width, hidden, rng, name=f"bi{k}.bwd"), reverse=True)
            self.layers.append((fwd, bwd))
            width = 2 * hidden
        self.dropout = Dropout(dropout_rate)
        self.head = Dense(2 * hidden, n_outputs, activation="identity", rng=rng, name="head")

    def topology(self):
        return {
            "kind": self.kind,
            "n_features": self.n_features,
            "hidden": self.hidden,
            "n_layers": self.n_layers,
            "n_outputs": self.n_outputs,
            "dropout_rate": self.dropout_rate,
        }

    def params(self):
        out = []
        for fwd, bwd in self.layers:
            out += fwd.params() + bwd.params()
        return out + self.head.params()

    def weight_params(self):
        out = []
        for fwd, bwd in self.layers:
            out += fwd.weight_params() + bwd.weight_params()
        return out + self.head.weight_params()

    def forward(self, X, training=False, rng=None):
        seq = X
        for fwd, bwd in self.layers:
            hf, _ = fwd.forward(seq)
            hb, _ = bwd.forward(seq)
            seq = np.concatenate([hf, hb], axis=2)
        H = self.hidden
        feat = np.concatenate([seq[:, -1, :H], seq[:, 0, H:]], axis=1)
        feat = self.dropout.forward(feat, training=training, rng=rng)
        return self.head.forward(feat)

    def backward(self, dout):
        H = self.hidden
        dfeat = self.dropout.backward(self.head.backward(dout))
        B = dfeat.shape[0]
        T = self.layers[-1][0]._cache[0].shape[1]
        dseq = np.zeros((B, T, 2 * H))
        dseq[:, -1, :H] = dfeat[:, :H]
        dseq[:, 0, H:] = dfeat[:, H:]
        for fwd, bwd in reversed(self.layers):
            dxf, _, _ = fwd.backward(dseq[:, :, :H])
            dxb, _, _ = bwd.backward(dseq[:, :, H:])
            dseq = dxf + dxb
        return dseq


class EDLSTMNet(_SequenceNet):
    """Stacked LSTM encoder-decoder.

    The encoder's top final hidden state is the fixed-length context; it is
    repeated as the decoder input at every decoder step, and each decoder
    layer starts from the final (h, c) of the matching encoder layer. A
    linear head maps each decoder step to one value, so the output is
    ``(batch, decoder_steps)`` with the last column being the furthest step.
    """

    kind = "edlstm"

    def __init__(self, n_features, hidden=7, n_layers=3, decoder_steps=7, dropout_rate=0.0,
                 seed=0, output_weights=None):
        rng = np.random.default_rng(seed)
        self.n_features = int(n_features)
        self.hidden = int(hidden)
        self.n_layers = int(n_layers)
        self.decoder_steps = int(decoder_steps)
        self.dropout_rate = float(dropout_rate)
        self.output_weights = output_weights
        self.encoder = []
        width = self.n_features
        for k in range(self.n_layers):
            self.encoder.append(LSTMLayer(LSTMCell(width, hidden, rng, name=f"enc{k}")))
            width = hidden
        self.decoder = [
            LSTMLayer(LSTMCell(hidden, hidden, rng, name=f"dec{k}")) for k in range(self.n_layers)
        ]
        self.dropout = Dropout(dropout_rate)
        self.head = Dense(hidden, 1, activation="identity", rng=rng, name="head")
        self._context = None

    @property
    def n_outputs(self):
        return self.decoder_steps

    def topology(self):
        return {
            "kind": self.kind,
            "n_features": self.n_features,
            "hidden": self.hidden,
            "n_layers": self.n_layers,
            "decoder_steps": self.decoder_steps,
            "dropout_rate": self.dropout_rate,
        }

    def params(self):
        out = []
        for layer in self.encoder + self.decoder:
            out += layer.params()
        return out + self.head.params()

    def weight_params(self):
        out = []
        for layer in self.encoder + self.decoder:
            out += layer.weight_params()
        return out + self.head.weight_params()

    def encode(self, X):
        """Run the encoder; returns the context and per-layer final states."""
        seq = X
        states = []
        for layer in self.encoder:
            seq, state = layer.forward(seq)
            states.append(state)
        return states[-1][0], states

    def forward(self, X, training=False, rng=None, steps=None):
        steps = self.decoder_steps if steps is None else int(steps)
        if steps < 1:
            raise ValueError("decoder needs at least one step")
        context, states = self.encode(X)
        self._context = context
        ctx = self.dropout.forward(context, training=training, rng=rng)
        seq = np.repeat(ctx[:, None, :], steps, axis=1)
        for layer, (h0, c0) in zip(self.decoder, states):
            seq, _ = layer.forward(seq, h0, c0)
        return self.head.forward(seq)[:, :, 0]

    def forecast(self, X, horizon_steps):
        """Inference-only unroll of ``horizon_steps`` decoder outputs."""
        return self.forward(X, training=False, steps=horizon_steps)

    def backward(self, dout):
        dseq = self.head.backward(dout[:, :, None])
        dstates = []
        for layer in reversed(self.decoder):
            dseq, dh0, dc0 = layer.backward(dseq)
            dstates.append((dh0, dc0))
        dstates.reverse()
        dctx = self.dropout.backward(dseq.sum(axis=1))
        B, T = self.encoder[0]._cache[0].shape[:2]
        H = self.hidden
        dseq = np.zeros((B, T, H))
        for k in range(self.n_layers - 1, -1, -1):
            dh, dc = dstates[k]
            if k == self.n_layers - 1:
                dh = dh + dctx
            dseq, _, _ = self.encoder[k].backward(dseq, dh, dc)
        return dseq


NETWORKS = {BiLSTMNet.kind: BiLSTMNet, EDLSTMNet.kind: EDLSTMNet}
