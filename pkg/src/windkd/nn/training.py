"""Mini-batch training loop with early stopping on a validation split."""
from dataclasses import dataclass, field

import numpy as np

from .core import Adam, EarlyStopSpec
from .recurrent import weighted_mse


@dataclass
class TrainResult:
    loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = np.inf
    stopped_early: bool = False

    @property
    def epochs_run(self):
        return len(self.loss)

    def best_so_far(self):
        return np.minimum.accumulate(np.asarray(self.val_loss))


def default_val_loss(net, X, Y):
    return weighted_mse(net.forward(X, training=False), Y, net.output_weights)[0]


def snapshot(net):
    return [p.value.copy() for p in net.params()]


def restore(net, values):
    for p, v in zip(net.params(), values):
        p.value[...] = v


def holdout_split(n, validation_fraction):
    """Chronological holdout: the last ``validation_fraction`` of ``n`` rows."""
    n_val = max(1, int(round(n * validation_fraction)))
    if n_val >= n:
        raise ValueError("validation split leaves no training rows")
    idx = np.arange(n)
    return idx[:-n_val], idx[-n_val:]


def train_network(net, X, Y, *, optimizer=None, early_stop=None, batch_size=64, max_epochs=200,
                  validation_data=None, validation_fraction=0.1, splits=None, seed=0,
                  loss_fn=None, val_loss_fn=None, restore_best=True, include_initial=False):
    """Train ``net`` in place and return a :class:`TrainResult`.

    Validation comes from, in order of precedence: ``validation_data``; a list
    of ``(train_idx, val_idx)`` ``splits`` cycled one per epoch; or a
    chronological holdout of the last ``validation_fraction`` of the rows.

    ``loss_fn(net, Xb, Yb, rng)`` must return the batch loss and leave
    gradients in the parameters; it defaults to the net's own weighted MSE
    with dropout active. With ``include_initial`` the starting weights are
    scored first and kept if no epoch beats them, so fine-tuning never
    returns a net that validates worse than where it started.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if len(X) == 0:
        raise ValueError("cannot train on an empty set")
    if len(X) != len(Y):
        raise ValueError(f"X has {len(X)} rows but Y has {len(Y)}")
    optimizer = Adam() if optimizer is None else optimizer
    early_stop = EarlyStopSpec() if early_stop is None else early_stop
    rng = np.random.default_rng(seed)
    if loss_fn is None:
        def loss_fn(net, Xb, Yb, rng):
            return net.loss_and_grad(Xb, Yb, training=True, rng=rng)
    val_loss_fn = default_val_loss if val_loss_fn is None else val_loss_fn

    if validation_data is not None:
        splits = [(np.arange(len(X)), None)]
    elif splits is None:
        splits = [holdout_split(len(X), validation_fraction)]

    params = net.params()
    result = TrainResult()
    best = snapshot(net)
    waited = 0
    if include_initial:
        tr0, val0 = splits[0]
        val = val_loss_fn(net, *validation_data) if val0 is None else val_loss_fn(net, X[val0], Y[val0])
        result.best_val_loss = float(val)
    for epoch in range(max_epochs):
        train_idx, val_idx = splits[epoch % len(splits)]
        order = rng.permutation(train_idx)
        total = 0.0
        for start in range(0, len(order), batch_size):
            rows = order[start:start + batch_size]
            total += loss_fn(net, X[rows], Y[rows], rng) * len(rows)
            optimizer.step(params)
        result.loss.append(total / len(order))
        if val_idx is None:
            val = val_loss_fn(net, *validation_data)
        else:
            val = val_loss_fn(net, X[val_idx], Y[val_idx])
        result.val_loss.append(float(val))
        if val < result.best_val_loss - early_stop.min_delta:
            result.best_val_loss = float(val)
            result.best_epoch = epoch
            best = snapshot(net)
            waited = 0
        else:
            waited += 1
            if waited >= early_stop.patience:
                result.stopped_early = True
                break
    if restore_best and (result.best_epoch >= 0 or include_initial):
        restore(net, best)
    return result
