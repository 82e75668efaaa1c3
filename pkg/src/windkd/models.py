"""Scikit-learn style regressors around the from-scratch networks.

Sequence regressors take flat lag records ``[power lags, speed lags,
(nwp)]`` as ``X``. ``y`` is either the 1-D horizon target or the 7-wide
power path ``t+n-6 .. t+n`` (last column is the target); with a path the
six extra outputs are trained as auxiliary targets.
"""
import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .data_prep import PATH_WIDTH, records_to_sequences
from .nn.core import Adam, EarlyStopSpec, RegularizerWeights
from .nn.recurrent import BiLSTMNet, EDLSTMNet
from .nn.training import train_network
from .transfer import UnivariateTLNet


def check_records(X, lag_count):
    """Validate a record matrix and return it with its NWP flag."""
    X = check_array(X, dtype=np.float64, ensure_2d=True)
    width = X.shape[1]
    if width == 2 * lag_count:
        return X, False
    if width == 2 * lag_count + 1:
        return X, True
    raise ValueError(f"records must have {2 * lag_count} or {2 * lag_count + 1} columns, got {width}")


def check_path(y, n_rows):
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    if y.ndim != 2 or y.shape[0] != n_rows or y.shape[1] not in (1, PATH_WIDTH):
        raise ValueError(f"y must be ({n_rows},) or ({n_rows}, {PATH_WIDTH})")
    if not np.all(np.isfinite(y)):
        raise ValueError("y contains non-finite values")
    return y


def kfold_rotation(n, n_folds):
    """Contiguous folds over ``n`` rows as ``(train_idx, val_idx)`` pairs."""
    if n_folds < 2 or n < n_folds:
        raise ValueError("need at least two folds and one row per fold")
    edges = np.linspace(0, n, n_folds + 1).astype(int)
    idx = np.arange(n)
    return [(np.concatenate([idx[:a], idx[b:]]), idx[a:b]) for a, b in zip(edges[:-1], edges[1:])]


class _SequenceRegressor(RegressorMixin, BaseEstimator):
    def __init__(self, hidden=7, n_layers=1, dropout_rate=0.0, batch_size=64, max_epochs=200,
                 patience=10, learning_rate=1e-3, aux_weight=0.2, validation_fraction=0.1,
                 lag_count=7, random_state=0):
        self.hidden = hidden
        self.n_layers = n_layers
        self.dropout_rate = dropout_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.learning_rate = learning_rate
        self.aux_weight = aux_weight
        self.validation_fraction = validation_fraction
        self.lag_count = lag_count
        self.random_state = random_state

    # Subclasses map between the path layout and the net's output columns.
    def _build(self, n_features, weights):
        raise NotImplementedError

    def _to_outputs(self, path):
        raise NotImplementedError

    def _from_outputs(self, out):
        raise NotImplementedError

    def _weights(self, have_path):
        aux = self.aux_weight if have_path else 0.0
        return self._to_outputs(np.r_[np.full(PATH_WIDTH - 1, aux), 1.0][None, :])[0]

    def fit(self, X, y, splits=None, validation_data=None):
        X, with_nwp = check_records(X, self.lag_count)
        Y = check_path(y, len(X))
        have_path = Y.shape[1] == PATH_WIDTH
        if not have_path:
            Y = np.repeat(Y, PATH_WIDTH, axis=1)
        self.with_nwp_ = with_nwp
        self.n_features_in_ = X.shape[1]
        self.net_ = self._build(3 if with_nwp else 2, self._weights(have_path))
        val = None
        if validation_data is not None:
            Xv, yv = validation_data
            Xv, _ = check_records(Xv, self.lag_count)
            Yv = check_path(yv, len(Xv))
            if Yv.shape[1] == 1:
                Yv = np.repeat(Yv, PATH_WIDTH, axis=1)
            val = (self._seq(Xv), self._to_outputs(Yv))
        self.history_ = train_network(
            self.net_, self._seq(X), self._to_outputs(Y),
            optimizer=Adam(lr=self.learning_rate),
            early_stop=EarlyStopSpec(patience=self.patience),
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            validation_data=val,
            validation_fraction=self.validation_fraction,
            splits=splits,
            seed=self.random_state,
        )
        return self

    def _seq(self, X):
        return records_to_sequences(X, self.lag_count, self.with_nwp_)

    def predict_path(self, X):
        check_is_fitted(self, "net_")
        X, with_nwp = check_records(X, self.lag_count)
        if with_nwp != self.with_nwp_:
            raise ValueError("NWP column presence differs from the fitted data")
        return self._from_outputs(self.net_.forward(self._seq(X), training=False))

    def predict(self, X):
        return self.predict_path(X)[:, -1]

    @property
    def target_col_(self):
        """Net output column holding the horizon target."""
        return int(np.argmax(self._to_outputs(np.arange(PATH_WIDTH)[None, :])[0]))


class BiLSTMRegressor(_SequenceRegressor):
    """Bidirectional LSTM; head unit 0 is the target, units 1..6 step back in time."""

    def _build(self, n_features, weights):
        return BiLSTMNet(n_features, hidden=self.hidden, n_layers=self.n_layers,
                         n_outputs=PATH_WIDTH, dropout_rate=self.dropout_rate,
                         seed=self.random_state, output_weights=weights)

    def _to_outputs(self, path):
        return path[:, ::-1]

    def _from_outputs(self, out):
        return out[:, ::-1]


class EDLSTMRegressor(_SequenceRegressor):
    """Encoder-decoder LSTM; decoder step k forecasts path column k."""

    def __init__(self, hidden=7, n_layers=3, dropout_rate=0.0, batch_size=64, max_epochs=200,
                 patience=10, learning_rate=1e-3, aux_weight=0.2, validation_fraction=0.1,
                 lag_count=7, random_state=0):
        super().__init__(hidden=hidden, n_layers=n_layers, dropout_rate=dropout_rate,
                         batch_size=batch_size, max_epochs=max_epochs, patience=patience,
                         learning_rate=learning_rate, aux_weight=aux_weight,
                         validation_fraction=validation_fraction, lag_count=lag_count,
                         random_state=random_state)

    def _build(self, n_features, weights):
        return EDLSTMNet(n_features, hidden=self.hidden, n_layers=self.n_layers,
                         decoder_steps=PATH_WIDTH, dropout_rate=self.dropout_rate,
                         seed=self.random_state, output_weights=weights)

    def _to_outputs(self, path):
        return path

    def _from_outputs(self, out):
        return out


class TLNetRegressor(RegressorMixin, BaseEstimator):
    """7-wide window to 7-wide window regressor on :class:`UnivariateTLNet`."""

    def __init__(self, l2_weight=1e-4, sparse_weight=0.0, sparsity_target=0.1, batch_size=64,
                 max_epochs=200, patience=10, learning_rate=1e-3, validation_fraction=0.1,
                 random_state=0):
        self.l2_weight = l2_weight
        self.sparse_weight = sparse_weight
        self.sparsity_target = sparsity_target
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.learning_rate = learning_rate
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    @property
    def reg(self):
        return RegularizerWeights(self.l2_weight, self.sparse_weight, self.sparsity_target)

    def fit(self, X, y):
        X = check_array(X, dtype=np.float64)
        Y = check_array(y, dtype=np.float64)
        if X.shape[1] != PATH_WIDTH or Y.shape != X.shape:
            raise ValueError(f"X and y must both be (n, {PATH_WIDTH})")
        self.n_features_in_ = PATH_WIDTH
        self.net_ = UnivariateTLNet(reg=self.reg, seed=self.random_state)
        self.history_ = train_network(
            self.net_, X, Y,
            optimizer=Adam(lr=self.learning_rate),
            early_stop=EarlyStopSpec(patience=self.patience),
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            validation_fraction=self.validation_fraction,
            seed=self.random_state,
        )
        self.train_mse_ = float(np.mean((self.net_.forward(X) - Y) ** 2))
        return self

    def predict(self, X):
        check_is_fitted(self, "net_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != PATH_WIDTH:
            raise ValueError(f"X must have {PATH_WIDTH} columns")
        return self.net_.forward(X)
