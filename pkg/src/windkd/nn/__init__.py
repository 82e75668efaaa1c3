from .core import (
    Adam,
    Dense,
    Dropout,
    EarlyStopSpec,
    Param,
    RegularizerWeights,
    adam_step,
    grad_check,
    l2_penalty,
    mse_loss,
    sigmoid,
    sparse_kl_penalty,
)
from .recurrent import (
    BiLSTMNet,
    EDLSTMNet,
    LSTMCell,
    LSTMLayer,
    lstm_step,
    lstm_step_backward,
    weighted_mse,
)
from .training import TrainResult, train_network

__all__ = [
    "Adam",
    "BiLSTMNet",
    "Dense",
    "Dropout",
    "EDLSTMNet",
    "EarlyStopSpec",
    "LSTMCell",
    "LSTMLayer",
    "Param",
    "RegularizerWeights",
    "TrainResult",
    "adam_step",
    "grad_check",
    "l2_penalty",
    "lstm_step",
    "lstm_step_backward",
    "mse_loss",
    "sigmoid",
    "sparse_kl_penalty",
    "train_network",
    "weighted_mse",
]
