"""Regression knowledge distillation from a park teacher to a turbine student.

Relative errors put park and turbine on a common footing: the teacher's
error is measured against park power and capacity, the student's against
turbine power and capacity. The hard term pushes the student's own
relative error to zero; the comparison term only switches on while the
student is still worse than the teacher, pulling it toward the teacher's
error level.
"""
import csv
from dataclasses import dataclass

import numpy as np

from .nn.core import Adam, EarlyStopSpec
from .nn.training import restore, snapshot


def _denominator(measured, cap, floor_frac):
    if cap <= 0:
        raise ValueError("capacity must be positive")
    if floor_frac <= 0:
        raise ValueError("floor_frac must be positive")
    return np.maximum(np.abs(measured), floor_frac * cap)


def rel_error(measured, predicted, cap, floor_frac=0.01):
    """``|m - p| / max(|m|, floor_frac * cap)``; the floor guards zero-power hours."""
    measured = np.asarray(measured, dtype=np.float64)
    predicted = np.asarray(predicted, dtype=np.float64)
    out = np.abs(measured - predicted) / _denominator(measured, cap, floor_frac)
    return float(out) if out.ndim == 0 else out


def rel_error_grad(measured, predicted, cap, floor_frac=0.01):
    """Derivative of :func:`rel_error` with respect to ``predicted`` (0 at equality)."""
    measured = np.asarray(measured, dtype=np.float64)
    predicted = np.asarray(predicted, dtype=np.float64)
    return np.sign(predicted - measured) / _denominator(measured, cap, floor_frac)


@dataclass
class RelErrBatch:
    """Time-aligned teacher (park) and student (turbine) relative errors."""

    p_hat_T: np.ndarray
    p_hat_S: np.ndarray

    def __post_init__(self):
        self.p_hat_T = np.asarray(self.p_hat_T, dtype=np.float64).ravel()
        self.p_hat_S = np.asarray(self.p_hat_S, dtype=np.float64).ravel()
        if self.p_hat_T.shape != self.p_hat_S.shape:
            raise ValueError("teacher and student batches are not aligned")
        if np.any(self.p_hat_T < 0) or np.any(self.p_hat_S < 0):
            raise ValueError("relative errors must be non-negative")

    @property
    def p_S(self):
        return np.zeros_like(self.p_hat_S)

    def __len__(self):
        return len(self.p_hat_S)


@dataclass
class KDConfig:
    """Distillation weights and the student's KD fine-tuning schedule."""

    alpha: float = 0.8
    floor_frac: float = 0.01
    stop_on_beating_teacher: bool = True
    per_sample_gate: bool = False
    max_epochs: int = 20
    learning_rate: float = 3e-4
    batch_size: int = 64
    patience: int = 5
    validation_fraction: float = 0.1
    select_on: str = "mse"

    def __post_init__(self):
        if self.select_on not in ("mse", "kd"):
            raise ValueError("select_on must be 'mse' or 'kd'")
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must lie in [0, 1]")
        if self.floor_frac <= 0:
            raise ValueError("floor_frac must be positive")


def _gate(p_hat_S, p_hat_T, per_sample):
    if per_sample:
        return p_hat_S > p_hat_T
    return np.full(p_hat_S.shape, np.linalg.norm(p_hat_S) > np.linalg.norm(p_hat_T))


def compare_term(p_hat_S, p_hat_T, per_sample=False):
    """``||p_S - p_T||^2`` when the student's error norm is strictly larger, else 0."""
    b = RelErrBatch(p_hat_T, p_hat_S)
    open_ = _gate(b.p_hat_S, b.p_hat_T, per_sample)
    diff = np.where(open_, b.p_hat_S - b.p_hat_T, 0.0)
    return float(np.sum(diff * diff))


def kd_loss_terms(batch, config):
    """Hard term, comparison term, total and the gradient wrt ``p_hat_S``.

    ``total = (alpha * sum p_S^2 + (1 - alpha) * compare) / n``.
    """
    n = len(batch)
    if n == 0:
        raise ValueError("empty batch")
    s = batch.p_hat_S
    hard = float(np.sum(s * s))
    grad = 2.0 * config.alpha * s
    if config.alpha == 1:
        return {"hard": hard, "compare": 0.0, "total": hard / n, "grad": grad / n, "gate_open": 0.0}
    open_ = _gate(s, batch.p_hat_T, config.per_sample_gate)
    diff = np.where(open_, s - batch.p_hat_T, 0.0)
    comp = float(np.sum(diff * diff))
    grad = grad + 2.0 * (1.0 - config.alpha) * diff
    total = (config.alpha * hard + (1.0 - config.alpha) * comp) / n
    return {"hard": hard, "compare": comp, "total": total, "grad": grad / n,
            "gate_open": float(np.mean(open_))}


def kd_loss(batch, config):
    return kd_loss_terms(batch, config)["total"]


def kd_loss_min_form(batch, config):
    """The untuned general form: hard term plus ``min`` of the two discrepancies.

    Kept for comparison only; training uses the gated form.
    """
    s, t = batch.p_hat_S, batch.p_hat_T
    soft = np.minimum(s * s, (s - t) ** 2)
    return float(np.sum(config.alpha * s * s + (1.0 - config.alpha) * soft) / len(batch))


def align_targets(park_times, turbine_times):
    """Indices of the common target timestamps in each set."""
    common, ip, it = np.intersect1d(park_times, turbine_times, return_indices=True)
    if len(common) == 0:
        raise ValueError("park and turbine sets share no target timestamps")
    return ip, it


@dataclass
class KDLogRow:
    epoch: int
    hard_term: float
    compare_term: float
    total: float
    gate_open_fraction: float


def write_kd_log(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "hard_term", "compare_term", "total", "gate_open_fraction"])
        for r in rows:
            w.writerow([r.epoch, f"{r.hard_term:.10g}", f"{r.compare_term:.10g}",
                        f"{r.total:.10g}", f"{r.gate_open_fraction:.6f}"])


class _StudentView:
    """Main-target prediction of a student net in kW and its backward path."""

    def __init__(self, net, target_col, scaler):
        self.net = net
        self.col = target_col
        self.mean = scaler.mean
        self.std = scaler.std

    def predict_kw(self, X):
        return self.net.forward(X, training=False)[:, self.col] * self.std + self.mean

    def loss_and_grad(self, X, measured_kw, p_hat_T, cap, config, rng):
        self.net.zero_grad()
        out = self.net.forward(X, training=True, rng=rng)
        pred_kw = out[:, self.col] * self.std + self.mean
        batch = RelErrBatch(p_hat_T, rel_error(measured_kw, pred_kw, cap, config.floor_frac))
        terms = kd_loss_terms(batch, config)
        dout = np.zeros_like(out)
        dout[:, self.col] = terms["grad"] * rel_error_grad(measured_kw, pred_kw, cap, config.floor_frac) * self.std
        self.net.backward(dout)
        return terms


def teacher_rel_errors(teacher, park_set, floor_frac, target_col=-1):
    """Relative errors of the frozen park teacher on its own windows."""
    scaler = park_set.scaler_power
    pred = teacher.forward(park_set.sequences(), training=False)[:, target_col]
    return rel_error(park_set.measured_kw(), scaler.inverse_transform(pred), park_set.capacity_kw, floor_frac)


def train_student_kd(student, teacher, park_set, turbine_set, config, *, target_col=0, seed=0,
                     log_path=None):
    """Fine-tune ``student`` (in place) under the KD loss against ``teacher``.

    ``park_set`` and ``turbine_set`` are windowed sets for the same horizon;
    rows are matched on target timestamps. The last ``validation_fraction``
    of the aligned rows is held out; after each epoch, training stops once
    the student's mean validation relative error is below the teacher's.
    The weights kept are the best validation checkpoint (starting weights
    included) by ``config.select_on``: standardized MSE or the KD loss.
    With ``alpha == 1`` the teacher is never evaluated. Returns the student
    and the per-epoch log.
    """
    ip, it = align_targets(park_set.target_times, turbine_set.target_times)
    X = turbine_set.sequences()[it]
    measured = turbine_set.measured_kw()[it]
    targets = turbine_set.targets[it]
    cap = turbine_set.capacity_kw
    if config.alpha == 1:
        p_T = np.zeros(len(it))
    else:
        p_T = teacher_rel_errors(teacher, park_set, config.floor_frac)[ip]

    n = len(it)
    n_val = max(1, int(round(n * config.validation_fraction)))
    if n_val >= n:
        raise ValueError("too few aligned rows for a validation split")
    tr, va = np.arange(n - n_val), np.arange(n - n_val, n)
    view = _StudentView(student, target_col, turbine_set.scaler_power)
    opt = Adam(lr=config.learning_rate)
    stop = EarlyStopSpec(patience=config.patience)
    rng = np.random.default_rng(seed)
    params = student.params()

    def val_terms():
        pred = view.predict_kw(X[va])
        p_S = rel_error(measured[va], pred, cap, config.floor_frac)
        if config.select_on == "kd":
            score = kd_loss_terms(RelErrBatch(p_T[va], p_S), config)["total"]
        else:
            score = float(np.mean(((pred - view.mean) / view.std - targets[va]) ** 2))
        return score, float(np.mean(p_S))

    teacher_val = None if config.alpha == 1 else float(np.mean(p_T[va]))
    best_total, _ = val_terms()
    best = snapshot(student)
    waited = 0
    log = []
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(tr)
        acc = {"hard": 0.0, "compare": 0.0, "total": 0.0, "gate_open": 0.0}
        for start in range(0, len(order), config.batch_size):
            rows = order[start:start + config.batch_size]
            terms = view.loss_and_grad(X[rows], measured[rows], p_T[rows], cap, config, rng)
            opt.step(params)
            for k in acc:
                acc[k] += terms[k] * (len(rows) if k in ("total", "gate_open") else 1.0)
        log.append(KDLogRow(epoch, acc["hard"] / len(order), acc["compare"] / len(order),
                            acc["total"] / len(order), acc["gate_open"] / len(order)))
        score, student_val = val_terms()
        if score < best_total:
            best_total = score
            best = snapshot(student)
            waited = 0
        else:
            waited += 1
        if config.stop_on_beating_teacher and teacher_val is not None and student_val < teacher_val:
            break
        if waited >= stop.patience:
            break
    restore(student, best)
    if log_path is not None:
        write_kd_log(log, log_path)
    return student, log
