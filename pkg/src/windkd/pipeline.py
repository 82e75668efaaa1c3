"""Park teachers, the error relation, turbine bundles and label-free test prediction.

Stage 1 trains two park encoder-decoders, one without and one with the NWP
value at the target hour, and fits ``g_p`` from windows of the first
model's residuals to windows of the second's. Stage 2 builds a turbine
model (by default a distilled Bi-LSTM student), adapts ``g_p`` to the
turbine's residual windows and corrects the training predictions with it.
Because that correction needs measured power, a corrector mapping windows
of uncorrected predictions to windows of corrected ones is fitted on the
training split and is the only thing applied at test time.
"""
import copy
from dataclasses import dataclass, field
import time

import numpy as np

from .data_prep import (
    PATH_WIDTH,
    AugmentSpec,
    ChannelScaler,
    RawSeries,
    WindowSpec,
    augment_white_noise,
    frame_from_raw,
    make_windows,
    records_to_sequences,
    split_train_test,
)
from .distill import KDConfig, train_student_kd
from .models import BiLSTMRegressor, EDLSTMRegressor, TLNetRegressor, kfold_rotation
from .nn import serialization
from .nn.core import RegularizerWeights
from .nn.recurrent import NETWORKS
from .transfer import TLConfig, UnivariateTLNet, fine_tune


class StageError(RuntimeError):
    """A pipeline failure tagged with the stage that raised it."""

    def __init__(self, stage, message):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass
class StageBudget:
    max_epochs: int = 200
    patience: int = 10
    batch_size: int = 64
    learning_rate: float = 1e-3


@dataclass
class PipelineConfig:
    lag_count: int = 7
    split_fraction: float = 0.65
    augment: AugmentSpec = field(default_factory=AugmentSpec)
    n_folds: int = 10
    aux_weight: float = 0.2
    teacher: StageBudget = field(default_factory=StageBudget)
    turbine: StageBudget = field(default_factory=StageBudget)
    tlnet: StageBudget = field(default_factory=StageBudget)
    kd: KDConfig = field(default_factory=KDConfig)
    tl: TLConfig = field(default_factory=lambda: TLConfig(reg=RegularizerWeights(l2_weight=1e-6)))
    tl_l2: float = 1e-6

    def window(self, horizon):
        return WindowSpec(lag_count=self.lag_count, horizon=horizon)


# ---------------------------------------------------------------- data

def frames_from_dataset(dataset):
    """Hourly frames for every entity of a :class:`ParkDataset`."""
    frames = {}
    for name, chans in dataset.entities.items():
        raw = {c: RawSeries.from_samples(dataset.timestamps, v, c) for c, v in chans.items()}
        frames[name] = frame_from_raw(name, raw, dataset.capacities[name])
    return frames


def split_frames(frames, fraction=0.65):
    return {name: split_train_test(f, fraction) for name, f in frames.items()}


def training_windows(frame, spec, with_nwp, augment):
    """Original windows plus the augmented copy used for fitting."""
    base = make_windows(frame, spec, with_nwp)
    return base, augment_white_noise(base, augment)


def origin_folds(origin, n_folds):
    """Fold rotation over original windows; augmented copies follow their origin."""
    uniq = np.unique(origin)
    out = []
    for _, val_orig in kfold_rotation(len(uniq), n_folds):
        val_mask = np.isin(origin, uniq[val_orig])
        out.append((np.flatnonzero(~val_mask), np.flatnonzero(val_mask)))
    return out


def holdout_by_origin(origin, fraction=0.1):
    """Chronological holdout of the last ``fraction`` of original windows."""
    uniq = np.unique(origin)
    n_val = max(1, int(round(len(uniq) * fraction)))
    val_mask = origin >= uniq[-n_val]
    return [(np.flatnonzero(~val_mask), np.flatnonzero(val_mask))]


def seq_regressor(kind, budget, aux_weight, seed, **extra):
    cls = {"bilstm": BiLSTMRegressor, "edlstm": EDLSTMRegressor}[kind]
    return cls(batch_size=budget.batch_size, max_epochs=budget.max_epochs, patience=budget.patience,
               learning_rate=budget.learning_rate, aux_weight=aux_weight, random_state=seed, **extra)


def tl_regressor(budget, seed, **extra):
    return TLNetRegressor(batch_size=budget.batch_size, max_epochs=budget.max_epochs,
                          patience=budget.patience, learning_rate=budget.learning_rate,
                          random_state=seed, **extra)


# ---------------------------------------------------------------- stage 1

@dataclass
class ErrorSeries:
    """Residuals ``measured - predicted`` in standardized power units."""

    timestamps: np.ndarray
    residuals: np.ndarray

    def __post_init__(self):
        if len(self.timestamps) != len(self.residuals):
            raise ValueError("timestamps and residuals differ in length")

    def __len__(self):
        return len(self.residuals)


@dataclass
class TeacherModels:
    f_I: EDLSTMRegressor
    f_II: EDLSTMRegressor
    error_I: ErrorSeries
    error_II: ErrorSeries
    park_set: object
    spec: WindowSpec


@dataclass
class ParkModel:
    model: EDLSTMRegressor
    error: ErrorSeries
    train_set: object


def train_park_model(park_train, spec, with_nwp, config=None, seed=0):
    """One park encoder-decoder and its residuals on the original training windows.

    Early stopping rotates through ``config.n_folds`` contiguous folds of
    the training windows, one validation fold per epoch.
    """
    config = PipelineConfig() if config is None else config
    if with_nwp and not park_train.has_nwp:
        raise StageError("park", "park frame has no NWP channel")
    base, aug = training_windows(park_train, spec, with_nwp, config.augment)
    folds = origin_folds(aug.origin, config.n_folds)
    reg = seq_regressor("edlstm", config.teacher, config.aux_weight, seed)
    reg.fit(aug.inputs, aug.path, splits=folds)
    err = ErrorSeries(base.target_times, base.targets - reg.predict(base.inputs))
    return ParkModel(reg, err, base)


def teachers_from(park_I, park_II, spec):
    if not np.array_equal(park_I.error.timestamps, park_II.error.timestamps):
        raise StageError("park", "NWP gaps misalign the two park training sets")
    return TeacherModels(park_I.model, park_II.model, park_I.error, park_II.error,
                         park_I.train_set, spec)


def train_park_teachers(park_train, spec, config=None, seed=0):
    """Fit the no-NWP and with-NWP park models and their training residuals."""
    if not park_train.has_nwp:
        raise StageError("park", "park frame has no NWP channel")
    park_I = train_park_model(park_train, spec, False, config, seed)
    park_II = train_park_model(park_train, spec, True, config, seed + 1)
    return teachers_from(park_I, park_II, spec)


def error_windows(values, width=PATH_WIDTH):
    """Stride-1 windows; ``len(values) - width + 1`` rows."""
    values = np.asarray(values, dtype=np.float64)
    if len(values) < width:
        raise ValueError(f"need at least {width} values for a window")
    return np.lib.stride_tricks.sliding_window_view(values, width).copy()


def padded_windows(values, width=PATH_WIDTH):
    """One trailing window per element; the first ``width - 1`` are repeat-padded.

    Returns ``(windows, padded_flags)``.
    """
    values = np.asarray(values, dtype=np.float64)
    if len(values) == 0:
        raise ValueError("empty series")
    ext = np.concatenate([np.full(width - 1, values[0]), values])
    flags = np.zeros(len(values), dtype=bool)
    flags[:width - 1] = True
    return error_windows(ext, width), flags


@dataclass
class ErrorRelation:
    g_p: TLNetRegressor
    train_mse: float
    source_X: np.ndarray
    source_Y: np.ndarray


def fit_error_relation(error_I, error_II, budget=None, seed=0, min_windows=100, l2_weight=1e-6,
                       sparse_weight=0.0):
    """Fit ``g_p`` from 7-wide windows of ``error_I`` to those of ``error_II``."""
    budget = StageBudget() if budget is None else budget
    if not np.array_equal(error_I.timestamps, error_II.timestamps):
        raise ValueError("error series are not aligned")
    if len(error_I) - PATH_WIDTH + 1 < min_windows:
        raise ValueError(f"need at least {min_windows} windows")
    X = error_windows(error_I.residuals)
    Y = error_windows(error_II.residuals)
    g = tl_regressor(budget, seed, l2_weight=l2_weight, sparse_weight=sparse_weight).fit(X, Y)
    return ErrorRelation(g, g.train_mse_, X, Y)


# ---------------------------------------------------------------- stage 2

@dataclass
class TurbineBundle:
    """Everything the test-time path needs for one turbine and horizon."""

    entity: str
    horizon: int
    family: str
    student: object
    target_col: int
    with_nwp: bool
    g_p: UnivariateTLNet
    corrector: UnivariateTLNet
    scalers: dict
    capacity_kw: float
    lag_count: int = 7
    alpha: float = None
    gamma: float = None
    diagnostics: dict = field(default_factory=dict)

    def to_bytes(self):
        tensors = {}
        topo = {}
        for key in ("student", "g_p", "corrector"):
            net = getattr(self, key)
            if net is None:
                continue
            tensors.update(serialization.net_tensors(net, prefix=key + "."))
            topo[key] = net.topology()
        meta = {
            "entity": self.entity,
            "horizon": self.horizon,
            "family": self.family,
            "target_col": self.target_col,
            "with_nwp": self.with_nwp,
            "capacity_kw": self.capacity_kw,
            "lag_count": self.lag_count,
            "alpha": self.alpha,
            "gamma": self.gamma,
            "scalers": {k: s.to_dict() for k, s in sorted(self.scalers.items())},
        }
        return serialization.pack(tensors, topo, meta)

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def from_bytes(cls, blob):
        tensors, topo, meta = serialization.unpack(blob)
        nets = {}
        for key, t in topo.items():
            t = dict(t)
            kind = t.pop("kind")
            if kind == "tlnet":
                net = UnivariateTLNet(widths=t["widths"])
            else:
                net = NETWORKS[kind](**t)
            serialization.load_net_tensors(net, tensors, prefix=key + ".")
            nets[key] = net
        return cls(
            entity=meta["entity"], horizon=meta["horizon"], family=meta["family"],
            student=nets["student"], target_col=meta["target_col"], with_nwp=meta["with_nwp"],
            g_p=nets.get("g_p"), corrector=nets.get("corrector"),
            scalers={k: ChannelScaler.from_dict(v) for k, v in meta["scalers"].items()},
            capacity_kw=meta["capacity_kw"], lag_count=meta["lag_count"],
            alpha=meta["alpha"], gamma=meta["gamma"],
        )

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def student_forecast(net, target_col, records, lag_count, with_nwp):
    seq = records_to_sequences(np.asarray(records, dtype=np.float64), lag_count, with_nwp)
    return net.forward(seq, training=False)[:, target_col]


def train_kd_student(teacher, turbine_train, config, seed=0, base=None, log_path=None):
    """Pre-train a no-NWP Bi-LSTM on turbine data, then distill from the park model.

    ``teacher`` is a :class:`TeacherModels` or the no-NWP :class:`ParkModel`.
    ``base`` may be an already fitted Bi-LSTM regressor to start from; it is
    copied, not modified.
    """
    if isinstance(teacher, ParkModel):
        f_I, park_set = teacher.model, teacher.train_set
    else:
        f_I, park_set = teacher.f_I, teacher.park_set
    spec = park_set.spec
    base_t, aug_t = training_windows(turbine_train, spec, False, config.augment)
    if base is None:
        base = seq_regressor("bilstm", config.turbine, config.aux_weight, seed)
        base.fit(aug_t.inputs, aug_t.path, splits=holdout_by_origin(aug_t.origin))
    student = copy.deepcopy(base)
    _, log = train_student_kd(student.net_, f_I.net_, park_set, base_t, config.kd,
                              target_col=student.target_col_, seed=seed, log_path=log_path)
    return student, log


def build_turbine_bundle(teacher, relation, turbine_train, config=None, seed=0, turbine_model=None,
                         family="kd"):
    """Assemble the turbine path: model, adapted ``g_p`` and test corrector.

    ``turbine_model`` is a fitted sequence regressor; when omitted a KD
    student is trained. Stage failures raise :class:`StageError`.
    """
    config = PipelineConfig() if config is None else config
    spec = teacher.spec
    t0 = time.perf_counter()
    try:
        if turbine_model is None:
            turbine_model, _ = train_kd_student(teacher, turbine_train, config, seed)
        base_t = make_windows(turbine_train, spec, turbine_model.with_nwp_)
        p1 = turbine_model.predict(base_t.inputs)
    except Exception as exc:
        raise StageError("student", str(exc)) from exc
    t1 = time.perf_counter()
    try:
        err_t = base_t.targets - p1
        g_adapted = fine_tune(relation.g_p.net_, (error_windows(err_t), None),
                              (relation.source_X, relation.source_Y), config.tl, seed=seed)
    except Exception as exc:
        raise StageError("transfer", str(exc)) from exc
    t2 = time.perf_counter()
    try:
        p2 = correct_training(p1, err_t, g_adapted)
        W1 = error_windows(p1)
        corr = tl_regressor(config.tlnet, seed, l2_weight=config.tl_l2).fit(W1, error_windows(p2) - W1)
    except Exception as exc:
        raise StageError("corrector", str(exc)) from exc
    t3 = time.perf_counter()
    diagnostics = {
        "train_rmse_uncorrected": float(np.sqrt(np.mean(err_t ** 2))),
        "train_rmse_corrected": float(np.sqrt(np.mean((base_t.targets - p2) ** 2))),
        "seconds_student": t1 - t0,
        "seconds_transfer": t2 - t1,
        "seconds_corrector": t3 - t2,
    }
    return TurbineBundle(
        entity=turbine_train.entity, horizon=spec.horizon, family=family,
        student=turbine_model.net_, target_col=turbine_model.target_col_,
        with_nwp=turbine_model.with_nwp_, g_p=g_adapted, corrector=corr.net_,
        scalers=turbine_train.scalers, capacity_kw=turbine_train.capacity_kw,
        lag_count=spec.lag_count, alpha=config.kd.alpha if family == "kd" else None,
        gamma=config.tl.gamma, diagnostics=diagnostics,
    )


def correct_training(p1, err, g_p):
    """``P^II = P^I + g_p(error window ending at each step)``; uses measured power."""
    windows, _ = padded_windows(err)
    return np.asarray(p1) + g_p.forward(windows)[:, -1]


@dataclass
class TestPrediction:
    __test__ = False  # not a pytest class

    p1: np.ndarray
    p2: np.ndarray
    p2_kw: np.ndarray
    padded: np.ndarray


def apply_corrector(corrector, p1):
    """``P^II = P^I + corrector(trailing P^I window)``; returns ``(p2, padded)``."""
    windows, padded = padded_windows(p1)
    return np.asarray(p1) + corrector.forward(windows)[:, -1], padded


def predict_test(bundle, test_inputs):
    """Label-free forecast: turbine model, then the corrector on trailing windows.

    ``test_inputs`` are lag records in chronological order; nothing else is
    read, so test labels cannot reach the prediction.
    """
    p1 = student_forecast(bundle.student, bundle.target_col, test_inputs, bundle.lag_count,
                          bundle.with_nwp)
    p2, padded = apply_corrector(bundle.corrector, p1)
    return TestPrediction(p1, p2, bundle.scalers["power"].inverse_transform(p2), padded)
