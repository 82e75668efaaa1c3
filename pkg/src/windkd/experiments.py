"""Run configuration, the six-model ablation, grid searches and report emission."""
import csv
from dataclasses import asdict, dataclass, field, fields, replace
import hashlib
import io
import json
import logging
import os
from pathlib import Path
import time

import numpy as np

from . import __version__
from .data_prep import AugmentSpec, make_windows, read_entity_csv, frame_from_raw
from .distill import KDConfig
from .evaluate import (
    MetricRow,
    friedman,
    geomean_rate,
    inter_step_rates,
    param_count,
    qr,
    rmse,
    time_per_call,
)
from .nn.core import RegularizerWeights
from .pipeline import (
    PipelineConfig,
    StageBudget,
    StageError,
    build_turbine_bundle,
    fit_error_relation,
    frames_from_dataset,
    holdout_by_origin,
    predict_test,
    seq_regressor,
    split_frames,
    teachers_from,
    train_kd_student,
    train_park_model,
    training_windows,
)
from .synthetic import gen_park_dataset
from .transfer import KernelSpec, TLConfig

log = logging.getLogger(__name__)

TURBINES = ("T1", "T2", "T3", "T4", "T5")
ENV_SEED = "WINDKD_SEED"
ENV_OUT = "WINDKD_OUT_DIR"

TURBINE_MEASURED = frozenset({"turbine.power", "turbine.speed"})
PARK_MEASURED = frozenset({"park.power", "park.speed"})
PARK_NWP = frozenset({"park.nwp"})

# Reference values reported for the measured park, for juxtaposition only.
REFERENCE_ARGMIN = {
    "alpha": {"T1": 0.8, "T2": 0.8, "T3": 0.6, "T4": 0.8, "T5": 1.0},
    "gamma": {"T1": 0.6, "T2": 0.4, "T3": 0.8, "T4": 0.6, "T5": 0.8},
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AblationModel:
    name: str
    family: str
    uses_kd: bool
    uses_tl: bool
    inputs: frozenset
    turbine_nwp: bool = False


ABLATION_MODELS = {
    m.name: m for m in (
        AblationModel("BiLSTM", "bilstm", False, False, TURBINE_MEASURED | PARK_NWP, turbine_nwp=True),
        AblationModel("EDLSTM", "edlstm", False, False, TURBINE_MEASURED | PARK_NWP, turbine_nwp=True),
        AblationModel("KD", "bilstm", True, False, TURBINE_MEASURED | PARK_MEASURED),
        AblationModel("EDED-TL", "edlstm", False, True, TURBINE_MEASURED | PARK_MEASURED | PARK_NWP),
        AblationModel("EDBi-TL", "bilstm", False, True, TURBINE_MEASURED | PARK_MEASURED | PARK_NWP),
        AblationModel("KD-TL", "bilstm", True, True, TURBINE_MEASURED | PARK_MEASURED | PARK_NWP),
    )
}
ROSTER = tuple(ABLATION_MODELS)


# ---------------------------------------------------------------- configuration

def parse_grid(text):
    """``"start:stop:step"`` (inclusive stop) or a comma list, all within [0, 1]."""
    if isinstance(text, (list, tuple)):
        values = [float(v) for v in text]
    elif ":" in str(text):
        try:
            start, stop, step = (float(v) for v in str(text).split(":"))
        except ValueError as exc:
            raise ConfigError(f"bad grid {text!r}; expected start:stop:step") from exc
        if step <= 0:
            raise ConfigError("grid step must be positive")
        n = int(np.floor((stop - start) / step + 1e-9)) + 1
        values = [round(start + i * step, 10) for i in range(n)]
    else:
        values = [float(v) for v in str(text).split(",") if v.strip()]
    if not values:
        raise ConfigError("empty grid")
    if any(v < 0 or v > 1 for v in values):
        raise ConfigError("grid values must lie in [0, 1]")
    return values


@dataclass
class DataConfig:
    source: str = "synthetic"
    csv_dir: str = ""
    duration_days: int = 365
    capacities_kw: dict = field(default_factory=dict)


@dataclass
class BudgetConfig:
    max_epochs: int = 200
    patience: int = 10
    batch_size: int = 64
    learning_rate: float = 1e-3

    def stage(self):
        return StageBudget(self.max_epochs, self.patience, self.batch_size, self.learning_rate)


@dataclass
class KDSection:
    max_epochs: int = 20
    patience: int = 5
    batch_size: int = 64
    learning_rate: float = 3e-4
    floor_frac: float = 0.01
    per_sample_gate: bool = False
    stop_on_beating_teacher: bool = True
    select_on: str = "mse"


@dataclass
class TLSection:
    max_epochs: int = 60
    patience: int = 8
    batch_size: int = 64
    learning_rate: float = 1e-3
    source_batch: int = 128
    l2_weight: float = 1e-6
    sparse_weight: float = 0.0
    sparsity_target: float = 0.1
    kernel: str = "rbf"
    mmd_layers: list = None


@dataclass
class RunConfig:
    """Everything that determines an experiment's results (plus where to write them)."""

    seed: int = 0
    out_dir: str = "runs/default"
    horizons: list = field(default_factory=lambda: list(range(6, 13)))
    turbines: list = field(default_factory=lambda: list(TURBINES))
    roster: list = field(default_factory=lambda: list(ROSTER))
    alpha: float = 0.8
    gamma: float = 0.6
    alpha_grid: list = field(default_factory=lambda: parse_grid("0:1:0.2"))
    gamma_grid: list = field(default_factory=lambda: parse_grid("0:1:0.2"))
    lag_count: int = 7
    split_fraction: float = 0.65
    aux_weight: float = 0.2
    n_folds: int = 10
    data: DataConfig = field(default_factory=DataConfig)
    augment: dict = field(default_factory=lambda: {"factor": 5, "noise_std_fraction": 0.05})
    teacher: BudgetConfig = field(default_factory=BudgetConfig)
    turbine: BudgetConfig = field(default_factory=BudgetConfig)
    tlnet: BudgetConfig = field(default_factory=BudgetConfig)
    kd: KDSection = field(default_factory=KDSection)
    tl: TLSection = field(default_factory=TLSection)

    def validate(self):
        if not self.roster:
            raise ConfigError("roster is empty")
        unknown = set(self.roster) - set(ABLATION_MODELS)
        if unknown:
            raise ConfigError(f"unknown roster models {sorted(unknown)}")
        if not self.turbines:
            raise ConfigError("no turbines selected")
        if not self.horizons:
            raise ConfigError("no horizons selected")
        for h in self.horizons:
            if not 6 <= int(h) <= 24:
                raise ConfigError(f"horizon {h} outside 6..24")
        for name in ("alpha", "gamma"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"{name} must lie in [0, 1]")
        self.alpha_grid = parse_grid(self.alpha_grid)
        self.gamma_grid = parse_grid(self.gamma_grid)
        if not 0 < self.split_fraction < 1:
            raise ConfigError("split_fraction must lie in (0, 1)")
        if self.data.source not in ("synthetic", "csv"):
            raise ConfigError("data.source must be 'synthetic' or 'csv'")
        return self

    def pipeline_config(self, alpha=None, gamma=None):
        alpha = self.alpha if alpha is None else alpha
        gamma = self.gamma if gamma is None else gamma
        kd = KDConfig(alpha=alpha, floor_frac=self.kd.floor_frac,
                      stop_on_beating_teacher=self.kd.stop_on_beating_teacher,
                      per_sample_gate=self.kd.per_sample_gate, max_epochs=self.kd.max_epochs,
                      learning_rate=self.kd.learning_rate, batch_size=self.kd.batch_size,
                      patience=self.kd.patience, select_on=self.kd.select_on)
        t = self.tl
        tl = TLConfig(gamma=gamma,
                      reg=RegularizerWeights(t.l2_weight, t.sparse_weight, t.sparsity_target),
                      mmd_layers=None if t.mmd_layers is None else tuple(t.mmd_layers),
                      kernel=KernelSpec(t.kernel), source_batch=t.source_batch,
                      max_epochs=t.max_epochs, batch_size=t.batch_size,
                      learning_rate=t.learning_rate, patience=t.patience)
        return PipelineConfig(
            lag_count=self.lag_count, split_fraction=self.split_fraction,
            augment=AugmentSpec(factor=int(self.augment["factor"]),
                                noise_std_fraction=float(self.augment["noise_std_fraction"]),
                                seed=self.seed),
            n_folds=self.n_folds, aux_weight=self.aux_weight,
            teacher=self.teacher.stage(), turbine=self.turbine.stage(), tlnet=self.tlnet.stage(),
            kd=kd, tl=tl, tl_l2=t.l2_weight,
        )

    def to_dict(self):
        return asdict(self)

    def hash(self):
        """SHA-256 of every result-affecting field (``out_dir`` excluded)."""
        d = self.to_dict()
        d.pop("out_dir")
        blob = json.dumps(d, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()


_SECTIONS = {"data": DataConfig, "teacher": BudgetConfig, "turbine": BudgetConfig,
             "tlnet": BudgetConfig, "kd": KDSection, "tl": TLSection}


def _build_section(cls, values, name):
    names = {f.name for f in fields(cls)}
    extra = set(values) - names
    if extra:
        raise ConfigError(f"unknown keys in [{name}]: {sorted(extra)}")
    return cls(**values)


def config_from_dict(d):
    d = dict(d)
    known = {f.name for f in fields(RunConfig)}
    extra = set(d) - known
    if extra:
        raise ConfigError(f"unknown top-level keys: {sorted(extra)}")
    for name, cls in _SECTIONS.items():
        if name in d:
            d[name] = _build_section(cls, d[name], name)
    if "augment" in d:
        aug = {"factor": 5, "noise_std_fraction": 0.05}
        aug.update(d["augment"])
        d["augment"] = aug
    try:
        return RunConfig(**d)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path=None, env=None, overrides=None):
    """Read a TOML file (optional); environment variables, then ``overrides``, take precedence."""
    import tomli

    env = os.environ if env is None else env
    d = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                d = tomli.load(fh)
        except (OSError, tomli.TOMLDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if env.get(ENV_SEED):
        try:
            d["seed"] = int(env[ENV_SEED])
        except ValueError as exc:
            raise ConfigError(f"{ENV_SEED} must be an integer") from exc
    if env.get(ENV_OUT):
        d["out_dir"] = env[ENV_OUT]
    d.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return config_from_dict(d).validate()


def fast_config(config):
    """Shrink data and epochs for smoke runs and CI."""
    small = BudgetConfig(max_epochs=3, patience=2, batch_size=128, learning_rate=3e-3)
    return replace(
        config,
        horizons=[h for h in config.horizons if h in (6, 9)] or config.horizons[:1],
        turbines=config.turbines[:2],
        n_folds=3,
        data=replace(config.data, duration_days=min(config.data.duration_days, 45)),
        augment={"factor": 2, "noise_std_fraction": config.augment["noise_std_fraction"]},
        teacher=small, turbine=small, tlnet=small,
        kd=replace(config.kd, max_epochs=2, patience=1),
        tl=replace(config.tl, max_epochs=2, patience=1, source_batch=32),
    )


def derive_seed(master, *labels):
    digest = hashlib.sha256(":".join(str(x) for x in (master, *labels)).encode()).digest()
    return int.from_bytes(digest[:4], "little") % (2 ** 31 - 1)


# ---------------------------------------------------------------- data

def load_frames(config):
    """Hourly train/test frames for the park and every configured turbine."""
    if config.data.source == "synthetic":
        ds = gen_park_dataset(seed=config.seed, duration_days=config.data.duration_days)
        frames = frames_from_dataset(ds)
        data_hash = hashlib.sha256(b"".join(
            np.ascontiguousarray(ds.entities[e]["power"]).tobytes() for e in sorted(ds.entities)
        )).hexdigest()
    else:
        root = Path(config.data.csv_dir)
        caps = dict(config.data.capacities_kw)
        manifest = root / "manifest.json"
        if manifest.exists():
            caps = {**json.loads(manifest.read_text()).get("capacities_kw", {}), **caps}
        frames = {}
        h = hashlib.sha256()
        for name in ["park", *config.turbines]:
            path = root / f"{name}.csv"
            if name not in caps:
                raise ConfigError(f"no capacity known for {name}")
            frames[name] = frame_from_raw(name, read_entity_csv(path), caps[name])
            h.update(path.read_bytes())
        data_hash = h.hexdigest()
    missing = [t for t in config.turbines if t not in frames]
    if missing:
        raise ConfigError(f"data has no turbines {missing}")
    keep = {k: frames[k] for k in ["park", *config.turbines]}
    return split_frames(keep, config.split_fraction), data_hash


# ---------------------------------------------------------------- ablation

class ChannelAudit:
    """Records which data channels each model's components touched."""

    def __init__(self):
        self.by_model = {}

    def grant(self, model, channels):
        self.by_model.setdefault(model, set()).update(channels)


class ComponentCache:
    """Builds shared components once per run and replays their channel footprint."""

    def __init__(self):
        self.items = {}

    def get(self, key, builder, audit, model):
        if key not in self.items:
            used = set()
            t0 = time.perf_counter()
            value = builder(used)
            self.items[key] = (value, frozenset(used), time.perf_counter() - t0)
            log.info("built %s in %.1fs", key, self.items[key][2])
        value, used, seconds = self.items[key]
        audit.grant(model, used)
        return value, seconds


@dataclass
class ForecastReport:
    config: RunConfig
    config_hash: str
    data_hash: str
    rows: list
    failures: list = field(default_factory=list)
    channels: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    stage_seconds: dict = field(default_factory=dict)


def _turbine_channels(with_nwp):
    return TURBINE_MEASURED | (PARK_NWP if with_nwp else frozenset())


class AblationRunner:
    """Trains and evaluates roster models, sharing components between them."""

    def __init__(self, config, splits=None, data_hash=""):
        self.config = config
        if splits is None:
            splits, data_hash = load_frames(config)
        self.splits = splits
        self.data_hash = data_hash
        self.cache = ComponentCache()
        self.audit = ChannelAudit()
        self.seeds = {}

    def seed(self, *labels):
        s = derive_seed(self.config.seed, *labels)
        self.seeds[":".join(str(x) for x in labels)] = s
        return s

    def pcfg(self, alpha=None, gamma=None):
        return self.config.pipeline_config(alpha, gamma)

    # -- components; each builder adds the channels it reads to ``used``

    def park_model(self, h, with_nwp, model):
        def build(used):
            used |= PARK_MEASURED | (PARK_NWP if with_nwp else frozenset())
            train = self.splits["park"][0]
            return train_park_model(train, self.pcfg().window(h), with_nwp, self.pcfg(),
                                    self.seed("park", "II" if with_nwp else "I", h))
        return self.cache.get(("park", with_nwp, h), build, self.audit, model)

    def relation(self, h, model):
        p1, s1 = self.park_model(h, False, model)
        p2, s2 = self.park_model(h, True, model)

        def build(used):
            teachers = teachers_from(p1, p2, self.pcfg().window(h))
            return teachers, fit_error_relation(teachers.error_I, teachers.error_II,
                                                self.pcfg().tlnet, self.seed("relation", h),
                                                l2_weight=self.config.tl.l2_weight)
        value, s3 = self.cache.get(("relation", h), build, self.audit, model)
        return value, s1 + s2 + s3

    def turbine_model(self, family, with_nwp, t, h, model):
        def build(used):
            used |= _turbine_channels(with_nwp)
            cfg = self.pcfg()
            _, aug = training_windows(self.splits[t][0], cfg.window(h), with_nwp, cfg.augment)
            reg = seq_regressor(family, cfg.turbine, cfg.aux_weight,
                                self.seed(family, with_nwp, t, h))
            return reg.fit(aug.inputs, aug.path, splits=holdout_by_origin(aug.origin))
        return self.cache.get((family, with_nwp, t, h), build, self.audit, model)

    def kd_student(self, t, h, model, alpha=None):
        alpha = self.config.alpha if alpha is None else alpha
        park_I, s1 = self.park_model(h, False, model)
        base, s2 = self.turbine_model("bilstm", False, t, h, model)

        def build(used):
            used |= TURBINE_MEASURED
            student, log = train_kd_student(park_I, self.splits[t][0], self.pcfg(alpha=alpha),
                                            self.seed("kd", t, h, alpha), base=base)
            return student
        value, s3 = self.cache.get(("kd", t, h, alpha), build, self.audit, model)
        return value, s1 + s2 + s3

    def bundle(self, spec_model, t, h, model, alpha=None, gamma=None):
        alpha = self.config.alpha if alpha is None else alpha
        gamma = self.config.gamma if gamma is None else gamma
        if spec_model.uses_kd:
            base, s1 = self.kd_student(t, h, model, alpha)
        else:
            base, s1 = self.turbine_model(spec_model.family, False, t, h, model)
        (teachers, rel), s2 = self.relation(h, model)

        def build(used):
            used |= TURBINE_MEASURED
            return build_turbine_bundle(teachers, rel, self.splits[t][0], self.pcfg(alpha, gamma),
                                        self.seed("bundle", spec_model.name, t, h, gamma),
                                        turbine_model=base,
                                        family="kd" if spec_model.uses_kd else spec_model.family)
        key = ("bundle", spec_model.name, t, h, alpha, gamma)
        value, s3 = self.cache.get(key, build, self.audit, model)
        return value, s1 + s2 + s3

    # -- evaluation

    def evaluate(self, name, t, h, alpha=None, gamma=None):
        m = ABLATION_MODELS[name]
        test = self.splits[t][1]
        spec = self.pcfg().window(h)
        self.audit.grant(name, _turbine_channels(m.turbine_nwp))
        windows = make_windows(test, spec, with_nwp=m.turbine_nwp)
        if m.uses_tl:
            bundle, secs = self.bundle(m, t, h, name, alpha, gamma)
            pred = predict_test(bundle, windows.inputs).p2
            net = bundle.student

            def infer():
                predict_test(bundle, windows.inputs)
        else:
            if m.uses_kd:
                reg, secs = self.kd_student(t, h, name, alpha)
            else:
                reg, secs = self.turbine_model(m.family, m.turbine_nwp, t, h, name)
            pred = reg.predict(windows.inputs)
            net = reg.net_

            def infer():
                reg.predict(windows.inputs)
        scaler = windows.scaler_power
        row = MetricRow(
            model=name, turbine=t, horizon=int(h),
            rmse=rmse(windows.targets, pred),
            qr90=qr(windows.measured_kw(), scaler.inverse_transform(pred), windows.capacity_kw, 0.9),
            param_count=param_count(net),
            train_seconds=float(secs),
            infer_seconds=time_per_call(infer, len(windows)),
        )
        return row, pred

    def run(self, roster=None):
        roster = list(self.config.roster if roster is None else roster)
        if not roster:
            raise ConfigError("roster is empty")
        rows, failures = [], []
        for h in self.config.horizons:
            for t in self.config.turbines:
                for name in roster:
                    try:
                        rows.append(self.evaluate(name, t, h)[0])
                    except StageError as exc:
                        failures.append({"model": name, "turbine": t, "horizon": h,
                                         "stage": exc.stage, "error": str(exc)})
                    except Exception as exc:  # recorded, the run continues
                        failures.append({"model": name, "turbine": t, "horizon": h,
                                         "stage": "evaluate", "error": f"{type(exc).__name__}: {exc}"})
        rows.sort(key=lambda r: (roster.index(r.model), r.turbine, r.horizon))
        return ForecastReport(
            config=self.config, config_hash=self.config.hash(), data_hash=self.data_hash,
            rows=rows, failures=failures,
            channels={k: sorted(v) for k, v in self.audit.by_model.items()},
            seeds=dict(sorted(self.seeds.items())),
            stage_seconds={"|".join(map(str, k)): v[2] for k, v in self.cache.items.items()},
        )


def run_ablation(config, splits=None, data_hash=""):
    config.validate()
    return AblationRunner(config, splits, data_hash).run()


# ---------------------------------------------------------------- grid search

@dataclass
class GridResult:
    parameter: str
    grid: list
    rmse: dict
    argmin: dict
    reference: dict


def argmin_smallest(grid, values):
    """Grid value with the lowest score; ties go to the smaller grid value."""
    best = None
    for g, v in sorted(zip(grid, values)):
        if best is None or v < best[1]:
            best = (g, v)
    return best[0]


def run_grid_search(config, parameter, grid=None, runner=None):
    """Test RMSE (mean over horizons) per turbine for each grid value.

    ``alpha`` scores the KD student alone; ``gamma`` scores KD-TL with the
    student fixed at ``config.alpha``.
    """
    if parameter not in ("alpha", "gamma"):
        raise ConfigError("parameter must be 'alpha' or 'gamma'")
    grid = parse_grid(getattr(config, f"{parameter}_grid") if grid is None else grid)
    config.validate()
    runner = AblationRunner(config) if runner is None else runner
    model = "KD" if parameter == "alpha" else "KD-TL"
    table = {}
    for t in config.turbines:
        scores = []
        for g in grid:
            kw = {"alpha": g} if parameter == "alpha" else {"gamma": g}
            scores.append(float(np.mean([runner.evaluate(model, t, h, **kw)[0].rmse
                                         for h in config.horizons])))
        table[t] = scores
    argmin = {t: argmin_smallest(grid, s) for t, s in table.items()}
    return GridResult(parameter, list(grid), table, argmin, REFERENCE_ARGMIN[parameter])


# ---------------------------------------------------------------- summaries

METRIC_COLUMNS = ("model", "turbine", "horizon", "rmse", "qr90", "param_count")
TIMING_COLUMNS = ("model", "turbine", "horizon", "train_seconds", "infer_seconds")


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.12g}"
    return str(v)


def rows_to_csv(rows, columns):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        d = r.as_dict()
        w.writerow([_fmt(d[c]) for c in columns])
    return buf.getvalue()


def read_metric_rows(metrics_path, timings_path=None):
    timings = {}
    if timings_path is not None and Path(timings_path).exists():
        with open(timings_path) as fh:
            for d in csv.DictReader(fh):
                timings[(d["model"], d["turbine"], int(d["horizon"]))] = d
    rows = []
    with open(metrics_path) as fh:
        for d in csv.DictReader(fh):
            key = (d["model"], d["turbine"], int(d["horizon"]))
            tm = timings.get(key, {})
            rows.append(MetricRow(d["model"], d["turbine"], int(d["horizon"]), float(d["rmse"]),
                                  float(d["qr90"]), int(d["param_count"]),
                                  float(tm.get("train_seconds", 0.0)), float(tm.get("infer_seconds", 0.0))))
    return rows


def _curves(rows):
    curves = {}
    for r in sorted(rows, key=lambda r: r.horizon):
        curves.setdefault((r.model, r.turbine), []).append(r.rmse)
    return curves


def rising_rate_tables(rows, models, turbines):
    """Table-3 style statistics: per-turbine and per-model geomean rates with Friedman tests."""
    curves = _curves(rows)
    rates = {k: inter_step_rates(v) for k, v in curves.items() if len(v) >= 2}
    if not rates:
        return None
    cell = {k: geomean_rate(v) for k, v in rates.items()}

    def column_stats(key_fn, labels):
        out = {}
        for lab in labels:
            pooled = np.concatenate([v for k, v in rates.items() if key_fn(k) == lab] or [np.array([])])
            if pooled.size:
                out[lab] = {"geomean": geomean_rate(pooled), "std": float(np.std(pooled))}
        return out

    def table(row_labels, col_labels, key):
        mat = [[cell.get(key(r, c), np.nan) for c in col_labels] for r in row_labels]
        mat = np.array(mat)
        mat = mat[~np.isnan(mat).any(axis=1)]
        if mat.shape[0] < 2 or mat.shape[1] < 2:
            return None
        res = friedman(mat)
        return {"F": res.statistic, "p_value": res.p_value, "t": res.t, "k": res.k,
                "mean_ranks": [float(x) for x in res.mean_ranks]}

    return {
        "by_turbine": {
            "columns": column_stats(lambda k: k[1], turbines),
            "friedman": table(models, turbines, lambda m, t: (m, t)),
        },
        "by_model": {
            "columns": column_stats(lambda k: k[0], models),
            "friedman": table(turbines, models, lambda t, m: (m, t)),
        },
    }


def _geo(values):
    v = np.asarray(values, dtype=np.float64)
    return {"geomean": float(np.exp(np.mean(np.log(v)))), "mean": float(v.mean()), "std": float(v.std())}


def summarize(rows, roster, turbines, proposed="KD-TL"):
    models = [m for m in roster if any(r.model == m for r in rows)]
    turbines = [t for t in turbines if any(r.turbine == t for r in rows)]
    by_model = {m: [r for r in rows if r.model == m] for m in models}
    out = {
        "cells": len(rows),
        "mean_rmse": {m: float(np.mean([r.rmse for r in rs])) for m, rs in by_model.items()},
        "max_rmse": {m: float(np.max([r.rmse for r in rs])) for m, rs in by_model.items()},
        "model_rmse": {m: _geo([r.rmse for r in rs]) for m, rs in by_model.items()},
        "turbine_rmse": {t: _geo([r.rmse for r in rows if r.turbine == t]) for t in turbines},
        "rising_rates": rising_rate_tables(rows, models, turbines),
    }
    if proposed in by_model:
        mine = {(r.turbine, r.horizon): r for r in by_model[proposed]}
        margins, qr_gain = {}, {}
        for m, rs in by_model.items():
            if m == proposed:
                continue
            margins[m] = 1.0 - out["mean_rmse"][proposed] / out["mean_rmse"][m]
            rates = [mine[(r.turbine, r.horizon)].qr90 / r.qr90 - 1.0 for r in rs
                     if (r.turbine, r.horizon) in mine and r.qr90 > 0 and mine[(r.turbine, r.horizon)].qr90 > 0]
            if rates:
                qr_gain[m] = {"geomean": geomean_rate(rates), "std": float(np.std(rates))}
        out["rmse_reduction_vs"] = margins
        out["qr90_increase_vs"] = qr_gain
    if "EDED-TL" in by_model and proposed in by_model:
        ed, kd = by_model["EDED-TL"], by_model[proposed]
        out["param_ratio_ededtl_over_kdtl"] = ed[0].param_count / kd[0].param_count
        inf_kd = np.mean([r.infer_seconds for r in kd])
        if inf_kd > 0:
            out["infer_ratio_ededtl_over_kdtl"] = float(np.mean([r.infer_seconds for r in ed]) / inf_kd)
        trn_kd = np.mean([r.train_seconds for r in kd])
        if trn_kd > 0:
            out["train_ratio_ededtl_over_kdtl"] = float(np.mean([r.train_seconds for r in ed]) / trn_kd)
    return out


# ---------------------------------------------------------------- emission

def _write(path, text):
    path.write_text(text)


def _csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(x) for x in r])
    return buf.getvalue()


def emit_plot_data(summary, rows, plot_dir, grids=()):
    plot_dir.mkdir(parents=True, exist_ok=True)
    for g in grids:
        _write(plot_dir / f"fig5_grid_{g.parameter}.csv", _csv_text(
            ["turbine", g.parameter, "rmse", "is_argmin"],
            [(t, v, s, v == g.argmin[t]) for t, scores in g.rmse.items() for v, s in zip(g.grid, scores)]))
    _write(plot_dir / "fig6_multistep_rmse.csv", _csv_text(
        ["model", "turbine", "horizon", "rmse"], [(r.model, r.turbine, r.horizon, r.rmse) for r in rows]))
    _write(plot_dir / "fig7a_model_rmse.csv", _csv_text(
        ["model", "geomean_rmse", "std"], [(m, v["geomean"], v["std"]) for m, v in summary["model_rmse"].items()]))
    _write(plot_dir / "fig7b_turbine_rmse.csv", _csv_text(
        ["turbine", "geomean_rmse", "std"], [(t, v["geomean"], v["std"]) for t, v in summary["turbine_rmse"].items()]))
    _write(plot_dir / "fig8_qr90_increase.csv", _csv_text(
        ["competitor", "geomean_increase", "std"],
        [(m, v["geomean"], v["std"]) for m, v in summary.get("qr90_increase_vs", {}).items()]))
    rr = summary.get("rising_rates")
    if rr:
        for key, fname in (("by_turbine", "table3a_rising_rates_turbines.csv"),
                           ("by_model", "table3b_rising_rates_models.csv")):
            cols = rr[key]["columns"]
            fr = rr[key]["friedman"] or {}
            _write(plot_dir / fname, _csv_text(
                ["column", "geomean", "std", "friedman_F", "friedman_p"],
                [(c, v["geomean"], v["std"], fr.get("F", ""), fr.get("p_value", "")) for c, v in cols.items()]))


def emit_report(report, out_dir, grids=()):
    """Write metrics.csv, timings.csv, summary.json, plot CSVs and manifest.json."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"cannot write to {out}: {exc}") from exc
    cfg = report.config
    _write(out / "metrics.csv", rows_to_csv(report.rows, METRIC_COLUMNS))
    _write(out / "timings.csv", rows_to_csv(report.rows, TIMING_COLUMNS))
    summary = summarize(report.rows, cfg.roster, cfg.turbines)
    summary["failures"] = report.failures
    summary["channels"] = report.channels
    summary["grid_search"] = {g.parameter: {"grid": g.grid, "rmse": g.rmse, "argmin": g.argmin,
                                            "reference_argmin": g.reference} for g in grids}
    _write(out / "summary.json", json.dumps(summary, indent=2, sort_keys=True, default=float) + "\n")
    emit_plot_data(summary, report.rows, out / "plots", grids)
    manifest = {
        "package_version": __version__,
        "config": cfg.to_dict(),
        "config_hash": report.config_hash,
        "data_hash": report.data_hash,
        "seed": cfg.seed,
        "cell_seeds": report.seeds,
        "stage_seconds": report.stage_seconds,
    }
    _write(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return summary
