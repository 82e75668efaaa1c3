"""Ingestion, hourly averaging, scaling, augmentation and windowing.

Raw channels live on a regular 10-minute grid where missing samples are
NaN. Hourly frames live on a regular hourly grid where dropped hours are
NaN; any window touching a NaN is excluded downstream.
"""
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

TEN_MIN = np.timedelta64(10, "m")
HOUR = np.timedelta64(1, "h")
SAMPLES_PER_HOUR = 6
MIN_SAMPLES_PER_HOUR = 3
PATH_WIDTH = 7
CHANNELS = ("power", "speed", "nwp")
CSV_COLUMNS = {"power": "power_kw", "speed": "wind_speed_ms", "nwp": "nwp_speed_ms"}


def _as_times(timestamps):
    t = np.asarray(timestamps)
    if not np.issubdtype(t.dtype, np.datetime64):
        t = pd.to_datetime(t, utc=True).tz_localize(None).to_numpy()
    return t.astype("datetime64[s]")


@dataclass
class RawSeries:
    """One channel on a uniform 10-minute grid; NaN marks a gap."""

    timestamps: np.ndarray
    values: np.ndarray
    channel_name: str = ""

    @classmethod
    def from_samples(cls, timestamps, values, channel_name=""):
        """Build from possibly gappy samples, reindexing onto the 10-minute grid."""
        t = _as_times(timestamps)
        v = np.asarray(values, dtype=np.float64)
        if len(t) != len(v):
            raise ValueError("timestamps and values differ in length")
        if len(t) == 0:
            raise ValueError("empty series")
        if np.any(np.diff(t) <= np.timedelta64(0, "s")):
            raise ValueError("timestamps must be strictly increasing")
        offsets = (t - t[0]) / TEN_MIN
        if not np.allclose(offsets, np.round(offsets)):
            raise ValueError("timestamps must fall on a 10-minute grid")
        slots = np.round(offsets).astype(np.int64)
        grid = t[0] + np.arange(slots[-1] + 1) * TEN_MIN
        full = np.full(len(grid), np.nan)
        full[slots] = v
        return cls(grid, full, channel_name)

    @property
    def gap_mask(self):
        return np.isnan(self.values)

    def __len__(self):
        return len(self.values)


@dataclass
class HourlySeries:
    timestamps: np.ndarray
    values: np.ndarray
    channel_name: str = ""

    def __len__(self):
        return len(self.values)


def hourly_average(raw):
    """Average a 10-minute series into complete clock hours.

    Hours only partly covered by the series extent (leading or trailing) are
    dropped. Inside the extent an hour with at least three of its six samples
    gets the mean of the available ones; sparser hours become NaN.
    """
    if len(raw) == 0:
        raise ValueError("empty input")
    t = _as_times(raw.timestamps)
    v = np.asarray(raw.values, dtype=np.float64)
    hour0 = t[0].astype("datetime64[h]")
    lead = int((t[0] - hour0) / TEN_MIN)
    if lead:
        skip = SAMPLES_PER_HOUR - lead
        t, v = t[skip:], v[skip:]
        hour0 = hour0 + HOUR
    n_hours = len(v) // SAMPLES_PER_HOUR
    if n_hours == 0:
        return HourlySeries(np.array([], dtype="datetime64[s]"), np.array([]), raw.channel_name)
    block = v[:n_hours * SAMPLES_PER_HOUR].reshape(n_hours, SAMPLES_PER_HOUR)
    present = ~np.isnan(block)
    counts = present.sum(axis=1)
    sums = np.where(present, block, 0.0).sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        means = sums / counts
    means[counts < MIN_SAMPLES_PER_HOUR] = np.nan
    stamps = (hour0 + np.arange(n_hours) * HOUR).astype("datetime64[s]")
    return HourlySeries(stamps, means, raw.channel_name)


class ChannelScaler(TransformerMixin, BaseEstimator):
    """Zero-mean, unit-variance scaling of a single channel.

    Uses the population (divide-by-n) standard deviation and ignores NaN.
    """

    def fit(self, x, y=None):
        x = np.asarray(x, dtype=np.float64).ravel()
        x = x[~np.isnan(x)]
        if np.unique(x).size < 2:
            raise ValueError("cannot standardize a series with fewer than 2 distinct values")
        self.mean_ = float(np.mean(x))
        self.std_ = float(np.std(x))
        if not self.std_ > 0:
            raise ValueError("standard deviation is zero")
        return self

    def transform(self, x):
        check_is_fitted(self)
        return (np.asarray(x, dtype=np.float64) - self.mean_) / self.std_

    def inverse_transform(self, x):
        check_is_fitted(self)
        return np.asarray(x, dtype=np.float64) * self.std_ + self.mean_

    @property
    def mean(self):
        return self.mean_

    @property
    def std(self):
        return self.std_

    def to_dict(self):
        return {"mean": self.mean_, "std": self.std_}

    @classmethod
    def from_dict(cls, d):
        s = cls()
        s.mean_ = float(d["mean"])
        s.std_ = float(d["std"])
        return s


def standardize(series):
    """Return ``(standardized series, fitted scaler)``."""
    scaler = ChannelScaler().fit(series.values)
    return HourlySeries(series.timestamps, scaler.transform(series.values), series.channel_name), scaler


@dataclass
class SeriesFrame:
    """Aligned hourly channels for one entity (the park or a turbine).

    ``scalers`` is empty for physical units; after :func:`split_train_test`
    the channels are standardized and ``scalers`` maps channel -> scaler.
    """

    entity: str
    timestamps: np.ndarray
    channels: dict
    capacity_kw: float
    scalers: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.timestamps)
        for name, values in self.channels.items():
            if len(values) != n:
                raise ValueError(f"channel {name!r} has {len(values)} values, expected {n}")

    def __len__(self):
        return len(self.timestamps)

    @property
    def has_nwp(self):
        return "nwp" in self.channels

    def slice(self, start, stop):
        return replace(
            self,
            timestamps=self.timestamps[start:stop],
            channels={k: v[start:stop] for k, v in self.channels.items()},
        )

    def with_channel(self, name, values):
        chans = dict(self.channels)
        chans[name] = np.asarray(values, dtype=np.float64)
        return replace(self, channels=chans)


def frame_from_raw(entity, channels, capacity_kw):
    """Average raw 10-minute channels to hours and align them on shared stamps."""
    hourly = {name: hourly_average(raw) for name, raw in channels.items()}
    common = None
    for h in hourly.values():
        common = h.timestamps if common is None else np.intersect1d(common, h.timestamps)
    if common is None or len(common) == 0:
        raise ValueError("channels share no complete hours")
    aligned = {}
    for name, h in hourly.items():
        pos = np.searchsorted(h.timestamps, common)
        aligned[name] = h.values[pos]
    return SeriesFrame(entity, common, aligned, float(capacity_kw))


def split_train_test(frame, fraction=0.65):
    """Chronological split; scalers are fitted on the training part only.

    Both returned frames are standardized and share one ``scalers`` dict.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie in (0, 1)")
    n_train = int(np.floor(len(frame) * fraction))
    if n_train < 1 or n_train >= len(frame):
        raise ValueError("split leaves an empty part")
    train = frame.slice(0, n_train)
    test = frame.slice(n_train, len(frame))
    scalers = {name: ChannelScaler().fit(values) for name, values in train.channels.items()}
    return _apply_scalers(train, scalers), _apply_scalers(test, scalers)


def _apply_scalers(frame, scalers):
    chans = {name: scalers[name].transform(v) for name, v in frame.channels.items()}
    return replace(frame, channels=chans, scalers=scalers)


@dataclass(frozen=True)
class WindowSpec:
    lag_count: int = 7
    horizon: int = 6

    def __post_init__(self):
        if self.lag_count < 1:
            raise ValueError("lag_count must be >= 1")
        if not 6 <= self.horizon <= 24:
            raise ValueError(f"horizon must lie in [6, 24], got {self.horizon}")


@dataclass(frozen=True)
class AugmentSpec:
    factor: int = 5
    noise_std_fraction: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.factor < 1:
            raise ValueError("augmentation factor must be >= 1")
        if self.noise_std_fraction < 0:
            raise ValueError("noise_std_fraction must be non-negative")


@dataclass
class SupervisedSet:
    """Windowed records and horizon targets for one entity and horizon.

    ``inputs`` rows are ``[power lags oldest..newest, speed lags oldest..newest,
    (nwp at target hour)]``. ``path`` holds power at ``t+n-6 .. t+n`` with the
    last column equal to ``targets``. ``origin`` indexes the source window of
    every row (augmented copies point back at their original) and ``copy`` is
    0 for original rows.
    """

    inputs: np.ndarray
    targets: np.ndarray
    path: np.ndarray
    target_times: np.ndarray
    scalers: dict
    spec: WindowSpec
    with_nwp: bool
    entity: str = ""
    capacity_kw: float = 1.0
    origin: np.ndarray = None
    copy: np.ndarray = None

    def __post_init__(self):
        n = len(self.targets)
        if self.origin is None:
            self.origin = np.arange(n)
        if self.copy is None:
            self.copy = np.zeros(n, dtype=np.int64)

    def __len__(self):
        return len(self.targets)

    @property
    def n_features(self):
        return 3 if self.with_nwp else 2

    @property
    def scaler_power(self):
        return self.scalers["power"]

    @property
    def scaler_speed(self):
        return self.scalers["speed"]

    def sequences(self):
        return records_to_sequences(self.inputs, self.spec.lag_count, self.with_nwp)

    def measured_kw(self):
        return self.scaler_power.inverse_transform(self.targets)

    def subset(self, idx):
        idx = np.asarray(idx)
        return replace(
            self,
            inputs=self.inputs[idx],
            targets=self.targets[idx],
            path=self.path[idx],
            target_times=self.target_times[idx],
            origin=self.origin[idx],
            copy=self.copy[idx],
        )

    def originals(self):
        return self.subset(np.flatnonzero(self.copy == 0))


def records_to_sequences(inputs, lag_count, with_nwp):
    """Reshape flat records to ``(n, lag_count, features)``; NWP is broadcast."""
    inputs = np.asarray(inputs, dtype=np.float64)
    L = lag_count
    width = 2 * L + (1 if with_nwp else 0)
    if inputs.ndim != 2 or inputs.shape[1] != width:
        raise ValueError(f"expected records of width {width}, got shape {inputs.shape}")
    parts = [inputs[:, :L], inputs[:, L:2 * L]]
    if with_nwp:
        parts.append(np.repeat(inputs[:, 2 * L:2 * L + 1], L, axis=1))
    return np.stack(parts, axis=2)


def make_windows(frame, spec, with_nwp=False):
    """Slice a standardized frame into lag windows and horizon targets."""
    L, n = spec.lag_count, spec.horizon
    N = len(frame)
    if N < L + n:
        raise ValueError(f"series of length {N} is shorter than lag_count + horizon = {L + n}")
    if with_nwp and not frame.has_nwp:
        raise ValueError("frame has no NWP channel")
    power = frame.channels["power"]
    speed = frame.channels["speed"]
    anchors = np.arange(L - 1, N - n)
    lag_idx = anchors[:, None] + np.arange(-L + 1, 1)[None, :]
    path_idx = anchors[:, None] + n + np.arange(-PATH_WIDTH + 1, 1)[None, :]
    cols = [power[lag_idx], speed[lag_idx]]
    if with_nwp:
        cols.append(frame.channels["nwp"][anchors + n][:, None])
    inputs = np.concatenate(cols, axis=1)
    path = power[path_idx]
    ok = ~(np.isnan(inputs).any(axis=1) | np.isnan(path).any(axis=1))
    return SupervisedSet(
        inputs=inputs[ok],
        targets=path[ok, -1].copy(),
        path=path[ok],
        target_times=frame.timestamps[anchors + n][ok],
        scalers=frame.scalers,
        spec=spec,
        with_nwp=with_nwp,
        entity=frame.entity,
        capacity_kw=frame.capacity_kw,
    )


def augment_white_noise(sset, spec):
    """Append ``factor - 1`` noisy copies of a training set.

    Copy 0 is the untouched original. Each extra copy adds zero-mean Gaussian
    noise whose std is ``noise_std_fraction`` times the column std, to inputs,
    targets and the auxiliary path alike.
    """
    if spec.factor < 1:
        raise ValueError("augmentation factor must be >= 1")
    if spec.factor == 1:
        return sset
    rng = np.random.default_rng(spec.seed)
    m = len(sset)
    in_std = sset.inputs.std(axis=0)
    path_std = sset.path.std(axis=0)
    inputs, path = [sset.inputs], [sset.path]
    for _ in range(spec.factor - 1):
        inputs.append(sset.inputs + rng.normal(size=sset.inputs.shape) * spec.noise_std_fraction * in_std)
        path.append(sset.path + rng.normal(size=sset.path.shape) * spec.noise_std_fraction * path_std)
    path = np.concatenate(path)
    reps = spec.factor
    return replace(
        sset,
        inputs=np.concatenate(inputs),
        targets=path[:, -1].copy(),
        path=path,
        target_times=np.tile(sset.target_times, reps),
        origin=np.tile(sset.origin, reps),
        copy=np.repeat(np.arange(reps), m),
    )


def read_entity_csv(path):
    """Read one entity file into ``{channel: RawSeries}``."""
    df = pd.read_csv(path)
    missing = {"timestamp", "power_kw", "wind_speed_ms"} - set(df.columns)
    if missing:
        raise ValueError(f"{path}: missing columns {sorted(missing)}")
    t = df["timestamp"].to_numpy()
    out = {}
    for chan, col in CSV_COLUMNS.items():
        if col in df.columns:
            out[chan] = RawSeries.from_samples(t, df[col].to_numpy(), chan)
    return out


def write_entity_csv(path, timestamps, channels):
    """Write ``{channel: values}`` using the ingestion schema."""
    stamps = np.datetime_as_string(_as_times(timestamps), unit="s")
    data = {"timestamp": [s + "Z" for s in stamps]}
    for chan in CHANNELS:
        if chan in channels:
            data[CSV_COLUMNS[chan]] = np.asarray(channels[chan], dtype=np.float64)
    pd.DataFrame(data).to_csv(path, index=False, float_format="%.6f")
