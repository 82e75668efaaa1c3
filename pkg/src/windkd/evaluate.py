"""Forecast metrics, the Friedman rank test and rising-rate statistics."""
from dataclasses import asdict, dataclass, field
import time

import numpy as np
from scipy.stats import chi2, rankdata


@dataclass
class MetricRow:
    """One (model, turbine, horizon) evaluation cell.

    ``rmse`` is in standardized power units, ``qr90`` uses capacity-normalized
    kW errors.
    """

    model: str
    turbine: str
    horizon: int
    rmse: float
    qr90: float
    param_count: int = 0
    train_seconds: float = 0.0
    infer_seconds: float = 0.0

    def __post_init__(self):
        if self.rmse < 0:
            raise ValueError("rmse must be non-negative")
        if not 0.0 <= self.qr90 <= 1.0:
            raise ValueError("qr90 must lie in [0, 1]")

    def as_dict(self):
        return asdict(self)


def rmse(measured, predicted):
    measured = np.asarray(measured, dtype=np.float64)
    predicted = np.asarray(predicted, dtype=np.float64)
    if measured.shape != predicted.shape:
        raise ValueError(f"length mismatch: {measured.shape} vs {predicted.shape}")
    if measured.size == 0:
        raise ValueError("need at least one sample")
    return float(np.sqrt(np.mean((measured - predicted) ** 2)))


def qr(measured_kw, predicted_kw, cap, q=0.9):
    """Fraction of samples with ``1 - |P - P_hat| / cap >= q``."""
    if cap <= 0:
        raise ValueError("cap must be positive")
    if not 0.0 < q < 1.0:
        raise ValueError("q must lie in (0, 1)")
    measured_kw = np.asarray(measured_kw, dtype=np.float64)
    predicted_kw = np.asarray(predicted_kw, dtype=np.float64)
    if measured_kw.shape != predicted_kw.shape:
        raise ValueError("length mismatch")
    score = 1.0 - np.abs(measured_kw - predicted_kw) / cap
    return float(np.mean(score >= q))


# ---------------------------------------------------------------- Friedman

@dataclass
class FriedmanResult:
    statistic: float
    p_value: float
    k: int
    t: int
    mean_ranks: np.ndarray = field(repr=False)


def midranks(row):
    """Ranks 1..k with ties sharing the mean of the ranks they span."""
    return rankdata(np.asarray(row, dtype=np.float64), method="average")


def friedman(table):
    """Friedman statistic ``12t/(k(k+1)) [sum r_i^2 - k(k+1)^2/4]`` over a t x k table.

    No tie correction is applied, unlike ``scipy.stats.friedmanchisquare``.
    """
    table = np.asarray(table, dtype=np.float64)
    if table.ndim != 2:
        raise ValueError("table must be two-dimensional")
    t, k = table.shape
    if t < 2 or k < 2:
        raise ValueError("need at least 2 rows and 2 columns")
    if not np.all(np.isfinite(table)):
        raise ValueError("table contains non-finite values")
    ranks = np.vstack([midranks(r) for r in table])
    r = ranks.mean(axis=0)
    stat = 12.0 * t / (k * (k + 1)) * (np.sum(r * r) - k * (k + 1) ** 2 / 4.0)
    stat = max(float(stat), 0.0)
    if abs(stat) < 1e-12:
        stat = 0.0
    return FriedmanResult(stat, float(chi2.sf(stat, k - 1)), k, t, r)


# ---------------------------------------------------------------- rates, sizes, timing

def inter_step_rates(rmse_by_step):
    v = np.asarray(rmse_by_step, dtype=np.float64)
    if v.size < 2:
        raise ValueError("need at least two steps")
    if np.any(v == 0):
        raise ValueError("rmse of zero makes the rate undefined")
    return v[1:] / v[:-1] - 1.0


def geomean_rate(rates):
    """``exp(mean(ln(1 + r))) - 1``; every rate must exceed -1."""
    rates = np.asarray(rates, dtype=np.float64)
    if np.any(rates <= -1):
        raise ValueError("rates must exceed -1")
    return float(np.expm1(np.mean(np.log1p(rates))))


def rising_rates(rmse_by_step):
    """Geometric-mean inter-step rising rate and the std of the raw rates."""
    rates = inter_step_rates(rmse_by_step)
    return geomean_rate(rates), float(np.std(rates))


def param_count(net):
    return int(sum(p.value.size for p in net.params()))


def time_per_call(fn, n_items, repeats=5):
    """Median wall time of ``fn()`` over ``repeats`` runs, divided by ``n_items``."""
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times)) / max(int(n_items), 1)
