"""Reproducible synthetic stand-in for a cold-climate 18-turbine wind park.

A shared park driver wind speed (seasonal-free: diurnal and synoptic
sinusoids over a smooth AR(2) anomaly) is scaled and roughened per terrain,
pushed through a clipped cubic power curve and summed into park output. The
NWP proxy is a smoothed, biased and noisy copy of the hourly driver.
"""
from dataclasses import asdict, dataclass, field
import hashlib
import json
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .data_prep import TEN_MIN, write_entity_csv

STEPS_PER_HOUR = 6
STEPS_PER_DAY = 144
N_PARK_TURBINES = 18
BETZ_LIMIT = 16.0 / 27.0


@dataclass(frozen=True)
class TurbineSpec:
    rotor_radius: float = 45.0
    capacity: float = 3000.0
    air_density: float = 1.27
    cp_max: float = 0.45
    cut_in: float = 4.0
    rated: float = 12.0
    cut_out: float = 25.0

    def __post_init__(self):
        if not 0 < self.cut_in < self.rated < self.cut_out:
            raise ValueError("need 0 < cut_in < rated < cut_out")
        if not 0 < self.cp_max < BETZ_LIMIT:
            raise ValueError("cp_max must lie below the Betz limit")


@dataclass(frozen=True)
class TerrainProfile:
    kind: str
    speed_scale: float
    turbulence_std: float
    wake_loss: float

    def __post_init__(self):
        if self.speed_scale <= 0:
            raise ValueError("speed_scale must be positive")
        if not 0 <= self.wake_loss < 0.3:
            raise ValueError("wake_loss must lie in [0, 0.3)")


TERRAINS = {
    "T1": TerrainProfile("Plateau", 1.00, 0.075, 0.02),
    "T2": TerrainProfile("Valley", 0.85, 0.200, 0.10),
    "T3": TerrainProfile("Lakeside", 1.00, 0.100, 0.03),
    "T4": TerrainProfile("Hilltop", 1.15, 0.175, 0.05),
    "T5": TerrainProfile("Seaside", 1.05, 0.150, 0.08),
}


@dataclass(frozen=True)
class WeatherProcess:
    """Park driver wind speed at 10-minute resolution.

    ``ar_coefs`` act on the 10-minute anomaly; the default is a critically
    damped AR(2) with a correlation time of ``1 / -ln(r)`` steps.
    """

    base_speed: float = 8.5
    diurnal_amp: float = 0.05
    diurnal_period_h: float = 24.0
    synoptic_amp: float = 4.0
    synoptic_period_h: float = 144.0
    ar_coefs: tuple = (2 * 0.999, -(0.999 ** 2))
    ar_noise_std: float = 7e-5
    nwp_bias: float = 0.5
    nwp_noise_std: float = 0.6
    nwp_window_h: int = 24

    def __post_init__(self):
        if not is_stationary(self.ar_coefs):
            raise ValueError("AR coefficients are not stationary")


def is_stationary(coefs):
    """True when every root of ``1 - sum(phi_k z^k)`` lies outside the unit circle."""
    coefs = np.asarray(coefs, dtype=np.float64)
    if coefs.size == 0:
        return True
    poly = np.concatenate([-coefs[::-1], [1.0]])
    return bool(np.all(np.abs(np.roots(poly)) > 1.0))


def power_curve(v, spec=TurbineSpec()):
    """Power in kW from wind speed in m/s using a constant power coefficient."""
    v = np.asarray(v, dtype=np.float64)
    if np.any(v < 0):
        raise ValueError("wind speed must be non-negative")
    aero = 0.5 * spec.air_density * np.pi * spec.rotor_radius ** 2 * spec.cp_max * v ** 3 / 1000.0
    p = np.minimum(aero, spec.capacity)
    p = np.where(v >= spec.rated, spec.capacity, p)
    return np.where((v < spec.cut_in) | (v > spec.cut_out), 0.0, p)


def simulate_ar(coefs, noise_std, n, rng, burn_in=2000):
    e = rng.normal(scale=noise_std, size=n + burn_in)
    x = lfilter([1.0], np.concatenate([[1.0], -np.asarray(coefs, dtype=np.float64)]), e)
    return x[burn_in:]


def driver_speed(weather, n_steps, rng):
    t = np.arange(n_steps)
    ph_d, ph_s = rng.uniform(0, 2 * np.pi, size=2)
    diurnal = weather.diurnal_amp * np.sin(2 * np.pi * t / (weather.diurnal_period_h * STEPS_PER_HOUR) + ph_d)
    synoptic = weather.synoptic_amp * np.sin(2 * np.pi * t / (weather.synoptic_period_h * STEPS_PER_HOUR) + ph_s)
    anomaly = simulate_ar(weather.ar_coefs, weather.ar_noise_std, n_steps, rng)
    return np.maximum(weather.base_speed + diurnal + synoptic + anomaly, 0.0)


def turbine_series(driver, profile, spec, rng):
    """Speed and power of one turbine given the park driver speed."""
    speed = np.maximum(driver * profile.speed_scale + rng.normal(scale=profile.turbulence_std, size=driver.shape), 0.0)
    power = power_curve(speed, spec) * (1.0 - profile.wake_loss)
    return speed, power


def generic_profiles(rng, count):
    out = []
    for k in range(count):
        out.append(TerrainProfile(
            f"Generic{k + 1}",
            float(rng.uniform(0.9, 1.1)),
            float(rng.uniform(0.075, 0.15)),
            float(rng.uniform(0.02, 0.08)),
        ))
    return out


def nwp_proxy(driver, weather, rng):
    """Hourly NWP stand-in, held constant across each hour's 10-minute rows."""
    n_hours = len(driver) // STEPS_PER_HOUR
    hourly = driver[:n_hours * STEPS_PER_HOUR].reshape(n_hours, STEPS_PER_HOUR).mean(axis=1)
    w = weather.nwp_window_h
    kernel = np.ones(w) / w
    padded = np.pad(hourly, (w // 2, w - 1 - w // 2), mode="edge")
    smooth = np.convolve(padded, kernel, mode="valid")
    noisy = np.maximum(smooth + weather.nwp_bias + rng.normal(scale=weather.nwp_noise_std, size=n_hours), 0.0)
    out = np.repeat(noisy, STEPS_PER_HOUR)
    tail = len(driver) - len(out)
    return np.concatenate([out, np.full(tail, out[-1] if len(out) else np.nan)])


@dataclass
class ParkDataset:
    """10-minute series for the park and each profiled turbine."""

    timestamps: np.ndarray
    entities: dict
    capacities: dict
    driver: np.ndarray
    manifest: dict = field(default_factory=dict)

    def write_csv(self, out_dir):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for name, chans in self.entities.items():
            write_entity_csv(out_dir / f"{name}.csv", self.timestamps, chans)
        with open(out_dir / "manifest.json", "w") as fh:
            json.dump(self.manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _subseed(seed, label):
    digest = hashlib.sha256(f"{seed}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def gen_park_dataset(seed=0, duration_days=365, weather=None, spec=None, terrains=None,
                     start="2017-01-01T00:00:00"):
    """Generate park, turbine and NWP series; deterministic in ``seed``."""
    if duration_days < 30:
        raise ValueError("duration_days must be >= 30")
    weather = WeatherProcess() if weather is None else weather
    spec = TurbineSpec() if spec is None else spec
    terrains = dict(TERRAINS) if terrains is None else dict(terrains)
    n_steps = int(duration_days * STEPS_PER_DAY)
    stamps = np.datetime64(start, "s") + np.arange(n_steps) * TEN_MIN

    driver = driver_speed(weather, n_steps, np.random.default_rng(_subseed(seed, "driver")))
    nwp = nwp_proxy(driver, weather, np.random.default_rng(_subseed(seed, "nwp")))

    n_generic = N_PARK_TURBINES - len(terrains)
    generic = generic_profiles(np.random.default_rng(_subseed(seed, "generic")), n_generic)
    entities = {}
    park_power = np.zeros(n_steps)
    park_speed = np.zeros(n_steps)
    for name, profile in terrains.items():
        speed, power = turbine_series(driver, profile, spec, np.random.default_rng(_subseed(seed, name)))
        entities[name] = {"power": power, "speed": speed, "nwp": nwp}
        park_power += power
        park_speed += speed
    for k, profile in enumerate(generic):
        speed, power = turbine_series(driver, profile, spec, np.random.default_rng(_subseed(seed, f"G{k}")))
        park_power += power
        park_speed += speed
    entities = {"park": {"power": park_power, "speed": park_speed / N_PARK_TURBINES, "nwp": nwp}, **entities}
    capacities = {name: spec.capacity for name in terrains}
    capacities["park"] = spec.capacity * N_PARK_TURBINES
    manifest = {
        "seed": seed,
        "duration_days": duration_days,
        "start": start,
        "weather": asdict(weather),
        "turbine": asdict(spec),
        "terrains": {k: asdict(v) for k, v in terrains.items()},
        "generic_terrains": [asdict(p) for p in generic],
        "capacities_kw": capacities,
    }
    return ParkDataset(stamps, entities, capacities, driver, manifest)
