import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from windkd.data_prep import read_entity_csv
from windkd.synthetic import (
    N_PARK_TURBINES,
    TERRAINS,
    TerrainProfile,
    TurbineSpec,
    WeatherProcess,
    gen_park_dataset,
    is_stationary,
    power_curve,
)


@pytest.fixture(scope="module")
def park():
    return gen_park_dataset(seed=3, duration_days=30)


class TestPowerCurve:
    def test_direct_formula(self):
        expected = 0.5 * 1.27 * math.pi * 45.0 ** 2 * 0.45 * 8.0 ** 3 / 1000.0
        assert power_curve(8.0) == pytest.approx(expected, rel=1e-12)

    def test_regions(self):
        assert power_curve(3.9) == 0.0
        assert power_curve(25.1) == 0.0
        assert power_curve(12.0) == 3000.0
        assert power_curve(20.0) == 3000.0

    def test_negative_speed(self):
        with pytest.raises(ValueError):
            power_curve(-1.0)

    @settings(max_examples=60, deadline=None)
    @given(st.floats(0, 25), st.floats(0, 25))
    def test_monotone_below_cut_out(self, a, b):
        lo, hi = sorted((a, b))
        assert power_curve(lo) <= power_curve(hi)
        assert 0 <= power_curve(hi) <= 3000.0

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            TurbineSpec(cut_in=13.0)
        with pytest.raises(ValueError):
            TurbineSpec(cp_max=0.6)
        with pytest.raises(ValueError):
            TerrainProfile("x", 1.0, 0.1, 0.5)


class TestStationarity:
    def test_examples(self):
        assert is_stationary([0.5])
        assert not is_stationary([1.0])
        assert is_stationary([2 * 0.9, -0.81])
        assert not is_stationary([0.5, 0.6])
        assert is_stationary([])

    def test_rejected_weather(self):
        with pytest.raises(ValueError):
            WeatherProcess(ar_coefs=(1.1,))


class TestDataset:
    def test_layout(self, park):
        assert list(park.entities) == ["park", *TERRAINS]
        n = 30 * 144
        assert len(park.timestamps) == n
        for chans in park.entities.values():
            assert set(chans) == {"power", "speed", "nwp"}
            assert all(len(v) == n for v in chans.values())
        assert park.capacities["park"] == N_PARK_TURBINES * 3000.0

    def test_deterministic(self, park):
        again = gen_park_dataset(seed=3, duration_days=30)
        for name, chans in park.entities.items():
            for k, v in chans.items():
                assert v.tobytes() == again.entities[name][k].tobytes()
        other = gen_park_dataset(seed=4, duration_days=30)
        assert not np.array_equal(other.entities["park"]["power"], park.entities["park"]["power"])

    def test_bounds(self, park):
        p = park.entities["park"]["power"]
        assert p.min() >= 0 and p.max() <= N_PARK_TURBINES * 3000.0
        for name in TERRAINS:
            ch = park.entities[name]
            assert ch["power"].min() >= 0 and ch["power"].max() <= 3000.0
            assert ch["speed"].min() >= 0
            assert np.all(np.isfinite(ch["nwp"]))

    def test_turbine_speeds_track_park(self, park):
        ref = park.entities["park"]["speed"]
        for name in TERRAINS:
            assert np.corrcoef(ref, park.entities[name]["speed"])[0, 1] > 0.7

    def test_power_follows_curve(self, park):
        for name, prof in TERRAINS.items():
            ch = park.entities[name]
            np.testing.assert_allclose(ch["power"], power_curve(ch["speed"]) * (1 - prof.wake_loss))

    def test_nwp_is_noisier_than_measurement(self, park):
        speed = park.entities["park"]["speed"]
        nwp = park.entities["park"]["nwp"]
        rmse_nwp = np.sqrt(np.mean((nwp - speed) ** 2))
        rmse_persist = np.sqrt(np.mean((speed[6:] - speed[:-6]) ** 2))
        assert rmse_nwp > rmse_persist

    def test_short_duration(self):
        with pytest.raises(ValueError):
            gen_park_dataset(duration_days=29)

    def test_csv_round_trip(self, park, tmp_path):
        park.write_csv(tmp_path)
        assert (tmp_path / "manifest.json").exists()
        # values are written with six decimals
        chans = read_entity_csv(tmp_path / "T2.csv")
        assert chans["power"].timestamps.tobytes() == park.timestamps.tobytes()
        np.testing.assert_allclose(chans["power"].values, park.entities["T2"]["power"], rtol=0, atol=5e-7)
