import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from windkd.evaluate import (
    MetricRow,
    friedman,
    geomean_rate,
    inter_step_rates,
    midranks,
    param_count,
    qr,
    rising_rates,
    rmse,
    time_per_call,
)
from windkd.nn.core import Dense


def count_ranks(row):
    """Rank by counting: 1 + strictly smaller + half of the other ties."""
    return np.array([1 + sum(v < x for v in row) + 0.5 * (sum(v == x for v in row) - 1) for x in row])


def friedman_oracle(table):
    t, k = len(table), len(table[0])
    r = np.mean([count_ranks(row) for row in table], axis=0)
    return 12 * t / (k * (k + 1)) * (sum(r * r) - k * (k + 1) ** 2 / 4)


class TestRMSE:
    def test_examples(self):
        assert rmse([1, 2, 3], [1, 2, 3]) == 0.0
        assert rmse([0, 0], [3, 4]) == pytest.approx(math.sqrt(12.5), abs=1e-15)

    def test_errors(self):
        with pytest.raises(ValueError):
            rmse([1], [1, 2])
        with pytest.raises(ValueError):
            rmse([], [])


class TestQR:
    def test_boundary_counts(self):
        # error 300 on 3000 kW gives exactly 0.9
        assert qr([1000.0], [1300.0], 3000.0) == 1.0
        assert qr([1000.0], [1300.5], 3000.0) == 0.0

    def test_half(self):
        assert qr([1000.0, 1000.0], [1000.0, 1600.0], 3000.0) == 0.5

    def test_errors(self):
        with pytest.raises(ValueError):
            qr([1.0], [1.0], 0.0)
        with pytest.raises(ValueError):
            qr([1.0], [1.0], 10.0, q=1.0)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, 6, elements=st.integers(0, 3000).map(float)),
           arrays(np.float64, 6, elements=st.integers(0, 3000).map(float)),
           st.sampled_from([0.5, 2.0, 4.0]))
    def test_scale_invariant(self, m, p, k):
        v = qr(m, p, 3000.0)
        assert 0.0 <= v <= 1.0
        assert qr(m * k, p * k, 3000.0 * k) == v


class TestFriedman:
    def test_midranks(self):
        np.testing.assert_array_equal(midranks([3.0, 1.0, 3.0, 2.0]), [3.5, 1.0, 3.5, 2.0])
        np.testing.assert_array_equal(midranks([5.0, 5.0, 5.0]), [2.0, 2.0, 2.0])

    def test_hand_case(self):
        res = friedman([[1, 2, 3]] * 3)
        assert res.statistic == pytest.approx(6.0, abs=1e-12)
        assert res.p_value == pytest.approx(math.exp(-3.0), abs=1e-14)

    def test_all_tied(self):
        res = friedman(np.ones((4, 3)))
        assert res.statistic == 0.0 and res.p_value == 1.0

    def test_matches_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(25):
            t, k = int(rng.integers(2, 9)), int(rng.integers(2, 7))
            table = rng.integers(0, 4, size=(t, k)).astype(float)
            assert friedman(table).statistic == pytest.approx(max(friedman_oracle(table), 0.0), abs=1e-10)

    def test_chi2_tail(self):
        # dof 2 tail is exp(-x/2)
        res = friedman([[1, 2, 3], [1, 3, 2], [2, 1, 3], [1, 2, 3]])
        assert res.p_value == pytest.approx(math.exp(-res.statistic / 2), abs=1e-14)

    def test_errors(self):
        with pytest.raises(ValueError):
            friedman([[1, 2]])
        with pytest.raises(ValueError):
            friedman([[1, np.nan], [1, 2]])
        with pytest.raises(ValueError):
            friedman([1, 2, 3])

    @settings(max_examples=40, deadline=None)
    @given(st.integers(2, 6), st.integers(2, 5), st.integers(0, 2 ** 31))
    def test_bounds(self, t, k, seed):
        table = np.random.default_rng(seed).normal(size=(t, k))
        res = friedman(table)
        assert 0.0 <= res.statistic <= t * (k - 1) + 1e-9
        assert 0.0 <= res.p_value <= 1.0
        assert res.mean_ranks.sum() == pytest.approx(k * (k + 1) / 2)


class TestRates:
    def test_example(self):
        rates = inter_step_rates([1.0, 1.1, 1.21])
        np.testing.assert_allclose(rates, [0.1, 0.1], atol=1e-14)
        g, s = rising_rates([1.0, 1.1, 1.21])
        assert g == pytest.approx(0.1, abs=1e-14) and s == pytest.approx(0.0, abs=1e-14)

    def test_geomean_telescopes(self):
        v = np.array([0.3, 0.5, 0.45, 0.9])
        g, _ = rising_rates(v)
        assert g == pytest.approx((v[-1] / v[0]) ** (1 / 3) - 1, abs=1e-14)

    def test_errors(self):
        with pytest.raises(ValueError):
            inter_step_rates([1.0])
        with pytest.raises(ValueError):
            inter_step_rates([0.0, 1.0])
        with pytest.raises(ValueError):
            geomean_rate([-1.0])


class TestSizeAndTime:
    def test_param_count(self):
        assert param_count(Dense(7, 15, rng=np.random.default_rng(0))) == 120

    def test_time_per_call(self):
        assert time_per_call(lambda: sum(range(100)), 10, repeats=3) >= 0.0

    def test_metric_row(self):
        row = MetricRow("KD", "T1", 6, 0.3, 0.8)
        assert row.as_dict()["model"] == "KD"
        with pytest.raises(ValueError):
            MetricRow("KD", "T1", 6, -0.1, 0.5)
        with pytest.raises(ValueError):
            MetricRow("KD", "T1", 6, 0.1, 1.5)
