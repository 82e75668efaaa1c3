import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from grad_models import KDModel, sequence_batch
from windkd.data_prep import SeriesFrame, WindowSpec, make_windows, split_train_test
from windkd.distill import (
    KDConfig,
    RelErrBatch,
    align_targets,
    compare_term,
    kd_loss,
    kd_loss_min_form,
    kd_loss_terms,
    rel_error,
    train_student_kd,
)
from windkd.nn.core import grad_check
from windkd.nn.recurrent import BiLSTMNet

T0 = np.datetime64("2017-01-01T00:00:00", "s")


class TestRelError:
    def test_examples(self):
        assert rel_error(1000.0, 1000.0, 3000.0) == 0.0
        assert rel_error(1000.0, 1100.0, 3000.0) == pytest.approx(0.1, abs=1e-15)
        # floor 0.01 * 3000 = 30 kW replaces a zero measurement
        assert rel_error(0.0, 150.0, 3000.0) == pytest.approx(5.0, abs=1e-15)

    def test_errors(self):
        with pytest.raises(ValueError):
            rel_error(1.0, 1.0, 0.0)

    @settings(max_examples=60, deadline=None)
    @given(st.floats(0, 3000), st.floats(0, 3000), st.floats(0.01, 100))
    def test_scale_invariant(self, m, p, k):
        a = rel_error(m, p, 3000.0)
        b = rel_error(m * k, p * k, 3000.0 * k)
        assert a >= 0
        assert b == pytest.approx(a, rel=1e-9, abs=1e-12)


class TestCompareTerm:
    def test_open(self):
        # ||S|| > ||T||: (0.3-0.0)^2 + (0.3-0.0)^2
        assert compare_term([0.3, 0.3], [0.0, 0.0]) == pytest.approx(0.18, abs=1e-15)

    def test_boundary_is_closed(self):
        assert compare_term([0.1, 0.2], [0.2, 0.1]) == 0.0

    def test_closed_when_student_better(self):
        assert compare_term([0.1, 0.1], [0.5, 0.5]) == 0.0

    def test_per_sample(self):
        assert compare_term([0.5, 0.1], [0.2, 0.4], per_sample=True) == pytest.approx(0.09, abs=1e-15)

    def test_unaligned(self):
        with pytest.raises(ValueError):
            compare_term([0.1], [0.1, 0.2])
        with pytest.raises(ValueError):
            compare_term([-0.1], [0.1])


class TestKDLoss:
    def test_alpha_one_is_hard_term(self):
        rng = np.random.default_rng(0)
        s, t = rng.uniform(0, 1, 9), rng.uniform(0, 1, 9)
        assert kd_loss(RelErrBatch(t, s), KDConfig(alpha=1.0)) == float(np.sum(s * s)) / 9

    def test_alpha_zero_beaten_teacher(self):
        assert kd_loss(RelErrBatch([0.5, 0.6], [0.1, 0.2]), KDConfig(alpha=0.0)) == 0.0

    def test_hand_case(self):
        s = [0.2, 0.1, 0.4]
        t = [0.1, 0.1, 0.1]
        hard = 0.04 + 0.01 + 0.16
        comp = 0.01 + 0.0 + 0.09
        expected = (0.8 * hard + 0.2 * comp) / 3
        terms = kd_loss_terms(RelErrBatch(t, s), KDConfig(alpha=0.8))
        assert abs(terms["total"] - expected) < 1e-12
        assert terms["gate_open"] == 1.0

    def test_min_form(self):
        s, t = np.array([0.2, 0.05]), np.array([0.1, 0.3])
        soft = np.minimum(s * s, (s - t) ** 2)
        expected = np.mean(0.7 * s * s + 0.3 * soft)
        assert kd_loss_min_form(RelErrBatch(t, s), KDConfig(alpha=0.7)) == pytest.approx(expected, abs=1e-15)

    def test_empty(self):
        with pytest.raises(ValueError):
            kd_loss(RelErrBatch([], []), KDConfig())

    def test_bad_config(self):
        with pytest.raises(ValueError):
            KDConfig(alpha=1.5)
        with pytest.raises(ValueError):
            KDConfig(select_on="rmse")

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.tuples(st.floats(0, 2), st.floats(0, 2)), min_size=1, max_size=10),
           st.floats(0, 1))
    def test_bounds(self, pairs, alpha):
        t, s = zip(*pairs)
        b = RelErrBatch(t, s)
        total = kd_loss(b, KDConfig(alpha=alpha))
        assert total >= alpha * np.mean(np.square(s)) - 1e-12
        assert total <= np.mean(np.square(s)) + (1 - alpha) * np.mean(np.square(np.subtract(s, t))) + 1e-12

    def test_gradient(self):
        X = sequence_batch(3, batch=4, steps=7, features=2)
        m = KDModel(3, X)
        assert grad_check(m, X, np.zeros((4, 7))) < 1e-4
        assert m.gate_open == 1.0


def _frame(entity, n, seed, scale):
    rng = np.random.default_rng(seed)
    t = np.arange(n)
    speed = 8 + 3 * np.sin(2 * np.pi * t / 24) + rng.normal(0, 0.5, n)
    power = np.clip(scale * (speed / 14) ** 3 + rng.normal(0, 0.02 * scale, n), 0, scale)
    stamps = T0 + t * np.timedelta64(1, "h")
    return SeriesFrame(entity, stamps, {"power": power, "speed": speed}, scale)


def _sets():
    spec = WindowSpec(7, 6)
    park, _ = split_train_test(_frame("park", 300, 1, 54000.0))
    turb, _ = split_train_test(_frame("T1", 300, 2, 3000.0))
    return make_windows(park, spec), make_windows(turb, spec)


class _ConstTeacher:
    def __init__(self, value):
        self.value = value

    def forward(self, X, training=False):
        return np.full((len(X), 7), self.value)


class TestTrainStudent:
    def test_teacher_frozen_and_deterministic(self, tmp_path):
        park, turb = _sets()
        teacher = BiLSTMNet(2, seed=1)
        before = [p.value.copy() for p in teacher.params()]
        cfg = KDConfig(max_epochs=3, stop_on_beating_teacher=False, patience=10)
        out = []
        for k in range(2):
            student = BiLSTMNet(2, seed=0)
            _, log = train_student_kd(student, teacher, park, turb, cfg, seed=4,
                                      log_path=tmp_path / f"kd{k}.csv")
            out.append([p.value.tobytes() for p in student.params()])
        assert out[0] == out[1]
        assert all(np.array_equal(p.value, v) for p, v in zip(teacher.params(), before))
        assert len(log) == 3
        rows = list(csv.DictReader(open(tmp_path / "kd0.csv")))
        assert [r["epoch"] for r in rows] == ["1", "2", "3"]
        assert set(rows[0]) == {"epoch", "hard_term", "compare_term", "total", "gate_open_fraction"}
        assert (tmp_path / "kd0.csv").read_bytes() == (tmp_path / "kd1.csv").read_bytes()

    def test_stops_once_teacher_beaten(self):
        park, turb = _sets()
        # a teacher predicting 1e3 std above the park mean has huge relative error
        _, log = train_student_kd(BiLSTMNet(2, seed=0), _ConstTeacher(1e3), park, turb,
                                  KDConfig(max_epochs=10))
        assert len(log) == 1

    def test_alpha_one_skips_teacher(self):
        park, turb = _sets()

        class Boom:
            def forward(self, *a, **k):
                raise AssertionError("teacher evaluated")
        _, log = train_student_kd(BiLSTMNet(2, seed=0), Boom(), park, turb,
                                  KDConfig(alpha=1.0, max_epochs=2))
        assert all(r.compare_term == 0.0 for r in log)

    def test_checkpoint_never_worse(self):
        park, turb = _sets()
        student = BiLSTMNet(2, seed=0)
        X, Y = turb.sequences(), turb.targets
        n_val = int(round(len(X) * 0.1))

        def val_mse():
            return float(np.mean((student.forward(X[-n_val:])[:, 0] - Y[-n_val:]) ** 2))
        start = val_mse()
        train_student_kd(student, BiLSTMNet(2, seed=1), park, turb,
                         KDConfig(max_epochs=4, stop_on_beating_teacher=False))
        assert val_mse() <= start

    def test_alignment(self):
        ip, it = align_targets(np.array([1, 2, 3, 5]), np.array([2, 3, 4, 5]))
        assert ip.tolist() == [1, 2, 3] and it.tolist() == [0, 1, 3]
        with pytest.raises(ValueError):
            align_targets(np.array([1]), np.array([2]))

    def test_no_overlap(self):
        park, turb = _sets()
        turb.target_times = turb.target_times + np.timedelta64(10000, "h")
        with pytest.raises(ValueError):
            train_student_kd(BiLSTMNet(2), BiLSTMNet(2), park, turb, KDConfig())
