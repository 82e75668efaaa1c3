import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from grad_models import LD1Model, LD2Model
from windkd.nn.core import Adam, EarlyStopSpec, RegularizerWeights, grad_check, mse_loss
from windkd.nn.training import train_network
from windkd.transfer import (
    KernelSpec,
    TLConfig,
    UnivariateTLNet,
    fine_tune,
    kl_divergence,
    loss_d1,
    loss_d2,
    median_heuristic,
    mmd,
    mmd_and_grad,
    mmd_squared,
)


def naive_mmd2(x, y, k):
    """Double-loop kernel sums."""
    sxx = sum(k(a, b) for a in x for b in x) / len(x) ** 2
    sxy = sum(k(a, b) for a in x for b in y) / (len(x) * len(y))
    syy = sum(k(a, b) for a in y for b in y) / len(y) ** 2
    return sxx - 2 * sxy + syy


def rbf(sigma):
    return lambda a, b: math.exp(-sum((u - v) ** 2 for u, v in zip(a, b)) / (2 * sigma ** 2))


def linear(a, b):
    return sum(u * v for u, v in zip(a, b))


class TestKL:
    def test_identity(self):
        assert kl_divergence([0.3, 0.7], [0.3, 0.7]) == 0.0

    def test_closed_form(self):
        expected = 0.5 * math.log(5 / 9) + 0.5 * math.log(5)
        assert kl_divergence([0.5, 0.5], [0.9, 0.1]) == pytest.approx(expected, abs=1e-15)

    def test_asymmetry(self):
        assert kl_divergence([0.5, 0.5], [0.9, 0.1]) != kl_divergence([0.9, 0.1], [0.5, 0.5])

    def test_support_violation(self):
        with pytest.raises(ValueError):
            kl_divergence([0.5, 0.5], [1.0, 0.0])
        with pytest.raises(ValueError):
            kl_divergence([0.5, 0.6], [0.5, 0.5])

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.integers(1, 50), min_size=2, max_size=6), st.integers(0, 2 ** 31))
    def test_nonneg_zero_iff_equal(self, counts, seed):
        p = np.array(counts, float) / sum(counts)
        q = np.random.default_rng(seed).dirichlet(np.ones(len(p)))
        assert kl_divergence(p, q) >= 0
        assert kl_divergence(p, p) == 0
        if np.max(np.abs(p - q)) > 1e-3:
            assert kl_divergence(p, q) > 0


class TestMMD:
    def test_oracle_rbf(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            n, m, d = rng.integers(1, 20, size=2).tolist() + [int(rng.integers(1, 6))]
            x, y = rng.normal(size=(n, d)), rng.normal(0.5, 1.3, size=(m, d))
            s = float(rng.uniform(0.3, 3))
            assert abs(mmd_squared(x, y, KernelSpec("rbf", s)) - naive_mmd2(x, y, rbf(s))) < 1e-12

    def test_linear_is_mean_gap(self):
        rng = np.random.default_rng(1)
        x, y = rng.normal(size=(13, 4)), rng.normal(1, 1, size=(9, 4))
        gap = np.sum((x.mean(0) - y.mean(0)) ** 2)
        v = mmd_squared(x, y, KernelSpec("linear"))
        assert abs(v - gap) < 1e-10
        assert abs(v - naive_mmd2(x, y, linear)) < 1e-10

    def test_identical_sets(self):
        x = np.random.default_rng(2).normal(size=(10, 3))
        assert mmd(x, x) < 1e-10
        assert mmd(x, x, KernelSpec("linear")) < 1e-10

    def test_symmetric(self):
        rng = np.random.default_rng(3)
        x, y = rng.normal(size=(8, 3)), rng.normal(size=(5, 3))
        assert mmd(x, y) == pytest.approx(mmd(y, x), abs=1e-14)

    def test_median_heuristic(self):
        x = np.array([[0.0], [1.0]])
        y = np.array([[3.0]])
        # pooled distinct pairs: 1, 3, 2
        assert median_heuristic(x, y) == 2.0
        assert median_heuristic(np.zeros((2, 1)), np.zeros((1, 1))) == 1.0

    def test_errors(self):
        with pytest.raises(ValueError):
            mmd(np.ones((3, 2)), np.ones((3, 3)))
        with pytest.raises(ValueError):
            KernelSpec("poly")
        with pytest.raises(ValueError):
            KernelSpec("rbf", -1.0)

    @pytest.mark.parametrize("kind", ["rbf", "linear"])
    def test_gradient(self, kind):
        rng = np.random.default_rng(4)
        x, y = rng.normal(size=(6, 3)), rng.normal(0.7, 1, size=(4, 3))
        k = KernelSpec(kind)
        bw = 1.3 if kind == "rbf" else None
        _, g = mmd_and_grad(x, y, k, bw)
        eps = 1e-6
        fd = np.empty_like(y)
        for idx in np.ndindex(y.shape):
            d = np.zeros_like(y)
            d[idx] = eps
            fd[idx] = (mmd(x, y + d, k, bw) - mmd(x, y - d, k, bw)) / (2 * eps)
        np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-9)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 12), st.integers(1, 12), st.integers(1, 4), st.integers(0, 2 ** 31))
    def test_nonneg(self, n, m, d, seed):
        rng = np.random.default_rng(seed)
        x, y = rng.normal(size=(n, d)), rng.normal(size=(m, d))
        assert mmd(x, y) >= 0 and mmd(x, y, KernelSpec("linear")) >= 0


class TestLosses:
    def test_ld1_degenerate(self):
        rng = np.random.default_rng(0)
        net = UnivariateTLNet(seed=0)
        X, Y = rng.normal(size=(5, 7)), rng.normal(size=(5, 7))
        pred = net.forward(X)
        assert loss_d1(pred, Y, net, RegularizerWeights()) == mse_loss(pred, Y)[0]

    def test_ld1_all_terms_vanish(self):
        net = UnivariateTLNet(seed=0)
        for p in net.params():
            p.value[:] = 0
        X = np.zeros((4, 7))
        pred = net.forward(X)
        # zero weights give sigmoid(0) = 0.5 everywhere, so target sparsity 0.5 matches
        reg = RegularizerWeights(l2_weight=1.0, sparse_weight=1.0, sparsity_target=0.5)
        assert loss_d1(pred, np.zeros((4, 7)), net, reg) == pytest.approx(0.0, abs=1e-15)

    def test_ld1_gradient(self):
        rng = np.random.default_rng(1)
        assert grad_check(LD1Model(1), rng.normal(size=(5, 7)), rng.normal(size=(5, 7))) < 1e-5

    @pytest.mark.parametrize("kind", ["rbf", "linear"])
    def test_ld2_gradient(self, kind):
        rng = np.random.default_rng(2)
        m = LD2Model(2, rng.normal(size=(4, 7)), kernel=kind)
        assert grad_check(m, rng.normal(size=(3, 7)), rng.normal(size=(3, 7))) < 1e-4

    def test_ld2_gamma_zero(self):
        acts = [np.ones((3, 2))]
        assert loss_d2(1.25, acts, [np.zeros((3, 2))], TLConfig(gamma=0.0)) == 1.25

    def test_ld2_identical(self):
        acts = [np.random.default_rng(0).normal(size=(4, 3))]
        assert loss_d2(0.5, acts, acts, TLConfig(gamma=0.6)) == pytest.approx(0.5, abs=1e-10)

    def test_ld2_hand_case(self):
        rng = np.random.default_rng(5)
        src = [rng.normal(size=(3, 2)), rng.normal(size=(3, 4))]
        tgt = [rng.normal(size=(3, 2)), rng.normal(size=(3, 4))]
        cfg = TLConfig(gamma=0.4, kernel=KernelSpec("rbf", 1.5))
        expected = 0.9 + 0.4 * sum(math.sqrt(naive_mmd2(s, t, rbf(1.5))) for s, t in zip(src, tgt))
        assert abs(loss_d2(0.9, src, tgt, cfg) - expected) < 1e-10

    def test_ld2_layer_mismatch(self):
        with pytest.raises(ValueError):
            loss_d2(0.0, [np.ones((2, 2))], [], TLConfig())


class TestTLNet:
    def test_topology(self):
        net = UnivariateTLNet()
        assert [(l.n_in, l.n_out) for l in net.layers] == [(7, 15), (15, 10), (10, 15), (15, 7)]
        assert [l.activation for l in net.layers] == ["sigmoid"] * 3 + ["identity"]
        assert net.param_count() == 7 * 15 + 15 + 15 * 10 + 10 + 10 * 15 + 15 + 15 * 7 + 7
        assert net.layers[0].W.size + net.layers[0].b.size == 120

    def test_hidden_cache(self):
        net = UnivariateTLNet()
        net.forward(np.zeros((3, 7)))
        assert [h.shape for h in net.hidden] == [(3, 15), (3, 10), (3, 15)]


def _pairs(seed, n=300, shift=0.0):
    rng = np.random.default_rng(seed)
    X = rng.normal(shift, 1, size=(n, 7))
    return X, np.tanh(X) * 0.5


class TestFineTune:
    def setup_method(self):
        self.source = UnivariateTLNet(seed=0)
        Xs, Ys = _pairs(0)
        train_network(self.source, Xs, Ys, max_epochs=20, seed=0)
        self.src_set = (Xs, Ys)

    def test_gamma_zero_is_plain_training(self):
        Xt, Yt = _pairs(1, shift=0.5)
        cfg = TLConfig(gamma=0.0, max_epochs=5, patience=5)
        tuned = fine_tune(self.source, (Xt, Yt), self.src_set, cfg, seed=3)
        plain = UnivariateTLNet(seed=0)
        for p, q in zip(plain.params(), self.source.params()):
            p.value[:] = q.value
        res = train_network(plain, Xt, Yt, optimizer=Adam(lr=cfg.learning_rate),
                            early_stop=EarlyStopSpec(patience=5), batch_size=cfg.batch_size,
                            max_epochs=5, seed=3, include_initial=True)
        assert tuned.history_.loss == res.loss
        assert all(np.array_equal(p.value, q.value) for p, q in zip(tuned.params(), plain.params()))

    def test_no_shift_not_worse(self):
        cfg = TLConfig(gamma=0.6, max_epochs=5)
        tuned = fine_tune(self.source, self.src_set, self.src_set, cfg, seed=1)
        Xs, Ys = self.src_set
        n_val = 30
        before = loss_d1(self.source.forward(Xs[-n_val:]), Ys[-n_val:], self.source, cfg.reg)
        after = loss_d1(tuned.forward(Xs[-n_val:]), Ys[-n_val:], tuned, cfg.reg)
        assert after <= before + 1e-3

    def test_source_untouched_and_deterministic(self):
        before = [p.value.copy() for p in self.source.params()]
        Xt, _ = _pairs(2, shift=1.0)
        cfg = TLConfig(gamma=0.6, max_epochs=3, source_batch=64)
        a = fine_tune(self.source, (Xt, None), self.src_set, cfg, seed=5)
        b = fine_tune(self.source, (Xt, None), self.src_set, cfg, seed=5)
        assert all(np.array_equal(p.value, v) for p, v in zip(self.source.params(), before))
        assert all(p.value.tobytes() == q.value.tobytes() for p, q in zip(a.params(), b.params()))

    def test_unlabelled_reduces_mmd(self):
        Xt, _ = _pairs(3, shift=1.5)
        cfg = TLConfig(gamma=1.0, max_epochs=15, patience=15, source_batch=128)
        tuned = fine_tune(self.source, (Xt, None), self.src_set, cfg, seed=0)
        Xs = self.src_set[0][:128]
        self.source.forward(Xs)
        src_h = [h.copy() for h in self.source.hidden]

        def gap(net):
            net.forward(Xt)
            return sum(mmd(s, t) for s, t in zip(src_h, net.hidden))
        assert gap(tuned) < gap(self.source)

    def test_empty_target(self):
        with pytest.raises(ValueError):
            fine_tune(self.source, (np.zeros((0, 7)), None), self.src_set, TLConfig())
