"""Loss-function tests. The frozen constants are checked against scripted
direct-evaluation oracles written in plain numpy, independent of the library
implementations."""

import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moelab import autodiff as ad
from moelab import losses as ls

# ---------------------------------------------------------------------------
# oracles: direct transliteration of the loss definitions, no shared code


def oracle_distill(s_r, s_c, selected, alpha):
    s_r, s_c = np.asarray(s_r, float), np.asarray(s_c, float)
    mse = np.mean((s_r - s_c) ** 2)
    k = len(selected)
    sel = sum((s_c[j] - s_r[j]) ** 2 for j in selected)
    return mse + (alpha / k) * sel


def oracle_diversity(rows):
    rows = np.asarray(rows, float)
    k = rows.shape[0]
    unit = rows / np.linalg.norm(rows, axis=1, keepdims=True)
    c = unit @ unit.T
    return (c.sum() - np.trace(c)) / (k * (k - 1))


def oracle_nll(logits, target):
    logits = np.asarray(logits, float)
    p = np.exp(logits - logits.max())
    p /= p.sum()
    return -np.log(p[target])


class TestDistill:
    def test_frozen_example(self):
        s_c = np.array([0.6, 0.4, 0.0, 0.0])
        s_r = np.array([0.25, 0.25, 0.25, 0.25])
        sel = np.array([0, 1])
        expected = oracle_distill(s_r, s_c, sel, alpha=0.1)
        assert abs(expected - 0.07475) < 1e-12  # oracle agrees with hand value
        got = ls.distill_loss(ad.Tensor(s_r), s_c, sel, alpha=0.1).item()
        assert abs(got - 0.07475) < 1e-12

    def test_zero_iff_equal(self):
        s = np.array([0.5, 0.3, 0.2, 0.0])
        val = ls.distill_loss(ad.Tensor(s), s.copy(), np.array([0, 1]), alpha=0.1).item()
        assert val == 0.0

    @given(st.integers(min_value=0, max_value=10_000))
    @settings(max_examples=50, deadline=None)
    def test_positive_when_different(self, seed):
        rng = np.random.default_rng(seed)
        s_r = rng.dirichlet(np.ones(4))
        s_c = rng.dirichlet(np.ones(4))
        if np.allclose(s_r, s_c):
            return
        val = ls.distill_loss(ad.Tensor(s_r), s_c, np.array([0, 1]), alpha=0.1).item()
        assert val > 0.0

    def test_alpha_zero_is_plain_mse(self):
        rng = np.random.default_rng(7)
        s_r, s_c = rng.dirichlet(np.ones(5)), rng.dirichlet(np.ones(5))
        got = ls.distill_loss(ad.Tensor(s_r), s_c, np.array([1, 3]), alpha=0.0).item()
        assert abs(got - np.mean((s_r - s_c) ** 2)) < 1e-15

    def test_batched_mean_over_tokens(self):
        rng = np.random.default_rng(8)
        s_r = rng.dirichlet(np.ones(4), size=3)
        s_c = rng.dirichlet(np.ones(4), size=3)
        sel = np.array([[0, 1], [2, 3], [1, 2]])
        got = ls.distill_loss(ad.Tensor(s_r), s_c, sel, alpha=0.1).item()
        per_token = [oracle_distill(s_r[t], s_c[t], sel[t], 0.1) for t in range(3)]
        assert abs(got - np.mean(per_token)) < 1e-14

    def test_matches_oracle_randomized(self):
        rng = np.random.default_rng(9)
        for _ in range(25):
            n = int(rng.integers(3, 8))
            k = int(rng.integers(1, n))
            s_r = rng.dirichlet(np.ones(n))
            s_c = rng.dirichlet(np.ones(n))
            sel = rng.choice(n, size=k, replace=False)
            alpha = float(rng.uniform(0, 0.5))
            got = ls.distill_loss(ad.Tensor(s_r), s_c, sel, alpha).item()
            assert abs(got - oracle_distill(s_r, s_c, sel, alpha)) < 1e-13

    def test_teacher_is_constant(self):
        # gradient must reach the router scores only
        store = ad.ParamStore()
        s_r = store.add("s_r", np.array([0.25, 0.25, 0.25, 0.25]))
        s_c_param = store.add("s_c", np.array([0.6, 0.4, 0.0, 0.0]))
        tape = ad.Tape()
        with tape:
            loss = ls.distill_loss(s_r, s_c_param.detach(), np.array([0, 1]), alpha=0.1)
        grads, unused = ad.reverse_accumulate(tape, loss, store)
        assert "s_c" in unused
        assert np.any(grads["s_r"] != 0)


class TestDiversity:
    def test_frozen_example(self):
        rows = ad.Tensor(np.array([[1.0, 0.0], [1.0, 1.0]]))
        expected = oracle_diversity(rows.data)
        assert abs(expected - 1.0 / np.sqrt(2.0)) < 1e-12
        got = ls.diversity_loss(rows).item()
        assert abs(got - 1.0 / np.sqrt(2.0)) < 1e-12

    def test_orthogonal_rows_zero(self):
        rows = ad.Tensor(np.array([[2.0, 0.0, 0.0], [0.0, 3.0, 0.0], [0.0, 0.0, 1.0]]))
        assert abs(ls.diversity_loss(rows).item()) < 1e-15

    def test_identical_rows_one(self):
        rows = ad.Tensor(np.array([[1.0, 2.0], [1.0, 2.0]]))
        assert abs(ls.diversity_loss(rows).item() - 1.0) < 1e-12

    def test_zero_row_warns_and_counts_zero(self):
        rows = ad.Tensor(np.array([[0.0, 0.0], [1.0, 1.0]]))
        with pytest.warns(UserWarning):
            val = ls.diversity_loss(rows).item()
        assert val == 0.0

    def test_k_one_convention(self):
        rows = ad.Tensor(np.array([[[1.0, 2.0]]]))  # (T=1, K=1, D=2)
        assert ls.diversity_loss(rows).item() == 0.0

    def test_batched_matches_per_token_mean(self):
        rng = np.random.default_rng(11)
        batch = rng.standard_normal((4, 3, 5))
        got = ls.diversity_loss(ad.Tensor(batch)).item()
        per_token = [oracle_diversity(batch[t]) for t in range(4)]
        assert abs(got - np.mean(per_token)) < 1e-12

    def test_bounded_by_one_in_magnitude(self):
        rng = np.random.default_rng(12)
        for _ in range(20):
            rows = rng.standard_normal((3, 4))
            val = ls.diversity_loss(ad.Tensor(rows)).item()
            assert -1.0 - 1e-12 <= val <= 1.0 + 1e-12


class TestNLL:
    def test_frozen_example(self):
        logits = ad.Tensor(np.array([[1.0, 0.0]]))
        expected = oracle_nll([1.0, 0.0], 0)
        assert abs(expected - 0.3132616875182228) < 1e-12
        got = ls.nll_loss(logits, np.array([0])).item()
        assert abs(got - expected) < 1e-12

    def test_uniform_logits_log_v(self):
        logits = ad.Tensor(np.zeros((3, 7)))
        got = ls.nll_loss(logits, np.array([0, 3, 6])).item()
        assert abs(got - np.log(7.0)) < 1e-12


class TestRouterAuxiliaries:
    def test_balance_uniform_is_one(self):
        probs = ad.Tensor(np.full((8, 4), 0.25))
        top1 = np.array([0, 1, 2, 3] * 2)
        assert abs(ls.balance_loss(probs, top1, 4).item() - 1.0) < 1e-12

    def test_balance_collapsed_is_n(self):
        probs = np.zeros((6, 4))
        probs[:, 2] = 1.0
        top1 = np.full(6, 2)
        assert abs(ls.balance_loss(ad.Tensor(probs), top1, 4).item() - 4.0) < 1e-12

    def test_balance_minimized_at_uniform(self):
        # any non-uniform split scores above 1 when f == P rowwise
        rng = np.random.default_rng(13)
        for _ in range(20):
            f = rng.dirichlet(np.ones(4))
            probs = np.tile(f, (40, 1))
            top1 = rng.choice(4, size=40, p=f)
            emp = np.bincount(top1, minlength=4) / 40
            val = ls.balance_loss(ad.Tensor(probs), top1, 4).item()
            assert abs(val - 4.0 * np.dot(emp, f)) < 1e-12

    def test_z_loss_frozen_example(self):
        logits = ad.Tensor(np.zeros((5, 4)))
        expected = float(np.log(4.0) ** 2)
        assert abs(ls.z_loss(logits).item() - expected) < 1e-12

    def test_z_loss_zero_at_zero_lse(self):
        # logits chosen so logsumexp is exactly zero per row
        row = np.log(np.array([0.5, 0.25, 0.25]))
        logits = ad.Tensor(np.tile(row, (3, 1)))
        assert abs(ls.z_loss(logits).item()) < 1e-24


class TestLossGradients:
    def test_all_losses_pass_fd(self):
        rng = np.random.default_rng(20)
        store = ad.ParamStore()
        store.add("logits", rng.standard_normal((6, 5)))
        store.add("s_r", rng.standard_normal((6, 4)))
        store.add("win", rng.standard_normal((6, 2, 3)))
        targets = rng.integers(0, 5, size=6)
        s_c = rng.dirichlet(np.ones(4), size=6)
        sel = np.stack([rng.choice(4, size=2, replace=False) for _ in range(6)])
        top1 = sel[:, 0]

        def f(p):
            total = ls.nll_loss(p["logits"], targets)
            total = total + ls.distill_loss(ad.softmax(p["s_r"], axis=-1), s_c, sel, 0.1)
            total = total + ls.diversity_loss(p["win"])
            total = total + ls.balance_loss(ad.softmax(p["s_r"], axis=-1), top1, 4)
            total = total + ls.z_loss(p["s_r"])
            return total

        report = ad.finite_diff_check(f, store, eps=1e-5)
        assert report.max_rel_error < 1e-5, report.per_param

    def test_weights_validate(self):
        with pytest.raises(ValueError):
            ls.LossWeights(alpha=-0.1)
        w = ls.LossWeights()
        assert (w.alpha, w.gamma, w.beta, w.balance, w.z) == (0.1, 0.01, 0.005, 0.01, 0.001)
