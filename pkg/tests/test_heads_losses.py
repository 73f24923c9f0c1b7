import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pspav.heads import fully_head, fuse, init_heads, weak_head
from pspav.losses import (
    avps_loss,
    avps_similarity,
    ce_loss,
    fully_loss,
    normalize_relevance,
    weak_bce_loss,
)
from pspav.tensor import DimensionError, Tensor, layer_norm


def t64(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


def heads64(rng, d_l=6, d_h=5, C=4):
    return init_heads(rng, d_l, d_h, C, np.float64)


def ln_oracle(x, gain, bias, eps=1e-5):
    out = np.zeros_like(x)
    for t in range(x.shape[0]):
        mu = sum(x[t]) / len(x[t])
        var = sum((v - mu) ** 2 for v in x[t]) / len(x[t])
        out[t] = [(v - mu) / math.sqrt(var + eps) * g + b for v, g, b in zip(x[t], gain, bias)]
    return out


class TestFuse:
    def test_identical_terms(self):
        rng = np.random.default_rng(0)
        p = heads64(rng)
        p["W3_a"] = p["W3_v"]
        x = rng.normal(size=(3, 6))
        ref = layer_norm(t64(x) @ p["W3_v"], p["ln_v.gain"], p["ln_v.bias"])
        np.testing.assert_allclose(fuse(t64(x), t64(x), p).data, ref.data, atol=1e-15)

    def test_zero_inputs(self):
        p = heads64(np.random.default_rng(1))
        np.testing.assert_array_equal(fuse(t64(np.zeros((3, 6))), t64(np.zeros((3, 6))), p).data, 0)

    def test_matches_formula_oracle(self):
        rng = np.random.default_rng(2)
        p = heads64(rng)
        for k in ("ln_v.gain", "ln_v.bias", "ln_a.gain", "ln_a.bias"):
            p[k] = t64(rng.normal(size=6))
        v, a = rng.normal(size=(3, 6)), rng.normal(size=(3, 6))
        ref = 0.5 * (ln_oracle(v @ p["W3_v"].data, p["ln_v.gain"].data, p["ln_v.bias"].data)
                     + ln_oracle(a @ p["W3_a"].data, p["ln_a.gain"].data, p["ln_a.bias"].data))
        assert np.abs(fuse(t64(v), t64(a), p).data - ref).max() < 1e-10

    def test_shape_mismatch(self):
        p = heads64(np.random.default_rng(0))
        with pytest.raises(DimensionError):
            fuse(t64(np.zeros((3, 6))), t64(np.zeros((2, 6))), p)


class TestFullyHead:
    def test_zero_weights_uniform(self):
        p = {k: t64(np.zeros_like(v.data)) for k, v in heads64(np.random.default_rng(0)).items()}
        out = fully_head(t64(np.random.default_rng(1).normal(size=(5, 6))), p)
        np.testing.assert_allclose(out.data, 0.25, atol=1e-15)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (4, 6), elements=st.floats(-20, 20)))
    def test_rows_are_distributions(self, f):
        out = fully_head(t64(f), heads64(np.random.default_rng(2))).data
        assert np.all(out >= 0)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)

    def test_final_bias_shift_invariance(self):
        rng = np.random.default_rng(3)
        p = heads64(rng)
        f = t64(rng.normal(size=(4, 6)))
        base = fully_head(f, p).data
        p["fc2.b"] = t64(p["fc2.b"].data + 3.5)
        np.testing.assert_allclose(fully_head(f, p).data, base, atol=1e-14)

    def test_dropout_only_in_training(self):
        rng = np.random.default_rng(4)
        p = heads64(rng)
        f = t64(rng.normal(size=(4, 6)))
        eval_out = fully_head(f, p, 0.5, np.random.default_rng(0), training=False).data
        np.testing.assert_array_equal(eval_out, fully_head(f, p).data)
        train_out = fully_head(f, p, 0.5, np.random.default_rng(0), training=True).data
        assert not np.allclose(train_out, eval_out)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            fully_head(t64(np.zeros((3, 5))), heads64(np.random.default_rng(0)))


def weak_oracle(f, W4, W5, W6, use_weighting):
    T = f.shape[0]
    f_h = f @ W4 @ W5
    C = f_h.shape[1]
    phi = np.full(T, 0.5)
    pooled = [0.0] * C
    for t in range(T):
        if use_weighting:
            phi[t] = 1 / (1 + math.exp(-sum(f_h[t, c] * W6[c, 0] for c in range(C))))
        for c in range(C):
            pooled[c] += (f_h[t, c] * phi[t] if use_weighting else f_h[t, c]) / T
    e = [math.exp(p) for p in pooled]
    return np.array([x / sum(e) for x in e]), phi, f_h


class TestWeakHead:
    @pytest.mark.parametrize("use_weighting", [True, False])
    def test_matches_loop_oracle(self, use_weighting):
        rng = np.random.default_rng(0)
        p = heads64(rng)
        f = rng.normal(size=(3, 6))
        out = weak_head(t64(f), p, use_weighting)
        o, phi, f_h = weak_oracle(f, p["W4"].data, p["W5"].data, p["W6"].data, use_weighting)
        assert np.abs(out.o_weak.data - o).max() < 1e-10
        assert np.abs(out.phi.data[:, 0] - phi).max() < 1e-10
        assert np.abs(out.f_h.data - f_h).max() < 1e-10

    def test_zero_gate_weights(self):
        rng = np.random.default_rng(1)
        p = heads64(rng)
        p["W6"] = t64(np.zeros((4, 1)))
        f = t64(rng.normal(size=(5, 6)))
        gated = weak_head(f, p, True)
        np.testing.assert_array_equal(gated.phi.data, 0.5)
        e = np.exp(0.5 * gated.f_h.data.mean(axis=0))
        np.testing.assert_allclose(gated.o_weak.data, e / e.sum(), atol=1e-14)

    def test_zero_gate_equals_plain_head_on_half_scores(self):
        rng = np.random.default_rng(2)
        p = heads64(rng)
        p["W6"] = t64(np.zeros((4, 1)))
        f = t64(rng.normal(size=(5, 6)))
        gated = weak_head(f, p, True)
        halved = dict(p, W5=t64(0.5 * p["W5"].data))
        plain = weak_head(f, halved, False)
        np.testing.assert_allclose(gated.o_weak.data, plain.o_weak.data, atol=1e-14)

    def test_constant_scores_over_time(self):
        rng = np.random.default_rng(3)
        p = heads64(rng)
        row = rng.normal(size=(1, 6))
        out = weak_head(t64(np.tile(row, (4, 1))), p, True)
        f_h = out.f_h.data[0]
        phi = out.phi.data[0, 0]
        np.testing.assert_allclose(out.phi.data, phi)
        e = np.exp(phi * f_h)
        np.testing.assert_allclose(out.o_weak.data, e / e.sum(), atol=1e-14)

    def test_without_branch_phi_sentinel(self):
        rng = np.random.default_rng(4)
        out = weak_head(t64(rng.normal(size=(4, 6))), heads64(rng), False)
        np.testing.assert_array_equal(out.phi.data, 0.5)
        np.testing.assert_allclose(out.o_weak.data.sum(), 1.0)

    def test_batched(self):
        rng = np.random.default_rng(5)
        p = heads64(rng)
        f = rng.normal(size=(2, 4, 6))
        out = weak_head(t64(f), p, True)
        assert out.o_weak.shape == (2, 4)
        for b in range(2):
            np.testing.assert_allclose(out.o_weak.data[b], weak_head(t64(f[b]), p, True).o_weak.data, atol=1e-14)


class TestCeLoss:
    def test_perfect_prediction(self):
        Y = np.eye(4)[[0, 2, 1]]
        assert ce_loss(t64(Y), Y).item() == 0.0

    @pytest.mark.parametrize("T", [1, 3, 10])
    def test_uniform_prediction(self, T):
        Y = np.eye(4)[np.arange(T) % 4]
        assert abs(ce_loss(t64(np.full((T, 4), 0.25)), Y).item() - math.log(4) / 4) < 1e-12

    def test_invariant_to_repeating_rows(self):
        rng = np.random.default_rng(0)
        o = rng.dirichlet(np.ones(3), size=2)
        Y = np.eye(3)[[0, 2]]
        once = ce_loss(t64(o), Y).item()
        assert abs(ce_loss(t64(np.tile(o, (3, 1))), np.tile(Y, (3, 1))).item() - once) < 1e-14

    def test_zero_probability_is_clamped(self):
        val = ce_loss(t64([[0.0, 1.0]]), [[1.0, 0.0]]).item()
        assert abs(val - (-math.log(1e-12) / 2)) < 1e-9

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            ce_loss(t64(np.full((2, 3), 1 / 3)), np.eye(3))


class TestAvps:
    def test_orthogonal_rows(self):
        v = t64([[1.0, 0.0], [0.0, 2.0]])
        a = t64([[0.0, 3.0], [1.0, 0.0]])
        np.testing.assert_array_equal(avps_similarity(v, a).data, [0, 0])

    def test_hand_normalisation(self):
        v = t64([[1.0, 1.0], [2.0, 0.0], [0.0, 0.0], [0.0, 5.0]])
        a = t64([[1.0, 1.0], [1.0, 0.0], [3.0, 3.0], [1.0, 0.0]])
        np.testing.assert_allclose(avps_similarity(v, a).data, [0.5, 0.5, 0, 0])

    def test_sign_is_kept(self):
        S = avps_similarity(t64([[1.0], [1.0]]), t64([[-3.0], [1.0]])).data
        np.testing.assert_allclose(S, [-0.75, 0.25])

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (5, 3), elements=st.floats(-3, 3)), arrays(np.float64, (5, 3), elements=st.floats(-3, 3)),
           st.floats(0.01, 100))
    def test_joint_scale_invariance(self, v, a, c):
        s = (v * a).sum(axis=1)
        if np.abs(s).sum() < 1e-6:
            return
        base = avps_similarity(t64(v), t64(a)).data
        np.testing.assert_allclose(avps_similarity(t64(c * v), t64(c * a)).data, base, atol=1e-9)

    def test_loss_zero_at_target(self):
        G = np.array([0.0, 1.0, 1.0, 1.0])
        assert avps_loss(t64(normalize_relevance(G)), G).item() == 0.0

    def test_loss_examples(self):
        assert avps_loss(t64([0.5, 0.5, 0, 0]), [1, 1, 0, 0]).item() == 0.0
        assert avps_loss(t64([0.0, 0, 0, 0]), [1, 0, 0, 0]).item() == 0.25

    def test_all_background_target_stays_zero(self):
        np.testing.assert_array_equal(normalize_relevance([0, 0, 0]), [0, 0, 0])

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            avps_loss(t64([0.5, 0.5]), [1, 0, 0])


class TestFullyLoss:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.Y = np.eye(3)[[0, 1, 2, 2]]
        self.o = t64(rng.dirichlet(np.ones(3), size=4))
        self.v = t64(rng.normal(size=(4, 5)))
        self.a = t64(rng.normal(size=(4, 5)))
        self.G = np.array([1, 1, 0, 0])

    def test_zero_lambda_is_ce(self):
        assert fully_loss(self.o, self.Y, self.v, self.a, self.G, 0.0).item() == ce_loss(self.o, self.Y).item()

    def test_combination(self):
        ce = ce_loss(self.o, self.Y).item()
        avps = avps_loss(avps_similarity(self.v, self.a), self.G).item()
        total = fully_loss(self.o, self.Y, self.v, self.a, self.G).item()
        assert abs(total - (ce + 100 * avps)) < 1e-12

    def test_hand_arithmetic(self):
        # ce = 0.1 and avps = 0.01 combine to 1.1 under the default weight
        assert abs(0.1 + 100.0 * 0.01 - 1.1) < 1e-12
        o = t64(np.full((1, 2), 0.5))
        Y = [[1.0, 0.0]]
        ce = math.log(2) / 2
        # S = [0.6, 0.4] against G-hat = [0.5, 0.5]
        v, a = t64([[3.0], [2.0]]), t64([[1.0], [1.0]])
        total = fully_loss(t64(np.full((2, 2), 0.5)), [[1.0, 0.0], [0.0, 1.0]], v, a, [1, 1]).item()
        assert abs(total - (ce + 100 * 0.01)) < 1e-12
        assert ce_loss(o, Y).item() == pytest.approx(ce)

    def test_perfect_is_zero(self):
        v, a = t64([[1.0], [1.0], [0.0]]), t64([[1.0], [1.0], [0.0]])
        Y = np.eye(2)[[0, 0, 1]]
        assert fully_loss(t64(Y), Y, v, a, [1, 1, 0]).item() == 0.0


class TestWeakBce:
    def test_half_gives_log_two(self):
        for Y in ([1, 0, 0, 0], [0.3, 0.7, 0, 0], [0.25] * 4):
            assert abs(weak_bce_loss(t64(np.full(4, 0.5)), Y).item() - math.log(2)) < 1e-12

    def test_exact_prediction_is_near_zero(self):
        Y = np.array([0.0, 1.0, 0.0])
        assert weak_bce_loss(t64(Y), Y).item() < 1e-11

    def test_float32_clamp_keeps_loss_finite(self):
        Y = np.array([0.0, 1.0], np.float32)
        val = weak_bce_loss(Tensor(np.array([1.0, 0.0], np.float32)), Y).item()
        assert np.isfinite(val)

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, 5, elements=st.floats(0.01, 0.99)), arrays(np.float64, 5, elements=st.floats(0, 1)))
    def test_symmetry(self, o, Y):
        a = weak_bce_loss(t64(o), Y).item()
        b = weak_bce_loss(t64(1 - o), 1 - Y).item()
        assert abs(a - b) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            weak_bce_loss(t64([0.5, 0.5]), [1.0])
