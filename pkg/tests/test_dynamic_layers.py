import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynconv.dynamic_layers import (
    Context,
    DynamicConv,
    KernelBank,
    KernelRepresentation,
    aggregate_kernels,
    aggregate_kernels_vjp,
    apply_channel_gate,
    apply_channel_gate_vjp,
    channel_attention,
    channel_attention_vjp,
    dihedral_variants,
    hard_select,
    kernel_attention,
    masked_softmax,
    mirror,
    odconv_forward,
    orient_bank,
    orient_kernels,
    rotate90,
    update_kernel_representation,
    update_kernel_representation_vjp,
)
from dynconv.dynamic_layers.attention import hard_attention_weights, init_generator, topk_mask
from dynconv.dynamic_layers.orientation import orient_kernels_vjp
from dynconv.gradcheck import check_vjp
from dynconv.tensor_core import ConvSpec, Prng, ValidationError, conv2d, gap, sigmoid


def zero_generator(in_dim, k):
    return {"w1": np.zeros((4, in_dim)), "b1": np.zeros(4), "w2": np.zeros((k, 4)), "b2": np.zeros(k)}


class TestChannelAttention:
    def test_zero_params_give_half(self):
        F = Prng(0).normal((2, 3, 4, 4))
        assert np.all(channel_attention(F, np.zeros((3, 3)), np.zeros(3)) == 0.5)

    def test_scalar_closed_form(self):
        for w in (-2.0, 0.3, 4.0):
            A = channel_attention(np.ones((1, 1, 3, 3)), np.array([[w]]), np.zeros(1))
            assert A.item() == pytest.approx(1 / (1 + math.exp(-w)), abs=1e-15)

    def test_strictly_inside_unit_interval(self):
        rng = Prng(1)
        for _ in range(50):
            F = rng.normal((2, 4, 3, 3), std=5.0)
            A = channel_attention(F, rng.normal((4, 4)), rng.normal(4))
            assert np.all(A > 0) and np.all(A < 1)

    def test_gate_examples(self):
        F = Prng(2).normal((2, 3, 4, 4))
        assert np.array_equal(apply_channel_gate(F, np.ones((2, 3))), F)
        assert not apply_channel_gate(F, np.zeros((2, 3))).any()
        assert apply_channel_gate(np.array([[[[2.0]]]]), np.array([0.25])).item() == 0.5

    @pytest.mark.parametrize("seed", range(5))
    def test_vjps(self, seed):
        rng = Prng(seed)
        F, w, b = rng.normal((2, 3, 4, 4)), rng.normal((3, 3)), rng.normal(3)

        def fwd(F, w, b):
            return channel_attention(F, w, b)

        def vjp(g, F, w, b):
            return channel_attention_vjp(g, F, w, fwd(F, w, b))

        assert check_vjp(fwd, [F, w, b], vjp, rng) < 1e-5
        A = sigmoid(rng.normal((2, 3)))
        assert check_vjp(apply_channel_gate, [F, A], apply_channel_gate_vjp, rng) < 1e-5


class TestKernelAttention:
    def test_zero_params_uniform(self):
        A = kernel_attention(None, Prng(0).normal(6), zero_generator(6, 4))
        assert np.allclose(A, 0.25, atol=1e-15)

    def test_dominant_logit(self):
        params = zero_generator(3, 4)
        params["b2"] = np.array([10.0, 0, 0, 0])
        assert kernel_attention(None, np.ones(3), params)[0] > 0.999

    def test_normalized_for_random_inputs(self):
        rng = Prng(3)
        params = init_generator(rng, 8 + 5, 4)
        for _ in range(100):
            kr = KernelRepresentation(np.tanh(rng.normal(8)))
            A = kernel_attention(kr, rng.normal(5), params)
            assert abs(A.sum() - 1) < 1e-6 and np.all(A >= 0)


class TestAggregation:
    def test_one_hot_selects(self):
        bank = KernelBank(Prng(0).normal((3, 2, 2, 3, 3)))
        for j in range(3):
            assert np.array_equal(aggregate_kernels(bank, np.eye(3)[j]), bank.kernels[j])

    def test_uniform_midpoint(self):
        eye = np.eye(3)[None, None]
        bank = KernelBank(np.stack([2 * eye, 4 * eye]))
        assert np.array_equal(aggregate_kernels(bank, np.array([0.5, 0.5])), 3 * eye)

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_brute_force(self, seed):
        rng = Prng(seed)
        kernels = rng.normal((3, 2, 3, 3, 3))
        a = rng.uniform(3)
        a /= a.sum()
        expected = np.zeros(kernels.shape[1:])
        for idx in np.ndindex(expected.shape):
            expected[idx] = sum(a[i] * kernels[(i,) + idx] for i in range(3))
        assert np.abs(aggregate_kernels(kernels, a) - expected).max() <= 1e-12

    def test_frozen_bank_gets_no_gradient(self):
        bank = KernelBank(np.ones((2, 1, 1, 1, 1)), frozen=True)
        gA, gk = aggregate_kernels_vjp(np.ones((1, 1, 1, 1)), bank, np.array([0.5, 0.5]))
        assert gk is None and gA.shape == (2,)

    def test_vjp(self):
        rng = Prng(4)
        kernels, A = rng.normal((3, 2, 2, 3, 3)), rng.uniform((2, 3))
        assert check_vjp(aggregate_kernels, [kernels, A],
                         lambda g, k, a: aggregate_kernels_vjp(g, k, a)[::-1], rng) < 1e-5


class TestKernelRepresentation:
    def test_zero_params(self):
        params = {"U": np.zeros((3, 3)), "V": np.zeros((3, 2)), "b": np.zeros(3)}
        out = update_kernel_representation(KernelRepresentation(np.ones(3)), np.ones(2), params)
        assert not out.state.any()

    def test_scalar_tanh(self):
        params = {"U": np.array([[1.0]]), "V": np.array([[0.0]]), "b": np.array([0.0])}
        out = update_kernel_representation(KernelRepresentation(np.array([0.5])), np.array([3.0]), params)
        assert out.state.item() == pytest.approx(math.tanh(0.5), abs=1e-15)
        assert round(out.state.item(), 4) == 0.4621

    def test_layer_index_counts_calls(self):
        rng = Prng(0)
        params = {"U": rng.normal((4, 4)), "V": rng.normal((4, 2)), "b": rng.normal(4)}
        kr = KernelRepresentation.zeros(4)
        for i in range(1, 4):
            kr = update_kernel_representation(kr, rng.normal(2), params)
            assert kr.layer_index == i
            assert np.all(np.abs(kr.state) < 1)

    def test_vjp(self):
        rng = Prng(1)
        params = {"U": rng.normal((4, 4)), "V": rng.normal((4, 3)), "b": rng.normal(4)}
        prev, g = np.tanh(rng.normal((2, 4))), rng.normal((2, 3))

        def fwd(prev, g):
            return update_kernel_representation(KernelRepresentation(prev), g, params).state

        def vjp(gn, prev, g):
            gprev, ggap, _ = update_kernel_representation_vjp(gn, prev, g, params, fwd(prev, g))
            return gprev, ggap

        assert check_vjp(fwd, [prev, g], vjp, rng) < 1e-5


class TestHardSelect:
    def test_top_two(self):
        assert hard_select(np.array([0.9, 0.1, 0.5]), 2).mask.tolist() == [1, 0, 1]

    def test_all_active(self):
        assert hard_select(np.array([0.3, -1.0, 2.0]), 3).mask.tolist() == [1, 1, 1]

    def test_tie_breaks_to_lowest_index(self):
        assert hard_select(np.array([1.0, 1.0, 0.0]), 1).mask.tolist() == [1, 0, 0]

    def test_out_of_range(self):
        with pytest.raises(ValidationError):
            topk_mask(np.zeros(3), 0)
        with pytest.raises(ValidationError):
            topk_mask(np.zeros(3), 4)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-10, 10), min_size=1, max_size=8), st.data())
    def test_exactly_k_active(self, logits, data):
        k = data.draw(st.integers(1, len(logits)))
        gate = hard_select(np.array(logits), k)
        assert gate.mask.sum() == k and gate.k_active == k

    def test_masked_softmax_renormalizes(self):
        logits = np.array([2.0, 0.0, 1.0])
        w = masked_softmax(logits, topk_mask(logits, 2))
        assert w[1] == 0 and abs(w.sum() - 1) < 1e-15
        weights, soft = hard_attention_weights(logits, 3)
        np.testing.assert_allclose(weights, soft, atol=1e-15)


class TestOrientation:
    def test_rotate_index_map(self):
        assert rotate90(np.array([[1, 2], [3, 4]])).tolist() == [[2, 4], [1, 3]]

    def test_rotation_identity_and_closure(self):
        k = Prng(0).normal((3, 3))
        assert np.array_equal(rotate90(k, 0), k)
        assert np.array_equal(rotate90(rotate90(rotate90(rotate90(k)))), k)

    def test_matches_numpy_rot90(self):
        k = Prng(1).normal((2, 3, 5, 5))
        assert np.array_equal(rotate90(k), np.rot90(k, 1, axes=(-2, -1)))
        assert np.array_equal(mirror(k), k[..., ::-1])

    def test_dihedral_variants_distinct(self):
        k = np.arange(9.0).reshape(3, 3)
        variants = dihedral_variants(k)
        assert len(variants) == 8
        assert len({v.tobytes() for v in variants}) == 8

    def test_orient_bank_layout(self):
        kernels = Prng(2).normal((2, 1, 1, 3, 3))
        oriented = orient_bank(KernelBank(kernels)).kernels
        assert oriented.shape == (16, 1, 1, 3, 3)
        for i in range(2):
            for g, v in enumerate(dihedral_variants(kernels[i])):
                assert np.array_equal(oriented[8 * i + g], v)

    def test_non_square_rejected(self):
        with pytest.raises(ValidationError):
            orient_kernels(np.zeros((1, 1, 1, 3, 2)))

    def test_orient_vjp(self):
        rng = Prng(3)
        kernels = rng.normal((2, 2, 1, 3, 3))
        err = check_vjp(orient_kernels, [kernels], lambda g, k: (orient_kernels_vjp(g, k.shape),), rng)
        assert err < 1e-5

    def test_one_hot_on_upright_variant(self):
        rng = Prng(4)
        x, kernels = rng.normal((2, 2, 6, 6)), rng.normal((3, 2, 2, 3, 3))
        for j in range(3):
            A = np.zeros(24)
            A[8 * j] = 1
            out = odconv_forward(x, KernelBank(kernels), None, attention=A)
            assert np.abs(out - conv2d(x, kernels[j], ConvSpec.make(1, 1))).max() <= 1e-12

    def test_uniform_attention_equivariance(self):
        rng = Prng(5)
        kernels = rng.normal((1, 1, 1, 3, 3))
        A = np.full(8, 1 / 8)
        x = rng.normal((1, 1, 5, 5))
        xr = np.rot90(x, 1, axes=(2, 3))
        lhs = odconv_forward(xr, KernelBank(kernels), None, attention=A)
        rhs = np.rot90(odconv_forward(x, KernelBank(kernels), None, attention=A), 1, axes=(2, 3))
        assert np.abs(lhs - rhs).max() <= 1e-6

    def test_one_by_one_kernel_is_scaling(self):
        rng = Prng(6)
        x = rng.normal((1, 1, 4, 4))
        A = rng.uniform(8)
        A /= A.sum()
        out = odconv_forward(x, KernelBank(np.full((1, 1, 1, 1, 1), 2.0)), None, attention=A)
        np.testing.assert_allclose(out, 2.0 * x, atol=1e-12)

    def test_generator_driven_attention(self):
        rng = Prng(7)
        x, kernels = rng.normal((2, 1, 5, 5)), rng.normal((2, 3, 1, 3, 3))
        params = init_generator(rng, 1, 16)
        out = odconv_forward(x, KernelBank(kernels), params)
        A = kernel_attention(None, gap(x), params)
        expected = odconv_forward(x, KernelBank(kernels), None, attention=A)
        assert out.shape == (2, 3, 5, 5) and np.array_equal(out, expected)


class TestDynamicConvLayer:
    def test_one_hot_equals_static(self):
        rng = Prng(0)
        layer = DynamicConv(2, 3, 3, 1, 1, num_kernels=4, mode="soft", rng=rng)
        layer.params["gen_w2"][...] = 0
        x = rng.normal((2, 2, 6, 6))
        for j in range(4):
            layer.params["gen_b2"][...] = -1000.0
            layer.params["gen_b2"][j] = 1000.0
            out = layer.forward(x, Context())
            ref = conv2d(x, layer.params["bank"][j], ConvSpec.make(1, 1))
            assert np.abs(out - ref).max() <= 1e-12

    def test_records_attention_rows(self):
        rng = Prng(1)
        layer = DynamicConv(1, 2, 3, 1, 1, num_kernels=3, mode="hard", k_active=2, rng=rng)
        ctx = Context(record_attention=True)
        layer.forward(rng.normal((4, 1, 5, 5)), ctx)
        _, A = ctx.attention[0]
        assert A.shape == (4, 3)
        assert np.all((A > 0).sum(axis=1) == 2)
        np.testing.assert_allclose(A.sum(axis=1), 1, atol=1e-12)

    def test_invalid_mode(self):
        with pytest.raises(ValueError):
            DynamicConv(1, 1, 3, mode="pixel", rng=Prng(0))
