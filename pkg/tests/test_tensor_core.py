"""Tensor engine: forward ops against naive oracles, gradients, losses and Adam."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lesionforge import ops
from lesionforge.gradcheck import check_op, numerical_grad, relative_error
from lesionforge.nn import BatchNorm2d, Dropout, Parameter
from lesionforge.optim import Adam, AdamState, adam_step
from lesionforge.tensor import GraphError, Tensor, default_dtype, get_default_dtype, no_grad

from gradcases import CASES
from oracles import naive_conv2d, naive_matmul, naive_max_pool, naive_transposed_conv2d, scalar_adam


def T(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad, dtype=np.float64)


class TestTensor:
    def test_default_dtype_is_float32(self):
        assert Tensor([1, 2]).dtype == np.float32
        assert get_default_dtype() == np.float32

    def test_float64_mode_is_scoped(self):
        with default_dtype(np.float64):
            assert Tensor([1.0]).dtype == np.float64
        assert Tensor([1.0]).dtype == np.float32

    def test_constructor_copies(self):
        src = np.ones(3, dtype=np.float32)
        t = Tensor(src)
        src[0] = 7
        assert t.data[0] == 1

    def test_sum_backward_gives_ones(self, rng):
        x = T(rng.standard_normal((2, 3, 4)), grad=True)
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))

    def test_backward_without_graph_raises(self):
        with pytest.raises(GraphError):
            Tensor([1.0]).backward()

    def test_non_scalar_needs_explicit_grad(self):
        x = T([1.0, 2.0], grad=True)
        y = ops.mul(x, x)
        with pytest.raises(GraphError):
            y.backward()
        y.backward(np.array([1.0, 1.0]))
        np.testing.assert_allclose(x.grad, [2.0, 4.0])

    def test_graph_released_by_default(self):
        x = T(3.0, grad=True)
        y = ops.mul(x, x)
        y.backward()
        with pytest.raises(GraphError):
            y.backward()

    def test_retain_graph_allows_second_pass_and_accumulates(self):
        x = T(3.0, grad=True)
        y = ops.mul(x, x)
        y.backward(retain_graph=True)
        y.backward()
        assert x.grad == pytest.approx(12.0)

    def test_shared_subexpression_accumulates(self):
        x = T(2.0, grad=True)
        y = ops.add(ops.mul(x, x), x)
        y.backward()
        assert x.grad == pytest.approx(5.0)

    def test_no_grad_records_nothing(self):
        x = T(2.0, grad=True)
        with no_grad():
            y = ops.mul(x, x)
        assert not y.requires_grad

    def test_chain_rule_matches_hand_derivation(self):
        # d/dw bce(sigmoid(w x), t) = (p - t) x
        x, t = 1.7, 1.0
        w = T(0.3, grad=True)
        p = ops.sigmoid(ops.mul(w, T(x)))
        ops.bce_loss(p, np.array(t)).backward()
        expected = (1 / (1 + math.exp(-0.3 * x)) - t) * x
        assert w.grad == pytest.approx(expected, rel=1e-9)

    def test_deep_graph_does_not_recurse(self):
        x = T(1.0, grad=True)
        y = x
        for _ in range(5000):
            y = ops.add(y, T(0.0))
        y.backward()
        assert x.grad == 1.0


class TestConv2d:
    def test_identity_kernel(self):
        out = ops.conv2d(T([[[[5.0]]]]), T([[[[1.0]]]]), T([0.0]))
        np.testing.assert_array_equal(out.data, [[[[5.0]]]])

    def test_zero_input_gives_zero(self, rng):
        out = ops.conv2d(T(np.zeros((1, 2, 5, 5))), T(rng.standard_normal((3, 2, 3, 3))), T(np.zeros(3)), padding=1)
        assert not out.data.any()

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 0), (2, 1), (3, 2)])
    def test_matches_naive_oracle(self, rng, stride, pad):
        x = rng.standard_normal((2, 3, 7, 6))
        k = rng.standard_normal((4, 3, 3, 3))
        b = rng.standard_normal(4)
        out = ops.conv2d(T(x), T(k), T(b), stride=stride, padding=pad)
        np.testing.assert_allclose(out.data, naive_conv2d(x, k, b, stride, pad), atol=1e-10)

    def test_hand_computed_4x4_case(self, rng):
        x = rng.standard_normal((1, 1, 4, 4)).astype(np.float32)
        k = rng.standard_normal((1, 1, 3, 3)).astype(np.float32)
        out = ops.conv2d(Tensor(x), Tensor(k), Tensor(np.zeros(1)))
        np.testing.assert_allclose(out.data, naive_conv2d(x, k), atol=1e-6)

    def test_output_size_formula(self):
        out = ops.conv2d(T(np.zeros((1, 1, 9, 8))), T(np.zeros((1, 1, 3, 2))), stride=2, padding=1)
        assert out.shape == (1, 1, (9 + 2 - 3) // 2 + 1, (8 + 2 - 2) // 2 + 1)

    def test_channel_mismatch(self):
        with pytest.raises(ValueError, match="channel"):
            ops.conv2d(T(np.zeros((1, 2, 4, 4))), T(np.zeros((1, 3, 3, 3))))

    def test_non_positive_output(self):
        with pytest.raises(ValueError):
            ops.conv2d(T(np.zeros((1, 1, 2, 2))), T(np.zeros((1, 1, 3, 3))))

    def test_inputs_not_mutated(self, rng):
        x = rng.standard_normal((1, 2, 4, 4))
        xt = T(x)
        ops.conv2d(xt, T(rng.standard_normal((1, 2, 3, 3))), padding=1)
        np.testing.assert_array_equal(xt.data, x)


class TestTransposedConv2d:
    def test_single_pixel_broadcast(self):
        out = ops.transposed_conv2d(T([[[[3.0]]]]), T(np.ones((1, 1, 2, 2))), stride=2)
        np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 3.0))

    def test_zero_input(self, rng):
        out = ops.transposed_conv2d(T(np.zeros((1, 2, 3, 3))), T(rng.standard_normal((2, 4, 2, 2))), stride=2)
        assert out.shape == (1, 4, 6, 6) and not out.data.any()

    @pytest.mark.parametrize("stride,k", [(1, 3), (2, 2), (2, 3), (3, 2)])
    def test_matches_scatter_oracle(self, rng, stride, k):
        x = rng.standard_normal((2, 3, 4, 3))
        kern = rng.standard_normal((3, 2, k, k))
        out = ops.transposed_conv2d(T(x), T(kern), stride=stride)
        assert out.shape == (2, 2, (4 - 1) * stride + k, (3 - 1) * stride + k)
        np.testing.assert_allclose(out.data, naive_transposed_conv2d(x, kern, stride), atol=1e-10)

    @pytest.mark.parametrize("seed", range(5))
    def test_adjoint_of_conv2d(self, seed):
        # <conv(x, k), y> == <x, convT(y, k)> with the kernel axes swapped
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((2, 3, 8, 8))
        k = rng.standard_normal((4, 3, 2, 2))
        y = rng.standard_normal((2, 4, 4, 4))
        lhs = np.sum(ops.conv2d(T(x), T(k), stride=2).data * y)
        rhs = np.sum(x * ops.transposed_conv2d(T(y), T(k), stride=2).data)
        assert lhs == pytest.approx(rhs, rel=1e-5)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ops.transposed_conv2d(T(np.zeros((1, 2, 3, 3))), T(np.zeros((3, 1, 2, 2))), stride=2)


class TestDepthwiseConv2d:
    def test_matches_per_channel_naive(self, rng):
        x = rng.standard_normal((2, 3, 7, 7))
        k = rng.standard_normal((3, 1, 3, 3))
        out = ops.depthwise_conv2d(T(x), T(k), stride=2, padding=1).data
        for c in range(3):
            ref = naive_conv2d(x[:, c : c + 1], k[c : c + 1], stride=2, pad=1)
            np.testing.assert_allclose(out[:, c : c + 1], ref, atol=1e-10)


class TestPooling:
    def test_max_of_four(self):
        np.testing.assert_array_equal(ops.max_pool2d(T([[[[1.0, 2.0], [3.0, 4.0]]]])).data, [[[[4.0]]]])

    def test_constant_input(self):
        out = ops.max_pool2d(T(np.full((1, 2, 4, 4), 1.5)))
        np.testing.assert_array_equal(out.data, np.full((1, 2, 2, 2), 1.5))

    def test_matches_window_scan(self, rng):
        x = rng.standard_normal((2, 3, 8, 8))
        np.testing.assert_array_equal(ops.max_pool2d(T(x)).data, naive_max_pool(x))

    def test_odd_size_uses_floor(self, rng):
        x = rng.standard_normal((1, 1, 5, 7))
        out = ops.max_pool2d(T(x))
        assert out.shape == (1, 1, 2, 3)
        np.testing.assert_array_equal(out.data, naive_max_pool(x))

    def test_tie_routes_gradient_to_first_cell(self):
        x = T(np.ones((1, 1, 2, 2)), grad=True)
        ops.max_pool2d(x).sum().backward()
        np.testing.assert_array_equal(x.grad[0, 0], [[1.0, 0.0], [0.0, 0.0]])

    def test_window_larger_than_input(self):
        with pytest.raises(ValueError):
            ops.max_pool2d(T(np.zeros((1, 1, 1, 1))))

    def test_gap_constant_field(self):
        np.testing.assert_array_equal(ops.global_avg_pool(T(np.full((2, 3, 4, 4), 3.0))).data, np.full((2, 3), 3.0))

    def test_gap_mean(self):
        assert ops.global_avg_pool(T([[[[1.0, 2.0], [3.0, 4.0]]]])).data[0, 0] == 2.5

    def test_gap_matches_sum_over_count(self, rng):
        x = rng.standard_normal((3, 4, 5, 6))
        ref = np.array([[x[n, c].sum() / 30 for c in range(4)] for n in range(3)])
        np.testing.assert_allclose(ops.global_avg_pool(T(x)).data, ref, atol=1e-12)


class TestBatchNorm:
    def _bn(self, x, gamma, beta, training=True, rm=None, rv=None):
        c = x.shape[1]
        rm = np.zeros(c) if rm is None else rm
        rv = np.ones(c) if rv is None else rv
        return ops.batch_norm(T(x), T(gamma), T(beta), rm, rv, training), rm, rv

    def test_already_normalised_passes_through(self, rng):
        x = rng.standard_normal((64, 2, 4, 4))
        x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
        out, _, _ = self._bn(x, np.ones(2), np.zeros(2))
        np.testing.assert_allclose(out.data, x, atol=1e-4)

    def test_zero_gamma_gives_beta(self, rng):
        out, _, _ = self._bn(rng.standard_normal((3, 2, 2, 2)), np.zeros(2), np.array([0.5, -1.0]))
        np.testing.assert_allclose(out.data, np.broadcast_to(np.array([0.5, -1.0])[None, :, None, None], (3, 2, 2, 2)))

    def test_train_moments(self, rng):
        x = rng.standard_normal((8, 3, 5, 5)) * 4 + 2
        out, _, _ = self._bn(x, np.ones(3), np.zeros(3))
        np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), 0, atol=1e-4)
        np.testing.assert_allclose(out.data.var(axis=(0, 2, 3)), 1, atol=1e-4)

    def test_running_stats_update(self, rng):
        x = rng.standard_normal((4, 2, 3, 3)) + 5
        _, rm, rv = self._bn(x, np.ones(2), np.zeros(2))
        m = 4 * 9
        np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
        np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * m / (m - 1))

    def test_infer_uses_running_stats(self):
        x = np.full((1, 1, 2, 2), 3.0)
        out, rm, _ = self._bn(x, np.ones(1), np.zeros(1), training=False, rm=np.array([1.0]), rv=np.array([4.0]))
        np.testing.assert_allclose(out.data, (3.0 - 1.0) / math.sqrt(4.0 + 1e-5))
        assert rm[0] == 1.0

    def test_zero_variance_channel_stays_finite(self):
        out, _, _ = self._bn(np.full((2, 1, 3, 3), 7.0), np.ones(1), np.zeros(1))
        assert np.all(np.isfinite(out.data)) and not out.data.any()

    def test_layer_switches_modes(self, rng):
        bn = BatchNorm2d(2)
        x = Tensor(rng.standard_normal((4, 2, 3, 3)))
        bn(x)
        assert bn.running_mean.any()
        bn.eval()
        before = bn.running_mean.copy()
        bn(x)
        np.testing.assert_array_equal(bn.running_mean, before)


class TestActivations:
    def test_sigmoid_zero(self):
        assert ops.sigmoid(T(0.0)).item() == 0.5

    def test_relu(self):
        np.testing.assert_array_equal(ops.relu(T([-2.0, 3.0])).data, [0.0, 3.0])

    def test_dispatch(self):
        assert ops.activation("relu", T(-1.0)).item() == 0.0
        with pytest.raises(ValueError):
            ops.activation("gelu", T(0.0))

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, st.integers(1, 30), elements=st.floats(-50, 50)))
    def test_silu_is_x_times_sigmoid(self, x):
        np.testing.assert_allclose(ops.silu(T(x)).data, x * ops.sigmoid(T(x)).data, rtol=1e-7, atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float32, st.integers(1, 30), elements=st.floats(-30, 30, width=32)))
    def test_sigmoid_in_open_unit_interval(self, x):
        y = ops.sigmoid(Tensor(x)).data
        assert np.all(np.isfinite(y)) and np.all(y > 0) and np.all(y < 1)

    def test_sigmoid_extreme_inputs_are_finite(self):
        y = ops.sigmoid(T([-1000.0, 1000.0])).data
        assert np.all(np.isfinite(y))


class TestDense:
    def test_identity_weight(self, rng):
        x = rng.standard_normal((3, 4))
        np.testing.assert_allclose(ops.dense(T(x), T(np.eye(4)), T(np.zeros(4))).data, x)

    def test_zero_weight_gives_bias(self):
        out = ops.dense(T(np.ones((3, 2))), T(np.zeros((2, 2))), T([1.0, -2.0]))
        np.testing.assert_array_equal(out.data, [[1.0, -2.0]] * 3)

    def test_matches_triple_loop(self, rng):
        x, w, b = rng.standard_normal((5, 4)), rng.standard_normal((4, 3)), rng.standard_normal(3)
        np.testing.assert_allclose(ops.dense(T(x), T(w), T(b)).data, naive_matmul(x, w) + b, atol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            ops.dense(T(np.zeros((2, 3))), T(np.zeros((4, 1))))


class TestDropout:
    def test_rate_zero_is_identity(self, rng):
        x = T(rng.standard_normal(10))
        for training in (True, False):
            np.testing.assert_array_equal(ops.dropout(x, 0.0, training, rng).data, x.data)

    def test_infer_is_identity(self, rng):
        x = T(rng.standard_normal(10))
        np.testing.assert_array_equal(ops.dropout(x, 0.9, False).data, x.data)

    def test_survivor_fraction_and_mean(self):
        x = T(np.ones(10_000))
        y = ops.dropout(x, 0.5, True, np.random.default_rng(0)).data
        assert abs(np.mean(y > 0) - 0.5) <= 0.02
        assert abs(y.mean() - 1.0) <= 0.04
        assert set(np.unique(y)) <= {0.0, 2.0}

    def test_deterministic_given_stream(self, rng):
        x = T(rng.standard_normal(100))
        a = ops.dropout(x, 0.3, True, np.random.default_rng(5)).data
        b = ops.dropout(x, 0.3, True, np.random.default_rng(5)).data
        np.testing.assert_array_equal(a, b)

    @pytest.mark.parametrize("rate", [1.0, 1.5, -0.1])
    def test_invalid_rate(self, rate):
        with pytest.raises(ValueError):
            ops.dropout(T([1.0]), rate, True, np.random.default_rng(0))
        if rate >= 1:
            with pytest.raises(ValueError):
                Dropout(rate)


class TestBCE:
    def test_half_against_one(self):
        assert ops.bce_loss(T([0.5]), np.array([1.0])).item() == pytest.approx(math.log(2), abs=1e-6)

    @pytest.mark.parametrize("t", [0.0, 1.0])
    def test_perfect_prediction_near_zero(self, t):
        assert ops.bce_loss(T([t]), np.array([t])).item() <= 2e-7

    def test_matches_formula(self, rng):
        p = rng.uniform(0.01, 0.99, (4, 5))
        t = (rng.random((4, 5)) < 0.5).astype(float)
        ref = np.mean(-(t * np.log(p) + (1 - t) * np.log(1 - p)))
        assert ops.bce_loss(T(p), t).item() == pytest.approx(ref, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ops.bce_loss(T([0.5, 0.5]), np.array([1.0]))

    def test_saturated_prediction_still_has_gradient(self):
        p = T([1.0], grad=True)
        ops.bce_loss(p, np.array([0.0])).backward()
        assert p.grad[0] > 0 and np.isfinite(p.grad[0])


class TestL2:
    def test_zero_lambda(self, rng):
        assert ops.l2_penalty([T(rng.standard_normal(5))], 0.0).item() == 0.0

    def test_single_weight(self):
        assert ops.l2_penalty([T([3.0])], 1.0).item() == 9.0

    def test_matches_sum(self, rng):
        ws = [rng.standard_normal((3, 4)), rng.standard_normal(7)]
        ref = 0.01 * sum(float((w**2).sum()) for w in ws)
        assert ops.l2_penalty([T(w) for w in ws], 0.01).item() == pytest.approx(ref, rel=1e-12)

    def test_negative_lambda(self):
        with pytest.raises(ValueError):
            ops.l2_penalty([T([1.0])], -1.0)

    def test_bias_and_bn_parameters_do_not_decay(self):
        from lesionforge.nn import Conv2d, Dense
        r = np.random.default_rng(0)
        conv, dense, bn = Conv2d(2, 3, 3, r), Dense(3, 1, r), BatchNorm2d(3)
        assert conv.weight.decay and dense.weight.decay
        assert not conv.bias.decay and not dense.bias.decay
        assert not bn.gamma.decay and not bn.beta.decay


class TestGradients:
    @pytest.mark.parametrize("name", sorted(CASES))
    def test_float64_matches_finite_differences(self, name):
        for seed in range(3):
            build, inputs = CASES[name](np.random.default_rng(seed))
            assert max(check_op(build, inputs, dtype=np.float64, seed=seed)) < 1e-6

    @pytest.mark.parametrize("name", sorted(CASES))
    def test_float32_matches_finite_differences(self, name):
        for seed in range(3):
            build, inputs = CASES[name](np.random.default_rng(seed))
            assert max(check_op(build, inputs, dtype=np.float32, seed=seed)) < 1e-3

    def test_numerical_grad_of_square(self):
        g = numerical_grad(lambda a: float(np.sum(a[0] ** 2)), [np.array([1.0, -2.0])], 0)
        np.testing.assert_allclose(g, [2.0, -4.0], atol=1e-8)

    def test_relative_error_detects_wrong_gradient(self):
        assert relative_error(np.array([1.0, 2.0]), np.array([1.0, 2.5])) > 0.1


class TestAdam:
    def test_first_step_moves_by_lr_times_sign(self, rng):
        p = rng.standard_normal(20)
        g = rng.standard_normal(20)
        before = p.copy()
        adam_step([p], [g], AdamState(lr=0.01, eps=0.0))
        np.testing.assert_allclose(p - before, -0.01 * np.sign(g), rtol=1e-12)

    def test_zero_grad_leaves_params(self, rng):
        p = rng.standard_normal(5)
        before = p.copy()
        state = AdamState()
        for _ in range(3):
            adam_step([p], [np.zeros(5)], state)
        np.testing.assert_array_equal(p, before)
        assert state.t == 3

    def test_matches_scalar_reference_on_quadratic(self):
        w = np.array([1.0])
        state = AdamState(lr=0.1)
        path = []
        for _ in range(10):
            adam_step([w], [2 * w.copy()], state)
            path.append(float(w[0]))
        ref = scalar_adam(1.0, lambda v: 2 * v, 0.1, 10)
        np.testing.assert_allclose(path, ref, atol=1e-9)
        assert all(abs(b) < abs(a) for a, b in zip([1.0] + path[:-1], path))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            adam_step([np.zeros(3)], [np.zeros(4)], AdamState())

    def test_negative_lr_rejected(self):
        with pytest.raises(ValueError):
            AdamState(lr=-1e-3)

    def test_wrapper_uses_tensor_grads(self):
        p = Parameter(np.array([1.0, 1.0]), dtype=np.float64)
        opt = Adam([p], lr=0.5)
        p.grad = np.array([1.0, 0.0])
        opt.step()
        np.testing.assert_allclose(p.data, [0.5, 1.0], rtol=1e-6)
        opt.zero_grad()
        assert p.grad is None
