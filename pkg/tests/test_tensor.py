"""Numeric core: oracle equivalence, gradient checks, traversal contract."""

import numpy as np
import pytest

from fmarobust import tensor as T
from fmarobust.errors import ContractError, DimensionError, NumericError

from util import fd_gradient, loop_conv2d, loop_dense, loop_maxpool2, rel_err


class TestTensor:
    def test_flat_row_major(self):
        t = T.Tensor([[1.0, 2.0], [3.0, 4.0]])
        assert t.shape == (2, 2)
        assert t.data.tolist() == [1.0, 2.0, 3.0, 4.0]

    def test_rejects_non_finite(self):
        with pytest.raises(NumericError):
            T.Tensor([1.0, np.nan])
        with pytest.raises(NumericError):
            T.Tensor([np.inf, 0.0])

    def test_update_shape_check(self):
        t = T.Tensor(np.zeros((2, 3)))
        with pytest.raises(DimensionError):
            t.update_(np.zeros((3, 2)))


class TestConv2d:
    def test_sum_of_ones(self):
        out = T.conv2d(T.constant(np.ones((1, 1, 3, 3))),
                       T.constant(np.ones((1, 1, 3, 3))),
                       T.constant(np.zeros(1)))
        assert out.array.reshape(-1).tolist() == [9.0]

    def test_identity_kernel(self):
        rng = np.random.default_rng(7)
        x = rng.random((2, 1, 5, 5))
        k = np.zeros((1, 1, 3, 3))
        k[0, 0, 1, 1] = 1.0
        out = T.conv2d(T.constant(x), T.constant(k), T.constant(np.zeros(1)),
                       padding=1)
        assert np.array_equal(out.array, x)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(11)
        x = rng.standard_normal((1, 2, 5, 5))
        w = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)
        got = T.conv2d(T.constant(x), T.constant(w), T.constant(b)).array
        want = loop_conv2d(x, w, b)
        assert np.max(np.abs(got - want)) < 1e-12

    def test_stride_and_padding_against_oracle(self):
        rng = np.random.default_rng(5)
        for stride, padding in [(1, 0), (1, 1), (2, 0), (2, 1)]:
            x = rng.standard_normal((2, 3, 8, 8))
            w = rng.standard_normal((4, 3, 3, 3))
            b = rng.standard_normal(4)
            got = T.conv2d(T.constant(x), T.constant(w), T.constant(b),
                           stride=stride, padding=padding).array
            want = loop_conv2d(x, w, b, stride=stride, padding=padding)
            assert np.max(np.abs(got - want)) < 1e-12

    def test_channel_mismatch_names_axis(self):
        with pytest.raises(DimensionError, match="axis 1"):
            T.conv2d(T.constant(np.zeros((1, 4, 5, 5))),
                     T.constant(np.zeros((2, 3, 3, 3))),
                     T.constant(np.zeros(2)))

    def test_kernel_too_large(self):
        with pytest.raises(DimensionError):
            T.conv2d(T.constant(np.zeros((1, 1, 2, 2))),
                     T.constant(np.zeros((1, 1, 3, 3))),
                     T.constant(np.zeros(1)))

    def test_gradients_vs_fd(self):
        rng = np.random.default_rng(3)
        xt = T.Tensor(rng.random((1, 2, 4, 4)))
        wt = T.Tensor(rng.standard_normal((2, 2, 3, 3)) * 0.5)
        bt = T.Tensor(rng.standard_normal(2) * 0.1)

        def build():
            x = T.GraphNode(xt, requires_grad=True)
            w = T.GraphNode(wt, requires_grad=True)
            b = T.GraphNode(bt, requires_grad=True)
            return x, w, b, T.sum_all(T.conv2d(x, w, b, padding=1))

        x, w, b, loss = build()
        T.backward(loss)
        for node, tensor in [(x, xt), (w, wt), (b, bt)]:
            fd = fd_gradient(lambda: build()[3].array.item(), tensor)
            assert rel_err(node.grad, fd) < 1e-6


class TestMaxpool2:
    def test_single_window(self):
        out = T.maxpool2(T.constant(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])))
        assert out.array.reshape(-1).tolist() == [4.0]

    def test_constant_input(self):
        out = T.maxpool2(T.constant(np.full((1, 2, 4, 4), 0.7)))
        assert out.shape == (1, 2, 2, 2)
        assert np.all(out.array == 0.7)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((1, 1, 4, 4))
        got = T.maxpool2(T.constant(x)).array
        assert np.array_equal(got, loop_maxpool2(x))

    def test_odd_spatial_rejected(self):
        with pytest.raises(DimensionError):
            T.maxpool2(T.constant(np.zeros((1, 1, 3, 4))))

    def test_tie_gradient_goes_to_first_cell(self):
        x = T.parameter(np.full((1, 1, 2, 2), 0.5))
        loss = T.sum_all(T.maxpool2(x))
        T.backward(loss)
        assert x.grad.reshape(-1).tolist() == [1.0, 0.0, 0.0, 0.0]


class TestDense:
    def test_hand_case(self):
        out = T.dense(T.constant([[1.0, 0.0]]),
                      T.constant([[2.0, 0.0], [0.0, 3.0]]),
                      T.constant([0.0, 0.0]))
        assert out.array.tolist() == [[2.0, 0.0]]

    def test_zero_weight_gives_bias(self):
        b = np.array([0.5, -1.0, 2.0])
        out = T.dense(T.constant(np.random.default_rng(0).random((4, 2))),
                      T.constant(np.zeros((2, 3))), T.constant(b))
        assert np.all(out.array == b)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(9)
        x, w, b = rng.standard_normal((3, 5)), rng.standard_normal((5, 4)), rng.standard_normal(4)
        got = T.dense(T.constant(x), T.constant(w), T.constant(b)).array
        assert np.max(np.abs(got - loop_dense(x, w, b))) < 1e-12

    def test_inner_dim_mismatch(self):
        with pytest.raises(DimensionError, match="inner axes"):
            T.dense(T.constant(np.zeros((2, 3))), T.constant(np.zeros((4, 5))),
                    T.constant(np.zeros(5)))

    def test_weight_gradient_vs_fd(self):
        rng = np.random.default_rng(21)
        xt = T.Tensor(rng.random((3, 4)))
        wt = T.Tensor(rng.standard_normal((4, 2)))
        bt = T.Tensor(rng.standard_normal(2))

        def rebuild():
            w = T.GraphNode(wt, requires_grad=True)
            return T.sum_all(T.dense(T.constant(xt), w, T.constant(bt))), w

        loss, w = rebuild()
        T.backward(loss)
        fd = fd_gradient(lambda: rebuild()[0].array.item(), wt)
        assert rel_err(w.grad, fd) < 1e-6


class TestReluSoftmax:
    def test_relu_values(self):
        out = T.relu(T.constant([-1.0, 0.0, 2.0]))
        assert out.array.tolist() == [0.0, 0.0, 2.0]

    def test_relu_all_negative_zero_grad(self):
        x = T.parameter(np.array([-1.0, -2.0, -0.5]))
        loss = T.sum_all(T.relu(x))
        T.backward(loss)
        assert np.all(loss.array == 0.0)
        assert np.all(x.grad == 0.0)

    def test_relu_gradient_vs_fd_away_from_kink(self):
        xt = T.Tensor(np.array([0.5, -0.5]))
        node = T.GraphNode(xt, requires_grad=True)
        loss = T.sum_all(T.relu(node))
        T.backward(loss)
        fd = fd_gradient(
            lambda: T.sum_all(T.relu(T.GraphNode(xt, requires_grad=True))).array.item(),
            xt)
        assert rel_err(node.grad, fd) < 1e-6

    def test_logsoftmax_symmetric(self):
        out = T.softmax_logp(T.constant([[0.0, 0.0]]))
        assert np.allclose(out.array, [[-np.log(2.0)]*2], atol=1e-15)

    def test_logsoftmax_extreme_logits(self):
        out = T.softmax_logp(T.constant([[1000.0, 0.0]]))
        assert np.isfinite(out.array).all()
        assert abs(out.array[0, 0]) < 1e-12

    def test_logsoftmax_normalization(self):
        rng = np.random.default_rng(12)
        logits = rng.standard_normal((6, 9)) * 4.0
        out = T.softmax_logp(T.constant(logits))
        sums = np.exp(out.array).sum(axis=1)
        assert np.max(np.abs(sums - 1.0)) < 1e-12


class TestBackward:
    def test_sum_gives_ones(self):
        x = T.parameter(np.random.default_rng(1).random((3, 4)))
        T.backward(T.sum_all(x))
        assert np.all(x.grad == 1.0)

    def test_product_rule(self):
        x = T.parameter(np.array(3.0))
        y = T.parameter(np.array(4.0))
        T.backward(T.mul(x, y))
        assert x.grad.item() == 4.0
        assert y.grad.item() == 3.0

    def test_non_scalar_root_rejected(self):
        with pytest.raises(ContractError):
            T.backward(T.parameter(np.zeros(3)))

    def test_accumulation_across_calls(self):
        x = T.parameter(np.array(3.0))
        y = T.mul(x, x)
        T.backward(y)
        T.backward(y)
        assert x.grad.item() == 12.0   # 2 * (2x)

    def test_visits_each_node_once(self):
        x = T.parameter(np.array([1.0, 2.0]))
        y = T.mul(x, x)
        z = T.add(y, y)          # diamond: z -> y (twice) -> x
        root = T.sum_all(z)
        visited = []
        T.backward(root, on_visit=visited.append)
        assert len(visited) == len({id(v) for v in visited})
        assert {id(v) for v in visited} == {id(x), id(y), id(z), id(root)}

    def test_diamond_gradient_correct(self):
        x = T.parameter(np.array(2.0))
        y = T.mul(x, x)
        root = T.add(y, y)
        T.backward(root)
        assert x.grad.item() == 8.0    # d(2x^2)/dx = 4x


class TestGlueOps:
    def test_scale_rows(self):
        x = T.parameter(np.arange(6.0).reshape(2, 3))
        s = T.parameter(np.array([2.0, -1.0]))
        out = T.scale_rows(x, s)
        assert out.array.tolist() == [[0.0, 2.0, 4.0], [-3.0, -4.0, -5.0]]
        T.backward(T.sum_all(out))
        assert np.all(x.grad == np.array([[2.0]*3, [-1.0]*3]))
        assert s.grad.tolist() == [3.0, 12.0]

    def test_take_per_row_and_range_check(self):
        x = T.parameter(np.arange(6.0).reshape(2, 3))
        out = T.take_per_row(x, [2, 0])
        assert out.array.tolist() == [2.0, 3.0]
        T.backward(T.sum_all(out))
        assert x.grad.tolist() == [[0, 0, 1], [1, 0, 0]]
        with pytest.raises(ContractError):
            T.take_per_row(x, [3, 0])

    def test_per_sample_reductions(self):
        x = np.arange(12.0).reshape(2, 2, 3)
        assert T.per_sample_sum(T.constant(x)).array.tolist() == [15.0, 51.0]
        assert T.per_sample_mean(T.constant(x)).array.tolist() == [2.5, 8.5]

    def test_clamp_min_gradient_mask(self):
        x = T.parameter(np.array([0.5, 2.0]))
        out = T.clamp_min(x, 1.0)
        assert out.array.tolist() == [1.0, 2.0]
        T.backward(T.sum_all(out))
        assert x.grad.tolist() == [0.0, 1.0]

    def test_elementwise_shape_check(self):
        with pytest.raises(DimensionError):
            T.add(T.constant(np.zeros(2)), T.constant(np.zeros(3)))


def test_oracle_equivalence_fuzz_small_shapes():
    """conv/pool/dense vs loop oracles on random shapes up to 2x3x8x8."""
    rng = np.random.default_rng(2024)
    for _ in range(25):
        n = int(rng.integers(1, 3))
        c = int(rng.integers(1, 4))
        h = int(rng.integers(3, 9))
        w = int(rng.integers(3, 9))
        f = int(rng.integers(1, 4))
        k = int(rng.choice([1, 3]))
        pad = int(rng.integers(0, 2))
        stride = int(rng.integers(1, 3))
        if k > h + 2 * pad or k > w + 2 * pad:
            continue
        x = rng.standard_normal((n, c, h, w))
        wt = rng.standard_normal((f, c, k, k))
        b = rng.standard_normal(f)
        got = T.conv2d(T.constant(x), T.constant(wt), T.constant(b),
                       stride=stride, padding=pad).array
        want = loop_conv2d(x, wt, b, stride=stride, padding=pad)
        assert np.max(np.abs(got - want)) < 1e-12

        if h % 2 == 0 and w % 2 == 0:
            assert np.array_equal(T.maxpool2(T.constant(x)).array,
                                  loop_maxpool2(x))

        xd = rng.standard_normal((n, 7))
        wd = rng.standard_normal((7, 4))
        bd = rng.standard_normal(4)
        assert np.max(np.abs(
            T.dense(T.constant(xd), T.constant(wd), T.constant(bd)).array
            - loop_dense(xd, wd, bd))) < 1e-12
