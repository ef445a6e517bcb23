import math

import numpy as np
import pytest

from sokd.errors import NonFiniteError, ShapeError
from sokd.tensor import (
    Rng,
    Tensor,
    add,
    avg_pool2d,
    conv2d,
    elementwise,
    gumbel_from_uniform,
    matmul,
    relu,
    sample_gumbel,
    sigmoid,
    softmax_temp,
)


class TestTensor:
    def test_reshape_roundtrip_is_identity(self):
        rng = Rng(7)
        arr = rng.normal((2, 3, 4)).astype(np.float32)
        t = Tensor(arr)
        back = Tensor.from_flat(t.data.ravel(), (2, 3, 4))
        np.testing.assert_array_equal(back.data, arr)

    def test_flat_length_must_match_dims(self):
        with pytest.raises(ValueError):
            Tensor.from_flat([1.0, 2.0, 3.0], (2, 2))

    def test_non_finite_rejected(self):
        with pytest.raises(NonFiniteError):
            Tensor([1.0, float("nan")])
        with pytest.raises(NonFiniteError):
            Tensor([float("inf")])

    def test_immutable(self):
        t = Tensor([1.0, 2.0])
        with pytest.raises(ValueError):
            t.data[0] = 5.0


class TestMatmul:
    def test_identity(self):
        eye = Tensor(np.eye(2, dtype=np.float32))
        b = Tensor([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(matmul(eye, b).data, b.data)

    def test_zero(self):
        z = Tensor.zeros((2, 3))
        b = Tensor(np.arange(3, dtype=np.float32).reshape(3, 1))
        np.testing.assert_array_equal(matmul(z, b).data, np.zeros((2, 1)))

    def test_hand_product(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = Tensor([[1.0], [1.0]])
        np.testing.assert_array_equal(matmul(a, b).data, [[3.0], [7.0]])

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(Tensor.zeros((2, 3)), Tensor.zeros((2, 3)))


class TestConv2d:
    def test_1x1_scaling_kernel(self):
        x = Tensor(np.arange(18, dtype=np.float32).reshape(2, 3, 3))
        w = Tensor(np.full((2, 2, 1, 1), 0.0, dtype=np.float32))
        w_arr = np.zeros((2, 2, 1, 1), dtype=np.float32)
        w_arr[0, 0, 0, 0] = 2.0
        w_arr[1, 1, 0, 0] = 2.0
        w = Tensor(w_arr)
        np.testing.assert_allclose(conv2d(x, w, "same").data, 2.0 * x.data)

    def test_identity_kernel_same_padding(self):
        rng = Rng(3)
        x = Tensor(rng.normal((1, 5, 5)).astype(np.float32))
        w_arr = np.zeros((1, 1, 3, 3), dtype=np.float32)
        w_arr[0, 0, 1, 1] = 1.0
        out = conv2d(x, Tensor(w_arr), "same")
        np.testing.assert_array_equal(out.data, x.data)

    def test_all_ones_valid(self):
        x = Tensor(np.ones((1, 3, 3), dtype=np.float32))
        w = Tensor(np.ones((1, 1, 3, 3), dtype=np.float32))
        out = conv2d(x, w, "valid")
        assert out.dims == (1, 1, 1)
        assert out.item() == 9.0

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            conv2d(Tensor.zeros((2, 4, 4)), Tensor.zeros((1, 3, 3, 3)), "same")

    def test_batched_matches_per_image(self):
        rng = Rng(11)
        x = rng.normal((4, 3, 6, 6)).astype(np.float32)
        w = Tensor((rng.normal((5, 3, 3, 3)) * 0.2).astype(np.float32))
        batched = conv2d(Tensor(x), w, "same")
        for i in range(4):
            single = conv2d(Tensor(x[i]), w, "same")
            np.testing.assert_array_equal(batched.data[i], single.data)

    def test_kernel_too_large_for_valid(self):
        with pytest.raises(ShapeError):
            conv2d(Tensor.zeros((1, 2, 2)), Tensor.zeros((1, 1, 3, 3)), "valid")


class TestSoftmaxTemp:
    def test_symmetry(self):
        out = softmax_temp(Tensor([4.2, 4.2, 4.2]), tau=0.7)
        np.testing.assert_allclose(out.data, [1 / 3] * 3, atol=1e-7)

    def test_direct_evaluation(self):
        out = softmax_temp(Tensor([math.log(2.0), 0.0]), tau=1.0)
        np.testing.assert_allclose(out.data, [2 / 3, 1 / 3], atol=1e-6)

    def test_saturation(self):
        out = softmax_temp(Tensor([1000.0, 0.0]), tau=1.0)
        np.testing.assert_allclose(out.data, [1.0, 0.0], atol=1e-6)

    def test_shift_invariance(self):
        rng = Rng(5)
        for trial in range(20):
            v = rng.normal(6)
            c = float(rng.normal()) * 10
            a = softmax_temp(Tensor(v), tau=0.5)
            b = softmax_temp(Tensor(v + c), tau=0.5)
            np.testing.assert_allclose(a.data, b.data, atol=1e-6)

    def test_sums_to_one(self):
        rng = Rng(6)
        for trial in range(20):
            out = softmax_temp(Tensor(rng.normal(8) * 5), tau=0.3)
            assert abs(float(out.data.sum()) - 1.0) < 1e-6

    def test_errors(self):
        with pytest.raises(ShapeError):
            softmax_temp(Tensor([1.0]), tau=0.0)
        with pytest.raises(ShapeError):
            softmax_temp(Tensor(np.zeros(0, dtype=np.float32)), tau=1.0)


class TestGumbel:
    def test_forced_half(self):
        g = gumbel_from_uniform(0.5)
        assert abs(float(g) - (-math.log(math.log(2.0)))) < 1e-12

    def test_monotone_in_u(self):
        us = np.linspace(0.01, 0.99, 50)
        gs = gumbel_from_uniform(us)
        assert np.all(np.diff(gs) > 0)

    def test_determinism(self):
        a = sample_gumbel(Rng(123, 4), 32)
        b = sample_gumbel(Rng(123, 4), 32)
        np.testing.assert_array_equal(a.data, b.data)

    def test_empty_rejected(self):
        with pytest.raises(ShapeError):
            sample_gumbel(Rng(1), 0)


class TestElementwise:
    def test_relu(self):
        np.testing.assert_array_equal(relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])

    def test_sigmoid_symmetry_point(self):
        assert sigmoid(Tensor([0.0])).data[0] == 0.5

    def test_sigmoid_extremes_finite(self):
        out = sigmoid(Tensor([-200.0, 200.0]))
        assert out.data[0] == 0.0 and out.data[1] == 1.0

    def test_add_identity(self):
        x = Tensor([[1.5, -2.0]])
        np.testing.assert_array_equal(add(x, Tensor.zeros((1, 2))).data, x.data)

    def test_scalar_operand(self):
        out = elementwise("scale", Tensor([2.0, 4.0]), 0.5)
        np.testing.assert_array_equal(out.data, [1.0, 2.0])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            elementwise("add", Tensor.zeros((2,)), Tensor.zeros((3,)))

    def test_unknown_kind(self):
        with pytest.raises(ShapeError):
            elementwise("pow", Tensor.zeros((2,)), 2.0)


class TestAvgPool:
    def test_mean_of_blocks(self):
        x = Tensor(np.arange(16, dtype=np.float32).reshape(1, 4, 4))
        out = avg_pool2d(x)
        np.testing.assert_array_equal(out.data, [[[2.5, 4.5], [10.5, 12.5]]])

    def test_odd_dims_rejected(self):
        with pytest.raises(ShapeError):
            avg_pool2d(Tensor.zeros((1, 3, 4)))


class TestRng:
    def test_same_stream_same_sequence(self):
        a = Rng(99, 7)
        b = Rng(99, 7)
        np.testing.assert_array_equal(a.uniform(100), b.uniform(100))
        np.testing.assert_array_equal(a.normal(50), b.normal(50))

    def test_child_independent_of_parent_call_order(self):
        p1 = Rng(42)
        p1.uniform(1000)
        c1 = p1.child("data")
        p2 = Rng(42)
        c2 = p2.child("data")
        np.testing.assert_array_equal(c1.uniform(64), c2.uniform(64))

    def test_children_with_distinct_labels_differ(self):
        r = Rng(42)
        a = r.child("a").uniform(32)
        b = r.child("b").uniform(32)
        assert not np.array_equal(a, b)

    def test_uniform_open_interval(self):
        u = Rng(0).uniform(200000)
        assert u.min() > 0.0 and u.max() < 1.0
