"""
Unit tests for tensor.py.
Covers the documented operation examples and finite-difference gradient checks.
"""
import numpy as np
import pytest

from tensor import (
    Graph, ShapeError, Tensor, TensorError, add, concat, conv1d_dilated, cosine_sim, cross_entropy, gradcheck,
    l2_normalize, linear, matmul, mean, mul, no_grad, precision, randn, relative_error, relu, reshape,
    softmax, sum, swapaxes
)

OP_TOLERANCE = 1e-3
INSTANCES = range(10)


def _weights(shape, seed):
    return Tensor(np.random.default_rng(seed + 1000).standard_normal(shape))


class TestRandn:
    """Deterministic initialisation."""

    def test_same_seed_is_bit_identical(self):
        a = randn([2, 2], seed=7, scale=1.0)
        b = randn([2, 2], seed=7, scale=1.0)
        np.testing.assert_array_equal(a.data, b.data)

    def test_different_seeds_differ(self):
        assert not np.array_equal(randn([3], seed=1).data, randn([3], seed=2).data)

    def test_mean_is_near_zero(self):
        assert abs(randn([10000], seed=0).data.mean()) < 0.05

    def test_zero_sized_dimension_rejected(self):
        with pytest.raises(ShapeError, match="Zero-sized"):
            randn([2, 0], seed=0)

    def test_non_positive_scale_rejected(self):
        with pytest.raises(TensorError, match="scale"):
            randn([2], seed=0, scale=0.0)

    def test_storage_is_float32_by_default(self):
        assert randn([2], seed=0).dtype == np.float32


class TestForwardExamples:
    """Hand-computed forward values."""

    def test_linear_identity(self):
        out = linear(Tensor([[1.0, 0.0]]), Tensor(np.eye(2)), Tensor([0.0, 0.0]))
        np.testing.assert_array_equal(out.data, [[1.0, 0.0]])

    def test_linear_hand_arithmetic(self):
        out = linear(Tensor([[1.0, 2.0]]), Tensor([[1.0], [1.0]]), Tensor([1.0]))
        np.testing.assert_array_equal(out.data, [[4.0]])

    def test_linear_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\[1, 3\].*\[2, 2\]"):
            linear(Tensor(np.ones((1, 3))), Tensor(np.eye(2)))

    def test_conv1d_identity_kernel(self):
        x = Tensor(np.arange(12.0).reshape(4, 3))
        out = conv1d_dilated(x, Tensor(np.eye(3)[None]), dilation=1)
        np.testing.assert_array_equal(out.data, x.data)

    def test_conv1d_zero_padding(self):
        x = Tensor([[1.0], [2.0], [3.0]])
        out = conv1d_dilated(x, Tensor(np.ones((3, 1, 1))), dilation=1)
        np.testing.assert_array_equal(out.data[:, 0], [3.0, 6.0, 5.0])

    def test_conv1d_dilation_skips_frames(self):
        x = Tensor(np.arange(1.0, 6.0)[:, None])
        out = conv1d_dilated(x, Tensor(np.ones((3, 1, 1))), dilation=2)
        np.testing.assert_array_equal(out.data[:, 0], [4.0, 6.0, 9.0, 6.0, 8.0])

    def test_conv1d_even_kernel_rejected(self):
        with pytest.raises(ShapeError, match="odd"):
            conv1d_dilated(Tensor(np.ones((4, 1))), Tensor(np.ones((2, 1, 1))))

    def test_softmax_uniform(self):
        np.testing.assert_allclose(softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-6)

    def test_softmax_is_stable(self):
        out = softmax(Tensor([1000.0, 0.0]))
        assert np.all(np.isfinite(out.data))
        np.testing.assert_allclose(out.data, [1.0, 0.0], atol=1e-6)

    def test_softmax_rows_sum_to_one(self):
        out = softmax(randn([5, 7], seed=3, scale=10.0))
        np.testing.assert_allclose(out.data.sum(axis=-1), np.ones(5), atol=1e-6)
        assert np.all(out.data > 0)

    @pytest.mark.parametrize("b,expected", [
        ([2.0, 4.0, -6.0], 1.0),
        ([3.0, 0.0, 1.0], 0.0),
        ([-1.0, -2.0, 3.0], -1.0),
    ])
    def test_cosine_extremes(self, b, expected):
        out = cosine_sim(Tensor([1.0, 2.0, -3.0]), Tensor(b))
        assert out.item() == pytest.approx(expected, abs=1e-6)

    def test_cosine_is_scale_invariant(self):
        a, b = randn([5, 4], seed=1), randn([5, 4], seed=2)
        scaled = cosine_sim(Tensor(a.data * 3.0), Tensor(b.data * 0.25))
        np.testing.assert_allclose(scaled.data, cosine_sim(a, b).data, atol=1e-6)

    def test_cosine_of_zero_vector_is_zero(self):
        out = cosine_sim(Tensor([0.0, 0.0]), Tensor([1.0, 2.0]))
        assert out.item() == 0.0

    def test_cross_entropy_uniform_is_log_classes(self):
        out = cross_entropy(Tensor(np.zeros(5)), 2)
        assert out.item() == pytest.approx(np.log(5), abs=1e-6)

    def test_cross_entropy_label_out_of_range(self):
        with pytest.raises(TensorError, match="out of range"):
            cross_entropy(Tensor(np.zeros(3)), 3)


class TestGraph:
    """Tape recording and reverse traversal."""

    def test_reused_tensor_accumulates(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Graph() as graph:
            loss = sum(add(x, x))
        graph.backward(loss)
        np.testing.assert_array_equal(x.grad, [2.0, 2.0])

    def test_sum_gives_all_ones_gradient(self):
        x = randn([3, 4], seed=9, requires_grad=True)
        with Graph() as graph:
            loss = sum(x)
        graph.backward(loss)
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_records_in_creation_order(self):
        x = Tensor([1.0, -2.0], requires_grad=True)
        with Graph() as graph:
            y = relu(x)
            loss = sum(y)
        assert [record.op for record in graph.records] == ['relu', 'sum']

    def test_backward_needs_scalar(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Graph() as graph:
            y = mul(x, x)
        with pytest.raises(ShapeError, match="scalar"):
            graph.backward(y)

    def test_no_grad_records_nothing(self):
        x = Tensor([1.0], requires_grad=True)
        with Graph() as graph, no_grad():
            y = mul(x, x)
        assert len(graph) == 0
        assert not y.requires_grad

    def test_constants_receive_no_gradient(self):
        x = Tensor([3.0], requires_grad=True)
        c = Tensor([2.0])
        with Graph() as graph:
            loss = sum(mul(x, c))
        graph.backward(loss)
        assert c.grad is None
        np.testing.assert_array_equal(x.grad, [2.0])

    def test_gradient_keeps_storage_dtype(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Graph() as graph:
            loss = mean(mul(x, x))
        graph.backward(loss)
        assert x.grad.dtype == np.float32


class TestGradients:
    """Central-difference checks in float64 storage, eps 1e-3."""

    @pytest.fixture(autouse=True)
    def float64(self):
        with precision(np.float64):
            yield

    @staticmethod
    def _input(shape, seed, offset=0.0):
        values = np.random.default_rng(seed).standard_normal(shape)
        if offset:
            values = np.sign(values) * (np.abs(values) + offset)
        return Tensor(values, requires_grad=True)

    @pytest.mark.parametrize("seed", INSTANCES)
    def test_linear(self, seed):
        x, w, b = self._input((4, 3), seed), self._input((3, 5), seed + 1), self._input((5,), seed + 2)
        r = _weights((4, 5), seed)
        assert gradcheck(lambda: sum(mul(linear(x, w, b), r)), [x, w, b]) < OP_TOLERANCE

    @pytest.mark.parametrize("seed", INSTANCES)
    def test_batched_matmul(self, seed):
        a, b = self._input((2, 3, 4), seed), self._input((4, 2), seed + 1)
        r = _weights((2, 3, 2), seed)
        assert gradcheck(lambda: sum(mul(matmul(a, b), r)), [a, b]) < OP_TOLERANCE

    @pytest.mark.parametrize("seed", INSTANCES)
    def test_conv1d_dilated(self, seed):
        x, k = self._input((9, 2), seed), self._input((3, 2, 3), seed + 1)
        r = _weights((9, 3), seed)
        assert gradcheck(lambda: sum(mul(conv1d_dilated(x, k, dilation=2), r)), [x, k]) < OP_TOLERANCE

    @pytest.mark.parametrize("seed", INSTANCES)
    def test_softmax(self, seed):
        x = self._input((3, 6), seed)
        r = _weights((3, 6), seed)
        assert gradcheck(lambda: sum(mul(softmax(x), r)), [x]) < OP_TOLERANCE

    @pytest.mark.parametrize("seed", INSTANCES)
    def test_relu_away_from_kink(self, seed):
        x = self._input((10,), seed, offset=0.1)
        r = _weights((10,), seed)
        assert gradcheck(lambda: sum(mul(relu(x), r)), [x]) < OP_TOLERANCE

    @pytest.mark.parametrize("seed", INSTANCES)
    def test_l2_normalize(self, seed):
        x = self._input((4, 5), seed)
        r = _weights((4, 5), seed)
        assert gradcheck(lambda: sum(mul(l2_normalize(x), r)), [x]) < OP_TOLERANCE

    @pytest.mark.parametrize("seed", INSTANCES)
    def test_cosine_sim(self, seed):
        a, b = self._input((3, 4), seed), self._input((3, 4), seed + 1)
        assert gradcheck(lambda: sum(cosine_sim(a, b)), [a, b]) < OP_TOLERANCE

    @pytest.mark.parametrize("seed", INSTANCES)
    def test_cross_entropy(self, seed):
        logits = self._input((4, 5), seed)
        labels = np.random.default_rng(seed).integers(5, size=4)
        assert gradcheck(lambda: mean(cross_entropy(logits, labels)), [logits]) < OP_TOLERANCE

    @pytest.mark.parametrize("seed", INSTANCES)
    def test_shape_ops(self, seed):
        a, b = self._input((2, 3), seed), self._input((2, 2), seed + 1)
        r = _weights((5, 2), seed)

        def fn():
            joined = concat([a, b], axis=-1)
            return sum(mul(swapaxes(reshape(joined, (2, 5)), 0, 1), r))

        assert gradcheck(fn, [a, b]) < OP_TOLERANCE


class TestRelativeError:
    def test_floor_protects_tiny_gradients(self):
        assert relative_error(1e-9, 2e-9) < 1e-2

    def test_sign_flip_is_large(self):
        assert relative_error(1.0, -1.0) == pytest.approx(2.0)


class TestScaleInvariance:

    def test_self_cosine_has_zero_gradient(self):
        with precision(np.float64):
            a = randn([6], seed=5, requires_grad=True)
            with Graph() as graph:
                loss = sum(cosine_sim(a, a))
            graph.backward(loss)
        np.testing.assert_allclose(a.grad, np.zeros(6), atol=1e-5)
