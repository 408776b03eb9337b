"""Tests for the tensor engine."""

import numpy as np
import pytest

from hmfn import numerics as nx
from hmfn.errors import ContractError, DimensionError
from hmfn.numerics import Tensor, precision


def _grad_of(fn, x: Tensor) -> np.ndarray:
    x.zero_grad()
    nx.backward(fn(x))
    return x.grad


class TestTensor:
    """Tests for Tensor basics and precision switching."""

    def test_default_dtype_is_float64(self):
        """Tensors default to double precision."""
        assert Tensor([1.0, 2.0]).data.dtype == np.float64

    def test_precision_context(self):
        """precision() changes and then restores the default dtype."""
        with precision("float32") as dtype:
            assert dtype == np.float32
            assert Tensor([1.0]).data.dtype == np.float32
        assert Tensor([1.0]).data.dtype == np.float64

    def test_unsupported_precision(self):
        """Only float32 and float64 are accepted."""
        with pytest.raises(ContractError):
            with precision("float16"):
                pass

    def test_item_requires_single_value(self):
        """item() refuses multi-element tensors."""
        assert Tensor([[3.5]]).item() == 3.5
        with pytest.raises(ContractError):
            Tensor([1.0, 2.0]).item()


class TestBackward:
    """Tests for reverse-mode differentiation."""

    def test_non_scalar_loss_rejected(self):
        """backward() needs a scalar."""
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ContractError):
            nx.backward(nx.scale(x, 2.0))

    def test_empty_tape_rejected(self):
        """A leaf is not a computation."""
        with pytest.raises(ContractError):
            nx.backward(Tensor(1.0, requires_grad=True))

    def test_shared_subexpression_accumulates(self):
        """d/dx (x*x + x) = 2x + 1."""
        x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        grad = _grad_of(lambda t: nx.sum(nx.add(nx.mul(t, t), t)), x)
        np.testing.assert_allclose(grad, 2 * x.data + 1)

    def test_suffix_broadcast_gradient(self):
        """A bias broadcast over rows receives the column sums."""
        a = Tensor(np.ones((4, 3)))
        b = Tensor(np.zeros(3), requires_grad=True)
        nx.backward(nx.sum(nx.add(a, b)))
        np.testing.assert_allclose(b.grad, [4.0, 4.0, 4.0])

    def test_incompatible_broadcast(self):
        """Only suffix broadcasting is allowed."""
        with pytest.raises(DimensionError):
            nx.add(Tensor(np.ones((2, 3))), Tensor(np.ones(2)))


class TestOps:
    """Forward values of individual ops."""

    def test_matmul_shape_check(self):
        """Inner dimensions must agree."""
        with pytest.raises(DimensionError):
            nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_log_rejects_non_positive(self):
        """log of zero is a contract violation."""
        with pytest.raises(ContractError):
            nx.log(Tensor([0.0, 1.0]))

    def test_sigmoid_is_stable(self):
        """Large magnitudes do not overflow."""
        out = nx.sigmoid(Tensor([-1000.0, 0.0, 1000.0])).data
        np.testing.assert_allclose(out, [0.0, 0.5, 1.0])

    def test_softmax_sums_to_one(self):
        """Softmax over an axis is a distribution."""
        out = nx.softmax(Tensor(np.random.default_rng(0).normal(size=(3, 4, 5))), axis=0).data
        np.testing.assert_allclose(out.sum(axis=0), 1.0)
        assert (out >= 0).all()

    def test_conv2d_matches_direct_loop(self):
        """conv2d equals a hand-written cross-correlation."""
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 5, 4))
        k = rng.normal(size=(3, 2, 3, 3))
        out = nx.conv2d(Tensor(x), Tensor(k), padding=1).data
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
        expected = np.zeros((3, 5, 4))
        for o in range(3):
            for i in range(5):
                for j in range(4):
                    expected[o, i, j] = np.sum(k[o] * xp[:, i : i + 3, j : j + 3])
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_conv2d_stride_output_size(self):
        """Output size is floor((H + 2p - k) / s) + 1."""
        out = nx.conv2d(Tensor(np.ones((1, 7, 6))), Tensor(np.ones((1, 1, 3, 3))), stride=2, padding=1)
        assert out.shape == (1, 4, 3)

    def test_conv2d_rejects_even_kernel(self):
        """Kernels are square and odd."""
        with pytest.raises(DimensionError):
            nx.conv2d(Tensor(np.ones((1, 4, 4))), Tensor(np.ones((1, 1, 2, 2))))

    def test_masked_max_ignores_padding(self):
        """Masked entries never win the max."""
        a = Tensor(np.array([[[1.0], [9.0]], [[-3.0], [-1.0]]]))
        mask = np.array([[True, False], [True, True]])
        np.testing.assert_allclose(nx.masked_max(a, mask).data, [[1.0], [-1.0]])

    def test_masked_max_empty_row(self):
        """A row without valid entries is an error."""
        with pytest.raises(ContractError):
            nx.masked_max(Tensor(np.ones((1, 2, 1))), np.array([[False, False]]))

    def test_nearest_upsample_block_replication(self):
        """2x2 -> 4x4 nearest repeats each value in a 2x2 block."""
        x = Tensor(np.arange(4.0).reshape(1, 2, 2))
        out = nx.nearest_upsample(x, 2).data[0]
        np.testing.assert_array_equal(out, [[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]])

    def test_bilinear_upsample_constant(self):
        """A constant map stays constant."""
        out = nx.bilinear_upsample(Tensor(np.full((2, 3, 3), 4.2)), 3).data
        np.testing.assert_allclose(out, 4.2)
        assert out.shape == (2, 9, 9)

    def test_avg_pool_inverts_nearest_upsample(self):
        """Average pooling undoes block replication."""
        x = Tensor(np.random.default_rng(2).normal(size=(2, 3, 3)))
        np.testing.assert_allclose(nx.avg_pool2d(nx.nearest_upsample(x, 3), 3).data, x.data)

    def test_avg_pool_needs_divisible_dims(self):
        """Pooling factors must divide the map."""
        with pytest.raises(DimensionError):
            nx.avg_pool2d(Tensor(np.ones((1, 5, 4))), 2)

    def test_scatter_to_grid(self):
        """Sites land at their coordinates, zeros elsewhere."""
        feats = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
        grid = nx.scatter_to_grid(feats, np.array([[0, 1], [2, 0]]), (3, 2)).data
        assert grid.shape == (2, 3, 2)
        assert grid[0, 0, 1] == 1.0 and grid[1, 2, 0] == 4.0
        assert grid.sum() == 10.0


class TestGradientOracle:
    """Finite differences against analytic gradients."""

    @pytest.mark.parametrize("seed", range(5))
    def test_conv2d_gradients(self, seed):
        """conv2d input and kernel gradients match central differences."""
        rng = np.random.default_rng(seed)
        x = Tensor(rng.normal(size=(2, 5, 5)), requires_grad=True)
        k = Tensor(rng.normal(size=(2, 2, 3, 3)), requires_grad=True)
        r = Tensor(rng.normal(size=(2, 3, 3)))

        def loss(_):
            return nx.sum(nx.mul(nx.conv2d(x, k, stride=2, padding=1), r))

        nx.backward(loss(None))
        for t in (x, k):
            numeric = nx.finite_difference_grad(loss, t)
            assert nx.gradient_error(t.grad, numeric.data) < 1e-6

    def test_bilinear_gradient(self):
        """bilinear_upsample backward is the transpose of the forward map."""
        rng = np.random.default_rng(3)
        x = Tensor(rng.normal(size=(1, 3, 4)), requires_grad=True)
        r = Tensor(rng.normal(size=(1, 6, 8)))

        def loss(_):
            return nx.sum(nx.mul(nx.bilinear_upsample(x, 2), r))

        nx.backward(loss(None))
        assert nx.gradient_error(x.grad, nx.finite_difference_grad(loss, x).data) < 1e-7

    def test_gradient_error_definition(self):
        """Error is max abs difference over the largest magnitude."""
        assert nx.gradient_error(np.array([1.0, 2.0]), np.array([1.0, 1.0])) == pytest.approx(0.5)
        assert nx.gradient_error(np.zeros(3), np.zeros(3)) == 0.0

    def test_finite_difference_restores_input(self):
        """The perturbed tensor is left unchanged."""
        x = Tensor(np.array([0.3, -0.7]))
        before = x.data.copy()
        nx.finite_difference_grad(lambda t: nx.sum(nx.mul(t, t)), x)
        np.testing.assert_array_equal(x.data, before)
