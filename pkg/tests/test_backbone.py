"""Tests for sparse convolutions and the per-scale branch."""

import numpy as np
import pytest

from hmfn import numerics as nx
from hmfn.backbone import (
    ScaleBranch,
    ScaleBranchConfig,
    SparseFeatureMap,
    fuse_scale,
    init_branch_params,
    run_scale_branch,
    sparse_relu,
    strided_sparse_conv,
    submanifold_sparse_conv,
)
from hmfn.errors import ConfigError, ContractError, DimensionError
from hmfn.numerics import Tensor


def _random_map(rng, dims, channels, density=0.3) -> SparseFeatureMap:
    mask = rng.random(dims) < density
    dense = rng.normal(size=(channels, *dims))
    return SparseFeatureMap.from_dense(dense * mask, mask)


class TestSparseFeatureMap:
    """Tests for the sparse map type."""

    def test_duplicate_coords_rejected(self):
        """Active coordinates are unique."""
        with pytest.raises(ContractError):
            SparseFeatureMap((4, 4), np.array([[1, 1], [1, 1]]), Tensor(np.ones((2, 1))))

    def test_out_of_range_rejected(self):
        """Active coordinates lie inside the grid."""
        with pytest.raises(ContractError):
            SparseFeatureMap((4, 4), np.array([[4, 0]]), Tensor(np.ones((1, 1))))

    def test_feature_count_mismatch(self):
        """One feature row per active site."""
        with pytest.raises(DimensionError):
            SparseFeatureMap((4, 4), np.array([[0, 0]]), Tensor(np.ones((2, 1))))

    def test_densify_round_trip(self):
        """from_dense then densify reproduces the masked map."""
        rng = np.random.default_rng(0)
        mask = rng.random((5, 6)) < 0.5
        dense = rng.normal(size=(2, 5, 6)) * mask
        np.testing.assert_array_equal(SparseFeatureMap.from_dense(dense, mask).densify().data, dense)


class TestSubmanifoldConv:
    """Tests for submanifold sparse convolution."""

    def test_empty_map(self):
        """Empty in, empty out."""
        out = submanifold_sparse_conv(SparseFeatureMap.empty((4, 4), 2), Tensor(np.ones((3, 2, 3, 3))))
        assert out.num_active == 0 and out.channels == 3

    def test_single_site_uses_center_tap(self):
        """A lone site only sees the kernel center."""
        rng = np.random.default_rng(1)
        kernel = rng.normal(size=(2, 1, 3, 3))
        smap = SparseFeatureMap((5, 5), np.array([[2, 3]]), Tensor(np.array([[1.5]])))
        out = submanifold_sparse_conv(smap, Tensor(kernel))
        np.testing.assert_allclose(out.features.data, [kernel[:, 0, 1, 1] * 1.5])

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_dense_oracle(self, seed):
        """Equals dense conv restricted to the active set."""
        rng = np.random.default_rng(seed)
        dims = tuple(int(v) for v in rng.integers(4, 33, size=2))
        smap = _random_map(rng, dims, 3)
        kernel = Tensor(rng.normal(size=(4, 3, 3, 3)))
        bias = Tensor(rng.normal(size=4))
        out = submanifold_sparse_conv(smap, kernel, bias)
        np.testing.assert_array_equal(out.coords, smap.coords)
        dense = nx.conv2d(smap.densify(), kernel, bias, padding=1).data
        expected = dense * smap.active_mask()
        np.testing.assert_allclose(out.densify().data, expected, atol=1e-6)

    def test_stride_must_be_one(self):
        """Submanifold convs do not downsample."""
        with pytest.raises(ContractError):
            submanifold_sparse_conv(
                SparseFeatureMap.empty((4, 4), 1), Tensor(np.ones((1, 1, 3, 3))), stride=2
            )


class TestStridedConv:
    """Tests for strided sparse convolution."""

    def test_empty_map(self):
        """Empty in, empty out at the reduced size."""
        out = strided_sparse_conv(SparseFeatureMap.empty((8, 8), 1), Tensor(np.ones((2, 1, 3, 3))))
        assert out.num_active == 0 and out.dims == (4, 4)

    def test_uniform_map_halves_dims(self):
        """A fully active map downsamples to ceil(H/2) x ceil(W/2), all active."""
        mask = np.ones((6, 7), dtype=bool)
        smap = SparseFeatureMap.from_dense(np.ones((1, 6, 7)), mask)
        kernel = Tensor(np.ones((1, 1, 3, 3)))
        out = strided_sparse_conv(smap, kernel)
        assert out.dims == (3, 4)
        assert out.num_active == 12
        dense = nx.conv2d(smap.densify(), kernel, stride=2, padding=1).data
        np.testing.assert_allclose(out.densify().data, dense)

    def test_single_site_receptive_field(self):
        """One active input activates at most ceil(k/s)^2 outputs."""
        smap = SparseFeatureMap((9, 9), np.array([[4, 4]]), Tensor(np.ones((1, 1))))
        out = strided_sparse_conv(smap, Tensor(np.ones((1, 1, 3, 3))))
        assert 1 <= out.num_active <= 4

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_dense_oracle(self, seed):
        """Values match dense conv + stride at active sites; the active set is the support."""
        rng = np.random.default_rng(100 + seed)
        dims = tuple(int(v) for v in rng.integers(4, 33, size=2))
        smap = _random_map(rng, dims, 2, density=0.2)
        kernel = Tensor(rng.normal(size=(3, 2, 3, 3)))
        out = strided_sparse_conv(smap, kernel)
        dense = nx.conv2d(smap.densify(), kernel, stride=2, padding=1).data
        assert out.dims == dense.shape[1:]
        np.testing.assert_allclose(out.densify().data, dense * out.active_mask(), atol=1e-6)
        support = nx.conv2d(
            Tensor(smap.active_mask()[None].astype(float)), Tensor(np.ones((1, 1, 3, 3))), stride=2, padding=1
        ).data[0]
        np.testing.assert_array_equal(out.active_mask(), support > 0)

    def test_stride_below_two(self):
        """Strided convs need stride >= 2."""
        with pytest.raises(ContractError):
            strided_sparse_conv(SparseFeatureMap.empty((4, 4), 1), Tensor(np.ones((1, 1, 3, 3))), stride=1)

    def test_relu_keeps_active_set(self):
        """sparse_relu acts on features only."""
        smap = SparseFeatureMap((3, 3), np.array([[0, 0], [2, 1]]), Tensor(np.array([[-1.0], [2.0]])))
        out = sparse_relu(smap)
        np.testing.assert_array_equal(out.coords, smap.coords)
        np.testing.assert_array_equal(out.features.data, [[0.0], [2.0]])


class TestScaleBranch:
    """Tests for the per-scale branch."""

    def _cfg(self, **kwargs) -> ScaleBranchConfig:
        defaults = dict(
            pillar_size=0.1,
            stage_channels=(4, 6),
            stage_strides=(1, 2),
            refine_depth=2,
            refine_channels=5,
            out_channels=3,
        )
        defaults.update(kwargs)
        return ScaleBranchConfig(**defaults)

    def test_config_validation(self):
        """Strides are powers of two and lengths agree."""
        with pytest.raises(ConfigError):
            self._cfg(stage_strides=(1, 3))
        with pytest.raises(ConfigError):
            self._cfg(stage_channels=(4,))
        with pytest.raises(ConfigError):
            self._cfg(stage_strides=(), stage_channels=())

    def test_output_cell(self):
        """The output cell is the pillar size times the total stride."""
        cfg = self._cfg(stage_strides=(1, 2, 2), stage_channels=(4, 4, 4))
        assert cfg.total_stride == 4
        assert cfg.output_cell == pytest.approx(0.4)

    def test_branch_shapes(self):
        """S stages shrink by their strides; C and F sit at the output resolution."""
        rng = np.random.default_rng(3)
        cfg = self._cfg()
        params = init_branch_params(cfg, 2, rng)
        bev = _random_map(rng, (8, 10), 2)
        stages, c = run_scale_branch(bev, cfg, params)
        assert [s.dims for s in stages] == [(8, 10), (4, 5)]
        assert c.shape == (5, 4, 5)
        f = ScaleBranch(cfg, params).forward(bev)
        assert f.shape == (3, 4, 5)

    def test_missing_parameter(self):
        """Parameters must match the config."""
        rng = np.random.default_rng(4)
        params = init_branch_params(self._cfg(), 2, rng)
        del params["refine1.weight"]
        with pytest.raises(ConfigError, match="refine1.weight"):
            run_scale_branch(_random_map(rng, (8, 8), 2), self._cfg(), params)

    def test_fuse_identity_reproduces_s(self):
        """With C = 0 and an identity 1x1 conv on S channels, F_i equals S."""
        rng = np.random.default_rng(5)
        s = _random_map(rng, (4, 4), 2)
        c = Tensor(np.zeros((3, 4, 4)))
        weight = np.zeros((2, 5, 1, 1))
        weight[0, 0] = weight[1, 1] = 1.0
        out = fuse_scale(s, c, Tensor(weight))
        np.testing.assert_allclose(out.data, s.densify().data)

    def test_fuse_constant_fields(self):
        """Constant inputs give a constant output."""
        s = Tensor(np.full((1, 3, 3), 2.0))
        c = Tensor(np.full((1, 3, 3), -1.0))
        out = fuse_scale(s, c, Tensor(np.array([[[[0.5]], [[2.0]]]])), Tensor(np.array([0.25])))
        np.testing.assert_allclose(out.data, 0.5 * 2.0 - 2.0 + 0.25)

    def test_fuse_matches_concat_conv(self):
        """F_i is a 1x1 conv over [S; C]."""
        rng = np.random.default_rng(6)
        s, c = Tensor(rng.normal(size=(2, 4, 4))), Tensor(rng.normal(size=(3, 4, 4)))
        w, b = rng.normal(size=(4, 5, 1, 1)), rng.normal(size=4)
        stacked = np.concatenate([s.data, c.data])
        expected = np.einsum("oc,chw->ohw", w[:, :, 0, 0], stacked) + b[:, None, None]
        np.testing.assert_allclose(fuse_scale(s, c, Tensor(w), Tensor(b)).data, expected)

    def test_fuse_misaligned(self):
        """Non-integer spatial ratios are dimension errors."""
        with pytest.raises(DimensionError):
            fuse_scale(Tensor(np.ones((1, 5, 5))), Tensor(np.ones((1, 2, 2))), Tensor(np.ones((1, 2, 1, 1))))
