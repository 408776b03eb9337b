"""Per-scale feature extraction: sparse stages (S_i), dense refinement (C_i)
and their fusion into one map per scale (F_i).

Sparse maps keep only active BEV sites. Submanifold convolution keeps the
active set fixed; strided convolution activates every output site that
receives a contribution from an active input.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ContractError, DimensionError
from .numerics import Rule, Tensor


# ============================================================================
# Sparse feature maps
# ============================================================================


@dataclass
class SparseFeatureMap:
    """BEV grid of ``dims`` with features only at ``coords``.

    Attributes:
        dims: Grid size (H, W).
        coords: [N, 2] integer (row, col) of active sites, unique.
        features: [N, C] tensor of per-site channels.
    """

    dims: tuple[int, int]
    coords: np.ndarray
    features: Tensor

    def __post_init__(self) -> None:
        self.dims = (int(self.dims[0]), int(self.dims[1]))
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 2)
        if self.features.ndim != 2 or self.features.shape[0] != len(self.coords):
            raise DimensionError(
                f"{len(self.coords)} active sites but features of shape {self.features.shape}"
            )
        h, w = self.dims
        if len(self.coords):
            rows, cols = self.coords[:, 0], self.coords[:, 1]
            if rows.min() < 0 or cols.min() < 0 or rows.max() >= h or cols.max() >= w:
                raise ContractError(f"Active coordinates fall outside grid {self.dims}")
            linear = rows * w + cols
            if np.unique(linear).size != linear.size:
                raise ContractError("Duplicate active coordinates in sparse map")

    @property
    def num_active(self) -> int:
        return int(self.coords.shape[0])

    @property
    def channels(self) -> int:
        return int(self.features.shape[1])

    def densify(self) -> Tensor:
        """Dense [C, H, W] form with zeros at inactive sites."""
        return nx.scatter_to_grid(self.features, self.coords, self.dims)

    def active_mask(self) -> np.ndarray:
        mask = np.zeros(self.dims, dtype=bool)
        mask[self.coords[:, 0], self.coords[:, 1]] = True
        return mask

    def with_features(self, features: Tensor) -> "SparseFeatureMap":
        return SparseFeatureMap(self.dims, self.coords, features)

    @classmethod
    def empty(cls, dims: tuple[int, int], channels: int) -> "SparseFeatureMap":
        return cls(dims, np.zeros((0, 2), dtype=np.int64), Tensor(np.zeros((0, channels))))

    @classmethod
    def from_dense(cls, dense: np.ndarray, mask: np.ndarray) -> "SparseFeatureMap":
        """Build a sparse map from a [C, H, W] array and an [H, W] active mask."""
        coords = np.argwhere(mask)
        return cls(dense.shape[1:], coords, Tensor(dense[:, coords[:, 0], coords[:, 1]].T))


def _index_grid(smap: SparseFeatureMap) -> np.ndarray:
    grid = np.full(smap.dims, -1, dtype=np.int64)
    grid[smap.coords[:, 0], smap.coords[:, 1]] = np.arange(smap.num_active)
    return grid


def _check_kernel(kernel: Tensor, channels: int) -> int:
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3] or kernel.shape[2] % 2 == 0:
        raise DimensionError(f"Sparse conv kernel must be [O,C,k,k] with odd k, got {kernel.shape}")
    if kernel.shape[1] != channels:
        raise DimensionError(f"Kernel {kernel.shape} does not take {channels} channels")
    return int(kernel.shape[2])


# ============================================================================
# Sparse convolutions
# ============================================================================


def submanifold_rules(smap: SparseFeatureMap, k: int) -> list[Rule]:
    """Rulebook pairing each active site with its active neighbours."""
    grid = _index_grid(smap)
    h, w = smap.dims
    c = k // 2
    rules: list[Rule] = []
    for a in range(k):
        for b in range(k):
            nr = smap.coords[:, 0] + a - c
            nc = smap.coords[:, 1] + b - c
            ok = (nr >= 0) & (nr < h) & (nc >= 0) & (nc < w)
            out_idx = np.nonzero(ok)[0]
            in_idx = grid[nr[ok], nc[ok]]
            hit = in_idx >= 0
            if hit.any():
                rules.append((a, b, in_idx[hit], out_idx[hit]))
    return rules


def submanifold_sparse_conv(
    smap: SparseFeatureMap, kernel: Tensor, bias: Tensor | None = None, stride: int = 1
) -> SparseFeatureMap:
    """Convolve only at active sites; the output active set equals the input's."""
    if stride != 1:
        raise ContractError(f"Submanifold convolution runs at stride 1, got {stride}")
    k = _check_kernel(kernel, smap.channels)
    if smap.num_active == 0:
        return SparseFeatureMap.empty(smap.dims, kernel.shape[0])
    rules = submanifold_rules(smap, k)
    out = nx.rulebook_conv(smap.features, kernel, rules, smap.num_active, bias)
    return smap.with_features(out)


def strided_rules(
    smap: SparseFeatureMap, k: int, stride: int, padding: int
) -> tuple[np.ndarray, tuple[int, int], list[Rule]]:
    """Rulebook of a strided convolution.

    Returns:
        Tuple of (output coords in row-major order, output dims, rules).
    """
    h, w = smap.dims
    h_out = (h + 2 * padding - k) // stride + 1
    w_out = (w + 2 * padding - k) // stride + 1
    if h_out < 1 or w_out < 1:
        raise DimensionError(f"Kernel {k} with stride {stride} does not fit grid {smap.dims}")

    taps: list[tuple[int, int, np.ndarray, np.ndarray]] = []
    for a in range(k):
        for b in range(k):
            nr = smap.coords[:, 0] + padding - a
            nc = smap.coords[:, 1] + padding - b
            ok = (nr % stride == 0) & (nc % stride == 0)
            orow, ocol = nr // stride, nc // stride
            ok &= (orow >= 0) & (orow < h_out) & (ocol >= 0) & (ocol < w_out)
            in_idx = np.nonzero(ok)[0]
            if in_idx.size:
                taps.append((a, b, in_idx, orow[ok] * w_out + ocol[ok]))

    if not taps:
        return np.zeros((0, 2), dtype=np.int64), (h_out, w_out), []
    active = np.unique(np.concatenate([t[3] for t in taps]))
    coords = np.stack([active // w_out, active % w_out], axis=1)
    rules = [(a, b, in_idx, np.searchsorted(active, lin)) for a, b, in_idx, lin in taps]
    return coords, (h_out, w_out), rules


def strided_sparse_conv(
    smap: SparseFeatureMap,
    kernel: Tensor,
    bias: Tensor | None = None,
    stride: int = 2,
    padding: int | None = None,
) -> SparseFeatureMap:
    """Downsampling sparse convolution.

    An output site is active iff some active input lies in its receptive
    field; values equal the dense strided convolution at those sites.
    """
    if stride < 2:
        raise ContractError(f"Strided sparse convolution needs stride >= 2, got {stride}")
    k = _check_kernel(kernel, smap.channels)
    p = k // 2 if padding is None else padding
    coords, dims, rules = strided_rules(smap, k, stride, p)
    if coords.shape[0] == 0:
        return SparseFeatureMap.empty(dims, kernel.shape[0])
    out = nx.rulebook_conv(smap.features, kernel, rules, coords.shape[0], bias)
    return SparseFeatureMap(dims, coords, out)


def sparse_relu(smap: SparseFeatureMap) -> SparseFeatureMap:
    return smap.with_features(nx.relu(smap.features))


# ============================================================================
# Scale branch
# ============================================================================


def _is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class ScaleBranchConfig:
    """Hyperparameters of one per-scale branch.

    Attributes:
        pillar_size: Pillar edge length P_i in meters.
        stage_channels: Output width of each sparse stage.
        stage_strides: Downsample factor of each sparse stage (powers of two).
        refine_depth: Number of 3x3 dense refinement convolutions.
        refine_channels: Width of the refinement convolutions (C_i).
        out_channels: Width of the fused per-scale map F_i.
        kernel_size: Sparse kernel size (odd).
    """

    pillar_size: float
    stage_channels: tuple[int, ...] = (16, 32, 32, 48)
    stage_strides: tuple[int, ...] = (1, 2, 2, 2)
    refine_depth: int = 2
    refine_channels: int = 64
    out_channels: int = 48
    kernel_size: int = 3

    def __post_init__(self) -> None:
        if self.pillar_size <= 0:
            raise ConfigError(f"pillar_size must be positive, got {self.pillar_size}")
        if not self.stage_strides:
            raise ConfigError("A scale branch needs at least one sparse stage")
        if len(self.stage_channels) != len(self.stage_strides):
            raise ConfigError(
                f"{len(self.stage_channels)} stage widths for {len(self.stage_strides)} strides"
            )
        if not all(_is_power_of_two(s) for s in self.stage_strides):
            raise ConfigError(f"Stage strides must be powers of two: {self.stage_strides}")
        if min(self.stage_channels) < 1 or self.refine_channels < 1 or self.out_channels < 1:
            raise ConfigError("Channel widths must be positive")
        if self.refine_depth < 1:
            raise ConfigError("refine_depth must be at least 1")
        if self.kernel_size % 2 == 0:
            raise ConfigError("kernel_size must be odd")

    @property
    def total_stride(self) -> int:
        return int(np.prod(self.stage_strides))

    @property
    def output_cell(self) -> float:
        return self.pillar_size * self.total_stride


def init_branch_params(
    cfg: ScaleBranchConfig, in_channels: int, rng: np.random.Generator, prefix: str = ""
) -> dict[str, Tensor]:
    """He-normal weights and zero biases for one branch, keyed by name."""
    params: dict[str, Tensor] = {}
    k = cfg.kernel_size

    def conv(name: str, c_out: int, c_in: int, size: int) -> None:
        std = np.sqrt(2.0 / (c_in * size * size))
        params[f"{prefix}{name}.weight"] = Tensor(
            rng.normal(0.0, std, (c_out, c_in, size, size)), requires_grad=True
        )
        params[f"{prefix}{name}.bias"] = Tensor(np.zeros(c_out), requires_grad=True)

    prev = in_channels
    for i, ch in enumerate(cfg.stage_channels):
        conv(f"stage{i}", ch, prev, k)
        prev = ch
    sparse_out = prev
    for j in range(cfg.refine_depth):
        conv(f"refine{j}", cfg.refine_channels, prev, 3)
        prev = cfg.refine_channels
    conv("fuse", cfg.out_channels, sparse_out + cfg.refine_channels, 1)
    return params


def _param(params: Mapping[str, Tensor], name: str) -> Tensor:
    try:
        return params[name]
    except KeyError:
        raise ConfigError(f"Branch parameters do not match config: missing '{name}'") from None


def run_scale_branch(
    bev: SparseFeatureMap,
    cfg: ScaleBranchConfig,
    params: Mapping[str, Tensor],
    prefix: str = "",
) -> tuple[list[SparseFeatureMap], Tensor]:
    """Run the sparse stages and the dense refinement of one branch.

    Returns:
        Tuple of (sparse stage outputs S, fine to coarse; dense refinement C
        of the last stage, at that stage's resolution).
    """
    x = bev
    stages: list[SparseFeatureMap] = []
    for i, stride in enumerate(cfg.stage_strides):
        w = _param(params, f"{prefix}stage{i}.weight")
        b = _param(params, f"{prefix}stage{i}.bias")
        if w.shape[0] != cfg.stage_channels[i] or w.shape[1] != x.channels:
            raise ConfigError(f"Stage {i} weight {w.shape} does not fit config or input")
        if stride == 1:
            x = submanifold_sparse_conv(x, w, b)
        else:
            x = strided_sparse_conv(x, w, b, stride=stride)
        x = sparse_relu(x)
        stages.append(x)

    c = stages[-1].densify()
    for j in range(cfg.refine_depth):
        w = _param(params, f"{prefix}refine{j}.weight")
        b = _param(params, f"{prefix}refine{j}.bias")
        c = nx.relu(nx.conv2d(c, w, b, padding=w.shape[2] // 2))
    return stages, c


def _integer_ratio(big: int, small: int) -> int | None:
    if small <= 0 or big % small:
        return None
    return big // small


def fuse_scale(
    s_final: SparseFeatureMap | Tensor,
    c: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    upsample_mode: str = "bilinear",
) -> Tensor:
    """F_i = 1x1 conv over the channel concatenation of dense S_i and C_i.

    A C_i that is coarser than S_i by an integer factor is upsampled first.

    Raises:
        DimensionError: If the two maps cannot be aligned.
    """
    s_dense = s_final.densify() if isinstance(s_final, SparseFeatureMap) else s_final
    if s_dense.shape[1:] != c.shape[1:]:
        rh = _integer_ratio(s_dense.shape[1], c.shape[1])
        rw = _integer_ratio(s_dense.shape[2], c.shape[2])
        if rh is None or rh != rw:
            raise DimensionError(
                f"Cannot align S {s_dense.shape} with C {c.shape} for fusion"
            )
        c = nx.bilinear_upsample(c, rh) if upsample_mode == "bilinear" else nx.nearest_upsample(c, rh)
    return nx.conv2d(nx.concat([s_dense, c], axis=0), weight, bias)


@dataclass
class ScaleBranch:
    """One branch's config bundled with its parameters."""

    cfg: ScaleBranchConfig
    params: dict[str, Tensor] = field(default_factory=dict)
    prefix: str = ""
    upsample_mode: str = "bilinear"

    def forward(self, bev: SparseFeatureMap) -> Tensor:
        stages, c = run_scale_branch(bev, self.cfg, self.params, self.prefix)
        return fuse_scale(
            stages[-1],
            c,
            _param(self.params, f"{self.prefix}fuse.weight"),
            _param(self.params, f"{self.prefix}fuse.bias"),
            self.upsample_mode,
        )
