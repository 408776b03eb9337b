"""HMFN model assembly: per-scale pillar encoders and branches, fusion, head."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .backbone import ScaleBranch, ScaleBranchConfig, init_branch_params
from .config import RunConfig, check_alignment
from .errors import ConfigError, DimensionError
from .fusion import FusionConfig, align_scales, attention_fuse, init_fusion_params
from .head import BEVGrid, HeadOutput, init_head_params, run_head
from .numerics import Tensor
from .pillars import (
    PillarGridSpec,
    PillarizedScene,
    PointCloud,
    assign_pillars,
    collate_pillars,
    encode_pillar_batch,
    scatter_to_bev,
)

logger = logging.getLogger(__name__)

# Offsets from the pillar center appended to every raw point.
AUGMENT_COLUMNS = 2


@dataclass
class ForwardResult:
    """Everything one frame's forward pass produces."""

    output: HeadOutput
    attention: Tensor
    scale_maps: list[Tensor] = field(default_factory=list)


@dataclass
class HMFN:
    """The assembled network. ``params`` holds every trainable tensor by name.

    Parameter names:
        encoder{i}.weight        W_f of scale i, [point width, E]
        branch{i}.*              sparse stages, refinement and F_i conv
        fusion.attn{1,2}.*       scale attention
        head.*                   shared conv, heatmap and regression convs
    """

    cfg: RunConfig
    params: dict[str, Tensor]
    specs: list[PillarGridSpec]
    branches: list[ScaleBranch]
    fusion: FusionConfig
    grid: BEVGrid

    @property
    def class_names(self) -> tuple[str, ...]:
        return self.cfg.class_names

    @property
    def point_width(self) -> int:
        return self.cfg.point_channels + AUGMENT_COLUMNS

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def parameters(self) -> list[tuple[str, Tensor]]:
        return sorted(self.params.items())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def pillarize(self, cloud: PointCloud) -> list[PillarizedScene]:
        """Assign one cloud to the pillar grid of every scale."""
        if cloud.num_features != self.cfg.point_channels:
            raise DimensionError(
                f"Model expects {self.cfg.point_channels} point channels, cloud has {cloud.num_features}"
            )
        return [assign_pillars(cloud, spec, rng_seed=self.cfg.seed) for spec in self.specs]

    def forward_scenes(self, per_scale: Sequence[Sequence[PillarizedScene]]) -> list[ForwardResult]:
        """Forward a batch given as one list of pillarized frames per scale."""
        if len(per_scale) != len(self.specs):
            raise DimensionError(f"Got {len(per_scale)} scales, model has {len(self.specs)}")
        batch_size = len(per_scale[0])
        pillar_features = [
            encode_pillar_batch(collate_pillars(scenes), self.params[f"encoder{i}.weight"])
            for i, scenes in enumerate(per_scale)
        ]
        results = []
        for b in range(batch_size):
            scale_maps = []
            for i, branch in enumerate(self.branches):
                scene = per_scale[i][b]
                bev = scatter_to_bev(pillar_features[i][b], scene.pillar_coords, self.specs[i])
                scale_maps.append(branch.forward(bev))
            aligned = align_scales(scale_maps, self.fusion)
            fused, weights = attention_fuse(aligned, self.params)
            output = run_head(fused, self.params)
            results.append(ForwardResult(output, weights, scale_maps))
        return results

    def forward(self, cloud: PointCloud) -> HeadOutput:
        return self.forward_frame(cloud).output

    def forward_frame(self, cloud: PointCloud) -> ForwardResult:
        per_scale = [[scene] for scene in self.pillarize(cloud)]
        return self.forward_scenes(per_scale)[0]


def build_model(cfg: RunConfig, params: dict[str, np.ndarray] | None = None) -> HMFN:
    """Build HMFN from a config, with fresh seeded weights or the given arrays.

    Tensors are created in the current default precision.

    Raises:
        ConfigError: If the scales cannot be aligned or ``params`` does not
            match the architecture.
    """
    check_alignment(cfg)
    rng = np.random.default_rng(cfg.seed)
    branch_cfgs: list[ScaleBranchConfig] = cfg.branch_configs()
    specs = [cfg.pillar_spec(s) for s in cfg.scales]
    width = cfg.point_channels + AUGMENT_COLUMNS

    fresh: dict[str, Tensor] = {}
    for i, bcfg in enumerate(branch_cfgs):
        fresh[f"encoder{i}.weight"] = Tensor(
            rng.normal(0.0, np.sqrt(2.0 / width), (width, cfg.feature_dim)), requires_grad=True
        )
        fresh.update(init_branch_params(bcfg, cfg.feature_dim, rng, prefix=f"branch{i}."))
    fusion_cfg = cfg.fusion_config()
    fresh.update(init_fusion_params(len(cfg.scales), cfg.branch_channels, fusion_cfg, rng))
    fresh.update(
        init_head_params(cfg.branch_channels, cfg.head_channels, len(cfg.class_names), rng)
    )

    if params is not None:
        missing = sorted(set(fresh) - set(params))
        extra = sorted(set(params) - set(fresh))
        if missing or extra:
            raise ConfigError(f"Weights do not match config (missing {missing[:3]}, unexpected {extra[:3]})")
        for name, t in fresh.items():
            if tuple(params[name].shape) != t.shape:
                raise ConfigError(f"Weight {name} has shape {params[name].shape}, expected {t.shape}")
            fresh[name] = Tensor(params[name], requires_grad=True)

    branches = [
        ScaleBranch(bcfg, fresh, prefix=f"branch{i}.", upsample_mode=cfg.upsample_mode)
        for i, bcfg in enumerate(branch_cfgs)
    ]
    grid = BEVGrid.from_pillar_spec(specs[0], branch_cfgs[0].total_stride)
    model = HMFN(cfg, fresh, specs, branches, fusion_cfg, grid)
    logger.info(
        "Built HMFN: scales=%s, %d parameters, output grid %s at %.3f m",
        cfg.scales,
        model.parameter_count(),
        grid.dims,
        grid.cell,
    )
    return model


def state_arrays(model: HMFN) -> dict[str, np.ndarray]:
    return {name: p.data for name, p in model.params.items()}

