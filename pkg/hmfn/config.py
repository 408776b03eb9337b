"""Run configuration and named presets.

Settings resolve in this order (later wins): built-in defaults, preset,
config file, command-line flags. The resolved config is what gets hashed
into checkpoints and written next to every output.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

from .backbone import ScaleBranchConfig
from .errors import ConfigError, DatasetIOError
from .fusion import UPSAMPLE_MODES, FusionConfig
from .numerics import SUPPORTED_DTYPES
from .pillars import PillarGridSpec
from .synth import LidarModel

logger = logging.getLogger(__name__)

RESOLVED_CONFIG_NAME = "resolved_config.json"
MAX_STRIDE_EXPONENT = 5


@dataclass
class RunConfig:
    """Every knob of a run: data, architecture, ablation switches, training.

    Attributes:
        scales: Pillar sizes (m), ordered; the first is the fusion reference.
        speed: Append per-point velocity channels (speed mode).
        pedes_only: Train on pedestrian annotations only.
    """

    # Data
    data_root: str = "data/hmfn"
    split: str = "train"
    val_split: str = "val"
    output_dir: str = "runs/hmfn"

    # Grid and encoder
    scales: tuple[float, ...] = (0.05, 0.075)
    half_extent: float = 9.6
    max_points_per_pillar: int = 32
    max_pillars: int = 12000
    feature_dim: int = 32

    # Backbone, fusion, head
    stage_channels: tuple[int, ...] = (16, 32, 32, 48)
    base_strides: tuple[int, ...] = (1, 2, 2, 2)
    refine_depth: int = 2
    refine_channels: int = 48
    branch_channels: int = 32
    upsample_mode: str = "bilinear"
    attention_hidden: int = 16
    head_channels: int = 32

    # Ablation switches
    speed: bool = False
    pedes_only: bool = True

    # Training
    epochs: int = 20
    batch_size: int = 4
    max_steps: int | None = None
    learning_rate: float = 0.001
    weight_decay: float = 0.01
    clip_norm: float = 10.0
    seed: int = 0
    precision: str = "float32"
    workers: int = 1

    # Targets, decoding and evaluation
    min_overlap: float = 0.7
    min_radius: int = 2
    score_threshold: float = 0.1
    max_detections: int = 100
    nms_radius: float | None = None
    include_empty: bool = False

    # LiDAR used when this config drives synthesis
    lidar_beams: int = 64
    lidar_horizontal_resolution: float = 0.4

    def __post_init__(self) -> None:
        self.scales = tuple(float(s) for s in self.scales)
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.base_strides = tuple(int(s) for s in self.base_strides)
        self.validate()

    def validate(self) -> None:
        if not self.scales:
            raise ConfigError("scales must list at least one pillar size")
        if min(self.scales) <= 0:
            raise ConfigError(f"Pillar sizes must be positive: {self.scales}")
        diffs = [b - a for a, b in zip(self.scales, self.scales[1:])]
        if diffs and not (all(d > 0 for d in diffs) or all(d < 0 for d in diffs)):
            raise ConfigError(f"scales must be strictly monotone, got {self.scales}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError("max_steps must be >= 1 when set")
        if self.precision not in SUPPORTED_DTYPES:
            raise ConfigError(f"precision must be one of {sorted(SUPPORTED_DTYPES)}")
        if self.upsample_mode not in UPSAMPLE_MODES:
            raise ConfigError(f"upsample_mode must be one of {UPSAMPLE_MODES}")
        if self.learning_rate <= 0 or self.clip_norm <= 0 or self.weight_decay < 0:
            raise ConfigError("learning_rate and clip_norm must be positive, weight_decay >= 0")
        if self.half_extent <= 0:
            raise ConfigError("half_extent must be positive")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    # ------------------------------------------------------------------
    # Derived settings
    # ------------------------------------------------------------------

    @property
    def class_names(self) -> tuple[str, ...]:
        return ("pedestrian",) if self.pedes_only else ("pedestrian", "cyclist")

    @property
    def point_channels(self) -> int:
        return 6 if self.speed else 4

    def pillar_spec(self, scale: float) -> PillarGridSpec:
        return PillarGridSpec.square(
            scale,
            self.half_extent,
            max_points_per_pillar=self.max_points_per_pillar,
            max_pillars=self.max_pillars,
            feature_dim=self.feature_dim,
        )

    def branch_configs(self) -> list[ScaleBranchConfig]:
        plans = resolve_branch_strides(self.scales, self.base_strides, self.stage_channels)
        return [
            ScaleBranchConfig(
                pillar_size=scale,
                stage_channels=channels,
                stage_strides=strides,
                refine_depth=self.refine_depth,
                refine_channels=self.refine_channels,
                out_channels=self.branch_channels,
            )
            for scale, (strides, channels) in zip(self.scales, plans)
        ]

    def fusion_config(self) -> FusionConfig:
        return FusionConfig(
            reference_index=0,
            upsample_mode=self.upsample_mode,
            attention_hidden=self.attention_hidden,
        )

    def lidar_model(self) -> LidarModel:
        return LidarModel(beams=self.lidar_beams, horizontal_resolution=self.lidar_horizontal_resolution)

    # ------------------------------------------------------------------
    # Serialization
    # ------------------------------------------------------------------

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        for key, value in data.items():
            if isinstance(value, tuple):
                data[key] = list(value)
        return data

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"Unknown config keys: {', '.join(unknown)}")
        return cls(**dict(data))

    def merged(self, overrides: Mapping[str, Any]) -> "RunConfig":
        """Copy with ``overrides`` applied; None values are ignored."""
        clean = {k: v for k, v in overrides.items() if v is not None}
        known = {f.name for f in fields(self)}
        unknown = sorted(set(clean) - known)
        if unknown:
            raise ConfigError(f"Unknown config keys: {', '.join(unknown)}")
        return replace(self, **clean)


def config_hash(cfg: RunConfig) -> str:
    """First 16 hex chars of SHA-256 over the canonical JSON form."""
    canonical = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def load_config(path: str | Path) -> dict[str, Any]:
    """Read a JSON config file as raw overrides."""
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except OSError as e:
        raise DatasetIOError(f"Cannot read config: {e}", path) from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config file {path} is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"Config file {path} must hold a JSON object")
    return data


def save_config(cfg: RunConfig, directory: str | Path) -> Path:
    """Write ``resolved_config.json`` into ``directory``."""
    path = Path(directory) / RESOLVED_CONFIG_NAME
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(cfg.to_json())
    except OSError as e:
        raise DatasetIOError(f"Cannot write config: {e}", path) from e
    return path


# ============================================================================
# Presets
# ============================================================================


@dataclass
class PresetInfo:
    """A named starting point for RunConfig."""

    name: str
    description: str
    overrides: dict[str, Any] = field(default_factory=dict)


# Ablation rows first, then scale presets. "hmfn" is the default.
PRESETS: dict[str, PresetInfo] = {
    "base": PresetInfo(
        "base", "Single 0.075 m scale, all classes", {"scales": (0.075,), "pedes_only": False}
    ),
    "model1": PresetInfo(
        "model1",
        "Coarse-first 0.075 + 0.05 m, all classes",
        {"scales": (0.075, 0.05), "pedes_only": False},
    ),
    "model2": PresetInfo(
        "model2",
        "Coarse-first two scales with speed channels",
        {"scales": (0.075, 0.05), "pedes_only": False, "speed": True},
    ),
    "model3": PresetInfo(
        "model3", "Single 0.075 m scale, pedestrian-only", {"scales": (0.075,), "pedes_only": True}
    ),
    "hmfn": PresetInfo(
        "hmfn",
        "Fine-first 0.05 + 0.075 m, pedestrian-only",
        {"scales": (0.05, 0.075), "pedes_only": True},
    ),
    "desk": PresetInfo(
        "desk",
        "Reduced widths and short schedule for CPU runs",
        {
            "feature_dim": 16,
            "stage_channels": (8, 16, 16, 24),
            "refine_channels": 24,
            "branch_channels": 16,
            "head_channels": 16,
            "attention_hidden": 8,
            "epochs": 4,
            "lidar_beams": 32,
            "lidar_horizontal_resolution": 0.8,
        },
    ),
    "full": PresetInfo(
        "full",
        "Full recipe: 20 epochs, batch 4, E=64, +-25.2 m range",
        {
            "half_extent": 25.2,
            "feature_dim": 64,
            "stage_channels": (32, 64, 64, 128),
            "refine_channels": 128,
            "branch_channels": 128,
            "head_channels": 64,
            "epochs": 20,
            "batch_size": 4,
            "lidar_beams": 128,
            "lidar_horizontal_resolution": 0.2,
        },
    ),
}

DEFAULT_PRESET = "hmfn"


def resolve_config(
    preset: str | None = None,
    config_file: str | Path | None = None,
    overrides: Mapping[str, Any] | None = None,
) -> RunConfig:
    """Apply preset(s), config file and flag overrides, in that order.

    ``preset`` may name several presets joined by "+" (e.g. "hmfn+desk").
    """
    cfg = RunConfig()
    for name in (preset or DEFAULT_PRESET).split("+"):
        if name not in PRESETS:
            raise ConfigError(f"Unknown preset '{name}' (available: {', '.join(PRESETS)})")
        cfg = cfg.merged(PRESETS[name].overrides)
    if config_file is not None:
        cfg = cfg.merged(load_config(config_file))
    if overrides:
        cfg = cfg.merged(overrides)
    logger.debug("Resolved config %s", config_hash(cfg))
    return cfg


def get_presets_summary() -> str:
    lines = ["Presets:"]
    for info in PRESETS.values():
        marker = " (default)" if info.name == DEFAULT_PRESET else ""
        lines.append(f"  {info.name:<8} {info.description}{marker}")
    return "\n".join(lines)


# ============================================================================
# Multi-scale stride resolution
# ============================================================================


def _near_integer(x: float) -> bool:
    return x >= 1 - 1e-9 and abs(x - round(x)) < 1e-6


def resolve_branch_strides(
    scales: tuple[float, ...],
    base_strides: tuple[int, ...],
    stage_channels: tuple[int, ...],
) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
    """Stage strides and widths per scale so every branch output cell is an
    integer multiple or divisor of the reference (first) branch's cell.

    The reference uses ``base_strides``. Any other scale gets the
    power-of-two total stride closest to the base total (ties go to the
    larger stride) that satisfies the ratio rule. Extra stride-2 stages
    repeat the last width; fewer are obtained by turning trailing strides
    into 1.

    Raises:
        ConfigError: If no stride in 2^0..2^5 aligns a scale.
    """
    if len(base_strides) != len(stage_channels):
        raise ConfigError(f"{len(stage_channels)} stage widths for {len(base_strides)} strides")
    base_total = math.prod(base_strides)
    ref_cell = scales[0] * base_total
    base_exp = math.log2(base_total)
    plans = [(tuple(base_strides), tuple(stage_channels))]
    for scale in scales[1:]:
        candidates = []
        for m in range(MAX_STRIDE_EXPONENT + 1):
            cell = scale * 2**m
            if _near_integer(cell / ref_cell) or _near_integer(ref_cell / cell):
                candidates.append(m)
        if not candidates:
            raise ConfigError(
                f"Pillar size {scale} cannot be aligned with reference {scales[0]} by a power-of-two stride"
            )
        m = min(candidates, key=lambda c: (abs(c - base_exp), -c))
        plans.append(_strides_for_total(base_strides, stage_channels, 2**m))
    return plans


def _strides_for_total(
    base_strides: tuple[int, ...], stage_channels: tuple[int, ...], total: int
) -> tuple[tuple[int, ...], tuple[int, ...]]:
    strides = list(base_strides)
    channels = list(stage_channels)
    while math.prod(strides) < total:
        strides.append(2)
        channels.append(channels[-1])
    i = len(strides) - 1
    while math.prod(strides) > total and i >= 0:
        if strides[i] > 1:
            strides[i] //= 2
        else:
            i -= 1
    return tuple(strides), tuple(channels)


def check_alignment(cfg: RunConfig) -> list[tuple[int, int]]:
    """Output grid dims per scale; raises if they do not align with the reference.

    Raises:
        ConfigError: If a branch grid is not an integer rescale of the reference grid.
    """
    dims = []
    for scale, branch in zip(cfg.scales, cfg.branch_configs()):
        m, k = cfg.pillar_spec(scale).grid_dims
        s = branch.total_stride
        dims.append((-(-m // s), -(-k // s)))
    ref = dims[0]
    for scale, d in zip(cfg.scales[1:], dims[1:]):
        ok = any(
            (ref[0] == d[0] * f and ref[1] == d[1] * f) or (d[0] == ref[0] * f and d[1] == ref[1] * f)
            for f in range(1, 65)
        )
        if not ok:
            raise ConfigError(
                f"Scale {scale} gives a {d} grid that does not align with the reference {ref}; "
                f"adjust half_extent ({cfg.half_extent} m)"
            )
    return dims
