"""Cross-scale alignment and per-location attention fusion.

Every per-scale map F_i is brought to the reference resolution, then a
shared 1x1 conv stack produces one logit per scale at each BEV cell. The
softmax of those logits weights a convex combination of the aligned maps.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ContractError, DimensionError
from .numerics import Tensor

logger = logging.getLogger(__name__)

UPSAMPLE_MODES = ("bilinear", "nearest")


@dataclass(frozen=True)
class FusionConfig:
    """Alignment and attention settings.

    Attributes:
        reference_index: Which scale's resolution the others are aligned to.
        upsample_mode: "bilinear" or "nearest".
        attention_hidden: Width of the hidden 1x1 conv producing scale logits.
    """

    reference_index: int = 0
    upsample_mode: str = "bilinear"
    attention_hidden: int = 16

    def __post_init__(self) -> None:
        if self.upsample_mode not in UPSAMPLE_MODES:
            raise ConfigError(
                f"Unknown upsample mode '{self.upsample_mode}' (expected one of {UPSAMPLE_MODES})"
            )
        if self.reference_index < 0:
            raise ConfigError(f"reference_index must be >= 0, got {self.reference_index}")
        if self.attention_hidden < 1:
            raise ConfigError("attention_hidden must be positive")


def _ratio(big: int, small: int) -> int | None:
    if small < 1 or big % small:
        return None
    return big // small


def align_scales(maps: Sequence[Tensor], cfg: FusionConfig) -> list[Tensor]:
    """Resample every [C, H, W] map to the reference map's spatial size.

    Coarser maps are upsampled, finer maps are average-pooled; maps already
    at the reference size are returned as-is.

    Raises:
        ContractError: If no maps are given.
        ConfigError: If a size ratio is not an integer or the reference
            index does not exist.
        DimensionError: If channel widths differ.
    """
    if not maps:
        raise ContractError("align_scales: no feature maps given")
    if cfg.reference_index >= len(maps):
        raise ConfigError(
            f"reference_index {cfg.reference_index} out of range for {len(maps)} scales"
        )
    ref = maps[cfg.reference_index]
    _, rh, rw = ref.shape
    aligned: list[Tensor] = []
    for i, fmap in enumerate(maps):
        if fmap.shape[0] != ref.shape[0]:
            raise DimensionError(
                f"Scale {i} has {fmap.shape[0]} channels, reference has {ref.shape[0]}"
            )
        _, h, w = fmap.shape
        if (h, w) == (rh, rw):
            aligned.append(fmap)
            continue
        if h <= rh and w <= rw:
            fh, fw = _ratio(rh, h), _ratio(rw, w)
            if fh is None or fh != fw:
                raise ConfigError(f"Cannot upsample scale {i} {(h, w)} to {(rh, rw)} by an integer")
            if cfg.upsample_mode == "bilinear":
                aligned.append(nx.bilinear_upsample(fmap, fh))
            else:
                aligned.append(nx.nearest_upsample(fmap, fh))
        else:
            fh, fw = _ratio(h, rh), _ratio(w, rw)
            if fh is None or fh != fw:
                raise ConfigError(f"Cannot downsample scale {i} {(h, w)} to {(rh, rw)} by an integer")
            aligned.append(nx.avg_pool2d(fmap, fh))
        logger.debug("Aligned scale %d from %s to %s", i, (h, w), (rh, rw))
    return aligned


def init_fusion_params(
    n_scales: int,
    channels: int,
    cfg: FusionConfig,
    rng: np.random.Generator,
    prefix: str = "fusion.",
) -> dict[str, Tensor]:
    """Weights of the two 1x1 convs producing the per-scale logits."""
    hidden = cfg.attention_hidden
    c_in = n_scales * channels
    return {
        f"{prefix}attn1.weight": Tensor(
            rng.normal(0.0, np.sqrt(2.0 / c_in), (hidden, c_in, 1, 1)), requires_grad=True
        ),
        f"{prefix}attn1.bias": Tensor(np.zeros(hidden), requires_grad=True),
        f"{prefix}attn2.weight": Tensor(
            rng.normal(0.0, np.sqrt(1.0 / hidden), (n_scales, hidden, 1, 1)), requires_grad=True
        ),
        f"{prefix}attn2.bias": Tensor(np.zeros(n_scales), requires_grad=True),
    }


def attention_weights(
    aligned: Sequence[Tensor], params: Mapping[str, Tensor], prefix: str = "fusion."
) -> Tensor:
    """Per-location scale weights, [n, H, W], softmax over the first axis."""
    try:
        w1, b1 = params[f"{prefix}attn1.weight"], params[f"{prefix}attn1.bias"]
        w2, b2 = params[f"{prefix}attn2.weight"], params[f"{prefix}attn2.bias"]
    except KeyError as e:
        raise ConfigError(f"Fusion parameters missing {e}") from None
    if w2.shape[0] != len(aligned):
        raise DimensionError(f"Attention produces {w2.shape[0]} logits for {len(aligned)} scales")
    stacked = nx.concat(list(aligned), axis=0)
    hidden = nx.relu(nx.conv2d(stacked, w1, b1))
    logits = nx.conv2d(hidden, w2, b2)
    return nx.softmax(logits, axis=0)


def attention_fuse(
    aligned: Sequence[Tensor], params: Mapping[str, Tensor], prefix: str = "fusion."
) -> tuple[Tensor, Tensor]:
    """F = sum_j w_j * F_j with per-location softmax weights.

    Returns:
        Tuple of (fused map [C, H, W], weights [n, H, W]).

    Raises:
        ContractError: If no maps are given.
    """
    if not aligned:
        raise ContractError("attention_fuse: no feature maps given")
    shape = aligned[0].shape
    if any(f.shape != shape for f in aligned):
        raise DimensionError(f"attention_fuse: maps differ in shape {[f.shape for f in aligned]}")
    weights = attention_weights(aligned, params, prefix)
    fused = nx.mul(aligned[0], nx.select(weights, 0, axis=0))
    for j in range(1, len(aligned)):
        fused = nx.add(fused, nx.mul(aligned[j], nx.select(weights, j, axis=0)))
    return fused, weights
