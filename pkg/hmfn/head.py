"""Center-based detection head: heatmap + box regression on the fused BEV map.

Regression channels, in order: dx, dy (sub-cell offset of the center),
z, log l, log w, log h, sin(yaw), cos(yaw).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ContractError, DimensionError
from .numerics import Tensor
from .pillars import PillarGridSpec

logger = logging.getLogger(__name__)

REGRESSION_CHANNELS = ("dx", "dy", "z", "log_l", "log_w", "log_h", "sin", "cos")
HEATMAP_BIAS = -2.19
FOCAL_CLAMP = 1e-4
# Decoded log-sizes are clipped to +-this before exp.
LOG_SIZE_LIMIT = 10.0


def wrap_angle(angle: float) -> float:
    """Wrap to (-pi, pi]."""
    wrapped = math.remainder(float(angle), 2.0 * math.pi)
    return math.pi if wrapped <= -math.pi else wrapped


# ============================================================================
# Boxes and grids
# ============================================================================


@dataclass
class Box3D:
    """7-DoF box with class and identity.

    Attributes:
        center: (x, y, z) in meters.
        size: (l, w, h) in meters, all positive.
        yaw: Heading in radians, wrapped to (-pi, pi].
        label: Category name.
        score: Detection confidence in [0, 1]; None for annotations.
        instance_id: Persistent track identity; None for detections.
        num_lidar_pts: Points on the object; None when unknown.
    """

    center: tuple[float, float, float]
    size: tuple[float, float, float]
    yaw: float = 0.0
    label: str = "pedestrian"
    score: float | None = None
    instance_id: str | None = None
    num_lidar_pts: int | None = None

    def __post_init__(self) -> None:
        self.center = tuple(float(v) for v in self.center)
        self.size = tuple(float(v) for v in self.size)
        if len(self.center) != 3 or len(self.size) != 3:
            raise DimensionError("Box3D needs a 3-vector center and size")
        if min(self.size) <= 0:
            raise ContractError(f"Box sizes must be positive, got {self.size}")
        self.yaw = wrap_angle(self.yaw)
        if self.score is not None:
            self.score = float(self.score)
            if not 0.0 <= self.score <= 1.0:
                raise ContractError(f"Score {self.score} outside [0, 1]")

    @property
    def visible(self) -> bool:
        """False only for annotations known to have no LiDAR returns."""
        return self.num_lidar_pts is None or self.num_lidar_pts > 0

    @property
    def bev_center(self) -> np.ndarray:
        return np.array(self.center[:2])


@dataclass(frozen=True)
class BEVGrid:
    """Output grid of the head: cell (i, j) covers x in [x_min + i*cell, ...)."""

    x_min: float
    y_min: float
    cell: float
    dims: tuple[int, int]

    @classmethod
    def from_pillar_spec(cls, spec: PillarGridSpec, stride: int) -> "BEVGrid":
        m, k = spec.grid_dims
        if spec.pillar_size[0] != spec.pillar_size[1]:
            raise ConfigError("Detection grids need square pillars")
        return cls(
            x_min=spec.x_range[0],
            y_min=spec.y_range[0],
            cell=spec.pillar_size[0] * stride,
            dims=(-(-m // stride), -(-k // stride)),
        )

    def cell_of(self, x: float, y: float) -> tuple[int, int] | None:
        i = math.floor((x - self.x_min) / self.cell)
        j = math.floor((y - self.y_min) / self.cell)
        if 0 <= i < self.dims[0] and 0 <= j < self.dims[1]:
            return i, j
        return None


@dataclass
class HeadOutput:
    """Head predictions for one frame.

    Attributes:
        heatmap: [n_classes, H, W] post-sigmoid scores.
        regression: [8, H, W] in REGRESSION_CHANNELS order.
    """

    heatmap: Tensor
    regression: Tensor


@dataclass
class HeadTargets:
    """Training targets matching a HeadOutput."""

    heatmap: np.ndarray
    regression: np.ndarray
    mask: np.ndarray
    centers: list[tuple[int, int, int]] = field(default_factory=list)

    @property
    def num_positive(self) -> int:
        return int(self.mask.sum())


# ============================================================================
# Parameters and forward
# ============================================================================


def init_head_params(
    in_channels: int,
    head_channels: int,
    n_classes: int,
    rng: np.random.Generator,
    prefix: str = "head.",
) -> dict[str, Tensor]:
    """Shared 3x3 conv, then 1x1 heatmap and regression convs."""

    def he(shape: tuple[int, ...]) -> Tensor:
        fan_in = int(np.prod(shape[1:]))
        return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), shape), requires_grad=True)

    return {
        f"{prefix}shared.weight": he((head_channels, in_channels, 3, 3)),
        f"{prefix}shared.bias": Tensor(np.zeros(head_channels), requires_grad=True),
        f"{prefix}heatmap.weight": Tensor(
            rng.normal(0.0, 0.01, (n_classes, head_channels, 1, 1)), requires_grad=True
        ),
        f"{prefix}heatmap.bias": Tensor(np.full(n_classes, HEATMAP_BIAS), requires_grad=True),
        f"{prefix}regression.weight": Tensor(
            rng.normal(0.0, 0.01, (len(REGRESSION_CHANNELS), head_channels, 1, 1)),
            requires_grad=True,
        ),
        f"{prefix}regression.bias": Tensor(np.zeros(len(REGRESSION_CHANNELS)), requires_grad=True),
    }


def run_head(fused: Tensor, params: Mapping[str, Tensor], prefix: str = "head.") -> HeadOutput:
    try:
        shared = nx.relu(
            nx.conv2d(fused, params[f"{prefix}shared.weight"], params[f"{prefix}shared.bias"], padding=1)
        )
        logits = nx.conv2d(shared, params[f"{prefix}heatmap.weight"], params[f"{prefix}heatmap.bias"])
        regression = nx.conv2d(
            shared, params[f"{prefix}regression.weight"], params[f"{prefix}regression.bias"]
        )
    except KeyError as e:
        raise ConfigError(f"Head parameters missing {e}") from None
    return HeadOutput(heatmap=nx.sigmoid(logits), regression=regression)


# ============================================================================
# Targets
# ============================================================================


def gaussian_radius(height: float, width: float, min_overlap: float = 0.7) -> float:
    """Largest center shift keeping IoU >= min_overlap with the true box (in cells)."""
    h, w, o = height, width, min_overlap

    b1 = h + w
    c1 = w * h * (1 - o) / (1 + o)
    r1 = (b1 - math.sqrt(b1**2 - 4 * c1)) / 2

    b2 = 2 * (h + w)
    c2 = (1 - o) * w * h
    r2 = (b2 - math.sqrt(b2**2 - 16 * c2)) / 8

    a3 = 4 * o
    b3 = -2 * o * (h + w)
    c3 = (o - 1) * w * h
    r3 = (b3 + math.sqrt(b3**2 - 4 * a3 * c3)) / (2 * a3)
    return min(r1, r2, r3)


def draw_gaussian(heatmap: np.ndarray, center: tuple[int, int], radius: int) -> np.ndarray:
    """Max-combine a unit-peak Gaussian of the given radius into ``heatmap`` in place."""
    diameter = 2 * radius + 1
    sigma = diameter / 6.0
    offs = np.arange(-radius, radius + 1)
    gaussian = np.exp(-(offs[:, None] ** 2 + offs[None, :] ** 2) / (2 * sigma * sigma))
    gaussian[gaussian < np.finfo(np.float64).eps * gaussian.max()] = 0.0

    i, j = center
    h, w = heatmap.shape
    top, bottom = min(i, radius), min(h - i, radius + 1)
    left, right = min(j, radius), min(w - j, radius + 1)
    window = heatmap[i - top : i + bottom, j - left : j + right]
    patch = gaussian[radius - top : radius + bottom, radius - left : radius + right]
    np.maximum(window, patch, out=window)
    return heatmap


def build_targets(
    boxes: Sequence[Box3D],
    grid: BEVGrid,
    class_names: Sequence[str],
    min_overlap: float = 0.7,
    min_radius: int = 2,
) -> HeadTargets:
    """Gaussian center heatmaps and regression targets for one frame.

    Boxes whose label is not in ``class_names`` or whose center lies outside
    the grid are skipped. When two boxes share a center cell, the first one
    keeps the regression target.
    """
    h, w = grid.dims
    heatmap = np.zeros((len(class_names), h, w))
    regression = np.zeros((len(REGRESSION_CHANNELS), h, w))
    mask = np.zeros((h, w), dtype=bool)
    centers: list[tuple[int, int, int]] = []
    for box in boxes:
        if box.label not in class_names:
            continue
        cell = grid.cell_of(box.center[0], box.center[1])
        if cell is None:
            continue
        i, j = cell
        cls = list(class_names).index(box.label)
        length, width = box.size[0] / grid.cell, box.size[1] / grid.cell
        radius = max(min_radius, int(gaussian_radius(length, width, min_overlap)))
        draw_gaussian(heatmap[cls], (i, j), radius)
        centers.append((cls, i, j))
        if mask[i, j]:
            continue
        mask[i, j] = True
        regression[:, i, j] = [
            (box.center[0] - grid.x_min) / grid.cell - i,
            (box.center[1] - grid.y_min) / grid.cell - j,
            box.center[2],
            math.log(box.size[0]),
            math.log(box.size[1]),
            math.log(box.size[2]),
            math.sin(box.yaw),
            math.cos(box.yaw),
        ]
    return HeadTargets(heatmap=heatmap, regression=regression, mask=mask, centers=centers)


# ============================================================================
# Loss
# ============================================================================


def focal_loss(heatmap: Tensor, target: np.ndarray, alpha: float = 2.0, beta: float = 4.0) -> Tensor:
    """Penalty-reduced focal loss, normalized by max(#positives, 1)."""
    if heatmap.shape != target.shape:
        raise DimensionError(f"Heatmap {heatmap.shape} vs target {target.shape}")
    pos = (target == 1.0).astype(np.float64)
    neg_weight = (1.0 - target) ** beta * (1.0 - pos)
    npos = max(float(pos.sum()), 1.0)

    p = nx.clip(heatmap, FOCAL_CLAMP, 1.0 - FOCAL_CLAMP)
    one_minus_p = nx.add_scalar(nx.scale(p, -1.0), 1.0)

    def power(t: Tensor, n: float) -> Tensor:
        if n == 2.0:
            return nx.mul(t, t)
        return nx.exp(nx.scale(nx.log(t), n))

    pos_term = nx.mul(nx.mul(nx.log(p), power(one_minus_p, alpha)), Tensor(pos))
    neg_term = nx.mul(nx.mul(nx.log(one_minus_p), power(p, alpha)), Tensor(neg_weight))
    return nx.scale(nx.add(nx.sum(pos_term), nx.sum(neg_term)), -1.0 / npos)


def regression_loss(regression: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    """L1 over all regression channels at masked cells, / max(#positives, 1)."""
    if regression.shape != target.shape or mask.shape != target.shape[1:]:
        raise DimensionError(f"Regression {regression.shape} vs target {target.shape}")
    npos = max(float(mask.sum()), 1.0)
    diff = nx.abs(nx.sub(regression, Tensor(target)))
    return nx.scale(nx.sum(nx.mul(diff, Tensor(mask.astype(np.float64)))), 1.0 / npos)


def detection_loss(
    pred: HeadOutput,
    targets: HeadTargets,
    heatmap_weight: float = 1.0,
    regression_weight: float = 0.25,
) -> tuple[Tensor, dict[str, float]]:
    """Weighted heatmap focal loss plus regression L1.

    Returns:
        Tuple of (scalar loss tensor, {"heatmap": ..., "regression": ...}).
    """
    hm = focal_loss(pred.heatmap, targets.heatmap)
    parts = {"heatmap": hm.item(), "regression": 0.0}
    total = nx.scale(hm, heatmap_weight)
    if targets.num_positive:
        reg = regression_loss(pred.regression, targets.regression, targets.mask)
        parts["regression"] = reg.item()
        total = nx.add(total, nx.scale(reg, regression_weight))
    return total, parts


# ============================================================================
# Decoding
# ============================================================================

_NEIGHBOURS = [(da, db) for da in (-1, 0, 1) for db in (-1, 0, 1) if (da, db) != (0, 0)]


def peak_mask(heatmap: np.ndarray) -> np.ndarray:
    """3x3 local maxima of a [n, H, W] heatmap.

    A cell is a peak when it is strictly greater than neighbours that come
    before it in row-major order and not less than those after it, so a
    plateau yields exactly its row-major first cell.
    """
    _, h, w = heatmap.shape
    padded = np.pad(heatmap, ((0, 0), (1, 1), (1, 1)), constant_values=-np.inf)
    peaks = np.ones(heatmap.shape, dtype=bool)
    for da, db in _NEIGHBOURS:
        neighbour = padded[:, 1 + da : 1 + da + h, 1 + db : 1 + db + w]
        if da < 0 or (da == 0 and db < 0):
            peaks &= heatmap > neighbour
        else:
            peaks &= heatmap >= neighbour
    return peaks


def decode(
    pred: HeadOutput,
    grid: BEVGrid,
    class_names: Sequence[str],
    max_dets: int = 100,
    score_threshold: float = 0.1,
    nms_radius: float | None = None,
) -> list[Box3D]:
    """Turn heatmap peaks into boxes.

    Candidates are ordered by score (descending), then class, then row-major
    cell. With ``nms_radius`` set, a candidate within that BEV distance of
    an already kept box of the same class is dropped.
    """
    if max_dets < 0 or not 0.0 <= score_threshold <= 1.0:
        raise ContractError(f"Invalid decode limits max_dets={max_dets}, threshold={score_threshold}")
    heat = pred.heatmap.data
    reg = pred.regression.data
    if heat.shape[0] != len(class_names) or heat.shape[1:] != tuple(grid.dims):
        raise DimensionError(f"Heatmap {heat.shape} does not match grid {grid.dims}")

    cls_idx, rows, cols = np.nonzero(peak_mask(heat) & (heat > score_threshold))
    scores = heat[cls_idx, rows, cols]
    order = np.lexsort((rows * grid.dims[1] + cols, cls_idx, -scores))

    boxes: list[Box3D] = []
    kept_xy: list[tuple[int, float, float]] = []
    for n in order:
        if len(boxes) >= max_dets:
            break
        c, i, j = int(cls_idx[n]), int(rows[n]), int(cols[n])
        dx, dy, z, ll, lw, lh, s, co = reg[:, i, j]
        x = grid.x_min + (i + dx) * grid.cell
        y = grid.y_min + (j + dy) * grid.cell
        if nms_radius is not None and any(
            kc == c and math.hypot(x - kx, y - ky) < nms_radius for kc, kx, ky in kept_xy
        ):
            continue
        kept_xy.append((c, x, y))
        boxes.append(
            Box3D(
                center=(x, y, float(z)),
                size=tuple(float(v) for v in np.exp(np.clip((ll, lw, lh), -LOG_SIZE_LIMIT, LOG_SIZE_LIMIT))),
                yaw=math.atan2(s, co),
                label=class_names[c],
                score=float(heat[c, i, j]),
            )
        )
    logger.debug("Decoded %d boxes from %d peaks", len(boxes), len(order))
    return boxes
