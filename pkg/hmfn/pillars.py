"""Pillar encoder: points to per-pillar features on the BEV grid.

Each point inside the grid is assigned to the full-height pillar under it,
augmented with its (dx, dy) offset from the pillar center, linearly mapped
by W_f, passed through ReLU and max-pooled per pillar.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .backbone import SparseFeatureMap
from .errors import ConfigError, ContractError, DatasetIOError, DimensionError
from .numerics import Tensor

POINT_FILE_COLUMNS = 4
VELOCITY_COLUMNS = 2


# ============================================================================
# Types
# ============================================================================


@dataclass(frozen=True)
class PointCloud:
    """One LiDAR frame.

    Attributes:
        points: [N, D] array; columns x, y, z (m), intensity in [0, 1], then
            optional vx, vy (m/s) when speed channels are attached.
        frame_id: Identifier of the frame (the sample_data token on disk).
        timestamp: Microseconds.
    """

    points: np.ndarray
    frame_id: str = ""
    timestamp: int = 0

    def __post_init__(self) -> None:
        points = np.asarray(self.points, dtype=np.float64)
        if points.size == 0:
            width = points.shape[1] if points.ndim == 2 else 0
            points = points.reshape(0, max(width, POINT_FILE_COLUMNS))
        if points.ndim != 2 or points.shape[1] < POINT_FILE_COLUMNS:
            raise ContractError(f"Point cloud must be [N, D>=4], got {points.shape}")
        if not np.all(np.isfinite(points)):
            raise ContractError(f"Point cloud '{self.frame_id}' has non-finite values")
        object.__setattr__(self, "points", points)

    @property
    def num_points(self) -> int:
        return int(self.points.shape[0])

    @property
    def num_features(self) -> int:
        return int(self.points.shape[1])

    def with_velocity(self, velocities: np.ndarray) -> "PointCloud":
        """Append two velocity channels (speed mode)."""
        velocities = np.asarray(velocities, dtype=np.float64).reshape(-1, VELOCITY_COLUMNS)
        if velocities.shape[0] != self.num_points:
            raise DimensionError(
                f"{velocities.shape[0]} velocities for {self.num_points} points"
            )
        return PointCloud(np.hstack([self.points, velocities]), self.frame_id, self.timestamp)


@dataclass(frozen=True)
class PillarGridSpec:
    """BEV pillar grid.

    Attributes:
        x_range: (min, max) meters along x; rows index x.
        y_range: (min, max) meters along y; columns index y.
        pillar_size: (P_m, P_k) pillar footprint in meters.
        max_points_per_pillar: Points kept per pillar.
        max_pillars: Occupied pillars kept per frame.
        feature_dim: Encoded pillar width E.
    """

    x_range: tuple[float, float] = (-25.6, 25.6)
    y_range: tuple[float, float] = (-25.6, 25.6)
    pillar_size: tuple[float, float] = (0.075, 0.075)
    max_points_per_pillar: int = 32
    max_pillars: int = 12000
    feature_dim: int = 64

    def __post_init__(self) -> None:
        if min(self.pillar_size) <= 0:
            raise ConfigError(f"pillar_size must be positive, got {self.pillar_size}")
        for lo, hi in (self.x_range, self.y_range):
            if not hi > lo:
                raise ConfigError(f"Invalid grid range ({lo}, {hi})")
        if self.max_points_per_pillar < 1 or self.max_pillars < 1 or self.feature_dim < 1:
            raise ConfigError("Pillar limits and feature_dim must be positive")

    @classmethod
    def square(cls, pillar: float, half_extent: float, **kwargs) -> "PillarGridSpec":
        return cls(
            x_range=(-half_extent, half_extent),
            y_range=(-half_extent, half_extent),
            pillar_size=(pillar, pillar),
            **kwargs,
        )

    @property
    def grid_dims(self) -> tuple[int, int]:
        """(M, K) = ceil(span / pillar size) per axis."""
        m = math.ceil((self.x_range[1] - self.x_range[0]) / self.pillar_size[0] - 1e-9)
        k = math.ceil((self.y_range[1] - self.y_range[0]) / self.pillar_size[1] - 1e-9)
        return max(m, 1), max(k, 1)

    def pillar_center(self, row: int | np.ndarray, col: int | np.ndarray) -> tuple:
        return (
            self.x_range[0] + (row + 0.5) * self.pillar_size[0],
            self.y_range[0] + (col + 0.5) * self.pillar_size[1],
        )


@dataclass
class PillarizedScene:
    """Occupied pillars of one frame at one scale.

    Attributes:
        spec: Grid the pillars live on.
        pillar_coords: [P, 2] (row, col) in row-major order, unique.
        point_features: [P, max_points_per_pillar, D + 2] augmented points,
            zero-padded past each pillar's stored count.
        occupancy: [P] points that fell in each pillar before subsampling.
        num_points_in_range: Points inside the grid range.
        dropped_by_subsampling: Points removed by the per-pillar cap.
        dropped_by_pillar_limit: Points in pillars removed by the pillar cap.
    """

    spec: PillarGridSpec
    pillar_coords: np.ndarray
    point_features: np.ndarray
    occupancy: np.ndarray
    num_points_in_range: int = 0
    dropped_by_subsampling: int = 0
    dropped_by_pillar_limit: int = 0

    @property
    def num_pillars(self) -> int:
        return int(self.pillar_coords.shape[0])

    @property
    def feature_width(self) -> int:
        return int(self.point_features.shape[2])

    @property
    def stored_counts(self) -> np.ndarray:
        return np.minimum(self.occupancy, self.spec.max_points_per_pillar)

    @property
    def point_mask(self) -> np.ndarray:
        slots = np.arange(self.spec.max_points_per_pillar)
        return slots[None, :] < self.stored_counts[:, None]


# ============================================================================
# Operations
# ============================================================================


def augment_point(point: np.ndarray, pillar_center: tuple[float, float]) -> np.ndarray:
    """p_i = [features_i, dx_i, dy_i] with offsets from the pillar center."""
    point = np.asarray(point, dtype=np.float64)
    offsets = point[:2] - np.asarray(pillar_center, dtype=np.float64)
    return np.concatenate([point, offsets])


def _empty_scene(spec: PillarGridSpec, width: int, in_range: int = 0) -> PillarizedScene:
    return PillarizedScene(
        spec=spec,
        pillar_coords=np.zeros((0, 2), dtype=np.int64),
        point_features=np.zeros((0, spec.max_points_per_pillar, width)),
        occupancy=np.zeros(0, dtype=np.int64),
        num_points_in_range=in_range,
    )


def assign_pillars(cloud: PointCloud, spec: PillarGridSpec, rng_seed: int = 0) -> PillarizedScene:
    """Group in-range points into pillars and build augmented point features.

    Points are put in a canonical order inside each pillar before any
    subsampling, so the result does not depend on input point order.
    Overfull pillars keep a seeded uniform subsample; when more than
    ``max_pillars`` are occupied, the most occupied are kept (ties go to the
    row-major first).
    """
    d = cloud.num_features
    width = d + 2
    m, k = spec.grid_dims
    pts = cloud.points
    if pts.shape[0] == 0:
        return _empty_scene(spec, width)

    rows = np.floor((pts[:, 0] - spec.x_range[0]) / spec.pillar_size[0]).astype(np.int64)
    cols = np.floor((pts[:, 1] - spec.y_range[0]) / spec.pillar_size[1]).astype(np.int64)
    inside = (rows >= 0) & (rows < m) & (cols >= 0) & (cols < k)
    pts, rows, cols = pts[inside], rows[inside], cols[inside]
    n_in = int(pts.shape[0])
    if n_in == 0:
        return _empty_scene(spec, width)

    linear = rows * k + cols
    keys = [pts[:, c] for c in range(d - 1, -1, -1)] + [linear]
    order = np.lexsort(keys)
    pts, linear = pts[order], linear[order]

    pillars, counts = np.unique(linear, return_counts=True)
    point_pillar = np.repeat(np.arange(pillars.size), counts)

    dropped_limit = 0
    if pillars.size > spec.max_pillars:
        rank = np.lexsort((pillars, -counts))
        kept = np.zeros(pillars.size, dtype=bool)
        kept[rank[: spec.max_pillars]] = True
        dropped_limit = int(counts[~kept].sum())
        select = kept[point_pillar]
        remap = np.cumsum(kept) - 1
        pts, point_pillar = pts[select], remap[point_pillar[select]]
        pillars, counts = pillars[kept], counts[kept]

    cap = spec.max_points_per_pillar
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    slot = np.arange(pts.shape[0]) - starts[point_pillar]
    keep = slot < cap

    rng = np.random.default_rng(rng_seed)
    for i in np.nonzero(counts > cap)[0]:
        chosen = np.sort(rng.choice(counts[i], size=cap, replace=False))
        keep[starts[i] : starts[i] + counts[i]] = False
        keep[starts[i] + chosen] = True
        slot[starts[i] + chosen] = np.arange(cap)

    p_rows, p_cols = pillars // k, pillars % k
    cx, cy = spec.pillar_center(p_rows, p_cols)
    kp, kpill, kslot = pts[keep], point_pillar[keep], slot[keep]

    features = np.zeros((pillars.size, cap, width))
    features[kpill, kslot, :d] = kp
    features[kpill, kslot, d] = kp[:, 0] - cx[kpill]
    features[kpill, kslot, d + 1] = kp[:, 1] - cy[kpill]

    return PillarizedScene(
        spec=spec,
        pillar_coords=np.stack([p_rows, p_cols], axis=1),
        point_features=features,
        occupancy=counts.astype(np.int64),
        num_points_in_range=n_in,
        dropped_by_subsampling=int((~keep).sum()),
        dropped_by_pillar_limit=dropped_limit,
    )


def encode_pillars(scene: PillarizedScene, w_f: Tensor) -> Tensor:
    """f_pillar = max over the pillar's points of ReLU(p_i W_f); returns [P, E]."""
    width = scene.feature_width
    if w_f.ndim != 2 or w_f.shape[0] != width:
        raise DimensionError(f"W_f {w_f.shape} does not take {width}-wide point features")
    cap = scene.spec.max_points_per_pillar
    flat = Tensor(scene.point_features.reshape(-1, width))
    encoded = nx.relu(nx.matmul(flat, w_f))
    encoded = nx.reshape(encoded, (scene.num_pillars, cap, w_f.shape[1]))
    return nx.masked_max(encoded, scene.point_mask)


def scatter_to_bev(
    features: Tensor, coords: np.ndarray, spec: PillarGridSpec
) -> SparseFeatureMap:
    """Sparse BEV map whose active sites are exactly the occupied pillars."""
    return SparseFeatureMap(spec.grid_dims, coords, features)


# ============================================================================
# Batching
# ============================================================================


@dataclass
class PillarBatch:
    """Frames padded to a common pillar count.

    Attributes:
        point_features: [B, P_max, max_points, F].
        point_mask: [B, P_max, max_points].
        pillar_valid: [B, P_max] True for real pillars.
        scenes: The collated scenes, in order.
    """

    point_features: np.ndarray
    point_mask: np.ndarray
    pillar_valid: np.ndarray
    scenes: list[PillarizedScene] = field(default_factory=list)


def collate_pillars(scenes: Sequence[PillarizedScene]) -> PillarBatch:
    """Pad per-frame pillar sets to the batch maximum with a validity mask."""
    if not scenes:
        raise ContractError("collate_pillars: empty batch")
    cap = scenes[0].spec.max_points_per_pillar
    width = scenes[0].feature_width
    for s in scenes:
        if s.spec.max_points_per_pillar != cap or s.feature_width != width:
            raise DimensionError("collate_pillars: frames use different point layouts")
    p_max = max(1, max(s.num_pillars for s in scenes))
    b = len(scenes)
    feats = np.zeros((b, p_max, cap, width))
    mask = np.zeros((b, p_max, cap), dtype=bool)
    valid = np.zeros((b, p_max), dtype=bool)
    for i, s in enumerate(scenes):
        feats[i, : s.num_pillars] = s.point_features
        mask[i, : s.num_pillars] = s.point_mask
        valid[i, : s.num_pillars] = True
    return PillarBatch(feats, mask, valid, list(scenes))


def encode_pillar_batch(batch: PillarBatch, w_f: Tensor) -> list[Tensor]:
    """Encode every valid pillar of a batch with one matmul; one [P_i, E] per frame."""
    b, p_max, cap, width = batch.point_features.shape
    if w_f.ndim != 2 or w_f.shape[0] != width:
        raise DimensionError(f"W_f {w_f.shape} does not take {width}-wide point features")
    flat = Tensor(batch.point_features.reshape(-1, width))
    encoded = nx.reshape(nx.relu(nx.matmul(flat, w_f)), (b * p_max, cap, w_f.shape[1]))
    valid_rows = np.nonzero(batch.pillar_valid.reshape(-1))[0]
    pooled = nx.masked_max(
        nx.take_rows(encoded, valid_rows), batch.point_mask.reshape(-1, cap)[valid_rows]
    )
    counts = batch.pillar_valid.sum(axis=1)
    offsets = np.concatenate([[0], np.cumsum(counts)])
    return [nx.take_rows(pooled, np.arange(offsets[i], offsets[i + 1])) for i in range(b)]


# ============================================================================
# Point-cloud files
# ============================================================================


def velocity_path(path: str | Path) -> Path:
    """Sidecar holding two float32 velocity values per point."""
    path = Path(path)
    return path.with_name(path.stem + ".vel.bin")


def write_point_cloud(path: str | Path, cloud: PointCloud, velocities: np.ndarray | None = None) -> None:
    """Write x, y, z, intensity as little-endian float32; velocities go to the sidecar."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        cloud.points[:, :POINT_FILE_COLUMNS].astype("<f4").tofile(path)
        if velocities is not None:
            np.asarray(velocities).reshape(-1, VELOCITY_COLUMNS).astype("<f4").tofile(
                velocity_path(path)
            )
    except OSError as e:
        raise DatasetIOError(f"Cannot write point cloud: {e}", path) from e


def read_point_cloud(
    path: str | Path, frame_id: str = "", timestamp: int = 0, with_velocity: bool = False
) -> PointCloud:
    """Read a ``.bin`` point cloud, optionally attaching its velocity sidecar."""
    path = Path(path)
    try:
        raw = np.fromfile(path, dtype="<f4")
    except OSError as e:
        raise DatasetIOError(f"Cannot read point cloud: {e}", path) from e
    if raw.size % POINT_FILE_COLUMNS:
        raise DatasetIOError("Point file size is not a multiple of 4 floats", path)
    cloud = PointCloud(raw.reshape(-1, POINT_FILE_COLUMNS).astype(np.float64), frame_id, timestamp)
    if with_velocity:
        side = velocity_path(path)
        try:
            vel = np.fromfile(side, dtype="<f4").astype(np.float64)
        except OSError as e:
            raise DatasetIOError(f"Cannot read velocity sidecar: {e}", side) from e
        cloud = cloud.with_velocity(vel)
    return cloud
