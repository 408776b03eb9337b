"""Synthetic semi-structured pedestrian scenes.

A scene is a static layout (walkable polygons plus obstacle boxes) seen by
a fixed LiDAR at the origin. Pedestrians are placed by a clustered point
process, walk with constant velocity and reflect at walkable boundaries.
Each frame is produced by casting every (beam, azimuth) ray against the
obstacle boxes, the pedestrian cylinders and the cyclist boxes.
"""

from __future__ import annotations

import itertools
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Sequence

import numpy as np
import shapely
from shapely import affinity
from shapely.geometry import Polygon
from shapely.ops import unary_union

from .errors import CalibrationError, ConfigError, ContractError, GenerationError
from .evaluation import DensityStats, density_stats_from_positions
from .head import Box3D
from .pillars import PointCloud
from .tracing import run_span, set_attributes

logger = logging.getLogger(__name__)

LAYOUT_KINDS = ("main_pathway", "courtyard", "bridge_crossing", "covered_corridor", "open_plaza")
SURFACE_INTENSITY = {"structure": 0.3, "pedestrian": 0.6, "cyclist": 0.8}
FRAME_DT = 0.5
FRAMES_PER_SCENE = 20
SENSOR_EXCLUSION_RADIUS = 1.0
DEFAULT_EXTENT = 9.6
MAX_PLACEMENT_RETRIES = 500
CYCLIST_SIZE = (1.8, 0.6, 1.7)
CALIBRATION_COUNTS = (1, 2, 3, 4, 6, 8, 12, 16)
CALIBRATION_SPREADS = (0.5, 0.75, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0)
CALIBRATION_FRAMES = 40
CALIBRATION_SCENE_FRAMES = 10
CALIBRATION_MARGIN = 0.5
# Seed stream of the per-scene crowd sizes; scene streams use the scene index.
COUNT_STREAM = 2**31 - 1

# Crowd statistics of a dense real-world pedestrian dataset; calibration targets.
PFSD_REFERENCE = DensityStats(pedes_per_frame=32.0, density_2=2.6, density_5=6.0, density_10=11.6)


# ============================================================================
# Models
# ============================================================================


@dataclass(frozen=True)
class CrowdModel:
    """How many pedestrians appear, how they cluster, and how they move.

    Attributes:
        pedestrians_per_frame: Mean pedestrian count per frame.
        cluster_count: Number of cluster parents per frame.
        cluster_spread: Std (m) of pedestrian offsets around their parent.
        size_mean: Mean (l, w, h) in meters.
        size_std: Std of (l, w, h).
        speed_mean: Mean walking speed (m/s).
        speed_std: Std of the walking speed.
        speed_max: Hard cap on walking speed.
        cyclists_per_frame: Poisson mean of cyclist distractors.
        cyclist_speed: Cyclist speed (m/s).
    """

    pedestrians_per_frame: float = 32.0
    cluster_count: int = 6
    cluster_spread: float = 1.5
    size_mean: tuple[float, float, float] = (0.5, 0.6, 1.7)
    size_std: tuple[float, float, float] = (0.05, 0.05, 0.08)
    speed_mean: float = 1.2
    speed_std: float = 0.3
    speed_max: float = 2.0
    cyclists_per_frame: float = 0.0
    cyclist_speed: float = 4.0

    def __post_init__(self) -> None:
        if self.pedestrians_per_frame < 0 or self.cyclists_per_frame < 0:
            raise ConfigError("Crowd counts must be non-negative")
        if self.cluster_count < 1 or self.cluster_spread <= 0:
            raise ConfigError("cluster_count must be >= 1 and cluster_spread > 0")
        if min(self.size_mean) <= 0 or min(self.size_std) < 0:
            raise ConfigError(f"Invalid pedestrian size distribution {self.size_mean}")
        if self.speed_mean < 0 or self.speed_std < 0 or self.speed_max <= 0:
            raise ConfigError("Invalid walking speed distribution")


@dataclass(frozen=True)
class LidarModel:
    """Static spinning LiDAR at (0, 0, sensor_height).

    Attributes:
        beams: Number of laser rings, spread evenly over the vertical FOV.
        fov_low: Lowest elevation (deg).
        fov_high: Highest elevation (deg).
        horizontal_resolution: Azimuth step (deg).
        max_range: Returns farther than this are dropped (m).
        sensor_height: Mounting height (m).
        range_noise: Gaussian range noise std (m).
    """

    beams: int = 128
    fov_low: float = -25.0
    fov_high: float = 15.0
    horizontal_resolution: float = 0.2
    max_range: float = 50.0
    sensor_height: float = 2.0
    range_noise: float = 0.02

    def __post_init__(self) -> None:
        if self.beams < 1:
            raise ConfigError("LiDAR needs at least one beam")
        if self.horizontal_resolution <= 0 or self.max_range <= 0 or self.sensor_height <= 0:
            raise ConfigError("LiDAR resolution, range and height must be positive")
        if self.fov_high < self.fov_low or self.range_noise < 0:
            raise ConfigError("Invalid LiDAR vertical FOV or noise")

    def directions(self) -> np.ndarray:
        """Unit ray directions, [beams * azimuths, 3], beam-major."""
        if self.beams == 1:
            elev = np.array([self.fov_low])
        else:
            elev = np.linspace(self.fov_low, self.fov_high, self.beams)
        azim = np.arange(0.0, 360.0, self.horizontal_resolution)
        e, a = np.meshgrid(np.radians(elev), np.radians(azim), indexing="ij")
        dirs = np.stack([np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.sin(e)], axis=-1)
        return dirs.reshape(-1, 3)

    @property
    def origin(self) -> np.ndarray:
        return np.array([0.0, 0.0, self.sensor_height])


# ============================================================================
# Layouts
# ============================================================================


@dataclass(frozen=True)
class Obstacle:
    """Static box; ``base`` lifts it off the ground (roofs)."""

    center: tuple[float, float]
    size: tuple[float, float, float]
    yaw: float = 0.0
    base: float = 0.0
    kind: str = "building"

    @property
    def blocks_ground(self) -> bool:
        return self.base < 0.5

    def footprint(self) -> Polygon:
        l, w, _ = self.size
        poly = shapely.box(-l / 2, -w / 2, l / 2, w / 2)
        poly = affinity.rotate(poly, self.yaw, origin=(0, 0), use_radians=True)
        return affinity.translate(poly, *self.center)


@dataclass
class SceneLayout:
    """Static structure of one scene.

    Attributes:
        kind: One of LAYOUT_KINDS.
        extent: Half-size (m) of the square the layout is built in.
        walkable: Union of the regions pedestrians may occupy.
        obstacles: Static boxes (buildings, walls, pillars, railings, roofs).
    """

    kind: str
    extent: float
    walkable: Polygon
    obstacles: tuple[Obstacle, ...] = ()

    def __post_init__(self) -> None:
        if self.kind not in LAYOUT_KINDS:
            raise ConfigError(f"Unknown layout '{self.kind}' (expected one of {LAYOUT_KINDS})")
        if self.free_space.is_empty or self.free_space.area <= 0:
            raise ContractError(f"Obstacles cover the whole walkable region of '{self.kind}'")

    @cached_property
    def free_space(self):
        blocking = [o.footprint() for o in self.obstacles if o.blocks_ground]
        free = self.walkable.difference(unary_union(blocking)) if blocking else self.walkable
        shapely.prepare(free)
        return free

    @cached_property
    def _free_boundary(self):
        boundary = self.free_space.boundary
        shapely.prepare(boundary)
        return boundary

    def admits(self, xy: np.ndarray, clearance: float = 0.0) -> np.ndarray:
        """True where a disc of radius ``clearance`` at each point lies in free space."""
        xy = np.atleast_2d(np.asarray(xy, dtype=np.float64))
        inside = shapely.contains_xy(self.free_space, xy[:, 0], xy[:, 1])
        if clearance > 0 and inside.any():
            dist = shapely.distance(self._free_boundary, shapely.points(xy[inside]))
            inside[inside] = dist >= clearance
        return inside


def _rect(x0: float, y0: float, x1: float, y1: float) -> Polygon:
    return shapely.box(x0, y0, x1, y1)


def make_layout(kind: str, extent: float = DEFAULT_EXTENT) -> SceneLayout:
    """Build one of the five semi-structured layouts inside [-extent, extent]^2."""
    e = float(extent)
    if e <= 2 * SENSOR_EXCLUSION_RADIUS:
        raise ConfigError(f"Layout extent {e} m is too small")

    if kind == "main_pathway":
        walkable = _rect(-e, -0.3 * e, e, 0.3 * e)
        obstacles = [
            Obstacle((sx * 0.5 * e, sy * 0.6 * e), (0.8 * e, 0.4 * e, 6.0))
            for sx in (-1, 1)
            for sy in (-1, 1)
        ]
    elif kind == "courtyard":
        walkable = _rect(-0.8 * e, -0.8 * e, 0.8 * e, 0.8 * e)
        t = 0.3
        obstacles = [
            Obstacle((0.0, 0.85 * e), (1.7 * e, t, 2.5), kind="wall"),
            Obstacle((0.0, -0.85 * e), (1.7 * e, t, 2.5), kind="wall"),
            Obstacle((0.85 * e, 0.0), (t, 1.7 * e, 2.5), kind="wall"),
            Obstacle((-0.85 * e, 0.0), (t, 1.7 * e, 2.5), kind="wall"),
            Obstacle((0.4 * e, 0.4 * e), (1.5, 1.5, 1.0), kind="fountain"),
        ]
    elif kind == "bridge_crossing":
        walkable = unary_union(
            [_rect(-0.2 * e, -e, 0.2 * e, e), _rect(-e, 0.8 * e, e, e), _rect(-e, -e, e, -0.8 * e)]
        )
        obstacles = [
            Obstacle((sx * 0.22 * e, 0.0), (0.1, 1.6 * e, 1.1), kind="railing") for sx in (-1, 1)
        ]
    elif kind == "covered_corridor":
        walkable = _rect(-e, -0.25 * e, e, 0.25 * e)
        columns = [
            Obstacle((-0.9 * e + 0.3 * e * k, sy * 0.2 * e), (0.4, 0.4, 3.5), kind="column")
            for k in range(7)
            for sy in (-1, 1)
        ]
        roof = Obstacle((0.0, 0.0), (2 * e, 0.5 * e, 0.3), base=3.5, kind="roof")
        obstacles = columns + [roof]
    elif kind == "open_plaza":
        walkable = _rect(-e, -e, e, e)
        obstacles = [
            Obstacle((0.5 * e, -0.4 * e), (1.5, 1.5, 2.5), kind="kiosk"),
            Obstacle((-0.6 * e, 0.3 * e), (1.5, 1.5, 2.5), kind="kiosk"),
            Obstacle((0.1 * e, 0.7 * e), (1.5, 1.5, 2.5), kind="kiosk"),
        ]
    else:
        raise ConfigError(f"Unknown layout '{kind}' (expected one of {LAYOUT_KINDS})")
    return SceneLayout(kind=kind, extent=e, walkable=walkable, obstacles=tuple(obstacles))


# ============================================================================
# Crowd placement and motion
# ============================================================================


@dataclass
class Agent:
    """A pedestrian or cyclist with a constant-speed heading."""

    instance_id: str
    label: str
    position: np.ndarray
    velocity: np.ndarray
    size: tuple[float, float, float]

    @property
    def radius(self) -> float:
        """Cylinder radius of a pedestrian; circumscribed radius of a cyclist."""
        l, w, _ = self.size
        if self.label == "pedestrian":
            return (l + w) / 4.0
        return math.hypot(l, w) / 2.0

    @property
    def yaw(self) -> float:
        vx, vy = self.velocity
        return math.atan2(vy, vx) if (vx or vy) else 0.0

    def to_box(self, num_lidar_pts: int | None = None) -> Box3D:
        x, y = self.position
        return Box3D(
            center=(x, y, self.size[2] / 2.0),
            size=self.size,
            yaw=self.yaw,
            label=self.label,
            instance_id=self.instance_id,
            num_lidar_pts=num_lidar_pts,
        )


def _sample_size(rng: np.random.Generator, mean: Sequence[float], std: Sequence[float]) -> tuple:
    raw = rng.normal(mean, std)
    return tuple(float(v) for v in np.maximum(raw, 0.5 * np.asarray(mean)))


def _heading(rng: np.random.Generator, speed: float) -> np.ndarray:
    theta = rng.uniform(-math.pi, math.pi)
    return np.array([speed * math.cos(theta), speed * math.sin(theta)])


def _fits(layout: SceneLayout, xy: np.ndarray, radius: float, placed: list[Agent]) -> bool:
    if np.hypot(*xy) < SENSOR_EXCLUSION_RADIUS + radius:
        return False
    if not layout.admits(xy, clearance=radius)[0]:
        return False
    return all(np.hypot(*(xy - a.position)) >= radius + a.radius for a in placed)


def _uniform_point(layout: SceneLayout, rng: np.random.Generator) -> np.ndarray:
    x0, y0, x1, y1 = layout.free_space.bounds
    return np.array([rng.uniform(x0, x1), rng.uniform(y0, y1)])


def place_crowd(
    layout: SceneLayout, crowd: CrowdModel, rng: np.random.Generator, pedestrians: int | None = None
) -> list[Agent]:
    """Draw one frame's agents: clustered pedestrians, then uniform cyclists.

    Args:
        pedestrians: Exact pedestrian count; a Poisson draw around
            ``crowd.pedestrians_per_frame`` when None.

    Raises:
        GenerationError: If an agent cannot be placed within the retry budget.
    """
    if pedestrians is not None:
        if pedestrians < 0:
            raise ContractError(f"pedestrians must be >= 0, got {pedestrians}")
        n_ped = pedestrians
    elif crowd.pedestrians_per_frame > 0:
        n_ped = int(rng.poisson(crowd.pedestrians_per_frame))
    else:
        n_ped = 0
    n_cyc = int(rng.poisson(crowd.cyclists_per_frame)) if crowd.cyclists_per_frame > 0 else 0
    agents: list[Agent] = []
    if n_ped:
        parents = []
        for _ in range(crowd.cluster_count):
            for _ in range(MAX_PLACEMENT_RETRIES):
                p = _uniform_point(layout, rng)
                if layout.admits(p)[0]:
                    parents.append(p)
                    break
            else:
                raise GenerationError(f"Cannot place a cluster center in layout '{layout.kind}'")

        for k in range(n_ped):
            size = _sample_size(rng, crowd.size_mean, crowd.size_std)
            speed = float(np.clip(rng.normal(crowd.speed_mean, crowd.speed_std), 0.0, crowd.speed_max))
            agent = Agent(f"ped-{k:04d}", "pedestrian", np.zeros(2), _heading(rng, speed), size)
            for _ in range(MAX_PLACEMENT_RETRIES):
                parent = parents[int(rng.integers(len(parents)))]
                xy = parent + rng.normal(0.0, crowd.cluster_spread, 2)
                if _fits(layout, xy, agent.radius, agents):
                    agent.position = xy
                    break
            else:
                raise GenerationError(
                    f"Walkable area of '{layout.kind}' too small for {n_ped} pedestrians"
                )
            agents.append(agent)

    for k in range(n_cyc):
        velocity = _heading(rng, crowd.cyclist_speed)
        agent = Agent(f"cyc-{k:04d}", "cyclist", np.zeros(2), velocity, CYCLIST_SIZE)
        for _ in range(MAX_PLACEMENT_RETRIES):
            xy = _uniform_point(layout, rng)
            if _fits(layout, xy, agent.radius, agents):
                agent.position = xy
                break
        else:
            raise GenerationError(f"Cannot place cyclist in layout '{layout.kind}'")
        agents.append(agent)
    return agents


def plan_counts(means: Sequence[float], rng: np.random.Generator) -> list[int]:
    """Pedestrian count per scene, summing to ``round(sum(means))``.

    Counts start as Poisson draws, are rescaled to the target total and
    rounded by largest remainder. The realized mean over all scenes is then
    the target mean up to rounding, whatever the number of scenes.
    """
    means = np.asarray(means, dtype=np.float64)
    if means.size == 0:
        return []
    if np.any(means < 0):
        raise ContractError(f"Pedestrian means must be non-negative: {means.tolist()}")
    total = int(round(float(means.sum())))
    if total == 0:
        return [0] * means.size
    raw = rng.poisson(means).astype(np.float64)
    if raw.sum() == 0:
        raw = means.copy()
    exact = raw * (total / raw.sum())
    counts = np.floor(exact).astype(np.int64)
    order = np.argsort(-(exact - counts), kind="stable")
    counts[order[: total - int(counts.sum())]] += 1
    return [int(c) for c in counts]


def step_agents(agents: Sequence[Agent], layout: SceneLayout, dt: float = FRAME_DT) -> None:
    """Advance every agent by ``velocity * dt``; an agent leaving free space
    reverses its velocity and stays where it is for this frame."""
    for agent in agents:
        target = agent.position + agent.velocity * dt
        ok = np.hypot(*target) >= SENSOR_EXCLUSION_RADIUS + agent.radius and layout.admits(
            target, clearance=agent.radius
        )[0]
        if ok:
            agent.position = target
        else:
            agent.velocity = -agent.velocity


# ============================================================================
# Raycasting
# ============================================================================


@dataclass
class Surface:
    """One intersectable object of a frame.

    ``owner`` is the index of the agent that produced it, -1 for structure.
    """

    shape: str
    center: tuple[float, float]
    size: tuple[float, float, float]
    yaw: float = 0.0
    base: float = 0.0
    surface_class: str = "structure"
    velocity: tuple[float, float] = (0.0, 0.0)
    owner: int = -1


@dataclass
class SceneGeometry:
    surfaces: list[Surface] = field(default_factory=list)

    @classmethod
    def from_scene(cls, layout: SceneLayout | None, agents: Sequence[Agent] = ()) -> "SceneGeometry":
        surfaces = []
        if layout is not None:
            surfaces += [
                Surface("box", o.center, o.size, o.yaw, o.base) for o in layout.obstacles
            ]
        for idx, a in enumerate(agents):
            shape = "cylinder" if a.label == "pedestrian" else "box"
            surfaces.append(
                Surface(
                    shape,
                    (float(a.position[0]), float(a.position[1])),
                    a.size,
                    a.yaw,
                    0.0,
                    a.label,
                    (float(a.velocity[0]), float(a.velocity[1])),
                    idx,
                )
            )
        return cls(surfaces)


def _ray_box(origin: np.ndarray, dirs: np.ndarray, s: Surface) -> np.ndarray:
    c, sn = math.cos(s.yaw), math.sin(s.yaw)
    ox, oy = origin[0] - s.center[0], origin[1] - s.center[1]
    half = np.array(s.size) / 2.0
    local_o = (c * ox + sn * oy, -sn * ox + c * oy, origin[2] - (s.base + half[2]))
    local_d = (
        c * dirs[:, 0] + sn * dirs[:, 1],
        -sn * dirs[:, 0] + c * dirs[:, 1],
        dirs[:, 2],
    )
    t_near = np.full(len(dirs), -np.inf)
    t_far = np.full(len(dirs), np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        for p, d, h in zip(local_o, local_d, half):
            t1 = (-h - p) / d
            t2 = (h - p) / d
            lo, hi = np.minimum(t1, t2), np.maximum(t1, t2)
            parallel = d == 0
            inside = abs(p) <= h
            lo = np.where(parallel, -np.inf if inside else np.inf, lo)
            hi = np.where(parallel, np.inf if inside else -np.inf, hi)
            t_near = np.maximum(t_near, lo)
            t_far = np.minimum(t_far, hi)
    hit = (t_far >= t_near) & (t_near > 0)
    return np.where(hit, t_near, np.inf)


def _ray_cylinder(origin: np.ndarray, dirs: np.ndarray, s: Surface) -> np.ndarray:
    radius = (s.size[0] + s.size[1]) / 4.0
    height = s.size[2]
    ox, oy, oz = origin[0] - s.center[0], origin[1] - s.center[1], origin[2]
    dx, dy, dz = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    a = dx * dx + dy * dy
    b = 2.0 * (ox * dx + oy * dy)
    c = ox * ox + oy * oy - radius * radius
    disc = b * b - 4.0 * a * c
    with np.errstate(divide="ignore", invalid="ignore"):
        t_side = (-b - np.sqrt(np.maximum(disc, 0.0))) / (2.0 * a)
        z = oz + t_side * dz
        side = (disc >= 0) & (a > 0) & (t_side > 0) & (z >= 0) & (z <= height)
        t = np.where(side, t_side, np.inf)
        t_cap = (height - oz) / dz
        px, py = ox + t_cap * dx, oy + t_cap * dy
        cap = (dz < 0) & (t_cap > 0) & (px * px + py * py <= radius * radius)
    return np.minimum(t, np.where(cap, t_cap, np.inf))


@dataclass
class RaycastResult:
    """A frame's returns and which surface produced each one.

    Attributes:
        cloud: Points (x, y, z, intensity).
        velocities: [N, 2] velocity of the surface each point hit.
        owners: [N] agent index per point, -1 for structure.
    """

    cloud: PointCloud
    velocities: np.ndarray
    owners: np.ndarray

    def points_per_owner(self, n_agents: int) -> np.ndarray:
        counts = np.bincount(self.owners[self.owners >= 0], minlength=n_agents)
        return counts[:n_agents]


def raycast_with_labels(
    geometry: SceneGeometry,
    lidar: LidarModel,
    rng: np.random.Generator | None = None,
) -> RaycastResult:
    """Nearest hit per ray within max range, with optional Gaussian range noise."""
    dirs = lidar.directions()
    origin = lidar.origin
    best = np.full(len(dirs), np.inf)
    which = np.full(len(dirs), -1, dtype=np.int64)
    for idx, surface in enumerate(geometry.surfaces):
        cast = _ray_box if surface.shape == "box" else _ray_cylinder
        t = cast(origin, dirs, surface)
        closer = t < best
        best[closer] = t[closer]
        which[closer] = idx

    hit = best <= lidar.max_range
    ranges = best[hit]
    if rng is not None and lidar.range_noise > 0 and ranges.size:
        ranges = ranges + rng.normal(0.0, lidar.range_noise, ranges.size)
    xyz = origin + ranges[:, None] * dirs[hit]

    surfaces = geometry.surfaces
    idx = which[hit]
    intensity = np.array([SURFACE_INTENSITY[s.surface_class] for s in surfaces] or [0.0])[idx]
    velocities = np.array([s.velocity for s in surfaces] or [(0.0, 0.0)], dtype=np.float64)[idx]
    owners = np.array([s.owner for s in surfaces] or [-1], dtype=np.int64)[idx]
    cloud = PointCloud(np.hstack([xyz.reshape(-1, 3), intensity.reshape(-1, 1)]))
    return RaycastResult(cloud=cloud, velocities=velocities, owners=owners)


def raycast(geometry: SceneGeometry, lidar: LidarModel, rng: np.random.Generator | None = None) -> PointCloud:
    return raycast_with_labels(geometry, lidar, rng).cloud


# ============================================================================
# Scene generation
# ============================================================================


@dataclass
class SceneFrame:
    cloud: PointCloud
    velocities: np.ndarray
    annotations: list[Box3D]


@dataclass
class GeneratedScene:
    name: str
    layout_kind: str
    frames: list[SceneFrame]


def generate_scene(
    layout: SceneLayout,
    crowd: CrowdModel,
    lidar: LidarModel,
    frames: int = FRAMES_PER_SCENE,
    rng_seed: int | Sequence[int] = 0,
    dt: float = FRAME_DT,
    speed_noise_std: float = 0.0,
    start_timestamp: int = 0,
    pedestrians: int | None = None,
) -> list[SceneFrame]:
    """Simulate ``frames`` keyframes of one scene.

    Instance ids stay fixed across frames. Annotations with no LiDAR
    returns are kept with ``num_lidar_pts == 0``. ``pedestrians`` fixes the
    crowd size (see ``place_crowd``).

    Raises:
        ContractError: If ``frames`` < 1.
        GenerationError: If placement fails.
    """
    if frames < 1:
        raise ContractError(f"frames must be >= 1, got {frames}")
    rng = np.random.default_rng(rng_seed)
    agents = place_crowd(layout, crowd, rng, pedestrians)
    out: list[SceneFrame] = []
    for f in range(frames):
        if f:
            step_agents(agents, layout, dt)
        result = raycast_with_labels(SceneGeometry.from_scene(layout, agents), lidar, rng)
        counts = result.points_per_owner(len(agents))
        velocities = result.velocities
        if speed_noise_std > 0 and velocities.size:
            velocities = velocities + rng.normal(0.0, speed_noise_std, velocities.shape)
        timestamp = start_timestamp + int(round(f * dt * 1e6))
        cloud = PointCloud(result.cloud.points, timestamp=timestamp)
        boxes = [a.to_box(int(counts[i])) for i, a in enumerate(agents)]
        out.append(SceneFrame(cloud=cloud, velocities=velocities, annotations=boxes))
    return out


@dataclass(frozen=True)
class SynthRequest:
    """Everything needed to generate a set of scenes reproducibly."""

    scenes: int
    frames: int = FRAMES_PER_SCENE
    seed: int = 0
    layout: str | None = None
    extent: float = DEFAULT_EXTENT
    crowd: CrowdModel = field(default_factory=CrowdModel)
    crowd_by_layout: tuple[tuple[str, CrowdModel], ...] = ()
    lidar: LidarModel = field(default_factory=LidarModel)
    speed_noise_std: float = 0.0

    def layout_for(self, index: int) -> str:
        return self.layout or LAYOUT_KINDS[index % len(LAYOUT_KINDS)]

    def crowd_for(self, kind: str) -> CrowdModel:
        return dict(self.crowd_by_layout).get(kind, self.crowd)

    def pedestrian_counts(self) -> list[int]:
        """Crowd size of every scene; their mean is the requested mean."""
        means = [self.crowd_for(self.layout_for(i)).pedestrians_per_frame for i in range(self.scenes)]
        return plan_counts(means, np.random.default_rng([self.seed, COUNT_STREAM]))


def _generate_one(request: SynthRequest, index: int) -> GeneratedScene:
    kind = request.layout_for(index)
    with run_span("synth.scene", scene_index=index, layout=kind):
        frames = generate_scene(
            make_layout(kind, request.extent),
            request.crowd_for(kind),
            request.lidar,
            request.frames,
            rng_seed=[request.seed, index],
            speed_noise_std=request.speed_noise_std,
            start_timestamp=(index + 1) * 3_600_000_000,
            pedestrians=request.pedestrian_counts()[index],
        )
    logger.info("Generated scene %d (%s, %d frames)", index, kind, len(frames))
    return GeneratedScene(name=f"scene-{index:04d}", layout_kind=kind, frames=frames)


def generate_scenes(request: SynthRequest, workers: int = 1) -> list[GeneratedScene]:
    """Generate ``request.scenes`` scenes; output does not depend on ``workers``.

    Raises:
        ContractError: If no scenes are requested.
    """
    if request.scenes < 1:
        raise ContractError("no scenes requested")
    indices = range(request.scenes)
    if workers <= 1:
        return [_generate_one(request, i) for i in indices]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_generate_one, itertools.repeat(request), indices))


# ============================================================================
# Calibration
# ============================================================================


def measure_crowd(
    layout: SceneLayout,
    crowd: CrowdModel,
    frames: int = FRAMES_PER_SCENE,
    rng_seed: int = 0,
    scene_frames: int = 1,
    dt: float = FRAME_DT,
) -> DensityStats:
    """Density statistics of ``frames`` frames simulated like generated scenes.

    Frames come in scenes of ``scene_frames``: one placement, sized by
    ``plan_counts``, then walking steps. ``scene_frames=1`` measures
    independent placements.

    Raises:
        ContractError: If ``frames`` or ``scene_frames`` < 1.
    """
    if frames < 1 or scene_frames < 1:
        raise ContractError(f"frames and scene_frames must be >= 1, got {frames}, {scene_frames}")
    rng = np.random.default_rng(rng_seed)
    n_scenes = math.ceil(frames / scene_frames)
    counts = plan_counts([crowd.pedestrians_per_frame] * n_scenes, rng)
    positions = []
    for count in counts:
        agents = place_crowd(layout, crowd, rng, count)
        for f in range(min(scene_frames, frames - len(positions))):
            if f:
                step_agents(agents, layout, dt)
            positions.append(
                np.array([a.position for a in agents if a.label == "pedestrian"]).reshape(-1, 2)
            )
    return density_stats_from_positions(positions)


def _calibration_score(
    stats: DensityStats, target: DensityStats, tolerance: float, pedes_tolerance: float
) -> float:
    """Worst error relative to its tolerance; <= 1 means all targets are met."""

    def rel(got: float, want: float) -> float:
        return abs(got - want) / want if want > 0 else abs(got)

    return max(
        rel(stats.pedes_per_frame, target.pedes_per_frame) / pedes_tolerance,
        rel(stats.density_2, target.density_2) / tolerance,
        rel(stats.density_5, target.density_5) / tolerance,
        rel(stats.density_10, target.density_10) / tolerance,
    )


def calibrate_crowd(
    target: DensityStats,
    layout: SceneLayout,
    tolerance: float = 0.2,
    rng_seed: int = 0,
    pedes_tolerance: float = 0.1,
    base: CrowdModel | None = None,
    max_candidates: int = 100,
    frames: int = CALIBRATION_FRAMES,
    scene_frames: int = CALIBRATION_SCENE_FRAMES,
) -> CrowdModel:
    """Search cluster count and spread until the crowd matches ``target``.

    The pedestrian mean is pinned to the target; a coarse grid over cluster
    count and spread is followed by local refinement around the best
    candidate. Every candidate is measured with the same seed on walking
    scenes of ``scene_frames`` frames (see ``measure_crowd``). The search
    stops early once a candidate is within ``CALIBRATION_MARGIN`` of the
    tolerance; otherwise the best candidate within tolerance is returned.

    Raises:
        ContractError: If a target is negative.
        CalibrationError: If no candidate within ``max_candidates`` is within
            tolerance; carries the best stats and model.
    """
    base = base or CrowdModel()
    values = (target.pedes_per_frame, target.density_2, target.density_5, target.density_10)
    if min(values) < 0:
        raise ContractError(f"Calibration targets must be non-negative: {values}")
    if target.pedes_per_frame == 0:
        return replace(base, pedestrians_per_frame=0.0)

    tried: dict[tuple[int, float], float] = {}
    best: tuple[float, CrowdModel | None, DensityStats | None] = (math.inf, None, None)

    def attempt(count: int, spread: float) -> bool:
        nonlocal best
        key = (count, round(spread, 4))
        if key in tried or len(tried) >= max_candidates:
            return False
        model = replace(
            base,
            pedestrians_per_frame=target.pedes_per_frame,
            cluster_count=count,
            cluster_spread=spread,
        )
        try:
            stats = measure_crowd(layout, model, frames, rng_seed, scene_frames)
        except GenerationError as e:
            logger.debug("Candidate k=%d spread=%.2f unplaceable: %s", count, spread, e)
            tried[key] = math.inf
            return False
        score = _calibration_score(stats, target, tolerance, pedes_tolerance)
        tried[key] = score
        if score < best[0]:
            best = (score, model, stats)
        logger.debug("Candidate k=%d spread=%.2f score=%.3f", count, spread, score)
        return score <= CALIBRATION_MARGIN

    with run_span("synth.calibrate", layout=layout.kind) as span:
        for count, spread in itertools.product(CALIBRATION_COUNTS, CALIBRATION_SPREADS):
            if attempt(count, spread):
                break
        while best[0] > CALIBRATION_MARGIN and best[1] is not None and len(tried) < max_candidates:
            k0, s0 = best[1].cluster_count, best[1].cluster_spread
            neighbours = [
                (k, s0 * f)
                for k in (k0 - 1, k0, k0 + 1)
                for f in (0.7, 0.85, 1.0, 1.15, 1.3)
                if k >= 1 and (k, round(s0 * f, 4)) not in tried
            ]
            if not neighbours or any(attempt(k, s) for k, s in neighbours):
                break
            if best[1].cluster_count == k0 and best[1].cluster_spread == s0:
                break
        set_attributes(span, candidates=len(tried), best_score=best[0])

    score, model, stats = best
    if model is None or score > 1.0:
        raise CalibrationError(
            f"Calibration on '{layout.kind}' did not reach tolerance after {len(tried)} candidates "
            f"(best: {stats})",
            best_stats=stats,
            best_model=model,
        )
    logger.info(
        "Calibrated '%s': k=%d spread=%.2f after %d candidates",
        layout.kind,
        model.cluster_count,
        model.cluster_spread,
        len(tried),
    )
    return model
