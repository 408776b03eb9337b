"""nuScenes-style relational tables: build, write, load, validate, split.

On disk::

    <root>/v1.0/<table>.json           one JSON list per table, sorted by token
    <root>/samples/LIDAR_TOP/*.bin     float32 x, y, z, intensity per point
    <root>/samples/LIDAR_TOP/*.vel.bin float32 vx, vy per point
    <root>/splits/split.json           train / val / test scene tokens

Empty links (``prev``/``next`` at chain ends) are stored as "".
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Iterator, Mapping, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DatasetIOError, DatasetValidationError
from .head import Box3D, wrap_angle
from .pillars import PointCloud, read_point_cloud, write_point_cloud

if TYPE_CHECKING:
    from .synth import GeneratedScene

logger = logging.getLogger(__name__)

VERSION_DIR = "v1.0"
LIDAR_CHANNEL = "LIDAR_TOP"
CATEGORIES = ("pedestrian", "cyclist")
SPLIT_NAMES = ("train", "val", "test", "all")


# ============================================================================
# Records
# ============================================================================


@dataclass
class Category:
    token: str
    name: str
    description: str = ""


@dataclass
class Sensor:
    token: str
    channel: str
    modality: str = "lidar"


@dataclass
class CalibratedSensor:
    token: str
    sensor_token: str
    translation: list[float] = field(default_factory=lambda: [0.0, 0.0, 0.0])
    rotation: list[float] = field(default_factory=lambda: [1.0, 0.0, 0.0, 0.0])


@dataclass
class EgoPose:
    token: str
    timestamp: int
    translation: list[float] = field(default_factory=lambda: [0.0, 0.0, 0.0])
    rotation: list[float] = field(default_factory=lambda: [1.0, 0.0, 0.0, 0.0])


@dataclass
class Scene:
    """``description`` holds the layout kind."""

    token: str
    name: str
    description: str
    nbr_samples: int
    first_sample_token: str
    last_sample_token: str


@dataclass
class Sample:
    token: str
    scene_token: str
    timestamp: int
    prev: str = ""
    next: str = ""


@dataclass
class SampleData:
    token: str
    sample_token: str
    ego_pose_token: str
    calibrated_sensor_token: str
    filename: str
    timestamp: int
    channel: str = LIDAR_CHANNEL
    fileformat: str = "bin"
    is_key_frame: bool = True
    prev: str = ""
    next: str = ""


@dataclass
class SampleAnnotation:
    """``size`` is (w, l, h) and ``rotation`` a (w, x, y, z) quaternion, as in nuScenes."""

    token: str
    sample_token: str
    instance_token: str
    translation: list[float]
    size: list[float]
    rotation: list[float]
    num_lidar_pts: int
    prev: str = ""
    next: str = ""

    def to_box(self, label: str) -> Box3D:
        w, l, h = self.size
        return Box3D(
            center=tuple(self.translation),
            size=(l, w, h),
            yaw=yaw_from_quaternion(self.rotation),
            label=label,
            instance_id=self.instance_token,
            num_lidar_pts=self.num_lidar_pts,
        )


@dataclass
class Instance:
    token: str
    category_token: str
    nbr_annotations: int
    first_annotation_token: str
    last_annotation_token: str


RECORD_TYPES = {
    "category": Category,
    "sensor": Sensor,
    "calibrated_sensor": CalibratedSensor,
    "ego_pose": EgoPose,
    "scene": Scene,
    "sample": Sample,
    "sample_data": SampleData,
    "instance": Instance,
    "sample_annotation": SampleAnnotation,
}


def quaternion_from_yaw(yaw: float) -> list[float]:
    return [math.cos(yaw / 2.0), 0.0, 0.0, math.sin(yaw / 2.0)]


def yaw_from_quaternion(q: Sequence[float]) -> float:
    return wrap_angle(2.0 * math.atan2(q[3], q[0]))


def make_token(seed: int, table: str, index: int) -> str:
    """32 hex characters, deterministic in (seed, table, index)."""
    return hashlib.md5(f"{seed}:{table}:{index}".encode()).hexdigest()


@dataclass
class DatasetTables:
    """All tables of one dataset; each attribute is a list of records."""

    category: list[Category] = field(default_factory=list)
    sensor: list[Sensor] = field(default_factory=list)
    calibrated_sensor: list[CalibratedSensor] = field(default_factory=list)
    ego_pose: list[EgoPose] = field(default_factory=list)
    scene: list[Scene] = field(default_factory=list)
    sample: list[Sample] = field(default_factory=list)
    sample_data: list[SampleData] = field(default_factory=list)
    instance: list[Instance] = field(default_factory=list)
    sample_annotation: list[SampleAnnotation] = field(default_factory=list)

    def table(self, name: str) -> list:
        if name not in RECORD_TYPES:
            raise ContractError(f"Unknown table '{name}'")
        return getattr(self, name)

    def sort(self) -> "DatasetTables":
        for name in RECORD_TYPES:
            self.table(name).sort(key=lambda r: r.token)
        return self

    @property
    def sample_index(self) -> dict[str, Sample]:
        return {s.token: s for s in self.sample}

    @property
    def scene_index(self) -> dict[str, Scene]:
        return {s.token: s for s in self.scene}

    def scene_samples(self, scene_token: str) -> list[Sample]:
        """Samples of a scene in chain order."""
        index = self.sample_index
        out: list[Sample] = []
        seen: set[str] = set()
        token = self.scene_index[scene_token].first_sample_token
        while token and token in index and token not in seen:
            seen.add(token)
            out.append(index[token])
            token = index[token].next
        return out

    def sample_data_for(self, sample_token: str) -> SampleData:
        for sd in self.sample_data:
            if sd.sample_token == sample_token and sd.channel == LIDAR_CHANNEL:
                return sd
        raise ContractError(f"No {LIDAR_CHANNEL} sample_data for sample {sample_token}")

    def ground_truth(
        self,
        sample_tokens: Iterable[str],
        categories: Sequence[str] = ("pedestrian",),
        include_empty: bool = False,
    ) -> dict[str, list[Box3D]]:
        """Annotation boxes per sample, filtered by category and LiDAR support."""
        names = {c.token: c.name for c in self.category}
        label_of = {i.token: names.get(i.category_token, "") for i in self.instance}
        by_sample: dict[str, list[Box3D]] = defaultdict(list)
        for ann in self.sample_annotation:
            label = label_of.get(ann.instance_token, "")
            if label not in categories or (ann.num_lidar_pts == 0 and not include_empty):
                continue
            by_sample[ann.sample_token].append(ann.to_box(label))
        return {t: by_sample.get(t, []) for t in sample_tokens}


# ============================================================================
# Building from generated scenes
# ============================================================================

DatasetPayloads = dict[str, tuple[PointCloud, np.ndarray]]


def build_tables(
    scenes: Sequence["GeneratedScene"], seed: int = 0, sensor_height: float = 2.0
) -> tuple[DatasetTables, DatasetPayloads]:
    """Tables plus point-cloud payloads (keyed by relative filename)."""
    counters: Counter[str] = Counter()

    def token(table: str) -> str:
        t = make_token(seed, table, counters[table])
        counters[table] += 1
        return t

    tables = DatasetTables()
    payloads: DatasetPayloads = {}
    cat_tokens = {}
    for name in CATEGORIES:
        cat_tokens[name] = token("category")
        tables.category.append(Category(cat_tokens[name], name, f"{name} (synthetic)"))
    sensor = Sensor(token("sensor"), LIDAR_CHANNEL)
    calib = CalibratedSensor(token("calibrated_sensor"), sensor.token, [0.0, 0.0, sensor_height])
    tables.sensor.append(sensor)
    tables.calibrated_sensor.append(calib)

    for gen in scenes:
        scene_token = token("scene")
        samples: list[Sample] = []
        datas: list[SampleData] = []
        tracks: dict[str, list[SampleAnnotation]] = {}
        labels: dict[str, str] = {}
        for frame in gen.frames:
            ts = frame.cloud.timestamp
            sample = Sample(token("sample"), scene_token, ts)
            pose = EgoPose(token("ego_pose"), ts)
            sd_token = token("sample_data")
            filename = f"samples/{LIDAR_CHANNEL}/{gen.name}__{LIDAR_CHANNEL}__{ts}.bin"
            datas.append(SampleData(sd_token, sample.token, pose.token, calib.token, filename, ts))
            payloads[filename] = (
                PointCloud(frame.cloud.points, frame_id=sd_token, timestamp=ts),
                frame.velocities,
            )
            tables.ego_pose.append(pose)
            samples.append(sample)
            for box in frame.annotations:
                l, w, h = box.size
                ann = SampleAnnotation(
                    token=token("sample_annotation"),
                    sample_token=sample.token,
                    instance_token="",
                    translation=list(box.center),
                    size=[w, l, h],
                    rotation=quaternion_from_yaw(box.yaw),
                    num_lidar_pts=int(box.num_lidar_pts or 0),
                )
                tracks.setdefault(box.instance_id or "", []).append(ann)
                labels[box.instance_id or ""] = box.label

        _link(samples)
        _link(datas)
        for local_id in sorted(tracks):
            anns = tracks[local_id]
            inst_token = token("instance")
            for ann in anns:
                ann.instance_token = inst_token
            _link(anns)
            tables.instance.append(
                Instance(inst_token, cat_tokens[labels[local_id]], len(anns), anns[0].token, anns[-1].token)
            )
            tables.sample_annotation.extend(anns)
        tables.scene.append(
            Scene(
                scene_token,
                gen.name,
                gen.layout_kind,
                len(samples),
                samples[0].token if samples else "",
                samples[-1].token if samples else "",
            )
        )
        tables.sample.extend(samples)
        tables.sample_data.extend(datas)
    return tables.sort(), payloads


def _link(chain: Sequence) -> None:
    for a, b in zip(chain, chain[1:]):
        a.next = b.token
        b.prev = a.token


# ============================================================================
# Validation
# ============================================================================


@dataclass(frozen=True)
class Violation:
    table: str
    token: str
    rule: str
    detail: str = ""

    def __str__(self) -> str:
        return f"{self.table}:{self.token}: {self.rule}" + (f" ({self.detail})" if self.detail else "")


def validate(tables: DatasetTables) -> list[Violation]:
    """Every broken invariant; empty iff the tables are consistent.

    Rules: duplicate_token, dangling_reference, broken_next, broken_prev,
    scene_chain, annotation_count, timestamp_order, missing_lidar.
    """
    out: list[Violation] = []
    index: dict[str, dict[str, object]] = {}
    for name in RECORD_TYPES:
        records = tables.table(name)
        counts = Counter(r.token for r in records)
        out += [Violation(name, t, "duplicate_token") for t, n in sorted(counts.items()) if n > 1]
        index[name] = {r.token: r for r in records}

    def ref(table: str, token: str, target: str, value: str, optional: bool = False) -> None:
        if optional and not value:
            return
        if value not in index[target]:
            out.append(Violation(table, token, "dangling_reference", f"{target} {value or '<empty>'}"))

    for s in tables.calibrated_sensor:
        ref("calibrated_sensor", s.token, "sensor", s.sensor_token)
    for s in tables.scene:
        ref("scene", s.token, "sample", s.first_sample_token, optional=s.nbr_samples == 0)
        ref("scene", s.token, "sample", s.last_sample_token, optional=s.nbr_samples == 0)
    for s in tables.sample:
        ref("sample", s.token, "scene", s.scene_token)
    for d in tables.sample_data:
        ref("sample_data", d.token, "sample", d.sample_token)
        ref("sample_data", d.token, "ego_pose", d.ego_pose_token)
        ref("sample_data", d.token, "calibrated_sensor", d.calibrated_sensor_token)
    for i in tables.instance:
        ref("instance", i.token, "category", i.category_token)
        ref("instance", i.token, "sample_annotation", i.first_annotation_token)
        ref("instance", i.token, "sample_annotation", i.last_annotation_token)
    for a in tables.sample_annotation:
        ref("sample_annotation", a.token, "sample", a.sample_token)
        ref("sample_annotation", a.token, "instance", a.instance_token)

    lidar_samples = {d.sample_token for d in tables.sample_data if d.channel == LIDAR_CHANNEL}
    for s in tables.sample:
        if s.token not in lidar_samples:
            out.append(Violation("sample", s.token, "missing_lidar"))

    for name in ("sample", "sample_data", "sample_annotation"):
        recs = index[name]
        for r in tables.table(name):
            if r.next and (r.next not in recs or recs[r.next].prev != r.token):
                out.append(Violation(name, r.token, "broken_next", r.next))
            if r.prev and (r.prev not in recs or recs[r.prev].next != r.token):
                out.append(Violation(name, r.token, "broken_prev", r.prev))

    samples = index["sample"]
    for scene in tables.scene:
        chain: list[Sample] = []
        seen: set[str] = set()
        tok = scene.first_sample_token
        while tok and tok in samples and tok not in seen:
            seen.add(tok)
            chain.append(samples[tok])
            tok = samples[tok].next
        if len(chain) != scene.nbr_samples or (chain and chain[-1].token != scene.last_sample_token):
            out.append(
                Violation("scene", scene.token, "scene_chain", f"{len(chain)} of {scene.nbr_samples} samples")
            )
        for a, b in zip(chain, chain[1:]):
            if b.timestamp <= a.timestamp:
                out.append(Violation("sample", b.token, "timestamp_order", f"{b.timestamp} <= {a.timestamp}"))

    per_instance = Counter(a.instance_token for a in tables.sample_annotation)
    for inst in tables.instance:
        if per_instance[inst.token] != inst.nbr_annotations:
            out.append(
                Violation(
                    "instance",
                    inst.token,
                    "annotation_count",
                    f"{inst.nbr_annotations} declared, {per_instance[inst.token]} found",
                )
            )
    return out


def require_valid(tables: DatasetTables) -> None:
    violations = validate(tables)
    if violations:
        raise DatasetValidationError(
            f"Dataset has {len(violations)} violation(s); first: {violations[0]}", violations
        )


# ============================================================================
# Files
# ============================================================================


def _dump_table(records: Sequence) -> str:
    rows = [asdict(r) for r in sorted(records, key=lambda r: r.token)]
    return json.dumps(rows, indent=2, sort_keys=True) + "\n"


def write_dataset(
    tables: DatasetTables,
    root: str | Path,
    payloads: Mapping[str, tuple[PointCloud, np.ndarray]] | None = None,
) -> Path:
    """Write every table (and any payloads) under ``root``.

    Raises:
        DatasetValidationError: If the tables are inconsistent.
        DatasetIOError: On any file-system failure.
    """
    require_valid(tables)
    root = Path(root)
    table_dir = root / VERSION_DIR
    try:
        table_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DatasetIOError(f"Cannot create dataset directory: {e}", table_dir) from e
    for name in RECORD_TYPES:
        path = table_dir / f"{name}.json"
        try:
            path.write_text(_dump_table(tables.table(name)))
        except OSError as e:
            raise DatasetIOError(f"Cannot write table: {e}", path) from e
    for filename, (cloud, velocities) in sorted((payloads or {}).items()):
        write_point_cloud(root / filename, cloud, velocities)
    logger.info("Wrote dataset with %d scenes to %s", len(tables.scene), root)
    return root


def load_dataset(root: str | Path) -> DatasetTables:
    """Read the tables under ``root``; does not validate them."""
    root = Path(root)
    tables = DatasetTables()
    for name, record_type in RECORD_TYPES.items():
        path = root / VERSION_DIR / f"{name}.json"
        try:
            rows = json.loads(path.read_text())
        except OSError as e:
            raise DatasetIOError(f"Cannot read table: {e}", path) from e
        except json.JSONDecodeError as e:
            raise DatasetIOError(f"Table is not valid JSON: {e}", path) from e
        known = {f.name for f in fields(record_type)}
        try:
            records = [record_type(**{k: v for k, v in row.items() if k in known}) for row in rows]
        except TypeError as e:
            raise DatasetIOError(f"Malformed record: {e}", path) from e
        setattr(tables, name, records)
    return tables


def load_point_cloud(root: str | Path, sample_data: SampleData, with_velocity: bool = False) -> PointCloud:
    return read_point_cloud(
        Path(root) / sample_data.filename,
        frame_id=sample_data.token,
        timestamp=sample_data.timestamp,
        with_velocity=with_velocity,
    )


@dataclass
class LabeledFrame:
    sample_token: str
    cloud: PointCloud
    annotations: list[Box3D]


def iter_frames(
    tables: DatasetTables,
    root: str | Path,
    scene_tokens: Iterable[str],
    with_velocity: bool = False,
    categories: Sequence[str] = CATEGORIES,
) -> Iterator[LabeledFrame]:
    """Frames of the given scenes in scene-token then chain order.

    Annotations include boxes without LiDAR points; callers filter on
    ``Box3D.visible``.
    """
    data_by_sample = {d.sample_token: d for d in tables.sample_data if d.channel == LIDAR_CHANNEL}
    for scene_token in sorted(scene_tokens):
        samples = tables.scene_samples(scene_token)
        gts = tables.ground_truth([s.token for s in samples], categories, include_empty=True)
        for s in samples:
            if s.token not in data_by_sample:
                raise DatasetValidationError(f"Sample {s.token} has no {LIDAR_CHANNEL} sample_data")
            cloud = load_point_cloud(root, data_by_sample[s.token], with_velocity)
            yield LabeledFrame(s.token, cloud, gts[s.token])


# ============================================================================
# Splits
# ============================================================================


@dataclass
class SceneSplit:
    """Disjoint scene-token sets plus any warnings raised while splitting."""

    train: list[str]
    val: list[str]
    test: list[str]
    seed: int = 0
    ratios: tuple[float, float, float] = (0.70, 0.15, 0.15)
    warnings: list[str] = field(default_factory=list)

    def scenes(self, name: str) -> list[str]:
        if name == "all":
            return sorted(self.train + self.val + self.test)
        if name not in SPLIT_NAMES:
            raise ConfigError(f"Unknown split '{name}' (expected one of {SPLIT_NAMES})")
        return list(getattr(self, name))


def split_scenes(
    tables: DatasetTables,
    ratios: tuple[float, float, float] = (0.70, 0.15, 0.15),
    rng_seed: int = 0,
    stratify_by_layout: bool = True,
) -> SceneSplit:
    """Split scenes into train/val/test.

    Val and test sizes are round(ratio * n); train takes the rest. With
    stratification, scenes are shuffled within each layout and dealt
    round-robin across layouts; val and test take consecutive positions of
    that sequence, so each covers min(size, #layouts) distinct layouts.
    """
    if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"Split ratios must be three non-negative values summing to 1, got {ratios}")
    rng = np.random.default_rng(rng_seed)
    scenes = sorted(tables.scene, key=lambda s: s.token)
    n = len(scenes)
    n_val = int(round(ratios[1] * n))
    n_test = int(round(ratios[2] * n))
    warnings: list[str] = []

    if stratify_by_layout and (n_val == 0 or n_test == 0):
        msg = f"Too few scenes ({n}) for layout stratification; using an unstratified split"
        logger.warning(msg)
        warnings.append(msg)
        stratify_by_layout = False

    if stratify_by_layout:
        groups: dict[str, list[str]] = defaultdict(list)
        for s in scenes:
            groups[s.description].append(s.token)
        queues = []
        for kind in sorted(groups):
            members = list(groups[kind])
            rng.shuffle(members)
            queues.append(members)
        order: list[str] = []
        while any(queues):
            for q in queues:
                if q:
                    order.append(q.pop(0))
    else:
        order = [s.token for s in scenes]
        rng.shuffle(order)

    val = order[:n_val]
    test = order[n_val : n_val + n_test]
    train = order[n_val + n_test :]
    return SceneSplit(sorted(train), sorted(val), sorted(test), rng_seed, tuple(ratios), warnings)


def split_path(root: str | Path) -> Path:
    return Path(root) / "splits" / "split.json"


def write_split(root: str | Path, split: SceneSplit) -> Path:
    path = split_path(root)
    payload = {
        "seed": split.seed,
        "ratios": list(split.ratios),
        "train": split.train,
        "val": split.val,
        "test": split.test,
        "warnings": split.warnings,
    }
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    except OSError as e:
        raise DatasetIOError(f"Cannot write split manifest: {e}", path) from e
    return path


def load_split(root: str | Path) -> SceneSplit:
    path = split_path(root)
    try:
        payload = json.loads(path.read_text())
    except OSError as e:
        raise DatasetIOError(f"Cannot read split manifest: {e}", path) from e
    except json.JSONDecodeError as e:
        raise DatasetIOError(f"Split manifest is not valid JSON: {e}", path) from e
    return SceneSplit(
        train=payload["train"],
        val=payload["val"],
        test=payload["test"],
        seed=payload.get("seed", 0),
        ratios=tuple(payload.get("ratios", (0.70, 0.15, 0.15))),
        warnings=payload.get("warnings", []),
    )
