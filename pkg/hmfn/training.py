"""Training recipe, checkpoints and inference.

Optimization is AdamW with global-norm gradient clipping under a one-cycle
learning-rate schedule. The loop is single-threaded; only frame
pillarization may fan out to worker processes.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import numerics as nx
from .checkpoint import read_tensors, write_tensors
from .config import RunConfig, config_hash, save_config
from .dataset import (
    DatasetTables,
    LabeledFrame,
    iter_frames,
    load_dataset,
    load_split,
    require_valid,
    split_path,
    split_scenes,
)
from .errors import CheckpointError, ContractError, DatasetIOError
from .evaluation import EvalReport, evaluate, write_results
from .head import Box3D, HeadTargets, build_targets, decode, detection_loss
from .model import HMFN, build_model, state_arrays
from .numerics import Tensor, precision
from .pillars import PillarGridSpec, PillarizedScene, PointCloud, assign_pillars
from .tracing import run_span, set_attributes

logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

WARMUP_FRACTION = 0.4
WARMUP_DIVISOR = 10.0
FINAL_DIVISOR = 1000.0

WEIGHTS_NAME = "weights.hmfn"
CHECKPOINT_META_NAME = "checkpoint.json"
METRICS_NAME = "metrics.jsonl"
BEST_DIR = "best"
LAST_DIR = "last"
NO_VALIDATION = "none"


# ============================================================================
# Optimizer and schedule
# ============================================================================


@dataclass
class AdamState:
    """First and second moments per parameter name plus the update count."""

    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: Mapping[str, Tensor]) -> "AdamState":
        return cls(
            step=0,
            m={n: np.zeros_like(p.data) for n, p in params.items()},
            v={n: np.zeros_like(p.data) for n, p in params.items()},
        )


@dataclass
class StepStats:
    grad_norm: float
    clip_scale: float
    skipped: bool


def global_grad_norm(grads: Mapping[str, np.ndarray]) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.square(g, dtype=np.float64)))
    return math.sqrt(total)


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    weight_decay: float = 0.01,
    clip_norm: float = 10.0,
) -> StepStats:
    """One AdamW update in place.

    Gradients are rescaled so their global L2 norm is at most ``clip_norm``;
    weight decay is applied to the parameters directly, not through the
    moments. A non-finite gradient skips the update and leaves the state
    untouched.

    Raises:
        ContractError: If ``state`` lacks moments for a parameter.
    """
    norm = global_grad_norm(grads)
    if not math.isfinite(norm):
        logger.warning("Skipping optimizer step %d: non-finite gradient norm", state.step + 1)
        return StepStats(grad_norm=norm, clip_scale=0.0, skipped=True)
    scale = min(1.0, clip_norm / norm) if norm > 0 else 1.0

    state.step += 1
    t = state.step
    bias1 = 1.0 - ADAM_BETA1**t
    bias2 = 1.0 - ADAM_BETA2**t
    for name, p in params.items():
        if name not in state.m:
            raise ContractError(f"Optimizer state has no moments for '{name}'")
        g = grads.get(name)
        g = np.zeros_like(p.data) if g is None else g * scale
        m = state.m[name] = ADAM_BETA1 * state.m[name] + (1.0 - ADAM_BETA1) * g
        v = state.v[name] = ADAM_BETA2 * state.v[name] + (1.0 - ADAM_BETA2) * g * g
        update = (m / bias1) / (np.sqrt(v / bias2) + ADAM_EPS)
        p.data = (p.data - lr * weight_decay * p.data - lr * update).astype(p.data.dtype)
    return StepStats(grad_norm=norm, clip_scale=scale, skipped=False)


def one_cycle_lr(step: int, total_steps: int, base_lr: float) -> float:
    """Cosine warmup from base/10 to base at 40% of the run, then cosine
    decay to base/1000 at ``total_steps``. Steps past the end stay at the
    final rate."""
    if total_steps < 1:
        raise ContractError(f"one_cycle_lr: total_steps must be >= 1, got {total_steps}")
    if step < 0:
        raise ContractError(f"one_cycle_lr: negative step {step}")
    start = base_lr / WARMUP_DIVISOR
    final = base_lr / FINAL_DIVISOR
    if step >= total_steps:
        return final
    peak_step = WARMUP_FRACTION * total_steps
    if step <= peak_step:
        frac = step / peak_step
        return start + (base_lr - start) * (1.0 - math.cos(math.pi * frac)) / 2.0
    frac = (step - peak_step) / (total_steps - peak_step)
    return final + (base_lr - final) * (1.0 + math.cos(math.pi * frac)) / 2.0


# ============================================================================
# Checkpoints
# ============================================================================


def save_checkpoint(
    directory: str | Path, model: HMFN, state: AdamState | None = None, step: int = 0
) -> Path:
    """Write weights (plus optimizer moments) and a JSON descriptor."""
    directory = Path(directory)
    tensors = dict(state_arrays(model))
    if state is not None:
        tensors.update({f"adam.m.{n}": a for n, a in state.m.items()})
        tensors.update({f"adam.v.{n}": a for n, a in state.v.items()})
    write_tensors(directory / WEIGHTS_NAME, tensors)
    meta = {
        "config": model.cfg.to_dict(),
        "config_hash": config_hash(model.cfg),
        "step": step,
        "optimizer_step": state.step if state is not None else 0,
    }
    try:
        (directory / CHECKPOINT_META_NAME).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    except OSError as e:
        raise CheckpointError(f"Cannot write checkpoint descriptor: {e}", directory) from e
    return directory


def load_checkpoint(directory: str | Path) -> tuple[HMFN, AdamState, dict]:
    """Rebuild the model and optimizer state saved by ``save_checkpoint``.

    The model is created in the checkpoint config's precision.

    Raises:
        CheckpointError: If files are missing, unreadable or inconsistent.
    """
    directory = Path(directory)
    meta_path = directory / CHECKPOINT_META_NAME
    try:
        meta = json.loads(meta_path.read_text())
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint descriptor: {e}", meta_path) from e
    except json.JSONDecodeError as e:
        raise CheckpointError(f"Checkpoint descriptor is not valid JSON: {e}", meta_path) from e
    cfg = RunConfig.from_dict(meta["config"])
    if config_hash(cfg) != meta.get("config_hash"):
        raise CheckpointError("Config hash does not match the stored config", meta_path)

    tensors = read_tensors(directory / WEIGHTS_NAME)
    weights = {n: a for n, a in tensors.items() if not n.startswith("adam.")}
    with precision(cfg.precision):
        model = build_model(cfg, weights)
        dtype = nx.get_default_dtype()
    state = AdamState(step=int(meta.get("optimizer_step", 0)))
    for name in weights:
        state.m[name] = tensors.get(f"adam.m.{name}", np.zeros_like(weights[name])).astype(dtype)
        state.v[name] = tensors.get(f"adam.v.{name}", np.zeros_like(weights[name])).astype(dtype)
    return model, state, meta


# ============================================================================
# Data preparation
# ============================================================================


@dataclass
class PreparedFrame:
    """A frame pillarized at every scale, with its head targets."""

    sample_token: str
    scenes: list[PillarizedScene]
    targets: HeadTargets
    annotations: list[Box3D]


def _pillarize(args: tuple[PointCloud, list[PillarGridSpec], int]) -> list[PillarizedScene]:
    cloud, specs, seed = args
    return [assign_pillars(cloud, spec, rng_seed=seed) for spec in specs]


def prepare_frames(
    model: HMFN, frames: Sequence[LabeledFrame], workers: int = 1
) -> list[PreparedFrame]:
    """Pillarize frames (optionally across processes) and build their targets.

    Output order follows ``frames`` regardless of ``workers``.
    """
    cfg = model.cfg
    jobs = [(f.cloud, model.specs, cfg.seed) for f in frames]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            pillarized = list(pool.map(_pillarize, jobs, chunksize=4))
    else:
        pillarized = [_pillarize(job) for job in jobs]

    prepared = []
    for frame, scenes in zip(frames, pillarized):
        boxes = [b for b in frame.annotations if b.visible or cfg.include_empty]
        targets = build_targets(
            boxes, model.grid, cfg.class_names, min_overlap=cfg.min_overlap, min_radius=cfg.min_radius
        )
        prepared.append(PreparedFrame(frame.sample_token, scenes, targets, boxes))
    return prepared


def resolve_scenes(tables: DatasetTables, root: str | Path, split: str, seed: int) -> list[str]:
    """Scene tokens of a named split; without a manifest a split is computed."""
    if split == "all":
        return sorted(s.token for s in tables.scene)
    if split_path(root).exists():
        return load_split(root).scenes(split)
    logger.info("No split manifest under %s; splitting scenes with seed %d", root, seed)
    return split_scenes(tables, rng_seed=seed).scenes(split)


def load_frames(cfg: RunConfig, tables: DatasetTables, split: str) -> list[LabeledFrame]:
    scenes = resolve_scenes(tables, cfg.data_root, split, cfg.seed)
    return list(
        iter_frames(tables, cfg.data_root, scenes, with_velocity=cfg.speed, categories=cfg.class_names)
    )


# ============================================================================
# Training loop
# ============================================================================


class MetricsLog:
    """Append-only JSON-lines log."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")
        except OSError as e:
            raise DatasetIOError(f"Cannot create metrics log: {e}", self.path) from e

    def write(self, record: Mapping) -> None:
        with self.path.open("a") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")


@dataclass
class TrainResult:
    output_dir: Path
    best_checkpoint: Path | None
    best_val_map: float | None
    step_losses: list[float] = field(default_factory=list)
    epoch_reports: list[EvalReport] = field(default_factory=list)
    steps: int = 0


def batch_loss(model: HMFN, batch: Sequence[PreparedFrame]) -> tuple[Tensor, dict[str, float]]:
    """Mean detection loss over a batch of prepared frames."""
    per_scale = [[f.scenes[i] for f in batch] for i in range(len(model.specs))]
    results = model.forward_scenes(per_scale)
    total: Tensor | None = None
    parts = {"heatmap": 0.0, "regression": 0.0}
    for frame, res in zip(batch, results):
        loss, frame_parts = detection_loss(res.output, frame.targets)
        total = loss if total is None else nx.add(total, loss)
        for k, v in frame_parts.items():
            parts[k] += v / len(batch)
    assert total is not None
    return nx.scale(total, 1.0 / len(batch)), parts


def predict(model: HMFN, frames: Sequence[PreparedFrame]) -> dict[str, list[Box3D]]:
    """Decoded detections per sample token."""
    cfg = model.cfg
    results: dict[str, list[Box3D]] = {}
    for frame in frames:
        out = model.forward_scenes([[s] for s in frame.scenes])[0].output
        results[frame.sample_token] = decode(
            out,
            model.grid,
            cfg.class_names,
            max_dets=cfg.max_detections,
            score_threshold=cfg.score_threshold,
            nms_radius=cfg.nms_radius,
        )
    return results


def train(cfg: RunConfig, output_dir: str | Path | None = None) -> TrainResult:
    """Train HMFN and keep the checkpoint with the best validation mAP.

    Without a validation split (``val_split="none"``) the epoch with the
    lowest mean training loss is kept instead.

    Raises:
        DatasetValidationError: If the dataset breaks its invariants; raised
            before any optimizer step.
    """
    out = Path(output_dir or cfg.output_dir)
    tables = load_dataset(cfg.data_root)
    require_valid(tables)
    save_config(cfg, out)
    metrics = MetricsLog(out / METRICS_NAME)

    with precision(cfg.precision):
        model = build_model(cfg)
        train_frames = prepare_frames(model, load_frames(cfg, tables, cfg.split), cfg.workers)
        if not train_frames:
            raise ContractError(f"Split '{cfg.split}' has no frames to train on")
        val_frames: list[PreparedFrame] = []
        if cfg.val_split != NO_VALIDATION:
            val_frames = prepare_frames(model, load_frames(cfg, tables, cfg.val_split), cfg.workers)

        steps_per_epoch = math.ceil(len(train_frames) / cfg.batch_size)
        total_steps = steps_per_epoch * cfg.epochs
        if cfg.max_steps is not None:
            total_steps = min(total_steps, cfg.max_steps)
        logger.info(
            "Training on %d frames (%d val), %d steps, config %s",
            len(train_frames),
            len(val_frames),
            total_steps,
            config_hash(cfg),
        )

        state = AdamState.zeros_like(model.params)
        shuffle_rng = np.random.default_rng([cfg.seed, 1])
        result = TrainResult(output_dir=out, best_checkpoint=None, best_val_map=None)
        best_key: float | None = None
        step = 0
        epoch = 0
        while step < total_steps:
            epoch += 1
            order = shuffle_rng.permutation(len(train_frames))
            epoch_losses = []
            with run_span("train.epoch", epoch=epoch, config_hash=config_hash(cfg)) as span:
                for start in range(0, len(order), cfg.batch_size):
                    if step >= total_steps:
                        break
                    batch = [train_frames[i] for i in order[start : start + cfg.batch_size]]
                    model.zero_grad()
                    loss, parts = batch_loss(model, batch)
                    nx.backward(loss)
                    grads = {n: p.grad for n, p in model.params.items() if p.grad is not None}
                    lr = one_cycle_lr(step, max(total_steps - 1, 1), cfg.learning_rate)
                    stats = adam_step(
                        model.params, grads, state, lr, cfg.weight_decay, cfg.clip_norm
                    )
                    step += 1
                    value = loss.item()
                    epoch_losses.append(value)
                    result.step_losses.append(value)
                    metrics.write(
                        {
                            "type": "step",
                            "step": step,
                            "epoch": epoch,
                            "loss": value,
                            "heatmap_loss": parts["heatmap"],
                            "regression_loss": parts["regression"],
                            "lr": lr,
                            "grad_norm": stats.grad_norm,
                            "skipped": stats.skipped,
                        }
                    )
                    logger.debug("step %d loss %.6f lr %.2e", step, value, lr)

                record: dict = {
                    "type": "epoch",
                    "epoch": epoch,
                    "step": step,
                    "train_loss": float(np.mean(epoch_losses)),
                }
                if val_frames:
                    report = evaluate(
                        predict(model, val_frames),
                        tables,
                        sample_tokens=[f.sample_token for f in val_frames],
                        include_empty=cfg.include_empty,
                    )
                    result.epoch_reports.append(report)
                    record["val_map"] = report.mean_ap
                    record["ap"] = {f"{t:g}": ap for t, ap in report.ap.items()}
                    key = report.mean_ap
                    set_attributes(span, val_map=key)
                else:
                    key = -record["train_loss"]
                metrics.write(record)
                logger.info("epoch %d: %s", epoch, {k: v for k, v in record.items() if k != "type"})

            if best_key is None or key > best_key:
                best_key = key
                result.best_checkpoint = save_checkpoint(out / BEST_DIR, model, state, step)
                if val_frames:
                    result.best_val_map = key

        save_checkpoint(out / LAST_DIR, model, state, step)
        result.steps = step
    return result


# ============================================================================
# Inference
# ============================================================================


def infer(
    checkpoint: str | Path,
    data_root: str | Path | None = None,
    split: str = "val",
    out: str | Path | None = None,
    frames: Iterable[LabeledFrame] | None = None,
) -> tuple[dict[str, list[Box3D]], Path | None]:
    """Run a checkpoint over a split (or explicit frames) and write results.

    Returns:
        Tuple of (detections per sample token, results file path or None
        when ``out`` is not given).
    """
    model, _, meta = load_checkpoint(checkpoint)
    cfg = model.cfg
    if data_root is not None:
        cfg = cfg.merged({"data_root": str(data_root)})
        model.cfg = cfg
    with run_span("infer.run", split=split, config_hash=meta["config_hash"]) as span:
        if frames is None:
            tables = load_dataset(cfg.data_root)
            frames = load_frames(cfg, tables, split)
        with precision(cfg.precision):
            prepared = prepare_frames(model, list(frames), cfg.workers)
            results = predict(model, prepared)
        set_attributes(span, frames=len(prepared))
    path = None
    if out is not None:
        path = write_results(
            out,
            results,
            meta={"config_hash": meta["config_hash"], "split": split, "checkpoint_step": meta["step"]},
        )
        save_config(cfg, path.parent)
        logger.info("Wrote detections for %d frames to %s", len(results), path)
    return results, path
