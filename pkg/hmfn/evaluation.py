"""Detection metrics and crowd density statistics.

Detections are matched to ground truth by BEV center distance (meters),
greedily in score order. AP is the mean of the interpolated precision at
101 evenly spaced recall levels; mAP averages AP over the thresholds.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Mapping, Sequence

import numpy as np

from .errors import ContractError, DatasetIOError, StatsError
from .head import Box3D
from .tracing import run_span

if TYPE_CHECKING:
    from .dataset import DatasetTables

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = (0.5, 1.0, 2.0, 4.0)
DENSITY_RADII = (2.0, 5.0, 10.0)
RECALL_GRID = np.arange(101) / 100.0
COUNTEREXAMPLE_SUFFIX = ".counterexample.json"


# ============================================================================
# Density statistics
# ============================================================================


@dataclass(frozen=True)
class DensityStats:
    """Crowd statistics of a set of frames.

    Attributes:
        pedes_per_frame: Mean pedestrian count per frame.
        density_2: Mean number of other pedestrians within 2 m of each one.
        density_5: Same within 5 m.
        density_10: Same within 10 m.
        frames: Frames counted.
        annotations: Pedestrian annotations counted.
        instances: Distinct pedestrian identities (0 when unknown).
    """

    pedes_per_frame: float
    density_2: float
    density_5: float
    density_10: float
    frames: int = 0
    annotations: int = 0
    instances: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def format_row(self) -> str:
        return (
            f"Frames {self.frames}  Annotations {self.annotations}  Instances {self.instances}  "
            f"Pedes/Fr {self.pedes_per_frame:.2f}  Density-2/5/10 "
            f"{self.density_2:.2f}/{self.density_5:.2f}/{self.density_10:.2f}"
        )


def density_stats_from_positions(
    frames: Sequence[np.ndarray], instances: int = 0
) -> DensityStats:
    """Statistics from per-frame [n, 2] BEV pedestrian positions.

    Raises:
        StatsError: If there are no frames.
    """
    if len(frames) == 0:
        raise StatsError("Density statistics need at least one frame")
    totals = dict.fromkeys(DENSITY_RADII, 0)
    n_people = 0
    for xy in frames:
        xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
        n = xy.shape[0]
        n_people += n
        if n < 2:
            continue
        dist = np.sqrt(((xy[:, None, :] - xy[None, :, :]) ** 2).sum(axis=-1))
        np.fill_diagonal(dist, np.inf)
        for r in DENSITY_RADII:
            totals[r] += int((dist <= r).sum())
    per_person = {r: (totals[r] / n_people if n_people else 0.0) for r in DENSITY_RADII}
    return DensityStats(
        pedes_per_frame=n_people / len(frames),
        density_2=per_person[2.0],
        density_5=per_person[5.0],
        density_10=per_person[10.0],
        frames=len(frames),
        annotations=n_people,
        instances=instances,
    )


def density_stats(
    tables: "DatasetTables",
    sample_tokens: Iterable[str] | None = None,
    category: str = "pedestrian",
) -> DensityStats:
    """Statistics over the samples of a dataset (all samples by default).

    Raises:
        StatsError: If the dataset has no frames.
    """
    tokens = sorted(sample_tokens) if sample_tokens is not None else sorted(tables.sample_index)
    if not tokens:
        raise StatsError("Dataset has zero frames")
    gts = tables.ground_truth(tokens, categories=(category,), include_empty=True)
    positions = [np.array([b.center[:2] for b in gts[t]]).reshape(-1, 2) for t in tokens]
    instances = {b.instance_id for t in tokens for b in gts[t]}
    return density_stats_from_positions(positions, instances=len(instances))


# ============================================================================
# Matching and AP
# ============================================================================


def _box_key(box: Box3D) -> tuple:
    return (*box.center, *box.size, box.yaw, box.label)


@dataclass
class FrameMatch:
    """Greedy matching result for one frame at one threshold.

    Attributes:
        scores: Detection scores in matching order (descending).
        tp: True where the detection at the same position matched a GT.
        num_gt: Ground-truth boxes in the frame.
    """

    scores: np.ndarray
    tp: np.ndarray
    num_gt: int

    @property
    def fn(self) -> int:
        return self.num_gt - int(self.tp.sum())


def sort_detections(dets: Sequence[Box3D]) -> list[Box3D]:
    """Score descending; equal scores ordered by box fields."""
    return sorted(dets, key=lambda b: (-(b.score or 0.0), _box_key(b)))


def match_frame(dets: Sequence[Box3D], gts: Sequence[Box3D], threshold: float) -> FrameMatch:
    """Greedy BEV center-distance matching.

    Each detection, in score order, takes the nearest still unmatched GT
    within ``threshold`` meters (equal distances go to the GT that sorts
    first by its fields).
    """
    if threshold < 0:
        raise ContractError(f"Matching threshold must be >= 0, got {threshold}")
    ordered = sort_detections(dets)
    gt_sorted = sorted(gts, key=_box_key)
    gt_xy = np.array([g.center[:2] for g in gt_sorted]).reshape(-1, 2)
    free = np.ones(len(gt_sorted), dtype=bool)
    tp = np.zeros(len(ordered), dtype=bool)
    for k, det in enumerate(ordered):
        if not free.any():
            break
        dist = np.hypot(gt_xy[:, 0] - det.center[0], gt_xy[:, 1] - det.center[1])
        dist[~free] = np.inf
        j = int(np.argmin(dist))
        if dist[j] <= threshold:
            free[j] = False
            tp[k] = True
    scores = np.array([d.score or 0.0 for d in ordered], dtype=np.float64)
    return FrameMatch(scores=scores, tp=tp, num_gt=len(gt_sorted))


@dataclass
class PRCurve:
    recall: np.ndarray
    precision: np.ndarray


def precision_recall(scores: np.ndarray, tp: np.ndarray, total_gts: int) -> PRCurve:
    order = np.argsort(-np.asarray(scores), kind="stable")
    tp = np.asarray(tp, dtype=bool)[order]
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(~tp)
    recall = tp_cum / max(total_gts, 1)
    precision = tp_cum / np.maximum(tp_cum + fp_cum, 1)
    return PRCurve(recall=recall, precision=precision)


def average_precision(scores: np.ndarray, tp: np.ndarray, total_gts: int) -> float:
    """101-point interpolated AP.

    AP is 1 when there are neither GTs nor detections, and 0 when there are
    no GTs but some detections.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if total_gts < 0:
        raise ContractError(f"total_gts must be >= 0, got {total_gts}")
    if total_gts == 0:
        return 1.0 if scores.size == 0 else 0.0
    if scores.size == 0:
        return 0.0
    curve = precision_recall(scores, tp, total_gts)
    envelope = np.maximum.accumulate(curve.precision[::-1])[::-1]
    idx = np.searchsorted(curve.recall, RECALL_GRID, side="left")
    interpolated = np.where(idx < envelope.size, envelope[np.minimum(idx, envelope.size - 1)], 0.0)
    return float(interpolated.mean())


# ============================================================================
# Reports
# ============================================================================


@dataclass
class ThresholdResult:
    threshold: float
    ap: float
    tp: int
    fp: int
    fn: int
    curve: PRCurve | None = None


@dataclass
class EvalReport:
    """AP per center-distance threshold and their mean."""

    results: list[ThresholdResult] = field(default_factory=list)
    frames: int = 0
    counterexample: Path | None = None

    @property
    def ap(self) -> dict[float, float]:
        return {r.threshold: r.ap for r in self.results}

    @property
    def mean_ap(self) -> float:
        if not self.results:
            return 0.0
        return float(np.mean([r.ap for r in self.results]))

    def to_dict(self) -> dict:
        return {
            "frames": self.frames,
            "mAP": self.mean_ap,
            "thresholds": [
                {"threshold": r.threshold, "ap": r.ap, "tp": r.tp, "fp": r.fp, "fn": r.fn}
                for r in self.results
            ],
        }

    def format_table(self) -> str:
        """Console table in percent with two decimals."""
        head = "  ".join(f"AP@{r.threshold:g}".rjust(8) for r in self.results) + "       mAP"
        row = "  ".join(f"{100 * r.ap:8.2f}" for r in self.results) + f"  {100 * self.mean_ap:8.2f}"
        return f"{head}\n{row}"


def evaluate(
    results: Mapping[str, Sequence[Box3D]],
    tables: "DatasetTables",
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
    sample_tokens: Iterable[str] | None = None,
    class_name: str = "pedestrian",
    include_empty: bool = False,
    max_range: float | None = None,
    counterexample_path: str | Path | None = None,
) -> EvalReport:
    """Score detections against the dataset's annotations.

    Args:
        results: Detections per sample token.
        tables: Dataset supplying ground truth.
        thresholds: Center-distance thresholds in meters.
        sample_tokens: Frames to evaluate (default: every sample in the dataset).
        class_name: Category evaluated; other detections and GTs are ignored.
        include_empty: Keep GT boxes with zero LiDAR points.
        max_range: Drop GTs and detections farther than this from the sensor.
        counterexample_path: Where to write the offending AP vector, detections
            and ground truth when a looser threshold scores lower AP than a
            tighter one. None only logs the violation.
    """
    tokens = sorted(sample_tokens) if sample_tokens is not None else sorted(tables.sample_index)
    unknown = set(results) - set(tokens)
    if unknown:
        logger.warning("Ignoring detections for %d frames outside the evaluated set", len(unknown))
    gts = tables.ground_truth(tokens, categories=(class_name,), include_empty=include_empty)

    def in_range(box: Box3D) -> bool:
        return max_range is None or float(np.hypot(*box.center[:2])) <= max_range

    report = EvalReport(frames=len(tokens))
    with run_span("eval.run", frames=len(tokens), thresholds=tuple(thresholds)):
        for thr in thresholds:
            scores, tps, total = [], [], 0
            for token in tokens:
                dets = [d for d in results.get(token, ()) if d.label == class_name and in_range(d)]
                frame_gts = [g for g in gts[token] if in_range(g)]
                m = match_frame(dets, frame_gts, thr)
                scores.append(m.scores)
                tps.append(m.tp)
                total += m.num_gt
            all_scores = np.concatenate(scores) if scores else np.zeros(0)
            all_tp = np.concatenate(tps) if tps else np.zeros(0, dtype=bool)
            n_tp = int(all_tp.sum())
            report.results.append(
                ThresholdResult(
                    threshold=float(thr),
                    ap=average_precision(all_scores, all_tp, total),
                    tp=n_tp,
                    fp=int(all_tp.size - n_tp),
                    fn=total - n_tp,
                    curve=precision_recall(all_scores, all_tp, total),
                )
            )
    violations = monotonicity_violations(report)
    if violations:
        logger.warning("AP is not monotone in the matching threshold: %s", [r.ap for r in report.results])
        if counterexample_path is not None:
            report.counterexample = write_counterexample(
                counterexample_path, report, violations, results, tokens, gts
            )
            logger.warning("Counterexample written to %s", report.counterexample)
    return report


def monotonicity_violations(report: EvalReport, slack: float = 1e-12) -> list[tuple[float, float]]:
    """Adjacent threshold pairs (tighter, looser) where the looser one scores lower AP."""
    ordered = sorted(report.results, key=lambda r: r.threshold)
    return [(a.threshold, b.threshold) for a, b in zip(ordered, ordered[1:]) if b.ap < a.ap - slack]


# ============================================================================
# Files
# ============================================================================


def detection_record(sample_token: str, box: Box3D) -> dict:
    return {
        "sample_token": sample_token,
        "translation": list(box.center),
        "size": list(box.size),
        "yaw": box.yaw,
        "detection_name": box.label,
        "detection_score": box.score,
    }


def write_results(
    path: str | Path, results: Mapping[str, Sequence[Box3D]], meta: Mapping | None = None
) -> Path:
    """Write detections as ``{"meta": ..., "results": {sample_token: [record, ...]}}``.

    ``size`` is (l, w, h).
    """
    path = Path(path)
    payload = {
        "meta": dict(meta or {}),
        "results": {
            token: [detection_record(token, b) for b in sort_detections(boxes)]
            for token, boxes in sorted(results.items())
        },
    }
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    except OSError as e:
        raise DatasetIOError(f"Cannot write results: {e}", path) from e
    return path


def load_results(path: str | Path) -> tuple[dict[str, list[Box3D]], dict]:
    """Read a results file back into boxes per sample token, plus its meta."""
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
    except OSError as e:
        raise DatasetIOError(f"Cannot read results: {e}", path) from e
    except json.JSONDecodeError as e:
        raise DatasetIOError(f"Results file is not valid JSON: {e}", path) from e
    try:
        results = {
            token: [
                Box3D(
                    center=r["translation"],
                    size=r["size"],
                    yaw=r["yaw"],
                    label=r["detection_name"],
                    score=r["detection_score"],
                )
                for r in records
            ]
            for token, records in payload["results"].items()
        }
    except (KeyError, TypeError) as e:
        raise DatasetIOError(f"Malformed results file: missing {e}", path) from e
    return results, payload.get("meta", {})


def write_report(path: str | Path, report: EvalReport) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    except OSError as e:
        raise DatasetIOError(f"Cannot write report: {e}", path) from e
    return path


def write_pr_curves(path: str | Path, report: EvalReport) -> Path:
    """PR-curve points as whitespace-separated text: threshold recall precision."""
    path = Path(path)
    lines = ["# threshold recall precision"]
    for r in report.results:
        if r.curve is None:
            continue
        for rec, prec in zip(r.curve.recall, r.curve.precision):
            lines.append(f"{r.threshold:g} {rec:.6f} {prec:.6f}")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(lines) + "\n")
    except OSError as e:
        raise DatasetIOError(f"Cannot write PR curves: {e}", path) from e
    return path


def write_counterexample(
    path: str | Path,
    report: EvalReport,
    violations: Sequence[tuple[float, float]],
    results: Mapping[str, Sequence[Box3D]],
    sample_tokens: Sequence[str],
    gts: Mapping[str, Sequence[Box3D]],
) -> Path:
    """Dump everything needed to replay a threshold-monotonicity failure.

    The file holds the report, the offending threshold pairs, and the
    detections and ground truth of every evaluated frame.
    """
    path = Path(path)
    payload = {
        "report": report.to_dict(),
        "ap": [r.ap for r in sorted(report.results, key=lambda r: r.threshold)],
        "violations": [{"tighter": a, "looser": b} for a, b in violations],
        "results": {
            t: [detection_record(t, b) for b in sort_detections(results.get(t, ()))] for t in sample_tokens
        },
        "ground_truth": {t: [detection_record(t, b) for b in gts[t]] for t in sample_tokens},
    }
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    except OSError as e:
        raise DatasetIOError(f"Cannot write counterexample: {e}", path) from e
    return path
