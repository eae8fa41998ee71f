"""Frame-level and segment-level detection metrics plus CSV reports.

AP is non-interpolated: predictions are ranked by confidence (ties keep their
stable input order) and AP sums precision at every true-positive rank divided
by the number of positives. A segment prediction counts as a true positive
only when its IoU with an unmatched same-class ground truth in the same video
is strictly above the threshold; matching is greedy in rank order, best IoU
first, earliest ground truth on ties.

Classes with no ground-truth instance get AP 0 by definition but are left out
of the mAP average, so a prediction set identical to the ground truth scores
a clean 1.0 regardless of which classes the corpus happens to exercise.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .data import AnnotationSet
from .localize import FrameScoreTrack, SegmentPrediction, temporal_iou
from .nncore import Array

DEFAULT_STRONG_IOUS = (0.3, 0.4, 0.5, 0.6, 0.7)
DEFAULT_WEAK_IOUS = (0.1, 0.2, 0.3, 0.4, 0.5)


@dataclass
class EvalConfig:
    num_classes: int
    iou_thresholds: tuple[float, ...] = DEFAULT_STRONG_IOUS

    def __post_init__(self) -> None:
        self.iou_thresholds = tuple(float(t) for t in self.iou_thresholds)
        if self.num_classes < 1:
            raise ValueError(f"num_classes must be >= 1, got {self.num_classes}")
        if not self.iou_thresholds:
            raise ValueError("need at least one IoU threshold")
        for t in self.iou_thresholds:
            if not 0.0 < t <= 1.0:
                raise ValueError(f"IoU threshold {t} outside (0, 1]")
        if list(self.iou_thresholds) != sorted(self.iou_thresholds):
            raise ValueError(f"thresholds must ascend, got {self.iou_thresholds}")


@dataclass
class EvalReport:
    """Per-class APs with their means; frame-level columns are optional."""

    class_names: list[str]
    iou_thresholds: tuple[float, ...]
    segment_ap: Array  # (classes, thresholds)
    segment_map: Array  # (thresholds,)
    frame_ap: Array | None = None  # (classes,)
    frame_map: float | None = None


def _ap_from_arrays(confidences: Array, flags: Array, num_positives: int) -> float:
    if num_positives == 0 or confidences.size == 0:
        return 0.0
    order = np.argsort(-confidences, kind="stable")
    hits = flags[order]
    true_ranks = np.flatnonzero(hits) + 1
    precisions = np.arange(1, true_ranks.size + 1) / true_ranks
    return float(precisions.sum() / num_positives)


def average_precision(
    ranked: Iterable[tuple[float, bool]], num_positives: int
) -> float:
    """Non-interpolated AP over (confidence, is_true_positive) pairs.

    num_positives counts every positive in the ground truth, including those
    never retrieved; zero positives define AP as 0.
    """
    if num_positives < 0:
        raise ValueError(f"num_positives must be >= 0, got {num_positives}")
    pairs = list(ranked)
    if not pairs:
        return 0.0
    confidences = np.array([float(c) for c, _ in pairs])
    flags = np.array([bool(f) for _, f in pairs])
    return _ap_from_arrays(confidences, flags, num_positives)


def frame_level_map(
    tracks: Sequence[FrameScoreTrack], labels: Mapping[str, Array]
) -> tuple[Array, float]:
    """Retrieval AP over all test frames, per class, plus their mean.

    ``labels`` maps video id to a dense per-frame class array (0 background).
    Every labeled video needs a track of the same length; frames of all videos
    are pooled before ranking. The mean skips classes without positives.
    """
    by_id: dict[str, FrameScoreTrack] = {}
    for track in tracks:
        if track.video_id in by_id:
            raise ValueError(f"duplicate track for video {track.video_id!r}")
        by_id[track.video_id] = track
    if not by_id:
        raise ValueError("no tracks given")
    num_classes = next(iter(by_id.values())).num_classes
    for track in by_id.values():
        if track.num_classes != num_classes:
            raise ValueError("tracks disagree on the number of classes")
    ordered_ids = sorted(labels)
    dense: list[Array] = []
    for video_id in ordered_ids:
        if video_id not in by_id:
            raise ValueError(f"missing track for labeled video {video_id!r}")
        frame_labels = np.asarray(labels[video_id], dtype=np.int64)
        if frame_labels.shape != (by_id[video_id].frame_count,):
            raise ValueError(
                f"{video_id}: {frame_labels.size} labels for "
                f"{by_id[video_id].frame_count} track frames"
            )
        if frame_labels.max(initial=0) > num_classes:
            raise ValueError(
                f"{video_id}: label {frame_labels.max()} outside 1..{num_classes}"
            )
        dense.append(frame_labels)
    all_labels = np.concatenate(dense)
    ap = np.zeros(num_classes)
    for class_id in range(1, num_classes + 1):
        scores = np.concatenate(
            [by_id[v].class_scores(class_id) for v in ordered_ids]
        )
        positives = all_labels == class_id
        ap[class_id - 1] = _ap_from_arrays(scores, positives, int(positives.sum()))
    represented = np.array(
        [np.any(all_labels == k) for k in range(1, num_classes + 1)]
    )
    mean = float(ap[represented].mean()) if represented.any() else 0.0
    return ap, mean


def _match_class(
    predictions: Sequence[SegmentPrediction],
    gts: Sequence[tuple[str, int, int]],
    threshold: float,
) -> list[tuple[float, bool]]:
    """Greedy TP/FP flags for one class at one threshold, in rank order."""
    order = np.argsort(
        -np.array([p.confidence for p in predictions]), kind="stable"
    )
    taken = [False] * len(gts)
    ranked = []
    for i in order:
        p = predictions[i]
        best = -1
        best_iou = 0.0
        for j, (video_id, start, end) in enumerate(gts):
            if taken[j] or video_id != p.video_id:
                continue
            iou = temporal_iou((p.start, p.end), (start, end))
            if iou > threshold and iou > best_iou:
                best, best_iou = j, iou
        if best >= 0:
            taken[best] = True
        ranked.append((p.confidence, best >= 0))
    return ranked


def segment_level_map(
    predictions: Sequence[SegmentPrediction],
    gt: AnnotationSet,
    config: EvalConfig | None = None,
    video_ids: set[str] | None = None,
) -> EvalReport:
    """Detection AP per class and IoU threshold, with per-threshold means.

    ``video_ids``, when given, is the universe of evaluated videos and any
    prediction outside it is an error; otherwise the ground truth's videos
    define the universe.
    """
    if config is None:
        config = EvalConfig(gt.num_classes)
    if config.num_classes != gt.num_classes:
        raise ValueError(
            f"config expects {config.num_classes} classes, "
            f"annotations carry {gt.num_classes}"
        )
    known = video_ids if video_ids is not None else {s.video_id for s in gt.segments}
    for p in predictions:
        if p.video_id not in known:
            raise ValueError(f"prediction references unknown video {p.video_id!r}")
        if not 1 <= p.class_id <= config.num_classes:
            raise ValueError(
                f"prediction class {p.class_id} outside 1..{config.num_classes}"
            )
    preds_by_class: dict[int, list[SegmentPrediction]] = {}
    for p in predictions:
        preds_by_class.setdefault(p.class_id, []).append(p)
    gts_by_class: dict[int, list[tuple[str, int, int]]] = {}
    for s in gt.segments:
        gts_by_class.setdefault(s.class_id, []).append((s.video_id, s.start, s.end))
    thresholds = config.iou_thresholds
    ap = np.zeros((config.num_classes, len(thresholds)))
    for class_id in range(1, config.num_classes + 1):
        class_preds = preds_by_class.get(class_id, [])
        class_gts = gts_by_class.get(class_id, [])
        for t_idx, threshold in enumerate(thresholds):
            ranked = _match_class(class_preds, class_gts, threshold)
            ap[class_id - 1, t_idx] = average_precision(ranked, len(class_gts))
    represented = np.array(
        [bool(gts_by_class.get(k)) for k in range(1, config.num_classes + 1)]
    )
    if represented.any():
        seg_map = ap[represented].mean(axis=0)
    else:
        seg_map = np.zeros(len(thresholds))
    return EvalReport(
        class_names=list(gt.class_names),
        iou_thresholds=thresholds,
        segment_ap=ap,
        segment_map=seg_map,
    )


def emit_report(report: EvalReport, path) -> None:
    """Deterministic CSV: one row per class plus a final mAP row, 4 decimals."""
    columns = [f"iou_{t:g}" for t in report.iou_thresholds]
    if report.frame_ap is not None:
        columns.append("frame_ap")
    lines = ["class," + ",".join(columns)]
    for idx, name in enumerate(report.class_names):
        cells = [f"{v:.4f}" for v in report.segment_ap[idx]]
        if report.frame_ap is not None:
            cells.append(f"{report.frame_ap[idx]:.4f}")
        lines.append(f"{name}," + ",".join(cells))
    tail = [f"{v:.4f}" for v in report.segment_map]
    if report.frame_map is not None:
        tail.append(f"{report.frame_map:.4f}")
    lines.append("mAP," + ",".join(tail))
    Path(path).write_text("\n".join(lines) + "\n")


def load_report(path) -> dict[str, dict[str, float]]:
    """Parse an emitted CSV back into {row_label: {column: value}}."""
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty report")
    header = lines[0].split(",")
    if header[0] != "class":
        raise ValueError(f"{path}: malformed report header")
    out: dict[str, dict[str, float]] = {}
    for line in lines[1:]:
        cells = line.split(",")
        if len(cells) != len(header):
            raise ValueError(f"{path}: ragged report row {cells[0]!r}")
        out[cells[0]] = {
            column: float(value) for column, value in zip(header[1:], cells[1:])
        }
    return out


def precision_recall_points(
    ranked: Iterable[tuple[float, bool]], num_positives: int
) -> tuple[Array, Array]:
    """Precision and recall after each ranked prediction."""
    pairs = list(ranked)
    if num_positives < 0:
        raise ValueError(f"num_positives must be >= 0, got {num_positives}")
    if not pairs:
        return np.zeros(0), np.zeros(0)
    confidences = np.array([float(c) for c, _ in pairs])
    flags = np.array([bool(f) for _, f in pairs])
    order = np.argsort(-confidences, kind="stable")
    hits = flags[order]
    tp = np.cumsum(hits)
    ranks = np.arange(1, hits.size + 1)
    precision = tp / ranks
    recall = tp / num_positives if num_positives else np.zeros(hits.size)
    return precision, recall


def dump_pr_curves(
    predictions: Sequence[SegmentPrediction],
    gt: AnnotationSet,
    config: EvalConfig,
    directory,
) -> list[Path]:
    """One precision/recall CSV per class and threshold; returns the paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for class_id in range(1, config.num_classes + 1):
        class_preds = [p for p in predictions if p.class_id == class_id]
        class_gts = [
            (s.video_id, s.start, s.end) for s in gt.segments if s.class_id == class_id
        ]
        for threshold in config.iou_thresholds:
            ranked = _match_class(class_preds, class_gts, threshold)
            precision, recall = precision_recall_points(ranked, len(class_gts))
            lines = ["rank,precision,recall"]
            for rank, (p, r) in enumerate(zip(precision, recall), start=1):
                lines.append(f"{rank},{p:.4f},{r:.4f}")
            out = directory / f"pr_class{class_id:02d}_iou{threshold:g}.csv"
            out.write_text("\n".join(lines) + "\n")
            written.append(out)
    return written
