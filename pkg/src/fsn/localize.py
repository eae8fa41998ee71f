"""From dense frame scores to scored temporal segments.

A trained head scores every frame of an untrimmed video (``slide_predict`` for
the strongly supervised heads, ``weak_score_track`` for the weak one). Those
tracks are thresholded at several levels into candidate segments, deduplicated,
and pruned with per-class non-maximum suppression. Predictions travel in a
tab-separated file with a fixed header.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import VideoFeatures, span_bounds
from .model import Head, WfsnHead, fsn_forward, wfsn_forward_predict
from .nncore import Array

GROUPING_THRESHOLDS = tuple(np.round(np.arange(11) * 0.1, 1))
NMS_OFFSET = 0.1


@dataclass
class FrameScoreTrack:
    """Dense per-frame class scores for one video.

    ``scores`` is (frames, channels); channel 0 is background when
    ``includes_background`` is set, otherwise channel k-1 carries class k.
    """

    video_id: str
    scores: Array
    includes_background: bool

    def __post_init__(self) -> None:
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 2 or self.scores.shape[0] < 1:
            raise ValueError(
                f"{self.video_id}: scores must be (frames, channels), "
                f"got {self.scores.shape}"
            )
        if self.num_classes < 1:
            raise ValueError(f"{self.video_id}: track carries no action classes")

    @property
    def frame_count(self) -> int:
        return self.scores.shape[0]

    @property
    def num_classes(self) -> int:
        return self.scores.shape[1] - (1 if self.includes_background else 0)

    def class_scores(self, class_id: int) -> Array:
        if not 1 <= class_id <= self.num_classes:
            raise ValueError(
                f"class id {class_id} outside 1..{self.num_classes}"
            )
        column = class_id if self.includes_background else class_id - 1
        return self.scores[:, column]


@dataclass(frozen=True)
class SegmentPrediction:
    """A scored action proposal on [start, end), frame units."""

    video_id: str
    start: int
    end: int
    class_id: int
    confidence: float

    def __post_init__(self) -> None:
        if self.start < 0 or self.end <= self.start:
            raise ValueError(f"bad segment [{self.start}, {self.end})")
        if self.class_id < 1:
            raise ValueError(f"class ids start at 1, got {self.class_id}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")

    @property
    def length(self) -> int:
        return self.end - self.start


def slide_predict(head: Head, video: VideoFeatures) -> FrameScoreTrack:
    """Score every frame with non-overlapping clip windows.

    The tail window is padded by repeating the final frame descriptor, and its
    surplus scores are cut off, so the track length equals the frame count.
    """
    if isinstance(head, WfsnHead):
        raise TypeError("use weak_score_track for weakly supervised heads")
    config = head.config
    if video.frame_count < config.snippet_len:
        raise ValueError(
            f"{video.video_id}: {video.frame_count} frames is shorter than one "
            f"{config.snippet_len}-frame snippet"
        )
    clip_len = config.clip_len
    offsets = np.arange(config.snippets_per_clip) * config.snippet_len
    offsets = offsets + config.snippet_len // 2
    rows = []
    for start in range(0, video.frame_count, clip_len):
        window = video.features[start : start + clip_len]
        remaining = window.shape[0]
        if remaining < clip_len:
            pad = np.tile(window[-1], (clip_len - remaining, 1))
            window = np.vstack([window, pad])
        scores = fsn_forward(window[offsets], head, clip_len)
        rows.append(scores[:remaining])
    return FrameScoreTrack(video.video_id, np.vstack(rows), head.includes_background)


def weak_score_track(
    head: WfsnHead, video: VideoFeatures, positions: int = 100
) -> FrameScoreTrack:
    """Frame scores from a weak head: span centers scored, spans filled.

    The video is cut into ``positions`` near-equal spans (clamped to the frame
    count for short videos); each span is scored once at its center frame and
    the score is held constant across the span.
    """
    if not isinstance(head, WfsnHead):
        raise TypeError("weak scoring needs a weakly supervised head")
    if positions < 1:
        raise ValueError(f"positions must be >= 1, got {positions}")
    effective = min(positions, video.frame_count)
    bounds = span_bounds(video.frame_count, effective)
    centers = (bounds[:-1] + bounds[1:]) // 2
    scores = wfsn_forward_predict(video.features[centers], head)
    expanded = np.repeat(scores, np.diff(bounds), axis=0)
    return FrameScoreTrack(video.video_id, expanded, includes_background=False)


def threshold_group(
    track: FrameScoreTrack, class_id: int, threshold: float
) -> list[SegmentPrediction]:
    """Maximal runs of frames scoring strictly above the threshold.

    Each run becomes a segment whose confidence is the mean class score over
    its frames.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold {threshold} outside [0, 1]")
    column = track.class_scores(class_id)
    mask = np.concatenate([[False], column > threshold, [False]])
    edges = np.flatnonzero(np.diff(mask.astype(np.int8)))
    segments = []
    for start, end in zip(edges[::2], edges[1::2]):
        segments.append(
            SegmentPrediction(
                video_id=track.video_id,
                start=int(start),
                end=int(end),
                class_id=class_id,
                confidence=float(column[start:end].mean()),
            )
        )
    return segments


def multi_threshold_group(
    track: FrameScoreTrack,
    class_id: int,
    thresholds: Sequence[float] = GROUPING_THRESHOLDS,
) -> list[SegmentPrediction]:
    """Union of threshold groupings over a threshold sweep, deduplicated.

    Segments that come out identical (same start, end, class) at several
    thresholds are kept once, at their first appearance.
    """
    seen: set[tuple[int, int]] = set()
    merged = []
    for threshold in thresholds:
        for segment in threshold_group(track, class_id, threshold):
            key = (segment.start, segment.end)
            if key not in seen:
                seen.add(key)
                merged.append(segment)
    return merged


def _interval(segment) -> tuple[float, float]:
    if hasattr(segment, "start"):
        start, end = segment.start, segment.end
    else:
        start, end = segment
    if end <= start:
        raise ValueError(f"bad interval [{start}, {end})")
    return float(start), float(end)


def temporal_iou(a, b) -> float:
    """Intersection over union of two half-open temporal intervals."""
    a_start, a_end = _interval(a)
    b_start, b_end = _interval(b)
    intersection = max(0.0, min(a_end, b_end) - max(a_start, b_start))
    union = (a_end - a_start) + (b_end - b_start) - intersection
    return intersection / union


def nms(
    segments: Sequence[SegmentPrediction], iou_threshold: float
) -> list[SegmentPrediction]:
    """Greedy per-class non-maximum suppression within one video.

    Candidates are visited by confidence (descending), ties broken by earlier
    start then shorter length; a candidate survives iff its IoU with every
    already kept segment of its class is at most the threshold.
    """
    if iou_threshold < 0.0:
        raise ValueError(f"IoU threshold must be >= 0, got {iou_threshold}")
    if not segments:
        return []
    videos = {s.video_id for s in segments}
    if len(videos) > 1:
        raise ValueError(f"NMS runs per video, got {sorted(videos)}")
    kept: list[SegmentPrediction] = []
    by_class: dict[int, list[SegmentPrediction]] = {}
    for class_id in sorted({s.class_id for s in segments}):
        candidates = sorted(
            (s for s in segments if s.class_id == class_id),
            key=lambda s: (-s.confidence, s.start, s.length),
        )
        survivors = by_class.setdefault(class_id, [])
        for candidate in candidates:
            if all(temporal_iou(candidate, other) <= iou_threshold for other in survivors):
                survivors.append(candidate)
        kept.extend(survivors)
    return kept


def track_to_segments(track: FrameScoreTrack, nms_iou: float) -> list[SegmentPrediction]:
    """Multi-threshold grouping plus NMS for every class of one track."""
    out = []
    for class_id in range(1, track.num_classes + 1):
        out.extend(nms(multi_threshold_group(track, class_id), nms_iou))
    return out


def nms_threshold_for(eval_iou: float) -> float:
    """NMS threshold used when predictions target a given evaluation IoU."""
    if not 0.0 < eval_iou <= 1.0:
        raise ValueError(f"evaluation IoU must be in (0, 1], got {eval_iou}")
    return max(eval_iou - NMS_OFFSET, 0.0)


def sort_predictions(predictions: Iterable[SegmentPrediction]) -> list[SegmentPrediction]:
    return sorted(
        predictions, key=lambda s: (s.video_id, s.class_id, s.start, s.end)
    )


def localize_strong(
    head: Head, videos: Sequence[VideoFeatures], eval_iou: float = 0.5
) -> list[SegmentPrediction]:
    """Dense scoring plus grouping and NMS over a collection of videos."""
    nms_iou = nms_threshold_for(eval_iou)
    predictions = []
    for video in videos:
        predictions.extend(track_to_segments(slide_predict(head, video), nms_iou))
    return sort_predictions(predictions)


def localize_weak(
    head: WfsnHead,
    videos: Sequence[VideoFeatures],
    eval_iou: float = 0.5,
    positions: int = 100,
) -> list[SegmentPrediction]:
    """Weak-head counterpart of ``localize_strong``."""
    nms_iou = nms_threshold_for(eval_iou)
    predictions = []
    for video in videos:
        track = weak_score_track(head, video, positions)
        predictions.extend(track_to_segments(track, nms_iou))
    return sort_predictions(predictions)


def fuse_streams(
    track_a: FrameScoreTrack, track_b: FrameScoreTrack, weight: float = 0.5
) -> FrameScoreTrack:
    """Convex combination of two score tracks: weight on the first stream."""
    if not 0.0 <= weight <= 1.0:
        raise ValueError(f"weight {weight} outside [0, 1]")
    if track_a.video_id != track_b.video_id:
        raise ValueError(
            f"cannot fuse different videos {track_a.video_id!r} and {track_b.video_id!r}"
        )
    if track_a.scores.shape != track_b.scores.shape:
        raise ValueError(
            f"score shapes differ: {track_a.scores.shape} vs {track_b.scores.shape}"
        )
    if track_a.includes_background != track_b.includes_background:
        raise ValueError("cannot fuse tracks with different channel layouts")
    return FrameScoreTrack(
        track_a.video_id,
        weight * track_a.scores + (1.0 - weight) * track_b.scores,
        track_a.includes_background,
    )


PREDICTION_HEADER = "video_id\tstart\tend\tclass_id\tconfidence"


def write_predictions(predictions: Sequence[SegmentPrediction], path) -> None:
    lines = [PREDICTION_HEADER]
    for p in sort_predictions(predictions):
        lines.append(f"{p.video_id}\t{p.start}\t{p.end}\t{p.class_id}\t{p.confidence:.6f}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_predictions(path) -> list[SegmentPrediction]:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or lines[0] != PREDICTION_HEADER:
        raise ValueError(f"{path}: missing prediction header")
    predictions = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise ValueError(f"{path}: line {lineno}: expected 5 fields, got {len(parts)}")
        try:
            prediction = SegmentPrediction(
                video_id=parts[0],
                start=int(parts[1]),
                end=int(parts[2]),
                class_id=int(parts[3]),
                confidence=float(parts[4]),
            )
        except ValueError as err:
            raise ValueError(f"{path}: line {lineno}: {err}") from None
        predictions.append(prediction)
    return predictions
