"""Feature files, annotations, clip assembly, and the synthetic corpus.

Per-frame descriptors travel in a small binary container (magic ``FSNF``,
float32 payload); annotations and manifests are tab-separated text. All
randomness goes through seeded ``numpy.random.Generator`` instances so every
artifact is reproducible from its seed.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

Array = np.ndarray

log = logging.getLogger(__name__)

FEATURE_MAGIC = b"FSNF"
FEATURE_VERSION = 1
_FEATURE_HEADER = struct.Struct("<4sIII")


@dataclass
class VideoFeatures:
    """Per-frame descriptors for one untrimmed video, (frames, dim) float64."""

    video_id: str
    features: Array

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError(
                f"{self.video_id}: features must be (frames, dim), "
                f"got shape {self.features.shape}"
            )
        if not np.all(np.isfinite(self.features)):
            raise ValueError(f"{self.video_id}: features contain non-finite values")

    @property
    def frame_count(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class GroundTruthSegment:
    """Half-open frame interval [start, end) tagged with an action class."""

    video_id: str
    start: int
    end: int
    class_id: int

    def __post_init__(self) -> None:
        if self.start < 0 or self.end <= self.start:
            raise ValueError(
                f"{self.video_id}: bad segment [{self.start}, {self.end})"
            )
        if self.class_id < 1:
            raise ValueError(
                f"{self.video_id}: class ids start at 1, got {self.class_id}"
            )


@dataclass
class AnnotationSet:
    """Class-name table plus every ground-truth segment of a corpus."""

    class_names: list[str]
    segments: list[GroundTruthSegment]

    def __post_init__(self) -> None:
        if not self.class_names:
            raise ValueError("class table is empty")
        for seg in self.segments:
            if seg.class_id > self.num_classes:
                raise ValueError(
                    f"{seg.video_id}: class id {seg.class_id} outside table "
                    f"of {self.num_classes}"
                )

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def by_video(self) -> dict[str, list[GroundTruthSegment]]:
        out: dict[str, list[GroundTruthSegment]] = {}
        for seg in self.segments:
            out.setdefault(seg.video_id, []).append(seg)
        return out

    def video_classes(self, video_id: str) -> list[int]:
        return sorted({s.class_id for s in self.segments if s.video_id == video_id})


@dataclass
class ClipSample:
    """One training window: snippet descriptors plus dense frame labels."""

    features: Array  # (snippets, feature_dim)
    labels: Array  # (clip_len,) int64, 0 = background
    video_id: str = ""
    start: int = 0

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)


@dataclass
class WeakSample:
    """One weakly supervised sample: span descriptors plus a video label."""

    features: Array  # (positions, feature_dim)
    video_label: Array  # (num_classes,) multi-hot
    video_id: str = ""

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        self.video_label = np.asarray(self.video_label, dtype=np.float64)


def write_features(video: VideoFeatures, path) -> None:
    payload = np.ascontiguousarray(video.features, dtype="<f4").tobytes()
    header = _FEATURE_HEADER.pack(
        FEATURE_MAGIC, FEATURE_VERSION, video.feature_dim, video.frame_count
    )
    Path(path).write_bytes(header + payload)


def load_features(path, video_id: str | None = None) -> VideoFeatures:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _FEATURE_HEADER.size:
        raise ValueError(f"{path}: truncated feature file")
    magic, version, dim, frames = _FEATURE_HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC:
        raise ValueError(f"{path}: not a feature file (bad magic {magic!r})")
    if version != FEATURE_VERSION:
        raise ValueError(f"{path}: unsupported feature file version {version}")
    expected = _FEATURE_HEADER.size + 4 * dim * frames
    if len(raw) != expected:
        raise ValueError(
            f"{path}: payload is {len(raw)} bytes, header implies {expected}"
        )
    data = np.frombuffer(raw, dtype="<f4", offset=_FEATURE_HEADER.size)
    features = data.reshape(frames, dim).astype(np.float64)
    return VideoFeatures(video_id or path.stem, features)


def load_feature_dir(directory, video_ids=None) -> list[VideoFeatures]:
    """Load every ``.fsnf`` file in a directory, optionally a chosen subset.

    All videos must agree on the descriptor dimension.
    """
    directory = Path(directory)
    paths = sorted(directory.glob("*.fsnf"))
    if video_ids is not None:
        wanted = set(video_ids)
        paths = [p for p in paths if p.stem in wanted]
        missing = wanted - {p.stem for p in paths}
        if missing:
            raise FileNotFoundError(
                f"{directory}: no feature file for video(s) {sorted(missing)}"
            )
    if not paths:
        raise FileNotFoundError(f"{directory}: no feature files found")
    videos = [load_features(p) for p in paths]
    dims = {v.feature_dim for v in videos}
    if len(dims) > 1:
        raise ValueError(f"{directory}: mixed feature dims {sorted(dims)}")
    return videos


def write_annotations(annotations: AnnotationSet, path) -> None:
    lines = ["\t".join(["classes", str(annotations.num_classes), *annotations.class_names])]
    ordered = sorted(
        annotations.segments, key=lambda s: (s.video_id, s.start, s.end, s.class_id)
    )
    for seg in ordered:
        lines.append(f"{seg.video_id}\t{seg.start}\t{seg.end}\t{seg.class_id}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_annotations(path, frame_counts: dict[str, int] | None = None) -> AnnotationSet:
    """Parse a segment annotation file, validating against frame counts if given."""
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty annotation file")
    header = lines[0].split("\t")
    if len(header) < 3 or header[0] != "classes":
        raise ValueError(f"{path}: line 1: malformed class table header")
    try:
        count = int(header[1])
    except ValueError:
        raise ValueError(f"{path}: line 1: class count is not an integer") from None
    names = header[2:]
    if len(names) != count or count < 1:
        raise ValueError(
            f"{path}: line 1: class table announces {count} names, has {len(names)}"
        )
    segments = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ValueError(f"{path}: line {lineno}: expected 4 fields, got {len(parts)}")
        video_id = parts[0]
        try:
            start, end, class_id = int(parts[1]), int(parts[2]), int(parts[3])
        except ValueError:
            raise ValueError(f"{path}: line {lineno}: non-integer field") from None
        if not 1 <= class_id <= count:
            raise ValueError(
                f"{path}: line {lineno}: class id {class_id} outside 1..{count}"
            )
        if start < 0 or end <= start:
            raise ValueError(
                f"{path}: line {lineno}: bad segment [{start}, {end})"
            )
        if frame_counts is not None:
            if video_id not in frame_counts:
                raise ValueError(f"{path}: line {lineno}: unknown video {video_id!r}")
            if end > frame_counts[video_id]:
                raise ValueError(
                    f"{path}: line {lineno}: segment end {end} exceeds "
                    f"{video_id}'s {frame_counts[video_id]} frames"
                )
        segments.append(GroundTruthSegment(video_id, start, end, class_id))
    return AnnotationSet(names, segments)


def label_frames(frame_count: int, segments) -> Array:
    """Dense per-frame class labels; overlaps go to the earliest-starting segment."""
    labels = np.zeros(frame_count, dtype=np.int64)
    ordered = sorted(segments, key=lambda s: (s.start, s.end, s.class_id), reverse=True)
    for seg in ordered:
        if seg.end > frame_count:
            raise ValueError(
                f"{seg.video_id}: segment end {seg.end} exceeds {frame_count} frames"
            )
        labels[seg.start : seg.end] = seg.class_id
    return labels


def make_clips(
    video: VideoFeatures,
    segments,
    clip_len: int = 35,
    snippet_len: int = 5,
    stride: int | None = None,
    min_action_frames: int = 5,
) -> list[ClipSample]:
    """Cut sliding windows into snippet descriptors plus dense frame labels.

    Each window of ``clip_len`` frames becomes clip_len/snippet_len snippets,
    a snippet being represented by its center frame's descriptor. Windows with
    fewer than ``min_action_frames`` non-background frames are dropped; videos
    shorter than one window are skipped with a warning.
    """
    if clip_len % snippet_len != 0:
        raise ValueError(f"clip_len {clip_len} is not a multiple of snippet_len {snippet_len}")
    if stride is None:
        stride = clip_len
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if video.frame_count < clip_len:
        log.warning(
            "skipping %s: %d frames is shorter than one %d-frame clip",
            video.video_id, video.frame_count, clip_len,
        )
        return []
    frame_labels = label_frames(video.frame_count, segments)
    offsets = np.arange(clip_len // snippet_len) * snippet_len + snippet_len // 2
    clips = []
    for start in range(0, video.frame_count - clip_len + 1, stride):
        window = frame_labels[start : start + clip_len]
        if int((window > 0).sum()) < min_action_frames:
            continue
        clips.append(
            ClipSample(
                features=video.features[start + offsets],
                labels=window.copy(),
                video_id=video.video_id,
                start=start,
            )
        )
    return clips


def clip_majority_class(clip: ClipSample) -> int:
    """Most frequent non-background class of a clip (lowest id on ties)."""
    action = clip.labels[clip.labels > 0]
    if action.size == 0:
        return 0
    return int(np.argmax(np.bincount(action)))


def rebalance(clips, seed: int = 0) -> list[ClipSample]:
    """Oversample minority-class clips (with replacement) to the majority count.

    Clips are grouped by their majority non-background class; every group is
    topped up to the largest group's size by re-drawing members uniformly.
    An already balanced set comes back unchanged.
    """
    if not clips:
        return []
    groups: dict[int, list[int]] = {}
    for i, clip in enumerate(clips):
        groups.setdefault(clip_majority_class(clip), []).append(i)
    target = max(len(g) for g in groups.values())
    rng = np.random.default_rng(seed)
    out = list(clips)
    for cls in sorted(groups):
        members = groups[cls]
        shortfall = target - len(members)
        if shortfall > 0:
            for i in rng.choice(members, size=shortfall, replace=True):
                out.append(clips[i])
    return out


def span_bounds(frame_count: int, positions: int) -> Array:
    """Boundaries of ``positions`` near-equal spans covering [0, frame_count)."""
    return np.floor(
        np.arange(positions + 1) * frame_count / positions
    ).astype(np.int64)


def make_weak_sample(
    video: VideoFeatures,
    positive_classes,
    num_classes: int,
    positions: int = 100,
    seed: int = 0,
) -> WeakSample:
    """Sample one random frame from each of ``positions`` equal spans.

    The video must be at least ``positions`` frames long so every span is
    non-empty. The label is a multi-hot vector over all classes.
    """
    if video.frame_count < positions:
        raise ValueError(
            f"{video.video_id}: {video.frame_count} frames, need at least {positions}"
        )
    positive_classes = sorted(set(int(c) for c in positive_classes))
    if not positive_classes:
        raise ValueError(f"{video.video_id}: weak sample needs at least one class")
    if positive_classes[0] < 1 or positive_classes[-1] > num_classes:
        raise ValueError(
            f"{video.video_id}: class ids {positive_classes} outside 1..{num_classes}"
        )
    bounds = span_bounds(video.frame_count, positions)
    rng = np.random.default_rng(seed)
    picks = rng.integers(bounds[:-1], bounds[1:])
    label = np.zeros(num_classes)
    label[np.array(positive_classes) - 1] = 1.0
    return WeakSample(video.features[picks], label, video.video_id)


@dataclass
class SynthConfig:
    """Knobs for the synthetic untrimmed-video corpus."""

    num_videos: int = 80
    frames_per_video: int = 600
    num_classes: int = 4
    feature_dim: int = 16
    prototype_noise: float = 0.3
    context_ambiguity: bool = False
    instance_density: float = 0.2
    seed: int = 0
    train_fraction: float = 0.75
    single_class_videos: bool = False
    min_instance_len: int = 18
    max_instance_len: int = 30

    def __post_init__(self) -> None:
        if self.num_videos < 2:
            raise ValueError("need at least 2 videos to split train/test")
        if self.num_classes < 1:
            raise ValueError("need at least one class")
        if self.context_ambiguity and self.num_classes < 2:
            raise ValueError("context ambiguity needs at least two classes to pair")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be positive")
        if not 0.0 < self.instance_density <= 0.6:
            raise ValueError(f"instance_density must be in (0, 0.6], got {self.instance_density}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must be strictly between 0 and 1")
        if self.min_instance_len < 2:
            raise ValueError("instances need at least 2 frames for two phases")
        if self.max_instance_len < self.min_instance_len:
            raise ValueError("max_instance_len below min_instance_len")
        if self.frames_per_video < 2 * self.max_instance_len:
            raise ValueError("videos too short for the configured instance lengths")
        if self.prototype_noise < 0.0:
            raise ValueError("prototype_noise must be >= 0")


@dataclass
class SynthDataset:
    videos: list[VideoFeatures]
    annotations: AnnotationSet
    train_ids: list[str]
    test_ids: list[str]
    config: SynthConfig
    background: Array = field(repr=False, default=None)
    class_patterns: Array = field(repr=False, default=None)  # (K, 2, dim)
    ambiguous_pairs: list[tuple[int, int]] = field(default_factory=list)


def _draw_instance_lengths(rng, target_frames: int, cfg: SynthConfig) -> list[int]:
    lengths: list[int] = []
    total = 0
    while total < target_frames:
        length = int(rng.integers(cfg.min_instance_len, cfg.max_instance_len + 1))
        if total + length > target_frames:
            length = target_frames - total
            if length < cfg.min_instance_len:
                break
        lengths.append(length)
        total += length
    return lengths


def synth_generate(config: SynthConfig) -> SynthDataset:
    """Build a deterministic synthetic corpus of untrimmed feature videos.

    Every action instance renders a two-phase prototype pattern (first half
    one prototype, second half another) on top of a shared background
    prototype, plus isotropic noise. With ``context_ambiguity`` on, classes
    are paired and each pair shares its two prototypes in opposite order, so
    no single frame identifies the class; only the temporal arrangement does.
    Per-video action density matches ``instance_density`` exactly whenever the
    length quantization allows.
    """
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    dim, num_classes = cfg.feature_dim, cfg.num_classes
    background = rng.normal(size=dim)
    patterns = np.zeros((num_classes, 2, dim))
    ambiguous_pairs: list[tuple[int, int]] = []
    if cfg.context_ambiguity:
        for first in range(0, num_classes - 1, 2):
            u, v = rng.normal(size=(2, dim))
            patterns[first] = (u, v)
            patterns[first + 1] = (v, u)
            ambiguous_pairs.append((first + 1, first + 2))
        if num_classes % 2 == 1:
            patterns[num_classes - 1] = rng.normal(size=(2, dim))
    else:
        for k in range(num_classes):
            patterns[k] = rng.normal(size=(2, dim))

    frames = cfg.frames_per_video
    target_action = int(round(cfg.instance_density * frames))
    videos: list[VideoFeatures] = []
    segments: list[GroundTruthSegment] = []
    for v in range(cfg.num_videos):
        video_id = f"synth_{v:04d}"
        lengths = _draw_instance_lengths(rng, target_action, cfg)
        while lengths and frames - sum(lengths) < len(lengths) + 1:
            lengths.pop()
        features = np.tile(background, (frames, 1))
        if lengths:
            count = len(lengths)
            spare = frames - sum(lengths) - (count + 1)
            gaps = 1 + rng.multinomial(spare, np.full(count + 1, 1.0 / (count + 1)))
            fixed_class = (v % num_classes) + 1 if cfg.single_class_videos else None
            cursor = 0
            for gap, length in zip(gaps, lengths):
                cursor += int(gap)
                class_id = fixed_class or int(rng.integers(1, num_classes + 1))
                first_phase = length // 2
                pattern = patterns[class_id - 1]
                features[cursor : cursor + first_phase] = pattern[0]
                features[cursor + first_phase : cursor + length] = pattern[1]
                segments.append(
                    GroundTruthSegment(video_id, cursor, cursor + length, class_id)
                )
                cursor += length
        features += rng.normal(size=(frames, dim)) * cfg.prototype_noise
        videos.append(VideoFeatures(video_id, features))

    split = int(round(cfg.train_fraction * cfg.num_videos))
    split = min(max(split, 1), cfg.num_videos - 1)
    ids = [v.video_id for v in videos]
    names = [f"action_{k:02d}" for k in range(1, num_classes + 1)]
    return SynthDataset(
        videos=videos,
        annotations=AnnotationSet(names, segments),
        train_ids=ids[:split],
        test_ids=ids[split:],
        config=cfg,
        background=background,
        class_patterns=patterns,
        ambiguous_pairs=ambiguous_pairs,
    )


def write_manifest(dataset: SynthDataset, path) -> None:
    """Record the split and the generator settings next to the corpus."""
    lines = ["# synthetic corpus manifest"]
    for key, value in sorted(vars(dataset.config).items()):
        lines.append(f"config\t{key}\t{value}")
    split = {vid: "train" for vid in dataset.train_ids}
    split.update({vid: "test" for vid in dataset.test_ids})
    for video in dataset.videos:
        lines.append(
            f"video\t{video.video_id}\t{split[video.video_id]}\t{video.frame_count}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def load_manifest(path) -> dict:
    """Read a manifest back: config echo plus train/test id lists."""
    path = Path(path)
    config: dict[str, str] = {}
    train_ids: list[str] = []
    test_ids: list[str] = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if parts[0] == "config" and len(parts) == 3:
            config[parts[1]] = parts[2]
        elif parts[0] == "video" and len(parts) == 4:
            if parts[2] == "train":
                train_ids.append(parts[1])
            elif parts[2] == "test":
                test_ids.append(parts[1])
            else:
                raise ValueError(f"{path}: line {lineno}: unknown split {parts[2]!r}")
        else:
            raise ValueError(f"{path}: line {lineno}: malformed manifest line")
    return {"config": config, "train_ids": train_ids, "test_ids": test_ids}
