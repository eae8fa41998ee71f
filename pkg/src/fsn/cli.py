"""Command line surface for the localization pipeline.

Every subcommand is a deterministic function of (config file, flags, seed):
rerunning with the same inputs reproduces output files byte for byte. Config
files are flat ``key = value`` lines with ``#`` comments; command-line flags
override file values.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import (
    AnnotationSet,
    ClipSample,
    SynthConfig,
    VideoFeatures,
    WeakSample,
    load_annotations,
    load_feature_dir,
    load_features,
    load_manifest,
    label_frames,
    make_clips,
    make_weak_sample,
    rebalance,
    synth_generate,
    write_annotations,
    write_features,
    write_manifest,
)
from .evaluate import (
    DEFAULT_STRONG_IOUS,
    DEFAULT_WEAK_IOUS,
    EvalConfig,
    EvalReport,
    emit_report,
    frame_level_map,
    segment_level_map,
)
from .localize import (
    FrameScoreTrack,
    load_predictions,
    nms_threshold_for,
    slide_predict,
    sort_predictions,
    track_to_segments,
    weak_score_track,
    write_predictions,
)
from .model import (
    ModelConfig,
    WfsnHead,
    fsn_loss_and_grads,
    fsn_train_step,
    head_parameters,
    init_ablation,
    init_fsn,
    init_wfsn,
    load_model,
    save_model,
    wfsn_loss_and_grads,
    wfsn_position_logits,
    wfsn_train_step,
)
from .nncore import (
    ConvLayer1D,
    GAP,
    GMP,
    OptimizerState,
    bilinear_upsample_1d,
    bilinear_upsample_1d_backward,
    dilated_conv1d_backward,
    dilated_conv1d_forward,
    framewise_cross_entropy,
    gradient_check,
    relu,
    relu_backward,
    temporal_pool,
    temporal_pool_backward,
)

MODES = (
    "synth",
    "train",
    "train-weak",
    "predict",
    "predict-weak",
    "eval",
    "ablate",
    "gradcheck",
)


def _parse_bool(text: str) -> bool:
    lowered = str(text).strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _parse_float_list(text: str) -> tuple[float, ...]:
    return tuple(float(part) for part in str(text).split(",") if part.strip())


def _parse_int_list(text: str) -> tuple[int, ...]:
    return tuple(int(part) for part in str(text).split(",") if part.strip())


# every recognized config key with its parser; flag names mirror these
SCHEMA: dict[str, Callable] = {
    "features_dir": str,
    "annotations": str,
    "manifest": str,
    "model": str,
    "predictions": str,
    "tracks": str,
    "out": str,
    "split": str,
    "num_classes": int,
    "feature_dim": int,
    "hidden_channels": int,
    "snippet_len": int,
    "clip_len": int,
    "dilations": _parse_int_list,
    "pooling": str,
    "learning_rate": float,
    "momentum": float,
    "weight_decay": float,
    "batch_size": int,
    "iterations": int,
    "log_every": int,
    "train_stride": int,
    "min_action_frames": int,
    "weak_positions": int,
    "num_videos": int,
    "frames_per_video": int,
    "prototype_noise": float,
    "context_ambiguity": _parse_bool,
    "instance_density": float,
    "train_fraction": float,
    "single_class_videos": _parse_bool,
    "min_instance_len": int,
    "max_instance_len": int,
    "eval_iou": _parse_float_list,
    "predict_iou": float,
    "ablate_mode": str,
    "gradcheck_seeds": int,
    "seed": int,
    "threads": int,
}


@dataclass
class RunConfig:
    """Merged settings for one command run; ``explicit`` tracks which keys
    the user actually set (file or flag) versus defaults."""

    features_dir: str | None = None
    annotations: str | None = None
    manifest: str | None = None
    model: str | None = None
    predictions: str | None = None
    tracks: str | None = None
    out: str = "out"
    split: str | None = None
    num_classes: int = 4
    feature_dim: int = 16
    hidden_channels: int = 256
    snippet_len: int = 5
    clip_len: int = 35
    dilations: tuple[int, ...] = (1, 2, 4)
    pooling: str = GMP
    learning_rate: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 12
    iterations: int = 2000
    log_every: int = 50
    train_stride: int | None = None
    min_action_frames: int = 5
    weak_positions: int = 100
    num_videos: int = 80
    frames_per_video: int = 600
    prototype_noise: float = 0.3
    context_ambiguity: bool = False
    instance_density: float = 0.2
    train_fraction: float = 0.75
    single_class_videos: bool = False
    min_instance_len: int = 18
    max_instance_len: int = 30
    eval_iou: tuple[float, ...] | None = None
    predict_iou: float = 0.5
    ablate_mode: str = "temporal"
    gradcheck_seeds: int = 20
    seed: int = 42
    threads: int | None = None
    explicit: set = field(default_factory=set, repr=False, compare=False)

    def was_set(self, key: str) -> bool:
        return key in self.explicit


def parse_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` lines; blank lines and ``#`` comments ignored."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}: line {lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in SCHEMA:
            raise ValueError(f"{path}: line {lineno}: unknown key {key!r}")
        if key in values:
            raise ValueError(f"{path}: line {lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def build_config(file_values: dict[str, str], flag_values: dict) -> RunConfig:
    """Defaults, then config file values, then flags."""
    cfg = RunConfig()
    for key, raw in file_values.items():
        try:
            setattr(cfg, key, SCHEMA[key](raw))
        except ValueError as err:
            raise ValueError(f"config key {key!r}: {err}") from None
        cfg.explicit.add(key)
    for key, value in flag_values.items():
        setattr(cfg, key, value)
        cfg.explicit.add(key)
    return cfg


def resolve_threads(cfg: RunConfig) -> int:
    if cfg.threads is not None:
        value = cfg.threads
    else:
        env = os.environ.get("FSN_THREADS", "").strip()
        if env:
            try:
                value = int(env)
            except ValueError:
                raise ValueError(f"FSN_THREADS={env!r} is not an integer") from None
        else:
            value = 1
    if value < 1:
        raise ValueError(f"thread count must be >= 1, got {value}")
    return value


def _map_ordered(fn, items, threads: int) -> list:
    """Apply fn over items, optionally with a worker pool; output keeps order."""
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _require(cfg: RunConfig, *keys: str) -> None:
    missing = [k for k in keys if getattr(cfg, k) is None]
    if missing:
        raise ValueError(f"missing required setting(s): {', '.join(missing)}")


def _model_config(cfg: RunConfig, num_classes: int, feature_dim: int) -> ModelConfig:
    if cfg.was_set("num_classes") and cfg.num_classes != num_classes:
        raise ValueError(
            f"config says {cfg.num_classes} classes, data carries {num_classes}"
        )
    if cfg.was_set("feature_dim") and cfg.feature_dim != feature_dim:
        raise ValueError(
            f"config says feature_dim {cfg.feature_dim}, data carries {feature_dim}"
        )
    return ModelConfig(
        num_classes=num_classes,
        feature_dim=feature_dim,
        hidden_channels=cfg.hidden_channels,
        snippet_len=cfg.snippet_len,
        clip_len=cfg.clip_len,
        dilations=cfg.dilations,
    )


def _select_videos(
    cfg: RunConfig, default_split: str, allow_empty: bool = False
) -> tuple[list[VideoFeatures], str]:
    _require(cfg, "features_dir")
    split = cfg.split or (default_split if cfg.manifest else "all")
    if split not in ("train", "test", "all"):
        raise ValueError(f"split must be train, test, or all, got {split!r}")
    if cfg.manifest:
        manifest = load_manifest(cfg.manifest)
        pools = {
            "train": manifest["train_ids"],
            "test": manifest["test_ids"],
            "all": manifest["train_ids"] + manifest["test_ids"],
        }
        pool = pools[split]
        if not pool:
            if allow_empty:
                return [], split
            raise ValueError(f"split {split!r} selects no videos")
        videos = load_feature_dir(cfg.features_dir, pool)
    else:
        if cfg.split and cfg.split != "all":
            raise ValueError("a train/test split needs a manifest")
        videos = load_feature_dir(cfg.features_dir)
    return videos, split


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _synth_config(cfg: RunConfig) -> SynthConfig:
    return SynthConfig(
        num_videos=cfg.num_videos,
        frames_per_video=cfg.frames_per_video,
        num_classes=cfg.num_classes,
        feature_dim=cfg.feature_dim,
        prototype_noise=cfg.prototype_noise,
        context_ambiguity=cfg.context_ambiguity,
        instance_density=cfg.instance_density,
        seed=cfg.seed,
        train_fraction=cfg.train_fraction,
        single_class_videos=cfg.single_class_videos,
        min_instance_len=cfg.min_instance_len,
        max_instance_len=cfg.max_instance_len,
    )


def cmd_synth(cfg: RunConfig) -> dict:
    """Generate a synthetic corpus: one .fsnf per video, annotations, manifest."""
    out = _out_dir(cfg)
    dataset = synth_generate(_synth_config(cfg))
    for video in dataset.videos:
        write_features(video, out / f"{video.video_id}.fsnf")
    annotations_path = out / "annotations.tsv"
    write_annotations(dataset.annotations, annotations_path)
    manifest_path = out / "manifest.tsv"
    write_manifest(dataset, manifest_path)
    return {
        "out": out,
        "annotations": annotations_path,
        "manifest": manifest_path,
        "videos": len(dataset.videos),
    }


def _load_corpus(cfg: RunConfig, default_split: str):
    videos, split = _select_videos(cfg, default_split)
    _require(cfg, "annotations")
    frame_counts = {
        p.stem: load_features(p).frame_count
        for p in sorted(Path(cfg.features_dir).glob("*.fsnf"))
    }
    annotations = load_annotations(cfg.annotations, frame_counts=frame_counts)
    return videos, split, annotations


def _write_loss_log(rows: list[tuple[int, float]], path: Path) -> None:
    lines = ["iteration,loss"]
    lines.extend(f"{step},{loss:.6f}" for step, loss in rows)
    path.write_text("\n".join(lines) + "\n")


def _train_strong(cfg: RunConfig, init_fn, out: Path) -> dict:
    videos, split, annotations = _load_corpus(cfg, "train")
    model_config = _model_config(
        cfg, annotations.num_classes, videos[0].feature_dim
    )
    stride = cfg.train_stride or max(cfg.clip_len // 5, 1)
    by_video = annotations.by_video()
    clips = []
    for video in videos:
        clips.extend(
            make_clips(
                video,
                by_video.get(video.video_id, []),
                clip_len=model_config.clip_len,
                snippet_len=model_config.snippet_len,
                stride=stride,
                min_action_frames=cfg.min_action_frames,
            )
        )
    if not clips:
        raise ValueError(
            f"no training window passed the >= {cfg.min_action_frames} "
            f"action-frame rule"
        )
    clips = rebalance(clips, seed=cfg.seed)
    head = init_fn(model_config, cfg.seed)
    optimizer = OptimizerState(
        learning_rate=cfg.learning_rate,
        momentum=cfg.momentum,
        weight_decay=cfg.weight_decay,
    )
    batch_rng = np.random.default_rng([cfg.seed, 1])
    rows = []
    for step in range(1, cfg.iterations + 1):
        picks = batch_rng.integers(0, len(clips), size=cfg.batch_size)
        loss = fsn_train_step([clips[i] for i in picks], head, optimizer)
        if step % cfg.log_every == 0:
            rows.append((step, loss))
    model_path = Path(cfg.model) if cfg.model else out / "model.fsn"
    save_model(head, model_path)
    log_path = out / "train_log.csv"
    _write_loss_log(rows, log_path)
    return {"model": model_path, "log": log_path, "clips": len(clips), "split": split}


def cmd_train(cfg: RunConfig) -> dict:
    """Train the dilated temporal head on dense frame labels."""
    return _train_strong(cfg, init_fsn, _out_dir(cfg))


def cmd_train_weak(cfg: RunConfig) -> dict:
    """Train the weakly supervised head from video-level labels only."""
    out = _out_dir(cfg)
    videos, split, annotations = _load_corpus(cfg, "train")
    model_config = _model_config(cfg, annotations.num_classes, videos[0].feature_dim)
    labeled = [(v, annotations.video_classes(v.video_id)) for v in videos]
    labeled = [(v, classes) for v, classes in labeled if classes]
    if not labeled:
        raise ValueError("no training video carries an action label")
    too_short = [v.video_id for v, _ in labeled if v.frame_count < cfg.weak_positions]
    if too_short:
        raise ValueError(
            f"video(s) shorter than {cfg.weak_positions} frames: {too_short[:3]}"
        )
    head = init_wfsn(model_config, cfg.seed, pooling=cfg.pooling)
    optimizer = OptimizerState(
        learning_rate=cfg.learning_rate,
        momentum=cfg.momentum,
        weight_decay=cfg.weight_decay,
    )
    rng = np.random.default_rng([cfg.seed, 2])
    rows = []
    for step in range(1, cfg.iterations + 1):
        picks = rng.integers(0, len(labeled), size=cfg.batch_size)
        batch = []
        for i in picks:
            video, classes = labeled[i]
            batch.append(
                make_weak_sample(
                    video,
                    classes,
                    model_config.num_classes,
                    positions=cfg.weak_positions,
                    seed=int(rng.integers(2**63)),
                )
            )
        loss = wfsn_train_step(batch, head, optimizer)
        if step % cfg.log_every == 0:
            rows.append((step, loss))
    model_path = Path(cfg.model) if cfg.model else out / "model.fsn"
    save_model(head, model_path)
    log_path = out / "train_log.csv"
    _write_loss_log(rows, log_path)
    return {"model": model_path, "log": log_path, "split": split}


def _write_track_files(tracks: Sequence[FrameScoreTrack], directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for track in tracks:
        write_features(
            VideoFeatures(track.video_id, track.scores),
            directory / f"{track.video_id}.fsnf",
        )


def _predict(cfg: RunConfig, weak: bool) -> dict:
    _require(cfg, "model")
    out = _out_dir(cfg)
    head = load_model(cfg.model)
    if weak and not isinstance(head, WfsnHead):
        raise ValueError(f"{cfg.model}: not a weakly supervised model")
    if not weak and isinstance(head, WfsnHead):
        raise ValueError(f"{cfg.model}: weakly supervised model; use predict-weak")
    if cfg.was_set("num_classes") and cfg.num_classes != head.config.num_classes:
        raise ValueError(
            f"model was trained with {head.config.num_classes} classes, "
            f"config asks for {cfg.num_classes}"
        )
    if cfg.was_set("feature_dim") and cfg.feature_dim != head.config.feature_dim:
        raise ValueError(
            f"model expects feature_dim {head.config.feature_dim}, "
            f"config asks for {cfg.feature_dim}"
        )
    videos, split = _select_videos(cfg, "test", allow_empty=True)
    for video in videos:
        if video.feature_dim != head.config.feature_dim:
            raise ValueError(
                f"{video.video_id}: feature_dim {video.feature_dim} does not "
                f"match the model's {head.config.feature_dim}"
            )
    threads = resolve_threads(cfg)
    nms_iou = nms_threshold_for(cfg.predict_iou)
    if weak:
        scorer = lambda video: weak_score_track(head, video, cfg.weak_positions)
    else:
        scorer = lambda video: slide_predict(head, video)
    tracks = _map_ordered(scorer, videos, threads)
    predictions = []
    for track in tracks:
        predictions.extend(track_to_segments(track, nms_iou))
    predictions = sort_predictions(predictions)
    predictions_path = (
        Path(cfg.predictions) if cfg.predictions else out / "predictions.tsv"
    )
    write_predictions(predictions, predictions_path)
    tracks_dir = Path(cfg.tracks) if cfg.tracks else out / "tracks"
    _write_track_files(tracks, tracks_dir)
    log_lines = [
        f"command = {'predict-weak' if weak else 'predict'}",
        f"model = {cfg.model}",
        f"split = {split}",
        f"videos = {len(videos)}",
        f"predictions = {len(predictions)}",
        f"predict_iou = {cfg.predict_iou:g}",
        f"nms_iou = {nms_iou:g}",
        f"weak_positions = {cfg.weak_positions}" if weak else None,
        f"threads = {threads}",
        f"seed = {cfg.seed}",
    ]
    log_path = out / "predict_log.txt"
    log_path.write_text("\n".join(l for l in log_lines if l is not None) + "\n")
    return {
        "predictions": predictions_path,
        "tracks": tracks_dir,
        "log": log_path,
        "count": len(predictions),
    }


def cmd_predict(cfg: RunConfig) -> dict:
    """Dense scoring and segment extraction with a strongly supervised model."""
    return _predict(cfg, weak=False)


def cmd_predict_weak(cfg: RunConfig) -> dict:
    """Segment extraction from a weakly supervised model's position scores."""
    return _predict(cfg, weak=True)


def _load_tracks(tracks_dir: Path, num_classes: int) -> list[FrameScoreTrack]:
    paths = sorted(tracks_dir.glob("*.fsnf"))
    if not paths:
        raise ValueError(f"{tracks_dir}: no score tracks found")
    tracks = []
    for path in paths:
        stored = load_features(path)
        channels = stored.feature_dim
        if channels == num_classes + 1:
            with_background = True
        elif channels == num_classes:
            with_background = False
        else:
            raise ValueError(
                f"{path}: track has {channels} channels for {num_classes} classes"
            )
        tracks.append(
            FrameScoreTrack(stored.video_id, stored.features, with_background)
        )
    return tracks


def cmd_eval(cfg: RunConfig) -> dict:
    """Segment-level and frame-level evaluation of a prediction file."""
    _require(cfg, "annotations")
    out = _out_dir(cfg)
    predictions_path = (
        Path(cfg.predictions) if cfg.predictions else out / "predictions.tsv"
    )
    tracks_dir = Path(cfg.tracks) if cfg.tracks else out / "tracks"
    annotations = load_annotations(cfg.annotations)
    tracks = _load_tracks(tracks_dir, annotations.num_classes)
    evaluated_ids = {t.video_id for t in tracks}
    with_background = tracks[0].includes_background
    thresholds = cfg.eval_iou or (
        DEFAULT_STRONG_IOUS if with_background else DEFAULT_WEAK_IOUS
    )
    eval_config = EvalConfig(annotations.num_classes, thresholds)
    predictions = load_predictions(predictions_path)
    test_gt = AnnotationSet(
        annotations.class_names,
        [s for s in annotations.segments if s.video_id in evaluated_ids],
    )
    report = segment_level_map(
        predictions, test_gt, eval_config, video_ids=evaluated_ids
    )
    labels = {}
    gt_by_video = test_gt.by_video()
    for track in tracks:
        labels[track.video_id] = label_frames(
            track.frame_count, gt_by_video.get(track.video_id, [])
        )
    frame_ap, frame_map = frame_level_map(tracks, labels)
    report = replace(report, frame_ap=frame_ap, frame_map=frame_map)
    report_path = out / "report.csv"
    emit_report(report, report_path)
    return {"report": report_path, "result": report}


def _comparison_rows(
    names: tuple[str, str], reports: tuple[EvalReport, EvalReport]
) -> list[str]:
    thresholds = reports[0].iou_thresholds
    header = "model,frame_map," + ",".join(f"iou_{t:g}" for t in thresholds)
    lines = [header]
    for name, report in zip(names, reports):
        cells = [f"{report.frame_map:.4f}"]
        cells.extend(f"{v:.4f}" for v in report.segment_map)
        lines.append(f"{name}," + ",".join(cells))
    first, second = reports
    deltas = [f"{first.frame_map - second.frame_map:.4f}"]
    deltas.extend(
        f"{a - b:.4f}" for a, b in zip(first.segment_map, second.segment_map)
    )
    lines.append("delta," + ",".join(deltas))
    return lines


def _run_variant(cfg: RunConfig, name: str, train_fn, predict_fn) -> EvalReport:
    variant_out = str(Path(cfg.out) / name)
    train_cfg = replace(cfg, out=variant_out, model=None, predictions=None, tracks=None)
    train_cfg.explicit = set(cfg.explicit)
    train_fn(train_cfg)
    run_cfg = replace(train_cfg, model=str(Path(variant_out) / "model.fsn"), split="test")
    run_cfg.explicit = set(cfg.explicit)
    predict_fn(run_cfg)
    return cmd_eval(run_cfg)["result"]


def cmd_ablate(cfg: RunConfig) -> dict:
    """Train and evaluate a matched pair of heads; emit the side-by-side table."""
    out = _out_dir(cfg)
    if cfg.ablate_mode == "temporal":
        names = ("fsn", "ablation")
        first = _run_variant(cfg, "fsn", cmd_train, cmd_predict)
        second = _run_variant(
            cfg,
            "ablation",
            lambda c: _train_strong(c, init_ablation, _out_dir(c)),
            cmd_predict,
        )
    elif cfg.ablate_mode == "pooling":
        names = ("gmp", "gap")
        gmp_cfg = replace(cfg, pooling=GMP)
        gmp_cfg.explicit = set(cfg.explicit)
        gap_cfg = replace(cfg, pooling=GAP)
        gap_cfg.explicit = set(cfg.explicit)
        first = _run_variant(gmp_cfg, "gmp", cmd_train_weak, cmd_predict_weak)
        second = _run_variant(gap_cfg, "gap", cmd_train_weak, cmd_predict_weak)
    else:
        raise ValueError(
            f"ablate_mode must be 'temporal' or 'pooling', got {cfg.ablate_mode!r}"
        )
    lines = _comparison_rows(names, (first, second))
    table_path = out / "ablation.csv"
    table_path.write_text("\n".join(lines) + "\n")
    return {"table": table_path, "reports": {names[0]: first, names[1]: second}}


def _kink_margin(head, features) -> float:
    """Distance of the closest hidden pre-activation to the ReLU kink."""
    x = np.asarray(features, dtype=np.float64)
    margin = np.inf
    for layer in getattr(head, "convs", []):
        z, _ = dilated_conv1d_forward(x, layer)
        margin = min(margin, float(np.abs(z).min()))
        x = np.maximum(z, 0.0)
    return margin


def _pool_margin(head: WfsnHead, features) -> float:
    """Gap between the top two position logits per channel (GMP tie margin)."""
    logits = wfsn_position_logits(np.asarray(features, dtype=np.float64), head)
    ordered = np.sort(logits, axis=0)
    return float((ordered[-1] - ordered[-2]).min())


def _conditioned_case(build, margin_fn, floor: float = 2e-3, tries: int = 64):
    """Redraw until the case sits far enough from every non-smooth point.

    Central differences step 1e-4 across a ReLU kink or a max-pool tie and
    report a spurious mismatch; requiring a margin of ``floor`` keeps the
    check strict everywhere the loss is differentiable.
    """
    for attempt in range(tries):
        head, batch = build(attempt)
        if margin_fn(head, batch) > floor:
            return head, batch
    raise RuntimeError("no well-conditioned gradient-check case found")


def _layer_check(rng, dilation: int, tolerance: float, step: float):
    layer = ConvLayer1D(
        weights=rng.standard_normal((2, 3, 3)),
        bias=rng.standard_normal(2),
        dilation=dilation,
    )
    x = rng.standard_normal((8, 3))
    probe = rng.standard_normal((8, 2))

    def fn(params):
        out, cache = dilated_conv1d_forward(x, layer)
        loss = float((out * probe).sum())
        _, grad_w, grad_b = dilated_conv1d_backward(probe, cache)
        return loss, [grad_w, grad_b]

    return gradient_check(fn, [layer.weights, layer.bias], tolerance, step)


def gradcheck_suite(
    seeds: Sequence[int], tolerance: float = 1e-5, step: float = 1e-4
) -> tuple[dict[str, float], float]:
    """Max relative error per check over seeds, plus the negative control."""
    worst: dict[str, float] = {}

    def record(name: str, report) -> None:
        worst[name] = max(worst.get(name, 0.0), report.max_rel_error)

    for seed in seeds:
        rng = np.random.default_rng(seed)
        for dilation in (1, 2, 4):
            record(f"conv_dilation{dilation}", _layer_check(rng, dilation, tolerance, step))

        x = rng.standard_normal((6, 4))
        x[np.abs(x) < 0.05] = 0.1
        probe = rng.standard_normal((6, 4))

        def relu_fn(params):
            out, cache = relu(params[0])
            return float((out * probe).sum()), [relu_backward(probe, cache)]

        record("relu", gradient_check(relu_fn, [x], tolerance, step))

        up_in = rng.standard_normal((4, 3))
        up_probe = rng.standard_normal((9, 3))

        def up_fn(params):
            out, cache = bilinear_upsample_1d(params[0], 9)
            loss = float((out * up_probe).sum())
            return loss, [bilinear_upsample_1d_backward(up_probe, cache)]

        record("bilinear_upsample", gradient_check(up_fn, [up_in], tolerance, step))

        logits = rng.standard_normal((2, 4, 3))
        labels = np.zeros((2, 4, 3))
        labels[
            np.arange(2)[:, None], np.arange(4)[None, :], rng.integers(0, 3, (2, 4))
        ] = 1.0

        def ce_fn(params):
            loss, grad = framewise_cross_entropy(params[0], labels)
            return loss, [grad]

        record("cross_entropy", gradient_check(ce_fn, [logits], tolerance, step))

        pool_in = rng.permuted(np.linspace(-4.0, 4.0, 12)).reshape(6, 2)
        pool_probe = rng.standard_normal(2)
        for mode in (GAP, GMP):

            def pool_fn(params, mode=mode):
                out, cache = temporal_pool(params[0], mode)
                loss = float((out * pool_probe).sum())
                return loss, [temporal_pool_backward(pool_probe, cache)]

            record(f"pool_{mode}", gradient_check(pool_fn, [pool_in], tolerance, step))

        small = ModelConfig(
            num_classes=2, feature_dim=3, hidden_channels=4, snippet_len=5, clip_len=15
        )

        def build_fsn(attempt):
            case_rng = np.random.default_rng([seed, attempt, 11])
            head = init_fsn(small, seed * 101 + attempt)
            batch = [
                ClipSample(
                    features=case_rng.standard_normal((3, 3)),
                    labels=case_rng.integers(0, 3, size=15),
                )
                for _ in range(2)
            ]
            return head, batch

        def clips_margin(head, batch):
            return min(_kink_margin(head, clip.features) for clip in batch)

        fsn_head, clips = _conditioned_case(build_fsn, clips_margin)
        record(
            "fsn_end_to_end",
            gradient_check(
                lambda params: fsn_loss_and_grads(clips, fsn_head),
                head_parameters(fsn_head),
                tolerance,
                step,
            ),
        )

        ablation_head = init_ablation(small, seed)
        record(
            "ablation_end_to_end",
            gradient_check(
                lambda params: fsn_loss_and_grads(clips, ablation_head),
                head_parameters(ablation_head),
                tolerance,
                step,
            ),
        )

        for mode in (GAP, GMP):

            def build_weak(attempt, mode=mode):
                case_rng = np.random.default_rng([seed, attempt, 13])
                head = init_wfsn(small, seed * 101 + attempt, pooling=mode)
                batch = []
                for cls in (1, 2):
                    label = np.zeros(2)
                    label[cls - 1] = 1.0
                    batch.append(
                        WeakSample(
                            features=case_rng.standard_normal((5, 3)),
                            video_label=label,
                        )
                    )
                return head, batch

            def weak_margin(head, batch, mode=mode):
                margin = min(_kink_margin(head, s.features) for s in batch)
                if mode == GMP:
                    margin = min(
                        margin, min(_pool_margin(head, s.features) for s in batch)
                    )
                return margin

            weak_head, weak_batch = _conditioned_case(build_weak, weak_margin)
            record(
                f"wfsn_end_to_end_{mode}",
                gradient_check(
                    lambda params: wfsn_loss_and_grads(weak_batch, weak_head),
                    head_parameters(weak_head),
                    tolerance,
                    step,
                ),
            )

    # negative control: a deliberately corrupted backward pass must be caught
    rng = np.random.default_rng(seeds[0] if len(seeds) else 0)
    layer = ConvLayer1D(
        weights=rng.standard_normal((2, 3, 3)), bias=rng.standard_normal(2), dilation=2
    )
    x = rng.standard_normal((8, 3))
    probe = rng.standard_normal((8, 2))

    def corrupted(params):
        out, cache = dilated_conv1d_forward(x, layer)
        loss = float((out * probe).sum())
        _, grad_w, grad_b = dilated_conv1d_backward(probe, cache)
        return loss, [grad_w * 1.01, grad_b]

    control = gradient_check(corrupted, [layer.weights, layer.bias], tolerance, step)
    return worst, control.max_rel_error


def cmd_gradcheck(cfg: RunConfig) -> int:
    """Finite-difference audit of every backward pass; nonzero exit on failure."""
    out = _out_dir(cfg)
    tolerance, step = 1e-5, 1e-4
    seeds = list(range(cfg.seed, cfg.seed + cfg.gradcheck_seeds))
    worst, control_error = gradcheck_suite(seeds, tolerance, step)
    lines = [f"{'check':<24} {'max_rel_error':>14}  status"]
    all_pass = True
    for name in sorted(worst):
        error = worst[name]
        ok = error < tolerance
        all_pass &= ok
        lines.append(f"{name:<24} {error:>14.3e}  {'pass' if ok else 'FAIL'}")
    control_ok = control_error >= tolerance
    lines.append(
        f"{'negative_control':<24} {control_error:>14.3e}  "
        f"{'caught' if control_ok else 'MISSED'}"
    )
    verdict = all_pass and control_ok
    lines.append(
        f"overall: {'pass' if verdict else 'FAIL'} "
        f"(tolerance {tolerance:g}, step {step:g}, seeds {len(seeds)})"
    )
    text = "\n".join(lines) + "\n"
    (out / "gradcheck.txt").write_text(text)
    sys.stdout.write(text)
    return 0 if verdict else 1


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value settings file")
    for key, parser_fn in SCHEMA.items():
        flag = "--" + key.replace("_", "-")
        common.add_argument(flag, dest=key, type=parser_fn, default=None)
    parser = argparse.ArgumentParser(
        prog="fsn",
        description="temporal action localization on precomputed frame features",
    )
    sub = parser.add_subparsers(dest="mode", required=True)
    descriptions = {
        "synth": "generate a synthetic feature corpus",
        "train": "train the dilated temporal head on dense labels",
        "train-weak": "train the weakly supervised head on video labels",
        "predict": "write segment predictions from a trained model",
        "predict-weak": "segment predictions from a weak model",
        "eval": "score a prediction file against ground truth",
        "ablate": "train and compare a matched pair of heads",
        "gradcheck": "finite-difference audit of all backward passes",
    }
    for mode in MODES:
        sub.add_parser(mode, parents=[common], help=descriptions[mode])
    return parser


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "train-weak": cmd_train_weak,
    "predict": cmd_predict,
    "predict-weak": cmd_predict_weak,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        file_values = parse_config_file(args.config) if args.config else {}
        flag_values = {
            key: getattr(args, key)
            for key in SCHEMA
            if getattr(args, key, None) is not None
        }
        cfg = build_config(file_values, flag_values)
        result = COMMANDS[args.mode](cfg)
    except Exception as err:  # deliberate: CLI boundary turns errors into exit codes
        print(f"error: {err}", file=sys.stderr)
        return 1
    return result if isinstance(result, int) else 0


if __name__ == "__main__":
    raise SystemExit(main())
