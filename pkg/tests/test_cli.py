"""End-to-end tests for the command line surface."""

import numpy as np
import pytest

from fsn.cli import (
    RunConfig,
    build_config,
    main,
    parse_config_file,
    resolve_threads,
)
from fsn.data import load_manifest
from fsn.evaluate import EvalConfig, frame_level_map, load_report, segment_level_map
from fsn.localize import FrameScoreTrack, load_predictions
from fsn.model import load_model


# ---------------------------------------------------------------- config


def test_parse_config_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(
        "# training setup\n"
        "\n"
        "iterations = 500\n"
        "learning_rate = 0.001\n"
        "eval_iou = 0.3,0.5\n"
        "context_ambiguity = true\n"
    )
    values = parse_config_file(path)
    assert values == {
        "iterations": "500",
        "learning_rate": "0.001",
        "eval_iou": "0.3,0.5",
        "context_ambiguity": "true",
    }


def test_config_file_rejects_unknown_key(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("iteratons = 500\n")
    with pytest.raises(ValueError, match="unknown key"):
        parse_config_file(path)


def test_config_file_rejects_duplicate_key(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("seed = 1\nseed = 2\n")
    with pytest.raises(ValueError, match="duplicate"):
        parse_config_file(path)


def test_config_file_rejects_malformed_line(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("just some words\n")
    with pytest.raises(ValueError, match="expected 'key = value'"):
        parse_config_file(path)


def test_build_config_coerces_types():
    cfg = build_config(
        {"iterations": "500", "eval_iou": "0.3,0.5", "context_ambiguity": "yes"},
        {},
    )
    assert cfg.iterations == 500
    assert cfg.eval_iou == (0.3, 0.5)
    assert cfg.context_ambiguity is True
    assert cfg.was_set("iterations") and not cfg.was_set("seed")


def test_flags_override_config_file():
    cfg = build_config({"seed": "1", "iterations": "10"}, {"seed": 99})
    assert cfg.seed == 99
    assert cfg.iterations == 10


def test_build_config_reports_bad_value():
    with pytest.raises(ValueError, match="context_ambiguity"):
        build_config({"context_ambiguity": "maybe"}, {})


def test_threads_resolution(monkeypatch):
    monkeypatch.delenv("FSN_THREADS", raising=False)
    assert resolve_threads(RunConfig()) == 1
    assert resolve_threads(RunConfig(threads=3)) == 3
    monkeypatch.setenv("FSN_THREADS", "4")
    assert resolve_threads(RunConfig()) == 4
    assert resolve_threads(RunConfig(threads=2)) == 2  # explicit setting wins
    monkeypatch.setenv("FSN_THREADS", "lots")
    with pytest.raises(ValueError, match="FSN_THREADS"):
        resolve_threads(RunConfig())
    with pytest.raises(ValueError, match=">= 1"):
        resolve_threads(RunConfig(threads=0))


# ---------------------------------------------------------------- corpus fixture


SYNTH_ARGS = [
    "--num-videos", "8",
    "--frames-per-video", "200",
    "--num-classes", "3",
    "--feature-dim", "6",
    "--seed", "7",
]


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    assert main(["synth", "--out", str(out), *SYNTH_ARGS]) == 0
    return out


@pytest.fixture(scope="module")
def trained(tmp_path_factory, corpus):
    out = tmp_path_factory.mktemp("trained")
    rc = main([
        "train",
        "--features-dir", str(corpus),
        "--annotations", str(corpus / "annotations.tsv"),
        "--manifest", str(corpus / "manifest.tsv"),
        "--out", str(out),
        "--hidden-channels", "8",
        "--iterations", "100",
        "--learning-rate", "0.001",
        "--seed", "7",
    ])
    assert rc == 0
    return out


# ---------------------------------------------------------------- synth


def test_synth_writes_one_file_per_video_plus_two(corpus):
    assert len(list(corpus.iterdir())) == 8 + 2


def test_synth_manifest_echoes_config(corpus):
    manifest = load_manifest(corpus / "manifest.tsv")
    assert manifest["config"]["num_videos"] == "8"
    assert manifest["config"]["num_classes"] == "3"
    assert len(manifest["train_ids"]) + len(manifest["test_ids"]) == 8


def test_synth_rerun_is_byte_identical(corpus, tmp_path):
    again = tmp_path / "again"
    assert main(["synth", "--out", str(again), *SYNTH_ARGS]) == 0
    for path in sorted(corpus.iterdir()):
        assert (again / path.name).read_bytes() == path.read_bytes()


# ---------------------------------------------------------------- train


def test_train_logs_one_row_per_interval(trained):
    lines = (trained / "train_log.csv").read_text().splitlines()
    assert lines[0] == "iteration,loss"
    assert len(lines) - 1 == 100 // 50
    assert lines[1].startswith("50,")


def test_train_rerun_is_byte_identical(corpus, trained, tmp_path):
    again = tmp_path / "again"
    rc = main([
        "train",
        "--features-dir", str(corpus),
        "--annotations", str(corpus / "annotations.tsv"),
        "--manifest", str(corpus / "manifest.tsv"),
        "--out", str(again),
        "--hidden-channels", "8",
        "--iterations", "100",
        "--learning-rate", "0.001",
        "--seed", "7",
    ])
    assert rc == 0
    assert (again / "model.fsn").read_bytes() == (trained / "model.fsn").read_bytes()
    assert (again / "train_log.csv").read_bytes() == (trained / "train_log.csv").read_bytes()


def test_train_reads_settings_from_config_file(corpus, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(
        f"features_dir = {corpus}\n"
        f"annotations = {corpus / 'annotations.tsv'}\n"
        f"out = {tmp_path / 'out'}\n"
        "hidden_channels = 8\n"
        "iterations = 50\n"
        "learning_rate = 0.001\n"
    )
    assert main(["train", "--config", str(cfg)]) == 0
    assert (tmp_path / "out" / "model.fsn").exists()


def test_train_fails_when_no_window_qualifies(corpus, capsys):
    rc = main([
        "train",
        "--features-dir", str(corpus),
        "--annotations", str(corpus / "annotations.tsv"),
        "--out", str(corpus.parent / "unused"),
        "--min-action-frames", "10000",
    ])
    assert rc == 1
    assert "action-frame" in capsys.readouterr().err


def test_train_rejects_class_count_mismatch(corpus, capsys):
    rc = main([
        "train",
        "--features-dir", str(corpus),
        "--annotations", str(corpus / "annotations.tsv"),
        "--out", str(corpus.parent / "unused"),
        "--num-classes", "9",
    ])
    assert rc == 1
    assert "9 classes" in capsys.readouterr().err


# ---------------------------------------------------------------- train-weak


def test_train_weak_round_trips_pooling(corpus, tmp_path):
    out = tmp_path / "weak"
    rc = main([
        "train-weak",
        "--features-dir", str(corpus),
        "--annotations", str(corpus / "annotations.tsv"),
        "--manifest", str(corpus / "manifest.tsv"),
        "--out", str(out),
        "--hidden-channels", "8",
        "--iterations", "20",
        "--weak-positions", "40",
        "--pooling", "gap",
        "--seed", "7",
    ])
    assert rc == 0
    assert load_model(out / "model.fsn").pooling == "gap"


def test_train_weak_rejects_short_videos(corpus, capsys):
    rc = main([
        "train-weak",
        "--features-dir", str(corpus),
        "--annotations", str(corpus / "annotations.tsv"),
        "--out", str(corpus.parent / "unused"),
        "--weak-positions", "500",
    ])
    assert rc == 1
    assert "shorter than 500" in capsys.readouterr().err


# ---------------------------------------------------------------- predict


def predict_args(corpus, trained, out):
    return [
        "predict",
        "--features-dir", str(corpus),
        "--manifest", str(corpus / "manifest.tsv"),
        "--model", str(trained / "model.fsn"),
        "--out", str(out),
        "--seed", "7",
    ]


def test_predict_writes_predictions_tracks_and_log(corpus, trained, tmp_path):
    out = tmp_path / "pred"
    assert main(predict_args(corpus, trained, out)) == 0
    predictions = load_predictions(out / "predictions.tsv")
    assert predictions
    manifest = load_manifest(corpus / "manifest.tsv")
    track_files = sorted(p.stem for p in (out / "tracks").glob("*.fsnf"))
    assert track_files == sorted(manifest["test_ids"])
    log = (out / "predict_log.txt").read_text()
    assert "predict_iou = 0.5" in log
    assert "nms_iou = 0.4" in log


def test_predict_nms_rule_follows_predict_iou(corpus, trained, tmp_path):
    out = tmp_path / "pred"
    assert main([*predict_args(corpus, trained, out), "--predict-iou", "0.7"]) == 0
    log = (out / "predict_log.txt").read_text()
    assert "predict_iou = 0.7" in log
    assert "nms_iou = 0.6" in log


def test_predict_rerun_is_byte_identical(corpus, trained, tmp_path):
    first, second = tmp_path / "a", tmp_path / "b"
    assert main(predict_args(corpus, trained, first)) == 0
    assert main([*predict_args(corpus, trained, second), "--threads", "2"]) == 0
    assert (first / "predictions.tsv").read_bytes() == (second / "predictions.tsv").read_bytes()
    for track in sorted((first / "tracks").glob("*.fsnf")):
        assert track.read_bytes() == (second / "tracks" / track.name).read_bytes()


def test_predict_empty_split_writes_header_only(corpus, trained, tmp_path):
    # a manifest that assigns every video to train leaves the test split empty
    manifest = tmp_path / "manifest.tsv"
    lines = []
    for line in (corpus / "manifest.tsv").read_text().splitlines():
        lines.append(line.replace("\ttest\t", "\ttrain\t") if line.startswith("video\t") else line)
    manifest.write_text("\n".join(lines) + "\n")
    out = tmp_path / "pred"
    rc = main([
        "predict",
        "--features-dir", str(corpus),
        "--manifest", str(manifest),
        "--model", str(trained / "model.fsn"),
        "--out", str(out),
    ])
    assert rc == 0
    assert (out / "predictions.tsv").read_text() == "video_id\tstart\tend\tclass_id\tconfidence\n"


def test_predict_rejects_weak_model(corpus, tmp_path, capsys):
    out = tmp_path / "weak"
    main([
        "train-weak",
        "--features-dir", str(corpus),
        "--annotations", str(corpus / "annotations.tsv"),
        "--out", str(out),
        "--hidden-channels", "8",
        "--iterations", "5",
        "--weak-positions", "40",
    ])
    rc = main([
        "predict",
        "--features-dir", str(corpus),
        "--model", str(out / "model.fsn"),
        "--out", str(tmp_path / "pred"),
    ])
    assert rc == 1
    assert "predict-weak" in capsys.readouterr().err


def test_predict_rejects_class_count_mismatch(corpus, trained, tmp_path, capsys):
    rc = main([
        *predict_args(corpus, trained, tmp_path / "pred"),
        "--num-classes", "5",
    ])
    assert rc == 1
    assert "asks for 5" in capsys.readouterr().err


# ---------------------------------------------------------------- eval


@pytest.fixture(scope="module")
def predicted(tmp_path_factory, corpus, trained):
    out = tmp_path_factory.mktemp("predicted")
    assert main(predict_args(corpus, trained, out)) == 0
    return out


def test_eval_writes_report(corpus, predicted):
    rc = main([
        "eval",
        "--annotations", str(corpus / "annotations.tsv"),
        "--out", str(predicted),
    ])
    assert rc == 0
    report = load_report(predicted / "report.csv")
    assert "mAP" in report
    assert set(report["mAP"]) == {"iou_0.3", "iou_0.4", "iou_0.5", "iou_0.6", "iou_0.7", "frame_ap"}


def test_eval_matches_library_result(corpus, predicted):
    from fsn.data import AnnotationSet, load_annotations, load_features, label_frames

    main(["eval", "--annotations", str(corpus / "annotations.tsv"), "--out", str(predicted)])
    report = load_report(predicted / "report.csv")

    annotations = load_annotations(corpus / "annotations.tsv")
    tracks = [
        FrameScoreTrack(p.stem, load_features(p).features, includes_background=True)
        for p in sorted((predicted / "tracks").glob("*.fsnf"))
    ]
    test_ids = {t.video_id for t in tracks}
    test_gt = AnnotationSet(
        annotations.class_names,
        [s for s in annotations.segments if s.video_id in test_ids],
    )
    segment = segment_level_map(
        load_predictions(predicted / "predictions.tsv"),
        test_gt,
        EvalConfig(annotations.num_classes),
        video_ids=test_ids,
    )
    by_video = test_gt.by_video()
    labels = {
        t.video_id: label_frames(t.frame_count, by_video.get(t.video_id, []))
        for t in tracks
    }
    _, frame_map = frame_level_map(tracks, labels)
    assert report["mAP"]["iou_0.5"] == pytest.approx(segment.segment_map[2], abs=5e-5)
    assert report["mAP"]["frame_ap"] == pytest.approx(frame_map, abs=5e-5)


def test_eval_echoes_requested_thresholds(corpus, predicted, tmp_path):
    out = tmp_path / "eval"
    rc = main([
        "eval",
        "--annotations", str(corpus / "annotations.tsv"),
        "--predictions", str(predicted / "predictions.tsv"),
        "--tracks", str(predicted / "tracks"),
        "--out", str(out),
        "--eval-iou", "0.2,0.5",
    ])
    assert rc == 0
    header = (out / "report.csv").read_text().splitlines()[0]
    assert header == "class,iou_0.2,iou_0.5,frame_ap"


def test_eval_rejects_predictions_for_unknown_video(corpus, predicted, tmp_path, capsys):
    bad = tmp_path / "bad.tsv"
    text = (predicted / "predictions.tsv").read_text().splitlines()
    bad.write_text(text[0] + "\nno_such_video\t0\t10\t1\t0.5\n")
    rc = main([
        "eval",
        "--annotations", str(corpus / "annotations.tsv"),
        "--predictions", str(bad),
        "--tracks", str(predicted / "tracks"),
        "--out", str(tmp_path / "out"),
    ])
    assert rc == 1
    assert "no_such_video" in capsys.readouterr().err


def test_eval_rerun_is_byte_identical(corpus, predicted, tmp_path):
    first, second = tmp_path / "a", tmp_path / "b"
    for out in (first, second):
        rc = main([
            "eval",
            "--annotations", str(corpus / "annotations.tsv"),
            "--predictions", str(predicted / "predictions.tsv"),
            "--tracks", str(predicted / "tracks"),
            "--out", str(out),
        ])
        assert rc == 0
    assert (first / "report.csv").read_bytes() == (second / "report.csv").read_bytes()


# ---------------------------------------------------------------- ablate


def ablate_args(corpus, out, mode):
    return [
        "ablate",
        "--features-dir", str(corpus),
        "--annotations", str(corpus / "annotations.tsv"),
        "--manifest", str(corpus / "manifest.tsv"),
        "--out", str(out),
        "--hidden-channels", "8",
        "--iterations", "40",
        "--learning-rate", "0.001",
        "--weak-positions", "40",
        "--seed", "7",
        "--ablate-mode", mode,
    ]


def test_ablate_temporal_table_shape_and_deltas(corpus, tmp_path):
    out = tmp_path / "ab"
    assert main(ablate_args(corpus, out, "temporal")) == 0
    lines = (out / "ablation.csv").read_text().splitlines()
    assert len(lines) == 4
    assert lines[0].startswith("model,frame_map,iou_")
    names = [line.split(",")[0] for line in lines[1:]]
    assert names == ["fsn", "ablation", "delta"]
    rows = [list(map(float, line.split(",")[1:])) for line in lines[1:]]
    assert rows[2] == pytest.approx(
        [a - b for a, b in zip(rows[0], rows[1])], abs=1e-3
    )


def test_ablate_pooling_compares_gmp_to_gap(corpus, tmp_path):
    out = tmp_path / "ab"
    assert main(ablate_args(corpus, out, "pooling")) == 0
    lines = (out / "ablation.csv").read_text().splitlines()
    names = [line.split(",")[0] for line in lines[1:]]
    assert names == ["gmp", "gap", "delta"]


def test_ablate_rejects_unknown_mode(corpus, tmp_path, capsys):
    rc = main(ablate_args(corpus, tmp_path / "ab", "everything"))
    assert rc == 1
    assert "ablate_mode" in capsys.readouterr().err


# ---------------------------------------------------------------- gradcheck


def test_gradcheck_passes_and_writes_report(tmp_path):
    out = tmp_path / "gc"
    rc = main(["gradcheck", "--out", str(out), "--gradcheck-seeds", "2", "--seed", "11"])
    assert rc == 0
    text = (out / "gradcheck.txt").read_text()
    for name in ("conv_dilation4", "bilinear_upsample", "cross_entropy",
                 "fsn_end_to_end", "wfsn_end_to_end_gmp", "ablation_end_to_end"):
        assert name in text
    assert "negative_control" in text and "caught" in text
    assert text.rstrip().endswith("seeds 2)")


def test_gradcheck_report_values_are_small(tmp_path):
    out = tmp_path / "gc"
    main(["gradcheck", "--out", str(out), "--gradcheck-seeds", "1", "--seed", "3"])
    for line in (out / "gradcheck.txt").read_text().splitlines()[1:-2]:
        error = float(line.split()[1])
        assert error < 1e-5


# ---------------------------------------------------------------- main plumbing


def test_main_reports_missing_settings(capsys):
    assert main(["train", "--out", "/tmp/nowhere"]) == 1
    assert "missing required" in capsys.readouterr().err


def test_console_entry_point_configured():
    from pathlib import Path

    pyproject = Path(__file__).resolve().parents[1] / "pyproject.toml"
    assert 'fsn = "fsn.cli:main"' in pyproject.read_text()
