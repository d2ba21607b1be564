import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from convctx.cli import main
from convctx.corpus import synth_utterance_audio
from convctx.features import write_wav

SMALL_CORPUS = {
    "corpus": {
        "n_conversations": 14,
        "utterances_range": [4, 6],
        "n_speakers": 4,
        "n_topics": 3,
        "vocab_per_topic": 60,
        "duration_range": [0.3, 0.4],
    },
    "split": {"ratios": [0.5, 0.2, 0.3]},
    "features": {"hash_dim": 256},
    "loss": {"steps": 60, "eval_every": 30, "eval_triplets": 20},
    "apm": {"steps": 40},
    "eval": {"eval_triplets": 50, "n_fakes": 2, "n_bootstrap": 50},
}


def write_config(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(SMALL_CORPUS), encoding="utf-8")
    return str(path)


def tree_digest(root: Path, skip=("timing.txt",)):
    digests = {}
    for path in sorted(root.rglob("*")):
        if path.is_file() and path.name not in skip:
            digests[str(path.relative_to(root))] = hashlib.sha256(path.read_bytes()).hexdigest()
    return digests


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg = write_config(tmp)
    corpus_dir = tmp / "corpus"
    run_dir = tmp / "run"
    assert main(["synth-corpus", "--config", cfg, "--seed", "5", "--out-dir", str(corpus_dir)]) == 0
    assert main(["featurize", "--config", cfg, "--manifest", str(corpus_dir / "manifest.jsonl"),
                 "--out-dir", str(corpus_dir)]) == 0
    assert main(["train", "--config", cfg, "--seed", "5",
                 "--manifest", str(corpus_dir / "manifest.jsonl"),
                 "--features", str(corpus_dir), "--out-dir", str(run_dir),
                 "--strategy", "S3", "--batch-size", "16", "--with-apm"]) == 0
    return tmp, cfg, corpus_dir, run_dir


def test_pipeline_outputs_exist(pipeline):
    _, _, corpus_dir, run_dir = pipeline
    assert (corpus_dir / "manifest.jsonl").exists()
    assert (corpus_dir / "manifest.speakers.txt").exists()
    assert (corpus_dir / "text_features.jsonl").exists()
    assert (corpus_dir / "prosody.jsonl").exists()
    assert any((corpus_dir / "features").glob("*.ccf"))
    assert (run_dir / "checkpoint.ckpt").exists()
    assert (run_dir / "train_report.json").exists()
    assert (run_dir / "loss_curve.csv").exists()
    assert (run_dir / "apm_report.json").exists()
    assert (run_dir / "config_echo.json").exists()


def test_train_report_records_batch_size(pipeline):
    _, _, _, run_dir = pipeline
    report = json.loads((run_dir / "train_report.json").read_text())
    assert report["config"]["batch_size"] == 16
    assert report["config"]["strategy"] == "S3"
    assert len(report["losses_total"]) == 60


def test_eval_sensitivity_project_commands(pipeline, tmp_path):
    tmp, cfg, corpus_dir, run_dir = pipeline
    common = [
        "--config", cfg, "--seed", "5",
        "--manifest", str(corpus_dir / "manifest.jsonl"),
        "--features", str(corpus_dir),
        "--checkpoint", str(run_dir / "checkpoint.ckpt"),
    ]
    assert main(["eval", *common, "--out-dir", str(tmp_path / "eval")]) == 0
    report = json.loads((tmp_path / "eval" / "eval_report.json").read_text())
    assert "satisfaction" in report["report"]
    assert "apm" in report["report"]
    assert report["report"]["apm"]["real"]["mode"] == "real"
    assert (tmp_path / "eval" / "eval_report.csv").exists()

    assert main(["sensitivity", *common, "--out-dir", str(tmp_path / "sens")]) == 0
    sens = json.loads((tmp_path / "sens" / "sensitivity_report.json").read_text())
    assert {"gap", "gap_ci_low", "gap_ci_high", "nearest_real_accuracy"} <= set(sens["report"])

    assert main(["project", *common, "--out-dir", str(tmp_path / "proj")]) == 0
    lines = (tmp_path / "proj" / "projection.csv").read_text().splitlines()
    assert lines[0] == "id,conversation_id,context_kind,x,y"
    kinds = {line.split(",")[2] for line in lines[1:]}
    assert kinds == {"real", "fake"}


def test_metrics_identity_prints_zeros(tmp_path, capsys):
    samples = synth_utterance_audio(150.0, 0.4, 16000, topic=0, amplitude=0.3, phase=0.0)
    wav = tmp_path / "x.wav"
    write_wav(wav, samples, 16000)
    assert main(["metrics", str(wav), str(wav)]) == 0
    out = capsys.readouterr().out
    assert "MCD 0.0000" in out
    assert "log-F0 RMSE 0.0000" in out


def test_cli_rerun_is_byte_identical(tmp_path):
    cfg = write_config(tmp_path)
    corpus_dir = tmp_path / "c"
    run_dir = tmp_path / "r"

    def run_all():
        main(["synth-corpus", "--config", cfg, "--seed", "3", "--out-dir", str(corpus_dir)])
        main(["featurize", "--config", cfg, "--manifest", str(corpus_dir / "manifest.jsonl"),
              "--out-dir", str(corpus_dir)])
        main(["train", "--config", cfg, "--seed", "3",
              "--manifest", str(corpus_dir / "manifest.jsonl"),
              "--features", str(corpus_dir), "--out-dir", str(run_dir), "--steps", "30"])
        return tree_digest(corpus_dir), tree_digest(run_dir)

    first = run_all()
    second = run_all()
    assert first == second


def test_missing_input_is_single_line_error(tmp_path, capsys):
    code = main(["featurize", "--manifest", str(tmp_path / "nope.jsonl"), "--out-dir", str(tmp_path)])
    assert code == 2
    err = capsys.readouterr().err
    assert err.startswith("error:")
    assert len(err.strip().splitlines()) == 1


def test_unknown_flag_exits_nonzero():
    with pytest.raises(SystemExit) as exc:
        main(["train", "--bogus-flag"])
    assert exc.value.code == 2


def test_unknown_config_key_rejected(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"no_such_section": 1}), encoding="utf-8")
    code = main(["synth-corpus", "--config", str(bad), "--out-dir", str(tmp_path / "o")])
    assert code == 2
    assert "unknown config key" in capsys.readouterr().err
