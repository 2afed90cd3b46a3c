from __future__ import annotations

import hashlib
import json
from pathlib import Path

import pytest

from planeqc.cli import EXIT_INVALID, EXIT_OK, main

PIPELINE = ("gen-data", "select-anchors", "train", "calibrate", "score", "eval", "sweep", "export-embeddings")

SMOKE = {
    "data": {"size": 32, "n_pool": 4, "k2": 10, "n_query_pristine": 2, "n_query_degraded": 3},
    "anchors": {"k1": 2},
    "encoder": {"channels": [4, 4, 6]},
    "oks": {"r": 2},
    "lra": {"hidden": 3},
    "train": {"epochs": 1, "steps_per_epoch": 2, "batch_size": 2, "lr": 0.001},
    "sweep": {"n_images": 2, "levels": [0.0, 0.5, 1.0]},
}

ARTIFACTS = ("run.json", "anchors.csv", "model.strq", "model.strq.json", "train_log.csv", "calib.strq",
             "scores.csv", "metrics.json", "sweep.csv", "sweep_metrics.json", "embeddings.csv", "corpus/manifest.csv")


def write_smoke_config(path: Path) -> Path:
    path.write_text(json.dumps(SMOKE))
    return path


def run_pipeline(work: Path, config: Path, *extra: str) -> list[int]:
    return [main([cmd, "--workdir", str(work), "--config", str(config), "--threads", "1", *extra]) for cmd in PIPELINE]


def tree_digest(root: Path) -> dict[str, str]:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def test_score_without_calibration_names_the_artifact(tmp_path, capsys):
    cfg = write_smoke_config(tmp_path / "c.json")
    work = tmp_path / "w"
    for cmd in ("gen-data", "select-anchors", "train"):
        assert main([cmd, "--workdir", str(work), "--config", str(cfg)]) == EXIT_OK
    capsys.readouterr()
    assert main(["score", "--workdir", str(work), "--config", str(cfg)]) == EXIT_INVALID
    assert "calib.strq" in capsys.readouterr().err


def test_missing_corpus_and_bad_keys_exit_1(tmp_path, capsys):
    assert main(["train", "--workdir", str(tmp_path)]) == EXIT_INVALID
    assert "gen-data" in capsys.readouterr().err
    assert main(["gen-data", "--workdir", str(tmp_path), "--set", "train.epoch=3"]) == EXIT_INVALID
    assert "train.epoch" in capsys.readouterr().err
    assert main(["gen-data", "--workdir", str(tmp_path), "--threads", "0"]) == EXIT_INVALID


def test_gen_data_is_deterministic(tmp_path):
    cfg = write_smoke_config(tmp_path / "c.json")
    for w in ("a", "b"):
        assert main(["gen-data", "--seed", "7", "--workdir", str(tmp_path / w), "--config", str(cfg)]) == EXIT_OK
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")
    assert json.loads((tmp_path / "a" / "run.json").read_text())["data.seed"] == 7


def test_smoke_pipeline_emits_every_artifact(tmp_path):
    cfg = write_smoke_config(tmp_path / "c.json")
    work = tmp_path / "w"
    assert run_pipeline(work, cfg) == [EXIT_OK] * len(PIPELINE)
    for name in ARTIFACTS:
        assert (work / name).is_file(), name
    metrics = json.loads((work / "metrics.json").read_text())
    assert set(metrics) == {"srcc", "plcc", "t", "p", "n"}
    rows = (work / "scores.csv").read_text().splitlines()
    assert len(rows) == 1 + 2 * 5


def test_commands_do_not_mutate_inputs(tmp_path):
    cfg = write_smoke_config(tmp_path / "c.json")
    work = tmp_path / "w"
    for cmd in PIPELINE[:4]:
        main([cmd, "--workdir", str(work), "--config", str(cfg)])
    corpus = tree_digest(work / "corpus")
    model = (work / "model.strq").read_bytes()
    for cmd in PIPELINE[4:]:
        assert main([cmd, "--workdir", str(work), "--config", str(cfg)]) == EXIT_OK
    assert tree_digest(work / "corpus") == corpus
    assert (work / "model.strq").read_bytes() == model


def test_run_echo_reproduces_outputs(tmp_path):
    cfg = write_smoke_config(tmp_path / "c.json")
    first = tmp_path / "first"
    run_pipeline(first, cfg)
    echo = tmp_path / "echo.json"
    echo.write_text((first / "run.json").read_text())
    second = tmp_path / "second"
    assert run_pipeline(second, echo) == [EXIT_OK] * len(PIPELINE)
    assert tree_digest(first) == tree_digest(second)


@pytest.mark.parametrize("strategy", ["random", "kmedoids", "kcenter"])
def test_alternative_anchor_strategies(tmp_path, strategy):
    cfg = write_smoke_config(tmp_path / "c.json")
    work = tmp_path / "w"
    assert main(["gen-data", "--workdir", str(work), "--config", str(cfg)]) == EXIT_OK
    assert main(["select-anchors", "--strategy", strategy, "--workdir", str(work), "--config", str(cfg)]) == EXIT_OK
    assert len((work / "anchors.csv").read_text().splitlines()) == 1 + 2 * 2
