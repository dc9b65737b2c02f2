from __future__ import annotations

import json

import pytest

from conftest import config_variant
from icono.cli import main
from icono.config import read_kv
from icono.errors import BadLabel, ConfigError, MissingWeights
from icono.pipeline import StageFailure, read_summary, run_all, validate_config


def test_complete_config(fixture_cfg):
    cfg = validate_config(fixture_cfg)
    assert cfg.data_root == fixture_cfg.parent / "data"
    assert cfg.train.seed == cfg.seed == 7
    assert cfg.grid.C == (1, 10, 100, 1000) and cfg.only_correct


def test_negative_learning_rate(fixture_cfg):
    path = config_variant(fixture_cfg, "neg.cfg", train__learning_rate="-0.1")
    with pytest.raises(ConfigError) as err:
        validate_config(path)
    assert len(err.value.errors) == 1 and "train.learning_rate" in err.value.errors[0]


def test_all_errors_reported(fixture_cfg):
    path = config_variant(fixture_cfg, "two.cfg", train__learning_rate="-0.1", style__alpha="3", colour="red",
                          data__annotated="../../elsewhere.csv")
    with pytest.raises(ConfigError) as err:
        validate_config(path)
    keys = sorted(e.split(":")[0] for e in err.value.errors)
    assert keys == ["colour", "data.annotated", "style.alpha", "train.learning_rate"]
    assert any("outside data_root" in e for e in err.value.errors)


def test_data_root_precedence(fixture_cfg, tmp_path, monkeypatch):
    import shutil

    other = tmp_path / "copy"
    shutil.copytree(fixture_cfg.parent / "data", other)
    monkeypatch.setenv("ICONO_DATA_ROOT", str(other))
    assert validate_config(fixture_cfg).data_root == other
    assert validate_config(fixture_cfg, fixture_cfg.parent / "data").data_root == fixture_cfg.parent / "data"
    monkeypatch.delenv("ICONO_DATA_ROOT")
    assert validate_config(fixture_cfg).data_root == fixture_cfg.parent / "data"


def test_missing_decoder_aborts_at_stylize(fixture_cfg):
    path = config_variant(fixture_cfg, "nodec.cfg", style__decoder_weights=None, output_root="runs_nodec")
    cfg = validate_config(path)
    with pytest.raises(StageFailure) as err:
        run_all(cfg)
    assert err.value.stage == "stylize" and isinstance(err.value.cause, MissingWeights)
    summary = read_summary(cfg.output_root / "run_summary.jsonl")
    assert [(r["stage"], r["status"]) for r in summary] == [("prepare", "ok"), ("stylize", "failed")]
    assert (cfg.stage_dir("prepare") / "split.json").exists()
    assert not cfg.stage_dir("extract").exists()

    before = (cfg.stage_dir("prepare") / ".stage.json").read_text()
    assert main(["run-all", "--config", str(path), "-q"]) == 4
    assert json.loads((cfg.stage_dir("prepare") / ".stage.json").read_text()) == json.loads(before)
    assert read_summary(cfg.output_root / "run_summary.jsonl")[0]["status"] == "skipped"


def test_cli_exit_codes(fixture_cfg, capsys):
    bad = config_variant(fixture_cfg, "bad.cfg", seed="seven")
    assert main(["validate", "--config", str(bad)]) == 2
    assert "seed" in capsys.readouterr().err
    assert main(["validate", "--config", str(fixture_cfg)]) == 0

    data = fixture_cfg.parent / "data"
    text = (data / "annotated.csv").read_text().replace(",Gabriel,", ",Joseph,", 1)
    (data / "annotated_bad.csv").write_text(text)
    path = config_variant(fixture_cfg, "badlabel.cfg", data__annotated="annotated_bad.csv",
                          output_root="runs_badlabel")
    with pytest.raises(StageFailure) as err:
        run_all(validate_config(path), stages=("prepare",))
    assert isinstance(err.value.cause, BadLabel)
    assert main(["run-all", "--config", str(path), "--stages", "prepare", "-q"]) == 3


def test_changed_config_reruns_stage(fixture_cfg):
    path = config_variant(fixture_cfg, "rerun.cfg", output_root="runs_rerun")
    cfg = validate_config(path)
    run_all(cfg, stages=("prepare",))
    first = json.loads((cfg.stage_dir("prepare") / ".stage.json").read_text())
    run_all(cfg, stages=("prepare",))
    summary = read_summary(cfg.output_root / "run_summary.jsonl")
    assert summary[0]["status"] == "skipped"

    path = config_variant(path, "rerun.cfg", data__test_per_class="4")
    cfg = validate_config(path)
    run_all(cfg, stages=("prepare",))
    summary = read_summary(cfg.output_root / "run_summary.jsonl")
    assert summary[0]["status"] == "ok" and summary[0]["input_hash"] != first["input_hash"]
    split = json.loads((cfg.stage_dir("prepare") / "split.json").read_text())
    assert len(split["test_ids"]) == 8


def test_fixture_run_artifacts(fixture_run):
    cfg, out, _ = fixture_run
    summary = read_summary(out / "run_summary.jsonl")
    assert [r["stage"] for r in summary] == ["prepare", "stylize", "extract", "bench", "train", "evaluate", "cam"]
    for r in summary:
        assert r["status"] in ("ok", "skipped")
        assert all((out / a).exists() for a in r["artifacts"])
    assert len(json.loads((out / "04_bench" / "bench_reports.json").read_text())) == 8
    for name in ("A", "B", "C"):
        assert (out / "05_train" / f"model_{name}.pt").exists()
        assert (out / "05_train" / f"curves_{name}_accuracy.png").exists()
    for name in ("A", "B", "B_styled", "C"):
        assert (out / "06_evaluate" / name / "metrics.json").exists()
    assert (out / "07_cam" / "A" / "index.csv").exists()
    assert read_kv(cfg.output_root.parent / "run.cfg")["seed"] == "7"
