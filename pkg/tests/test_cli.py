import hashlib
import json
import os

import pandas as pd
import pytest

from latentcrab import checkpoint
from latentcrab.cli import main

from conftest import TINY_OVERRIDES


def _digest(path):
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


@pytest.fixture
def run_config(tmp_path):
    config = dict(
        TINY_OVERRIDES,
        paths={
            "trajectories": str(tmp_path / "data" / "demos.jsonl"),
            "annotations": str(tmp_path / "data" / "annotated.jsonl"),
            "checkpoints": str(tmp_path / "checkpoints"),
            "reports": str(tmp_path / "reports"),
        },
    )
    path = tmp_path / "run.json"
    path.write_text(json.dumps(config))
    return str(path)


def test_gen_data_is_seeded(tmp_path):
    first, second = str(tmp_path / "a.jsonl"), str(tmp_path / "b.jsonl")
    for out in (first, second):
        assert main(["--seed", "5", "gen-data", "--family", "single_object", "--n", "3", "--out", out]) == 0
    with open(first) as f:
        assert len(f.readlines()) == 3
    assert _digest(first) == _digest(second)
    other = str(tmp_path / "c.jsonl")
    main(["--seed", "6", "gen-data", "--family", "single_object", "--n", "3", "--out", other])
    assert _digest(other) != _digest(first)


def test_gen_data_splits_families(tmp_path):
    out = str(tmp_path / "mixed.jsonl")
    assert main(["gen-data", "--family", "single_object", "--family", "two_step_sort", "--n", "3", "--out", out]) == 0
    with open(out) as f:
        families = [json.loads(line)["family"] for line in f]
    assert families == ["single_object", "single_object", "two_step_sort"]


def test_annotate_empty_input(tmp_path):
    source, out = tmp_path / "empty.jsonl", tmp_path / "annotated.jsonl"
    source.write_text("")
    assert main(["annotate", "--in", str(source), "--out", str(out)]) == 0
    assert out.read_text() == ""


def test_annotate_bad_record_is_invalid_data(tmp_path):
    source = tmp_path / "broken.jsonl"
    source.write_text('{"schema": "v1"}\n')
    assert main(["annotate", "--in", str(source), "--out", str(tmp_path / "out.jsonl")]) == 4


def test_stage_two_needs_a_checkpoint():
    assert main(["train", "--stage", "2"]) == 2


def test_bad_configuration(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"stages": {"1": {"steps": 0}}}))
    assert main(["--config", str(path), "gen-data", "--n", "1"]) == 4
    assert main(["--set", "variant=cot_soup", "gen-data", "--n", "1"]) == 4


def test_missing_configuration_file(tmp_path):
    assert main(["--config", str(tmp_path / "absent.json"), "gen-data", "--n", "1"]) == 1


def test_eval_rejects_stage_one_checkpoint(curriculum):
    stage1 = os.path.join(curriculum["root"], "latent_full_stage1.lara")
    assert main(["eval", "--checkpoint", stage1, "--mode", "latent", "--n", "1"]) == 3


def test_expert_eval_writes_report(tmp_path):
    reports = tmp_path / "reports"
    assert main(["--set", f"paths.reports={reports}", "eval", "--mode", "expert", "--n", "2"]) == 0
    frame = pd.read_csv(reports / "eval_expert.csv")
    assert frame["success"].all() and len(frame) == 2
    with open(reports / "eval_expert.json") as f:
        assert json.load(f)["meta"]["success_rate"] == 1.0


def test_pipeline_through_stage_two(tmp_path, run_config):
    assert main(["--config", run_config, "gen-data", "--family", "single_object", "--n", "2"]) == 0
    assert main(["--config", run_config, "annotate"]) == 0
    assert main(["--config", run_config, "train", "--stage", "1"]) == 0

    stage1 = tmp_path / "checkpoints" / "latent_full_stage1.lara"
    assert checkpoint.read_meta(str(stage1))["completed"]
    metrics = tmp_path / "checkpoints" / "latent_full_metrics.csv"
    assert os.path.exists(tmp_path / "checkpoints" / "latent_full_metrics.png")

    assert main(["--config", run_config, "train", "--stage", "3", "--from", str(stage1)]) == 2
    assert main(["--config", run_config, "train", "--stage", "2", "--from", str(stage1)]) == 0
    frame = pd.read_csv(metrics)
    assert frame["stage"].tolist() == [1] * 4 + [2] * 3
