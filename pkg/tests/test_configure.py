import json
import os

import pytest

from latentcrab import configure
from latentcrab.configure import ConfigError


def _write(tmp_path, payload):
    path = tmp_path / "run.json"
    path.write_text(json.dumps(payload) if not isinstance(payload, str) else payload)
    return str(path)


def test_defaults_are_valid():
    config = configure.load_config()
    assert config["variant"] == "latent_full"
    assert configure.stage_config(config, 3)["w_act_con"] == 1.0


def test_file_values_merge_over_defaults(tmp_path):
    config = configure.load_config(_write(tmp_path, {"seed": 9, "stages": {"2": {"steps": 30}}}))
    assert config["seed"] == 9
    assert configure.stage_config(config, 2)["steps"] == 30
    assert configure.stage_config(config, 2)["lr_trunk"] == 1e-5
    assert config["model"]["width"] == 128


@pytest.mark.parametrize(
    "payload",
    [
        {"modle": {"width": 8}},
        {"model": {"depth": 3}},
        {"seed": "seven"},
        {"seed": -1},
        {"variant": "cot_soup"},
        {"eval": {"mode": "expert"}},
        {"ablation": {"backend": "slurm"}},
        {"ablation": {"variants": ["latent_full", "cot_soup"]}},
        {"model": {"width": 30, "n_heads": 4}},
        {"stages": {"4": {"steps": 1}}},
        {"stages": {"1": {"steps": 0}}},
        {"stages": {"2": {"schedule": "step"}}},
        {"annotate": {"noise_fraction": 1.5}},
    ],
)
def test_invalid_configurations(tmp_path, payload):
    with pytest.raises(ConfigError):
        configure.load_config(_write(tmp_path, payload))


def test_malformed_json(tmp_path):
    with pytest.raises(ConfigError, match="invalid JSON"):
        configure.load_config(_write(tmp_path, "{\"seed\": 1,"))


def test_missing_file():
    with pytest.raises(FileNotFoundError):
        configure.load_config("no/such/config.json")


def test_overrides_parse_json_values():
    config = configure.load_config(overrides=["stages.1.steps=100", "variant=no_cot", "ablation.variants=[\"no_cot\"]"])
    assert configure.stage_config(config, 1)["steps"] == 100
    assert config["variant"] == "no_cot"
    assert config["ablation"]["variants"] == ["no_cot"]
    assert configure.apply_overrides({}, ["paths.reports=out/r"]) == {"paths": {"reports": "out/r"}}


def test_overrides_need_a_value():
    with pytest.raises(ConfigError):
        configure.load_config(overrides=["seed"])
    with pytest.raises(ConfigError):
        configure.load_config(overrides=["model.nothing=3"])


def test_rng_streams_are_reproducible_and_independent():
    a = configure.rng_stream(7, "batch", 1, 3).random(4)
    b = configure.rng_stream(7, "batch", 1, 3).random(4)
    c = configure.rng_stream(7, "batch", 1, 4).random(4)
    d = configure.rng_stream(7, "flow", 1, 3).random(4)
    assert (a == b).all()
    assert not (a == c).all() and not (a == d).all()
    assert configure.stream_seed(7, "world", 0) == configure.stream_seed(7, "world", 0)
    assert configure.stream_seed(7, "world", 0) != configure.stream_seed(7, "world", 1)


def test_thread_resolution(monkeypatch):
    monkeypatch.delenv("LARA_THREADS", raising=False)
    assert configure.resolve_threads(None, {"threads": 3}) == 3
    monkeypatch.setenv("LARA_THREADS", "6")
    assert configure.resolve_threads(None, {"threads": 3}) == 6
    assert configure.resolve_threads(2, {"threads": 3}) == 2
    monkeypatch.setenv("LARA_THREADS", "many")
    with pytest.raises(ConfigError):
        configure.resolve_threads()
    with pytest.raises(ConfigError):
        configure.resolve_threads(0)


def test_get_key():
    config = {"a": {"b": {"c": 1}}}
    assert configure.get_key(config, "a.b.c") == 1
    assert configure.get_key(config, "a.x", "fallback") == "fallback"


@pytest.mark.parametrize("name", ["desk_run.json", "ablation_example.json"])
def test_shipped_configurations_validate(name):
    path = os.path.join(os.path.dirname(__file__), "..", "config", name)
    config = configure.load_config(path)
    assert configure.stage_config(config, 3)["w_act_con"] == 1.0
