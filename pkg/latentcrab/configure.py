###
# Licensed under the Apache License, Version 2.0 (the "License");
# You may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
# http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
###

import copy
import json
import os
import typing as t
import zlib

import numpy as np

VARIANTS = ("latent_full", "latent_text", "explicit_cot", "no_cot")
EVAL_MODES = ("latent", "explicit_cot", "no_cot")

_STAGE_DEFAULTS = {
    "steps": 2000,
    "batch_size": 16,
    "lr_trunk": 1e-5,
    "lr_expert": 1e-4,
    "warmup_ratio": 0.1,
    "schedule": "cosine",
    "w_cot": 1.0,
    "w_vis": 0.1,
    "w_act_dis": 1.0,
    "w_act_con": 0.0,
    "betas": [0.9, 0.999],
    "eps": 1e-8,
    "weight_decay": 0.01,
    "clip_norm": 1.0,
    "checkpoint_every": 500,
    "log_every": 50,
}


def _stage(**overrides) -> t.Dict:
    d = copy.deepcopy(_STAGE_DEFAULTS)
    d.update(overrides)
    return d


DEFAULT_CONFIG: t.Dict[str, t.Any] = {
    "experiment_name": "latentcrab",
    "seed": 0,
    "variant": "latent_full",
    "threads": 1,
    "world": {
        "families": ["single_object", "distractor"],
        "n_demos": 300,
    },
    "annotate": {
        "horizon": 8,
        "noise_fraction": 0.1,
        "noise_magnitude": 0.3,
        "n_anchors": 5,
    },
    "model": {
        "width": 128,
        "n_layers": 4,
        "n_heads": 4,
        "ffn_mult": 4,
        "max_len": 192,
        "ema_decay": 0.99,
        "thought_feedback": False,
    },
    "expert": {
        "width": 64,
        "n_blocks": 4,
        "n_heads": 4,
        "ffn_mult": 4,
        "time_width": 64,
        "sample_steps": 10,
    },
    "tokenizer": {
        "bins": 256,
        "horizon": 8,
    },
    "stages": {
        "1": _stage(steps=2000),
        "2": _stage(steps=900, w_vis=0.2),
        "3": _stage(steps=3000, w_cot=0.0, w_vis=0.0, w_act_dis=0.0, w_act_con=1.0),
    },
    "eval": {
        "family": "single_object",
        "n_rollouts": 40,
        "mode": "latent",
        "seed_offset": 100000,
        "max_decode_tokens": 64,
        "collapse_samples": 100,
    },
    "ablation": {
        "backend": "ray",
        "variants": list(VARIANTS),
        "n_rollouts": 40,
        "cpus_per_trial": 1,
    },
    "paths": {
        "trajectories": "data/demos.jsonl",
        "annotations": "data/annotated.jsonl",
        "checkpoints": "checkpoints",
        "reports": "reports",
    },
}

_RANGES = {
    "seed": (0, None),
    "threads": (1, None),
    "world.n_demos": (1, None),
    "annotate.horizon": (1, None),
    "annotate.noise_fraction": (0.0, 1.0),
    "annotate.noise_magnitude": (0.0, 1.0),
    "annotate.n_anchors": (1, None),
    "model.width": (1, None),
    "model.n_layers": (1, None),
    "model.n_heads": (1, None),
    "model.ema_decay": (0.0, 1.0),
    "expert.sample_steps": (1, None),
    "tokenizer.bins": (2, None),
    "tokenizer.horizon": (1, None),
    "eval.n_rollouts": (1, None),
    "eval.collapse_samples": (1, None),
}
_STAGE_RANGES = {
    "steps": (1, None),
    "batch_size": (1, None),
    "lr_trunk": (0.0, None),
    "lr_expert": (0.0, None),
    "warmup_ratio": (0.0, 1.0),
    "w_cot": (0.0, None),
    "w_vis": (0.0, None),
    "w_act_dis": (0.0, None),
    "w_act_con": (0.0, None),
    "weight_decay": (0.0, None),
    "clip_norm": (0.0, None),
    "checkpoint_every": (0, None),
    "log_every": (1, None),
}
_CHOICES = {
    "variant": VARIANTS,
    "eval.mode": EVAL_MODES,
    "ablation.backend": ("ray", "local"),
}


class ConfigError(ValueError):
    pass


def _check_value(key: str, value, default):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigError(f"{key}: expected {type(default).__name__}, got {value!r}")


def _check_range(key: str, value, bounds):
    low, high = bounds
    if low is not None and value < low:
        raise ConfigError(f"{key}: {value} is below {low}")
    if high is not None and value > high:
        raise ConfigError(f"{key}: {value} is above {high}")


def _validate_section(config: t.Dict, defaults: t.Dict, prefix: str = ""):
    for key, value in config.items():
        path = f"{prefix}{key}"
        if key not in defaults:
            raise ConfigError(f"unknown configuration key: {path}")
        default = defaults[key]
        if isinstance(default, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{path}: expected a section, got {value!r}")
            if path == "stages":
                continue
            _validate_section(value, default, path + ".")
        else:
            _check_value(path, value, default)


def validate_config(config: t.Dict) -> t.Dict:
    _validate_section(config, DEFAULT_CONFIG)
    for path, bounds in _RANGES.items():
        value = get_key(config, path, None)
        if value is not None:
            _check_range(path, value, bounds)
    for path, choices in _CHOICES.items():
        value = get_key(config, path, None)
        if value is not None and value not in choices:
            raise ConfigError(f"{path}: {value!r} is not one of {list(choices)}")

    for stage, stage_cfg in config.get("stages", {}).items():
        if stage not in ("1", "2", "3"):
            raise ConfigError(f"unknown stage key: stages.{stage}")
        _validate_section(stage_cfg, _STAGE_DEFAULTS, f"stages.{stage}.")
        for key, bounds in _STAGE_RANGES.items():
            if key in stage_cfg:
                _check_range(f"stages.{stage}.{key}", stage_cfg[key], bounds)
        if stage_cfg.get("schedule", "cosine") not in ("cosine", "linear", "constant"):
            raise ConfigError(f"stages.{stage}.schedule: unknown schedule {stage_cfg['schedule']!r}")

    for variant in get_key(config, "ablation.variants", []):
        if variant not in VARIANTS:
            raise ConfigError(f"ablation.variants: unknown variant {variant!r}")
    width, heads = get_key(config, "model.width", 1), get_key(config, "model.n_heads", 1)
    if width % heads:
        raise ConfigError(f"model.width {width} is not divisible by model.n_heads {heads}")
    return config


def merge(defaults: t.Dict, overrides: t.Dict) -> t.Dict:
    out = copy.deepcopy(defaults)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def get_key(config: t.Dict, dotted: str, default=None):
    node = config
    for part in dotted.split("."):
        if not isinstance(node, dict) or part not in node:
            return default
        node = node[part]
    return node


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(config: t.Dict, overrides: t.Sequence[str]) -> t.Dict:
    """Apply ``dotted.key=value`` pairs; values are JSON when they parse as JSON."""
    config = copy.deepcopy(config)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        dotted, raw = item.split("=", 1)
        parts = dotted.strip().split(".")
        node = config
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {dotted}: {part} is not a section")
        node[parts[-1]] = _parse_value(raw)
    return config


def load_config(path: t.Optional[str] = None, overrides: t.Sequence[str] = ()) -> t.Dict:
    user: t.Dict = {}
    if path is not None:
        if not os.path.exists(path):
            raise FileNotFoundError(f"{path} does not exist.")
        with open(path, "r") as f:
            try:
                user = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path}: invalid JSON ({e.msg} at line {e.lineno})") from e
    # reject unknown keys before they are hidden by the merge
    validate_config(apply_overrides(user, overrides))
    config = merge(DEFAULT_CONFIG, apply_overrides(user, overrides))
    return validate_config(config)


def stage_config(config: t.Dict, stage: int) -> t.Dict:
    return merge(_STAGE_DEFAULTS, config.get("stages", {}).get(str(stage), {}))


def rng_stream(seed: int, stream: str, *keys: int) -> np.random.Generator:
    """Independent generator for a named sub-stream, optionally keyed by step or episode."""
    entropy = [int(seed), zlib.crc32(stream.encode("utf-8")), *[int(k) for k in keys]]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def stream_seed(seed: int, stream: str, *keys: int) -> int:
    entropy = [int(seed), zlib.crc32(stream.encode("utf-8")), *[int(k) for k in keys]]
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


def resolve_threads(threads: t.Optional[int] = None, config: t.Optional[t.Dict] = None) -> int:
    if threads is not None:
        value = threads
    elif os.environ.get("LARA_THREADS"):
        try:
            value = int(os.environ["LARA_THREADS"])
        except ValueError as e:
            raise ConfigError(f"LARA_THREADS must be an integer, got {os.environ['LARA_THREADS']!r}") from e
    else:
        value = (config or {}).get("threads", 1)
    if value < 1:
        raise ConfigError(f"threads must be >= 1, got {value}")
    return value
