import os
import warnings

import pytest

from latentcrab import annotate, configure, trainer, worldsim
from latentcrab.flow import ExpertConfig
from latentcrab.model import VLAPolicy, ModelConfig

TINY_STAGE = {"batch_size": 2, "lr_trunk": 1e-3, "lr_expert": 1e-3, "checkpoint_every": 2, "log_every": 1}

TINY_OVERRIDES = {
    "seed": 3,
    "model": {"width": 16, "n_layers": 1, "n_heads": 2, "ffn_mult": 2, "max_len": 128},
    "expert": {"width": 8, "n_blocks": 1, "n_heads": 2, "ffn_mult": 2, "time_width": 8, "sample_steps": 2},
    "tokenizer": {"bins": 16, "horizon": 2},
    "annotate": {"horizon": 2},
    "stages": {
        "1": dict(TINY_STAGE, steps=4),
        "2": dict(TINY_STAGE, steps=3, w_vis=0.2),
        "3": dict(TINY_STAGE, steps=3, w_cot=0.0, w_vis=0.0, w_act_dis=0.0, w_act_con=1.0),
    },
    "eval": {"n_rollouts": 2},
}


@pytest.fixture
def tiny_config():
    return configure.validate_config(configure.merge(configure.DEFAULT_CONFIG, TINY_OVERRIDES))


@pytest.fixture(scope="session")
def demos():
    return [traj for traj, _ in worldsim.generate_demos(2, "single_object", seed=11)]


@pytest.fixture(scope="session")
def samples(demos):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return annotate.annotate_dataset(demos, horizon=2, seed=5)


@pytest.fixture(scope="session")
def training_data(demos, samples):
    return trainer.TrainingData.build(demos, samples, bins=16)


@pytest.fixture
def tiny_policy(training_data):
    return VLAPolicy(
        ModelConfig.from_dict(TINY_OVERRIDES["model"]),
        ExpertConfig.from_dict({**TINY_OVERRIDES["expert"], "horizon": 2}),
        training_data.vocab,
        seed=0,
    )


@pytest.fixture(scope="session")
def curriculum(tmp_path_factory, training_data):
    """Final checkpoints of tiny latent_full and explicit_cot curricula."""
    config = configure.validate_config(configure.merge(configure.DEFAULT_CONFIG, TINY_OVERRIDES))
    root = tmp_path_factory.mktemp("curriculum")
    out = {}
    for variant in ("latent_full", "explicit_cot"):
        out[variant] = trainer.run_curriculum(
            config, training_data, str(root), variant, metrics_path=os.path.join(root, f"{variant}.csv")
        )
    out["root"] = str(root)
    return out
