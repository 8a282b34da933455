import json
import os

here = os.path.dirname(os.path.abspath(__file__))

# stage settings shared by both configurations; from-scratch training at desk
# scale needs larger learning rates than the library defaults
stages = {
    "1": {"steps": 2000, "lr_trunk": 1e-3, "lr_expert": 1e-3, "checkpoint_every": 500},
    "2": {"steps": 900, "lr_trunk": 5e-4, "lr_expert": 1e-3, "w_vis": 0.2, "checkpoint_every": 300},
    "3": {
        "steps": 3000,
        "lr_trunk": 1e-4,
        "lr_expert": 1e-3,
        "w_cot": 0.0,
        "w_vis": 0.0,
        "w_act_dis": 0.0,
        "w_act_con": 1.0,
        "checkpoint_every": 500,
    },
}

desk_run = {
    "experiment_name": "desk_run",
    "seed": 0,
    "variant": "latent_full",
    "threads": 8,
    "world": {"families": ["single_object", "distractor"], "n_demos": 300},
    "annotate": {"horizon": 8, "noise_fraction": 0.1, "noise_magnitude": 0.3, "n_anchors": 5},
    "model": {"width": 128, "n_layers": 4, "n_heads": 4},
    "expert": {"width": 64, "n_blocks": 4, "n_heads": 4, "sample_steps": 10},
    "tokenizer": {"bins": 256, "horizon": 8},
    "stages": stages,
    "eval": {"family": "single_object", "n_rollouts": 40, "mode": "latent", "collapse_samples": 100},
    "paths": {
        "trajectories": "data/demos.jsonl",
        "annotations": "data/annotated.jsonl",
        "checkpoints": "checkpoints/desk_run",
        "reports": "reports/desk_run",
    },
}

ablation = dict(desk_run)
ablation.update(
    {
        "experiment_name": "ablation_example",
        "ablation": {
            "backend": "ray",
            "variants": ["no_cot", "explicit_cot", "latent_text", "latent_full"],
            "n_rollouts": 40,
            "cpus_per_trial": 2,
        },
        "paths": dict(desk_run["paths"], checkpoints="checkpoints/ablation", reports="reports/ablation"),
    }
)

for filename, data in (("desk_run.json", desk_run), ("ablation_example.json", ablation)):
    with open(os.path.join(here, filename), "w") as f:
        json.dump(data, f, indent=4)
