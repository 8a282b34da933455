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
"""Command-line entry point.

Exit codes: 0 success, 1 I/O error, 2 stage-order violation, 3 checkpoint/mode
mismatch, 4 invalid configuration or data.
"""

import argparse
import contextlib
import logging
import os
import sys
import typing as t

import mlflow
import numpy as np

from latentcrab import analyze, annotate, configure, cosmetics, evalbench, trainer, worldsim
from latentcrab.checkpoint import CheckpointError, read_meta
from latentcrab.flow import ExpertConfig
from latentcrab.model import ModelConfig
from latentcrab.tokenizer import ActionNorm, FormatError, Vocab

logger = logging.getLogger("latentcrab")

EXIT_OK, EXIT_IO, EXIT_STAGE_ORDER, EXIT_MODE, EXIT_INVALID = 0, 1, 2, 3, 4


def _split(n: int, k: int) -> t.List[int]:
    return [n // k + (i < n % k) for i in range(k)]


def cmd_gen_data(args, config: t.Dict) -> int:
    families = args.family or config["world"]["families"]
    n = args.n if args.n is not None else config["world"]["n_demos"]
    out = args.out or config["paths"]["trajectories"]
    trajectories, start = [], 0
    for index, (family, count) in enumerate(zip(families, _split(n, len(families)))):
        if count == 0:
            continue
        seed = configure.stream_seed(config["seed"], "world", index)
        trajectories.extend(traj for traj, _ in worldsim.generate_demos(count, family, seed, start_id=start))
        start += count
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    worldsim.write_trajectories(out, trajectories)
    mean_length = float(np.mean([len(traj) for traj in trajectories])) if trajectories else 0.0
    print(f"wrote {len(trajectories)} episodes to {out}, mean length {mean_length:.1f}")
    return EXIT_OK


def cmd_annotate(args, config: t.Dict) -> int:
    source = args.input or config["paths"]["trajectories"]
    out = args.out or config["paths"]["annotations"]
    settings = config["annotate"]
    samples = annotate.annotate_dataset(
        annotate.load_trajectories(source),
        horizon=settings["horizon"],
        noise_fraction=settings["noise_fraction"],
        noise_magnitude=settings["noise_magnitude"],
        n_anchors=settings["n_anchors"],
        seed=configure.stream_seed(config["seed"], "noise"),
    )
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    count = annotate.write_samples(out, samples)
    print(f"wrote {count} annotated samples to {out}")
    return EXIT_OK


def cmd_train(args, config: t.Dict) -> int:
    variant = config["variant"]
    stage = args.stage
    paths = config["paths"]
    out = args.out or os.path.join(paths["checkpoints"], f"{variant}_stage{stage}.lara")
    metrics = args.metrics or os.path.join(os.path.dirname(os.path.abspath(out)), f"{variant}_metrics.csv")

    vocab = norm = None
    if args.source:
        meta = read_meta(args.source)
        vocab, norm = Vocab.from_dict(meta["vocab"]), ActionNorm.from_dict(meta["action_norm"])
    elif stage != 1:
        raise trainer.StageOrderError(f"stage {stage} needs --from with a completed stage {trainer.stage_prerequisite(stage, variant)} checkpoint")
    data = trainer.TrainingData.load(
        args.trajectories or paths["trajectories"],
        args.annotations or paths["annotations"],
        vocab,
        norm,
        bins=config["tokenizer"]["bins"],
    )
    trainer.run_stage(
        stage,
        data,
        trainer.StageConfig.from_config(config, stage, variant),
        checkpoint_in=args.source,
        checkpoint_out=out,
        seed=config["seed"],
        variant=variant,
        model_cfg=ModelConfig.from_dict(config["model"]),
        expert_cfg=ExpertConfig.from_dict({**config["expert"], "horizon": data.action_cfg.horizon}),
        metrics_path=metrics,
    )
    cosmetics.plot_loss_curves(analyze.loss_curves(metrics), os.path.splitext(metrics)[0] + ".png")
    print(f"stage {stage} checkpoint: {out}")
    print(f"metrics: {metrics}")
    return EXIT_OK


def cmd_eval(args, config: t.Dict) -> int:
    settings = config["eval"]
    mode = args.mode or settings["mode"]
    report = evalbench.rollout_eval(
        args.checkpoint,
        args.family or settings["family"],
        args.n or settings["n_rollouts"],
        config["seed"],
        mode,
        settings["seed_offset"],
        max_decode_tokens=settings["max_decode_tokens"],
        threads=args.threads_resolved,
    )
    summary = report.summary()
    analyze.write_report(report.rollouts_frame(), config["paths"]["reports"], f"eval_{mode}", summary)
    print(
        f"{mode}: success rate {summary['success_rate']:.3f} "
        f"(95% Wilson [{summary['ci_low']:.3f}, {summary['ci_high']:.3f}]) over {report.n} rollouts"
    )
    return EXIT_OK


def cmd_bench_latency(args, config: t.Dict) -> int:
    settings = config["eval"]
    report = evalbench.bench_latency(
        args.latent,
        args.explicit,
        args.n or settings["n_rollouts"],
        config["seed"],
        args.family or settings["family"],
        settings["seed_offset"],
        settings["max_decode_tokens"],
    )
    analyze.write_report(report.table, config["paths"]["reports"], "latency", report.summary())
    print(report.table.to_string(index=False))
    print(f"token reduction {report.token_reduction:.1%}, wall-time reduction {report.time_reduction:.1%}")
    return EXIT_OK


def cmd_analyze_latents(args, config: t.Dict) -> int:
    paths = config["paths"]
    size = args.collapse_samples or config["eval"]["collapse_samples"]
    samples = annotate.read_samples(args.annotations or paths["annotations"])
    trajectories = annotate.load_trajectories(args.trajectories or paths["trajectories"])
    if len(samples) < size:
        raise ValueError(f"only {len(samples)} annotated samples for a collapse set of {size}")
    rng = configure.rng_stream(config["seed"], "collapse")
    subset = [samples[i] for i in np.sort(rng.choice(len(samples), size=size, replace=False))]
    frames = {traj.episode_id: traj.observations for traj in trajectories}

    report = evalbench.latent_collapse_metrics(args.checkpoint, subset, frames, min_samples=size)
    reports = paths["reports"]
    analyze.write_report(report.coords, reports, "latent_pca", report.summary())
    cosmetics.plot_latent_pca(report.coords, os.path.join(reports, "latent_pca.png"), report.explained_variance)
    print(
        f"within {report.within:.4f}  across {report.across:.4f}  "
        f"thinking-vs-instruction {report.thinking_vs_instruction:.4f}  collapsed {report.collapsed}"
    )
    return EXIT_OK


def cmd_ablate(args, config: t.Dict) -> int:
    table = evalbench.ablation_run(config, config["seed"], args.threads_resolved)
    analyze.write_report(table, config["paths"]["reports"], "ablation", {"trend_holds": analyze.trend_holds(table)})
    print(table[["label", "success_rate", "ci_low", "ci_high"]].to_string(index=False))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="latentcrab", description="Desk-scale latent-reasoning VLA pipeline.")
    parser.add_argument("--config", type=str, default=None, help="JSON run configuration merged over the defaults.")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="Override a configuration entry by dotted key, e.g. stages.1.steps=100.")
    parser.add_argument("--seed", type=int, default=None, help="Root seed; overrides the configuration.")
    parser.add_argument("--threads", type=int, default=None, help="Worker cap; falls back to LARA_THREADS.")
    parser.add_argument("--log-level", type=str, default="INFO")
    parser.add_argument("--tracking_uri", type=str, default=None,
                        help="mlflow tracking URI; when given, the command runs inside an mlflow run.")
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("gen-data", help="Roll out the scripted expert.")
    p.add_argument("--family", action="append", choices=worldsim.FAMILIES)
    p.add_argument("--n", type=int)
    p.add_argument("--out", type=str)
    p.set_defaults(func=cmd_gen_data)

    p = commands.add_parser("annotate", help="Annotate trajectories with CoT records.")
    p.add_argument("--in", dest="input", type=str)
    p.add_argument("--out", type=str)
    p.set_defaults(func=cmd_annotate)

    p = commands.add_parser("train", help="Run one curriculum stage.")
    p.add_argument("--stage", type=int, required=True, choices=(1, 2, 3))
    p.add_argument("--from", dest="source", type=str)
    p.add_argument("--out", type=str)
    p.add_argument("--metrics", type=str)
    p.add_argument("--trajectories", type=str)
    p.add_argument("--annotations", type=str)
    p.set_defaults(func=cmd_train)

    p = commands.add_parser("eval", help="Closed-loop rollouts.")
    p.add_argument("--checkpoint", type=str)
    p.add_argument("--mode", choices=evalbench.MODES + ("expert",))
    p.add_argument("--n", type=int)
    p.add_argument("--family", choices=worldsim.FAMILIES)
    p.set_defaults(func=cmd_eval)

    p = commands.add_parser("bench-latency", help="Latent vs explicit-CoT inference cost.")
    p.add_argument("--latent", type=str, required=True)
    p.add_argument("--explicit", type=str, required=True)
    p.add_argument("--n", type=int)
    p.add_argument("--family", choices=worldsim.FAMILIES)
    p.set_defaults(func=cmd_bench_latency)

    p = commands.add_parser("analyze-latents", help="Thinking-token similarity and PCA report.")
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--collapse-samples", type=int)
    p.add_argument("--trajectories", type=str)
    p.add_argument("--annotations", type=str)
    p.set_defaults(func=cmd_analyze_latents)

    p = commands.add_parser("ablate", help="Train and evaluate every supervision variant.")
    p.set_defaults(func=cmd_ablate)
    return parser


def _tracking(uri: t.Optional[str], experiment_name: str):
    if uri is None:
        return contextlib.nullcontext()
    mlflow.set_tracking_uri(uri)
    mlflow.set_experiment(experiment_name)
    return mlflow.start_run()


def main(argv: t.Optional[t.Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        config = configure.load_config(args.config, args.overrides)
        if args.seed is not None:
            config = configure.validate_config(configure.merge(config, {"seed": args.seed}))
        args.threads_resolved = configure.resolve_threads(args.threads, config)
        with _tracking(args.tracking_uri, config["experiment_name"]):
            if mlflow.active_run():
                mlflow.log_params({"command": args.command, "seed": config["seed"], "variant": config["variant"]})
            return args.func(args, config)
    except trainer.StageOrderError as e:
        logger.error("%s", e)
        return EXIT_STAGE_ORDER
    except evalbench.ModeMismatchError as e:
        logger.error("%s", e)
        return EXIT_MODE
    except (configure.ConfigError, annotate.SchemaError, FormatError, CheckpointError) as e:
        logger.error("%s", e)
        return EXIT_INVALID
    except OSError as e:
        logger.error("%s", e)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
