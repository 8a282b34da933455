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
"""Closed-loop rollouts, latency benchmark, latent-collapse report and the ablation grid."""

import concurrent.futures
import dataclasses
import functools
import itertools
import logging
import os
import time
import typing as t
import warnings

import mlflow
import numpy as np
import pandas as pd
import scipy.linalg

from latentcrab import analyze, annotate, configure, scheduler, trainer, worldsim
from latentcrab.checkpoint import load_policy, read_meta
from latentcrab.model import VLAPolicy
from latentcrab.tokenizer import AT, SPECIAL_TOKENS, TEXT, THINKING, VARIANTS, ActionNorm, inference_sequence

logger = logging.getLogger(__name__)

MODES = ("latent", "explicit_cot", "no_cot")
MODE_VARIANTS = {
    "latent": ("latent_full", "latent_text"),
    "explicit_cot": ("explicit_cot",),
    "no_cot": ("no_cot",),
}
DEFAULT_SEED_OFFSET = 100000
MAX_DECODE_TOKENS = 64
COT_SENTENCES = 3
COLLAPSE_THRESHOLD = 0.999
INSTRUCTION = "instruction"


class ModeMismatchError(ValueError):
    pass


def mode_for_variant(variant: str) -> str:
    for mode, variants in MODE_VARIANTS.items():
        if variant in variants:
            return mode
    raise ValueError(f"Unknown variant: {variant}")


# ---------------------------------------------------------------------------
# policies
# ---------------------------------------------------------------------------


class ExpertPolicy:
    """Scripted expert planned H steps ahead on a copy of the state."""

    decodes = False

    def __init__(self, horizon: int = 8):
        self.horizon = horizon

    def plan(self, state: worldsim.WorldState, obs, task: worldsim.TaskSpec, rng=None) -> t.Tuple[np.ndarray, int]:
        actions = []
        for _ in range(self.horizon):
            if state.done:
                break
            action = worldsim.scripted_expert(state, task).clamped()
            actions.append(action.as_array())
            state, _, _ = worldsim.step(state, action)
        return np.array(actions, dtype=np.float64).reshape(-1, 3), 0


class LatentPolicy:
    """One trunk pass over the fixed thinking/``<img_next>`` layout, then flow sampling."""

    def __init__(self, policy: VLAPolicy, norm: ActionNorm, variant: str = "latent_full", steps: t.Optional[int] = None):
        self.policy = policy
        self.norm = norm
        self.variant = variant
        self.steps = policy.expert_cfg.sample_steps if steps is None else steps
        self.horizon = policy.expert_cfg.horizon

    def context(self, instruction: str, obs, cot_ids: t.Sequence[int] = ()):
        ids, layout = inference_sequence(instruction, self.policy.vocab, self.variant, cot_ids)
        return self.policy.latent_context(ids, layout, obs, stage=3)

    def plan(self, state, obs, task, rng: np.random.Generator) -> t.Tuple[np.ndarray, int]:
        chunk = self.policy.expert.sample_actions(self.context(task.instruction, obs), self.steps, rng)
        return self.norm.denormalize(chunk), 0


class ExplicitCoTPolicy(LatentPolicy):
    """Greedy CoT decoding, one trunk pass per token, before flow sampling.

    Stage 3 trains on the flow loss alone, so no gradient reaches
    ``trunk.lm_head``: the head scoring each token is the one stage 1 trained
    with the CoT loss. The trunk below it did move during stage 3.
    """

    def __init__(self, policy: VLAPolicy, norm: ActionNorm, steps: t.Optional[int] = None, max_tokens: int = MAX_DECODE_TOKENS):
        super().__init__(policy, norm, "explicit_cot", steps)
        self.max_tokens = max_tokens
        vocab = policy.vocab
        self.allowed = np.ones(vocab.text_size, dtype=bool)
        self.allowed[: len(SPECIAL_TOKENS)] = False
        self.period = vocab.token_id(".")

    def decode_cot(self, instruction: str, obs) -> t.List[int]:
        cot: t.List[int] = []
        sentences = 0
        while len(cot) < self.max_tokens and sentences < COT_SENTENCES:
            ids, layout = inference_sequence(instruction, self.policy.vocab, "explicit_cot", cot, future=False)
            _, logits, _ = self.policy.forward(ids, layout, obs, stage=3)
            scores = np.where(self.allowed, logits.data[-1, : self.policy.vocab.text_size], -np.inf)
            # argmax keeps the lowest id on ties
            token = int(np.argmax(scores))
            cot.append(token)
            sentences += token == self.period
        return cot

    def plan(self, state, obs, task, rng: np.random.Generator) -> t.Tuple[np.ndarray, int]:
        cot = self.decode_cot(task.instruction, obs)
        chunk = self.policy.expert.sample_actions(self.context(task.instruction, obs, cot), self.steps, rng)
        return self.norm.denormalize(chunk), len(cot)


def load_eval_policy(path: t.Optional[str], mode: str, steps: t.Optional[int] = None, max_decode_tokens: int = MAX_DECODE_TOKENS, horizon: int = 8):
    if mode == "expert":
        return ExpertPolicy(horizon)
    if mode not in MODE_VARIANTS:
        raise ValueError(f"Unknown evaluation mode: {mode}")
    if path is None:
        raise ModeMismatchError(f"{mode} evaluation needs a checkpoint")
    meta = read_meta(path)
    if meta.get("stage") != 3:
        raise ModeMismatchError(f"{path} is a stage {meta.get('stage')} checkpoint; {mode} evaluation needs stage 3")
    if meta.get("variant") not in MODE_VARIANTS[mode]:
        raise ModeMismatchError(
            f"{path} was trained as {meta.get('variant')}; {mode} evaluation needs one of {list(MODE_VARIANTS[mode])}"
        )
    if not meta.get("completed", False):
        logger.warning("%s is a partial stage 3 checkpoint (step %s)", path, meta.get("step"))
    policy, meta, _ = load_policy(path)
    norm = ActionNorm.from_dict(meta["action_norm"])
    if mode == "explicit_cot":
        return ExplicitCoTPolicy(policy, norm, steps, max_decode_tokens)
    return LatentPolicy(policy, norm, meta["variant"], steps)


# ---------------------------------------------------------------------------
# rollouts
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class RolloutReport:
    mode: str
    family: str
    seed: int
    successes: t.List[bool] = dataclasses.field(default_factory=list)
    lengths: t.List[int] = dataclasses.field(default_factory=list)
    rollout_ms: t.List[float] = dataclasses.field(default_factory=list)
    step_ms: t.List[float] = dataclasses.field(default_factory=list)
    decoded_tokens: t.List[int] = dataclasses.field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.successes)

    @property
    def n_successes(self) -> int:
        return int(sum(self.successes))

    @property
    def success_rate(self) -> float:
        return self.n_successes / self.n if self.n else 0.0

    @property
    def mean_length(self) -> float:
        return float(np.mean(self.lengths)) if self.lengths else 0.0

    @property
    def interval(self) -> t.Tuple[float, float]:
        return analyze.wilson_interval(self.n_successes, self.n)

    def summary(self) -> t.Dict:
        low, high = self.interval
        return {
            "mode": self.mode,
            "family": self.family,
            "seed": self.seed,
            "n_rollouts": self.n,
            "successes": self.n_successes,
            "success_rate": self.success_rate,
            "ci_low": low,
            "ci_high": high,
            "mean_length": self.mean_length,
            "mean_decoded_tokens": float(np.mean(self.decoded_tokens)) if self.decoded_tokens else 0.0,
            "median_step_ms": analyze.percentile_summary(self.step_ms)["median"],
        }

    def rollouts_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "rollout": np.arange(self.n),
                "success": self.successes,
                "length": self.lengths,
                "wall_ms": self.rollout_ms,
            }
        )


def run_episode(policy, family: str, episode_seed: int, rng: np.random.Generator):
    """One closed-loop episode; returns (success, length, per-plan ms, per-plan decoded tokens)."""
    state, task, obs = worldsim.reset(family, episode_seed)
    step_ms, decoded = [], []
    while not state.done:
        start = time.perf_counter()
        chunk, n_tokens = policy.plan(state, obs, task, rng)
        step_ms.append((time.perf_counter() - start) * 1000.0)
        decoded.append(n_tokens)
        if len(chunk) == 0:
            break
        for action in chunk[: policy.horizon]:
            state, obs, _ = worldsim.step(state, worldsim.Action.from_array(action))
            if state.done:
                break
    return worldsim.is_success(state), state.step_count, step_ms, decoded


def _timed_episode(policy, family: str, seed: int, seed_offset: int, index: int):
    start = time.perf_counter()
    success, length, step_ms, decoded = run_episode(
        policy,
        family,
        worldsim.episode_seed(seed + seed_offset, index),
        configure.rng_stream(seed, "eval", index),
    )
    return success, length, (time.perf_counter() - start) * 1000.0, step_ms, decoded


def rollout_eval(
    checkpoint: t.Optional[str],
    family: str,
    n: int,
    seed: int = 0,
    mode: str = "latent",
    seed_offset: int = DEFAULT_SEED_OFFSET,
    steps: t.Optional[int] = None,
    max_decode_tokens: int = MAX_DECODE_TOKENS,
    threads: int = 1,
) -> RolloutReport:
    """Closed-loop episodes on a pool of ``threads`` workers.

    Episode i always uses the same world seed and sampling stream, so the
    report does not depend on the worker count.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if family not in worldsim.FAMILIES:
        raise ValueError(f"Unknown task family: {family}")
    if threads < 1:
        raise ValueError(f"threads must be >= 1, got {threads}")
    policy = load_eval_policy(checkpoint, mode, steps, max_decode_tokens)
    report = RolloutReport(mode=mode, family=family, seed=seed)
    rollout = functools.partial(_timed_episode, policy, family, seed, seed_offset)
    if threads == 1:
        results = [rollout(i) for i in range(n)]
    else:
        with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as executor:
            results = list(executor.map(rollout, range(n)))
    for success, length, wall_ms, step_ms, decoded in results:
        report.successes.append(bool(success))
        report.lengths.append(int(length))
        report.rollout_ms.append(wall_ms)
        report.step_ms.extend(step_ms)
        report.decoded_tokens.extend(decoded)
    logger.info("%s on %s: %d/%d successes", mode, family, report.n_successes, n)
    if mlflow.active_run():
        mlflow.log_metrics({f"{mode}.success_rate": report.success_rate, f"{mode}.mean_length": report.mean_length})
    return report


# ---------------------------------------------------------------------------
# latency
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class LatencyReport:
    table: pd.DataFrame
    token_reduction: float
    time_reduction: float

    def summary(self) -> t.Dict:
        return {"token_reduction": self.token_reduction, "time_reduction": self.time_reduction}


def latency_table(reports: t.Sequence[RolloutReport]) -> pd.DataFrame:
    rows = []
    for report in reports:
        timing = analyze.percentile_summary(report.step_ms)
        rows.append(
            {
                "mode": report.mode,
                "control_steps": len(report.step_ms),
                "median_ms": timing["median"],
                "p90_ms": timing["p90"],
                "mean_decoded_tokens": float(np.mean(report.decoded_tokens)) if report.decoded_tokens else 0.0,
                "success_rate": report.success_rate,
            }
        )
    return pd.DataFrame(rows)


def reduction(latent: float, explicit: float) -> float:
    return 1.0 - latent / explicit if explicit > 0 else 0.0


def bench_latency(
    checkpoint_latent: str,
    checkpoint_explicit: str,
    n: int,
    seed: int = 0,
    family: str = "single_object",
    seed_offset: int = DEFAULT_SEED_OFFSET,
    max_decode_tokens: int = MAX_DECODE_TOKENS,
) -> LatencyReport:
    """Per-control-step wall time and decoded tokens for both inference modes on identical seeds.

    Rollouts run one at a time so that step timings are not shared with other workers.
    """
    latent = rollout_eval(checkpoint_latent, family, n, seed, "latent", seed_offset)
    explicit = rollout_eval(checkpoint_explicit, family, n, seed, "explicit_cot", seed_offset, max_decode_tokens=max_decode_tokens)
    table = latency_table([latent, explicit])
    by_mode = table.set_index("mode")
    report = LatencyReport(
        table=table,
        token_reduction=reduction(by_mode.loc["latent", "mean_decoded_tokens"], by_mode.loc["explicit_cot", "mean_decoded_tokens"]),
        time_reduction=reduction(by_mode.loc["latent", "median_ms"], by_mode.loc["explicit_cot", "median_ms"]),
    )
    if mlflow.active_run():
        mlflow.log_metrics(report.summary())
    return report


# ---------------------------------------------------------------------------
# latent collapse
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class CollapseReport:
    within: float
    across: float
    thinking_vs_instruction: float
    pair_means: t.Dict[str, float]
    collapsed: bool
    degenerate: bool
    coords: pd.DataFrame
    explained_variance: t.Tuple[float, float]
    projection: str = "pca"

    def summary(self) -> t.Dict:
        return {
            "within": self.within,
            "across": self.across,
            "thinking_vs_instruction": self.thinking_vs_instruction,
            "collapsed": self.collapsed,
            "degenerate": self.degenerate,
            "projection": self.projection,
            "explained_variance": list(self.explained_variance),
            "pair_means": dict(self.pair_means),
        }


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    # zero vectors have similarity 0 with everything
    sims = (a / np.where(na > 0, na, 1.0)) @ (b / np.where(nb > 0, nb, 1.0)).T
    return np.clip(sims, -1.0, 1.0)


def _pair_mean(a: np.ndarray, b: np.ndarray, same: bool) -> float:
    sims = cosine_matrix(a, b)
    if same:
        n = len(a)
        if n < 2:
            return float("nan")
        return float((sims.sum() - np.trace(sims)) / (n * (n - 1)))
    return float(sims.mean())


def pca_2d(matrix: np.ndarray) -> t.Tuple[np.ndarray, t.Tuple[float, float]]:
    x = np.asarray(matrix, dtype=np.float64)
    x = x - x.mean(axis=0, keepdims=True)
    _, s, vt = scipy.linalg.svd(x, full_matrices=False)
    components = np.zeros((2, x.shape[1]))
    k = min(2, len(vt))
    components[:k] = vt[:k]
    total = float(np.sum(s ** 2))
    ratios = np.zeros(2)
    if total > 0:
        ratios[:k] = s[:k] ** 2 / total
    return x @ components.T, (float(ratios[0]), float(ratios[1]))


def similarity_report(role_states: t.Mapping[str, np.ndarray]) -> CollapseReport:
    """Collapse statistics for hidden states grouped by role.

    Every role other than ``instruction`` is a thinking position.
    """
    thinking = [role for role in role_states if role != INSTRUCTION]
    if not thinking:
        raise ValueError("need hidden states for at least one thinking position")
    states = {role: np.asarray(v, dtype=np.float64) for role, v in role_states.items()}

    pair_means = {}
    for role in states:
        pair_means[f"{role}|{role}"] = _pair_mean(states[role], states[role], same=True)
    for a, b in itertools.combinations(states, 2):
        pair_means[f"{a}|{b}"] = _pair_mean(states[a], states[b], same=False)

    within = float(np.nanmean([pair_means[f"{r}|{r}"] for r in thinking]))
    across_pairs = [pair_means[f"{a}|{b}"] for a, b in itertools.combinations(thinking, 2)]
    across = float(np.mean(across_pairs)) if across_pairs else float("nan")
    if INSTRUCTION in states:
        vs_instruction = float(np.mean([_pair_mean(states[r], states[INSTRUCTION], same=False) for r in thinking]))
    else:
        vs_instruction = float("nan")

    stacked = np.concatenate([states[r] for r in thinking])
    degenerate = bool(np.all(np.ptp(stacked, axis=0) == 0.0))
    collapsed = degenerate or any(v > COLLAPSE_THRESHOLD for v in pair_means.values() if np.isfinite(v))

    roles = list(states)
    matrix = np.concatenate([states[r] for r in roles])
    coords, explained = pca_2d(matrix)
    labels = np.concatenate([[r] * len(states[r]) for r in roles])
    index = np.concatenate([np.arange(len(states[r])) for r in roles])
    frame = pd.DataFrame({"role": labels, "index": index, "x": coords[:, 0], "y": coords[:, 1]})
    return CollapseReport(within, across, vs_instruction, pair_means, collapsed, degenerate, frame, explained)


def thinking_states(policy: VLAPolicy, variant: str, samples, frames: t.Mapping[int, np.ndarray]) -> t.Dict[str, np.ndarray]:
    roles: t.Dict[str, t.List[np.ndarray]] = {f"thinking_{k + 1}": [] for k in range(3)}
    roles[INSTRUCTION] = []
    for sample in samples:
        ids, layout = inference_sequence(sample.instruction, policy.vocab, variant)
        hidden, _, _ = policy.forward(ids, layout, frames[sample.episode_id][sample.frame], stage=3)
        thinking = np.flatnonzero(ids == THINKING)
        for k, position in enumerate(thinking):
            roles[f"thinking_{k + 1}"].append(hidden.data[position])
        text = layout.positions(TEXT)
        at = int(np.flatnonzero(ids == AT)[0])
        roles[INSTRUCTION].extend(hidden.data[text[text < at]])
    return {role: np.stack(vectors) for role, vectors in roles.items()}


def latent_collapse_metrics(
    checkpoint: str,
    samples: t.Sequence[annotate.AnnotatedSample],
    frames: t.Mapping[int, np.ndarray],
    min_samples: int = 100,
) -> CollapseReport:
    meta = read_meta(checkpoint)
    if meta.get("stage") != 3 or meta.get("variant") not in MODE_VARIANTS["latent"]:
        raise ModeMismatchError(
            f"{checkpoint} (stage {meta.get('stage')}, {meta.get('variant')}) has no thinking tokens to compare"
        )
    if len(samples) < min_samples:
        raise ValueError(f"collapse set has {len(samples)} samples, need at least {min_samples}")
    policy, meta, _ = load_policy(checkpoint)
    report = similarity_report(thinking_states(policy, meta["variant"], samples, frames))
    if report.collapsed:
        logger.warning("latent collapse: %s", {k: round(v, 4) for k, v in report.pair_means.items()})
    return report


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------


def _absolute_paths(config: t.Dict) -> t.Dict:
    config = configure.merge(config, {})
    config["paths"] = {k: os.path.abspath(v) for k, v in config.get("paths", {}).items()}
    return config


def variant_trial(config: t.Dict, params: t.Dict) -> t.Dict:
    """Train one supervision variant through its curriculum, then evaluate it."""
    variant = config["variant"]
    seed = config.get("seed", params.get("seed", 0))
    paths = params["paths"]
    data = trainer.TrainingData.load(paths["trajectories"], paths["annotations"], bins=params["tokenizer"]["bins"])
    out_dir = os.path.join(paths["checkpoints"], "ablation", variant)
    final = trainer.run_curriculum(params, data, out_dir, variant, seed, metrics_path=os.path.join(out_dir, "metrics.csv"))
    evaluation = params.get("eval", {})
    report = rollout_eval(
        final,
        evaluation.get("family", "single_object"),
        params.get("ablation", {}).get("n_rollouts", 40),
        seed,
        mode_for_variant(variant),
        evaluation.get("seed_offset", DEFAULT_SEED_OFFSET),
        max_decode_tokens=evaluation.get("max_decode_tokens", MAX_DECODE_TOKENS),
    )
    return {
        "variant": variant,
        "successes": report.n_successes,
        "n_rollouts": report.n,
        "success_rate": report.success_rate,
        "mean_length": report.mean_length,
        "budget": trainer.variant_budget(params, variant),
        "checkpoint": final,
    }


def ablation_run(config: t.Dict, seed: t.Optional[int] = None, threads: int = 1) -> pd.DataFrame:
    ablation = config.get("ablation", {})
    variants = list(ablation.get("variants", VARIANTS))
    if not variants:
        raise ValueError("ablation grid has no variants")
    unknown = sorted(set(variants) - set(VARIANTS))
    if unknown:
        raise ValueError(f"Unknown variants in ablation grid: {unknown}")
    if set(variants) != set(VARIANTS):
        warnings.warn(f"ablation grid covers only {variants}", UserWarning)

    budgets = {variant: trainer.variant_budget(config, variant) for variant in variants}
    if len(set(budgets.values())) != 1:
        raise ValueError(f"ablation budget mismatch across variants: {budgets}")

    seed = config.get("seed", 0) if seed is None else seed
    config = _absolute_paths(config)
    if ablation.get("backend", "ray") == "ray":
        results = scheduler.schedule_ablation(config, variant_trial, variants, seed, threads)
    else:
        results = pd.DataFrame([variant_trial({"variant": v, "seed": seed}, config) for v in variants])
    table = analyze.ablation_table(results)
    logger.info("ablation:\n%s", table[["label", "success_rate", "ci_low", "ci_high"]].to_string(index=False))
    return table
