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
"""Three-stage curriculum: losses, phase schedule, AdamW, EMA and checkpoints."""

import dataclasses
import logging
import math
import os
import time
import typing as t

import mlflow
import numpy as np
import pandas as pd

from latentcrab import annotate, checkpoint, configure, worldsim
from latentcrab import autodiff as ad
from latentcrab.flow import ExpertConfig, flow_loss
from latentcrab.model import (
    VLAPolicy,
    ModelConfig,
    act_token_loss,
    cot_loss,
    ema_update,
    extract_latent_context,
    vis_loss,
)
from latentcrab.tokenizer import SINGLE_PASS_VARIANTS, ActionNorm, ActionTokenizerCfg, SegmentLayout, Vocab, format_sequence

logger = logging.getLogger(__name__)

TERMS = ("cot", "vis", "act_dis", "act_con")
METRIC_COLUMNS = [
    "step", "stage", "phase",
    "cot", "vis", "act_dis", "act_con",
    "w_cot", "w_vis", "w_act_dis", "w_act_con",
    "total", "lr_trunk", "lr_expert", "cot_tokens", "wall_ms",
]
TIMING_COLUMNS = ("wall_ms",)


class StageOrderError(RuntimeError):
    pass


class TrainingDivergedError(FloatingPointError):
    def __init__(self, step: int, breakdown: t.Dict[str, float]):
        self.step = step
        self.breakdown = breakdown
        super().__init__(f"training diverged at step {step}; terms so far: {breakdown}")


_STAGE_WEIGHTS = {
    1: dict(w_cot=1.0, w_vis=0.1, w_act_dis=1.0, w_act_con=0.0),
    2: dict(w_cot=1.0, w_vis=0.2, w_act_dis=1.0, w_act_con=0.0),
    3: dict(w_cot=0.0, w_vis=0.0, w_act_dis=0.0, w_act_con=1.0),
}


@dataclasses.dataclass(frozen=True)
class StageConfig:
    stage: int
    steps: int
    batch_size: int = 16
    lr_trunk: float = 1e-5
    lr_expert: float = 1e-4
    w_cot: float = 1.0
    w_vis: float = 0.1
    w_act_dis: float = 1.0
    w_act_con: float = 0.0
    warmup_ratio: float = 0.1
    schedule: str = "cosine"
    betas: t.Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    checkpoint_every: int = 0
    log_every: int = 50

    def __post_init__(self):
        if self.stage not in (1, 2, 3):
            raise ValueError(f"Unknown stage: {self.stage}")
        if self.steps < 1:
            raise ValueError(f"stage {self.stage} needs at least one step, got {self.steps}")

    @classmethod
    def default(cls, stage: int, steps: int) -> "StageConfig":
        return cls(stage=stage, steps=steps, **_STAGE_WEIGHTS[stage])

    @classmethod
    def from_dict(cls, stage: int, d: t.Dict) -> "StageConfig":
        fields = {f.name for f in dataclasses.fields(cls)} - {"stage"}
        values = {k: v for k, v in d.items() if k in fields}
        if "betas" in values:
            values["betas"] = tuple(values["betas"])
        return cls(stage=stage, **values)

    @classmethod
    def from_config(cls, config: t.Dict, stage: int, variant: t.Optional[str] = None) -> "StageConfig":
        variant = variant or config.get("variant", "latent_full")
        cfg = cls.from_dict(stage, configure.stage_config(config, stage))
        if stage == 1 and variant in SINGLE_PASS_VARIANTS:
            # equal budgets: stage 2 steps move into stage 1
            cfg = dataclasses.replace(cfg, steps=cfg.steps + configure.stage_config(config, 2)["steps"])
        return cfg

    def weight(self, term: str) -> float:
        return getattr(self, f"w_{term}")


@dataclasses.dataclass(frozen=True)
class CurriculumSchedule:
    """Equal-length stage 2 phases 1..n_phases over ``total_steps``."""

    total_steps: int
    n_phases: int = 3

    def phase_at(self, step: int) -> int:
        if not 0 <= step < self.total_steps:
            raise ValueError(f"step {step} outside [0, {self.total_steps})")
        return 1 + (step * self.n_phases) // self.total_steps

    @property
    def boundaries(self) -> t.List[int]:
        return [math.ceil(k * self.total_steps / self.n_phases) for k in range(1, self.n_phases)]


def phase_for(stage: int, step: int, schedule: t.Optional[CurriculumSchedule] = None) -> int:
    if stage == 1:
        return 0
    if stage == 3:
        return 3
    return schedule.phase_at(step)


def stage_prerequisite(stage: int, variant: str = "latent_full") -> t.Optional[int]:
    if stage == 1:
        return None
    if variant in SINGLE_PASS_VARIANTS:
        if stage == 2:
            raise StageOrderError(f"variant {variant} has no stage 2")
        return 1
    return stage - 1


def curriculum_stages(variant: str = "latent_full") -> t.Tuple[int, ...]:
    return (1, 3) if variant in SINGLE_PASS_VARIANTS else (1, 2, 3)


def lr_at(step: int, peak: float, total_steps: int, warmup_ratio: float = 0.1, schedule: str = "cosine") -> float:
    """Linear warmup to ``peak`` then decay to 0 at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup = int(round(warmup_ratio * total_steps))
    if step < warmup:
        return peak * step / warmup
    if schedule == "constant":
        return peak
    progress = (step - warmup) / max(1, total_steps - warmup)
    if schedule == "linear":
        return peak * (1.0 - progress)
    if schedule == "cosine":
        return peak * 0.5 * (1.0 + math.cos(math.pi * progress))
    raise ValueError(f"Unknown schedule: {schedule}")


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class OptimizerState:
    step: int = 0
    m: t.Dict[str, np.ndarray] = dataclasses.field(default_factory=dict)
    v: t.Dict[str, np.ndarray] = dataclasses.field(default_factory=dict)

    def to_tensors(self) -> t.Dict[str, np.ndarray]:
        out = {f"opt.m.{k}": a for k, a in self.m.items()}
        out.update({f"opt.v.{k}": a for k, a in self.v.items()})
        return out

    @classmethod
    def from_tensors(cls, tensors: t.Mapping[str, np.ndarray], step: int) -> "OptimizerState":
        m = {k[len("opt.m."):]: a.copy() for k, a in tensors.items() if k.startswith("opt.m.")}
        v = {k[len("opt.v."):]: a.copy() for k, a in tensors.items() if k.startswith("opt.v.")}
        return cls(step=step, m=m, v=v)


def clip_grad_norm(grads: t.Dict[str, np.ndarray], max_norm: float) -> t.Tuple[t.Dict[str, np.ndarray], float]:
    norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        grads = {k: (g * factor).astype(g.dtype) for k, g in grads.items()}
    return grads, norm


def optimizer_step(
    params: t.Mapping[str, ad.Tensor],
    grads: t.Mapping[str, np.ndarray],
    state: OptimizerState,
    lr: t.Union[float, t.Mapping[str, float]],
    betas: t.Tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.01,
) -> t.Tuple[t.Mapping[str, ad.Tensor], OptimizerState]:
    """AdamW with bias-corrected moments and decoupled weight decay.

    Only parameters present in ``grads`` are updated.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise ad.NonFiniteError(f"non-finite gradient for {name}")
    state.step += 1
    beta1, beta2 = betas
    correction1 = 1.0 - beta1 ** state.step
    correction2 = 1.0 - beta2 ** state.step
    for name, g in grads.items():
        p = params[name]
        g = np.asarray(g, dtype=p.data.dtype)
        m = state.m.get(name, np.zeros_like(p.data))
        v = state.v.get(name, np.zeros_like(p.data))
        m = (beta1 * m + (1.0 - beta1) * g).astype(p.data.dtype)
        v = (beta2 * v + (1.0 - beta2) * g * g).astype(p.data.dtype)
        state.m[name], state.v[name] = m, v
        rate = lr[name] if isinstance(lr, t.Mapping) else lr
        update = rate * ((m / correction1) / (np.sqrt(v / correction2) + eps) + weight_decay * p.data)
        p.data[...] = (p.data - update).astype(p.data.dtype)
    return params, state


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class TrainingData:
    samples: t.List[annotate.AnnotatedSample]
    frames: t.Dict[int, np.ndarray]
    vocab: Vocab
    norm: ActionNorm
    action_cfg: ActionTokenizerCfg
    _cot_budgets: t.Dict[t.Tuple[int, str], int] = dataclasses.field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def build(
        cls,
        trajectories: t.Iterable[worldsim.Trajectory],
        samples: t.Sequence[annotate.AnnotatedSample],
        vocab: t.Optional[Vocab] = None,
        norm: t.Optional[ActionNorm] = None,
        bins: int = 256,
    ) -> "TrainingData":
        samples = list(samples)
        if not samples:
            raise ValueError("training needs at least one annotated sample")
        frames = {traj.episode_id: traj.observations for traj in trajectories}
        missing = sorted({s.episode_id for s in samples} - set(frames))
        if missing:
            raise ValueError(f"annotations reference episodes without trajectories: {missing[:5]}")
        horizons = {s.horizon for s in samples}
        if len(horizons) != 1:
            raise ValueError(f"annotated samples mix action horizons {sorted(horizons)}")
        vocab = Vocab.from_samples(samples, bins) if vocab is None else vocab
        if norm is None:
            norm = ActionNorm.fit([s.action_chunk for s in samples], [s.action_mask for s in samples])
        action_cfg = ActionTokenizerCfg(bins=vocab.action_bins, horizon=horizons.pop())
        return cls(samples, frames, vocab, norm, action_cfg)

    @classmethod
    def load(cls, trajectories_path: str, annotations_path: str, vocab=None, norm=None, bins: int = 256) -> "TrainingData":
        return cls.build(
            annotate.load_trajectories(trajectories_path),
            annotate.read_samples(annotations_path),
            vocab,
            norm,
            bins,
        )

    def observation(self, sample: annotate.AnnotatedSample, future: bool = False) -> np.ndarray:
        frame = sample.future_frame if future else sample.frame
        return self.frames[sample.episode_id][frame]

    def batch(self, rng: np.random.Generator, size: int) -> t.List[annotate.AnnotatedSample]:
        index = rng.choice(len(self.samples), size=size, replace=len(self.samples) < size)
        return [self.samples[i] for i in index]

    def cot_budget(self, phase: int, variant: str = "latent_full") -> int:
        """Per-sample cap on supervised CoT tokens in a stage 2 phase.

        The cap is the smallest count any sample has in the phase, and never
        exceeds the cap of the phase before, so every stage 2 batch supervises
        exactly ``batch_size * cap`` tokens.
        """
        key = (phase, variant)
        if key not in self._cot_budgets:
            budget = min(
                format_sequence(s, 2, phase, self.vocab, self.action_cfg, variant, self.norm)[1].cot_count
                for s in self.samples
            )
            if phase > 1:
                budget = min(budget, self.cot_budget(phase - 1, variant))
            self._cot_budgets[key] = budget
        return self._cot_budgets[key]


def cap_cot_supervision(layout: SegmentLayout, budget: int) -> SegmentLayout:
    """Keep only the first ``budget`` supervised CoT positions."""
    positions = np.flatnonzero(layout.cot_flags)
    if len(positions) <= budget:
        return layout
    flags = layout.cot_flags.copy()
    flags[positions[budget:]] = False
    return dataclasses.replace(layout, cot_flags=flags)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _mean(terms: t.Sequence[ad.Tensor]) -> ad.Tensor:
    total = terms[0]
    for term in terms[1:]:
        total = ad.add(total, term)
    return ad.scale(total, 1.0 / len(terms))


def _breakdown(per_term: t.Dict[str, t.List[ad.Tensor]]) -> t.Dict[str, float]:
    return {name: float(np.mean([v.item() for v in values])) for name, values in per_term.items() if values}


def train_step(
    policy: VLAPolicy,
    batch: t.Sequence[annotate.AnnotatedSample],
    stage: int,
    phase: int,
    cfg: StageConfig,
    opt_state: OptimizerState,
    rng: np.random.Generator,
    data: TrainingData,
    variant: str = "latent_full",
    step: int = 0,
) -> t.Tuple[VLAPolicy, OptimizerState, t.Dict]:
    start = time.perf_counter()
    per_term: t.Dict[str, t.List[ad.Tensor]] = {name: [] for name in TERMS}
    cot_tokens = 0
    budget = data.cot_budget(phase, variant) if stage == 2 else None
    try:
        with ad.GradientTape() as tape:
            flow_batch = []
            for sample in batch:
                ids, layout = format_sequence(sample, stage, phase, data.vocab, data.action_cfg, variant, data.norm)
                if budget is not None:
                    layout = cap_cot_supervision(layout, budget)
                hidden, logits, z_hat = policy.forward(ids, layout, data.observation(sample), stage)
                cot_tokens += layout.cot_count
                if stage == 3:
                    ctx = extract_latent_context(hidden, layout)
                    flow_batch.append((data.norm.normalize(sample.action_chunk), ctx))
                    continue
                if cfg.w_cot > 0 and layout.cot_count:
                    per_term["cot"].append(cot_loss(logits, ids, layout))
                if cfg.w_vis > 0 and layout.vis_flags.any():
                    per_term["vis"].append(vis_loss(z_hat, data.observation(sample, future=True), policy.ema))
                if cfg.w_act_dis > 0 and layout.act_flags.any():
                    per_term["act_dis"].append(act_token_loss(logits, ids, layout))
            if flow_batch and cfg.w_act_con > 0:
                per_term["act_con"].append(flow_loss(policy.expert.velocity, flow_batch, rng))

            terms = {name: _mean(values) for name, values in per_term.items() if values}
            if not terms:
                raise ValueError(f"stage {stage} phase {phase} batch has no active loss term")
            total = None
            for name, term in terms.items():
                weighted = ad.scale(term, cfg.weight(name))
                total = weighted if total is None else ad.add(total, weighted)
        grads = ad.backward(total, tape)

        trainable = policy.trainable_parameters()
        named = {name: grads[id(p)] for name, p in trainable.items() if id(p) in grads}
        named, grad_norm = clip_grad_norm(named, cfg.clip_norm)
        lr_trunk = lr_at(step + 1, cfg.lr_trunk, cfg.steps, cfg.warmup_ratio, cfg.schedule)
        lr_expert = lr_at(step + 1, cfg.lr_expert, cfg.steps, cfg.warmup_ratio, cfg.schedule)
        rates = {name: lr_expert if name.startswith("expert.") else lr_trunk for name in named}
        optimizer_step(trainable, named, opt_state, rates, cfg.betas, cfg.eps, cfg.weight_decay)
    except ad.NonFiniteError as e:
        raise TrainingDivergedError(step, _breakdown(per_term)) from e

    if stage in (1, 2):
        ema_update(policy.encoder, policy.ema)

    metrics: t.Dict[str, t.Any] = {"step": step, "stage": stage, "phase": phase}
    for name in TERMS:
        metrics[name] = terms[name].item() if name in terms else None
    for name in TERMS:
        metrics[f"w_{name}"] = cfg.weight(name) if name in terms else None
    metrics.update(
        total=total.item(),
        lr_trunk=lr_trunk,
        lr_expert=lr_expert,
        cot_tokens=cot_tokens,
        wall_ms=(time.perf_counter() - start) * 1000.0,
    )
    logger.debug("step %d grad norm %.4f", step, grad_norm)
    return policy, opt_state, metrics


def write_metrics(path: str, rows: t.Sequence[t.Dict]):
    if not rows:
        return
    frame = pd.DataFrame(list(rows), columns=METRIC_COLUMNS)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    frame.to_csv(path, mode="a", header=not os.path.exists(path), index=False)


def _start_mode(stage: int, variant: str, meta: t.Optional[t.Dict]) -> str:
    required = stage_prerequisite(stage, variant)
    if meta is None:
        if required is not None:
            raise StageOrderError(f"stage {stage} needs a completed stage {required} checkpoint (--from)")
        return "fresh"
    if meta.get("variant", variant) != variant:
        raise StageOrderError(f"checkpoint was trained as {meta.get('variant')}, not {variant}")
    if meta.get("stage") == stage and not meta.get("completed", False):
        return "resume"
    if required is not None and meta.get("stage") == required and meta.get("completed", False):
        return "continue"
    state = "completed" if meta.get("completed") else "partial"
    raise StageOrderError(
        f"stage {stage} ({variant}) cannot start from a {state} stage {meta.get('stage')} checkpoint"
        + (f"; it needs a completed stage {required} checkpoint" if required else "")
    )


def run_stage(
    stage: int,
    data: TrainingData,
    cfg: StageConfig,
    checkpoint_in: t.Optional[str] = None,
    checkpoint_out: str = "checkpoints/stage.lara",
    seed: int = 0,
    variant: str = "latent_full",
    model_cfg: t.Optional[ModelConfig] = None,
    expert_cfg: t.Optional[ExpertConfig] = None,
    metrics_path: t.Optional[str] = None,
) -> str:
    if cfg.stage != stage:
        raise ValueError(f"stage config is for stage {cfg.stage}, not {stage}")
    meta_in = checkpoint.read_meta(checkpoint_in) if checkpoint_in else None
    mode = _start_mode(stage, variant, meta_in)

    if mode == "fresh":
        model_cfg = model_cfg or ModelConfig()
        expert_cfg = expert_cfg or ExpertConfig(horizon=data.action_cfg.horizon)
        policy = VLAPolicy(model_cfg, expert_cfg, data.vocab, seed=configure.stream_seed(seed, "init"))
        opt_state, start = OptimizerState(), 0
    else:
        policy, meta_in, extra = checkpoint.load_policy(checkpoint_in)
        if policy.vocab != data.vocab:
            raise ValueError(f"{checkpoint_in}: training data vocabulary differs from the checkpoint's")
        if mode == "resume":
            opt_state = OptimizerState.from_tensors(extra, meta_in.get("opt_step", meta_in["step"]))
            start = meta_in["step"]
        else:
            opt_state, start = OptimizerState(), 0
    if policy.expert_cfg.horizon != data.action_cfg.horizon:
        raise ValueError(f"expert horizon {policy.expert_cfg.horizon} != data horizon {data.action_cfg.horizon}")

    logger.info("stage %d (%s): %s at step %d of %d", stage, variant, mode, start, cfg.steps)
    if mlflow.active_run():
        mlflow.log_params({f"stage{stage}.{k}": v for k, v in dataclasses.asdict(cfg).items()})

    schedule = CurriculumSchedule(cfg.steps) if stage == 2 else None
    rows: t.List[t.Dict] = []
    phase = phase_for(stage, start, schedule) if start < cfg.steps else 3

    def save(step_done: int, completed: bool):
        meta = {
            "stage": stage,
            "phase": phase,
            "step": step_done,
            "completed": completed,
            "variant": variant,
            "seed": seed,
            "opt_step": opt_state.step,
            "action_norm": data.norm.to_dict(),
            "action_cfg": dataclasses.asdict(data.action_cfg),
            "stage_config": dataclasses.asdict(cfg),
        }
        checkpoint.save_policy(checkpoint_out, policy, meta, opt_state.to_tensors())
        if metrics_path:
            write_metrics(metrics_path, rows)
        rows.clear()

    previous_phase = None
    for step in range(start, cfg.steps):
        phase = phase_for(stage, step, schedule)
        if stage == 2 and phase != previous_phase:
            logger.info("stage 2 enters phase %d at step %d", phase, step)
        previous_phase = phase

        batch = data.batch(configure.rng_stream(seed, "batch", stage, step), cfg.batch_size)
        flow_rng = configure.rng_stream(seed, "flow", stage, step)
        _, opt_state, metrics = train_step(policy, batch, stage, phase, cfg, opt_state, flow_rng, data, variant, step)
        rows.append(metrics)

        if mlflow.active_run():
            mlflow.log_metrics({k: float(v) for k, v in metrics.items() if v is not None and k not in ("step",)}, step=step)
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            logger.info("stage %d step %d/%d phase %d total %.4f", stage, step + 1, cfg.steps, phase, metrics["total"])
        if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0 and step + 1 < cfg.steps:
            save(step + 1, completed=False)

    save(cfg.steps, completed=True)
    return checkpoint_out


def run_curriculum(
    config: t.Dict,
    data: TrainingData,
    out_dir: str,
    variant: t.Optional[str] = None,
    seed: t.Optional[int] = None,
    metrics_path: t.Optional[str] = None,
) -> str:
    """All stages of a variant back to back; returns the final checkpoint path."""
    variant = variant or config.get("variant", "latent_full")
    seed = config.get("seed", 0) if seed is None else seed
    model_cfg = ModelConfig.from_dict(config.get("model", {}))
    expert_cfg = ExpertConfig.from_dict({**config.get("expert", {}), "horizon": data.action_cfg.horizon})
    previous = None
    for stage in curriculum_stages(variant):
        out = os.path.join(out_dir, f"{variant}_stage{stage}.lara")
        previous = run_stage(
            stage,
            data,
            StageConfig.from_config(config, stage, variant),
            checkpoint_in=previous,
            checkpoint_out=out,
            seed=seed,
            variant=variant,
            model_cfg=model_cfg,
            expert_cfg=expert_cfg,
            metrics_path=metrics_path,
        )
    return previous


def variant_budget(config: t.Dict, variant: str) -> int:
    return sum(StageConfig.from_config(config, stage, variant).steps for stage in curriculum_stages(variant))
