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
"""Flow-matching action expert conditioned on the trunk's latent context."""

import dataclasses
import math
import typing as t

import numpy as np

from latentcrab import autodiff as ad
from latentcrab.autodiff import Tensor
from latentcrab.layers import (
    Attention,
    FeedForward,
    LatentContext,
    Linear,
    Module,
    RMSNorm,
    _param,
    sinusoidal_embedding,
)


@dataclasses.dataclass(frozen=True)
class ExpertConfig:
    width: int = 64
    n_blocks: int = 4
    n_heads: int = 4
    ffn_mult: int = 4
    horizon: int = 8
    dims: int = 3
    time_width: int = 64
    sample_steps: int = 10

    @classmethod
    def from_dict(cls, d: t.Dict) -> "ExpertConfig":
        fields = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in fields})


@dataclasses.dataclass(frozen=True)
class FlowState:
    a_tau: np.ndarray
    tau: float
    noise: np.ndarray

    @classmethod
    def sample(cls, a_t, rng: np.random.Generator) -> "FlowState":
        # tau first, then noise: flow_loss draws in this order per sample
        tau = float(rng.uniform(0.0, 1.0))
        noise = rng.standard_normal(np.shape(a_t))
        return cls(interpolate(a_t, noise, tau), tau, noise)


def interpolate(a_t, noise, tau: float) -> np.ndarray:
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    a_t, noise = np.asarray(a_t, dtype=np.float64), np.asarray(noise, dtype=np.float64)
    if a_t.shape != noise.shape:
        raise ad.ShapeError(f"action {a_t.shape} and noise {noise.shape} differ")
    return (1.0 - tau) * noise + tau * a_t


class ExpertBlock(Module):
    """Self-attention over action steps, cross-attention to the context, feedforward."""

    def __init__(self, width: int, n_heads: int, ffn_mult: int, context_width: int, rng: np.random.Generator):
        self.norm_self = RMSNorm(width)
        self.self_attn = Attention(width, n_heads, rng)
        self.norm_cross = RMSNorm(width)
        self.cross_attn = Attention(width, n_heads, rng, context_width=context_width)
        self.norm_ffn = RMSNorm(width)
        self.ffn = FeedForward(width, ffn_mult * width, rng)

    def __call__(self, x: Tensor, context: Tensor, context_mask: np.ndarray) -> Tensor:
        steps = x.shape[0]
        x = ad.add(x, self.self_attn(self.norm_self(x), np.ones((steps, steps), dtype=bool)))
        x = ad.add(x, self.cross_attn(self.norm_cross(x), context_mask, context=context))
        return ad.add(x, self.ffn(self.norm_ffn(x)))


class ExpertNet(Module):
    def __init__(self, cfg: ExpertConfig, context_width: int, rng: np.random.Generator):
        self.cfg = cfg
        self.action_in = Linear(cfg.dims, cfg.width, rng)
        self.step_embed = _param(rng.normal(0.0, 0.02, size=(cfg.horizon, cfg.width)), "step_embed")
        self.time_proj = Linear(cfg.time_width, cfg.width, rng)
        self.context_norm = RMSNorm(context_width)
        self.blocks = [ExpertBlock(cfg.width, cfg.n_heads, cfg.ffn_mult, context_width, rng) for _ in range(cfg.n_blocks)]
        self.norm_out = RMSNorm(cfg.width)
        self.head = Linear(cfg.width, cfg.dims, rng, std=0.1 / math.sqrt(cfg.width))

    @property
    def chunk_shape(self) -> t.Tuple[int, int]:
        return self.cfg.horizon, self.cfg.dims

    def velocity(self, a_tau, tau: float, ctx: LatentContext) -> Tensor:
        a_tau = a_tau if isinstance(a_tau, Tensor) else Tensor(a_tau)
        if a_tau.shape != self.chunk_shape:
            raise ad.ShapeError(f"action chunk {list(a_tau.shape)} does not match {list(self.chunk_shape)}")
        if not np.all(np.isfinite(a_tau.data)) or not math.isfinite(tau):
            raise ad.NonFiniteError("velocity called with non-finite inputs")

        time = self.time_proj(Tensor(sinusoidal_embedding(tau, self.cfg.time_width)[None, :]))
        x = ad.add(ad.add(self.action_in(a_tau), self.step_embed), time)
        context = self.context_norm(ctx.vectors)
        context_mask = ctx.attention_mask(self.cfg.horizon)
        for block in self.blocks:
            x = block(x, context, context_mask)
        return self.head(self.norm_out(x))

    __call__ = velocity

    def sample_actions(self, ctx: LatentContext, steps: t.Optional[int] = None, rng: t.Optional[np.random.Generator] = None) -> np.ndarray:
        return sample_actions(self, ctx, self.cfg.sample_steps if steps is None else steps, rng)


VelocityFn = t.Callable[[np.ndarray, float, LatentContext], Tensor]


def flow_loss(velocity_fn: VelocityFn, batch: t.Sequence[t.Tuple[np.ndarray, LatentContext]], rng: np.random.Generator) -> Tensor:
    """Mean squared error between predicted and conditional velocity ``a_t - noise``.

    Per sample, tau ~ U(0, 1) is drawn before the unit-normal noise.
    """
    if not batch:
        raise ValueError("flow_loss needs a non-empty batch")
    terms = []
    for a_t, ctx in batch:
        state = FlowState.sample(a_t, rng)
        prediction = velocity_fn(state.a_tau, state.tau, ctx)
        terms.append(ad.mse_loss(prediction, np.asarray(a_t) - state.noise))
    total = terms[0]
    for term in terms[1:]:
        total = ad.add(total, term)
    return ad.scale(total, 1.0 / len(terms))


def euler_integrate(velocity_fn: t.Callable[[np.ndarray, float], np.ndarray], noise, steps: int) -> np.ndarray:
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    a = np.array(noise, dtype=np.float64)
    for k in range(steps):
        a = a + np.asarray(velocity_fn(a, k / steps), dtype=np.float64) / steps
        if not np.all(np.isfinite(a)):
            raise ad.NonFiniteError(f"sampler state became non-finite at step {k}")
    return a


def sample_actions(expert: ExpertNet, ctx: LatentContext, steps: int, rng: np.random.Generator) -> np.ndarray:
    if rng is None:
        raise ValueError("sample_actions needs a seeded generator")
    noise = rng.standard_normal(expert.chunk_shape)
    chunk = euler_integrate(lambda a, tau: expert.velocity(a, tau, ctx).data, noise, steps)
    return np.clip(chunk, -1.0, 1.0)
