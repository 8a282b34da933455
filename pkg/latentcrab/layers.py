"""Layers shared by the multimodal trunk and the flow-matching expert."""

import dataclasses
import math
import typing as t

import numpy as np

from latentcrab import autodiff as ad
from latentcrab.autodiff import Tensor


class Module:
    """Attribute-walking parameter container.

    Every Tensor attribute is a parameter; frozen ones have requires_grad unset.
    Child Modules and lists of Modules are walked in attribute order so names
    are stable across runs.
    """

    def named_parameters(self, prefix: str = "") -> t.Dict[str, Tensor]:
        params: t.Dict[str, Tensor] = {}
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                params[name] = value
            elif isinstance(value, Module):
                params.update(value.named_parameters(name + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        params.update(item.named_parameters(f"{name}.{i}."))
        return params

    def parameters(self) -> t.List[Tensor]:
        return list(self.named_parameters().values())

    def trainable_parameters(self) -> t.Dict[str, Tensor]:
        return {k: v for k, v in self.named_parameters().items() if v.requires_grad}

    def load_arrays(self, arrays: t.Dict[str, np.ndarray], prefix: str = ""):
        for name, param in self.named_parameters().items():
            key = prefix + name
            if key not in arrays:
                raise KeyError(f"missing parameter {key}")
            if arrays[key].shape != param.shape:
                raise ad.ShapeError(f"parameter {key}: expected {list(param.shape)}, got {list(arrays[key].shape)}")
            param.data[...] = arrays[key]


def _param(array: np.ndarray, name: str) -> Tensor:
    return Tensor(array, requires_grad=True, name=name)


class Linear(Module):
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator, bias: bool = True, std: t.Optional[float] = None):
        std = 1.0 / math.sqrt(fan_in) if std is None else std
        self.weight = _param(rng.normal(0.0, std, size=(fan_in, fan_out)), "weight")
        self.bias = _param(np.zeros(fan_out), "bias") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.matmul(x, self.weight)
        if self.bias is not None:
            y = ad.add(y, self.bias)
        return y


class RMSNorm(Module):
    def __init__(self, width: int, eps: float = 1e-5):
        self.weight = _param(np.ones(width), "weight")
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.rms_norm(x, self.weight, self.eps)


class Attention(Module):
    """Multi-head attention; cross-attention when a context is passed."""

    def __init__(self, width: int, n_heads: int, rng: np.random.Generator, context_width: t.Optional[int] = None):
        if width % n_heads:
            raise ValueError(f"width {width} not divisible by {n_heads} heads")
        context_width = width if context_width is None else context_width
        self.n_heads = n_heads
        self.wq = Linear(width, width, rng)
        self.wk = Linear(context_width, width, rng)
        self.wv = Linear(context_width, width, rng)
        self.wo = Linear(width, width, rng, std=0.5 / math.sqrt(width))

    def _split(self, x: Tensor) -> Tensor:
        length, width = x.shape
        heads = ad.reshape(x, (length, self.n_heads, width // self.n_heads))
        return ad.transpose(heads, (1, 0, 2))

    def __call__(self, x: Tensor, mask: np.ndarray, context: t.Optional[Tensor] = None) -> Tensor:
        source = x if context is None else context
        q = self._split(self.wq(x))
        k = self._split(self.wk(source))
        v = self._split(self.wv(source))
        head_width = q.shape[-1]
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(head_width))
        probs = ad.masked_softmax(scores, mask)
        mixed = ad.transpose(ad.matmul(probs, v), (1, 0, 2))
        return self.wo(ad.reshape(mixed, (x.shape[0], x.shape[1])))


class FeedForward(Module):
    def __init__(self, width: int, hidden: int, rng: np.random.Generator):
        self.up = Linear(width, hidden, rng)
        self.down = Linear(hidden, width, rng, std=0.5 / math.sqrt(hidden))

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(ad.silu(self.up(x)))


class TransformerBlock(Module):
    """Pre-norm block: masked self-attention then SiLU feedforward."""

    def __init__(self, width: int, n_heads: int, ffn_mult: int, rng: np.random.Generator):
        self.norm_attn = RMSNorm(width)
        self.attn = Attention(width, n_heads, rng)
        self.norm_ffn = RMSNorm(width)
        self.ffn = FeedForward(width, ffn_mult * width, rng)

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        x = ad.add(x, self.attn(self.norm_attn(x), mask))
        return ad.add(x, self.ffn(self.norm_ffn(x)))


def sinusoidal_embedding(value: float, width: int = 64, max_period: float = 10000.0) -> np.ndarray:
    half = width // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    angles = float(value) * 1000.0 * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)]).astype(ad.get_default_dtype())


@dataclasses.dataclass
class LatentContext:
    """Ordered final-layer vectors the action expert cross-attends to."""

    vectors: Tensor  # [N, width]
    # False entries are padding and get zero attention weight
    mask: t.Optional[np.ndarray] = None

    def __post_init__(self):
        if self.vectors.ndim != 2 or self.vectors.shape[0] == 0:
            raise ValueError(f"latent context must be a non-empty [N, width] array, got {list(self.vectors.shape)}")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != self.vectors.shape[:1]:
                raise ad.ShapeError(f"context mask {list(self.mask.shape)} does not match {self.vectors.shape[0]} vectors")
            if not self.mask.any():
                raise ValueError("latent context mask hides every vector")

    def __len__(self):
        return self.vectors.shape[0]

    @property
    def width(self) -> int:
        return self.vectors.shape[1]

    def attention_mask(self, queries: int) -> np.ndarray:
        valid = np.ones(len(self), dtype=bool) if self.mask is None else self.mask
        return np.broadcast_to(valid, (queries, len(self))).copy()

    def padded(self, extra: int) -> "LatentContext":
        """Append ``extra`` masked zero vectors."""
        pad = Tensor(np.zeros((extra, self.width)))
        valid = np.ones(len(self), dtype=bool) if self.mask is None else self.mask
        return LatentContext(ad.concatenate([self.vectors, pad]), np.concatenate([valid, np.zeros(extra, dtype=bool)]))
