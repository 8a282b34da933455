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
"""Multimodal trunk: patch encoder, EMA target encoder, masked transformer and heads."""

import copy
import dataclasses
import typing as t

import numpy as np

from latentcrab import autodiff as ad
from latentcrab import flow, worldsim
from latentcrab.autodiff import Tensor
from latentcrab.layers import LatentContext, Linear, Module, RMSNorm, TransformerBlock, _param
from latentcrab.tokenizer import ACT, CUR_IMG, FUT_IMG, N_PATCHES, TEXT, THINKING, SegmentLayout, Vocab

__all__ = [
    "ModelConfig",
    "VisualEncoder",
    "EmaEncoder",
    "Trunk",
    "LatentContext",
    "VLAPolicy",
    "build_lara_mask",
    "cot_loss",
    "act_token_loss",
    "vis_loss",
    "ema_update",
    "extract_latent_context",
]


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    width: int = 128
    n_layers: int = 4
    n_heads: int = 4
    ffn_mult: int = 4
    max_len: int = 192
    ema_decay: float = 0.99
    # feed each thinking token the hidden state that precedes it instead of its embedding
    thought_feedback: bool = False
    patch_size: int = worldsim.PATCH_SIZE
    image_size: int = worldsim.IMAGE_SIZE

    @property
    def d_z(self) -> int:
        # predicted latents live in the encoder's output space
        return self.width

    @classmethod
    def from_dict(cls, d: t.Dict) -> "ModelConfig":
        fields = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in fields})


def patchify(rgb: np.ndarray, patch_size: int = worldsim.PATCH_SIZE) -> np.ndarray:
    """[S, S, 3] image to row-major [(S/p)^2, p*p*3] patches."""
    rgb = np.asarray(rgb)
    size = rgb.shape[0]
    if rgb.shape != (size, size, 3) or size % patch_size:
        raise ad.ShapeError(f"image shape {rgb.shape} cannot be cut into {patch_size}x{patch_size} patches")
    grid = size // patch_size
    patches = rgb.reshape(grid, patch_size, grid, patch_size, 3).transpose(0, 2, 1, 3, 4)
    return patches.reshape(grid * grid, patch_size * patch_size * 3)


def _pixels(obs) -> np.ndarray:
    return obs.rgb if isinstance(obs, worldsim.Observation) else np.asarray(obs)


class VisualEncoder(Module):
    def __init__(self, width: int, rng: np.random.Generator, patch_size: int = worldsim.PATCH_SIZE, image_size: int = worldsim.IMAGE_SIZE):
        n_patches = (image_size // patch_size) ** 2
        self.patch_size = patch_size
        self.proj = Linear(patch_size * patch_size * 3, width, rng)
        self.position = _param(rng.normal(0.0, 0.02, size=(n_patches, width)), "position")

    def encode_patches(self, patches) -> Tensor:
        return ad.add(self.proj(Tensor(patches)), self.position)

    def __call__(self, obs) -> Tensor:
        return self.encode_patches(patchify(_pixels(obs), self.patch_size))


class EmaEncoder(Module):
    """Frozen copy of the online encoder, moved only by ``ema_update``."""

    def __init__(self, online: VisualEncoder, decay: float = 0.99):
        if not 0.0 <= decay <= 1.0:
            raise ValueError(f"EMA decay must lie in [0, 1], got {decay}")
        self.encoder = copy.deepcopy(online)
        for p in self.encoder.parameters():
            p.requires_grad = False
        self.decay = decay

    def encode(self, obs) -> np.ndarray:
        return self.encoder(obs).data.copy()

    __call__ = encode


def ema_update(online: VisualEncoder, ema: EmaEncoder, decay: t.Optional[float] = None) -> EmaEncoder:
    decay = ema.decay if decay is None else decay
    shadow = ema.encoder.named_parameters()
    for name, param in online.named_parameters().items():
        target = shadow.get(name)
        if target is None or target.shape != param.shape:
            raise ad.ShapeError(f"EMA parameter {name} does not match the online encoder")
        target.data[...] = decay * target.data + (1.0 - decay) * param.data
    return ema


def _replace_rows(x: Tensor, rows: t.Mapping[int, Tensor]) -> Tensor:
    """`x` with the given row positions swapped for [1, width] tensors."""
    pieces, cursor = [], 0
    for position in sorted(rows):
        if position > cursor:
            pieces.append(ad.slice_(x, slice(cursor, position)))
        pieces.append(rows[position])
        cursor = position + 1
    if cursor < x.shape[0]:
        pieces.append(ad.slice_(x, slice(cursor, x.shape[0])))
    return ad.concatenate(pieces)


class Trunk(Module):
    def __init__(self, cfg: ModelConfig, vocab_size: int, rng: np.random.Generator):
        self.cfg = cfg
        self.token_embed = _param(rng.normal(0.0, 0.02, size=(vocab_size, cfg.width)), "token_embed")
        self.position = _param(rng.normal(0.0, 0.02, size=(cfg.max_len, cfg.width)), "position")
        self.img_slot = _param(rng.normal(0.0, 0.02, size=(N_PATCHES, cfg.width)), "img_slot")
        self.blocks = [TransformerBlock(cfg.width, cfg.n_heads, cfg.ffn_mult, rng) for _ in range(cfg.n_layers)]
        self.norm = RMSNorm(cfg.width)
        self.lm_head = Linear(cfg.width, vocab_size, rng, bias=False)
        self.visual_head = Linear(cfg.width, cfg.d_z, rng)

    @property
    def vocab_size(self) -> int:
        return self.token_embed.shape[0]

    def embed(self, tokens: np.ndarray, cur_latents: Tensor, layout: SegmentLayout, feed: t.Optional[t.Dict[int, Tensor]] = None) -> Tensor:
        pieces = []
        cur_offset = fut_offset = 0
        for seg in layout.segments:
            if seg.kind == CUR_IMG:
                pieces.append(ad.slice_(cur_latents, slice(cur_offset, cur_offset + seg.length)))
                cur_offset += seg.length
                continue
            piece = ad.embedding(self.token_embed, tokens[seg.start: seg.stop])
            if seg.kind == FUT_IMG:
                slot = ad.slice_(self.img_slot, slice(fut_offset, fut_offset + seg.length))
                piece = ad.add(piece, slot)
                fut_offset += seg.length
            pieces.append(piece)
        if cur_offset != cur_latents.shape[0]:
            raise ad.ShapeError(f"layout has {cur_offset} CUR_IMG positions for {cur_latents.shape[0]} image latents")
        x = ad.concatenate(pieces)
        if feed:
            x = _replace_rows(x, feed)
        return ad.add(x, ad.slice_(self.position, slice(0, len(tokens))))

    def __call__(self, tokens, cur_latents: Tensor, layout: SegmentLayout, mask: np.ndarray, feed=None):
        tokens = np.asarray(tokens, dtype=np.int64)
        length = len(tokens)
        if len(layout) != length:
            raise ad.ShapeError(f"{length} tokens for a layout of length {len(layout)}")
        if length > self.cfg.max_len:
            raise ad.ShapeError(f"sequence of {length} tokens exceeds max_len {self.cfg.max_len}")
        if np.shape(mask) != (length, length):
            raise ad.ShapeError(f"mask shape {np.shape(mask)} does not match {length} tokens")

        x = self.embed(tokens, cur_latents, layout, feed)
        for block in self.blocks:
            x = block(x, mask)
        hidden = self.norm(x)
        logits = self.lm_head(hidden)
        fut = layout.positions(FUT_IMG)
        z_hat = self.visual_head(ad.slice_(hidden, fut)) if len(fut) else None
        return hidden, logits, z_hat


def build_lara_mask(layout: SegmentLayout, stage: int = 1) -> np.ndarray:
    """Boolean [T, T] attention mask, True where row i may attend column j.

    TEXT rows are causal over every earlier non-ACT position. CUR_IMG rows see
    earlier TEXT and their whole own block; FUT_IMG rows see earlier
    TEXT/CUR_IMG and their whole own block.
    ACT rows see every earlier position.
    """
    if stage == 3 and layout.has(ACT):
        raise ValueError("stage 3 layouts must not contain an ACT segment")
    kinds = layout.kinds
    length = len(layout)
    block = np.empty(length, dtype=np.int64)
    for index, seg in enumerate(layout.segments):
        block[seg.start: seg.stop] = index

    i = np.arange(length)[:, None]
    j = np.arange(length)[None, :]
    earlier = j < i
    col = {kind: (kinds == kind)[None, :] for kind in (TEXT, CUR_IMG, FUT_IMG, ACT)}
    row = {kind: (kinds == kind)[:, None] for kind in (TEXT, CUR_IMG, FUT_IMG, ACT)}
    same_block = block[:, None] == block[None, :]

    text_rows = (j <= i) & ~col[ACT]
    cur_rows = (col[TEXT] & earlier) | (col[CUR_IMG] & same_block)
    fut_rows = ((col[TEXT] | col[CUR_IMG]) & earlier) | (col[FUT_IMG] & same_block)
    act_rows = earlier

    mask = (row[TEXT] & text_rows) | (row[CUR_IMG] & cur_rows) | (row[FUT_IMG] & fut_rows) | (row[ACT] & act_rows)
    empty = np.flatnonzero(~mask.any(axis=1))
    if len(empty):
        raise ValueError(f"attention rows {empty.tolist()} attend nothing")
    return mask


def _shifted_nll(logits: Tensor, tokens, flags: np.ndarray, what: str) -> Tensor:
    # the logits at position i - 1 predict the token at position i
    tokens = np.asarray(tokens, dtype=np.int64)
    flags = np.asarray(flags, dtype=bool)
    if logits.shape[0] != len(tokens) or len(flags) != len(tokens):
        raise ad.ShapeError(f"{what}: logits {list(logits.shape)} for {len(tokens)} tokens")
    if flags[0]:
        raise ValueError(f"{what}: the first position has no predecessor")
    if not flags.any():
        raise ValueError(f"{what}: no supervised positions")
    targets = np.zeros_like(tokens)
    targets[:-1] = tokens[1:]
    supervised = np.zeros_like(flags)
    supervised[:-1] = flags[1:]
    return ad.cross_entropy(logits, targets, supervised)


def cot_loss(logits: Tensor, tokens, layout: SegmentLayout) -> Tensor:
    return _shifted_nll(logits, tokens, layout.cot_flags, "cot_loss")


def act_token_loss(logits: Tensor, tokens, layout: SegmentLayout) -> Tensor:
    if not layout.has(ACT):
        raise ValueError("act_token_loss: layout has no ACT segment")
    return _shifted_nll(logits, tokens, layout.act_flags, "act_token_loss")


def vis_loss(z_hat: Tensor, target_obs, ema: EmaEncoder) -> Tensor:
    if z_hat is None:
        raise ValueError("vis_loss: no FUT_IMG predictions")
    # the EMA target is a constant
    return ad.l1_loss(z_hat, ema.encode(target_obs))


def extract_latent_context(hidden: Tensor, layout: SegmentLayout) -> LatentContext:
    fut = layout.positions(FUT_IMG)
    if not len(fut):
        raise ValueError("latent context needs a FUT_IMG segment")
    index = np.concatenate([layout.positions(TEXT), fut])
    return LatentContext(ad.slice_(hidden, index))


class VLAPolicy(Module):
    """Online encoder, trunk, action expert and EMA encoder under one parameter namespace."""

    def __init__(self, cfg: ModelConfig, expert_cfg: "flow.ExpertConfig", vocab: Vocab, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.expert_cfg = expert_cfg
        self.vocab = vocab
        self.encoder = VisualEncoder(cfg.width, rng, cfg.patch_size, cfg.image_size)
        self.trunk = Trunk(cfg, vocab.size, rng)
        self.expert = flow.ExpertNet(expert_cfg, cfg.width, rng)
        self.ema = EmaEncoder(self.encoder, cfg.ema_decay)

    def forward(self, tokens, layout: SegmentLayout, cur_obs, stage: int = 1, mask: t.Optional[np.ndarray] = None):
        mask = build_lara_mask(layout, stage) if mask is None else mask
        cur = self.encoder(cur_obs)
        thinking = np.flatnonzero(np.asarray(tokens) == THINKING) if self.cfg.thought_feedback else ()
        feed: t.Dict[int, Tensor] = {}
        # one extra pass per thinking token, left to right
        for position in thinking:
            hidden, _, _ = self.trunk(tokens, cur, layout, mask, feed)
            feed[int(position)] = ad.slice_(hidden, slice(position - 1, position))
        return self.trunk(tokens, cur, layout, mask, feed)

    def latent_context(self, tokens, layout: SegmentLayout, cur_obs, stage: int = 3) -> LatentContext:
        hidden, _, _ = self.forward(tokens, layout, cur_obs, stage)
        return extract_latent_context(hidden, layout)

    def zero_position_embeddings(self):
        """Drop every absolute position signal; used by the patch-permutation check."""
        self.trunk.position.data[...] = 0.0
        self.trunk.img_slot.data[...] = 0.0
        self.encoder.position.data[...] = 0.0
