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
"""Word vocabulary, uniform action bins and curriculum-dependent sequence layouts.

Sequence layout: CUR_IMG x16, TEXT (instruction, ``@``, CoT or thinking
wrapper), FUT_IMG x16 (the ``<img_next>`` tokens), then ACT x(H*3) in
stages 1 and 2.
"""

import dataclasses
import json
import re
import typing as t

import numpy as np

from latentcrab import annotate, worldsim

SPECIAL_TOKENS = (
    "<pad>",
    "<bos>",
    "<eos>",
    "@",
    "<img_next>",
    "<|start_of_thinking|>",
    "<|thinking|>",
    "<|end_of_thinking|>",
    "<act>",
    "<unk>",
)
PAD, BOS, EOS, AT, IMG_NEXT, START_THINKING, THINKING, END_THINKING, ACT_BASE, UNK = range(len(SPECIAL_TOKENS))

TEXT, CUR_IMG, FUT_IMG, ACT = "TEXT", "CUR_IMG", "FUT_IMG", "ACT"
SEGMENT_KINDS = (TEXT, CUR_IMG, FUT_IMG, ACT)
N_PATCHES = 16

VARIANTS = ("latent_full", "latent_text", "explicit_cot", "no_cot")
# variants whose curriculum skips stage 2
SINGLE_PASS_VARIANTS = ("explicit_cot", "no_cot")

_TOKEN_PATTERN = re.compile(r"\d+\.\d+|[a-z0-9_]+(?:-[a-z0-9_]+)*|\S")
_NUMBER_HEAD = re.compile(r"^\d+\.$")
_DIGITS = re.compile(r"^\d+$")

_BASE_WORDS = (
    "subtask", "bbox", "reasoning", ":", ".", "[", "]",
    "put", "into", "then", "reach", "toward", "grasp", "carry", "place", "move",
    "hold", "position", "robot", "is", "closing", "opening", "gripper", "bin",
) + annotate.COMPASS + worldsim.COLORS + worldsim.SHAPES


class FormatError(ValueError):
    pass


def split_text(text: str) -> t.List[str]:
    """Lower-case word split; decimals become ``d.`` plus two-digit groups."""
    tokens = []
    for piece in _TOKEN_PATTERN.findall(text.lower()):
        if "." in piece and piece[0].isdigit():
            whole, fraction = piece.split(".", 1)
            tokens.append(whole + ".")
            tokens.extend(fraction[i: i + 2] for i in range(0, len(fraction), 2))
        else:
            tokens.append(piece)
    return tokens


def join_tokens(words: t.Sequence[str]) -> str:
    out: t.List[str] = []
    in_number = False
    for word in words:
        if in_number and _DIGITS.match(word):
            out[-1] += word
            continue
        in_number = bool(_NUMBER_HEAD.match(word))
        if out and (word in (".", ":", "]", ",") or out[-1].endswith("[")):
            out[-1] += word
        else:
            out.append(word)
    return " ".join(out)


class Vocab:
    """Closed word vocabulary followed by a contiguous block of action ids."""

    def __init__(self, words: t.Sequence[str], action_bins: int = 256):
        words = list(words)
        if tuple(words[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise FormatError("vocabulary must start with the reserved special tokens")
        if len(set(words)) != len(words):
            raise FormatError("vocabulary words must be unique")
        self.words = words
        self.action_bins = action_bins
        self._ids = {w: i for i, w in enumerate(words)}

    @classmethod
    def build(cls, texts: t.Iterable[str] = (), action_bins: int = 256) -> "Vocab":
        words = list(SPECIAL_TOKENS)
        seen = set(words)
        numbers = ["0.", "1."] + [f"{i:02d}" for i in range(100)] + [str(i) for i in range(10)]
        for word in (*_BASE_WORDS, *numbers):
            if word not in seen:
                words.append(word)
                seen.add(word)
        for text in texts:
            for word in split_text(text):
                if word not in seen:
                    words.append(word)
                    seen.add(word)
        return cls(words, action_bins)

    @classmethod
    def from_samples(cls, samples: t.Iterable[annotate.AnnotatedSample], action_bins: int = 256) -> "Vocab":
        return cls.build((s.cot.serialize() for s in samples), action_bins)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.words == other.words and self.action_bins == other.action_bins

    @property
    def text_size(self) -> int:
        return len(self.words)

    @property
    def action_offset(self) -> int:
        return len(self.words)

    @property
    def size(self) -> int:
        return len(self.words) + self.action_bins

    def token_id(self, word: str) -> int:
        # special tokens are placed by format_sequence, never read from text
        if word in SPECIAL_TOKENS:
            return UNK
        return self._ids.get(word, UNK)

    def word(self, token_id: int) -> str:
        token_id = int(token_id)
        if 0 <= token_id < self.text_size:
            return self.words[token_id]
        if self.text_size <= token_id < self.size:
            return f"<act_{token_id - self.action_offset}>"
        raise IndexError(f"token id {token_id} outside vocabulary of size {self.size}")

    def to_dict(self) -> t.Dict:
        return {
            "word_to_id": {w: i for i, w in enumerate(self.words)},
            "action_bins": self.action_bins,
            "action_offset": self.action_offset,
        }

    @classmethod
    def from_dict(cls, d: t.Dict) -> "Vocab":
        mapping = d["word_to_id"]
        words = sorted(mapping, key=mapping.get)
        if [mapping[w] for w in words] != list(range(len(words))):
            raise FormatError("vocabulary ids must be contiguous from 0")
        return cls(words, d.get("action_bins", 256))

    def save(self, path: str):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1)

    @classmethod
    def load(cls, path: str) -> "Vocab":
        with open(path, "r") as f:
            return cls.from_dict(json.load(f))


def encode_text(text: str, vocab: Vocab) -> t.List[int]:
    return [vocab.token_id(w) for w in split_text(text)]


def decode(ids: t.Iterable[int], vocab: Vocab) -> str:
    return join_tokens([vocab.word(i) for i in ids if int(i) != PAD])


# ---------------------------------------------------------------------------
# actions
# ---------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class ActionTokenizerCfg:
    bins: int = 256
    low: float = -1.0
    high: float = 1.0
    horizon: int = 8
    dims: int = 3

    @property
    def tokens_per_chunk(self) -> int:
        return self.horizon * self.dims

    @property
    def bin_width(self) -> float:
        return (self.high - self.low) / self.bins


@dataclasses.dataclass(frozen=True)
class ActionNorm:
    """Per-dimension affine map from raw actions onto [-1, 1]."""

    low: t.Tuple[float, ...] = (-worldsim.MAX_DELTA, -worldsim.MAX_DELTA, -1.0)
    high: t.Tuple[float, ...] = (worldsim.MAX_DELTA, worldsim.MAX_DELTA, 1.0)

    @classmethod
    def fit(cls, chunks: t.Iterable[np.ndarray], masks: t.Optional[t.Iterable[np.ndarray]] = None) -> "ActionNorm":
        chunks = list(chunks)
        if not chunks:
            raise ValueError("cannot fit an action normalization on no data")
        masks = list(masks) if masks is not None else [np.ones(len(c), dtype=bool) for c in chunks]
        rows = np.concatenate([np.asarray(c)[np.asarray(m, dtype=bool)] for c, m in zip(chunks, masks)])
        low, high = rows.min(axis=0), rows.max(axis=0)
        # a constant dimension still needs a nonzero span
        span = np.maximum(high - low, 1e-6)
        return cls(tuple(float(v) for v in low), tuple(float(v) for v in low + span))

    def normalize(self, actions) -> np.ndarray:
        low, high = np.asarray(self.low), np.asarray(self.high)
        return np.clip(2.0 * (np.asarray(actions, dtype=np.float64) - low) / (high - low) - 1.0, -1.0, 1.0)

    def denormalize(self, actions) -> np.ndarray:
        low, high = np.asarray(self.low), np.asarray(self.high)
        return (np.asarray(actions, dtype=np.float64) + 1.0) / 2.0 * (high - low) + low

    def to_dict(self) -> t.Dict:
        return {"low": list(self.low), "high": list(self.high)}

    @classmethod
    def from_dict(cls, d: t.Dict) -> "ActionNorm":
        return cls(tuple(d["low"]), tuple(d["high"]))


def encode_actions(chunk, cfg: ActionTokenizerCfg, vocab: t.Optional[Vocab] = None) -> np.ndarray:
    chunk = np.asarray(chunk, dtype=np.float64)
    if chunk.shape != (cfg.horizon, cfg.dims):
        raise FormatError(f"action chunk shape {chunk.shape} does not match ({cfg.horizon}, {cfg.dims})")
    if not np.all(np.isfinite(chunk)):
        raise ValueError("action chunk has non-finite components")
    bins = np.clip(np.floor((chunk - cfg.low) / (cfg.high - cfg.low) * cfg.bins), 0, cfg.bins - 1).astype(np.int64)
    offset = 0 if vocab is None else vocab.action_offset
    return bins.reshape(-1) + offset


def decode_actions(ids, cfg: ActionTokenizerCfg, vocab: t.Optional[Vocab] = None) -> np.ndarray:
    offset = 0 if vocab is None else vocab.action_offset
    bins = np.asarray(ids, dtype=np.int64) - offset
    if bins.size != cfg.tokens_per_chunk:
        raise FormatError(f"expected {cfg.tokens_per_chunk} action tokens, got {bins.size}")
    if np.any((bins < 0) | (bins >= cfg.bins)):
        raise FormatError("action token outside the action block")
    centers = cfg.low + (bins + 0.5) * cfg.bin_width
    return centers.reshape(cfg.horizon, cfg.dims)


# ---------------------------------------------------------------------------
# layouts
# ---------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class Segment:
    kind: str
    start: int
    length: int

    @property
    def stop(self) -> int:
        return self.start + self.length


@dataclasses.dataclass(eq=False)
class SegmentLayout:
    segments: t.Tuple[Segment, ...]
    cot_flags: np.ndarray
    vis_flags: np.ndarray
    act_flags: np.ndarray

    def __post_init__(self):
        position = 0
        for seg in self.segments:
            if seg.kind not in SEGMENT_KINDS:
                raise FormatError(f"Unknown segment kind: {seg.kind}")
            if seg.start != position or seg.length < 1:
                raise FormatError(f"segments do not tile the sequence at position {position}")
            position = seg.stop
        for name in ("cot_flags", "vis_flags", "act_flags"):
            flags = np.asarray(getattr(self, name), dtype=bool)
            if flags.shape != (position,):
                raise FormatError(f"{name} has shape {flags.shape}, expected ({position},)")
            setattr(self, name, flags)

    @classmethod
    def from_kinds(cls, kinds: t.Sequence[str], cot_flags=None, vis_flags=None, act_flags=None) -> "SegmentLayout":
        segments = []
        for i, kind in enumerate(kinds):
            if segments and segments[-1].kind == kind:
                last = segments.pop()
                segments.append(Segment(kind, last.start, last.length + 1))
            else:
                segments.append(Segment(kind, i, 1))
        n = len(kinds)
        empty = np.zeros(n, dtype=bool)
        return cls(
            tuple(segments),
            empty.copy() if cot_flags is None else cot_flags,
            empty.copy() if vis_flags is None else vis_flags,
            empty.copy() if act_flags is None else act_flags,
        )

    def __len__(self):
        return self.segments[-1].stop if self.segments else 0

    @property
    def kinds(self) -> np.ndarray:
        out = np.empty(len(self), dtype=object)
        for seg in self.segments:
            out[seg.start: seg.stop] = seg.kind
        return out

    def positions(self, kind: str) -> np.ndarray:
        return np.flatnonzero(self.kinds == kind)

    def has(self, kind: str) -> bool:
        return any(seg.kind == kind for seg in self.segments)

    @property
    def cot_count(self) -> int:
        return int(self.cot_flags.sum())


def _cot_segments(record: annotate.CoTRecord, vocab: Vocab) -> t.List[t.List[int]]:
    return [
        encode_text(f"Subtask: {record.subtask}.", vocab),
        encode_text(f"BBox: {record.bbox_text}.", vocab),
        encode_text(f"Reasoning: {record.reasoning}.", vocab),
    ]


def effective_phase(stage: int, phase: int, variant: str = "latent_full") -> int:
    if variant not in VARIANTS:
        raise FormatError(f"Unknown variant: {variant}")
    if stage not in (1, 2, 3):
        raise FormatError(f"Unknown stage: {stage}")
    if stage == 1 and phase != 0:
        raise FormatError(f"stage 1 uses phase 0, got {phase}")
    if stage == 2 and phase not in (1, 2, 3):
        raise FormatError(f"stage 2 phases are 1-3, got {phase}")
    if stage == 3 and phase != 3:
        raise FormatError(f"stage 3 uses phase 3, got {phase}")
    if stage == 2 and variant in SINGLE_PASS_VARIANTS:
        raise FormatError(f"variant {variant} has no stage 2")
    return 0 if variant == "explicit_cot" else phase


def text_block(
    instruction: str,
    cot: t.Optional[annotate.CoTRecord],
    phase: int,
    vocab: Vocab,
    variant: str = "latent_full",
) -> t.Tuple[t.List[int], t.List[bool]]:
    """Instruction, ``@`` and the (partly latent) CoT, with per-token CoT flags."""
    ids = encode_text(instruction, vocab) + [AT]
    flags = [False] * len(ids)
    if variant == "no_cot":
        return ids, flags
    if cot is None:
        raise FormatError("a CoT record is required for this variant")
    segments = _cot_segments(cot, vocab)
    if phase > 0:
        wrapper = [START_THINKING] + [THINKING] * phase + [END_THINKING]
        ids += wrapper
        flags += [False] * len(wrapper)
    for segment in segments[phase:]:
        ids += segment
        flags += [True] * len(segment)
    return ids, flags


def format_sequence(
    sample: annotate.AnnotatedSample,
    stage: int,
    phase: int,
    vocab: Vocab,
    cfg: ActionTokenizerCfg = ActionTokenizerCfg(),
    variant: str = "latent_full",
    norm: t.Optional[ActionNorm] = None,
) -> t.Tuple[np.ndarray, SegmentLayout]:
    phase = effective_phase(stage, phase, variant)
    if not sample.instruction:
        raise FormatError(f"sample at frame {sample.frame} has an empty instruction")

    text_ids, text_cot = text_block(sample.instruction, sample.cot, phase, vocab, variant)
    if stage == 3:
        # stage 3 trains only the action expert
        text_cot = [False] * len(text_cot)

    ids = [PAD] * N_PATCHES + text_ids + [IMG_NEXT] * N_PATCHES
    kinds = [CUR_IMG] * N_PATCHES + [TEXT] * len(text_ids) + [FUT_IMG] * N_PATCHES
    cot_flags = [False] * N_PATCHES + text_cot + [False] * N_PATCHES
    vis = variant not in ("latent_text", "no_cot")
    vis_flags = [False] * (N_PATCHES + len(text_ids)) + [vis] * N_PATCHES
    act_flags = [False] * len(ids)

    if stage in (1, 2):
        chunk = sample.action_chunk
        if chunk is None or np.shape(chunk) != (cfg.horizon, cfg.dims):
            raise FormatError(f"sample at frame {sample.frame} needs a ({cfg.horizon}, {cfg.dims}) action chunk")
        chunk = chunk if norm is None else norm.normalize(chunk)
        ids += encode_actions(chunk, cfg, vocab).tolist()
        kinds += [ACT] * cfg.tokens_per_chunk
        cot_flags += [False] * cfg.tokens_per_chunk
        vis_flags += [False] * cfg.tokens_per_chunk
        act_flags += np.repeat(np.asarray(sample.action_mask, dtype=bool), cfg.dims).tolist()

    layout = SegmentLayout.from_kinds(kinds, np.array(cot_flags), np.array(vis_flags), np.array(act_flags))
    return np.array(ids, dtype=np.int64), layout


def prompt_ids(instruction: str, vocab: Vocab, variant: str = "latent_full", cot_ids: t.Sequence[int] = ()) -> t.List[int]:
    """TEXT ids at inference: instruction, ``@`` and the variant's stage-3 reasoning block."""
    if variant not in VARIANTS:
        raise FormatError(f"Unknown variant: {variant}")
    ids = encode_text(instruction, vocab) + [AT]
    if variant == "explicit_cot":
        ids += [int(i) for i in cot_ids]
    elif variant != "no_cot":
        ids += [START_THINKING] + [THINKING] * 3 + [END_THINKING]
    return ids


def inference_sequence(
    instruction: str,
    vocab: Vocab,
    variant: str = "latent_full",
    cot_ids: t.Sequence[int] = (),
    future: bool = True,
) -> t.Tuple[np.ndarray, SegmentLayout]:
    """Unsupervised stage-3 layout; ``future=False`` leaves off the FUT_IMG block for CoT decoding."""
    if not instruction:
        raise FormatError("inference needs a non-empty instruction")
    text_ids = prompt_ids(instruction, vocab, variant, cot_ids)
    ids = [PAD] * N_PATCHES + text_ids
    kinds = [CUR_IMG] * N_PATCHES + [TEXT] * len(text_ids)
    if future:
        ids += [IMG_NEXT] * N_PATCHES
        kinds += [FUT_IMG] * N_PATCHES
    return np.array(ids, dtype=np.int64), SegmentLayout.from_kinds(kinds)


