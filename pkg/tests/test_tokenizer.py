import numpy as np
import pytest

from latentcrab import tokenizer as tk
from latentcrab.tokenizer import ActionNorm, ActionTokenizerCfg, FormatError, SegmentLayout, Vocab

CFG = ActionTokenizerCfg(bins=16, horizon=2)


@pytest.fixture(scope="module")
def vocab(samples):
    return Vocab.from_samples(samples, action_bins=16)


def test_split_text_breaks_decimals():
    words = tk.split_text("BBox: [0.1234 1.0000].")
    assert words == ["bbox", ":", "[", "0.", "12", "34", "1.", "00", "00", "]", "."]
    assert tk.split_text("move up-left") == ["move", "up-left"]


def test_decode_inverts_cot_text(samples, vocab):
    cot = samples[3].cot
    text = f"Subtask: {cot.subtask}. BBox: {cot.bbox_text}. Reasoning: {cot.reasoning}."
    ids = tk.encode_text(text, vocab)
    assert tk.UNK not in ids
    assert tk.decode(ids, vocab) == text.lower()


def test_special_tokens_never_come_from_text(vocab):
    assert vocab.token_id("@") == tk.UNK
    assert vocab.token_id("<|thinking|>") == tk.UNK
    assert tk.encode_text("@", vocab) == [tk.UNK]
    assert vocab.token_id("platypus") == tk.UNK


def test_vocab_layout(vocab):
    assert vocab.words[: len(tk.SPECIAL_TOKENS)] == list(tk.SPECIAL_TOKENS)
    assert vocab.size == vocab.text_size + 16
    assert vocab.word(vocab.action_offset + 3) == "<act_3>"
    with pytest.raises(IndexError):
        vocab.word(vocab.size)


def test_vocab_dict_round_trip(vocab):
    assert Vocab.from_dict(vocab.to_dict()) == vocab


def test_vocab_rejects_gaps(vocab):
    d = vocab.to_dict()
    d["word_to_id"]["put"] = len(vocab.words) + 5
    with pytest.raises(FormatError):
        Vocab.from_dict(d)
    with pytest.raises(FormatError):
        Vocab(["put", "the"])


def test_action_bins_round_trip_within_half_bin():
    rng = np.random.default_rng(0)
    chunk = rng.uniform(-1.0, 1.0, size=(2, 3))
    decoded = tk.decode_actions(tk.encode_actions(chunk, CFG), CFG)
    assert np.abs(decoded - chunk).max() <= CFG.bin_width / 2 + 1e-12


def test_action_bins_clip_out_of_range():
    ids = tk.encode_actions(np.array([[-3.0, 0.0, 3.0], [1.0, -1.0, 0.0]]), CFG)
    assert ids[0] == 0 and ids[2] == 15 and ids[3] == 15 and ids[4] == 0


def test_action_tokens_are_checked(vocab):
    with pytest.raises(FormatError):
        tk.encode_actions(np.zeros((3, 3)), CFG)
    with pytest.raises(ValueError):
        tk.encode_actions(np.full((2, 3), np.nan), CFG)
    with pytest.raises(FormatError):
        tk.decode_actions(np.zeros(6, dtype=int), CFG, vocab)
    with pytest.raises(FormatError):
        tk.decode_actions(np.zeros(5, dtype=int), CFG)


def test_action_norm_maps_range_to_unit_box():
    chunks = [np.array([[-0.1, 0.05, -1.0], [0.1, -0.05, 1.0]]), np.array([[0.0, 0.0, 0.0], [9.0, 9.0, 9.0]])]
    masks = [np.array([True, True]), np.array([True, False])]
    norm = ActionNorm.fit(chunks, masks)
    np.testing.assert_allclose(norm.normalize([[-0.1, -0.05, -1.0], [0.1, 0.05, 1.0]]), [[-1, -1, -1], [1, 1, 1]])
    np.testing.assert_allclose(norm.denormalize(norm.normalize(chunks[0])), chunks[0])
    assert ActionNorm.from_dict(norm.to_dict()) == norm


def test_action_norm_needs_data():
    with pytest.raises(ValueError):
        ActionNorm.fit([])


@pytest.mark.parametrize("phase", [1, 2, 3])
def test_latent_phases_replace_leading_segments(samples, vocab, phase):
    sample = samples[0]
    ids, layout = tk.format_sequence(sample, 2, phase, vocab, CFG)
    assert int(np.sum(ids == tk.THINKING)) == phase
    assert int(np.sum(ids == tk.START_THINKING)) == 1 and int(np.sum(ids == tk.END_THINKING)) == 1
    assert int(np.sum(ids == tk.IMG_NEXT)) == tk.N_PATCHES
    remaining = sum(len(seg) for seg in tk._cot_segments(sample.cot, vocab)[phase:])
    assert layout.cot_count == remaining
    assert layout.vis_flags.sum() == tk.N_PATCHES
    assert layout.act_flags.sum() == 6


def test_stage_one_keeps_full_cot(samples, vocab):
    ids, layout = tk.format_sequence(samples[0], 1, 0, vocab, CFG)
    assert tk.THINKING not in ids
    assert layout.cot_count == sum(len(seg) for seg in tk._cot_segments(samples[0].cot, vocab))
    assert [seg.kind for seg in layout.segments] == [tk.CUR_IMG, tk.TEXT, tk.FUT_IMG, tk.ACT]
    assert len(layout) == len(ids)


def test_stage_three_has_no_supervised_text(samples, vocab):
    ids, layout = tk.format_sequence(samples[0], 3, 3, vocab, CFG)
    assert not layout.has(tk.ACT)
    assert layout.cot_count == 0
    assert int(np.sum(ids == tk.THINKING)) == 3


def test_latent_text_and_no_cot_flags(samples, vocab):
    _, layout = tk.format_sequence(samples[0], 2, 2, vocab, CFG, variant="latent_text")
    assert not layout.vis_flags.any() and layout.cot_count > 0
    ids, layout = tk.format_sequence(samples[0], 1, 0, vocab, CFG, variant="no_cot")
    assert not layout.vis_flags.any() and layout.cot_count == 0
    assert tk.START_THINKING not in ids


def test_explicit_cot_stays_explicit(samples, vocab):
    ids, layout = tk.format_sequence(samples[0], 3, 3, vocab, CFG, variant="explicit_cot")
    assert tk.THINKING not in ids
    assert tk.effective_phase(3, 3, "explicit_cot") == 0


@pytest.mark.parametrize("variant", tk.SINGLE_PASS_VARIANTS)
def test_single_pass_variants_have_no_stage_two(samples, vocab, variant):
    with pytest.raises(FormatError):
        tk.format_sequence(samples[0], 2, 1, vocab, CFG, variant=variant)


@pytest.mark.parametrize("stage,phase", [(1, 1), (2, 0), (3, 2), (4, 0)])
def test_stage_phase_pairs_are_checked(stage, phase):
    with pytest.raises(FormatError):
        tk.effective_phase(stage, phase)


def test_padded_actions_are_not_supervised(samples, vocab):
    last = next(s for s in samples if not s.action_mask.all())
    _, layout = tk.format_sequence(last, 1, 0, vocab, CFG)
    assert layout.act_flags[layout.positions(tk.ACT)].tolist() == [True] * 3 + [False] * 3


def test_wrong_chunk_shape_is_rejected(samples, vocab):
    with pytest.raises(FormatError):
        tk.format_sequence(samples[0], 1, 0, vocab, ActionTokenizerCfg(bins=16, horizon=4))


def test_layout_must_tile():
    with pytest.raises(FormatError):
        SegmentLayout((tk.Segment(tk.TEXT, 1, 2),), np.zeros(3), np.zeros(3), np.zeros(3))
    with pytest.raises(FormatError):
        SegmentLayout.from_kinds([tk.TEXT, tk.TEXT], cot_flags=np.zeros(3))


def test_inference_sequence(vocab):
    ids, layout = tk.inference_sequence("put the red circle into the blue bin", vocab)
    assert int(np.sum(ids == tk.THINKING)) == 3
    assert layout.has(tk.FUT_IMG) and not layout.has(tk.ACT)
    assert not (layout.cot_flags.any() or layout.vis_flags.any() or layout.act_flags.any())

    cot = tk.encode_text("Subtask: grasp the red circle.", vocab)
    ids, layout = tk.inference_sequence("put the red circle", vocab, "explicit_cot", cot, future=False)
    assert not layout.has(tk.FUT_IMG)
    assert ids[-len(cot):].tolist() == cot

    ids, _ = tk.inference_sequence("put the red circle", vocab, "no_cot")
    assert ids[-1] == tk.AT
    with pytest.raises(FormatError):
        tk.inference_sequence("", vocab)
