import dataclasses

import numpy as np
import pytest

from latentcrab import autodiff as ad
from latentcrab import model
from latentcrab import tokenizer as tk
from latentcrab.autodiff import Tensor
from latentcrab.model import EmaEncoder, VisualEncoder, build_lara_mask
from latentcrab.tokenizer import ACT, CUR_IMG, FUT_IMG, TEXT, SegmentLayout


def _reference_mask(layout: SegmentLayout) -> np.ndarray:
    kinds = layout.kinds
    block = np.empty(len(layout), dtype=int)
    for index, seg in enumerate(layout.segments):
        block[seg.start: seg.stop] = index
    mask = np.zeros((len(layout), len(layout)), dtype=bool)
    for i in range(len(layout)):
        for j in range(len(layout)):
            same = block[i] == block[j]
            if kinds[i] == TEXT:
                mask[i, j] = j <= i and kinds[j] != ACT
            elif kinds[i] == CUR_IMG:
                mask[i, j] = (kinds[j] == TEXT and j < i) or (kinds[j] == CUR_IMG and same)
            elif kinds[i] == FUT_IMG:
                mask[i, j] = (kinds[j] in (TEXT, CUR_IMG) and j < i) or (kinds[j] == FUT_IMG and same)
            else:
                mask[i, j] = j < i
    return mask


def _random_layout(rng: np.random.Generator) -> SegmentLayout:
    kinds = []
    previous = ACT
    for _ in range(rng.integers(2, 7)):
        kind = rng.choice([k for k in tk.SEGMENT_KINDS if k != previous])
        kinds += [str(kind)] * int(rng.integers(1, 5))
        previous = kind
    return SegmentLayout.from_kinds(kinds)


@pytest.mark.parametrize("seed", range(20))
def test_mask_matches_reference(seed):
    layout = _random_layout(np.random.default_rng(seed))
    np.testing.assert_array_equal(build_lara_mask(layout), _reference_mask(layout))


def test_training_layout_mask(samples, training_data):
    _, layout = tk.format_sequence(samples[0], 1, 0, training_data.vocab, training_data.action_cfg)
    mask = build_lara_mask(layout)
    kinds = layout.kinds
    act = kinds == ACT
    assert not mask[np.ix_(kinds == TEXT, act)].any()
    assert not mask[np.ix_(kinds == FUT_IMG, act)].any()
    assert mask[np.ix_(kinds == FUT_IMG, kinds == CUR_IMG)].all()
    assert not mask[np.ix_(kinds == CUR_IMG, kinds == FUT_IMG)].any()
    first_act = int(np.flatnonzero(act)[0])
    assert mask[first_act, :first_act].all() and not mask[first_act, first_act:].any()


def test_stage_three_mask_rejects_actions(samples, training_data):
    _, layout = tk.format_sequence(samples[0], 1, 0, training_data.vocab, training_data.action_cfg)
    with pytest.raises(ValueError):
        build_lara_mask(layout, stage=3)


def test_leading_action_row_is_rejected():
    with pytest.raises(ValueError, match="attend nothing"):
        build_lara_mask(SegmentLayout.from_kinds([ACT, TEXT]))


def test_forward_shapes(tiny_policy, samples, training_data):
    sample = samples[0]
    ids, layout = tk.format_sequence(sample, 2, 1, training_data.vocab, training_data.action_cfg)
    hidden, logits, z_hat = tiny_policy.forward(ids, layout, training_data.observation(sample))
    assert hidden.shape == (len(ids), 16)
    assert logits.shape == (len(ids), training_data.vocab.size)
    assert z_hat.shape == (tk.N_PATCHES, 16)


def test_later_tokens_do_not_leak_backwards(tiny_policy, samples, training_data):
    sample = samples[1]
    obs = training_data.observation(sample)
    ids, layout = tk.format_sequence(sample, 1, 0, training_data.vocab, training_data.action_cfg)
    base, _, _ = tiny_policy.forward(ids, layout, obs)

    changed = ids.copy()
    act = layout.positions(ACT)
    changed[act] = training_data.vocab.action_offset + (changed[act] - training_data.vocab.action_offset + 1) % 16
    hidden, _, _ = tiny_policy.forward(changed, layout, obs)
    keep = layout.kinds != ACT
    np.testing.assert_allclose(hidden.data[keep], base.data[keep], atol=1e-6)
    assert not np.allclose(hidden.data[act[1:]], base.data[act[1:]])

    text = layout.positions(TEXT)
    changed = ids.copy()
    changed[text[-1]] = tk.UNK
    hidden, _, _ = tiny_policy.forward(changed, layout, obs)
    earlier = np.concatenate([layout.positions(CUR_IMG), text[:-1]])
    np.testing.assert_allclose(hidden.data[earlier], base.data[earlier], atol=1e-6)


def test_sequence_longer_than_max_len(tiny_policy, training_data, samples):
    kinds = [CUR_IMG] * tk.N_PATCHES + [TEXT] * 120
    layout = SegmentLayout.from_kinds(kinds)
    with pytest.raises(ad.ShapeError):
        tiny_policy.forward(np.zeros(len(kinds), dtype=int), layout, training_data.observation(samples[0]))


def test_patchify_layout():
    rgb = np.arange(24 * 24 * 3, dtype=float).reshape(24, 24, 3)
    patches = model.patchify(rgb)
    assert patches.shape == (16, 108)
    np.testing.assert_array_equal(patches[1][:3], rgb[0, 6])
    with pytest.raises(ad.ShapeError):
        model.patchify(np.zeros((25, 25, 3)))


@pytest.mark.parametrize("decay", [0.0, 0.5, 1.0])
def test_ema_contracts_geometrically(decay):
    with ad.default_dtype(np.float64):
        online = VisualEncoder(8, np.random.default_rng(0))
        ema = EmaEncoder(online, decay)
        for p in online.parameters():
            p.data += 1.0

    def distance():
        shadow = ema.encoder.named_parameters()
        return np.sqrt(sum(np.sum((shadow[k].data - p.data) ** 2) for k, p in online.named_parameters().items()))

    start = distance()
    for _ in range(3):
        model.ema_update(online, ema)
    assert distance() == pytest.approx(decay ** 3 * start, abs=1e-9)


def test_ema_rejects_bad_decay():
    with pytest.raises(ValueError):
        EmaEncoder(VisualEncoder(4, np.random.default_rng(0)), 1.5)


def test_ema_is_not_trainable(tiny_policy):
    names = tiny_policy.trainable_parameters()
    assert names and not any(name.startswith("ema.") for name in names)
    assert any(name.startswith("expert.") for name in names)


def test_cot_loss_uniform_logits(samples, training_data):
    ids, layout = tk.format_sequence(samples[0], 1, 0, training_data.vocab, training_data.action_cfg)
    logits = Tensor(np.zeros((len(ids), training_data.vocab.size)))
    assert model.cot_loss(logits, ids, layout).item() == pytest.approx(np.log(training_data.vocab.size), rel=1e-5)
    assert model.act_token_loss(logits, ids, layout).item() == pytest.approx(np.log(training_data.vocab.size), rel=1e-5)


def test_act_loss_needs_act_segment(samples, training_data):
    ids, layout = tk.format_sequence(samples[0], 3, 3, training_data.vocab, training_data.action_cfg)
    logits = Tensor(np.zeros((len(ids), training_data.vocab.size)))
    with pytest.raises(ValueError):
        model.act_token_loss(logits, ids, layout)
    with pytest.raises(ValueError, match="no supervised positions"):
        model.cot_loss(logits, ids, layout)


def test_vis_loss_is_zero_at_target(tiny_policy, samples, training_data):
    obs = training_data.observation(samples[0], future=True)
    target = tiny_policy.ema.encode(obs)
    assert model.vis_loss(Tensor(target), obs, tiny_policy.ema).item() == pytest.approx(0.0, abs=1e-7)
    with pytest.raises(ValueError):
        model.vis_loss(None, obs, tiny_policy.ema)


def test_latent_context_covers_text_and_future(tiny_policy, training_data):
    ids, layout = tk.inference_sequence("put the red circle into the blue bin", training_data.vocab)
    ctx = tiny_policy.latent_context(ids, layout, np.zeros((24, 24, 3)))
    assert len(ctx) == len(layout.positions(TEXT)) + tk.N_PATCHES
    assert ctx.width == 16
    _, layout = tk.inference_sequence("put the red circle", training_data.vocab, future=False)
    with pytest.raises(ValueError):
        tiny_policy.latent_context(ids[: len(layout)], layout, np.zeros((24, 24, 3)))


def test_thought_feedback_rewrites_thinking_inputs(tiny_policy, training_data):
    ids, layout = tk.inference_sequence("put the red circle into the blue bin", training_data.vocab)
    obs = np.zeros((24, 24, 3))
    looped = model.VLAPolicy(
        dataclasses.replace(tiny_policy.cfg, thought_feedback=True), tiny_policy.expert_cfg, tiny_policy.vocab, seed=0
    )
    plain, _, _ = tiny_policy.forward(ids, layout, obs)
    fed, _, _ = looped.forward(ids, layout, obs)

    first = int(np.flatnonzero(ids == tk.THINKING)[0])
    np.testing.assert_allclose(fed.data[:first], plain.data[:first], atol=1e-6)
    assert not np.allclose(fed.data[first], plain.data[first])

    with ad.GradientTape() as tape:
        hidden, _, _ = looped.forward(ids, layout, obs)
        loss = ad.tsum(ad.multiply(hidden, hidden))
    grads = ad.backward(loss, tape)
    assert np.isfinite(grads[id(looped.trunk.token_embed)]).all()


def test_image_positions_are_permutation_equivariant_without_positions(tiny_policy, training_data):
    ids, layout = tk.inference_sequence("put the red circle into the blue bin", training_data.vocab)
    tiny_policy.zero_position_embeddings()
    latents = np.random.default_rng(4).standard_normal((tk.N_PATCHES, 16)).astype(np.float32)
    order = np.arange(tk.N_PATCHES)
    order[[2, 9]] = order[[9, 2]]
    mask = build_lara_mask(layout, 3)

    base, _, _ = tiny_policy.trunk(ids, Tensor(latents), layout, mask)
    swapped, _, _ = tiny_policy.trunk(ids, Tensor(latents[order]), layout, mask)
    cur = layout.positions(CUR_IMG)
    np.testing.assert_allclose(swapped.data[cur], base.data[cur][order], atol=1e-5)
    text = layout.positions(TEXT)
    np.testing.assert_allclose(swapped.data[text], base.data[text], atol=1e-5)
