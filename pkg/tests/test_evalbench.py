import os
import warnings

import numpy as np
import pandas as pd
import pytest

from latentcrab import analyze, annotate, configure, evalbench, worldsim
from latentcrab.checkpoint import load_policy
from latentcrab.evalbench import ModeMismatchError

from conftest import TINY_OVERRIDES


def _unit_vectors(rng, n, d):
    v = rng.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


@pytest.mark.parametrize(
    "successes,n,expected",
    [(5, 10, (0.2366, 0.7634)), (0, 10, (0.0, 0.2775)), (10, 10, (0.7225, 1.0))],
)
def test_wilson_interval(successes, n, expected):
    assert analyze.wilson_interval(successes, n) == pytest.approx(expected, abs=1e-4)


def test_wilson_interval_rejects_bad_counts():
    with pytest.raises(ValueError):
        analyze.wilson_interval(0, 0)
    with pytest.raises(ValueError):
        analyze.wilson_interval(4, 3)


@pytest.mark.parametrize("family", ["single_object", "two_step_sort"])
def test_expert_rollouts_always_succeed(family):
    report = evalbench.rollout_eval(None, family, 3, seed=1, mode="expert")
    assert report.success_rate == 1.0
    assert report.decoded_tokens == [0] * len(report.step_ms)
    assert all(length <= worldsim.EXPERT_STEP_BOUND for length in report.lengths)


def test_rollout_arguments_are_checked():
    with pytest.raises(ValueError):
        evalbench.rollout_eval(None, "single_object", 0, mode="expert")
    with pytest.raises(ValueError):
        evalbench.rollout_eval(None, "stacking", 1, mode="expert")
    with pytest.raises(ModeMismatchError):
        evalbench.rollout_eval(None, "single_object", 1, mode="latent")


@pytest.mark.parametrize("mode", ["expert", "latent"])
def test_worker_count_does_not_change_rollouts(curriculum, mode):
    checkpoint = None if mode == "expert" else curriculum["latent_full"]
    serial = evalbench.rollout_eval(checkpoint, "distractor", 4, seed=5, mode=mode, threads=1)
    pooled = evalbench.rollout_eval(checkpoint, "distractor", 4, seed=5, mode=mode, threads=2)
    assert pooled.successes == serial.successes
    assert pooled.lengths == serial.lengths
    assert pooled.decoded_tokens == serial.decoded_tokens
    assert len(pooled.step_ms) == len(serial.step_ms)
    with pytest.raises(ValueError):
        evalbench.rollout_eval(None, "single_object", 1, mode="expert", threads=0)


def test_mode_for_variant():
    assert evalbench.mode_for_variant("latent_text") == "latent"
    assert evalbench.mode_for_variant("no_cot") == "no_cot"
    with pytest.raises(ValueError):
        evalbench.mode_for_variant("cot_soup")


def test_stage_one_checkpoint_is_rejected(curriculum):
    stage1 = os.path.join(curriculum["root"], "latent_full_stage1.lara")
    with pytest.raises(ModeMismatchError, match="stage 1"):
        evalbench.rollout_eval(stage1, "single_object", 1, mode="latent")


def test_variant_must_match_mode(curriculum):
    with pytest.raises(ModeMismatchError):
        evalbench.rollout_eval(curriculum["explicit_cot"], "single_object", 1, mode="latent")
    with pytest.raises(ModeMismatchError):
        evalbench.rollout_eval(curriculum["latent_full"], "single_object", 1, mode="no_cot")


def test_latent_rollouts_decode_nothing(curriculum):
    report = evalbench.rollout_eval(curriculum["latent_full"], "single_object", 2, seed=3, mode="latent")
    assert report.n == 2
    assert set(report.decoded_tokens) == {0}
    assert all(1 <= length <= worldsim.EPISODE_CAP for length in report.lengths)
    summary = report.summary()
    assert summary["ci_low"] <= summary["success_rate"] <= summary["ci_high"]
    assert list(report.rollouts_frame().columns) == ["rollout", "success", "length", "wall_ms"]

    again = evalbench.rollout_eval(curriculum["latent_full"], "single_object", 2, seed=3, mode="latent")
    assert (again.successes, again.lengths) == (report.successes, report.lengths)


def test_explicit_rollouts_decode_tokens(curriculum):
    report = evalbench.rollout_eval(
        curriculum["explicit_cot"], "single_object", 1, seed=3, mode="explicit_cot", max_decode_tokens=5
    )
    assert report.decoded_tokens
    assert all(1 <= n <= 5 for n in report.decoded_tokens)


def test_greedy_decoding_avoids_special_tokens(curriculum):
    policy = evalbench.load_eval_policy(curriculum["explicit_cot"], "explicit_cot", max_decode_tokens=6)
    _, _, obs = worldsim.reset("single_object", 0)
    cot = policy.decode_cot("put the red circle into the blue bin", obs)
    assert 1 <= len(cot) <= 6
    assert min(cot) >= 10
    assert max(cot) < policy.policy.vocab.text_size
    assert cot == policy.decode_cot("put the red circle into the blue bin", obs)


def test_bench_latency(curriculum):
    report = evalbench.bench_latency(
        curriculum["latent_full"], curriculum["explicit_cot"], 1, seed=2, max_decode_tokens=4
    )
    assert report.table["mode"].tolist() == ["latent", "explicit_cot"]
    assert {"control_steps", "median_ms", "p90_ms", "mean_decoded_tokens", "success_rate"} <= set(report.table.columns)
    assert report.token_reduction == 1.0
    assert report.summary().keys() == {"token_reduction", "time_reduction"}


def test_reduction():
    assert evalbench.reduction(1.0, 4.0) == 0.75
    assert evalbench.reduction(3.0, 0.0) == 0.0


def test_identical_thinking_states_are_degenerate():
    v = np.arange(8.0)
    states = {f"thinking_{k}": np.tile(v, (5, 1)) for k in (1, 2, 3)}
    states["instruction"] = _unit_vectors(np.random.default_rng(0), 7, 8)
    report = evalbench.similarity_report(states)
    assert report.degenerate and report.collapsed
    assert report.within == pytest.approx(1.0)
    assert report.across == pytest.approx(1.0)


def test_constant_role_states_collapse_without_degeneracy():
    rng = np.random.default_rng(1)
    states = {f"thinking_{k}": np.tile(rng.standard_normal(16), (6, 1)) for k in (1, 2, 3)}
    report = evalbench.similarity_report(states)
    assert report.collapsed and not report.degenerate
    assert np.isnan(report.thinking_vs_instruction)


def test_random_states_do_not_collapse():
    rng = np.random.default_rng(2)
    states = {f"thinking_{k}": _unit_vectors(rng, 30, 64) for k in (1, 2, 3)}
    states["instruction"] = _unit_vectors(rng, 40, 64)
    report = evalbench.similarity_report(states)
    assert not report.collapsed and not report.degenerate
    assert abs(report.within) < 0.1 and abs(report.across) < 0.1
    assert len(report.coords) == 130
    assert set(report.coords["role"]) == {"thinking_1", "thinking_2", "thinking_3", "instruction"}
    assert sum(report.explained_variance) <= 1.0


def test_similarity_report_needs_thinking_states():
    with pytest.raises(ValueError):
        evalbench.similarity_report({"instruction": np.ones((3, 4))})


def test_cosine_of_zero_vector_is_zero():
    sims = evalbench.cosine_matrix(np.array([[0.0, 0.0], [1.0, 0.0]]), np.array([[2.0, 0.0]]))
    np.testing.assert_allclose(sims[:, 0], [0.0, 1.0])


def test_pca_on_a_line():
    points = np.outer(np.linspace(-1, 1, 9), [1.0, 2.0, -1.0])
    coords, (first, second) = evalbench.pca_2d(points)
    assert first == pytest.approx(1.0) and second == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(coords[:, 1], 0.0, atol=1e-12)


def test_latent_collapse_metrics(curriculum, samples, training_data):
    report = evalbench.latent_collapse_metrics(curriculum["latent_full"], samples, training_data.frames, min_samples=len(samples))
    assert set(report.pair_means) >= {"thinking_1|thinking_1", "thinking_1|thinking_2", "thinking_3|instruction"}
    assert report.coords["role"].value_counts()["thinking_2"] == len(samples)
    assert isinstance(report.collapsed, bool)
    assert report.summary()["projection"] == "pca"


def test_latent_collapse_needs_latent_stage_three(curriculum, samples, training_data):
    with pytest.raises(ModeMismatchError):
        evalbench.latent_collapse_metrics(curriculum["explicit_cot"], samples, training_data.frames, min_samples=1)
    with pytest.raises(ValueError, match="collapse set"):
        evalbench.latent_collapse_metrics(curriculum["latent_full"], samples[:3], training_data.frames, min_samples=4)


def test_ablation_rejects_unknown_variants():
    with pytest.raises(ValueError):
        evalbench.ablation_run({"ablation": {"variants": ["cot_soup"]}})
    with pytest.raises(ValueError):
        evalbench.ablation_run({"ablation": {"variants": []}})


def test_local_ablation(tmp_path, demos, samples):
    worldsim.write_trajectories(str(tmp_path / "demos.jsonl"), demos)
    annotate.write_samples(str(tmp_path / "annotated.jsonl"), samples)
    config = configure.validate_config(
        configure.merge(
            configure.DEFAULT_CONFIG,
            {
                **TINY_OVERRIDES,
                "eval": {"max_decode_tokens": 3},
                "ablation": {"backend": "local", "variants": ["latent_full", "no_cot"], "n_rollouts": 1},
                "paths": {
                    "trajectories": str(tmp_path / "demos.jsonl"),
                    "annotations": str(tmp_path / "annotated.jsonl"),
                    "checkpoints": str(tmp_path / "checkpoints"),
                    "reports": str(tmp_path / "reports"),
                },
            },
        )
    )
    with pytest.warns(UserWarning, match="covers only"):
        table = evalbench.ablation_run(config)
    assert table["variant"].tolist() == ["no_cot", "latent_full"]
    assert table["label"].tolist() == ["no CoT", "latent text + visual CoT"]
    assert (table["n_rollouts"] == 1).all()
    assert (table["budget"] == 10).all()
    assert {"ci_low", "ci_high"} <= set(table.columns)
    assert isinstance(analyze.trend_holds(table), bool)
    assert os.path.exists(tmp_path / "checkpoints" / "ablation" / "no_cot" / "no_cot_stage3.lara")


def test_ablation_table_orders_and_checks_rows():
    results = pd.DataFrame(
        {"variant": ["latent_full", "no_cot"], "successes": [8, 2], "n_rollouts": [10, 10], "success_rate": [0.8, 0.2]}
    )
    table = analyze.ablation_table(results)
    assert table["variant"].tolist() == ["no_cot", "latent_full"]
    assert analyze.trend_holds(table)
    with pytest.raises(ValueError):
        analyze.ablation_table(pd.concat([results, results]))
    with pytest.raises(ValueError):
        analyze.ablation_table(pd.DataFrame({"variant": ["cot_soup"], "successes": [1], "n_rollouts": [2]}))


def test_trend_breaks_only_without_overlap():
    table = pd.DataFrame(
        {"success_rate": [0.9, 0.1], "ci_low": [0.8, 0.0], "ci_high": [1.0, 0.3]}
    )
    assert not analyze.trend_holds(table)
    table["ci_high"] = [1.0, 0.85]
    assert analyze.trend_holds(table)


def test_explicit_decoding_head_is_the_stage_one_head(curriculum):
    stage1, _, _ = load_policy(os.path.join(curriculum["root"], "explicit_cot_stage1.lara"))
    stage3, _, _ = load_policy(curriculum["explicit_cot"])
    before, after = stage1.named_parameters(), stage3.named_parameters()
    np.testing.assert_array_equal(after["trunk.lm_head.weight"].data, before["trunk.lm_head.weight"].data)
    moved = [name for name in before if name.startswith("trunk.") and not np.array_equal(before[name].data, after[name].data)]
    assert moved
