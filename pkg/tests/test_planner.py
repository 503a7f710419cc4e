import math
from pathlib import Path
from typing import List, Tuple

import numpy as np
import pytest

from maskplan.classifier import ClassifierConfig, TaskClassifier
from maskplan.diffusion import make_schedule
from maskplan.masking import NONE, SOFT, StateLayout, build_task_masks, mask_table
from maskplan.planner import (
    DDIM,
    DDPM,
    DETERMINISTIC,
    NOISE,
    ORACLE_TASKS,
    EvalConfig,
    PlanningContext,
    PlanSample,
    SamplerConfig,
    decode_actions,
    distribution_jobs,
    evaluate,
    normalize_sampler,
    resolve_distribution_sampler,
    sample_plans,
    score_against,
    score_distributions,
    score_plans,
)
from maskplan.unet import DenoisingUNet, UNetConfig
from maskplan.world import PlanInstance, World


@pytest.fixture
def context(tiny_world: World, tiny_split) -> PlanningContext:
    train, _ = tiny_split
    layout = StateLayout.for_world(tiny_world)
    table = mask_table(build_task_masks(train, layout.num_tasks, layout.num_actions))
    model = DenoisingUNet(UNetConfig(input_dim=layout.dim, channels=(8, 8, 8), step_embed_dim=4, seed=1))
    classifier = TaskClassifier(
        ClassifierConfig(obs_dim=layout.obs_dim, num_tasks=layout.num_tasks, hidden=(8,), visual_dim=8, seed=1)
    )
    return PlanningContext(model, make_schedule(10), layout, table, classifier)


def _brute_force(pred: List[Tuple[int, ...]], gt: List[Tuple[int, ...]]) -> Tuple[float, float, float]:
    exact, steps, total_steps, iou = 0, 0, 0, 0.0
    for p, g in zip(pred, gt):
        exact += int(all(a == b for a, b in zip(p, g)))
        for a, b in zip(p, g):
            steps += int(a == b)
            total_steps += 1
        union = set(p) | set(g)
        iou += len([a for a in union if a in p and a in g]) / len(union)
    return exact / len(pred), steps / total_steps, iou / len(pred)


@pytest.mark.parametrize(
    "pred, expected",
    [
        ((1, 2, 3), (1.0, 1.0, 1.0)),
        ((1, 2, 4), (0.0, 2 / 3, 0.5)),
        ((2, 1, 3), (0.0, 1 / 3, 1.0)),
    ],
)
def test_plan_scores_hand_fixtures(pred, expected) -> None:
    scores = score_plans([pred], [(1, 2, 3)])

    assert (scores.success_rate, scores.mean_accuracy, scores.mean_iou) == pytest.approx(expected)
    assert scores.count == 1


def test_plan_scores_match_brute_force() -> None:
    rng = np.random.default_rng(0)
    pred = [tuple(int(a) for a in rng.integers(0, 5, size=4)) for _ in range(1000)]
    gt = [tuple(int(a) for a in rng.integers(0, 5, size=4)) for _ in range(1000)]
    pred[:50] = gt[:50]

    scores = score_plans(pred, gt)

    expected = _brute_force(pred, gt)
    assert (scores.success_rate, scores.mean_accuracy, scores.mean_iou) == pytest.approx(expected, abs=1e-12)
    assert scores.success_rate <= scores.mean_accuracy


def test_plan_scores_accept_mixed_horizons() -> None:
    scores = score_plans([(1, 2, 3), (1, 2, 3, 4)], [(1, 2, 3), (1, 2, 4, 4)])

    assert scores.success_rate == pytest.approx(0.5)
    assert scores.mean_accuracy == pytest.approx(6 / 7)
    assert scores.mean_iou == pytest.approx((1.0 + 0.75) / 2)
    assert scores.count == 2


def test_score_against_splits_mixed_horizons() -> None:
    gt = [_gt(0, (1, 2, 3), 0), _gt(0, (1, 2, 4, 3), 1), _gt(1, (5, 6, 7, 8), 2)]
    samples = [
        PlanSample(0, 0, 1, (1, 2, 3), np.zeros(1), np.zeros(1)),
        PlanSample(1, 0, 1, (1, 2, 4, 3), np.zeros(1), np.zeros(1)),
        PlanSample(2, 0, 1, (5, 6, 7, 7), np.zeros(1), np.zeros(1)),
    ]

    report = score_against(samples, gt)

    assert report.plans.success_rate == pytest.approx(2 / 3)
    assert report.plans.mean_accuracy == pytest.approx(10 / 11)
    assert set(report.per_horizon) == {3, 4}
    assert report.per_horizon[3].success_rate == 1.0
    assert report.per_horizon[4].success_rate == 0.5


def test_plan_scores_reject_bad_input() -> None:
    with pytest.raises(ValueError, match="horizon"):
        score_plans([(1, 2)], [(1, 2, 3)])
    with pytest.raises(ValueError):
        score_plans([(1, 2, 3)], [])
    with pytest.raises(ValueError, match="empty"):
        score_plans([], [])


def test_kl_closed_form() -> None:
    a, b = (1, 2, 3), (1, 4, 3)
    scores = score_distributions({"g": [a] * 9 + [b]}, {"g": [a, b]})

    expected_kl = 0.5 * math.log(0.5 / 0.9) + 0.5 * math.log(0.5 / 0.1)
    assert scores.kl == pytest.approx(expected_kl, abs=1e-6)
    assert scores.kl == pytest.approx(0.5108, abs=1e-4)
    assert scores.nll == pytest.approx(-0.5 * (math.log(0.9) + math.log(0.1)), abs=1e-6)


def test_matching_distribution_has_zero_kl() -> None:
    a, b = (1, 2, 3), (1, 4, 3)
    scores = score_distributions({"g": [a, b, a, b]}, {"g": [b, a]})

    assert scores.kl == pytest.approx(0.0, abs=1e-9)
    assert scores.mode_recall == 1.0


def test_single_mode_coverage() -> None:
    a, b = (1, 2, 3), (1, 4, 3)
    scores = score_distributions({"g": [a] * 1500}, {"g": [a, b]})

    assert scores.mode_recall == 0.5
    assert scores.mode_precision == 1.0


def test_mode_precision_counts_every_sample() -> None:
    a, b, stray = (1, 2, 3), (1, 4, 3), (1, 0, 3)
    scores = score_distributions({"g": [a, a, a, stray]}, {"g": [a, b]})

    assert scores.mode_precision == pytest.approx(0.75)


def test_groups_weighted_by_size_and_empty_groups_skipped() -> None:
    a, b = (1, 2, 3), (5, 6, 7)
    scores = score_distributions(
        {"small": [a], "large": [(9, 9, 9)]},
        {"small": [a], "large": [b, b, b], "unsampled": [a]},
    )

    assert scores.mode_recall == pytest.approx(0.25)
    assert scores.skipped == 1
    assert scores.groups == 2
    with pytest.raises(ValueError):
        score_distributions({}, {"g": [a]})


def test_decode_respects_mask() -> None:
    rows = np.array([[[5.0, 0.0], [1.0, 2.0], [0.0, 9.0]]])

    np.testing.assert_array_equal(decode_actions(rows, np.array([[0.0, 1.0, 1.0]])), [[1, 2]])
    np.testing.assert_array_equal(decode_actions(rows, np.ones((1, 3))), [[0, 2]])


def test_sampler_names() -> None:
    assert normalize_sampler("det") == DETERMINISTIC
    with pytest.raises(ValueError):
        normalize_sampler("euler")
    with pytest.raises(ValueError):
        SamplerConfig(eta=2.0).validate()


@pytest.mark.parametrize("sampler", [DDPM, DDIM, DETERMINISTIC, NOISE])
def test_hard_mask_rows_stay_zero_at_every_step(context: PlanningContext, tiny_split, sampler: str) -> None:
    _, test = tiny_split
    seen = []

    def check(step, x, weights):
        rows = x[:, context.layout.action_rows]
        assert np.all(rows[weights == 0.0] == 0.0)
        seen.append(step)

    samples = sample_plans(test, context, SamplerConfig(sampler=sampler, ddim_steps=3), on_step=check)

    assert seen[-1] == 0
    for sample in samples:
        allowed = set(np.flatnonzero(context.table[sample.label]))
        assert set(sample.actions) <= allowed
        assert np.all(sample.logits[sample.mask == 0.0] == 0.0)


def test_deterministic_sampler_repeats(context: PlanningContext, tiny_split) -> None:
    _, test = tiny_split
    cfg = SamplerConfig(sampler=DETERMINISTIC)

    first = sample_plans(test, context, cfg)
    second = sample_plans(test, context, cfg)

    assert [s.actions for s in first] == [s.actions for s in second]
    np.testing.assert_array_equal(first[0].logits, second[0].logits)


def test_streams_make_sampling_independent_of_chunking(context: PlanningContext, tiny_split) -> None:
    _, test = tiny_split
    base = SamplerConfig(sampler=DDPM, seed=5, task_source=ORACLE_TASKS)

    serial = sample_plans(test, context, base)
    threaded = sample_plans(test, context, SamplerConfig(sampler=DDPM, seed=5, task_source=ORACLE_TASKS, jobs=3, chunk_size=4))

    for a, b in zip(serial, threaded):
        np.testing.assert_allclose(a.logits, b.logits, atol=1e-9)
    reseeded = sample_plans(test, context, SamplerConfig(sampler=DDPM, seed=6, task_source=ORACLE_TASKS))
    assert any(not np.allclose(a.logits, b.logits) for a, b in zip(serial, reseeded))


def test_oracle_tasks_use_ground_truth_labels(context: PlanningContext, tiny_split) -> None:
    _, test = tiny_split

    samples = sample_plans(test, context, SamplerConfig(sampler=DETERMINISTIC, task_source=ORACLE_TASKS))

    assert [s.label for s in samples] == [x.task for x in test]


def test_soft_and_no_mask_sampling(context: PlanningContext, tiny_split) -> None:
    _, test = tiny_split

    soft = sample_plans(test[:4], context, SamplerConfig(sampler=DDIM, mask=SOFT, ddim_steps=2))
    plain = sample_plans(test[:4], context, SamplerConfig(sampler=DDIM, mask=NONE, ddim_steps=2))

    assert all(0.0 < s.mask.max() <= 1.0 for s in soft)
    assert all(np.all(s.mask == 1.0) for s in plain)


def test_classifier_required_without_oracle(context: PlanningContext, tiny_split) -> None:
    _, test = tiny_split
    bare = PlanningContext(context.model, context.schedule, context.layout, context.table)

    with pytest.raises(ValueError, match="no classifier"):
        sample_plans(test[:1], bare, SamplerConfig())


def test_context_rejects_dimension_mismatch(context: PlanningContext) -> None:
    with pytest.raises(ValueError):
        PlanningContext(context.model, context.schedule, context.layout, context.table[:, :-1])


def test_plan_sample_record_round_trip() -> None:
    sample = PlanSample(3, 1, 2, (4, 5, 6), np.eye(3), np.ones(3), mask_kind=SOFT, label=2, sampler=DDIM)

    restored = PlanSample.from_record(sample.to_record())

    assert restored == sample
    np.testing.assert_array_equal(restored.logits, sample.logits)


def _gt(task, actions, video, window=0):
    return PlanInstance(task, tuple(actions), np.zeros(2), np.zeros(2), video_id=video, window_index=window)


def test_score_against_uses_lowest_sample_index() -> None:
    gt = [_gt(0, (1, 2, 3), 0), _gt(0, (1, 4, 3), 1)]
    samples = [
        PlanSample(0, 0, 2, (9, 9, 9), np.zeros(1), np.zeros(1)),
        PlanSample(0, 0, 1, (1, 2, 3), np.zeros(1), np.zeros(1)),
        PlanSample(1, 0, 1, (1, 2, 3), np.zeros(1), np.zeros(1)),
    ]

    report = score_against(samples, gt, distribution=True)

    assert report.plans.success_rate == 0.5
    assert set(report.per_horizon) == {3}
    assert report.distribution.mode_recall == 0.5
    assert report.distribution.mode_precision == pytest.approx(2 / 3)
    assert list(report.per_group) == ["0-1-3"]
    with pytest.raises(ValueError, match="unknown instance"):
        score_against([PlanSample(7, 0, 0, (1, 2, 3), np.zeros(1), np.zeros(1))], gt)


def test_distribution_jobs_round_robin() -> None:
    members = [_gt(0, (1, 2, 3), 0), _gt(0, (1, 4, 3), 1), _gt(1, (5, 6, 7), 2)]

    jobs, indices = distribution_jobs(members, 5)

    assert [j.video_id for j in jobs] == [0, 1, 0, 1, 0, 2, 2, 2, 2, 2]
    assert indices == [1, 1, 2, 2, 3, 1, 2, 3, 4, 5]
    limited, _ = distribution_jobs(members, 2, max_groups=1)
    assert {j.task for j in limited} == {0}


def test_evaluate_reports_all_metrics(context: PlanningContext, tiny_split) -> None:
    _, test = tiny_split

    report = evaluate(test, context, SamplerConfig(sampler=DDIM, ddim_steps=2), EvalConfig(num_samples=6, max_groups=2))
    payload = report.to_dict()

    assert set(payload["metrics"]) >= {"SR", "mAcc", "mIoU", "NLL", "KL", "ModePrec", "ModeRec"}
    assert payload["metrics"]["count"] == len(test)
    assert 0.0 <= report.plans.success_rate <= report.plans.mean_accuracy <= 1.0
    assert report.distribution.kl >= 0.0
    assert len(report.per_group) <= 2


@pytest.mark.parametrize(
    "sampler, drawn_with",
    [(DDPM, DDIM), (DDIM, DDIM), (DETERMINISTIC, DETERMINISTIC), (NOISE, NOISE)],
)
def test_distribution_draws_follow_model_sampler(
    context: PlanningContext, tiny_split, monkeypatch, sampler: str, drawn_with: str
) -> None:
    _, test = tiny_split
    used: List[str] = []

    def recording(instances, ctx, cfg, *args, **kwargs):
        used.append(cfg.sampler)
        return sample_plans(instances, ctx, cfg, *args, **kwargs)

    monkeypatch.setattr("maskplan.planner.sample_plans", recording)
    evaluate(test, context, SamplerConfig(sampler=sampler, ddim_steps=2), EvalConfig(num_samples=4, max_groups=1))

    assert used == [sampler, drawn_with]


def test_distribution_sampler_override() -> None:
    assert resolve_distribution_sampler(SamplerConfig(sampler=DDIM), EvalConfig(distribution_sampler="ddpm")) == DDPM
    assert resolve_distribution_sampler(SamplerConfig(sampler=DDPM), EvalConfig(distribution_sampler="det")) == DETERMINISTIC
    assert resolve_distribution_sampler(SamplerConfig(sampler=NOISE), EvalConfig()) == NOISE
    with pytest.raises(ValueError, match="unknown sampler"):
        resolve_distribution_sampler(SamplerConfig(), EvalConfig(distribution_sampler="euler"))
