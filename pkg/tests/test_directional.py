"""Longer training runs checking that the masked model behaves as intended.

Skipped unless MASKPLAN_RUN_SLOW=1.
"""

import numpy as np
import pytest

from maskplan.ablation import AblationConfig, run_ablation
from maskplan.classifier import (
    MLP,
    TRANSFORMER,
    ClassifierConfig,
    ClassifierTrainConfig,
    classifier_accuracy,
    train_classifier,
)
from maskplan.masking import HARD, NONE, SOFT, StateLayout
from maskplan.planner import DETERMINISTIC, EvalConfig, PlanningContext, SamplerConfig, evaluate, sample_plans
from maskplan.trainer import TrainConfig, run_training
from maskplan.unet import UNetConfig
from maskplan.world import WorldSpec, generate_world, sample_dataset, split_dataset

pytestmark = pytest.mark.slow

STANDARD = WorldSpec(num_tasks=10, actions_per_task=6, procedure_length=5, horizon=3, seed=0)


def _standard_split(spec: WorldSpec = STANDARD, videos: int = 1700):
    world = generate_world(spec)
    return world, split_dataset(sample_dataset(world, videos), 0.7, seed=spec.seed)


def test_hard_mask_model_plans_held_out_instances() -> None:
    world, (train, test) = _standard_split()
    layout = StateLayout.for_world(world)
    result = run_training(
        train,
        layout,
        ClassifierConfig(obs_dim=world.spec.obs_dim, num_tasks=world.num_tasks, visual_dim=world.spec.visual_dim),
        ClassifierTrainConfig(steps=2000),
        UNetConfig(input_dim=layout.dim),
        TrainConfig(steps=10000, batch_size=64),
    )
    ctx = PlanningContext(result.diffusion.model, result.diffusion.schedule, layout, result.table, result.classifier)

    report = evaluate(test[:500], ctx, SamplerConfig())

    assert report.plans.success_rate >= 0.80

    held_out = test[:500]
    jobs = [x for x in held_out for _ in range(7)]
    indices = [draw + 1 for _ in held_out for draw in range(7)]
    checked = {"columns": 0, "violations": 0}

    def check(step, x, weights):
        rows = x[:, layout.action_rows]
        checked["violations"] += int(np.count_nonzero(rows[weights == 0.0]))

    samples = sample_plans(jobs, ctx, SamplerConfig(), sample_indices=indices, on_step=check)
    for sample in samples:
        allowed = set(np.flatnonzero(result.table[sample.label]))
        checked["columns"] += len(sample.actions)
        checked["violations"] += len(set(sample.actions) - allowed)

    assert checked["columns"] >= 10000
    assert checked["violations"] == 0


def test_text_channels_help_the_classifier() -> None:
    gains = []
    for seed in range(5):
        spec = WorldSpec(num_tasks=10, actions_per_task=6, procedure_length=5, obs_noise=1.0, seed=seed)
        world, (train, test) = _standard_split(spec, videos=600)
        accuracies = []
        for use_text in (True, False):
            cfg = ClassifierConfig(
                obs_dim=spec.obs_dim, num_tasks=spec.num_tasks, visual_dim=spec.visual_dim, use_text=use_text, seed=seed
            )
            model, _ = train_classifier(train, cfg, ClassifierTrainConfig(steps=800, seed=seed))
            accuracies.append(classifier_accuracy(model, test)[0])
        gains.append(accuracies[0] - accuracies[1])

    assert np.mean(gains) >= 0.0


def test_sampled_plans_cover_both_modes_better_than_deterministic() -> None:
    spec = WorldSpec(
        num_tasks=1, actions_per_task=4, procedure_length=4, horizon=4, plan_weights=(0.5, 0.5), seed=0
    )
    world, (train, test) = _standard_split(spec, videos=400)
    layout = StateLayout.for_world(world)
    result = run_training(
        train,
        layout,
        ClassifierConfig(obs_dim=spec.obs_dim, num_tasks=1, visual_dim=spec.visual_dim),
        ClassifierTrainConfig(steps=10, warmup_steps=0),
        UNetConfig(input_dim=layout.dim),
        TrainConfig(steps=4000, batch_size=64, milestones=()),
    )
    ctx = PlanningContext(result.diffusion.model, result.diffusion.schedule, layout, result.table, result.classifier)
    eval_cfg = EvalConfig(num_samples=1500, max_groups=1)

    sampled = evaluate(test, ctx, SamplerConfig(), eval_cfg)
    deterministic = evaluate(test, ctx, SamplerConfig(sampler=DETERMINISTIC), eval_cfg)

    assert sampled.distribution.mode_recall >= 0.9
    assert sampled.distribution.kl < deterministic.distribution.kl


def test_masking_gap_grows_with_action_space() -> None:
    report = run_ablation(AblationConfig(mask_kinds=(HARD, NONE)))
    gaps = report.gaps()

    assert sorted(gaps) == [20, 60, 120]
    assert gaps[20] <= gaps[60] <= gaps[120]
    assert np.mean(list(gaps.values())) >= 0.0


def test_mask_kinds_rank_on_standard_world() -> None:
    report = run_ablation(AblationConfig(action_sizes=(60,), actions_per_task=6, mask_kinds=(HARD, NONE, SOFT)))
    hard, none, soft = (report.mean_sr(kind, 60) for kind in (HARD, NONE, SOFT))

    assert len(report.cells) == 15
    assert hard >= none >= soft
    assert hard - none >= 0.02


@pytest.mark.parametrize("horizon", [3, 4, 5])
def test_hard_mask_holds_across_horizons(horizon: int) -> None:
    report = run_ablation(
        AblationConfig(action_sizes=(60,), actions_per_task=6, mask_kinds=(HARD, NONE), horizon=horizon, seeds=(0, 1, 2))
    )

    assert report.mean_sr(HARD, 60) >= report.mean_sr(NONE, 60)


def test_transformer_classifier_matches_mlp() -> None:
    scores = {MLP: [], TRANSFORMER: []}
    for seed in range(5):
        spec = WorldSpec(num_tasks=10, actions_per_task=6, procedure_length=5, obs_noise=1.0, seed=seed)
        world, (train, test) = _standard_split(spec, videos=600)
        for variant in (MLP, TRANSFORMER):
            cfg = ClassifierConfig(
                obs_dim=spec.obs_dim, num_tasks=spec.num_tasks, visual_dim=spec.visual_dim, variant=variant, seed=seed
            )
            model, _ = train_classifier(train, cfg, ClassifierTrainConfig(steps=800, seed=seed))
            scores[variant].append(classifier_accuracy(model, test)[0])

    assert np.mean(scores[TRANSFORMER]) >= np.mean(scores[MLP])
