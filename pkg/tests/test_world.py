from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from conftest import TINY_SPEC
from maskplan.world import (
    ONE_PER_VIDEO,
    World,
    WorldSpec,
    caption_embed,
    generate_world,
    load_dataset,
    load_world,
    sample_dataset,
    save_dataset,
    save_world,
    split_dataset,
)


def test_world_is_deterministic_per_seed() -> None:
    first = generate_world(TINY_SPEC)
    second = generate_world(TINY_SPEC)

    assert first.plans == second.plans
    assert first.plan_weights == second.plan_weights


def test_procedures_use_only_owned_actions(tiny_world: World) -> None:
    assert tiny_world.num_actions == 12
    for task, plans in enumerate(tiny_world.plans):
        assert len(set(plans)) == len(plans) == 2
        for plan in plans:
            assert set(plan) <= set(tiny_world.task_actions[task])
        assert sum(tiny_world.plan_weights[task]) == pytest.approx(1.0)


def test_admissible_windows_have_horizon_length(tiny_world: World) -> None:
    windows = tiny_world.admissible_windows(0)
    assert windows
    assert all(len(window) == TINY_SPEC.horizon for window in windows)


def test_shared_actions_appear_in_every_task() -> None:
    world = generate_world(WorldSpec(num_tasks=3, actions_per_task=5, shared_actions=2, procedure_length=4, seed=1))

    assert world.num_actions == 3 * 3 + 2
    for owned in world.task_actions:
        assert {0, 1} <= set(owned)


@pytest.mark.parametrize(
    "overrides",
    [
        {"horizon": 1},
        {"procedure_length": 2},
        {"actions_per_task": 3},
        {"plan_weights": (1.0,)},
        {"obs_noise": -0.1},
    ],
)
def test_invalid_specs_rejected(overrides) -> None:
    with pytest.raises(ValueError):
        generate_world(replace(TINY_SPEC, **overrides))


def test_sliding_window_cuts_every_window(tiny_world: World) -> None:
    instances = sample_dataset(tiny_world, 5)

    assert len(instances) == 5 * 2
    assert [x.window_index for x in instances if x.video_id == 0] == [0, 1]
    for x in instances:
        assert x.actions in tiny_world.admissible_windows(x.task)
        assert x.obs_start.shape == (TINY_SPEC.obs_dim,)


def test_one_per_video_protocol(tiny_world: World) -> None:
    instances = sample_dataset(tiny_world, 6, protocol=ONE_PER_VIDEO)

    assert sorted(x.video_id for x in instances) == list(range(6))


def test_unknown_protocol_rejected(tiny_world: World) -> None:
    with pytest.raises(ValueError, match="unknown protocol"):
        sample_dataset(tiny_world, 2, protocol="random")


def test_split_is_video_disjoint_and_tagged(tiny_split) -> None:
    train, test = tiny_split

    assert {x.video_id for x in train}.isdisjoint({x.video_id for x in test})
    assert {x.split for x in train} == {"train"}
    assert {x.split for x in test} == {"test"}
    assert len({x.video_id for x in train}) == 28


def test_split_ratio_bounds(tiny_world: World) -> None:
    instances = sample_dataset(tiny_world, 3)
    with pytest.raises(ValueError):
        split_dataset(instances, 1.0)
    with pytest.raises(ValueError):
        split_dataset(instances, 0.05)


def test_captions_cluster_by_action() -> None:
    rng = np.random.default_rng(4)
    same_action, same_task = [], []
    for draw in range(1000):
        a, b = (int(v) for v in rng.choice(60, size=2, replace=False))
        s, t = (int(v) for v in rng.choice(10, size=2, replace=False))
        anchor = caption_embed(a, s, seed=0, draw=draw).vector
        same_action.append(anchor @ caption_embed(a, t, seed=0, draw=draw).vector)
        same_task.append(anchor @ caption_embed(b, s, seed=0, draw=draw).vector)

    assert np.mean(same_action) > np.mean(same_task)
    assert caption_embed(5, 0, seed=0).keywords == caption_embed(5, 3, seed=0).keywords


def test_text_disabled_zeroes_text_channels() -> None:
    world = generate_world(replace(TINY_SPEC, text_enabled=False))
    instance = sample_dataset(world, 1)[0]

    np.testing.assert_array_equal(instance.obs_start[TINY_SPEC.visual_dim :], 0.0)


def test_world_and_dataset_reload(tmp_path: Path, tiny_world: World, tiny_split) -> None:
    train, _ = tiny_split
    save_world(tmp_path / "world.json", tiny_world, config_hash="abc")
    count = save_dataset(tmp_path / "train.jsonl", train)

    reloaded = load_world(tmp_path / "world.json")
    instances = load_dataset(tmp_path / "train.jsonl")

    assert reloaded == tiny_world
    assert count == len(instances) == len(train)
    assert instances[3] == train[3]
    np.testing.assert_allclose(instances[3].obs_goal, train[3].obs_goal)
    assert (tmp_path / "train.jsonl").read_text().startswith('{"_meta"')
