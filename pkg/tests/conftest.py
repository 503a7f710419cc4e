import os
from typing import Callable, List, Tuple

import numpy as np
import pytest

from maskplan.world import PlanInstance, World, WorldSpec, generate_world, sample_dataset, split_dataset

SLOW_ENV = "MASKPLAN_RUN_SLOW"

TINY_SPEC = WorldSpec(
    num_tasks=3,
    actions_per_task=4,
    procedure_length=4,
    horizon=3,
    visual_dim=8,
    text_dim=4,
    obs_noise=0.1,
    seed=7,
)


def pytest_collection_modifyitems(config, items):
    if os.environ.get(SLOW_ENV) == "1":
        return
    skip = pytest.mark.skip(reason=f"set {SLOW_ENV}=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def tiny_world() -> World:
    return generate_world(TINY_SPEC)


@pytest.fixture
def tiny_split(tiny_world: World) -> Tuple[List[PlanInstance], List[PlanInstance]]:
    return split_dataset(sample_dataset(tiny_world, 40), 0.7, seed=1)


def numeric_grad(f: Callable[[], float], array: np.ndarray, index, h: float = 1e-5) -> float:
    """Central difference of ``f`` with respect to ``array[index]`` (modified in place)."""
    original = array[index]
    array[index] = original + h
    plus = f()
    array[index] = original - h
    minus = f()
    array[index] = original
    return (plus - minus) / (2 * h)


def relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-8)
