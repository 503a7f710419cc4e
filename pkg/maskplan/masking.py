"""State-matrix layout, task-derived action masks and the condition projection.

The diffusion state is (batch, L_c + L_a + L_o, T): task rows, action-logit rows, observation
rows. Only action rows are ever noised or masked.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .artifacts import read_json, write_json_artifact
from .tensor import Tensor, concat, mul
from .world import PlanInstance, World

logger = logging.getLogger(__name__)

HARD = "hard"
SOFT = "soft"
NONE = "none"
MASK_KINDS = (HARD, SOFT, NONE)


@dataclass(frozen=True)
class StateLayout:
    num_tasks: int
    num_actions: int
    obs_dim: int
    horizon: int

    @classmethod
    def for_world(cls, world: World) -> "StateLayout":
        return cls(world.num_tasks, world.num_actions, world.spec.obs_dim, world.spec.horizon)

    @property
    def dim(self) -> int:
        return self.num_tasks + self.num_actions + self.obs_dim

    @property
    def task_rows(self) -> slice:
        return slice(0, self.num_tasks)

    @property
    def action_rows(self) -> slice:
        return slice(self.num_tasks, self.num_tasks + self.num_actions)

    @property
    def obs_rows(self) -> slice:
        return slice(self.num_tasks + self.num_actions, self.dim)

    def to_dict(self) -> Dict[str, int]:
        return {
            "num_tasks": self.num_tasks,
            "num_actions": self.num_actions,
            "obs_dim": self.obs_dim,
            "horizon": self.horizon,
        }


@dataclass(frozen=True)
class ActionMask:
    weights: np.ndarray = field(compare=False)
    kind: str = HARD

    def __post_init__(self) -> None:
        weights = np.asarray(self.weights, dtype=np.float64)
        if self.kind not in MASK_KINDS:
            raise ValueError(f"unknown mask kind '{self.kind}'")
        if self.kind == HARD and not np.all((weights == 0.0) | (weights == 1.0)):
            raise ValueError("hard mask weights must be 0 or 1")
        if self.kind == NONE and not np.all(weights == 1.0):
            raise ValueError("'none' mask must be all ones")
        if np.any(weights < 0.0) or np.any(weights > 1.0):
            raise ValueError("mask weights must lie in [0, 1]")
        object.__setattr__(self, "weights", weights)

    @property
    def allowed(self) -> np.ndarray:
        return self.weights > 0.0

    def action_ids(self) -> Tuple[int, ...]:
        return tuple(int(a) for a in np.flatnonzero(self.allowed))


@dataclass(frozen=True)
class ProjectionConfig:
    boundary_weight: float = 10.0

    def __post_init__(self) -> None:
        if self.boundary_weight < 1.0:
            raise ValueError(f"boundary_weight must be >= 1, got {self.boundary_weight}")


def build_task_masks(
    instances: Iterable[PlanInstance], num_tasks: int, num_actions: int
) -> Dict[int, ActionMask]:
    """Union of the actions seen per task across training plans."""
    seen = np.zeros((num_tasks, num_actions), dtype=np.float64)
    count = 0
    for instance in instances:
        if instance.split == "test":
            raise ValueError(f"test-split instance {instance.key} passed to mask construction")
        seen[instance.task, list(instance.actions)] = 1.0
        count += 1
    if count == 0:
        raise ValueError("cannot build task masks from an empty training set")
    empty = [task for task in range(num_tasks) if not seen[task].any()]
    if empty:
        raise ValueError(f"tasks with no training actions: {empty}")
    return {task: ActionMask(seen[task], HARD) for task in range(num_tasks)}


def mask_table(masks: Mapping[int, ActionMask]) -> np.ndarray:
    """Stack per-task hard masks into a (L_c, L_a) array."""
    return np.stack([masks[task].weights for task in sorted(masks)])


def soft_mask(posterior: np.ndarray, table: np.ndarray) -> ActionMask:
    """Retention weight per action: total posterior of tasks owning it, capped at 1."""
    posterior = np.asarray(posterior, dtype=np.float64)
    if np.any(posterior < 0) or abs(posterior.sum() - 1.0) > 1e-6:
        raise ValueError(f"posterior must be a probability vector (sum={posterior.sum():.6f})")
    return ActionMask(np.minimum(1.0, posterior @ table), SOFT)


def mask_weights(
    kind: str,
    table: np.ndarray,
    labels: Optional[np.ndarray] = None,
    posteriors: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Batch of (B, L_a) mask weights for ``kind``."""
    if kind == HARD:
        return table[np.asarray(labels, dtype=np.int64)].copy()
    if kind == SOFT:
        return np.stack([soft_mask(p, table).weights for p in np.asarray(posteriors)])
    if kind == NONE:
        count = len(labels) if labels is not None else len(posteriors)
        return np.ones((count, table.shape[1]))
    raise ValueError(f"unknown mask kind '{kind}'")


def apply_mask(action_rows: np.ndarray, mask: Union[ActionMask, np.ndarray]) -> np.ndarray:
    """Row-wise multiply action rows (..., L_a, T) by weights (L_a,) or (B, L_a)."""
    weights = mask.weights if isinstance(mask, ActionMask) else np.asarray(mask, dtype=np.float64)
    if weights.shape[-1] != action_rows.shape[-2]:
        raise ValueError(f"mask of {weights.shape[-1]} actions for {action_rows.shape[-2]} action rows")
    return action_rows * weights[..., :, None]


def _boundary_weights(horizon: int, cfg: ProjectionConfig) -> np.ndarray:
    weights = np.ones(horizon)
    weights[0] = cfg.boundary_weight
    weights[-1] = cfg.boundary_weight
    return weights


def _condition_blocks(
    layout: StateLayout, task_onehot: np.ndarray, obs_start: np.ndarray, obs_goal: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    task_onehot = np.atleast_2d(task_onehot)
    batch = task_onehot.shape[0]
    tasks = np.repeat(task_onehot[:, :, None], layout.horizon, axis=2)
    obs = np.zeros((batch, layout.obs_dim, layout.horizon))
    obs[:, :, 0] = np.atleast_2d(obs_start)
    obs[:, :, -1] = np.atleast_2d(obs_goal)
    return tasks, obs


def project(
    x: np.ndarray,
    task_onehot: np.ndarray,
    obs_start: np.ndarray,
    obs_goal: np.ndarray,
    layout: StateLayout,
    cfg: ProjectionConfig,
) -> np.ndarray:
    """Overwrite condition rows and weight the first/last action columns by ``w``.

    Accepts (D, T) or (B, D, T); returns the same rank.
    """
    squeeze = x.ndim == 2
    state = np.array(x[None] if squeeze else x, dtype=np.float64, copy=True)
    if state.shape[1:] != (layout.dim, layout.horizon):
        raise ValueError(f"state shape {state.shape[1:]} does not match layout {(layout.dim, layout.horizon)}")
    tasks, obs = _condition_blocks(layout, task_onehot, obs_start, obs_goal)
    state[:, layout.task_rows, :] = tasks
    state[:, layout.obs_rows, :] = obs
    state[:, layout.action_rows, :] *= _boundary_weights(layout.horizon, cfg)
    return state[0] if squeeze else state


def project_tensor(
    x: Tensor,
    task_onehot: np.ndarray,
    obs_start: np.ndarray,
    obs_goal: np.ndarray,
    layout: StateLayout,
    cfg: ProjectionConfig,
) -> Tensor:
    """``project`` on a (B, D, T) tensor; condition rows become constants so no gradient reaches them."""
    tasks, obs = _condition_blocks(layout, task_onehot, obs_start, obs_goal)
    actions = mul(x[:, layout.action_rows, :], _boundary_weights(layout.horizon, cfg)[None, None, :])
    return concat([Tensor(tasks), actions, Tensor(obs)], axis=1)


def one_hot(ids: Sequence[int], size: int) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    out = np.zeros(ids.shape + (size,))
    np.put_along_axis(out, ids[..., None], 1.0, axis=-1)
    return out


@dataclass(frozen=True)
class ConditionBatch:
    tasks: np.ndarray
    actions: np.ndarray
    obs_start: np.ndarray
    obs_goal: np.ndarray

    @classmethod
    def from_instances(cls, instances: Sequence[PlanInstance]) -> "ConditionBatch":
        return cls(
            tasks=np.array([x.task for x in instances], dtype=np.int64),
            actions=np.array([x.actions for x in instances], dtype=np.int64),
            obs_start=np.stack([x.obs_start for x in instances]),
            obs_goal=np.stack([x.obs_goal for x in instances]),
        )


def raw_state(layout: StateLayout, batch: ConditionBatch) -> np.ndarray:
    """Unweighted x0: one-hot actions per column plus condition rows."""
    size = len(batch.tasks)
    state = np.zeros((size, layout.dim, layout.horizon))
    tasks, obs = _condition_blocks(layout, one_hot(batch.tasks, layout.num_tasks), batch.obs_start, batch.obs_goal)
    state[:, layout.task_rows, :] = tasks
    state[:, layout.action_rows, :] = one_hot(batch.actions, layout.num_actions).transpose(0, 2, 1)
    state[:, layout.obs_rows, :] = obs
    return state


def save_mask_table(path: Path, masks: Mapping[int, ActionMask], config_hash: Optional[str] = None) -> None:
    payload = {
        "num_actions": int(next(iter(masks.values())).weights.shape[0]),
        "masks": {str(task): list(masks[task].action_ids()) for task in sorted(masks)},
    }
    write_json_artifact(path, payload, config_hash=config_hash)


def load_mask_table(path: Path) -> Dict[int, ActionMask]:
    raw = read_json(path)
    num_actions = int(raw["num_actions"])
    masks: Dict[int, ActionMask] = {}
    for task, actions in raw["masks"].items():
        weights = np.zeros(num_actions)
        weights[list(actions)] = 1.0
        masks[int(task)] = ActionMask(weights, HARD)
    return masks
