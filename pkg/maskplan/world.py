"""Reproducible synthetic procedure-planning worlds and datasets.

A world owns ``num_tasks`` tasks; each task owns a subset of the global action vocabulary and a
small table of admissible procedures (a canonical ordering plus variants). Videos are procedures
sampled by weight; plan instances are length-``horizon`` windows of a video whose start/goal
observations are noisy embeddings of the boundary action under the task.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .artifacts import read_json, read_jsonl, write_json_artifact, write_jsonl
from .configuration import config_dict, resolve_config
from .streams import rng_stream

logger = logging.getLogger(__name__)

SLIDING_WINDOW = "sliding_window"
ONE_PER_VIDEO = "one_per_video"
PROTOCOLS = (SLIDING_WINDOW, ONE_PER_VIDEO)
_PROTOCOL_ALIASES = {"sliding": SLIDING_WINDOW, "one": ONE_PER_VIDEO, "per_video": ONE_PER_VIDEO}

# Caption vocabulary: action a reads "<verb> <noun> <tool>".
VERBS = ("pour", "cut", "add", "stir", "remove", "attach", "tighten", "spread", "fold", "press", "rinse", "place")
NOUNS = ("water", "bolt", "flour", "wheel", "sauce", "board", "filter", "paper", "egg", "tire", "glue", "lid")
_CAPTION_TASK_WEIGHT = 0.4


@dataclass(frozen=True)
class WorldSpec:
    num_tasks: int = 10
    actions_per_task: int = 6
    shared_actions: int = 0
    horizon: int = 3
    procedure_length: int = 5
    plans_per_task: int = 2
    plan_weights: Tuple[float, ...] = ()
    visual_dim: int = 64
    text_dim: int = 32
    obs_noise: float = 0.3
    caption_noise: float = 0.05
    task_signal: float = 0.5
    text_enabled: bool = True
    seed: int = 0

    @property
    def num_actions(self) -> int:
        return self.num_tasks * (self.actions_per_task - self.shared_actions) + self.shared_actions

    @property
    def obs_dim(self) -> int:
        return self.visual_dim + self.text_dim

    def validate(self) -> None:
        for name in ("num_tasks", "actions_per_task", "plans_per_task", "visual_dim", "text_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.horizon < 2:
            raise ValueError(f"horizon must be >= 2, got {self.horizon}")
        if self.procedure_length < self.horizon:
            raise ValueError(
                f"procedure_length {self.procedure_length} shorter than horizon {self.horizon}"
            )
        if self.actions_per_task < self.procedure_length:
            raise ValueError(
                f"tasks own {self.actions_per_task} actions but procedures need "
                f"{self.procedure_length} distinct steps"
            )
        if not 0 <= self.shared_actions <= self.actions_per_task:
            raise ValueError(f"shared_actions must be in [0, {self.actions_per_task}]")
        if self.plan_weights and len(self.plan_weights) != self.plans_per_task:
            raise ValueError(
                f"plan_weights has {len(self.plan_weights)} entries, expected {self.plans_per_task}"
            )
        if any(weight <= 0 for weight in self.plan_weights):
            raise ValueError("plan_weights must be positive")
        if self.obs_noise < 0 or self.caption_noise < 0:
            raise ValueError("noise scales must be >= 0")


@dataclass(frozen=True)
class World:
    spec: WorldSpec
    task_actions: Tuple[Tuple[int, ...], ...]
    plans: Tuple[Tuple[Tuple[int, ...], ...], ...]
    plan_weights: Tuple[Tuple[float, ...], ...]

    @property
    def num_tasks(self) -> int:
        return self.spec.num_tasks

    @property
    def num_actions(self) -> int:
        return self.spec.num_actions

    def admissible_windows(self, task: int) -> List[Tuple[int, ...]]:
        horizon = self.spec.horizon
        windows = set()
        for plan in self.plans[task]:
            for start in range(len(plan) - horizon + 1):
                windows.add(tuple(plan[start : start + horizon]))
        return sorted(windows)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "spec": config_dict(self.spec),
            "task_actions": {str(k): list(actions) for k, actions in enumerate(self.task_actions)},
            "plans": {
                str(k): [
                    {"actions": list(plan), "weight": weight}
                    for plan, weight in zip(self.plans[k], self.plan_weights[k])
                ]
                for k in range(self.num_tasks)
            },
        }

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> "World":
        spec = resolve_config(WorldSpec, raw["spec"])
        tasks = range(spec.num_tasks)
        return cls(
            spec=spec,
            task_actions=tuple(tuple(raw["task_actions"][str(k)]) for k in tasks),
            plans=tuple(tuple(tuple(p["actions"]) for p in raw["plans"][str(k)]) for k in tasks),
            plan_weights=tuple(tuple(float(p["weight"]) for p in raw["plans"][str(k)]) for k in tasks),
        )


@dataclass(frozen=True)
class PlanInstance:
    task: int
    actions: Tuple[int, ...]
    obs_start: np.ndarray = field(compare=False)
    obs_goal: np.ndarray = field(compare=False)
    video_id: int = 0
    window_index: int = 0
    split: Optional[str] = None

    @property
    def horizon(self) -> int:
        return len(self.actions)

    @property
    def group_key(self) -> Tuple[int, int, int]:
        return (self.task, self.actions[0], self.actions[-1])

    @property
    def key(self) -> Tuple[int, int]:
        return (self.video_id, self.window_index)

    def to_record(self) -> Dict[str, Any]:
        record = {
            "task": self.task,
            "actions": list(self.actions),
            "obs_start": [float(v) for v in self.obs_start],
            "obs_goal": [float(v) for v in self.obs_goal],
            "video_id": self.video_id,
            "window_index": self.window_index,
        }
        if self.split is not None:
            record["split"] = self.split
        return record

    @classmethod
    def from_record(cls, record: Dict[str, Any]) -> "PlanInstance":
        return cls(
            task=int(record["task"]),
            actions=tuple(int(a) for a in record["actions"]),
            obs_start=np.asarray(record["obs_start"], dtype=np.float64),
            obs_goal=np.asarray(record["obs_goal"], dtype=np.float64),
            video_id=int(record.get("video_id", 0)),
            window_index=int(record.get("window_index", 0)),
            split=record.get("split"),
        )


@dataclass(frozen=True)
class TextEmbedding:
    vector: np.ndarray = field(compare=False)
    keywords: Tuple[str, ...] = ()


def action_keywords(action: int) -> Tuple[str, ...]:
    """Verb + noun(s) caption keywords for an action id."""
    verb = VERBS[action % len(VERBS)]
    noun = NOUNS[(action // len(VERBS)) % len(NOUNS)]
    tool = NOUNS[(action // (len(VERBS) * len(NOUNS)) + action) % len(NOUNS)]
    return (verb, noun, tool)


def _word_vector(word: str, seed: int, dim: int) -> np.ndarray:
    digest = hashlib.sha256(f"{seed}:{word}".encode("utf-8")).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little")).standard_normal(dim)


def _unit(vector: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(vector)
    return vector / norm if norm > 0 else vector


def caption_embed(
    action: int,
    task: int,
    seed: int,
    dim: int = 32,
    noise_scale: float = 0.05,
    draw: int = 0,
) -> TextEmbedding:
    """Stand-in for caption-then-encode: shared keyword part, smaller task part, noise.

    Same action under different tasks stays closer than different actions under one task.
    """
    if action < 0 or task < 0:
        raise ValueError(f"ids must be >= 0, got action={action} task={task}")
    keywords = action_keywords(action)
    action_part = _unit(sum(_word_vector(word, seed, dim) for word in keywords))
    task_part = _unit(_word_vector(f"task-{task}", seed, dim))
    vector = action_part + _CAPTION_TASK_WEIGHT * task_part
    if noise_scale > 0:
        noise = rng_stream(seed, "caption", action, task, draw).standard_normal(dim)
        vector = vector + noise_scale * noise / np.sqrt(dim)
    return TextEmbedding(vector=_unit(vector), keywords=keywords)


def _visual_prototype(seed: int, kind: str, index: int, dim: int) -> np.ndarray:
    return rng_stream(seed, "visual", kind, index).standard_normal(dim)


def clean_observation(world: World, action: int, task: int) -> np.ndarray:
    """Noise-free observation vector (visual channels then text channels)."""
    spec = world.spec
    visual = _visual_prototype(spec.seed, "action", action, spec.visual_dim) + spec.task_signal * _visual_prototype(
        spec.seed, "task", task, spec.visual_dim
    )
    if spec.text_enabled:
        caption = caption_embed(action, task, spec.seed, spec.text_dim, spec.caption_noise)
        text = caption.vector * np.sqrt(spec.text_dim)
    else:
        text = np.zeros(spec.text_dim)
    return np.concatenate([visual, text])


def zero_text_channels(obs: np.ndarray, visual_dim: int) -> np.ndarray:
    out = np.array(obs, dtype=np.float64, copy=True)
    out[..., visual_dim:] = 0.0
    return out


def _build_variants(
    canonical: Tuple[int, ...], owned: Sequence[int], count: int, rng: np.random.Generator
) -> List[Tuple[int, ...]]:
    plans = [canonical]
    spare = [a for a in owned if a not in canonical]
    length = len(canonical)
    interior = list(range(1, length - 1)) or list(range(length))
    attempts = 0
    while len(plans) < count:
        attempts += 1
        if attempts > 200 * count:
            raise ValueError(
                f"cannot build {count} distinct procedures from {len(owned)} actions "
                f"of length {length}"
            )
        variant = list(canonical)
        swap_ok = length >= 4
        if spare and (len(plans) % 2 == 1 or not swap_ok):
            position = int(rng.choice(interior))
            variant[position] = int(rng.choice(spare))
        elif swap_ok:
            position = int(rng.integers(1, length - 2))
            variant[position], variant[position + 1] = variant[position + 1], variant[position]
        else:
            continue
        candidate = tuple(variant)
        if candidate not in plans:
            plans.append(candidate)
    return plans


def generate_world(spec: WorldSpec) -> World:
    """Deterministic world for ``spec.seed``; tasks own shared ids plus a private block."""
    spec.validate()
    rng = rng_stream(spec.seed, "world")
    private = spec.actions_per_task - spec.shared_actions
    shared_ids = list(range(spec.shared_actions))
    task_actions: List[Tuple[int, ...]] = []
    plans: List[Tuple[Tuple[int, ...], ...]] = []
    weights: List[Tuple[float, ...]] = []
    for task in range(spec.num_tasks):
        start = spec.shared_actions + task * private
        owned = tuple(sorted(shared_ids + list(range(start, start + private))))
        canonical = tuple(int(a) for a in rng.permutation(owned)[: spec.procedure_length])
        task_plans = _build_variants(canonical, owned, spec.plans_per_task, rng)
        if spec.plan_weights:
            raw = np.asarray(spec.plan_weights, dtype=np.float64)
        else:
            raw = rng.dirichlet(np.full(spec.plans_per_task, 2.0))
        task_actions.append(owned)
        plans.append(tuple(task_plans))
        weights.append(tuple(float(w) for w in raw / raw.sum()))
    world = World(spec=spec, task_actions=tuple(task_actions), plans=tuple(plans), plan_weights=tuple(weights))
    logger.info(
        "Generated world: %d tasks, %d actions, %d plans per task",
        spec.num_tasks,
        spec.num_actions,
        spec.plans_per_task,
    )
    return world


def normalize_protocol(protocol: str) -> str:
    value = _PROTOCOL_ALIASES.get(protocol, protocol)
    if value not in PROTOCOLS:
        raise ValueError(f"unknown protocol '{protocol}', expected one of {PROTOCOLS}")
    return value


def _observe(world: World, action: int, task: int, rng: np.random.Generator) -> np.ndarray:
    obs = clean_observation(world, action, task)
    if world.spec.obs_noise > 0:
        obs = obs + world.spec.obs_noise * rng.standard_normal(obs.shape)
    if not world.spec.text_enabled:
        obs = zero_text_channels(obs, world.spec.visual_dim)
    return obs


def sample_dataset(
    world: World, n_videos: int, protocol: str = SLIDING_WINDOW, seed: Optional[int] = None
) -> List[PlanInstance]:
    """Sample ``n_videos`` procedure videos and cut them into plan instances."""
    if n_videos <= 0:
        raise ValueError(f"n_videos must be > 0, got {n_videos}")
    protocol = normalize_protocol(protocol)
    seed = world.spec.seed if seed is None else seed
    horizon = world.spec.horizon
    instances: List[PlanInstance] = []
    for video_id in range(n_videos):
        rng = rng_stream(seed, "video", video_id)
        task = int(rng.integers(world.num_tasks))
        plan_index = int(rng.choice(len(world.plans[task]), p=world.plan_weights[task]))
        sequence = world.plans[task][plan_index]
        starts = range(len(sequence) - horizon + 1)
        if protocol == ONE_PER_VIDEO:
            starts = [int(rng.integers(len(sequence) - horizon + 1))]
        for start in starts:
            window = tuple(sequence[start : start + horizon])
            instances.append(
                PlanInstance(
                    task=task,
                    actions=window,
                    obs_start=_observe(world, window[0], task, rng),
                    obs_goal=_observe(world, window[-1], task, rng),
                    video_id=video_id,
                    window_index=start,
                )
            )
    logger.info("Sampled %d instances from %d videos (%s)", len(instances), n_videos, protocol)
    return instances


def split_dataset(
    instances: Sequence[PlanInstance], ratio: float = 0.7, seed: int = 0
) -> Tuple[List[PlanInstance], List[PlanInstance]]:
    """Video-level split; every returned instance carries its split tag."""
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must be in (0, 1), got {ratio}")
    videos = sorted({instance.video_id for instance in instances})
    n_train = int(round(ratio * len(videos)))
    if n_train == 0 or n_train == len(videos):
        raise ValueError(f"ratio {ratio} over {len(videos)} videos leaves one side empty")
    order = rng_stream(seed, "split").permutation(len(videos))
    train_videos = {videos[i] for i in order[:n_train]}
    train = [replace(x, split="train") for x in instances if x.video_id in train_videos]
    test = [replace(x, split="test") for x in instances if x.video_id not in train_videos]
    logger.info("Split %d videos: %d train / %d test", len(videos), n_train, len(videos) - n_train)
    return train, test


def save_world(path: Path, world: World, config_hash: Optional[str] = None) -> None:
    write_json_artifact(path, {"world": world.to_dict()}, config_hash=config_hash)


def load_world(path: Path) -> World:
    return World.from_dict(read_json(path)["world"])


def save_dataset(path: Path, instances: Iterable[PlanInstance], config_hash: Optional[str] = None) -> int:
    return write_jsonl(path, (instance.to_record() for instance in instances), config_hash=config_hash)


def load_dataset(path: Path) -> List[PlanInstance]:
    return [PlanInstance.from_record(record) for record in read_jsonl(path)]
