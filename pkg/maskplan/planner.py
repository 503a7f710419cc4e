"""Masked plan sampling (DDPM, DDIM and the two one-shot baselines), decoding and metrics."""

from __future__ import annotations

import logging
from collections import Counter, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Dict, Hashable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .classifier import TaskClassifier
from .diffusion import DiffusionSchedule, ddim_step, ddim_timesteps, posterior_step
from .masking import (
    HARD,
    MASK_KINDS,
    ConditionBatch,
    ProjectionConfig,
    StateLayout,
    apply_mask,
    mask_weights,
    one_hot,
    project,
)
from .streams import rng_stream
from .unet import DenoisingUNet
from .world import PlanInstance

logger = logging.getLogger(__name__)

DDPM = "ddpm"
DDIM = "ddim"
DETERMINISTIC = "deterministic"
NOISE = "noise"
SAMPLERS = (DDPM, DDIM, DETERMINISTIC, NOISE)
_SAMPLER_ALIASES = {"det": DETERMINISTIC}

CLASSIFIER_TASKS = "classifier"
ORACLE_TASKS = "oracle"

StepHook = Callable[[int, np.ndarray, np.ndarray], None]


def normalize_sampler(name: str) -> str:
    value = _SAMPLER_ALIASES.get(name, name)
    if value not in SAMPLERS:
        raise ValueError(f"unknown sampler '{name}', expected one of {SAMPLERS}")
    return value


@dataclass(frozen=True)
class SamplerConfig:
    sampler: str = DDPM
    ddim_steps: Optional[int] = None
    eta: float = 1.0
    mask: str = HARD
    task_source: str = CLASSIFIER_TASKS
    boundary_weight: float = 10.0
    seed: int = 0
    jobs: int = 1
    chunk_size: int = 64

    def validate(self) -> None:
        normalize_sampler(self.sampler)
        if self.mask not in MASK_KINDS:
            raise ValueError(f"unknown mask kind '{self.mask}'")
        if self.task_source not in (CLASSIFIER_TASKS, ORACLE_TASKS):
            raise ValueError(f"unknown task source '{self.task_source}'")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must be in [0, 1], got {self.eta}")
        if self.jobs < 1 or self.chunk_size < 1:
            raise ValueError("jobs and chunk_size must be >= 1")

    def sampling_steps(self, num_steps: int) -> int:
        return self.ddim_steps if self.ddim_steps else max(1, num_steps // 5)


@dataclass(frozen=True)
class PlanningContext:
    model: DenoisingUNet
    schedule: DiffusionSchedule
    layout: StateLayout
    table: np.ndarray
    classifier: Optional[TaskClassifier] = None

    def __post_init__(self) -> None:
        if self.model.config.input_dim != self.layout.dim:
            raise ValueError(f"denoiser input {self.model.config.input_dim} != state dim {self.layout.dim}")
        if self.table.shape != (self.layout.num_tasks, self.layout.num_actions):
            raise ValueError(f"mask table {self.table.shape} does not match layout")
        if self.classifier is not None and (
            self.classifier.config.num_tasks != self.layout.num_tasks
            or self.classifier.config.obs_dim != self.layout.obs_dim
        ):
            raise ValueError("classifier dimensions do not match the state layout")


@dataclass(frozen=True)
class PlanSample:
    video_id: int
    window_index: int
    sample_index: int
    actions: Tuple[int, ...]
    logits: np.ndarray = field(compare=False)
    mask: np.ndarray = field(compare=False)
    mask_kind: str = HARD
    label: int = 0
    sampler: str = DDPM

    @property
    def key(self) -> Tuple[int, int]:
        return (self.video_id, self.window_index)

    def to_record(self) -> Dict[str, Any]:
        return {
            "video_id": self.video_id,
            "window_index": self.window_index,
            "sample": self.sample_index,
            "actions": list(self.actions),
            "logits": np.round(self.logits, 8).tolist(),
            "mask": self.mask.tolist(),
            "mask_kind": self.mask_kind,
            "label": self.label,
            "sampler": self.sampler,
        }

    @classmethod
    def from_record(cls, record: Mapping[str, Any]) -> "PlanSample":
        return cls(
            video_id=int(record["video_id"]),
            window_index=int(record["window_index"]),
            sample_index=int(record.get("sample", 0)),
            actions=tuple(int(a) for a in record["actions"]),
            logits=np.asarray(record.get("logits", []), dtype=np.float64),
            mask=np.asarray(record.get("mask", []), dtype=np.float64),
            mask_kind=record.get("mask_kind", HARD),
            label=int(record.get("label", 0)),
            sampler=record.get("sampler", DDPM),
        )


def decode_actions(action_rows: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Per-column argmax over actions with positive mask weight; (B, L_a, T) -> (B, T)."""
    allowed = np.asarray(weights)[..., :, None] > 0.0
    return np.argmax(np.where(allowed, action_rows, -np.inf), axis=-2)


def _task_conditions(
    batch: ConditionBatch, ctx: PlanningContext, cfg: SamplerConfig
) -> Tuple[np.ndarray, np.ndarray]:
    if cfg.task_source == ORACLE_TASKS:
        return batch.tasks, one_hot(batch.tasks, ctx.layout.num_tasks)
    if ctx.classifier is None:
        raise ValueError("classifier-predicted tasks requested but no classifier was given")
    result = ctx.classifier.classify(batch.obs_start, batch.obs_goal)
    return result.labels, result.posterior


def _sample_chunk(
    jobs: Sequence[Tuple[PlanInstance, int]],
    ctx: PlanningContext,
    cfg: SamplerConfig,
    on_step: Optional[StepHook],
) -> List[PlanSample]:
    layout = ctx.layout
    proj = ProjectionConfig(cfg.boundary_weight)
    sampler = normalize_sampler(cfg.sampler)
    batch = ConditionBatch.from_instances([instance for instance, _ in jobs])
    labels, posteriors = _task_conditions(batch, ctx, cfg)
    weights = mask_weights(cfg.mask, ctx.table, labels=labels, posteriors=posteriors)
    task_onehot = one_hot(labels, layout.num_tasks)
    rngs = [rng_stream(cfg.seed, "plan", inst.video_id, inst.window_index, index) for inst, index in jobs]
    acts = layout.action_rows
    size, num_steps = len(jobs), ctx.schedule.num_steps

    def masked_noise() -> np.ndarray:
        out = np.zeros((size, layout.dim, layout.horizon))
        draws = np.stack([rng.standard_normal((layout.num_actions, layout.horizon)) for rng in rngs])
        out[:, acts] = apply_mask(draws, weights)
        return out

    def estimate(x: np.ndarray, n: int) -> np.ndarray:
        model_in = project(x, task_onehot, batch.obs_start, batch.obs_goal, layout, proj)
        est = project(ctx.model.predict(model_in, n), task_onehot, batch.obs_start, batch.obs_goal, layout, proj)
        est[:, acts] = apply_mask(est[:, acts], weights)
        return est

    x = np.zeros((size, layout.dim, layout.horizon)) if sampler == DETERMINISTIC else masked_noise()
    if on_step is not None:
        on_step(num_steps, x, weights)
    if sampler == DDPM:
        for n in range(num_steps, 0, -1):
            est = estimate(x, n)
            noise = masked_noise() if n > 1 else np.zeros_like(x)
            x = posterior_step(ctx.schedule, x, est, n, noise)
            if on_step is not None:
                on_step(n - 1, x, weights)
    elif sampler == DDIM:
        for n, n_prev in ddim_timesteps(num_steps, cfg.sampling_steps(num_steps)):
            est = estimate(x, n)
            noise = masked_noise() if n_prev > 0 and cfg.eta > 0 else np.zeros_like(x)
            x = ddim_step(ctx.schedule, x, est, n, n_prev, cfg.eta, noise)
            if on_step is not None:
                on_step(n_prev, x, weights)
    else:
        # single call at the noisiest step, from zeros or from one masked draw
        x = estimate(x, num_steps)
        if on_step is not None:
            on_step(0, x, weights)

    logits = x[:, acts]
    decoded = decode_actions(logits, weights)
    return [
        PlanSample(
            video_id=instance.video_id,
            window_index=instance.window_index,
            sample_index=index,
            actions=tuple(int(a) for a in decoded[i]),
            logits=logits[i].copy(),
            mask=weights[i].copy(),
            mask_kind=cfg.mask,
            label=int(labels[i]),
            sampler=sampler,
        )
        for i, (instance, index) in enumerate(jobs)
    ]


def sample_plans(
    instances: Sequence[PlanInstance],
    ctx: PlanningContext,
    cfg: SamplerConfig,
    sample_indices: Optional[Sequence[int]] = None,
    on_step: Optional[StepHook] = None,
) -> List[PlanSample]:
    """Sample one plan per (instance, sample index); output order follows the input.

    Each (instance, sample index) draws from its own random stream, so results do not depend
    on ``jobs`` or ``chunk_size``.
    """
    cfg.validate()
    if not instances:
        return []
    indices = list(sample_indices) if sample_indices is not None else [0] * len(instances)
    if len(indices) != len(instances):
        raise ValueError("sample_indices must align with instances")
    work = list(zip(instances, indices))
    chunks = [work[i : i + cfg.chunk_size] for i in range(0, len(work), cfg.chunk_size)]
    if cfg.jobs == 1 or len(chunks) == 1:
        results = [_sample_chunk(chunk, ctx, cfg, on_step) for chunk in chunks]
    else:
        with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
            results = list(pool.map(lambda chunk: _sample_chunk(chunk, ctx, cfg, on_step), chunks))
    samples = [sample for chunk in results for sample in chunk]
    logger.debug("Sampled %d plans with %s (%s mask)", len(samples), cfg.sampler, cfg.mask)
    return samples


@dataclass(frozen=True)
class PlanScores:
    success_rate: float
    mean_accuracy: float
    mean_iou: float
    count: int

    def to_dict(self) -> Dict[str, Any]:
        return {
            "SR": self.success_rate,
            "mAcc": self.mean_accuracy,
            "mIoU": self.mean_iou,
            "count": self.count,
        }


def score_plans(predicted: Sequence[Sequence[int]], ground_truth: Sequence[Sequence[int]]) -> PlanScores:
    if len(predicted) != len(ground_truth):
        raise ValueError(f"{len(predicted)} predictions for {len(ground_truth)} ground-truth plans")
    if not predicted:
        raise ValueError("cannot score an empty set of plans")
    pred = [tuple(p) for p in predicted]
    gt = [tuple(g) for g in ground_truth]
    exact: List[bool] = []
    step_hits = 0
    step_total = 0
    ious: List[float] = []
    for p, g in zip(pred, gt):
        if len(p) != len(g):
            raise ValueError(f"horizon mismatch: predicted {len(p)} vs ground truth {len(g)}")
        # horizons may differ between pairs
        hits = sum(a == b for a, b in zip(p, g))
        exact.append(hits == len(g))
        step_hits += hits
        step_total += len(g)
        ious.append(len(set(p) & set(g)) / len(set(p) | set(g)))
    return PlanScores(
        success_rate=float(np.mean(exact)),
        mean_accuracy=step_hits / step_total,
        mean_iou=float(np.mean(ious)),
        count=len(pred),
    )


@dataclass(frozen=True)
class DistributionScores:
    nll: float
    kl: float
    mode_precision: float
    mode_recall: float
    groups: int
    skipped: int

    def to_dict(self) -> Dict[str, Any]:
        return {
            "NLL": self.nll,
            "KL": self.kl,
            "ModePrec": self.mode_precision,
            "ModeRec": self.mode_recall,
            "groups": self.groups,
            "skipped_groups": self.skipped,
        }


def score_distributions(
    samples: Mapping[Hashable, Sequence[Sequence[int]]],
    ground_truth: Mapping[Hashable, Sequence[Sequence[int]]],
    epsilon: float = 1e-12,
) -> DistributionScores:
    """Group-size-weighted NLL / KL / mode precision / mode recall over plan distributions.

    KL and NLL are taken over the ground-truth support; mode precision counts every sample.
    """
    totals = np.zeros(4)
    weight_sum = 0.0
    skipped = 0
    for key, gt_plans in ground_truth.items():
        drawn = [tuple(p) for p in samples.get(key, ())]
        if not drawn or not gt_plans:
            skipped += 1
            continue
        g_counts = Counter(tuple(p) for p in gt_plans)
        p_counts = Counter(drawn)
        g_total = sum(g_counts.values())
        modes = list(g_counts)
        g = np.array([g_counts[m] / g_total for m in modes])
        p = np.array([p_counts.get(m, 0) / len(drawn) for m in modes])
        kl = max(float(np.sum(g * np.log(g / (p + epsilon)))), 0.0)
        nll = float(-np.sum(g * np.log(p + epsilon)))
        precision = sum(p_counts[m] for m in p_counts if m in g_counts) / len(drawn)
        recall = sum(1 for m in modes if p_counts.get(m, 0) > 0) / len(modes)
        totals += g_total * np.array([nll, kl, precision, recall])
        weight_sum += g_total
    if skipped:
        logger.warning("Skipped %d groups without samples", skipped)
    if weight_sum == 0:
        raise ValueError("no group had both samples and ground-truth plans")
    nll, kl, precision, recall = totals / weight_sum
    return DistributionScores(
        nll=float(nll),
        kl=float(kl),
        mode_precision=float(precision),
        mode_recall=float(recall),
        groups=len(ground_truth) - skipped,
        skipped=skipped,
    )


@dataclass
class MetricsReport:
    plans: PlanScores
    per_horizon: Dict[int, PlanScores] = field(default_factory=dict)
    distribution: Optional[DistributionScores] = None
    per_group: Dict[str, Dict[str, Any]] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        payload: Dict[str, Any] = {
            "metrics": self.plans.to_dict(),
            "per_horizon": {str(h): s.to_dict() for h, s in sorted(self.per_horizon.items())},
        }
        if self.distribution is not None:
            payload["metrics"].update(self.distribution.to_dict())
        if self.per_group:
            payload["per_group"] = self.per_group
        return payload

    def row(self) -> List[Any]:
        dist = self.distribution
        return [
            self.plans.success_rate,
            self.plans.mean_accuracy,
            self.plans.mean_iou,
            dist.nll if dist else None,
            dist.kl if dist else None,
            dist.mode_precision if dist else None,
            dist.mode_recall if dist else None,
        ]


TABLE_COLUMNS = ("SR", "mAcc", "mIoU", "NLL", "KL", "ModePrec", "ModeRec")


def group_label(key: Tuple[int, int, int]) -> str:
    return "-".join(str(part) for part in key)


def score_against(
    samples: Sequence[PlanSample],
    ground_truth: Sequence[PlanInstance],
    distribution: bool = False,
    epsilon: float = 1e-12,
) -> MetricsReport:
    """Score sampled plans against instances matched by (video, window)."""
    by_key = {instance.key: instance for instance in ground_truth}
    firsts: Dict[Tuple[int, int], PlanSample] = {}
    for sample in samples:
        if sample.key not in by_key:
            raise ValueError(f"plan for unknown instance {sample.key}")
        current = firsts.get(sample.key)
        if current is None or sample.sample_index < current.sample_index:
            firsts[sample.key] = sample
    keys = sorted(firsts)
    matched = [by_key[k] for k in keys]
    plans = score_plans([firsts[k].actions for k in keys], [x.actions for x in matched])
    horizons: Dict[int, List[Tuple[int, int]]] = defaultdict(list)
    for key, instance in zip(keys, matched):
        horizons[instance.horizon].append(key)
    per_horizon = {
        h: score_plans([firsts[k].actions for k in ks], [by_key[k].actions for k in ks])
        for h, ks in sorted(horizons.items())
    }
    report = MetricsReport(plans=plans, per_horizon=per_horizon)
    if distribution:
        drawn: Dict[Tuple[int, int, int], List[Tuple[int, ...]]] = defaultdict(list)
        gt: Dict[Tuple[int, int, int], List[Tuple[int, ...]]] = defaultdict(list)
        for instance in matched:
            gt[instance.group_key].append(instance.actions)
        for sample in samples:
            drawn[by_key[sample.key].group_key].append(sample.actions)
        report.distribution = score_distributions(drawn, gt, epsilon)
        for key in sorted(gt):
            if drawn.get(key):
                single = score_distributions({key: drawn[key]}, {key: gt[key]}, epsilon)
                report.per_group[group_label(key)] = single.to_dict()
    return report


@dataclass(frozen=True)
class EvalConfig:
    num_samples: int = 1500
    distribution_sampler: Optional[str] = None
    epsilon: float = 1e-12
    max_groups: Optional[int] = None


def resolve_distribution_sampler(cfg: SamplerConfig, eval_cfg: EvalConfig) -> str:
    """Sampler for the distribution protocol: an explicit choice, else the model's own with DDPM swapped for DDIM."""
    if eval_cfg.distribution_sampler is not None:
        return normalize_sampler(eval_cfg.distribution_sampler)
    return DDIM if cfg.sampler == DDPM else cfg.sampler


def distribution_jobs(
    instances: Sequence[PlanInstance], num_samples: int, max_groups: Optional[int] = None
) -> Tuple[List[PlanInstance], List[int]]:
    """Spread ``num_samples`` draws per group round-robin over the group's instances."""
    groups: Dict[Tuple[int, int, int], List[PlanInstance]] = defaultdict(list)
    for instance in instances:
        groups[instance.group_key].append(instance)
    chosen = sorted(groups)[:max_groups] if max_groups else sorted(groups)
    jobs: List[PlanInstance] = []
    indices: List[int] = []
    for key in chosen:
        members = groups[key]
        for draw in range(num_samples):
            jobs.append(members[draw % len(members)])
            indices.append(draw // len(members) + 1)
    return jobs, indices


def evaluate(
    instances: Sequence[PlanInstance],
    ctx: PlanningContext,
    cfg: SamplerConfig,
    eval_cfg: Optional[EvalConfig] = None,
) -> MetricsReport:
    """Sample one plan per instance and score it; with ``eval_cfg`` also run the distribution protocol."""
    if any(x.split == "train" for x in instances):
        logger.warning("Evaluating on instances tagged as training data")
    samples = sample_plans(instances, ctx, cfg)
    report = score_against(samples, instances)
    if eval_cfg is not None and eval_cfg.num_samples > 0:
        jobs, indices = distribution_jobs(instances, eval_cfg.num_samples, eval_cfg.max_groups)
        dist_cfg = replace(cfg, sampler=resolve_distribution_sampler(cfg, eval_cfg))
        drawn = sample_plans(jobs, ctx, dist_cfg, sample_indices=indices)
        sampled_groups = {job.group_key for job in jobs}
        members = [x for x in instances if x.group_key in sampled_groups]
        grouped = score_against(drawn, members, distribution=True, epsilon=eval_cfg.epsilon)
        report.distribution = grouped.distribution
        report.per_group = grouped.per_group
    logger.info(
        "Evaluated %d instances (%s, %s mask): SR %.4f mAcc %.4f mIoU %.4f",
        len(instances),
        cfg.sampler,
        cfg.mask,
        report.plans.success_rate,
        report.plans.mean_accuracy,
        report.plans.mean_iou,
    )
    return report
