"""Two-stage training: task classifier, then the masked projected diffusion denoiser."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from .artifacts import write_csv
from .checkpoint import CheckpointError
from .classifier import ClassifierConfig, ClassifierReport, ClassifierTrainConfig, TaskClassifier, save_classifier, train_classifier
from .diffusion import DiffusionSchedule, make_schedule, q_sample
from .masking import (
    HARD,
    MASK_KINDS,
    SOFT,
    ConditionBatch,
    ProjectionConfig,
    StateLayout,
    apply_mask,
    build_task_masks,
    mask_table,
    mask_weights,
    one_hot,
    project,
    project_tensor,
    raw_state,
    save_mask_table,
)
from .optim import LR_PROFILES, Adam, LRSchedule, TrainingDivergedError, clip_grad_norm, gradients_by_name, scheduled_lr
from .planner import DDIM, ORACLE_TASKS, CLASSIFIER_TASKS, PlanningContext, SamplerConfig, sample_plans, score_plans
from .streams import rng_stream
from .tensor import Tensor, backward, mse_loss, mul
from .unet import DenoisingUNet, UNetConfig, save_unet
from .world import PlanInstance

logger = logging.getLogger(__name__)

CURVE_HEADER = ("step", "loss", "lr", "eval_SR")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 10000
    batch_size: int = 64
    profile: Optional[str] = None
    base_lr: float = 5e-4
    warmup_steps: int = 500
    milestones: Tuple[int, ...] = (6000, 8000)
    decay_factor: float = 0.5
    lr_floor: float = 0.0
    diffusion_steps: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.02
    boundary_weight: float = 10.0
    mask: str = HARD
    max_grad_norm: Optional[float] = None
    log_every: int = 100
    eval_every: int = 0
    eval_instances: int = 256
    checkpoint_every: int = 0
    seed: int = 0

    def validate(self) -> None:
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.mask not in MASK_KINDS:
            raise ValueError(f"unknown mask kind '{self.mask}'")
        if self.profile is not None and self.profile not in LR_PROFILES:
            raise ValueError(f"unknown lr profile '{self.profile}', expected one of {sorted(LR_PROFILES)}")
        if self.lr_schedule().warmup_steps > self.steps:
            raise ValueError(f"warmup {self.lr_schedule().warmup_steps} exceeds {self.steps} steps")
        if self.log_every < 1:
            raise ValueError("log_every must be >= 1")

    def lr_schedule(self) -> LRSchedule:
        if self.profile:
            return LR_PROFILES[self.profile]
        return LRSchedule(self.base_lr, self.warmup_steps, self.milestones, self.decay_factor, self.lr_floor)


def lr_at(step: int, cfg: TrainConfig) -> float:
    return scheduled_lr(step, cfg.lr_schedule())


def check_provenance(instances: Sequence[PlanInstance]) -> None:
    leaked = [x.key for x in instances if x.split == "test"]
    if leaked:
        raise ValueError(f"{len(leaked)} test-split instances passed to training, first {leaked[0]}")


@dataclass(frozen=True)
class DiffusionBatch:
    conditions: ConditionBatch
    task_onehot: np.ndarray
    target: np.ndarray
    steps: np.ndarray
    model_input: np.ndarray


def diffusion_batch(
    batch: Sequence[PlanInstance],
    layout: StateLayout,
    schedule: DiffusionSchedule,
    masks: np.ndarray,
    proj: ProjectionConfig,
    rng: np.random.Generator,
) -> DiffusionBatch:
    """Projected one-hot x0 with masked action rows, a per-element step and its masked noisy state."""
    conditions = ConditionBatch.from_instances(batch)
    task_onehot = one_hot(conditions.tasks, layout.num_tasks)
    x0 = project(raw_state(layout, conditions), task_onehot, conditions.obs_start, conditions.obs_goal, layout, proj)
    acts = layout.action_rows
    x0[:, acts] = apply_mask(x0[:, acts], masks)
    steps = rng.integers(1, schedule.num_steps + 1, size=len(batch))
    noise = np.zeros_like(x0)
    noise[:, acts] = apply_mask(rng.standard_normal((len(batch), layout.num_actions, layout.horizon)), masks)
    x_n = q_sample(schedule, x0, steps, noise)
    model_input = project(x_n, task_onehot, conditions.obs_start, conditions.obs_goal, layout, proj)
    return DiffusionBatch(conditions, task_onehot, x0[:, acts], steps, model_input)


def masked_loss(
    x0_hat: Tensor, batch: DiffusionBatch, masks: np.ndarray, layout: StateLayout, proj: ProjectionConfig
) -> Tensor:
    """MSE between the projected, masked prediction and the masked target over action rows."""
    cond = batch.conditions
    projected = project_tensor(x0_hat, batch.task_onehot, cond.obs_start, cond.obs_goal, layout, proj)
    predicted = mul(projected[:, layout.action_rows, :], masks[:, :, None])
    return mse_loss(predicted, batch.target)


def train_step(
    batch: Sequence[PlanInstance],
    model: DenoisingUNet,
    schedule: DiffusionSchedule,
    masks: np.ndarray,
    cfg: TrainConfig,
    optimizer: Adam,
    layout: StateLayout,
    rng: np.random.Generator,
    lr: float,
    step: int = 0,
) -> float:
    """One Adam update on a batch; ``masks`` holds one (L_a,) weight row per instance."""
    if not batch:
        raise ValueError("empty training batch")
    check_provenance(batch)
    proj = ProjectionConfig(cfg.boundary_weight)
    prepared = diffusion_batch(batch, layout, schedule, masks, proj, rng)
    x0_hat = model.denoise(Tensor(prepared.model_input), prepared.steps)
    loss = masked_loss(x0_hat, prepared, masks, layout, proj)
    value = loss.item()
    if not np.isfinite(value):
        raise TrainingDivergedError("diffusion", step, lr, value)
    named = list(optimizer.params.items())
    grads = gradients_by_name(named, backward(loss))
    clip_grad_norm(grads, cfg.max_grad_norm)
    optimizer.step(grads, lr)
    return value


@dataclass
class DiffusionRun:
    model: DenoisingUNet
    schedule: DiffusionSchedule
    curve: List[Dict[str, Any]] = field(default_factory=list)
    final_loss: float = float("nan")


def _instance_masks(
    kind: str, table: np.ndarray, tasks: np.ndarray, posteriors: Optional[np.ndarray]
) -> np.ndarray:
    if kind == SOFT:
        if posteriors is None:
            raise ValueError("soft-mask training needs classifier posteriors")
        return mask_weights(SOFT, table, posteriors=posteriors)
    return mask_weights(kind, table, labels=tasks)


def _checkpoint_extra(step: int, layout: StateLayout, schedule: DiffusionSchedule) -> Dict[str, Any]:
    return {"step": step, "layout": layout.to_dict(), "schedule": schedule.to_dict()}


def _write_curve(path: Path, curve: List[Dict[str, Any]], config_hash: Optional[str]) -> None:
    rows = [[row["step"], row["loss"], row["lr"], row.get("eval_SR")] for row in curve]
    write_csv(path, CURVE_HEADER, rows, config_hash=config_hash)


def curve_success_rate(
    model: DenoisingUNet,
    schedule: DiffusionSchedule,
    layout: StateLayout,
    table: np.ndarray,
    instances: Sequence[PlanInstance],
    mask: str,
    classifier: Optional[TaskClassifier] = None,
    seed: int = 0,
) -> float:
    ctx = PlanningContext(model=model, schedule=schedule, layout=layout, table=table, classifier=classifier)
    cfg = SamplerConfig(
        sampler=DDIM,
        eta=0.0,
        mask=mask,
        task_source=CLASSIFIER_TASKS if classifier is not None else ORACLE_TASKS,
        seed=seed,
    )
    samples = sample_plans(instances, ctx, cfg)
    return score_plans([s.actions for s in samples], [x.actions for x in instances]).success_rate


def train_diffusion(
    instances: Sequence[PlanInstance],
    layout: StateLayout,
    table: np.ndarray,
    unet_config: UNetConfig,
    cfg: TrainConfig,
    out_dir: Optional[Path] = None,
    posteriors: Optional[np.ndarray] = None,
    classifier: Optional[TaskClassifier] = None,
    eval_instances: Optional[Sequence[PlanInstance]] = None,
    config_hash: Optional[str] = None,
    progress: bool = False,
) -> DiffusionRun:
    """Stage two: ground-truth tasks and masks, one random step per batch element."""
    if not instances:
        raise ValueError("cannot train the denoiser on an empty set")
    check_provenance(instances)
    cfg.validate()
    schedule = make_schedule(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end)
    model = DenoisingUNet(unet_config)
    optimizer = Adam(list(model.named_parameters()), lr=cfg.lr_schedule().base_lr)
    tasks = np.array([x.task for x in instances], dtype=np.int64)
    masks = _instance_masks(cfg.mask, table, tasks, posteriors)
    rng = rng_stream(cfg.seed, "diffusion-batches")
    eval_set = list(eval_instances or [])[: cfg.eval_instances]
    run = DiffusionRun(model=model, schedule=schedule)
    window: List[float] = []
    logger.info(
        "Training denoiser: %d instances, %d steps, N=%d, %s mask, %d parameters",
        len(instances),
        cfg.steps,
        cfg.diffusion_steps,
        cfg.mask,
        model.num_parameters(),
    )
    try:
        for step in tqdm(range(1, cfg.steps + 1), desc="diffusion", disable=not progress):
            lr = lr_at(step, cfg)
            idx = rng.integers(0, len(instances), size=min(cfg.batch_size, len(instances)))
            batch = [instances[i] for i in idx]
            loss = train_step(batch, model, schedule, masks[idx], cfg, optimizer, layout, rng, lr, step)
            window.append(loss)
            run.final_loss = loss
            if step % cfg.log_every == 0 or step == cfg.steps:
                row: Dict[str, Any] = {"step": step, "loss": float(np.mean(window)), "lr": lr}
                if eval_set and cfg.eval_every and (step % cfg.eval_every == 0 or step == cfg.steps):
                    row["eval_SR"] = curve_success_rate(
                        model, schedule, layout, table, eval_set, cfg.mask, classifier, cfg.seed
                    )
                run.curve.append(row)
                logger.debug("diffusion step %d loss %.5f lr %.3g", step, row["loss"], lr)
                window = []
            if out_dir is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                save_unet(out_dir / f"unet-step{step:06d}.ckpt", model, _checkpoint_extra(step, layout, schedule), config_hash)
        if out_dir is not None:
            save_unet(out_dir / "unet.ckpt", model, _checkpoint_extra(cfg.steps, layout, schedule), config_hash)
    except CheckpointError:
        logger.error("Checkpoint write failed; earlier checkpoints and the curve so far are kept")
        raise
    finally:
        if out_dir is not None and run.curve:
            _write_curve(out_dir / "curve.csv", run.curve, config_hash)
    logger.info("Denoiser done: final loss %.5f", run.final_loss)
    return run


@dataclass
class TrainingResult:
    classifier: TaskClassifier
    classifier_report: ClassifierReport
    diffusion: DiffusionRun
    table: np.ndarray


def run_training(
    instances: Sequence[PlanInstance],
    layout: StateLayout,
    classifier_config: ClassifierConfig,
    classifier_train: ClassifierTrainConfig,
    unet_config: UNetConfig,
    cfg: TrainConfig,
    out_dir: Optional[Path] = None,
    eval_instances: Optional[Sequence[PlanInstance]] = None,
    config_hash: Optional[str] = None,
    progress: bool = False,
) -> TrainingResult:
    check_provenance(instances)
    classifier, report = train_classifier(instances, classifier_config, classifier_train, eval_instances, progress)
    masks = build_task_masks(instances, layout.num_tasks, layout.num_actions)
    table = mask_table(masks)
    if out_dir is not None:
        save_classifier(out_dir / "classifier.ckpt", classifier, {"report": report.to_dict()}, config_hash)
        save_mask_table(out_dir / "masks.json", masks, config_hash)
    posteriors = None
    if cfg.mask == SOFT:
        posteriors = classifier.classify(
            np.stack([x.obs_start for x in instances]), np.stack([x.obs_goal for x in instances])
        ).posterior
    run = train_diffusion(
        instances,
        layout,
        table,
        unet_config,
        cfg,
        out_dir=out_dir,
        posteriors=posteriors,
        classifier=classifier,
        eval_instances=eval_instances,
        config_hash=config_hash,
        progress=progress,
    )
    return TrainingResult(classifier=classifier, classifier_report=report, diffusion=run, table=table)
