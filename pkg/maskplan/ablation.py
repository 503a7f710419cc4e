"""Mask-kind by action-space-size sweep with paired seeds."""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .artifacts import write_csv
from .classifier import ClassifierConfig, ClassifierTrainConfig, train_classifier
from .masking import HARD, NONE, SOFT, StateLayout, build_task_masks, mask_table
from .planner import DDIM, PlanningContext, SamplerConfig, evaluate
from .trainer import TrainConfig, train_diffusion
from .unet import UNetConfig
from .world import WorldSpec, generate_world, sample_dataset, split_dataset

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AblationConfig:
    action_sizes: Tuple[int, ...] = (20, 60, 120)
    actions_per_task: int = 4
    mask_kinds: Tuple[str, ...] = (HARD, NONE, SOFT)
    seeds: Tuple[int, ...] = (0, 1, 2, 3, 4)
    horizon: int = 3
    videos: int = 600
    split_ratio: float = 0.7
    classifier_steps: int = 1000
    train_steps: int = 2000
    batch_size: int = 64
    diffusion_steps: int = 50
    channels: Tuple[int, ...] = (32, 64, 128)
    sampler: str = DDIM
    eval_limit: int = 500

    def validate(self) -> None:
        for size in self.action_sizes:
            if size % self.actions_per_task:
                raise ValueError(f"action size {size} is not a multiple of {self.actions_per_task}")
        if not self.seeds or not self.mask_kinds:
            raise ValueError("need at least one seed and one mask kind")


@dataclass(frozen=True)
class AblationCell:
    mask: str
    num_actions: int
    seed: int
    success_rate: float
    mean_accuracy: float
    mean_iou: float


@dataclass
class AblationReport:
    cells: List[AblationCell] = field(default_factory=list)

    def mean_sr(self, mask: str, num_actions: int) -> float:
        values = [c.success_rate for c in self.cells if c.mask == mask and c.num_actions == num_actions]
        return float(np.mean(values)) if values else float("nan")

    def gaps(self) -> Dict[int, float]:
        """Hard minus none mean SR per action-space size."""
        sizes = sorted({c.num_actions for c in self.cells})
        return {size: self.mean_sr(HARD, size) - self.mean_sr(NONE, size) for size in sizes}

    def matrix(self) -> Dict[str, Dict[int, float]]:
        table: Dict[str, Dict[int, float]] = defaultdict(dict)
        for cell in self.cells:
            table[cell.mask][cell.num_actions] = self.mean_sr(cell.mask, cell.num_actions)
        return dict(table)


def ablation_world_spec(cfg: AblationConfig, num_actions: int, seed: int) -> WorldSpec:
    return WorldSpec(
        num_tasks=num_actions // cfg.actions_per_task,
        actions_per_task=cfg.actions_per_task,
        procedure_length=cfg.actions_per_task,
        horizon=cfg.horizon,
        seed=seed,
    )


def run_ablation(
    cfg: AblationConfig,
    out_dir: Optional[Path] = None,
    config_hash: Optional[str] = None,
    progress: bool = False,
) -> AblationReport:
    cfg.validate()
    report = AblationReport()
    for num_actions in cfg.action_sizes:
        for seed in cfg.seeds:
            spec = ablation_world_spec(cfg, num_actions, seed)
            world = generate_world(spec)
            train, test = split_dataset(sample_dataset(world, cfg.videos, seed=seed), cfg.split_ratio, seed)
            layout = StateLayout.for_world(world)
            classifier, _ = train_classifier(
                train,
                ClassifierConfig(obs_dim=spec.obs_dim, num_tasks=spec.num_tasks, visual_dim=spec.visual_dim, seed=seed),
                ClassifierTrainConfig(steps=cfg.classifier_steps, batch_size=cfg.batch_size, seed=seed),
                progress=progress,
            )
            table = mask_table(build_task_masks(train, layout.num_tasks, layout.num_actions))
            posteriors = classifier.classify(
                np.stack([x.obs_start for x in train]), np.stack([x.obs_goal for x in train])
            ).posterior
            for kind in cfg.mask_kinds:
                train_cfg = TrainConfig(
                    steps=cfg.train_steps,
                    batch_size=cfg.batch_size,
                    warmup_steps=min(500, cfg.train_steps),
                    milestones=(),
                    diffusion_steps=cfg.diffusion_steps,
                    mask=kind,
                    seed=seed,
                )
                run = train_diffusion(
                    train,
                    layout,
                    table,
                    UNetConfig(input_dim=layout.dim, channels=cfg.channels, seed=seed),
                    train_cfg,
                    posteriors=posteriors if kind == SOFT else None,
                    progress=progress,
                )
                ctx = PlanningContext(run.model, run.schedule, layout, table, classifier)
                metrics = evaluate(test[: cfg.eval_limit], ctx, SamplerConfig(sampler=cfg.sampler, mask=kind, seed=seed))
                report.cells.append(
                    AblationCell(
                        mask=kind,
                        num_actions=num_actions,
                        seed=seed,
                        success_rate=metrics.plans.success_rate,
                        mean_accuracy=metrics.plans.mean_accuracy,
                        mean_iou=metrics.plans.mean_iou,
                    )
                )
                logger.info("Ablation L_a=%d seed=%d %s: SR %.4f", num_actions, seed, kind, metrics.plans.success_rate)
    if out_dir is not None:
        write_ablation(out_dir, report, config_hash)
    return report


def write_ablation(out_dir: Path, report: AblationReport, config_hash: Optional[str] = None) -> None:
    rows = [[c.mask, c.num_actions, c.seed, c.success_rate, c.mean_accuracy, c.mean_iou] for c in report.cells]
    write_csv(out_dir / "ablation.csv", ("mask", "num_actions", "seed", "SR", "mAcc", "mIoU"), rows, config_hash)
    gap_rows = [[size, gap] for size, gap in sorted(report.gaps().items())]
    write_csv(out_dir / "gap.csv", ("num_actions", "gap_hard_minus_none"), gap_rows, config_hash)
