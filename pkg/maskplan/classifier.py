"""Stage-one task classifier over the concatenated start and goal observations."""

from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from .checkpoint import CLASSIFIER_MAGIC, load_checkpoint, save_checkpoint
from .configuration import config_dict
from .nn import LayerNorm, Linear, Module, parameter
from .optim import Adam, LRSchedule, TrainingDivergedError, clip_grad_norm, gradients_by_name, scheduled_lr
from .streams import rng_stream
from .tensor import Tensor, add, backward, concat, cross_entropy, gelu, matmul, no_grad, reshape, softmax, transpose
from .world import PlanInstance

logger = logging.getLogger(__name__)

MLP = "mlp"
TRANSFORMER = "transformer"
VARIANTS = (MLP, TRANSFORMER)


@dataclass(frozen=True)
class ClassifierConfig:
    obs_dim: int
    num_tasks: int
    variant: str = MLP
    hidden: Tuple[int, ...] = (128,)
    num_tokens: int = 4
    token_dim: int = 32
    num_layers: int = 1
    use_text: bool = True
    visual_dim: int = 64
    seed: int = 0

    @property
    def input_dim(self) -> int:
        return 2 * self.obs_dim

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown classifier variant '{self.variant}', expected one of {VARIANTS}")
        if self.obs_dim < 1 or self.num_tasks < 1:
            raise ValueError("obs_dim and num_tasks must be positive")
        if self.num_tokens < 1 or self.token_dim < 1 or self.num_layers < 0:
            raise ValueError("token layout must be positive")
        if not self.use_text and not 0 < self.visual_dim <= self.obs_dim:
            raise ValueError(f"visual_dim {self.visual_dim} outside observation width {self.obs_dim}")


@dataclass(frozen=True)
class ClassifierTrainConfig:
    steps: int = 2000
    batch_size: int = 64
    base_lr: float = 1e-3
    warmup_steps: int = 100
    milestones: Tuple[int, ...] = ()
    decay_factor: float = 0.5
    lr_floor: float = 0.0
    max_grad_norm: Optional[float] = None
    seed: int = 0

    def validate(self) -> None:
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be >= 1")
        if self.warmup_steps > self.steps:
            raise ValueError(f"warmup_steps {self.warmup_steps} exceeds steps {self.steps}")

    def lr_schedule(self) -> LRSchedule:
        return LRSchedule(self.base_lr, self.warmup_steps, self.milestones, self.decay_factor, self.lr_floor)


@dataclass(frozen=True)
class Classification:
    posterior: np.ndarray
    labels: np.ndarray


@dataclass
class ClassifierReport:
    steps: int
    final_loss: float
    accuracy: float
    per_horizon: Dict[int, float] = field(default_factory=dict)
    losses: List[float] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "steps": self.steps,
            "final_loss": self.final_loss,
            "accuracy": self.accuracy,
            "per_horizon": {str(k): v for k, v in sorted(self.per_horizon.items())},
        }


class MLPHead(Module):
    def __init__(self, config: ClassifierConfig, rng: np.random.Generator) -> None:
        widths = (config.input_dim,) + tuple(config.hidden)
        self.layers = [Linear(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]
        self.head = Linear(widths[-1], config.num_tasks, rng)

    def __call__(self, x: Tensor) -> Tensor:
        h = x
        for layer in self.layers:
            h = gelu(layer(h))
        return self.head(h)


class AttentionLayer(Module):
    """Pre-norm single-head self-attention followed by a GELU feed-forward."""

    def __init__(self, dim: int, rng: np.random.Generator) -> None:
        self.norm1 = LayerNorm(dim)
        self.query = Linear(dim, dim, rng)
        self.key = Linear(dim, dim, rng)
        self.value = Linear(dim, dim, rng)
        self.proj = Linear(dim, dim, rng)
        self.norm2 = LayerNorm(dim)
        self.ff1 = Linear(dim, dim * 2, rng)
        self.ff2 = Linear(dim * 2, dim, rng)
        self._scale = 1.0 / math.sqrt(dim)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.norm1(x)
        q, k, v = self.query(h), self.key(h), self.value(h)
        scores = matmul(q, transpose(k, (0, 2, 1))) * self._scale
        x = x + self.proj(matmul(softmax(scores, axis=-1), v))
        return x + self.ff2(gelu(self.ff1(self.norm2(x))))


class TokenTransformer(Module):
    """Cuts the feature vector into ``num_tokens`` equal chunks (zero-padded) and attends over them."""

    def __init__(self, config: ClassifierConfig, rng: np.random.Generator) -> None:
        self._chunk = math.ceil(config.input_dim / config.num_tokens)
        self._tokens = config.num_tokens
        d = config.token_dim
        self.embed = Linear(self._chunk, d, rng)
        self.cls_token = parameter(rng.normal(0.0, 0.02, (1, 1, d)), "cls_token")
        self.positions = parameter(rng.normal(0.0, 0.02, (config.num_tokens + 1, d)), "positions")
        self.layers = [AttentionLayer(d, rng) for _ in range(config.num_layers)]
        self.norm = LayerNorm(d)
        self.head = Linear(d, config.num_tasks, rng)

    def __call__(self, x: Tensor) -> Tensor:
        batch, width = x.shape
        padded = self._tokens * self._chunk
        if padded > width:
            x = concat([x, Tensor(np.zeros((batch, padded - width)))], axis=1)
        # [B, K, chunk] -> [B, K, d]
        tokens = self.embed(reshape(x, (batch, self._tokens, self._chunk)))
        cls = add(Tensor(np.zeros((batch, 1, tokens.shape[2]))), self.cls_token)
        h = concat([cls, tokens], axis=1) + self.positions
        for layer in self.layers:
            h = layer(h)
        return self.head(self.norm(h)[:, 0, :])


class TaskClassifier(Module):
    def __init__(self, config: ClassifierConfig) -> None:
        config.validate()
        rng = rng_stream(config.seed, "classifier-init", config.variant)
        self.net = MLPHead(config, rng) if config.variant == MLP else TokenTransformer(config, rng)
        self._config = config

    @property
    def config(self) -> ClassifierConfig:
        return self._config

    def features(self, obs_start: np.ndarray, obs_goal: np.ndarray) -> np.ndarray:
        obs_start, obs_goal = np.atleast_2d(obs_start), np.atleast_2d(obs_goal)
        if obs_start.shape[1] != self._config.obs_dim or obs_goal.shape[1] != self._config.obs_dim:
            raise ValueError(
                f"observation width {obs_start.shape[1]}/{obs_goal.shape[1]} does not match {self._config.obs_dim}"
            )
        if not (np.all(np.isfinite(obs_start)) and np.all(np.isfinite(obs_goal))):
            raise ValueError("non-finite observation passed to the classifier")
        if not self._config.use_text:
            obs_start = obs_start.copy()
            obs_goal = obs_goal.copy()
            obs_start[:, self._config.visual_dim :] = 0.0
            obs_goal[:, self._config.visual_dim :] = 0.0
        return np.concatenate([obs_start, obs_goal], axis=1)

    def logits(self, obs_start: np.ndarray, obs_goal: np.ndarray) -> Tensor:
        return self.net(Tensor(self.features(obs_start, obs_goal)))

    def classify(self, obs_start: np.ndarray, obs_goal: np.ndarray) -> Classification:
        """Task posterior and argmax label (ties go to the lowest task id)."""
        with no_grad():
            posterior = softmax(self.logits(obs_start, obs_goal), axis=-1).data
        return Classification(posterior=posterior, labels=np.argmax(posterior, axis=1))


def _stack_obs(instances: Sequence[PlanInstance]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    return (
        np.stack([x.obs_start for x in instances]),
        np.stack([x.obs_goal for x in instances]),
        np.array([x.task for x in instances], dtype=np.int64),
    )


def classifier_accuracy(model: TaskClassifier, instances: Sequence[PlanInstance]) -> Tuple[float, Dict[int, float]]:
    """Overall and per-horizon accuracy of the argmax label."""
    if not instances:
        return 0.0, {}
    obs_start, obs_goal, tasks = _stack_obs(instances)
    correct = model.classify(obs_start, obs_goal).labels == tasks
    by_horizon: Dict[int, List[bool]] = defaultdict(list)
    for instance, hit in zip(instances, correct):
        by_horizon[instance.horizon].append(bool(hit))
    return float(correct.mean()), {h: float(np.mean(v)) for h, v in sorted(by_horizon.items())}


def train_classifier(
    instances: Sequence[PlanInstance],
    config: ClassifierConfig,
    train_config: ClassifierTrainConfig,
    eval_instances: Optional[Sequence[PlanInstance]] = None,
    progress: bool = False,
) -> Tuple[TaskClassifier, ClassifierReport]:
    """Cross-entropy training with the warm-up / step-decay schedule."""
    if not instances:
        raise ValueError("cannot train the classifier on an empty set")
    if any(x.split == "test" for x in instances):
        raise ValueError("test-split instances passed to classifier training")
    train_config.validate()
    model = TaskClassifier(config)
    named = list(model.named_parameters())
    optimizer = Adam(named, lr=train_config.base_lr)
    schedule = train_config.lr_schedule()
    obs_start, obs_goal, tasks = _stack_obs(instances)
    rng = rng_stream(train_config.seed, "classifier-batches")
    losses: List[float] = []
    logger.info(
        "Training %s classifier: %d instances, %d steps, %d parameters",
        config.variant,
        len(instances),
        train_config.steps,
        model.num_parameters(),
    )
    for step in tqdm(range(1, train_config.steps + 1), desc="classifier", disable=not progress):
        lr = scheduled_lr(step, schedule)
        idx = rng.integers(0, len(instances), size=min(train_config.batch_size, len(instances)))
        loss = cross_entropy(model.logits(obs_start[idx], obs_goal[idx]), tasks[idx])
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDivergedError("classifier", step, lr, value)
        grads = gradients_by_name(named, backward(loss))
        clip_grad_norm(grads, train_config.max_grad_norm)
        optimizer.step(grads, lr)
        losses.append(value)
        if step % 500 == 0:
            logger.debug("classifier step %d loss %.5f lr %.3g", step, value, lr)
    if eval_instances is not None and not eval_instances:
        logger.warning("Empty evaluation set; classifier accuracy reported as 0")
    accuracy, per_horizon = classifier_accuracy(model, instances if eval_instances is None else eval_instances)
    report = ClassifierReport(
        steps=train_config.steps, final_loss=losses[-1], accuracy=accuracy, per_horizon=per_horizon, losses=losses
    )
    logger.info("Classifier done: loss %.4f accuracy %.4f", report.final_loss, accuracy)
    return model, report


def classifier_config_from_dict(raw: Dict[str, Any]) -> ClassifierConfig:
    values = dict(raw)
    values["hidden"] = tuple(int(h) for h in values.get("hidden", (128,)))
    return ClassifierConfig(**values)


def save_classifier(
    path: Union[str, Path],
    model: TaskClassifier,
    extra: Optional[Dict[str, Any]] = None,
    config_hash: Optional[str] = None,
) -> None:
    save_checkpoint(
        Path(path), CLASSIFIER_MAGIC, model.state_dict(), config_dict(model.config), extra=extra, config_hash=config_hash
    )


def load_classifier(path: Union[str, Path]) -> Tuple[TaskClassifier, Dict[str, Any]]:
    checkpoint = load_checkpoint(Path(path), CLASSIFIER_MAGIC)
    model = TaskClassifier(classifier_config_from_dict(checkpoint.config))
    model.load_state_dict(checkpoint.params)
    return model, checkpoint.extra
