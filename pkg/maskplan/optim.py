"""Adam with bias correction and the warm-up / step-decay learning-rate family."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np

from .tensor import Tensor

logger = logging.getLogger(__name__)


class NonFiniteGradientError(FloatingPointError):
    """A gradient entry is NaN or infinite."""


class TrainingDivergedError(RuntimeError):
    """The training loss became NaN or infinite."""

    def __init__(self, stage: str, step: int, lr: float, loss: float) -> None:
        super().__init__(f"{stage} training diverged at step {step} (lr={lr:.3g}, loss={loss})")
        self.stage = stage
        self.step = step
        self.lr = lr
        self.loss = loss


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: Optional[float] = None,
) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; returns new parameter arrays and the advanced state."""
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            raise NonFiniteGradientError(f"non-finite gradient for parameter '{name}'")
    rate = state.lr if lr is None else lr
    step = state.step + 1
    m: Dict[str, np.ndarray] = {}
    v: Dict[str, np.ndarray] = {}
    updated: Dict[str, np.ndarray] = {}
    for name, value in params.items():
        grad = np.asarray(grads.get(name, np.zeros_like(value)), dtype=np.float64)
        if grad.shape != value.shape:
            raise ValueError(f"gradient shape {grad.shape} does not match parameter '{name}' {value.shape}")
        m[name] = state.beta1 * state.m.get(name, np.zeros_like(value)) + (1.0 - state.beta1) * grad
        v[name] = state.beta2 * state.v.get(name, np.zeros_like(value)) + (1.0 - state.beta2) * grad**2
        m_hat = m[name] / (1.0 - state.beta1**step)
        v_hat = v[name] / (1.0 - state.beta2**step)
        updated[name] = value - rate * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = AdamState(
        lr=state.lr, beta1=state.beta1, beta2=state.beta2, eps=state.eps, step=step, m=m, v=v
    )
    return updated, new_state


class Adam:
    """Applies ``adam_step`` to a module's named parameters in place."""

    def __init__(
        self,
        named_params: Sequence[Tuple[str, Tensor]],
        lr: float = 1e-3,
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ) -> None:
        self.params = dict(named_params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def step(self, grads: Mapping[str, np.ndarray], lr: Optional[float] = None) -> None:
        values = {name: param.data for name, param in self.params.items()}
        updated, self.state = adam_step(values, grads, self.state, lr=lr)
        for name, param in self.params.items():
            param.data = updated[name]


def gradients_by_name(
    named_params: Sequence[Tuple[str, Tensor]], leaf_grads: Mapping[Tensor, np.ndarray]
) -> Dict[str, np.ndarray]:
    """Name the leaf gradients from ``backward``; unreached parameters get zeros."""
    return {
        name: leaf_grads.get(param, np.zeros_like(param.data)) for name, param in named_params
    }


def clip_grad_norm(grads: Dict[str, np.ndarray], max_norm: Optional[float]) -> float:
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``."""
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for name in grads:
            grads[name] = grads[name] * scale
    return total


@dataclass(frozen=True)
class LRSchedule:
    base_lr: float
    warmup_steps: int = 0
    milestones: Tuple[int, ...] = ()
    decay_factor: float = 0.5
    lr_floor: float = 0.0


# Published warm-up / decay regimes for the three benchmark-sized settings.
LR_PROFILES: Dict[str, LRSchedule] = {
    "crosstask": LRSchedule(base_lr=5e-4, warmup_steps=4000, milestones=(10000, 16000, 22000)),
    "niv": LRSchedule(base_lr=3e-4, warmup_steps=4500, milestones=(6000,)),
    "coin": LRSchedule(base_lr=1e-5, warmup_steps=4000, milestones=(14000, 24000), lr_floor=2.5e-6),
}


def scheduled_lr(step: int, schedule: LRSchedule) -> float:
    """Linear ramp 0 -> base over warm-up, then ``decay_factor`` at each passed milestone."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if schedule.warmup_steps > 0 and step < schedule.warmup_steps:
        return schedule.base_lr * step / schedule.warmup_steps
    passed = sum(1 for milestone in schedule.milestones if step >= milestone)
    rate = schedule.base_lr * schedule.decay_factor**passed
    return max(rate, schedule.lr_floor)
