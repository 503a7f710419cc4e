"""Noise schedule, forward process and the x0-parameterised reverse kernels (DDPM / DDIM).

Steps are 1-based: ``alpha_bar[0] == 1`` stands for the clean sample and ``alpha_bar[n]`` for
step ``n`` in ``1..N``. Every kernel consumes a predicted clean sample ``x0_hat``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Tuple, Union

import numpy as np

Step = Union[int, np.ndarray]


@dataclass(frozen=True)
class DiffusionSchedule:
    num_steps: int
    beta_start: float
    beta_end: float
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bar: np.ndarray

    def _at(self, values: np.ndarray, n: Step, ndim: int) -> np.ndarray:
        picked = values[np.asarray(n)]
        if np.ndim(picked) == 0:
            return picked
        return picked.reshape(picked.shape + (1,) * (ndim - picked.ndim))

    def posterior(self, n: Step, ndim: int = 0) -> "PosteriorParams":
        n_arr = np.asarray(n)
        if np.any(n_arr < 1) or np.any(n_arr > self.num_steps):
            raise ValueError(f"step out of range 1..{self.num_steps}: {n}")
        beta = self._at(self.betas, n_arr, ndim)
        alpha = self._at(self.alphas, n_arr, ndim)
        bar = self._at(self.alpha_bar, n_arr, ndim)
        bar_prev = self._at(self.alpha_bar, n_arr - 1, ndim)
        return PosteriorParams(
            coef_x0=np.sqrt(bar_prev) * beta / (1.0 - bar),
            coef_xn=np.sqrt(alpha) * (1.0 - bar_prev) / (1.0 - bar),
            variance=(1.0 - bar_prev) / (1.0 - bar) * beta,
        )

    def to_dict(self) -> dict:
        return {"num_steps": self.num_steps, "beta_start": self.beta_start, "beta_end": self.beta_end}


@dataclass(frozen=True)
class PosteriorParams:
    coef_x0: np.ndarray
    coef_xn: np.ndarray
    variance: np.ndarray


def make_schedule(num_steps: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> DiffusionSchedule:
    """Linear beta schedule of length ``num_steps``."""
    if num_steps < 2:
        raise ValueError(f"num_steps must be >= 2, got {num_steps}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, num_steps, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bar = np.concatenate([[1.0], np.cumprod(alphas)])
    return DiffusionSchedule(
        num_steps=num_steps,
        beta_start=beta_start,
        beta_end=beta_end,
        betas=np.concatenate([[0.0], betas]),
        alphas=np.concatenate([[1.0], alphas]),
        alpha_bar=alpha_bar,
    )


def q_sample(schedule: DiffusionSchedule, x0: np.ndarray, n: Step, noise: np.ndarray) -> np.ndarray:
    """Forward marginal ``sqrt(abar_n) x0 + sqrt(1 - abar_n) noise``.

    ``n`` may be a scalar or one step per leading-axis element. Callers pass masked noise.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    bar = schedule._at(schedule.alpha_bar, n, x0.ndim)
    return np.sqrt(bar) * x0 + np.sqrt(1.0 - bar) * noise


def predict_x0(schedule: DiffusionSchedule, x_n: np.ndarray, n: Step, noise: np.ndarray) -> np.ndarray:
    """Algebraic inverse of ``q_sample`` for a known noise draw."""
    bar = schedule._at(schedule.alpha_bar, n, np.ndim(x_n))
    return (x_n - np.sqrt(1.0 - bar) * noise) / np.sqrt(bar)


def posterior_mean(schedule: DiffusionSchedule, x_n: np.ndarray, x0_hat: np.ndarray, n: Step) -> np.ndarray:
    params = schedule.posterior(n, np.ndim(x_n))
    return params.coef_x0 * x0_hat + params.coef_xn * x_n


def posterior_step(
    schedule: DiffusionSchedule, x_n: np.ndarray, x0_hat: np.ndarray, n: int, noise: np.ndarray
) -> np.ndarray:
    """Ancestral step ``x_n -> x_{n-1}``; at ``n == 1`` the clean estimate is returned."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if n == 1:
        return np.array(x0_hat, dtype=np.float64, copy=True)
    params = schedule.posterior(n)
    mean = params.coef_x0 * x0_hat + params.coef_xn * x_n
    return mean + np.sqrt(params.variance) * noise


def ddim_step(
    schedule: DiffusionSchedule,
    x_n: np.ndarray,
    x0_hat: np.ndarray,
    n: int,
    n_prev: int,
    eta: float,
    noise: np.ndarray,
) -> np.ndarray:
    """Implicit step ``x_n -> x_{n_prev}``; ``eta = 0`` is deterministic, ``n_prev = 0`` returns ``x0_hat``."""
    if not 0 <= n_prev < n <= schedule.num_steps:
        raise ValueError(f"need 0 <= n_prev < n <= N, got n={n} n_prev={n_prev}")
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must be in [0, 1], got {eta}")
    if n_prev == 0:
        return np.array(x0_hat, dtype=np.float64, copy=True)
    bar = schedule.alpha_bar[n]
    bar_prev = schedule.alpha_bar[n_prev]
    eps = (x_n - np.sqrt(bar) * x0_hat) / np.sqrt(1.0 - bar)
    sigma = eta * np.sqrt((1.0 - bar_prev) / (1.0 - bar)) * np.sqrt(1.0 - bar / bar_prev)
    direction = np.sqrt(max(1.0 - bar_prev - sigma**2, 0.0)) * eps
    return np.sqrt(bar_prev) * x0_hat + direction + sigma * noise


def ddim_timesteps(num_steps: int, sampling_steps: int) -> List[Tuple[int, int]]:
    """Descending (n, n_prev) pairs over a uniform subsequence ending at the clean sample."""
    if not 1 <= sampling_steps <= num_steps:
        raise ValueError(f"sampling_steps must be in 1..{num_steps}, got {sampling_steps}")
    points = np.unique(np.round(np.linspace(0, num_steps, sampling_steps + 1)).astype(int))[::-1]
    return [(int(points[i]), int(points[i + 1])) for i in range(len(points) - 1)]
