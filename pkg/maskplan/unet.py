"""Three-level temporal U-Net predicting the clean state from a projected noisy state."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Union

import numpy as np

from .checkpoint import UNET_MAGIC, load_checkpoint, save_checkpoint
from .configuration import config_dict
from .nn import Conv1d, LayerNorm, Linear, Module
from .streams import rng_stream
from .tensor import Tensor, as_tensor, concat, gelu, no_grad, reshape

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class UNetConfig:
    input_dim: int
    channels: Tuple[int, ...] = (32, 64, 128)
    kernel_size: int = 2
    step_embed_dim: int = 32
    seed: int = 0

    def validate(self) -> None:
        if self.input_dim < 1:
            raise ValueError(f"input_dim must be >= 1, got {self.input_dim}")
        if len(self.channels) != 3 or min(self.channels) < 1:
            raise ValueError(f"channels must be three positive widths, got {self.channels}")
        if self.kernel_size < 1:
            raise ValueError(f"kernel_size must be >= 1, got {self.kernel_size}")
        if self.step_embed_dim < 2 or self.step_embed_dim % 2:
            raise ValueError(f"step_embed_dim must be even and >= 2, got {self.step_embed_dim}")


def sinusoidal_embedding(steps: np.ndarray, dim: int) -> np.ndarray:
    steps = np.asarray(steps, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = steps[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


class StepEmbedding(Module):
    def __init__(self, dim: int, rng: np.random.Generator) -> None:
        self.fc1 = Linear(dim, dim * 2, rng)
        self.fc2 = Linear(dim * 2, dim, rng)
        self._dim = dim

    def __call__(self, steps: np.ndarray) -> Tensor:
        return self.fc2(gelu(self.fc1(Tensor(sinusoidal_embedding(steps, self._dim)))))


class TemporalBlock(Module):
    """conv(k, pad 0) then conv(k, pad k-1): the horizon shrinks by k-1 and grows back.

    Each conv is followed by per-channel normalization and GELU; the step embedding is added
    per channel between the two convolutions.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel: int, embed_dim: int, rng: np.random.Generator) -> None:
        self.down = Conv1d(in_channels, out_channels, kernel, rng, padding=0)
        self.norm1 = LayerNorm(out_channels, axis=1)
        self.step_proj = Linear(embed_dim, out_channels, rng)
        self.up = Conv1d(out_channels, out_channels, kernel, rng, padding=kernel - 1)
        self.norm2 = LayerNorm(out_channels, axis=1)
        self.residual = Conv1d(in_channels, out_channels, 1, rng) if in_channels != out_channels else None
        self._out_channels = out_channels

    def __call__(self, x: Tensor, embed: Tensor) -> Tensor:
        # [B, C_out, L - k + 1]
        h = gelu(self.norm1(self.down(x)))
        h = h + reshape(self.step_proj(embed), (embed.shape[0], self._out_channels, 1))
        # [B, C_out, L]
        h = gelu(self.norm2(self.up(h)))
        skip = self.residual(x) if self.residual is not None else x
        return h + skip


class DenoisingUNet(Module):
    def __init__(self, config: UNetConfig) -> None:
        config.validate()
        rng = rng_stream(config.seed, "unet-init")
        c0, c1, c2 = config.channels
        k, e = config.kernel_size, config.step_embed_dim
        self.step_embed = StepEmbedding(e, rng)
        self.down1 = TemporalBlock(config.input_dim, c0, k, e, rng)
        self.down2 = TemporalBlock(c0, c1, k, e, rng)
        self.down3 = TemporalBlock(c1, c2, k, e, rng)
        self.up2 = TemporalBlock(c2 + c1, c1, k, e, rng)
        self.up1 = TemporalBlock(c1 + c0, c0, k, e, rng)
        self.out = Conv1d(c0, config.input_dim, 1, rng)
        self._config = config

    @property
    def config(self) -> UNetConfig:
        return self._config

    def denoise(self, x_n: Union[Tensor, np.ndarray], n: Union[int, np.ndarray]) -> Tensor:
        """Clean-state estimate for a (B, D, T) projected state at step(s) ``n``."""
        x = as_tensor(x_n)
        if x.ndim != 3 or x.shape[1] != self._config.input_dim:
            raise ValueError(f"expected (B, {self._config.input_dim}, T) input, got {x.shape}")
        if x.shape[2] < self._config.kernel_size:
            raise ValueError(f"horizon {x.shape[2]} shorter than kernel {self._config.kernel_size}")
        steps = np.broadcast_to(np.asarray(n), (x.shape[0],))
        embed = self.step_embed(steps)
        h1 = self.down1(x, embed)
        h2 = self.down2(h1, embed)
        h3 = self.down3(h2, embed)
        # [B, c2 + c1, T] -> [B, c1, T]
        u2 = self.up2(concat([h3, h2], axis=1), embed)
        u1 = self.up1(concat([u2, h1], axis=1), embed)
        return self.out(u1)

    def predict(self, x_n: np.ndarray, n: Union[int, np.ndarray]) -> np.ndarray:
        with no_grad():
            return self.denoise(x_n, n).data


def unet_config_from_dict(raw: Mapping[str, Any]) -> UNetConfig:
    return UNetConfig(
        input_dim=int(raw["input_dim"]),
        channels=tuple(int(c) for c in raw.get("channels", (32, 64, 128))),
        kernel_size=int(raw.get("kernel_size", 2)),
        step_embed_dim=int(raw.get("step_embed_dim", 32)),
        seed=int(raw.get("seed", 0)),
    )


def save_unet(
    path: Path,
    model: DenoisingUNet,
    extra: Optional[Dict[str, Any]] = None,
    config_hash: Optional[str] = None,
) -> None:
    save_checkpoint(
        path, UNET_MAGIC, model.state_dict(), config_dict(model.config), extra=extra, config_hash=config_hash
    )


def load_unet(path: Path) -> Tuple[DenoisingUNet, Dict[str, Any]]:
    checkpoint = load_checkpoint(path, UNET_MAGIC)
    model = DenoisingUNet(unet_config_from_dict(checkpoint.config))
    model.load_state_dict(checkpoint.params)
    logger.info("Loaded denoiser from %s (%d parameters)", path, model.num_parameters())
    return model, checkpoint.extra
