"""Parameter containers and the handful of layers both networks are built from."""

from __future__ import annotations

from typing import Dict, Iterator, List, Mapping, Tuple

import numpy as np

from .tensor import Tensor, affine, conv1d, layer_norm


class Module:
    """Holds parameters as attributes; submodules may be attributes or lists of modules.

    ``named_parameters`` walks attributes in assignment order, which fixes the manifest order
    used by the optimizer and the checkpoint format.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            path = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for index, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{index}.")

    def parameters(self) -> List[Tensor]:
        return [param for _, param in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(param.size for param in self.parameters())

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: param.data.copy() for name, param in self.named_parameters()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(state))
        unexpected = sorted(set(state) - set(params))
        if missing or unexpected:
            raise ValueError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, param in params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != param.shape:
                raise ValueError(f"shape mismatch for {name}: {value.shape} vs {param.shape}")
            param.data = value.copy()


def parameter(data: np.ndarray, name: str) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator) -> None:
        scale = 1.0 / np.sqrt(in_features)
        self.weight = parameter(rng.normal(0.0, scale, (in_features, out_features)), "weight")
        self.bias = parameter(np.zeros(out_features), "bias")

    def __call__(self, x: Tensor) -> Tensor:
        return affine(x, self.weight, self.bias)


class Conv1d(Module):
    """Stride-1 temporal convolution over (batch, channels, horizon)."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        rng: np.random.Generator,
        padding: int = 0,
    ) -> None:
        scale = 1.0 / np.sqrt(in_channels * kernel_size)
        self.weight = parameter(
            rng.normal(0.0, scale, (out_channels, in_channels, kernel_size)), "weight"
        )
        self.bias = parameter(np.zeros(out_channels), "bias")
        self._padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return conv1d(x, self.weight, self.bias, padding=self._padding)


class LayerNorm(Module):
    def __init__(self, features: int, axis: int = -1) -> None:
        self.gamma = parameter(np.ones(features), "gamma")
        self.beta = parameter(np.zeros(features), "beta")
        self._axis = axis

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self._axis % x.ndim, self.gamma, self.beta)
