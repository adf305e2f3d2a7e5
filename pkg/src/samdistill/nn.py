"""Parameter containers and the handful of layers the toy networks need."""

from __future__ import annotations

import hashlib
from math import prod, sqrt

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Tensor


class Module:
    """Attribute-walking parameter registry.

    Every ``Tensor`` attribute is a parameter (constants are kept as plain
    arrays); child modules may be attributes, lists or dicts of modules.
    """

    frozen = False

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                out[name] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(name + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{name}.{i}."))
            elif isinstance(val, dict):
                for k, item in val.items():
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{name}.{k}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str = "") -> None:
        params = self.named_parameters()
        missing = [k for k in params if prefix + k not in state]
        if missing:
            raise ConfigError(f"checkpoint lacks parameters: {missing[:5]}")
        for k, p in params.items():
            arr = np.asarray(state[prefix + k], dtype=np.float64)
            if arr.shape != p.shape:
                raise DimensionError(f"parameter {k}: checkpoint shape {arr.shape} != model {p.shape}")
            p.data = arr.copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def freeze(self) -> None:
        """Stop gradient tracking for every parameter."""
        for p in self.parameters():
            p.requires_grad = False
        self.frozen = True

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, p in sorted(self.named_parameters().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()


def param(arr: np.ndarray, name: str | None = None) -> Tensor:
    return Tensor(arr, requires_grad=True, name=name)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True, std: float | None = None):
        std = sqrt(2.0 / n_in) if std is None else std
        self.weight = param(rng.normal(0.0, std, (n_out, n_in)))
        self.bias = param(np.zeros(n_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight.T)
        return y + self.bias if self.bias is not None else y


class Conv(Module):
    """N-d convolution; ``kernel``/``stride`` may differ per axis."""

    def __init__(self, n_in: int, n_out: int, kernel, rng: np.random.Generator, stride=1, padding=None, ndim: int = 2):
        kernel = (kernel,) * ndim if isinstance(kernel, int) else tuple(kernel)
        self.stride = (stride,) * ndim if isinstance(stride, int) else tuple(stride)
        self.padding = tuple(k // 2 for k in kernel) if padding is None else padding
        fan_in = n_in * prod(kernel)
        self.weight = param(rng.normal(0.0, sqrt(2.0 / fan_in), (n_out, n_in) + kernel))
        self.bias = param(np.zeros(n_out))

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv(x, self.weight, self.bias, self.stride, self.padding)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gamma = param(np.ones(dim))
        self.beta = param(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta)
