"""Minimal layer library on top of the tensor engine: convolutions, linear
maps, per-channel instance normalization with learnable affine, and a tiny
module system for parameter bookkeeping and checkpointing.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor

LEAKY_SLOPE = 0.2


class Module:
    """Named-parameter container; children register themselves on assignment."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        elif isinstance(value, (list, tuple)) and value and all(
            isinstance(v, Module) for v in value
        ):
            for i, v in enumerate(value):
                self._children[f"{name}.{i}"] = v
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {}
        for name, p in self._params.items():
            out[f"{prefix}{name}"] = p
        for name, child in self._children.items():
            out.update(child.named_parameters(f"{prefix}{name}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def load_state(self, state: dict[str, np.ndarray], prefix: str = ""):
        for name, p in self.named_parameters(prefix).items():
            if name not in state:
                raise KeyError(f"missing parameter {name!r} in state")
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(
                    f"shape mismatch for {name!r}: file {arr.shape}, model {p.shape}"
                )
            p.data = arr.copy()

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}


def kaiming(rng: np.random.Generator, shape, fan_in: int, slope: float = LEAKY_SLOPE):
    std = np.sqrt(2.0 / ((1.0 + slope * slope) * fan_in))
    return rng.standard_normal(shape) * std


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int = 3, stride: int = 1,
                 rng: np.random.Generator | None = None, zero_init: bool = False):
        super().__init__()
        self.stride = stride
        if zero_init:
            w = np.zeros((cout, cin, k, k))
        else:
            w = kaiming(rng, (cout, cin, k, k), cin * k * k)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, stride=self.stride, bias=self.bias)


class Linear(Module):
    def __init__(self, fin: int, fout: int, rng: np.random.Generator | None = None,
                 zero_init: bool = False):
        super().__init__()
        w = np.zeros((fin, fout)) if zero_init else kaiming(rng, (fin, fout), fin)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(fout), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        out = T.matmul(x, self.weight)
        b = T.broadcast_to(T.reshape(self.bias, (1, out.shape[1])), out.shape)
        return out + b


class InstanceNorm2d(Module):
    """Per-sample, per-channel spatial normalization with learnable affine.

    Batch-size independent and identical in train and eval, which keeps
    every forward pass deterministic.
    """

    EPS = 1e-5

    def __init__(self, channels: int):
        super().__init__()
        self.gain = Tensor(np.ones(channels), requires_grad=True)
        self.shift = Tensor(np.zeros(channels), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        normed = T.instance_norm(x, self.EPS)
        return T.channel_affine(normed, self.gain, self.shift)


class ConvBlock(Module):
    """Conv -> instance norm -> leaky ReLU."""

    def __init__(self, cin: int, cout: int, rng, stride: int = 1, k: int = 3):
        super().__init__()
        self.conv = Conv2d(cin, cout, k=k, stride=stride, rng=rng)
        self.norm = InstanceNorm2d(cout)

    def __call__(self, x: Tensor) -> Tensor:
        return T.leaky_relu(self.norm(self.conv(x)), LEAKY_SLOPE)


def global_average_pool(x: Tensor) -> Tensor:
    """(N,C,H,W) -> (N,C) spatial mean."""
    return T.reduce_mean(x, axes=(-2, -1))
