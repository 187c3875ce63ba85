"""Parameter containers and the layers used by the model zoo and GANs."""

from __future__ import annotations

import math

import numpy as np

from . import functional as F
from .core import Tensor


class Module:
    """Holds named parameters and child modules in registration order."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: checkpoint shape {arr.shape} != parameter shape {p.shape}")
            p.data = arr.copy()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


def _he_normal(rng, shape, fan_in) -> Tensor:
    return Tensor(rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.weight = _he_normal(rng, (n_out, n_in), n_in)
        self.bias = _zeros((n_out,)) if bias else None

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, c_in, c_out, k, rng, stride=1, pad=0):
        super().__init__()
        self.stride, self.pad = stride, pad
        self.weight = _he_normal(rng, (k, k, c_in, c_out), c_in * k * k)
        self.bias = _zeros((c_out,))

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias, self.stride, self.pad)


class ConvTranspose2d(Module):
    def __init__(self, c_in, c_out, k, rng, stride=1, pad=0, output_padding=0):
        super().__init__()
        self.stride, self.pad, self.output_padding = stride, pad, output_padding
        # each output pixel sees about c_in * k * k / stride**2 inputs
        fan_in = max(1, c_in * k * k // (stride * stride))
        self.weight = _he_normal(rng, (c_in, k, k, c_out), fan_in)
        self.bias = _zeros((c_out,))

    def forward(self, x):
        return F.conv_transpose2d(
            x, self.weight, self.bias, self.stride, self.pad, self.output_padding
        )
