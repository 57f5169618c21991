"""Parameter containers and layers."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import DEFAULT_DTYPE, Tensor


class Parameter(Tensor):
    """A named leaf tensor; gradients are recorded only while ``trainable``."""

    def __init__(self, data, name: str = "", trainable: bool = True, dtype=None):
        super().__init__(data, requires_grad=trainable, dtype=dtype)
        self.name = name

    @property
    def trainable(self) -> bool:
        return self.requires_grad

    @trainable.setter
    def trainable(self, value: bool) -> None:
        self.requires_grad = bool(value)
        if not value:
            self.grad = None

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


class Module:
    training = True

    def __init__(self):
        self._buffers: dict[str, np.ndarray] = {}

    def forward(self, x):
        raise NotImplementedError

    def __call__(self, x):
        return self.forward(x)

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, buf in getattr(self, "_buffers", {}).items():
            yield prefix + name, buf
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def assign_names(self) -> None:
        for name, p in self.named_parameters():
            p.name = name

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = {name for name, _ in self.named_parameters()} | {name for name, _ in self.named_buffers()}
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise KeyError(f"state mismatch: missing {missing}, unexpected {extra}")
        for name, p in self.named_parameters():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=p.dtype)
        for name, b in self.named_buffers():
            b[...] = state[name]


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, stride: int = 1,
                 pad: int = 0, bias: bool = True, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.stride, self.pad = stride, pad
        self.weight = Parameter(he_uniform(rng, (cout, cin, k, k), cin * k * k, dtype))
        self.bias = Parameter(np.zeros(cout, dtype=dtype)) if bias else None

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias, self.stride, self.pad)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.weight = Parameter(he_uniform(rng, (n_in, n_out), n_in, dtype))
        self.bias = Parameter(np.zeros(n_out, dtype=dtype))

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))
        self._buffers = {
            "running_mean": np.zeros(channels, dtype=dtype),
            "running_var": np.ones(channels, dtype=dtype),
        }

    def forward(self, x):
        return F.batchnorm2d(x, self.gamma, self.beta, self._buffers["running_mean"],
                             self._buffers["running_var"], self.training, self.momentum, self.eps)


class ReLU(Module):
    def forward(self, x):
        return F.relu(x)


class MaxPool2d(Module):
    def __init__(self, k: int = 2):
        super().__init__()
        self.k = k

    def forward(self, x):
        return F.maxpool2d(x, self.k)


class Flatten(Module):
    def forward(self, x):
        return F.flatten(x)


class GlobalAvgPool(Module):
    def forward(self, x):
        return F.global_avg_pool(x)


class Sequential(Module):
    def __init__(self, *layers: Module):
        super().__init__()
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


class ResidualBlock(Module):
    """conv3x3-BN-ReLU-conv3x3-BN plus skip, ReLU after the sum.

    The skip is the identity when shapes agree, else a strided 1x1
    convolution followed by batch norm.
    """

    def __init__(self, cin: int, cout: int, stride: int, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.conv1 = Conv2d(cin, cout, 3, rng, stride=stride, pad=1, bias=False, dtype=dtype)
        self.bn1 = BatchNorm2d(cout, dtype=dtype)
        self.conv2 = Conv2d(cout, cout, 3, rng, stride=1, pad=1, bias=False, dtype=dtype)
        self.bn2 = BatchNorm2d(cout, dtype=dtype)
        self.proj = None
        if stride != 1 or cin != cout:
            self.proj = Sequential(Conv2d(cin, cout, 1, rng, stride=stride, bias=False, dtype=dtype),
                                   BatchNorm2d(cout, dtype=dtype))

    def forward(self, x):
        out = self.bn2(self.conv2(F.relu(self.bn1(self.conv1(x)))))
        skip = self.proj(x) if self.proj is not None else x
        return F.relu(out + skip)


class PCENFrontend(Module):
    """Per-channel energy normalization with trainable alpha, delta and r."""

    def __init__(self, n_bands: int, groups: int = 1, alpha: float = 0.98, delta: float = 2.0,
                 r: float = 0.5, s: float = 0.025, eps: float = 1e-6, dtype=DEFAULT_DTYPE):
        super().__init__()
        if not 1 <= groups <= n_bands:
            raise ValueError(f"need 1 <= groups <= n_bands, got {groups} for {n_bands} bands")
        self.s, self.eps = s, eps
        self.band_group = (np.arange(n_bands) * groups) // n_bands
        self.alpha = Parameter(np.full(groups, alpha, dtype=dtype))
        self.delta = Parameter(np.full(groups, delta, dtype=dtype))
        self.r = Parameter(np.full(groups, r, dtype=dtype))

    def forward(self, x):
        return F.pcen(x, self.alpha, self.delta, self.r, self.s, self.eps, self.band_group)
