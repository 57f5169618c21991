"""Desk-scale model zoo.

* ``cnn_small``: two 5x5 conv/ReLU/max-pool stages, a 128-unit hidden layer
  and the classifier head.
* ``resnet_tiny``: a 3x3 stem, three single-block residual stages and
  global average pooling before the head.
* ``vgg_tiny``: three stages of doubled 3x3 convolutions with max-pooling,
  then a 128-unit hidden layer and the head.

The final classifier is always ``head.linear`` so finetuning can freeze
everything else by name.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np

from .layers import (BatchNorm2d, Conv2d, Flatten, GlobalAvgPool, Linear, MaxPool2d, Module,
                     PCENFrontend, ReLU, ResidualBlock, Sequential)
from .tensor import DEFAULT_DTYPE, Tensor, no_grad

ARCHITECTURES = ("cnn_small", "resnet_tiny", "vgg_tiny")


@dataclass
class ModelSpec:
    architecture: str
    num_classes: int
    input_shape: tuple[int, int, int]  # (1, F, T)
    use_pcen_frontend: bool = False
    width: int = 16
    hidden: int = 128
    pcen_groups: int = 1
    pcen: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}; known: {ARCHITECTURES}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if len(self.input_shape) != 3 or self.input_shape[0] != 1:
            raise ValueError(f"input_shape must be (1, F, T), got {self.input_shape}")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelSpec":
        return cls(**d)


class Head(Module):
    def __init__(self, n_in: int, num_classes: int, rng, dtype):
        super().__init__()
        self.linear = Linear(n_in, num_classes, rng, dtype)

    def forward(self, x):
        return self.linear(x)


class Model(Module):
    def __init__(self, spec: ModelSpec, frontend: Module | None, features: Module,
                 head: Head, dtype):
        super().__init__()
        self.spec = spec
        self.dtype = dtype
        self.frontend = frontend
        self.features = features
        self.head = head
        self.assign_names()

    def forward(self, x):
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        if x.shape[1:] != self.spec.input_shape:
            raise ValueError(f"batch shape {x.shape} does not match model input {self.spec.input_shape}")
        if self.frontend is not None:
            x = self.frontend(x)
        return self.head(self.features(x))


def _pooled(size: int, times: int) -> int:
    for _ in range(times):
        size //= 2
    return size


def build_model(spec: ModelSpec, seed: int = 0, dtype=DEFAULT_DTYPE) -> Model:
    """Instantiate ``spec`` with He-uniform weights drawn from ``seed``."""
    rng = np.random.default_rng(seed)
    _, f, t = spec.input_shape
    w = spec.width
    frontend = None
    if spec.use_pcen_frontend:
        frontend = PCENFrontend(f, spec.pcen_groups, dtype=dtype, **spec.pcen)

    if spec.architecture == "cnn_small":
        ff, tt = _pooled(f, 2), _pooled(t, 2)
        if ff < 1 or tt < 1:
            raise ValueError(f"input {spec.input_shape} too small for cnn_small")
        features = Sequential(
            Conv2d(1, w, 5, rng, pad=2, dtype=dtype), ReLU(), MaxPool2d(2),
            Conv2d(w, 2 * w, 5, rng, pad=2, dtype=dtype), ReLU(), MaxPool2d(2),
            Flatten(),
            Linear(2 * w * ff * tt, spec.hidden, rng, dtype), ReLU(),
        )
        n_head = spec.hidden
    elif spec.architecture == "resnet_tiny":
        features = Sequential(
            Conv2d(1, w, 3, rng, pad=1, bias=False, dtype=dtype), BatchNorm2d(w, dtype=dtype), ReLU(),
            ResidualBlock(w, w, 1, rng, dtype),
            ResidualBlock(w, 2 * w, 2, rng, dtype),
            ResidualBlock(2 * w, 4 * w, 2, rng, dtype),
            GlobalAvgPool(),
        )
        n_head = 4 * w
    else:
        ff, tt = _pooled(f, 3), _pooled(t, 3)
        if ff < 1 or tt < 1:
            raise ValueError(f"input {spec.input_shape} too small for vgg_tiny")
        layers: list[Module] = []
        cin = 1
        for width in (w, 2 * w, 4 * w):
            layers += [Conv2d(cin, width, 3, rng, pad=1, dtype=dtype), ReLU(),
                       Conv2d(width, width, 3, rng, pad=1, dtype=dtype), ReLU(), MaxPool2d(2)]
            cin = width
        layers += [Flatten(), Linear(4 * w * ff * tt, spec.hidden, rng, dtype), ReLU()]
        features = Sequential(*layers)
        n_head = spec.hidden

    head = Head(n_head, spec.num_classes, rng, dtype)
    return Model(spec, frontend, features, head, dtype)


def forward(model: Model, batch, mode: str = "eval") -> Tensor:
    """Run ``model`` on ``[N, 1, F, T]``; eval mode records no tape and mutates nothing."""
    if mode == "train":
        model.train()
        return model(batch)
    if mode != "eval":
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    model.eval()
    with no_grad():
        return model(batch)


def count_parameters(model: Module) -> int:
    return sum(p.data.size for p in model.parameters())
