"""Parameter update rules, exponential lr schedule and trainability control."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from .nn.layers import Module, Parameter


class OptimError(RuntimeError):
    pass


@dataclass
class OptimState:
    kind: str  # "adam" | "sgd"
    lr0: float
    lr: float
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    gamma: float = 1.0
    weight_decay: float = 0.0
    step_count: int = 0
    slots: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)

    def slot(self, p: Parameter, key: str) -> np.ndarray:
        per = self.slots.setdefault(p.name, {})
        if key not in per:
            per[key] = np.zeros(p.shape, dtype=np.float64)
        return per[key]


def make_state(cfg: Mapping[str, Any]) -> OptimState:
    """Build an optimizer state from the ``optim`` config group."""
    opt = dict(cfg.get("optimizer", {}))
    kind = str(opt.get("name", "adam")).lower()
    if kind not in ("adam", "sgd"):
        raise OptimError(f"unknown optimizer {kind!r}")
    lr = float(opt.get("lr", 0.001))
    return OptimState(
        kind=kind, lr0=lr, lr=lr,
        momentum=float(opt.get("momentum", 0.9)),
        beta1=float(opt.get("beta1", 0.9)),
        beta2=float(opt.get("beta2", 0.999)),
        eps=float(opt.get("eps", 1e-8)),
        weight_decay=float(opt.get("weight_decay", 0.0)),
        gamma=float(cfg.get("scheduler", {}).get("gamma", 1.0)),
    )


def _trainable_grads(params: Sequence[Parameter]):
    for p in params:
        if not p.trainable:
            continue
        if p.grad is None:
            raise OptimError(f"trainable parameter {p.name!r} has no gradient")
        g = p.grad.astype(np.float64)
        yield p, g


def adam_step(params: Sequence[Parameter], state: OptimState) -> None:
    """One bias-corrected Adam update of every trainable parameter."""
    pairs = list(_trainable_grads(params))
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    for p, g in pairs:
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        m = state.slot(p, "m")
        v = state.slot(p, "v")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p.data = (p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype)


def sgd_step(params: Sequence[Parameter], state: OptimState) -> None:
    """Classical momentum: ``v = mu v + g``; ``theta -= lr v``."""
    pairs = list(_trainable_grads(params))
    state.step_count += 1
    for p, g in pairs:
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        v = state.slot(p, "velocity")
        v *= state.momentum
        v += g
        p.data = (p.data - state.lr * v).astype(p.dtype)


def step(params: Sequence[Parameter], state: OptimState) -> None:
    (adam_step if state.kind == "adam" else sgd_step)(params, state)


def zero_grad(params: Sequence[Parameter]) -> None:
    for p in params:
        p.grad = None


def scheduler_step(state: OptimState, epochs_completed: int) -> float:
    state.lr = state.lr0 * state.gamma ** epochs_completed
    return state.lr


def set_trainable(model: Module, mode: str) -> Module:
    """``all``: every parameter trainable; ``head-only``: only ``head.*``."""
    params = list(model.named_parameters())
    if mode == "all":
        for _, p in params:
            p.trainable = True
    elif mode == "head-only":
        if not any(name.startswith("head.") for name, _ in params):
            raise OptimError("model has no 'head.' parameters to finetune")
        for name, p in params:
            p.trainable = name.startswith("head.")
    else:
        raise OptimError(f"unknown trainability mode {mode!r}")
    return model


def state_to_arrays(state: OptimState) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    """Split a state into a JSON-able header and named arrays (for checkpoints)."""
    header = {k: getattr(state, k) for k in
              ("kind", "lr0", "lr", "momentum", "beta1", "beta2", "eps", "gamma", "weight_decay", "step_count")}
    arrays = {f"{name}::{key}": arr for name, slots in state.slots.items() for key, arr in slots.items()}
    return header, arrays


def state_from_arrays(header: Mapping[str, Any], arrays: Mapping[str, np.ndarray]) -> OptimState:
    state = OptimState(**header)
    for full, arr in arrays.items():
        name, key = full.rsplit("::", 1)
        state.slots.setdefault(name, {})[key] = np.asarray(arr, dtype=np.float64)
    return state
