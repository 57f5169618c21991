"""Differentiable layer primitives.

Each op computes its forward result with numpy and registers a closure
returning the gradients for its tensor inputs.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..dsp import smooth_energy
from .tensor import Tensor, ensure_tensor, make_node


class ShapeError(ValueError):
    pass


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_node(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` shaped ``[in, out]``."""
    if x.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = x @ weight
    return out + bias if bias is not None else out


def flatten(x: Tensor) -> Tensor:
    return x.reshape(x.shape[0], -1)


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    return sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation of ``[N, Cin, H, W]`` with ``[Cout, Cin, kh, kw]`` (im2col)."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    n, cin, h, w = x.shape
    cout, _, kh, kw = weight.shape
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise ShapeError(f"conv2d: kernel {weight.shape} larger than padded input {x.shape} (pad={pad})")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = _windows(xp, kh, kw, stride)
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * kh * kw)
    wmat = weight.data.reshape(cout, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (g2.T @ cols).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0, dtype=np.float64).astype(g.dtype)
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ho, wo, cin, kh, kw)
            dxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, backward, "conv2d")


def maxpool2d(x: Tensor, k: int = 2, stride: int | None = None) -> Tensor:
    stride = stride or k
    n, c, h, w = x.shape
    if h < k or w < k:
        raise ShapeError(f"maxpool2d: kernel {k} larger than input {x.shape}")
    win = _windows(x.data, k, k, stride)
    ho, wo = win.shape[2], win.shape[3]
    flat = win.reshape(n, c, ho, wo, k * k)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        dx = np.zeros(x.shape, dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += g * (idx == i * k + j)
        return (dx,)

    return make_node(np.ascontiguousarray(out), (x,), backward, "maxpool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), dtype=np.float64).astype(x.dtype)
    return make_node(out, (x,), lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).astype(g.dtype),),
                     "global_avg_pool")


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
                training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Batch normalization over ``(N, H, W)`` per channel.

    In training mode the running statistics are updated in place as
    ``run = (1 - momentum) * run + momentum * batch``.
    """
    c = x.shape[1]
    if gamma.shape != (c,) or running_mean.shape != (c,):
        raise ShapeError(f"batchnorm2d: {c} channels but parameters of shape {gamma.shape}")
    shape = (1, c, 1, 1)
    if training:
        mean = x.data.mean(axis=(0, 2, 3), dtype=np.float64)
        var = x.data.var(axis=(0, 2, 3), dtype=np.float64)
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var
    else:
        mean, var = running_mean.astype(np.float64), running_var.astype(np.float64)
    invstd = (1.0 / np.sqrt(var + eps)).astype(x.dtype).reshape(shape)
    xhat = (x.data - mean.astype(x.dtype).reshape(shape)) * invstd
    out = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)
    m = x.data.size // c

    def backward(g):
        gg = gamma.data.reshape(shape)
        sum_g = g.sum(axis=(0, 2, 3), dtype=np.float64)
        sum_gx = (g * xhat).sum(axis=(0, 2, 3), dtype=np.float64)
        if training:
            dx = (invstd / m) * gg * (m * g - sum_g.astype(g.dtype).reshape(shape)
                                      - xhat * sum_gx.astype(g.dtype).reshape(shape))
        else:
            dx = g * gg * invstd
        return dx, sum_gx.astype(g.dtype), sum_g.astype(g.dtype)

    return make_node(out.astype(x.dtype), (x, gamma, beta), backward, "batchnorm2d")


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(np.asarray(logits)))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood under a log-sum-exp stabilized softmax."""
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    logp = log_softmax(logits.data)
    loss = -logp[np.arange(n), labels].mean()

    def backward(g):
        grad = np.exp(logp)
        grad[np.arange(n), labels] -= 1.0
        return ((grad * (float(g) / n)).astype(logits.dtype),)

    return make_node(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "softmax_cross_entropy")


def pcen(x: Tensor, alpha: Tensor, delta: Tensor, r: Tensor, s: float, eps: float,
         band_group: np.ndarray) -> Tensor:
    """Trainable per-channel energy normalization of ``[N, C, F, T]`` energies.

    ``alpha``, ``delta`` and ``r`` hold one value per band group;
    ``band_group[f]`` maps frequency row ``f`` to its group.  The smoother
    coefficient ``s`` is fixed, so the IIR path carries no gradient.
    """
    energy = x.data.astype(np.float64)
    if np.any(energy < 0):
        raise ValueError("pcen input must be non-negative")
    smooth = smooth_energy(energy, s)
    log_m = np.log(eps + smooth)
    a = alpha.data.astype(np.float64)[band_group][:, None]
    d = delta.data.astype(np.float64)[band_group][:, None]
    rr = r.data.astype(np.float64)[band_group][:, None]
    gain = np.exp(-a * log_m)
    u = energy * gain + d
    u_r = u ** rr
    out = u_r - d ** rr
    groups = alpha.shape[0]

    def per_group(v):
        rows = v.sum(axis=(0, 1, 3))
        return np.bincount(band_group, weights=rows, minlength=groups).astype(x.dtype)

    def backward(g):
        g = g.astype(np.float64)
        du = rr * u ** (rr - 1)
        ga = per_group(g * du * energy * gain * -log_m) if alpha.requires_grad else None
        gd = per_group(g * (du - rr * d ** (rr - 1))) if delta.requires_grad else None
        gr = per_group(g * (u_r * np.log(u) - d ** rr * np.log(d))) if r.requires_grad else None
        return None, ga, gd, gr

    return make_node(out.astype(x.dtype), (x, alpha, delta, r), backward, "pcen")


__all__ = [
    "ShapeError", "relu", "linear", "flatten", "conv2d", "maxpool2d", "global_avg_pool",
    "batchnorm2d", "softmax", "log_softmax", "softmax_cross_entropy", "pcen", "ensure_tensor",
]
