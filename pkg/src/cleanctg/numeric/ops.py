"""Differentiable tensor operations used by the detector and reconstructor.

Reverse-mode gradients come from torch autograd. Shape checks, the attention
scaling, the BCE clamp and the layer-norm epsilon are fixed here so callers
never depend on torch defaults.
"""

from __future__ import annotations

import math
from typing import Sequence

import torch
import torch.nn.functional as F

Tensor = torch.Tensor

LN_EPS = 1e-5
BCE_CLAMP = 1e-7


class ShapeError(ValueError):
    pass


class ConfigError(ValueError):
    pass


def tensor(data, requires_grad: bool = False, dtype=torch.float64) -> Tensor:
    return torch.tensor(data, dtype=dtype, requires_grad=requires_grad)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise ShapeError(f"matmul: inner dims differ, {tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


def _broadcastable(a: Tensor, b: Tensor, op: str) -> None:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise ShapeError(f"{op}: shapes {tuple(a.shape)} and {tuple(b.shape)} do not broadcast") from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcastable(a, b, "add")
    return a + b


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcastable(a, b, "mul")
    return a * b


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-1 convolution with 'same' zero padding.

    x: (batch, in_ch, length); weight: (out_ch, in_ch, k) with odd k.
    """
    if x.dim() != 3 or weight.dim() != 3:
        raise ShapeError("conv1d expects (B, C, L) input and (O, C, K) weight")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv1d: input has {x.shape[1]} channels, weight expects {weight.shape[1]}")
    k = weight.shape[-1]
    if k % 2 == 0:
        raise ShapeError("conv1d 'same' padding needs an odd kernel")
    return F.conv1d(x, weight, bias, padding=k // 2)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    if gamma.shape[-1] != x.shape[-1] or beta.shape[-1] != x.shape[-1]:
        raise ShapeError("layer_norm: affine parameters must match the last dim")
    # biased variance, eps inside the square root
    return F.layer_norm(x, x.shape[-1:], gamma, beta, eps)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    # torch subtracts the row max before exponentiating
    return F.softmax(x, dim=axis)


def sigmoid(x: Tensor) -> Tensor:
    return torch.sigmoid(x)


def relu(x: Tensor) -> Tensor:
    return torch.clamp_min(x, 0.0)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    return F.gelu(x, approximate="none")


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    return x.mean() if axis is None else x.mean(dim=axis)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    return torch.cat(list(xs), dim=axis)


def slice_(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    if not 0 <= start <= stop <= x.shape[axis]:
        raise ShapeError(f"slice [{start}:{stop}) out of range for axis of size {x.shape[axis]}")
    return x.narrow(axis, start, stop - start)


def split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, t, d = x.shape
    return x.reshape(*lead, t, heads, d // heads).transpose(-3, -2)


def merge_heads(x: Tensor) -> Tensor:
    *lead, h, t, dk = x.shape
    return x.transpose(-3, -2).reshape(*lead, t, h * dk)


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int,
                         return_weights: bool = False):
    """softmax(Q K^T / sqrt(d_k)) V per head, heads re-concatenated.

    q: (..., Tq, d); k, v: (..., Tk, d). Projections happen outside.
    """
    d = q.shape[-1]
    if heads <= 0 or d % heads:
        raise ConfigError(f"heads={heads} does not divide d_model={d}")
    if k.shape[-1] != d or v.shape[-1] != d or k.shape[-2] != v.shape[-2]:
        raise ShapeError("attention: Q, K, V dimensions are inconsistent")
    dk = d // heads
    qh, kh, vh = split_heads(q, heads), split_heads(k, heads), split_heads(v, heads)
    logits = qh @ kh.transpose(-1, -2) / math.sqrt(dk)
    weights = softmax(logits, axis=-1)
    out = merge_heads(weights @ vh)
    return (out, weights) if return_weights else out


def bce_loss(probs: Tensor, targets: Tensor, weight: Tensor | None = None) -> Tensor:
    if probs.shape != targets.shape:
        raise ShapeError(f"bce_loss: {tuple(probs.shape)} vs {tuple(targets.shape)}")
    p = probs.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP)
    loss = -(targets * torch.log(p) + (1.0 - targets) * torch.log1p(-p))
    if weight is not None:
        return (loss * weight).sum() / weight.sum().clamp_min(1.0)
    return loss.mean()


def mse_loss(pred: Tensor, target: Tensor, weight: Tensor | None = None) -> Tensor:
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: {tuple(pred.shape)} vs {tuple(target.shape)}")
    sq = (pred - target) ** 2
    if weight is not None:
        return (sq * weight).sum() / weight.sum().clamp_min(1.0)
    return sq.mean()
