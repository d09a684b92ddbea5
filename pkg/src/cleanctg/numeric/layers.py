"""Parameterised building blocks over the ops in :mod:`cleanctg.numeric.ops`."""

from __future__ import annotations

import math
from typing import Sequence

import torch
from torch import nn

from . import ops


class Linear(nn.Module):
    def __init__(self, d_in: int, d_out: int, bias: bool = True):
        super().__init__()
        bound = 1.0 / math.sqrt(d_in)
        self.weight = nn.Parameter(torch.empty(d_in, d_out).uniform_(-bound, bound))
        self.bias = nn.Parameter(torch.zeros(d_out)) if bias else None

    def forward(self, x):
        y = ops.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.gamma = nn.Parameter(torch.ones(d))
        self.beta = nn.Parameter(torch.zeros(d))

    def forward(self, x):
        return ops.layer_norm(x, self.gamma, self.beta)


class MultiKernelConv(nn.Module):
    """Parallel same-padded convolutions concatenated along channels."""

    def __init__(self, in_ch: int, kernels: Sequence[int], channels: int):
        super().__init__()
        self.weights = nn.ParameterList()
        self.biases = nn.ParameterList()
        for k in kernels:
            bound = 1.0 / math.sqrt(in_ch * k)
            self.weights.append(nn.Parameter(torch.empty(channels, in_ch, k).uniform_(-bound, bound)))
            self.biases.append(nn.Parameter(torch.zeros(channels)))
        self.out_channels = channels * len(kernels)

    def forward(self, x):
        return ops.concat([ops.conv1d(x, w, b) for w, b in zip(self.weights, self.biases)], axis=1)


class FeedForward(nn.Module):
    def __init__(self, d: int, hidden: int, dropout: float = 0.0):
        super().__init__()
        self.fc1 = Linear(d, hidden)
        self.fc2 = Linear(hidden, d)
        self.dropout = dropout

    def forward(self, x):
        h = ops.gelu(self.fc1(x))
        h = nn.functional.dropout(h, self.dropout, self.training)
        return self.fc2(h)


class Attention(nn.Module):
    """Multi-head attention with Q from one sequence and K, V from another."""

    def __init__(self, d: int, heads: int):
        super().__init__()
        if d % heads:
            raise ops.ConfigError(f"heads={heads} does not divide d_model={d}")
        self.heads = heads
        self.w_q = Linear(d, d, bias=False)
        self.w_k = Linear(d, d, bias=False)
        self.w_v = Linear(d, d, bias=False)
        self.w_o = Linear(d, d)

    def forward(self, query, context, return_weights: bool = False):
        out, w = ops.multi_head_attention(
            self.w_q(query), self.w_k(context), self.w_v(context), self.heads, return_weights=True
        )
        out = self.w_o(out)
        return (out, w) if return_weights else out


class EncoderLayer(nn.Module):
    """Pre-norm transformer layer: x + MHSA(LN(x)), then x + FFN(LN(x))."""

    def __init__(self, d: int, heads: int, ffn: int, dropout: float = 0.0):
        super().__init__()
        self.ln1 = LayerNorm(d)
        self.attn = Attention(d, heads)
        self.ln2 = LayerNorm(d)
        self.ffn = FeedForward(d, ffn, dropout)
        self.dropout = dropout

    def forward(self, x):
        h = self.ln1(x)
        x = x + nn.functional.dropout(self.attn(h, h), self.dropout, self.training)
        return x + nn.functional.dropout(self.ffn(self.ln2(x)), self.dropout, self.training)


class CrossAttentionLayer(nn.Module):
    """Every local token attends to all context tokens, then residual FFN."""

    def __init__(self, d: int, heads: int, ffn: int, dropout: float = 0.0):
        super().__init__()
        self.ln_q = LayerNorm(d)
        self.ln_kv = LayerNorm(d)
        self.attn = Attention(d, heads)
        self.ln2 = LayerNorm(d)
        self.ffn = FeedForward(d, ffn, dropout)
        self.dropout = dropout

    def forward(self, local, context, return_weights: bool = False):
        att, w = self.attn(self.ln_q(local), self.ln_kv(context), return_weights=True)
        x = local + nn.functional.dropout(att, self.dropout, self.training)
        x = x + nn.functional.dropout(self.ffn(self.ln2(x)), self.dropout, self.training)
        return (x, w) if return_weights else x


class Encoder(nn.Module):
    def __init__(self, d: int, heads: int, ffn: int, layers: int, dropout: float = 0.0):
        super().__init__()
        self.layers = nn.ModuleList(EncoderLayer(d, heads, ffn, dropout) for _ in range(layers))
        self.ln_out = LayerNorm(d)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return self.ln_out(x)
