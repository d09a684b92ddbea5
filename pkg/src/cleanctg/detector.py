"""Multilabel artefact detector.

Dual-scale convolutional features (1-minute slice and its 10-minute parent),
one transformer encoder per scale, cross-attention from every local token to
every context token, class-specific attention pooling and one small MLP head
per artefact class.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .noise import N_CLASSES, Artefact
from .numeric import ops
from .numeric.layers import CrossAttentionLayer, Encoder, LayerNorm, Linear, MultiKernelConv
from .signal import SEGMENT_LEN, SLICE_LEN, NormalizedSegment


@dataclass(frozen=True)
class DetectorConfig:
    local_kernels: tuple[int, ...] = (3, 5, 7)
    context_kernels: tuple[int, ...] = (9, 15, 31)
    channels: int = 32
    d_model: int = 64
    heads: int = 4
    encoder_layers: int = 2
    ffn_dim: int = 128
    context_stride: int = 10
    class_count: int = N_CLASSES
    head_hidden: int = 32
    dropout: float = 0.1
    # a missed gate costs far more than a spurious one, so gates open early
    gate_threshold: float = 0.2
    class_thresholds: tuple[float, ...] | None = None
    # gain applied to the median-centred level and first-difference channels
    detail_gain: float = 20.0

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ops.ConfigError("heads must divide d_model")
        if not 0.0 < self.gate_threshold <= 1.0:
            raise ops.ConfigError("gate_threshold must lie in (0, 1]")
        if SEGMENT_LEN % self.context_stride:
            raise ops.ConfigError("context_stride must divide the segment length")

    @property
    def context_tokens(self) -> int:
        return SEGMENT_LEN // self.context_stride

    def thresholds(self) -> np.ndarray:
        if self.class_thresholds is not None:
            return np.asarray(self.class_thresholds, dtype=np.float64)
        return np.full(self.class_count, self.gate_threshold)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> DetectorConfig:
        d = dict(d)
        for key in ("local_kernels", "context_kernels", "class_thresholds"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass(frozen=True)
class DetectionResult:
    probs: np.ndarray
    gates: np.ndarray
    class_vectors: np.ndarray = field(repr=False)


def gates_from_probs(probs, threshold, missing=None) -> np.ndarray:
    """A gate opens strictly above its threshold; threshold may be per class.

    With the slices' missing flags (..., 60) the Missing gate also opens for
    every slice holding a flagged sample: those positions are observed, not
    inferred.
    """
    gates = np.asarray(probs) > np.asarray(threshold)
    if missing is not None:
        gates[..., Artefact.MISSING] |= np.asarray(missing).reshape(*gates.shape[:-1], -1).any(-1)
    return gates


N_INPUT_CHANNELS = 4


def input_channels(x, m, ref, gain: float):
    """Stack (value, missing flag, centred detail, first difference).

    `ref` is a per-row reference level (the parent's median); the detail and
    difference channels are zero wherever a sample or its predecessor is missing.
    """
    present = 1.0 - m
    detail = (x - ref.unsqueeze(-1)) * gain * present
    diff = torch.zeros_like(x)
    diff[..., 1:] = (x[..., 1:] - x[..., :-1]) * gain * present[..., 1:] * present[..., :-1]
    return torch.stack([x, m, detail, diff], dim=1)


def reference_level(x10, m10):
    """Median of the present samples of each parent row (0 when none are present)."""
    vals = torch.where(m10 > 0.5, torch.full_like(x10, float("nan")), x10)
    med = torch.nanmedian(vals, dim=-1).values
    return torch.nan_to_num(med, nan=0.0)


class ArtefactDetector(nn.Module):
    def __init__(self, cfg: DetectorConfig = DetectorConfig()):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.local_conv = MultiKernelConv(N_INPUT_CHANNELS, cfg.local_kernels, cfg.channels)
        self.local_proj = Linear(self.local_conv.out_channels, d)
        self.context_conv = MultiKernelConv(N_INPUT_CHANNELS, cfg.context_kernels, cfg.channels)
        self.context_proj = Linear(self.context_conv.out_channels, d)
        # local tokens get a within-minute embedding plus the coarse embedding of
        # their absolute position, which context tokens also carry
        self.pos_local = nn.Parameter(torch.randn(SLICE_LEN, d) * 0.02)
        self.pos_coarse = nn.Parameter(torch.randn(cfg.context_tokens, d) * 0.02)
        self.local_encoder = Encoder(d, cfg.heads, cfg.ffn_dim, cfg.encoder_layers, cfg.dropout)
        self.context_encoder = Encoder(d, cfg.heads, cfg.ffn_dim, cfg.encoder_layers, cfg.dropout)
        self.cross = CrossAttentionLayer(d, cfg.heads, cfg.ffn_dim, cfg.dropout)
        self.ln_fused = LayerNorm(d)
        self.pool_queries = nn.Parameter(torch.randn(cfg.class_count, d) / math.sqrt(d))
        self.pool_key = Linear(d, d, bias=False)
        h = cfg.head_hidden
        self.head_w1 = nn.Parameter(torch.empty(cfg.class_count, d, h).uniform_(-1 / math.sqrt(d), 1 / math.sqrt(d)))
        self.head_b1 = nn.Parameter(torch.zeros(cfg.class_count, h))
        self.head_w2 = nn.Parameter(torch.empty(cfg.class_count, h).uniform_(-1 / math.sqrt(h), 1 / math.sqrt(h)))
        self.head_b2 = nn.Parameter(torch.zeros(cfg.class_count))

    # -- step 1
    def extract_features(self, x1, m1, x10, m10, offset):
        """Token sequences for both scales.

        x1, m1: (B, 60); x10, m10: (B, 600); offset: (B,) integer sample offsets.
        Returns local (B, 60, d) and context (B, T_c, d).
        """
        if x1.shape[-1] != SLICE_LEN or x10.shape[-1] != SEGMENT_LEN:
            raise ops.ShapeError(
                f"expected ({SLICE_LEN},) and ({SEGMENT_LEN},) inputs, got {tuple(x1.shape)} and {tuple(x10.shape)}"
            )
        stride = self.cfg.context_stride
        gain = self.cfg.detail_gain
        ref = reference_level(x10, m10).detach()
        loc = ops.gelu(self.local_conv(input_channels(x1, m1, ref, gain)))
        ctx = self.context_conv(input_channels(x10, m10, ref, gain))
        b, c, n = ctx.shape
        ctx = ops.gelu(ctx.reshape(b, c, n // stride, stride).mean(dim=-1))
        local = self.local_proj(loc.transpose(1, 2))
        context = self.context_proj(ctx.transpose(1, 2))
        idx = (torch.as_tensor(offset).reshape(-1, 1) + torch.arange(SLICE_LEN)) // stride
        local = local + self.pos_local + self.pos_coarse[idx]
        context = context + self.pos_coarse
        return local, context

    # -- steps 2-3
    def cross_attend(self, local, context, return_weights: bool = False):
        local = self.local_encoder(local)
        context = self.context_encoder(context)
        fused, w = self.cross(local, context, return_weights=True)
        fused = self.ln_fused(fused)
        return (fused, w) if return_weights else fused

    # -- step 4
    def class_pool(self, fused, return_weights: bool = False):
        keys = self.pool_key(fused)
        logits = torch.einsum("cd,btd->bct", self.pool_queries, keys) / math.sqrt(fused.shape[-1])
        w = ops.softmax(logits, axis=-1)
        vectors = w @ fused
        return (vectors, w) if return_weights else vectors

    # -- step 5
    def classify_logits(self, class_vectors):
        h = ops.gelu(torch.einsum("bcd,cdh->bch", class_vectors, self.head_w1) + self.head_b1)
        return (h * self.head_w2).sum(-1) + self.head_b2

    def classify(self, class_vectors):
        return ops.sigmoid(self.classify_logits(class_vectors))

    def forward(self, x1, m1, x10, m10, offset):
        local, context = self.extract_features(x1, m1, x10, m10, offset)
        fused = self.cross_attend(local, context)
        vectors = self.class_pool(fused)
        logits = self.classify_logits(vectors)
        return {"probs": ops.sigmoid(logits), "logits": logits, "fused": fused, "class_vectors": vectors}


def _as_batch(arr, dtype) -> torch.Tensor:
    return torch.as_tensor(np.asarray(arr), dtype=dtype).reshape(1, -1)


@torch.no_grad()
def detect(model: ArtefactDetector, seg1: NormalizedSegment, seg10: NormalizedSegment, offset: int) -> DetectionResult:
    if len(seg1) != SLICE_LEN or len(seg10) != SEGMENT_LEN:
        raise ops.ShapeError("detect needs a 60-sample slice and its 600-sample parent")
    model.eval()
    dtype = next(model.parameters()).dtype
    out = model(
        _as_batch(seg1.values, dtype), _as_batch(seg1.missing_mask, dtype),
        _as_batch(seg10.values, dtype), _as_batch(seg10.missing_mask, dtype),
        torch.tensor([offset]),
    )
    probs = out["probs"][0].double().numpy()
    gates = gates_from_probs(probs, model.cfg.thresholds(), seg1.missing_mask > 0.5)
    return DetectionResult(probs, gates, out["class_vectors"][0].double().numpy())
