"""Gated artefact-specific reconstruction of a 1-minute slice.

Halving and doubling are undone by multiplicative correction under a learned
position mask; maternal-rate, missing and spike artefacts each get a small
transformer denoiser that refines a linear fill of the positions it flags.
Every branch is gated by the frozen detector, and a
position-wise softmax over the five branch outputs plus the untouched input
picks the final value at each sample.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .baselines import linear_interpolate
from .detector import DetectionResult
from .noise import Artefact, N_CLASSES
from .numeric import ops
from .numeric.layers import Encoder, Linear
from .signal import SLICE_LEN, NormalizedSegment

MATH_FACTORS = {Artefact.HALVING: 2.0, Artefact.DOUBLING: 0.5}
TRANSFORMER_CLASSES = (Artefact.MHR, Artefact.MISSING, Artefact.SPIKE)
# branches that locate their own artefact; the missing branch reads the missing flags
LOCATED_CLASSES = (Artefact.MHR, Artefact.SPIKE)
N_CANDIDATES = N_CLASSES + 1
ORIGINAL = N_CLASSES


@dataclass(frozen=True)
class ReconstructorConfig:
    feature_dim: int = 64
    d_model: int = 64
    heads: int = 4
    ffn_dim: int = 128
    branch_layers: int = 2
    mask_layers: int = 2
    fusion_hidden: int = 64
    detail_gain: float = 20.0
    dropout: float = 0.1
    mask_threshold: float = 0.5
    hard_fusion: bool = False

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ops.ConfigError("heads must divide d_model")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ReconstructorConfig:
        return cls(**d)


def math_correct(x, mask, factor: float):
    """x * ((1 - M) + M * f): exact scaling where M is 1, identity where it is 0."""
    return x * ((1.0 - mask) + mask * factor)


def gate_combine(x, x_hat, gate):
    """x_hat * g + x * (1 - g) with g broadcast over positions."""
    return x_hat * gate + x * (1.0 - gate)


def fuse(candidates, weights):
    """Per-position convex combination of candidate rows.

    candidates: (..., 6, T) with the original signal last; weights: (..., T, 6).
    Written as x + sum_b A_b (c_b - x) so identical candidates return x exactly.
    """
    x = candidates[..., ORIGINAL, :]
    delta = candidates - x.unsqueeze(-2)
    return x + (weights.transpose(-1, -2) * delta).sum(dim=-2)


def interpolate_rows(x: np.ndarray, flags: np.ndarray) -> np.ndarray:
    """Row-wise linear fill over flagged positions; a fully flagged row is returned unchanged."""
    out = np.array(x, dtype=np.float64, copy=True)
    for i in np.flatnonzero(flags.any(axis=1)):
        if not flags[i].all():
            out[i] = linear_interpolate(out[i], flags[i])
    return out


def slice_context(x10: np.ndarray, m10: np.ndarray, offsets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Anchor and reference level for each slice, taken from its parent segment.

    The anchor is the parent with its missing samples linearly filled, cut to
    the slice; the reference is the median of the parent's present samples.
    """
    x10 = np.asarray(x10, dtype=np.float64)
    m10 = np.asarray(m10).astype(bool)
    filled = interpolate_rows(x10, m10)
    idx = np.asarray(offsets, dtype=np.int64)[:, None] + np.arange(SLICE_LEN)
    anchor = np.take_along_axis(filled, idx, axis=1)
    present = np.where(m10, np.nan, x10)
    ref = np.zeros(len(x10))
    ok = ~m10.all(axis=1)
    ref[ok] = np.nanmedian(present[ok], axis=1)
    return anchor, ref


def _own_context(x, m):
    xn, mn = x.detach().double().cpu().numpy(), m.detach().cpu().numpy() > 0.5
    anchor = interpolate_rows(xn, mn)
    present = np.where(mn, np.nan, xn)
    ref = np.zeros(len(xn))
    ok = ~mn.all(axis=1)
    ref[ok] = np.nanmedian(present[ok], axis=1)
    return torch.as_tensor(anchor, dtype=x.dtype), torch.as_tensor(ref, dtype=x.dtype)


class _SequenceStem(nn.Module):
    """Per-position embedding of the slice channels and the detector features.

    Channels: value, missing flag, anchor, then the reference-centred value
    and the first difference, both scaled by `detail_gain` and zeroed where
    samples are missing.
    """

    CHANNELS = 5

    def __init__(self, cfg: ReconstructorConfig):
        super().__init__()
        self.gain = cfg.detail_gain
        self.signal_in = Linear(self.CHANNELS, cfg.d_model)
        self.feature_in = Linear(cfg.feature_dim, cfg.d_model, bias=False)
        self.pos = nn.Parameter(torch.randn(SLICE_LEN, cfg.d_model) * 0.02)

    def forward(self, x, m, fused, anchor, ref):
        present = 1.0 - m
        detail = (x - ref.unsqueeze(-1)) * self.gain * present
        diff = torch.zeros_like(x)
        diff[..., 1:] = (x[..., 1:] - x[..., :-1]) * self.gain * present[..., 1:] * present[..., :-1]
        z = torch.stack([x, m, anchor, detail, diff], dim=-1)
        return self.signal_in(z) + self.feature_in(fused) + self.pos


class MaskPredictor(nn.Module):
    def __init__(self, cfg: ReconstructorConfig):
        super().__init__()
        self.stem = _SequenceStem(cfg)
        self.encoder = Encoder(cfg.d_model, cfg.heads, cfg.ffn_dim, cfg.mask_layers, cfg.dropout)
        self.head = Linear(cfg.d_model, 1)

    def forward(self, x, m, fused, anchor, ref):
        h = self.encoder(self.stem(x, m, fused, anchor, ref))
        return ops.sigmoid(self.head(h).squeeze(-1))


def _logit(p, eps: float = 1e-4):
    p = p.clamp(eps, 1.0 - eps)
    return torch.log(p) - torch.log1p(-p)


class TransformerDenoiser(nn.Module):
    """Encoder with a sigmoid value head and, optionally, a position head.

    The value head works in logit space around a linear fill of the positions
    the branch flags, so an untrained head reproduces that fill. The output is
    x + q * (v - x) with q the branch's position mask (the missing flags for
    the missing branch), so unflagged samples pass through.
    """

    def __init__(self, cfg: ReconstructorConfig, learn_positions: bool):
        super().__init__()
        self.cfg = cfg
        self.stem = _SequenceStem(cfg)
        self.encoder = Encoder(cfg.d_model, cfg.heads, cfg.ffn_dim, cfg.branch_layers, cfg.dropout)
        self.head = Linear(cfg.d_model, 1)
        with torch.no_grad():
            self.head.weight.zero_()
            self.head.bias.zero_()
        self.position_head = Linear(cfg.d_model, 1) if learn_positions else None

    def forward(self, x, m, fused, anchor, ref, hard: bool = False):
        h = self.encoder(self.stem(x, m, fused, anchor, ref))
        if self.position_head is None:
            q_soft = m
            q = m
        else:
            q_soft = ops.sigmoid(self.position_head(h).squeeze(-1))
            q = (q_soft > self.cfg.mask_threshold).to(x.dtype) if hard else q_soft
        flags = (q_soft.detach() > self.cfg.mask_threshold).cpu().numpy() | (m.detach().cpu().numpy() > 0.5)
        fill = torch.as_tensor(interpolate_rows(anchor.detach().double().cpu().numpy(), flags), dtype=x.dtype)
        v = ops.sigmoid(_logit(fill) + self.head(h).squeeze(-1))
        return x + q * (v - x), q_soft


class FusionScorer(nn.Module):
    """Scores the six candidates at each position from features and candidate values."""

    DELTA_SCALE = 10.0

    def __init__(self, cfg: ReconstructorConfig):
        super().__init__()
        d_in = cfg.feature_dim + 2 * N_CANDIDATES + 1 + N_CLASSES
        self.fc1 = Linear(d_in, cfg.fusion_hidden)
        self.fc2 = Linear(cfg.fusion_hidden, N_CANDIDATES)

    def forward(self, fused, candidates, m, gates):
        cand = candidates.transpose(-1, -2)  # (B, T, 6)
        delta = (cand - cand[..., ORIGINAL:]) * self.DELTA_SCALE
        g = gates.unsqueeze(1).expand(-1, cand.shape[1], -1)
        z = torch.cat([fused, cand, delta, m.unsqueeze(-1), g], dim=-1)
        return self.fc2(ops.gelu(self.fc1(z)))


class SignalReconstructor(nn.Module):
    def __init__(self, cfg: ReconstructorConfig = ReconstructorConfig()):
        super().__init__()
        self.cfg = cfg
        self.mask_nets = nn.ModuleDict({a.key: MaskPredictor(cfg) for a in MATH_FACTORS})
        self.denoisers = nn.ModuleDict(
            {a.key: TransformerDenoiser(cfg, learn_positions=a in LOCATED_CLASSES) for a in TRANSFORMER_CLASSES}
        )
        self.scorer = FusionScorer(cfg)

    def _context(self, x, m, anchor, ref):
        if anchor is None or ref is None:
            own_anchor, own_ref = _own_context(x, m)
            anchor = own_anchor if anchor is None else anchor
            ref = own_ref if ref is None else ref
        return anchor, ref

    def predict_mask(self, x, m, fused, cls: Artefact, anchor=None, ref=None):
        anchor, ref = self._context(x, m, anchor, ref)
        return self.mask_nets[cls.key](x, m, fused, anchor, ref)

    def transformer_denoise(self, x, m, fused, cls: Artefact, anchor=None, ref=None, hard: bool = False):
        anchor, ref = self._context(x, m, anchor, ref)
        return self.denoisers[cls.key](x, m, fused, anchor, ref, hard)[0]

    def forward(self, x, m, fused, gates, anchor=None, ref=None, masks=None, fusion_weights=None,
                hard: bool | None = None):
        """Reconstruct a batch of normalized slices.

        x, m: (B, 60); fused: (B, 60, feature_dim); gates: (B, 5) in {0, 1}.
        anchor (B, 60) and ref (B,) carry parent-segment context (see
        slice_context); without them both are computed from the slice alone.
        `masks` (B, 2, 60) and `fusion_weights` (B, 60, 6) override the learned
        halving/doubling masks and fusion weights (oracle evaluation).
        """
        if hard is None:
            hard = not self.training
        anchor, ref = self._context(x, m, anchor, ref)
        soft_masks = torch.stack([self.mask_nets[a.key](x, m, fused, anchor, ref) for a in MATH_FACTORS], dim=1)
        if masks is not None:
            used = masks.to(x.dtype)
        elif hard:
            used = (soft_masks > self.cfg.mask_threshold).to(x.dtype)
        else:
            used = soft_masks
        branch = [math_correct(x, used[:, i], f) for i, f in enumerate(MATH_FACTORS.values())]
        located = []
        for a in TRANSFORMER_CLASSES:
            out, q = self.denoisers[a.key](x, m, fused, anchor, ref, hard)
            branch.append(out)
            if a in LOCATED_CLASSES:
                located.append(q)
        gated = [gate_combine(x, b, gates[:, c:c + 1]) for c, b in enumerate(branch)]
        candidates = torch.stack(gated + [x], dim=1)
        if fusion_weights is None:
            scores = self.scorer(fused, candidates, m, gates)
            if hard and self.cfg.hard_fusion:
                fusion_weights = nn.functional.one_hot(scores.argmax(-1), N_CANDIDATES).to(x.dtype)
            else:
                fusion_weights = ops.softmax(scores, axis=-1)
        out = fuse(candidates, fusion_weights)
        return {"output": out, "candidates": candidates, "weights": fusion_weights, "soft_masks": soft_masks,
                "position_masks": torch.stack(located, dim=1)}


@torch.no_grad()
def reconstruct(model: SignalReconstructor, seg1: NormalizedSegment, fused: np.ndarray,
                detection: DetectionResult, seg10: NormalizedSegment | None = None, offset: int = 0,
                masks: np.ndarray | None = None,
                fusion_weights: np.ndarray | None = None) -> tuple[NormalizedSegment, dict]:
    """Clean one slice given the frozen detector's features and gates.

    With the parent segment `seg10` the anchor and reference come from it,
    otherwise from the slice alone. Returns the cleaned slice (missing flags
    cleared) and the raw branch outputs.
    """
    model.eval()
    dtype = next(model.parameters()).dtype
    t = lambda a: torch.as_tensor(np.asarray(a), dtype=dtype).unsqueeze(0)  # noqa: E731
    anchor = ref = None
    if seg10 is not None:
        a, r = slice_context(seg10.values[None], seg10.missing_mask[None], np.array([offset]))
        anchor, ref = t(a[0]), torch.as_tensor(r, dtype=dtype)
    out = model(
        t(seg1.values), t(seg1.missing_mask), t(fused), t(detection.gates.astype(np.float64)),
        anchor=anchor, ref=ref,
        masks=None if masks is None else t(masks),
        fusion_weights=None if fusion_weights is None else t(fusion_weights),
    )
    parts = {k: v[0].double().numpy() for k, v in out.items()}
    return NormalizedSegment(parts["output"], np.zeros(SLICE_LEN)), parts


def branch_contributions(weights: np.ndarray) -> dict[str, float]:
    names = [a.key for a in Artefact] + ["original"]
    mean = np.asarray(weights).reshape(-1, N_CANDIDATES).mean(axis=0)
    return {n: float(v) for n, v in zip(names, mean)}
