"""Linear interpolation and autoregressive gap filling over a known corruption mask."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .noise import runs_from_mask


class UnfillableError(ValueError):
    pass


@dataclass(frozen=True)
class ArConfig:
    order: int = 5
    min_rows_per_coef: int = 3
    rcond: float = 1e-10

    def __post_init__(self):
        if self.order < 1:
            raise ValueError("AR order must be at least 1")


class ImputeResult(NamedTuple):
    values: np.ndarray
    fallback: bool


def linear_interpolate(x: np.ndarray, corrupt_mask: np.ndarray) -> np.ndarray:
    """Replace masked samples by ramps between the nearest clean neighbours.

    Leading and trailing masked runs take the nearest clean value.
    """
    x = np.asarray(x, dtype=np.float64)
    bad = np.asarray(corrupt_mask, dtype=bool)
    if not bad.any():
        return x.copy()
    good = np.flatnonzero(~bad)
    if good.size == 0:
        raise UnfillableError("every sample is corrupted")
    out = x.copy()
    idx = np.flatnonzero(bad)
    out[idx] = np.interp(idx, good, x[good])
    return out


def _fit_ar(x: np.ndarray, clean: np.ndarray, cfg: ArConfig) -> np.ndarray | None:
    p = cfg.order
    n = x.size
    rows = [t for t in range(p, n) if clean[t - p:t + 1].all()]
    if len(rows) < cfg.min_rows_per_coef * p:
        return None
    rows = np.array(rows)
    lags = np.stack([x[rows - k] for k in range(1, p + 1)], axis=1)
    design = np.column_stack([lags, np.ones(rows.size)])
    sv = np.linalg.svd(design, compute_uv=False)
    if sv[-1] <= cfg.rcond * sv[0]:
        return None
    coef, *_ = np.linalg.lstsq(design, x[rows], rcond=None)
    if not np.all(np.isfinite(coef)):
        return None
    # explosive fits would diverge across a long gap
    companion = np.zeros((p, p))
    companion[0] = coef[:p]
    companion[1:, :-1] = np.eye(p - 1)
    if np.max(np.abs(np.linalg.eigvals(companion))) >= 1.0:
        return None
    return coef


def ar_impute(x: np.ndarray, corrupt_mask: np.ndarray, cfg: ArConfig = ArConfig()) -> ImputeResult:
    """Fill masked runs by forecasting forward with an AR(p) model fit on clean samples.

    The fit uses every window of p+1 consecutive clean samples. Runs without p
    preceding samples, and whole segments whose fit is rank-deficient or short of
    data, or whose fitted recursion is explosive, are filled by linear
    interpolation instead and flagged.
    """
    x = np.asarray(x, dtype=np.float64)
    bad = np.asarray(corrupt_mask, dtype=bool)
    if not bad.any():
        return ImputeResult(x.copy(), False)
    clean = ~bad
    coef = _fit_ar(np.where(clean, x, 0.0), clean, cfg)
    fallback_fill = linear_interpolate(x, bad)
    if coef is None:
        return ImputeResult(fallback_fill, True)
    p = cfg.order
    a, c = coef[:p], coef[p]
    out = np.where(clean, x, np.nan)
    used_fallback = False
    for s, e in runs_from_mask(bad):
        if s < p:
            out[s:e] = fallback_fill[s:e]
            used_fallback = True
            continue
        for t in range(s, e):
            out[t] = c + a @ out[t - p:t][::-1]
    return ImputeResult(out, used_fallback)
