"""Rule-based normality screen evaluated on a growing window.

A documented surrogate for proprietary computerized CTG criteria: baseline
range, a short-term-variation proxy (mean absolute successive difference at
1 Hz), at least one acceleration, no deceleration, and a per-minute missing
data exclusion rule. Checkpoints fall at minute 10 and every 2 minutes after.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .signal import FhrSignal, SignalError, TooShortError

MINUTE = 60


class Verdict(str, Enum):
    NORMAL_MET = "NormalMet"
    NOT_MET = "NotMet"


@dataclass(frozen=True)
class ScreenCriteria:
    baseline_range: tuple[float, float] = (110.0, 160.0)
    min_short_term_variation: float = 1.5
    accel_rise: float = 10.0
    accel_min_duration: int = 15
    min_accelerations: int = 1
    decel_drop: float = 15.0
    decel_min_duration: int = 60
    max_decelerations: int = 0
    max_missing_fraction: float = 0.5
    baseline_window: int = 600
    min_minutes: int = 10
    step_minutes: int = 2
    max_minutes: int = 60

    def __post_init__(self):
        lo, hi = self.baseline_range
        if not lo < hi:
            raise ValueError("baseline_range must be ordered")
        positive = (self.min_short_term_variation, self.accel_rise, self.accel_min_duration,
                    self.decel_drop, self.decel_min_duration, self.baseline_window,
                    self.min_minutes, self.step_minutes)
        if any(v <= 0 for v in positive):
            raise ValueError("screen thresholds must be positive")
        if not 0.0 < self.max_missing_fraction <= 1.0:
            raise ValueError("max_missing_fraction must lie in (0, 1]")

    @property
    def checkpoints(self) -> list[int]:
        return list(range(self.min_minutes, self.max_minutes + 1, self.step_minutes))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ScreenCriteria:
        d = dict(d)
        if "baseline_range" in d:
            d["baseline_range"] = tuple(d["baseline_range"])
        return cls(**d)


@dataclass(frozen=True)
class WindowResult:
    baseline_ok: bool
    variation_ok: bool
    accel_ok: bool
    decel_ok: bool
    missing_ok: bool
    baseline: float
    short_term_variation: float
    accelerations: int
    decelerations: int
    excluded_minutes: int

    @property
    def all_pass(self) -> bool:
        return self.baseline_ok and self.variation_ok and self.accel_ok and self.decel_ok and self.missing_ok

    def to_json(self) -> dict:
        d = asdict(self)
        d["all_pass"] = self.all_pass
        return {k: (None if isinstance(v, float) and np.isnan(v) else v) for k, v in d.items()}


@dataclass(frozen=True)
class ScreenDecision:
    verdict: Verdict
    decision_minute: int | None
    trace: list[tuple[int, WindowResult]] = field(repr=False, default_factory=list)

    @property
    def minutes(self) -> int:
        """Decision minute, with NotMet counted as the full recording."""
        return self.decision_minute if self.decision_minute is not None else self.trace[-1][0]

    def to_json(self) -> dict:
        return {
            "verdict": self.verdict.value,
            "decision_minute": self.decision_minute,
            "trace": [{"minute": m, **r.to_json()} for m, r in self.trace],
        }


def rolling_baseline(x: np.ndarray, window: int) -> np.ndarray:
    """Causal median of present samples over the trailing `window` samples (NaN if none)."""
    x = np.asarray(x, dtype=np.float64)
    padded = np.concatenate([np.full(window - 1, np.nan), x])
    views = sliding_window_view(padded, window)
    out = np.full(x.size, np.nan)
    ok = ~np.isnan(views).all(axis=1)
    if ok.any():
        out[ok] = np.nanmedian(views[ok], axis=1)
    return out


def _episodes(cond: np.ndarray, min_len: int) -> int:
    c = np.concatenate([[False], cond, [False]])
    edges = np.flatnonzero(c[1:] != c[:-1])
    lengths = edges[1::2] - edges[::2]
    return int(np.sum(lengths >= min_len))


def _as_array(signal) -> np.ndarray:
    if isinstance(signal, FhrSignal):
        if signal.rate_hz != 1:
            raise SignalError("the screen runs on 1 Hz signals")
        return np.asarray(signal.samples, dtype=np.float64)
    return np.asarray(signal, dtype=np.float64)


def evaluate_window(prefix, criteria: ScreenCriteria = ScreenCriteria(),
                    baseline: np.ndarray | None = None) -> WindowResult:
    """Evaluate every criterion on a 1 Hz prefix of at least ten minutes.

    `baseline` may carry a precomputed per-sample rolling baseline of a longer
    signal; being causal, its first len(prefix) entries equal the prefix's own.
    """
    x = _as_array(prefix)
    need = criteria.min_minutes * MINUTE
    if x.size < need:
        raise TooShortError(f"screen prefix needs at least {need} samples, got {x.size}")
    n_min = x.size // MINUTE
    x = x[: n_min * MINUTE]
    b = rolling_baseline(x, criteria.baseline_window) if baseline is None else np.asarray(baseline)[: x.size]

    missing = np.isnan(x)
    excluded_min = missing.reshape(n_min, MINUTE).mean(axis=1) > criteria.max_missing_fraction
    excluded = np.repeat(excluded_min, MINUTE)
    usable = ~missing & ~excluded

    recent = x[-criteria.baseline_window:]
    level = float(np.nanmedian(recent)) if (~np.isnan(recent)).any() else np.nan
    lo, hi = criteria.baseline_range
    baseline_ok = bool(lo <= level <= hi)

    pair = usable[1:] & usable[:-1]
    stv = float(np.mean(np.abs(np.diff(x)[pair]))) if pair.any() else np.nan
    variation_ok = bool(stv >= criteria.min_short_term_variation)

    with np.errstate(invalid="ignore"):
        dev = x - b
        rise = usable & (dev >= criteria.accel_rise)
        drop = ~missing & (-dev >= criteria.decel_drop)
    accels = _episodes(rise, criteria.accel_min_duration)
    decels = _episodes(drop, criteria.decel_min_duration)

    return WindowResult(
        baseline_ok=baseline_ok,
        variation_ok=variation_ok,
        accel_ok=accels >= criteria.min_accelerations,
        decel_ok=decels <= criteria.max_decelerations,
        missing_ok=not bool(excluded_min.any()),
        baseline=level,
        short_term_variation=stv,
        accelerations=accels,
        decelerations=decels,
        excluded_minutes=int(excluded_min.sum()),
    )


def time_to_decision(signal, criteria: ScreenCriteria = ScreenCriteria()) -> ScreenDecision:
    """First checkpoint minute at which every criterion passes, else NotMet."""
    x = _as_array(signal)
    expected = criteria.max_minutes * MINUTE
    if x.size != expected:
        raise SignalError(f"screen expects {expected} samples at 1 Hz, got {x.size}")
    b = rolling_baseline(x, criteria.baseline_window)
    trace = []
    for minute in criteria.checkpoints:
        res = evaluate_window(x[: minute * MINUTE], criteria, baseline=b)
        trace.append((minute, res))
        if res.all_pass:
            return ScreenDecision(Verdict.NORMAL_MET, minute, trace)
    return ScreenDecision(Verdict.NOT_MET, None, trace)


@dataclass(frozen=True)
class PairedComparison:
    clean: ScreenDecision
    corrupted: ScreenDecision
    denoised: ScreenDecision
    id: str = ""

    @property
    def agree_denoised(self) -> bool:
        return self.denoised.verdict == self.clean.verdict

    @property
    def agree_corrupted(self) -> bool:
        return self.corrupted.verdict == self.clean.verdict

    def to_json(self) -> dict:
        def short(d: ScreenDecision) -> dict:
            return {"verdict": d.verdict.value, "decision_minute": d.decision_minute}
        return {
            "id": self.id,
            "clean": short(self.clean),
            "corrupted": short(self.corrupted),
            "denoised": short(self.denoised),
            "agree_denoised": self.agree_denoised,
            "agree_corrupted": self.agree_corrupted,
        }


def paired_comparison(clean, corrupted, denoised, criteria: ScreenCriteria = ScreenCriteria(),
                      id: str = "") -> PairedComparison:
    arrays = [_as_array(s) for s in (clean, corrupted, denoised)]
    if len({a.size for a in arrays}) != 1:
        raise SignalError("clean, corrupted and denoised traces must be aligned")
    return PairedComparison(*(time_to_decision(a, criteria) for a in arrays), id=id)


ARMS = ("clean", "corrupted", "denoised")


def cohort_summary(pairs: Sequence[PairedComparison]) -> dict:
    """Per-arm screen statistics laid out like a time-to-decision results table.

    The specificity proxy is the fraction of clean-normal traces judged normal;
    the sensitivity proxy is the fraction of clean-not-met traces judged not met.
    NotMet traces count as the full recording length in the time statistics.
    """
    if not pairs:
        raise ValueError("empty cohort")
    normal = np.array([p.clean.verdict is Verdict.NORMAL_MET for p in pairs])
    arms = {}
    for arm in ARMS:
        ds = [getattr(p, arm) for p in pairs]
        met = np.array([d.verdict is Verdict.NORMAL_MET for d in ds])
        minutes = np.array([d.minutes for d in ds], dtype=np.float64)
        arms[arm] = {
            "specificity_proxy": float(met[normal].mean()) if normal.any() else None,
            "sensitivity_proxy": float((~met[~normal]).mean()) if (~normal).any() else None,
            "normal_met": int(met.sum()),
            "mean_minutes": float(minutes.mean()),
            "median_minutes": float(np.median(minutes)),
        }
    med_c, med_d = arms["corrupted"]["median_minutes"], arms["denoised"]["median_minutes"]
    return {
        "traces": len(pairs),
        "arms": arms,
        "agreement_denoised": float(np.mean([p.agree_denoised for p in pairs])),
        "agreement_corrupted": float(np.mean([p.agree_corrupted for p in pairs])),
        "median_improvement_pct": float(100.0 * (med_c - med_d) / med_c) if med_c else None,
    }


def summary_csv(summary: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["arm", "specificity_proxy", "sensitivity_proxy", "normal_met", "mean_minutes", "median_minutes"])
    for arm, row in summary["arms"].items():
        w.writerow([arm] + ["" if row[k] is None else repr(row[k]) if isinstance(row[k], float) else row[k]
                            for k in ("specificity_proxy", "sensitivity_proxy", "normal_met",
                                      "mean_minutes", "median_minutes")])
    return buf.getvalue()
