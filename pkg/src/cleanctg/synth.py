"""Synthetic clean FHR traces at 1 Hz.

Stands in for expert-verified clean recordings: a wandering baseline, resonant
long-term variability, beat-level jitter, and raised-cosine accelerations
(optionally decelerations). No missing samples are produced.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import lfilter

from .signal import SEGMENT_LEN, Segment10


@dataclass(frozen=True)
class FhrSimConfig:
    baseline_range: tuple[float, float] = (120.0, 150.0)
    drift_step_std: float = 0.03
    ltv_std_range: tuple[float, float] = (1.5, 5.0)
    ltv_period_range: tuple[float, float] = (15.0, 45.0)
    ltv_pole_radius: float = 0.93
    # wide enough that clean traces clear the 1.5 bpm STV proxy of the screen
    jitter_std_range: tuple[float, float] = (1.2, 2.2)
    accel_rate_per_min: float = 0.15
    accel_amp_range: tuple[float, float] = (12.0, 25.0)
    accel_dur_range: tuple[float, float] = (20.0, 60.0)
    decel_rate_per_min: float = 0.0
    decel_amp_range: tuple[float, float] = (20.0, 40.0)
    decel_dur_range: tuple[float, float] = (60.0, 120.0)
    clip_range: tuple[float, float] = (60.0, 210.0)


def _resonant_noise(n: int, rng: np.random.Generator, period: float, radius: float) -> np.ndarray:
    w = 2 * np.pi / period
    a1, a2 = 2 * radius * np.cos(w), -radius * radius
    burn = 200
    x = lfilter([1.0], [1.0, -a1, -a2], rng.standard_normal(n + burn))[burn:]
    sd = x.std()
    return x / sd if sd > 0 else x


def _episodes(n, rng, rate_per_min, amp_range, dur_range, sign):
    out = np.zeros(n)
    count = rng.poisson(rate_per_min * n / 60.0)
    for _ in range(count):
        dur = int(rng.uniform(*dur_range))
        start = int(rng.integers(-dur // 2, n))
        amp = rng.uniform(*amp_range)
        # flat-topped raised cosine: quarter ramps on either side
        ramp = max(dur // 4, 1)
        shape = np.ones(dur)
        taper = 0.5 - 0.5 * np.cos(np.linspace(0, np.pi, ramp))
        shape[:ramp] = taper
        shape[-ramp:] = taper[::-1]
        lo, hi = max(start, 0), min(start + dur, n)
        if lo < hi:
            out[lo:hi] += sign * amp * shape[lo - start:hi - start]
    return out


def simulate_fhr(n: int, rng: np.random.Generator, cfg: FhrSimConfig = FhrSimConfig()) -> np.ndarray:
    base = rng.uniform(*cfg.baseline_range)
    drift = np.cumsum(rng.normal(0, cfg.drift_step_std, n))
    ltv = rng.uniform(*cfg.ltv_std_range) * _resonant_noise(
        n, rng, rng.uniform(*cfg.ltv_period_range), cfg.ltv_pole_radius
    )
    jitter = rng.normal(0, rng.uniform(*cfg.jitter_std_range), n)
    accel = _episodes(n, rng, cfg.accel_rate_per_min, cfg.accel_amp_range, cfg.accel_dur_range, +1)
    decel = _episodes(n, rng, cfg.decel_rate_per_min, cfg.decel_amp_range, cfg.decel_dur_range, -1)
    return np.clip(base + drift + ltv + jitter + accel + decel, *cfg.clip_range)


def clean_segments(count: int, seed: int, cfg: FhrSimConfig = FhrSimConfig()) -> list[Segment10]:
    """`count` independent clean 10-minute segments, one child seed each."""
    children = np.random.SeedSequence(seed).spawn(count)
    return [
        Segment10(simulate_fhr(SEGMENT_LEN, np.random.default_rng(ss), cfg), f"sim{seed}-{i}", 0)
        for i, ss in enumerate(children)
    ]
