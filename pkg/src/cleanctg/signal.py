"""FHR signal representation, resampling, segmentation and normalization.

Missing samples are carried as NaN in every bpm-domain array.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SEGMENT_LEN = 600
SLICE_LEN = 60
SLICES_PER_SEGMENT = SEGMENT_LEN // SLICE_LEN

BPM_MIN = 30.0
BPM_MAX = 300.0
NORM_SCALE = 240.0


class SignalError(ValueError):
    """Base class for signal validation failures."""


class InvalidRateError(SignalError):
    pass


class TooShortError(SignalError):
    pass


def _frozen(values: np.ndarray) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class FhrSignal:
    samples: np.ndarray
    rate_hz: int = 1
    id: str = ""

    def __post_init__(self):
        arr = _frozen(self.samples)
        if arr.ndim != 1 or arr.size < 1:
            raise SignalError("signal must be a non-empty 1-D sequence")
        if self.rate_hz not in (1, 4):
            raise InvalidRateError(f"rate_hz must be 1 or 4, got {self.rate_hz}")
        present = arr[~np.isnan(arr)]
        if present.size and (present.min() < BPM_MIN or present.max() > BPM_MAX):
            raise SignalError(f"present samples must lie in [{BPM_MIN:g}, {BPM_MAX:g}] bpm")
        object.__setattr__(self, "samples", arr)

    def __len__(self) -> int:
        return self.samples.size

    @property
    def missing(self) -> np.ndarray:
        return np.isnan(self.samples)


@dataclass(frozen=True)
class Segment10:
    values: np.ndarray
    source_id: str = ""
    start_index: int = 0

    def __post_init__(self):
        arr = _frozen(self.values)
        if arr.shape != (SEGMENT_LEN,):
            raise SignalError(f"Segment10 needs exactly {SEGMENT_LEN} samples, got {arr.shape}")
        object.__setattr__(self, "values", arr)

    def slices(self) -> list[Segment1]:
        return [Segment1(self, off) for off in range(0, SEGMENT_LEN, SLICE_LEN)]


@dataclass(frozen=True)
class Segment1:
    parent: Segment10
    offset: int
    values: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.offset not in range(0, SEGMENT_LEN, SLICE_LEN):
            raise SignalError(f"offset must be a multiple of {SLICE_LEN} below {SEGMENT_LEN}")
        object.__setattr__(
            self, "values", self.parent.values[self.offset:self.offset + SLICE_LEN]
        )


@dataclass(frozen=True)
class NormalizedSegment:
    values: np.ndarray
    missing_mask: np.ndarray

    def __len__(self) -> int:
        return self.values.size


def downsample(signal: FhrSignal) -> FhrSignal:
    """4 Hz -> 1 Hz by block mean over present samples; all-missing blocks stay missing."""
    if signal.rate_hz != 4:
        raise InvalidRateError(f"downsample expects a 4 Hz signal, got {signal.rate_hz} Hz")
    n = len(signal) // 4
    if n == 0:
        raise TooShortError("need at least 4 samples to downsample")
    blocks = signal.samples[: n * 4].reshape(n, 4)
    present = ~np.isnan(blocks)
    counts = present.sum(axis=1)
    sums = np.where(present, blocks, 0.0).sum(axis=1)
    out = np.full(n, np.nan)
    ok = counts > 0
    out[ok] = sums[ok] / counts[ok]
    return FhrSignal(out, rate_hz=1, id=signal.id)


def segment(signal: FhrSignal) -> list[Segment10]:
    if signal.rate_hz != 1:
        raise InvalidRateError("segment expects a 1 Hz signal; downsample first")
    k = len(signal) // SEGMENT_LEN
    if k == 0:
        raise TooShortError(f"signal has {len(signal)} samples, need at least {SEGMENT_LEN}")
    return [
        Segment10(signal.samples[i * SEGMENT_LEN:(i + 1) * SEGMENT_LEN], signal.id, i * SEGMENT_LEN)
        for i in range(k)
    ]


def normalize_array(bpm: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised normalization for arrays of any shape.

    Only the lower end is clamped: doubled samples above 240 bpm map above 1.0 so
    that a x0.5 correction stays exact.
    """
    bpm = np.asarray(bpm, dtype=np.float64)
    missing = np.isnan(bpm)
    values = np.where(missing, 0.0, np.maximum(np.nan_to_num(bpm), 0.0) / NORM_SCALE)
    return values, missing.astype(np.float64)


def normalize(seg: Segment1 | Segment10 | np.ndarray) -> NormalizedSegment:
    values = seg if isinstance(seg, np.ndarray) else seg.values
    v, m = normalize_array(values)
    return NormalizedSegment(v, m)


def denormalize(norm: NormalizedSegment | np.ndarray, missing_mask: np.ndarray | None = None) -> np.ndarray:
    if isinstance(norm, NormalizedSegment):
        values, missing_mask = norm.values, norm.missing_mask
    else:
        values = np.asarray(norm, dtype=np.float64)
    bpm = values * NORM_SCALE
    if missing_mask is not None:
        bpm = np.where(np.asarray(missing_mask) > 0.5, np.nan, bpm)
    return bpm


# ---------------------------------------------------------------------------
# CSV (t_sec,fhr_bpm)

CSV_HEADER = ("t_sec", "fhr_bpm")


def _fmt(value: float) -> str:
    if np.isnan(value):
        return ""
    return repr(float(value))


def signal_to_csv(samples: np.ndarray, rate_hz: int = 1, clamp: bool = True) -> str:
    """Serialize samples; values are clamped to the representable bpm range here only."""
    samples = np.asarray(samples, dtype=np.float64)
    if clamp:
        samples = np.where(np.isnan(samples), np.nan, np.clip(samples, BPM_MIN, BPM_MAX))
    buf = io.StringIO()
    buf.write(",".join(CSV_HEADER) + "\n")
    for i, v in enumerate(samples):
        buf.write(f"{_fmt(i / rate_hz)},{_fmt(v)}\n")
    return buf.getvalue()


def write_signal_csv(path: str | Path, samples: np.ndarray, rate_hz: int = 1, clamp: bool = True) -> None:
    Path(path).write_text(signal_to_csv(samples, rate_hz, clamp), encoding="utf-8", newline="\n")


def parse_signal_csv(text: str, id: str = "") -> FhrSignal:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise SignalError("empty CSV") from None
    if tuple(h.strip() for h in header) != CSV_HEADER:
        raise SignalError(f"CSV header must be {','.join(CSV_HEADER)}")
    times, values = [], []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != 2:
            raise SignalError(f"line {lineno}: expected 2 fields, got {len(row)}")
        try:
            times.append(float(row[0]))
            values.append(float(row[1]) if row[1].strip() else np.nan)
        except ValueError:
            raise SignalError(f"line {lineno}: non-numeric field") from None
    if not values:
        raise SignalError("CSV has no samples")
    rate = 1
    if len(times) > 1:
        dt = times[1] - times[0]
        if abs(dt - 0.25) < 1e-6:
            rate = 4
        elif abs(dt - 1.0) > 1e-6:
            raise InvalidRateError(f"sample spacing {dt} s is neither 1 Hz nor 4 Hz")
    return FhrSignal(np.array(values), rate_hz=rate, id=id)


def read_signal_csv(path: str | Path) -> FhrSignal:
    path = Path(path)
    return parse_signal_csv(path.read_text(encoding="utf-8"), id=path.stem)


def load_1hz(path: str | Path) -> FhrSignal:
    sig = read_signal_csv(path)
    return downsample(sig) if sig.rate_hz == 4 else sig
