"""Synthetic artefact injection with ground-truth position masks.

Five artefact classes (halving, doubling, maternal heart rate, missing, spike)
are placed into clean 10-minute segments under a total-corruption cap and a
per-run length cap. Every random draw comes from one generator seeded by the
config, so a record is a pure function of (segment, config).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .signal import BPM_MAX, BPM_MIN, SLICE_LEN, Segment10


class Artefact(IntEnum):
    HALVING = 0
    DOUBLING = 1
    MHR = 2
    MISSING = 3
    SPIKE = 4

    @property
    def key(self) -> str:
        return self.name.lower()


CLASS_NAMES = tuple(a.key for a in Artefact)
N_CLASSES = len(CLASS_NAMES)

Run = tuple[int, int]


class InjectionError(ValueError):
    pass


class UncleanInputError(InjectionError):
    pass


class RunRangeError(InjectionError):
    pass


@dataclass(frozen=True)
class InjectionConfig:
    p_halving: float = 0.05
    p_doubling: float = 0.05
    p_mhr: float = 0.10
    p_missing: float = 0.10
    p_spike: float = 0.10
    max_total_fraction: float = 0.5
    max_run_fraction: float = 0.05
    min_run: int = 3
    max_occurrences: int = 6
    max_spike_occurrences: int = 20
    spike_run_range: tuple[int, int] = (1, 3)
    mhr_range: tuple[float, float] = (70.0, 110.0)
    mhr_baseline_range: tuple[float, float] = (80.0, 100.0)
    mhr_step_std: float = 0.5
    spike_delta_range: tuple[float, float] = (5.0, 40.0)
    flank_range: tuple[int, int] = (2, 10)
    compound_enabled: bool = True
    seed: int = 0

    def __post_init__(self):
        for p in self.probabilities:
            if not 0.0 <= p <= 1.0:
                raise InjectionError("injection probabilities must lie in [0, 1]")
        if not 0.0 < self.max_total_fraction <= 1.0:
            raise InjectionError("max_total_fraction must lie in (0, 1]")
        if self.max_run_fraction > self.max_total_fraction:
            raise InjectionError("max_run_fraction cannot exceed max_total_fraction")

    @property
    def probabilities(self) -> tuple[float, ...]:
        return (self.p_halving, self.p_doubling, self.p_mhr, self.p_missing, self.p_spike)

    def with_seed(self, seed: int) -> InjectionConfig:
        return replace(self, seed=int(seed))

    @classmethod
    def only(cls, artefact: Artefact, **kw) -> InjectionConfig:
        """Config where exactly one class always participates."""
        probs = {f"p_{a.key}": float(a == artefact) for a in Artefact}
        return cls(**{**probs, **kw})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class CorruptionRecord:
    clean: np.ndarray
    corrupted: np.ndarray
    masks: np.ndarray  # (5, n) bool
    runs: dict[str, list[Run]] = field(default_factory=dict)
    participation: np.ndarray | None = None
    id: str = ""

    @property
    def labels(self) -> np.ndarray:
        return self.masks.any(axis=1)

    @property
    def union(self) -> np.ndarray:
        return self.masks.any(axis=0)

    def slice_labels(self, offset: int, width: int = SLICE_LEN) -> np.ndarray:
        return self.masks[:, offset:offset + width].any(axis=1)

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "labels": {name: bool(v) for name, v in zip(CLASS_NAMES, self.labels)},
            "runs": {name: [list(r) for r in self.runs.get(name, [])] for name in CLASS_NAMES},
        }


# ---------------------------------------------------------------------------
# per-class transforms


def _check_runs(n: int, runs: Iterable[Run]) -> list[Run]:
    runs = sorted((int(s), int(e)) for s, e in runs)
    prev_end = 0
    for s, e in runs:
        if s < 0 or e > n or s >= e:
            raise RunRangeError(f"run [{s}, {e}) outside [0, {n})")
        if s < prev_end:
            raise RunRangeError(f"run [{s}, {e}) overlaps a previous run")
        prev_end = e
    return runs


def _scale(values: np.ndarray, runs: Iterable[Run], factor: float) -> np.ndarray:
    out = np.array(values, dtype=np.float64)
    for s, e in _check_runs(out.size, runs):
        out[s:e] *= factor
    return out


def apply_halving(values: np.ndarray, runs: Iterable[Run]) -> np.ndarray:
    return _scale(values, runs, 0.5)


def apply_doubling(values: np.ndarray, runs: Iterable[Run]) -> np.ndarray:
    return _scale(values, runs, 2.0)


def apply_missing(values: np.ndarray, runs: Iterable[Run]) -> np.ndarray:
    out = np.array(values, dtype=np.float64)
    for s, e in _check_runs(out.size, runs):
        out[s:e] = np.nan
    return out


def synthesize_mhr(length: int, rng: np.random.Generator,
                   bounds: tuple[float, float] = (70.0, 110.0),
                   baseline_range: tuple[float, float] = (80.0, 100.0),
                   step_std: float = 0.5) -> np.ndarray:
    """Maternal-rate run: uniform baseline plus a clamped random walk."""
    if length < 0:
        raise InjectionError("length must be non-negative")
    out = np.empty(length)
    if length == 0:
        return out
    lo, hi = bounds
    level = rng.uniform(*baseline_range)
    steps = rng.normal(0.0, step_std, length)
    for i in range(length):
        level = min(max(level + steps[i], lo), hi)
        out[i] = level
    return out


def apply_spike(values: np.ndarray, runs: Iterable[Run], rng: np.random.Generator,
                delta_range: tuple[float, float] = (5.0, 40.0)) -> tuple[np.ndarray, list[float]]:
    """Offset each run by one signed delta with |delta| uniform in `delta_range`."""
    out = np.array(values, dtype=np.float64)
    deltas = []
    for s, e in _check_runs(out.size, runs):
        d = rng.uniform(*delta_range) * (1.0 if rng.random() < 0.5 else -1.0)
        out[s:e] += d
        deltas.append(d)
    return out, deltas


# ---------------------------------------------------------------------------
# placement


def _valid_starts(occupied: np.ndarray, same: np.ndarray, length: int) -> np.ndarray:
    """Starts where [s, s+length) is free and does not touch a run in `same`."""
    n = occupied.size
    if length > n:
        return np.empty(0, dtype=np.int64)
    busy = np.concatenate([[0], np.cumsum(occupied)])
    starts = np.arange(n - length + 1)
    free = busy[starts + length] - busy[starts] == 0
    left_ok = np.ones_like(free)
    left_ok[1:] = ~same[starts[1:] - 1]
    right_ok = np.ones_like(free)
    ends = starts + length
    inner = ends < n
    right_ok[inner] = ~same[ends[inner]]
    return starts[free & left_ok & right_ok]


class _Placer:
    def __init__(self, n: int, cfg: InjectionConfig, rng: np.random.Generator):
        self.n = n
        self.rng = rng
        self.masks = np.zeros((N_CLASSES, n), dtype=bool)
        self.runs: dict[Artefact, list[Run]] = {a: [] for a in Artefact}
        self.budget = int(np.floor(cfg.max_total_fraction * n))
        self.max_run = int(np.floor(cfg.max_run_fraction * n))

    @property
    def occupied(self) -> np.ndarray:
        return self.masks.any(axis=0)

    def remaining(self) -> int:
        return self.budget - int(self.masks.sum())

    def place_random(self, cls: Artefact, length: int) -> Run | None:
        length = min(length, self.max_run, self.remaining())
        if length <= 0:
            return None
        occ = self.occupied
        same = occ if cls is Artefact.SPIKE else self.masks[cls]
        cand = _valid_starts(occ, same, length)
        if cand.size == 0:
            return None
        s = int(cand[self.rng.integers(cand.size)])
        return self._commit(cls, s, s + length)

    def place_at(self, cls: Artefact, s: int, e: int) -> Run | None:
        if s < 0 or e > self.n or e - s > self.remaining() or e - s > self.max_run:
            return None
        if self.occupied[s:e].any():
            return None
        same = self.masks[cls]
        if (s > 0 and same[s - 1]) or (e < self.n and same[e]):
            return None
        return self._commit(cls, s, e)

    def _commit(self, cls: Artefact, s: int, e: int) -> Run:
        self.masks[cls, s:e] = True
        self.runs[cls].append((s, e))
        return (s, e)


def _check_clean(values: np.ndarray) -> None:
    if np.isnan(values).any():
        raise UncleanInputError("segment contains missing samples")
    if values.min() < BPM_MIN or values.max() > BPM_MAX:
        raise UncleanInputError("segment contains out-of-range samples")


def inject(seg: Segment10 | np.ndarray, cfg: InjectionConfig = InjectionConfig()) -> CorruptionRecord:
    clean = np.array(seg.values if isinstance(seg, Segment10) else seg, dtype=np.float64)
    seg_id = seg.source_id if isinstance(seg, Segment10) else ""
    _check_clean(clean)
    n = clean.size
    rng = np.random.default_rng(cfg.seed)

    participation = rng.random(N_CLASSES) < np.array(cfg.probabilities)
    order = rng.permutation(N_CLASSES)
    placer = _Placer(n, cfg, rng)
    corrupted = clean.copy()

    for idx in order:
        cls = Artefact(int(idx))
        if not participation[cls]:
            continue
        if cls is Artefact.SPIKE:
            count = int(rng.integers(1, cfg.max_spike_occurrences + 1))
        else:
            count = int(rng.integers(1, cfg.max_occurrences + 1))
        for _ in range(count):
            if cls is Artefact.SPIKE:
                length = int(rng.integers(cfg.spike_run_range[0], cfg.spike_run_range[1] + 1))
            else:
                length = int(rng.integers(cfg.min_run, placer.max_run + 1))
            if cls is not Artefact.SPIKE and min(length, placer.remaining()) < cfg.min_run:
                break
            placer.place_random(cls, length)

    # compound flanks belong to the missing class, so they follow its participation draw
    if cfg.compound_enabled and participation[Artefact.MISSING]:
        hosts = sorted(
            r for a in (Artefact.HALVING, Artefact.DOUBLING, Artefact.MHR) for r in placer.runs[a]
        )
        for s, e in hosts:
            lo, hi = cfg.flank_range
            before = int(rng.integers(lo, hi + 1))
            after = int(rng.integers(lo, hi + 1))
            placer.place_at(Artefact.MISSING, s - before, s)
            placer.place_at(Artefact.MISSING, e, e + after)

    for cls in (Artefact.HALVING, Artefact.DOUBLING):
        corrupted = _scale(corrupted, placer.runs[cls], 0.5 if cls is Artefact.HALVING else 2.0)
    for s, e in sorted(placer.runs[Artefact.MHR]):
        corrupted[s:e] = synthesize_mhr(e - s, rng, cfg.mhr_range, cfg.mhr_baseline_range, cfg.mhr_step_std)
    corrupted, _ = apply_spike(corrupted, placer.runs[Artefact.SPIKE], rng, cfg.spike_delta_range)
    corrupted = apply_missing(corrupted, placer.runs[Artefact.MISSING])

    return CorruptionRecord(
        clean=clean,
        corrupted=corrupted,
        masks=placer.masks,
        runs={a.key: sorted(placer.runs[a]) for a in Artefact},
        participation=participation,
        id=seg_id,
    )


def runs_from_mask(mask: np.ndarray) -> list[Run]:
    m = np.concatenate([[False], np.asarray(mask, dtype=bool), [False]])
    edges = np.flatnonzero(m[1:] != m[:-1])
    return [(int(s), int(e)) for s, e in zip(edges[::2], edges[1::2])]


def masks_from_runs(runs: dict[str, Sequence[Sequence[int]]], n: int) -> np.ndarray:
    masks = np.zeros((N_CLASSES, n), dtype=bool)
    for i, name in enumerate(CLASS_NAMES):
        for s, e in runs.get(name, []):
            masks[i, s:e] = True
    return masks


# ---------------------------------------------------------------------------
# mask JSONL


def dump_masks_jsonl(records: Iterable[dict]) -> str:
    return "".join(json.dumps(r, sort_keys=False, separators=(",", ":")) + "\n" for r in records)


def parse_masks_jsonl(text: str) -> list[dict]:
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        obj = json.loads(line)
        if set(obj) != {"id", "labels", "runs"}:
            raise InjectionError(f"mask line {lineno}: expected keys id, labels, runs")
        out.append(obj)
    return out


def write_masks_jsonl(path: str | Path, records: Iterable[dict]) -> None:
    Path(path).write_text(dump_masks_jsonl(records), encoding="utf-8", newline="\n")


def read_masks_jsonl(path: str | Path) -> list[dict]:
    return parse_masks_jsonl(Path(path).read_text(encoding="utf-8"))


def single_run(seg: Segment10 | np.ndarray, cls: Artefact, start: int, length: int,
               rng: np.random.Generator, cfg: InjectionConfig = InjectionConfig()) -> CorruptionRecord:
    """One run of a chosen class at a chosen place, ignoring the caps.

    Used by the length sweep, which needs runs longer than the per-run cap.
    """
    clean = np.array(seg.values if isinstance(seg, Segment10) else seg, dtype=np.float64)
    _check_clean(clean)
    run = [(int(start), int(start) + int(length))]
    _check_runs(clean.size, run)
    s, e = run[0]
    if cls is Artefact.HALVING:
        corrupted = apply_halving(clean, run)
    elif cls is Artefact.DOUBLING:
        corrupted = apply_doubling(clean, run)
    elif cls is Artefact.MISSING:
        corrupted = apply_missing(clean, run)
    elif cls is Artefact.MHR:
        corrupted = clean.copy()
        corrupted[s:e] = synthesize_mhr(e - s, rng, cfg.mhr_range, cfg.mhr_baseline_range, cfg.mhr_step_std)
    else:
        corrupted, _ = apply_spike(clean, run, rng, cfg.spike_delta_range)
    runs = {a.key: (list(run) if a is cls else []) for a in Artefact}
    masks = np.zeros((N_CLASSES, clean.size), dtype=bool)
    masks[cls, s:e] = True
    return CorruptionRecord(clean, corrupted, masks, runs, masks.any(axis=1),
                            seg.source_id if isinstance(seg, Segment10) else "")
