"""Detection and reconstruction metrics, and the corruption-length sweep."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .noise import CLASS_NAMES


class UndefinedMetricError(ValueError):
    pass


def auroc(scores, labels) -> float:
    """Probability that a random positive outranks a random negative (ties count half).

    Mann-Whitney U from average ranks, so it equals the trapezoidal ROC area.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AU-ROC needs both positive and negative labels")
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _ratio(num: int, den: int) -> float:
    return num / den if den else math.nan


def confusion_metrics(probs, labels, threshold: float = 0.5) -> tuple[float, float, float]:
    """(sensitivity, specificity, accuracy); an empty class yields NaN for its rate."""
    pred = np.asarray(probs, dtype=np.float64).ravel() > threshold
    y = np.asarray(labels).ravel().astype(bool)
    tp = int(np.sum(pred & y))
    tn = int(np.sum(~pred & ~y))
    fp = int(np.sum(pred & ~y))
    fn = int(np.sum(~pred & y))
    return _ratio(tp, tp + fn), _ratio(tn, tn + fp), _ratio(tp + tn, y.size)


def split_mse(cleaned, clean, masks) -> tuple[float, float]:
    """MSE over the ground-truth corrupted positions and over the rest.

    `masks` is either a per-position union (same shape as `clean`) or a
    per-class stack whose first axis is reduced with any(). Empty partitions
    give NaN.
    """
    cleaned = np.asarray(cleaned, dtype=np.float64)
    clean = np.asarray(clean, dtype=np.float64)
    m = np.asarray(masks, dtype=bool)
    if m.shape != clean.shape:
        m = m.any(axis=-2)
    if cleaned.shape != clean.shape or m.shape != clean.shape:
        raise ValueError("cleaned, clean and mask shapes differ")
    sq = (cleaned - clean) ** 2
    corrupt = float(sq[m].mean()) if m.any() else math.nan
    rest = float(sq[~m].mean()) if (~m).any() else math.nan
    return corrupt, rest


def _clean_float(v: float) -> float | None:
    return None if v is None or (isinstance(v, float) and math.isnan(v)) else float(v)


@dataclass
class ClassDetection:
    auroc: float | None
    sensitivity: float | None
    specificity: float | None
    accuracy: float | None
    positives: int


@dataclass
class DetectionReport:
    per_class: dict[str, ClassDetection]
    macro: dict[str, float | None]
    threshold: float

    def to_json(self) -> dict:
        return {
            "threshold": self.threshold,
            "per_class": {k: asdict(v) for k, v in self.per_class.items()},
            "macro": self.macro,
        }


def detection_report(probs, labels, threshold=0.5, class_names: Sequence[str] = CLASS_NAMES) -> DetectionReport:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    thr = np.broadcast_to(np.asarray(threshold, dtype=np.float64), (len(class_names),))
    per = {}
    for c, name in enumerate(class_names):
        try:
            auc = auroc(probs[:, c], labels[:, c])
        except UndefinedMetricError:
            auc = math.nan
        sens, spec, acc = confusion_metrics(probs[:, c], labels[:, c], thr[c])
        per[name] = ClassDetection(*(_clean_float(v) for v in (auc, sens, spec, acc)), int(labels[:, c].sum()))
    macro = {}
    for key in ("auroc", "sensitivity", "specificity", "accuracy"):
        vals = [getattr(v, key) for v in per.values()]
        macro[key] = None if any(v is None for v in vals) else float(np.mean(vals))
    return DetectionReport(per, macro, float(thr[0]) if np.all(thr == thr[0]) else thr.tolist())


@dataclass
class ReconReport:
    mse_corrupt: float | None
    mse_clean: float | None
    per_class: dict[str, float | None] = field(default_factory=dict)
    n_corrupt: int = 0
    n_clean: int = 0

    def to_json(self) -> dict:
        return asdict(self)


def recon_report(cleaned, clean, class_masks, class_names: Sequence[str] = CLASS_NAMES) -> ReconReport:
    """Split MSE plus corrupted-position MSE restricted to each class's mask.

    cleaned, clean: (N, T); class_masks: (N, C, T).
    """
    cleaned = np.asarray(cleaned, dtype=np.float64)
    clean = np.asarray(clean, dtype=np.float64)
    masks = np.asarray(class_masks, dtype=bool)
    union = masks.any(axis=1)
    corrupt, rest = split_mse(cleaned, clean, union)
    sq = (cleaned - clean) ** 2
    per = {name: _clean_float(float(sq[masks[:, c]].mean()) if masks[:, c].any() else math.nan)
           for c, name in enumerate(class_names)}
    return ReconReport(_clean_float(corrupt), _clean_float(rest), per, int(union.sum()), int((~union).sum()))


# ---------------------------------------------------------------------------
# corruption-length sweep

SweepMethod = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


@dataclass
class SweepCase:
    """Single-run corruptions sharing one run length.

    corrupted: (N, 600) bpm with NaN; masks: (N, 5, 600); offsets: (N,);
    clean_norm: (N, 60) normalized ground truth of the target slice.
    """
    length: int
    corrupted: np.ndarray
    masks: np.ndarray
    offsets: np.ndarray
    clean_norm: np.ndarray


def length_sweep(methods: Mapping[str, SweepMethod], cases: Sequence[SweepCase]) -> dict[str, dict[int, float]]:
    """MSE over corrupted positions of the target slice, per method and run length.

    Each method maps (corrupted (N,600) bpm, union mask (N,600), offsets (N,))
    to cleaned normalized slices (N,60). A zero-length case reports the clean
    MSE instead, since it has no corrupted positions.
    """
    curves: dict[str, dict[int, float]] = {name: {} for name in methods}
    for case in cases:
        union = case.masks.any(axis=1)
        idx = case.offsets[:, None] + np.arange(case.clean_norm.shape[1])
        slice_mask = np.take_along_axis(union, idx, axis=1)
        for name, fn in methods.items():
            cleaned = fn(case.corrupted, union, case.offsets)
            corrupt, rest = split_mse(cleaned, case.clean_norm, slice_mask)
            curves[name][case.length] = rest if case.length == 0 else corrupt
    return curves


def sweep_to_csv(curve: Mapping[int, float]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run_length", "mse"])
    for length in sorted(curve):
        w.writerow([length, repr(float(curve[length]))])
    return buf.getvalue()


def parse_sweep_csv(text: str) -> dict[int, float]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != ["run_length", "mse"]:
        raise ValueError("sweep CSV header must be run_length,mse")
    return {int(r[0]): float(r[1]) for r in rows[1:] if r}
