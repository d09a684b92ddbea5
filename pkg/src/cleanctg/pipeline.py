"""End-to-end inference and the evaluation harness shared by the CLI and tests."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .baselines import ArConfig, ar_impute, linear_interpolate
from .detector import ArtefactDetector, DetectorConfig, gates_from_probs
from .metrics import ReconReport, SweepCase, detection_report, recon_report
from .noise import CLASS_NAMES, Artefact, InjectionConfig, runs_from_mask, single_run
from .numeric.state import CheckpointError, ModelState, load_checkpoint, load_into, save_checkpoint
from .reconstructor import (
    MATH_FACTORS, ReconstructorConfig, SignalReconstructor, branch_contributions, slice_context,
)
from .screen import PairedComparison, ScreenCriteria, paired_comparison
from .signal import (BPM_MAX, BPM_MIN, SEGMENT_LEN, SLICE_LEN, SLICES_PER_SEGMENT, FhrSignal, Segment10,
                     denormalize, downsample, normalize_array)
from .synth import FhrSimConfig, simulate_fhr
from .training import Dataset, inject_all, segment_seed

SLICE_OFFSETS = np.arange(SLICES_PER_SEGMENT) * SLICE_LEN


def save_detector(path, model: ArtefactDetector) -> None:
    save_checkpoint(path, ModelState.from_module(model), {"kind": "detector", "config": model.cfg.to_dict()})


def save_reconstructor(path, model: SignalReconstructor, detector_digest: str) -> None:
    save_checkpoint(path, ModelState.from_module(model), {
        "kind": "reconstructor", "config": model.cfg.to_dict(), "detector_sha256": detector_digest,
    })


def load_detector(path, dtype=torch.float64) -> ArtefactDetector:
    state, meta = load_checkpoint(path)
    arch = meta.get("architecture", {})
    if arch.get("kind") != "detector":
        raise CheckpointError(f"{path} is not a detector checkpoint")
    model = ArtefactDetector(DetectorConfig.from_dict(arch["config"])).to(dtype)
    load_into(model, state)
    return model.eval()


def load_reconstructor(path, dtype=torch.float64) -> tuple[SignalReconstructor, dict]:
    state, meta = load_checkpoint(path)
    arch = meta.get("architecture", {})
    if arch.get("kind") != "reconstructor":
        raise CheckpointError(f"{path} is not a reconstructor checkpoint")
    model = SignalReconstructor(ReconstructorConfig.from_dict(arch["config"])).to(dtype)
    load_into(model, state)
    return model.eval(), arch


def _gather(arr: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    idx = np.asarray(offsets)[:, None] + np.arange(SLICE_LEN)
    return np.take_along_axis(arr, idx, axis=1)


class CleanCTG:
    """Frozen detector plus optional reconstructor, run in 64-bit by default."""

    def __init__(self, detector: ArtefactDetector, reconstructor: SignalReconstructor | None = None,
                 dtype: torch.dtype = torch.float64, batch: int = 256):
        self.dtype = dtype
        self.detector = detector.to(dtype).eval()
        self.reconstructor = None if reconstructor is None else reconstructor.to(dtype).eval()
        self.batch = batch

    @classmethod
    def from_checkpoints(cls, detector_path, reconstructor_path=None) -> CleanCTG:
        det = load_detector(detector_path)
        rec = None
        if reconstructor_path is not None:
            rec, arch = load_reconstructor(reconstructor_path)
            expected = arch.get("detector_sha256")
            if expected and expected != load_checkpoint(detector_path)[0].digest():
                raise CheckpointError("reconstructor was trained against a different detector")
        return cls(det, rec)

    def _t(self, a) -> torch.Tensor:
        return torch.as_tensor(np.asarray(a), dtype=self.dtype)

    @torch.no_grad()
    def run_normalized(self, x10: np.ndarray, m10: np.ndarray, offsets: np.ndarray,
                       gates: np.ndarray | None = None) -> dict[str, np.ndarray]:
        """Detect and reconstruct one slice per row.

        x10, m10: (N, 600) normalized values and missing flags; offsets: (N,).
        `gates` (N, 5) overrides the detector's gates. Without a reconstructor
        the output is the input slice.
        """
        offsets = np.asarray(offsets, dtype=np.int64)
        x1, m1 = _gather(x10, offsets), _gather(m10, offsets)
        parts: dict[str, list] = {k: [] for k in ("probs", "output", "weights", "soft_masks")}
        for s in range(0, len(offsets), self.batch):
            sl = slice(s, s + self.batch)
            det = self.detector(self._t(x1[sl]), self._t(m1[sl]), self._t(x10[sl]), self._t(m10[sl]),
                                torch.as_tensor(offsets[sl]))
            parts["probs"].append(det["probs"].numpy())
            if self.reconstructor is None:
                continue
            probs = det["probs"].numpy()
            g = gates_from_probs(probs, self.detector.cfg.thresholds(), m1[sl] > 0.5) if gates is None else gates[sl]
            anchor, ref = slice_context(x10[sl], m10[sl], offsets[sl])
            out = self.reconstructor(self._t(x1[sl]), self._t(m1[sl]), det["fused"], self._t(g.astype(np.float64)),
                                     anchor=self._t(anchor), ref=self._t(ref))
            for k in ("output", "weights", "soft_masks"):
                parts[k].append(out[k].numpy())
        result = {"probs": np.concatenate(parts["probs"])}
        result["gates"] = (gates_from_probs(result["probs"], self.detector.cfg.thresholds(), m1 > 0.5)
                           if gates is None else np.asarray(gates, dtype=bool))
        if self.reconstructor is None:
            result["output"] = x1.astype(np.float64)
        else:
            for k in ("output", "weights", "soft_masks"):
                result[k] = np.concatenate(parts[k]).astype(np.float64)
        return result

    def run_bpm(self, corrupted: np.ndarray, offsets: np.ndarray) -> dict[str, np.ndarray]:
        x10, m10 = normalize_array(corrupted)
        return self.run_normalized(x10, m10, offsets)

    def denoise_segment(self, values: np.ndarray) -> tuple[np.ndarray, list[dict]]:
        """Clean all ten slices of a 600-sample bpm segment; returns normalized values and per-slice reports."""
        values = np.asarray(values, dtype=np.float64).reshape(1, SEGMENT_LEN)
        x10, m10 = normalize_array(np.repeat(values, SLICES_PER_SEGMENT, axis=0))
        out = self.run_normalized(x10, m10, SLICE_OFFSETS)
        return out["output"].reshape(SEGMENT_LEN), slice_reports(out, SLICE_OFFSETS)

    def denoise_signal(self, signal: FhrSignal) -> tuple[FhrSignal, dict]:
        """Clean every complete 10-minute segment; a trailing partial segment passes through."""
        if signal.rate_hz == 4:
            signal = downsample(signal)
        x = np.asarray(signal.samples, dtype=np.float64)
        k = x.size // SEGMENT_LEN
        if k == 0:
            raise ValueError(f"signal has {x.size} samples, need at least {SEGMENT_LEN}")
        segs = x[: k * SEGMENT_LEN].reshape(k, SEGMENT_LEN)
        x10, m10 = normalize_array(np.repeat(segs, SLICES_PER_SEGMENT, axis=0))
        offsets = np.tile(SLICE_OFFSETS, k)
        out = self.run_normalized(x10, m10, offsets)
        cleaned = x.copy()
        cleaned[: k * SEGMENT_LEN] = np.clip(denormalize(out["output"].reshape(-1)), BPM_MIN, BPM_MAX)
        reports = slice_reports(out, offsets)
        for i, r in enumerate(reports):
            r["segment"] = i // SLICES_PER_SEGMENT
        report = {
            "id": signal.id,
            "segments": k,
            "passthrough_samples": int(x.size - k * SEGMENT_LEN),
            "slices": reports,
        }
        return FhrSignal(cleaned, 1, signal.id), report


def slice_reports(out: dict, offsets: np.ndarray) -> list[dict]:
    reports = []
    for i, off in enumerate(offsets):
        r = {
            "offset": int(off),
            "probs": {n: float(p) for n, p in zip(CLASS_NAMES, out["probs"][i])},
            "gates": {n: bool(g) for n, g in zip(CLASS_NAMES, out["gates"][i])},
        }
        if "weights" in out:
            runs = {}
            for j, a in enumerate(MATH_FACTORS):
                if out["gates"][i, a]:
                    runs[a.key] = [list(rr) for rr in runs_from_mask(out["soft_masks"][i, j] > 0.5)]
            r["mask_runs"] = runs
            r["branch_contributions"] = branch_contributions(out["weights"][i])
        reports.append(r)
    return reports


# ---------------------------------------------------------------------------
# baselines over 10-minute segments


def baseline_slices(x10: np.ndarray, union10: np.ndarray, offsets: np.ndarray, method: str,
                    ar_cfg: ArConfig = ArConfig()) -> tuple[np.ndarray, int]:
    """Impute each normalized 10-minute row over its ground-truth mask, then cut the slice.

    Returns the slices and the number of rows on which the AR fit fell back.
    Identical parent rows are imputed once.
    """
    x10 = np.asarray(x10, dtype=np.float64)
    union10 = np.asarray(union10, dtype=bool)
    keys = np.concatenate([x10, union10], axis=1)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    filled = np.empty((uniq.shape[0], SEGMENT_LEN))
    fallbacks = 0
    for u in range(uniq.shape[0]):
        row, mask = uniq[u, :SEGMENT_LEN], uniq[u, SEGMENT_LEN:] > 0.5
        if method == "linear":
            filled[u] = linear_interpolate(row, mask)
        elif method == "ar":
            res = ar_impute(row, mask, ar_cfg)
            filled[u] = res.values
            fallbacks += int(res.fallback)
        else:
            raise ValueError(f"unknown baseline {method!r}")
    return _gather(filled[inverse], offsets), fallbacks


@dataclass
class ReconEvaluation:
    reports: dict[str, ReconReport]
    ar_fallbacks: int

    def to_json(self) -> dict:
        return {"methods": {k: v.to_json() for k, v in self.reports.items()}, "ar_fallbacks": self.ar_fallbacks}


def evaluate_reconstruction(pipe: CleanCTG | None, ds: Dataset) -> ReconEvaluation:
    masks = ds.masks.astype(bool)
    reports = {}
    if pipe is not None:
        out = pipe.run_normalized(ds.x10, ds.m10, ds.offset)
        reports["cleanctg"] = recon_report(out["output"], ds.clean1, masks)
    lin, _ = baseline_slices(ds.x10, ds.u10, ds.offset, "linear")
    ar, fb = baseline_slices(ds.x10, ds.u10, ds.offset, "ar")
    reports["linear"] = recon_report(lin, ds.clean1, masks)
    reports["ar"] = recon_report(ar, ds.clean1, masks)
    return ReconEvaluation(reports, fb)


def evaluate_detection(pipe: CleanCTG, ds: Dataset):
    out = pipe.run_normalized(ds.x10, ds.m10, ds.offset)
    return detection_report(out["probs"], ds.labels, pipe.detector.cfg.thresholds())


# ---------------------------------------------------------------------------
# length sweep

SWEEP_CLASSES = (Artefact.HALVING, Artefact.DOUBLING, Artefact.MHR, Artefact.MISSING)


def make_sweep_cases(segments: Sequence[Segment10], lengths: Sequence[int], per_length: int, seed: int,
                     classes: Sequence[Artefact] = SWEEP_CLASSES,
                     inj_cfg: InjectionConfig = InjectionConfig()) -> list[SweepCase]:
    """Single-run corruptions of controlled length placed inside one random slice."""
    cases = []
    for length in lengths:
        rng = np.random.default_rng(np.random.SeedSequence([seed, int(length)]))
        corrupted, masks, offsets, clean = [], [], [], []
        for i in range(per_length):
            seg = segments[i % len(segments)]
            off = int(rng.integers(0, SLICES_PER_SEGMENT)) * SLICE_LEN
            if length == 0:
                values = np.asarray(seg.values, dtype=np.float64)
                corrupted.append(values.copy())
                masks.append(np.zeros((len(CLASS_NAMES), SEGMENT_LEN), dtype=bool))
            else:
                cls = classes[int(rng.integers(0, len(classes)))]
                start = off + int(rng.integers(0, SLICE_LEN - length + 1))
                rec = single_run(seg, cls, start, length, rng, inj_cfg)
                values = rec.clean
                corrupted.append(rec.corrupted)
                masks.append(rec.masks)
            offsets.append(off)
            clean.append(normalize_array(values[off:off + SLICE_LEN])[0])
        cases.append(SweepCase(int(length), np.stack(corrupted), np.stack(masks), np.array(offsets),
                               np.stack(clean)))
    return cases


def sweep_methods(pipe: CleanCTG | None) -> dict:
    def baseline(method):
        def fn(corrupted, union, offsets):
            x10, _ = normalize_array(corrupted)
            return baseline_slices(x10, union, offsets, method)[0]
        return fn

    methods = {"linear": baseline("linear"), "ar": baseline("ar")}
    if pipe is not None:
        methods["cleanctg"] = lambda corrupted, union, offsets: pipe.run_bpm(corrupted, offsets)["output"]
    return methods


# ---------------------------------------------------------------------------
# screen cohort

SCREEN_MINUTES = 60


@dataclass
class CohortTraces:
    ids: list[str]
    clean: np.ndarray      # (K, 3600) bpm
    corrupted: np.ndarray  # (K, 3600) bpm with NaN


def make_cohort(n_traces: int, seed: int, inj_cfg: InjectionConfig = InjectionConfig(),
                sim_cfg: FhrSimConfig = FhrSimConfig(), jobs: int = 1) -> CohortTraces:
    n = SCREEN_MINUTES * 60
    k = n // SEGMENT_LEN
    children = np.random.SeedSequence([seed, 3]).spawn(n_traces)
    clean = np.stack([simulate_fhr(n, np.random.default_rng(ss), sim_cfg) for ss in children])
    ids = [f"trace{seed}-{i}" for i in range(n_traces)]
    segs = [Segment10(clean[i, j * SEGMENT_LEN:(j + 1) * SEGMENT_LEN], ids[i], j * SEGMENT_LEN)
            for i in range(n_traces) for j in range(k)]
    records = inject_all(segs, inj_cfg.with_seed(segment_seed(inj_cfg.seed, seed)), jobs)
    corrupted = np.stack([r.corrupted for r in records]).reshape(n_traces, n)
    return CohortTraces(ids, clean, corrupted)


def denoise_traces(pipe: CleanCTG, traces: np.ndarray) -> np.ndarray:
    """Clean (K, 3600) bpm traces segment by segment; returns bpm."""
    k, n = traces.shape
    segs = traces.reshape(-1, SEGMENT_LEN)
    x10, m10 = normalize_array(np.repeat(segs, SLICES_PER_SEGMENT, axis=0))
    out = pipe.run_normalized(x10, m10, np.tile(SLICE_OFFSETS, segs.shape[0]))
    return denormalize(out["output"]).reshape(k, n)


def _compare(args) -> PairedComparison:
    clean, corrupted, denoised, criteria, id = args
    return paired_comparison(clean, corrupted, denoised, criteria, id)


def screen_cohort(cohort: CohortTraces, denoised: np.ndarray, criteria: ScreenCriteria = ScreenCriteria(),
                  jobs: int = 1) -> list[PairedComparison]:
    work = [(cohort.clean[i], cohort.corrupted[i], denoised[i], criteria, cohort.ids[i])
            for i in range(len(cohort.ids))]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            return list(pool.map(_compare, work, chunksize=8))
    return [_compare(w) for w in work]


def read_trace_list(path: str | Path) -> list[str]:
    return [line.strip() for line in Path(path).read_text().splitlines() if line.strip()]
