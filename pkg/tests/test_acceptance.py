"""The ten acceptance criteria, each at its stated tolerance.

Every test records one PASS/FAIL line that is printed in the terminal
summary, then asserts.
"""

from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np
import pytest
import torch
from scipy.stats import spearmanr

from conftest import record
from cleanctg.cli import main as cli_main
from cleanctg.metrics import auroc, length_sweep
from cleanctg.noise import Artefact, InjectionConfig, inject
from cleanctg.pipeline import (
    denoise_traces, evaluate_detection, evaluate_reconstruction, make_cohort, make_sweep_cases, screen_cohort,
    sweep_methods,
)
from cleanctg.reconstructor import N_CANDIDATES, math_correct
from cleanctg.screen import cohort_summary
from cleanctg.signal import SEGMENT_LEN, normalize_array, write_signal_csv
from cleanctg.synth import clean_segments, simulate_fhr
from cleanctg.training import segment_seed
import test_numeric as gradient_suite
from test_metrics import pairwise_auroc

TARGET_RATES = {"halving": 0.05, "doubling": 0.05, "mhr": 0.10, "missing": 0.10, "spike": 0.10}


def test_1_injector_compliance():
    t0 = time.perf_counter()
    seg = clean_segments(1, 2024)[0]
    n = 10_000
    hits = dict.fromkeys(TARGET_RATES, 0)
    total_violations = run_violations = 0
    for i in range(n):
        rec = inject(seg, InjectionConfig(seed=segment_seed(2024, i)))
        union = rec.masks.any(axis=0)
        total_violations += union.sum() > 0.5 * SEGMENT_LEN
        for c, name in enumerate(TARGET_RATES):
            hits[name] += bool(rec.masks[c].any())
            padded = np.concatenate([[False], rec.masks[c], [False]])
            edges = np.flatnonzero(padded[1:] != padded[:-1])
            if edges.size and (edges[1::2] - edges[::2]).max() > 0.05 * SEGMENT_LEN:
                run_violations += 1
    seconds = time.perf_counter() - t0
    rates = {k: v / n for k, v in hits.items()}
    worst = max(abs(rates[k] - TARGET_RATES[k]) for k in TARGET_RATES)
    ok = total_violations == 0 and run_violations == 0 and worst <= 0.02 and seconds <= 60
    record(1, ok, f"cap violations {total_violations}+{run_violations}, max rate gap {100 * worst:.2f} pp, "
                  f"{seconds:.1f} s; rates " + " ".join(f"{k}={v:.3f}" for k, v in rates.items()))
    assert ok


def test_2_gradient_suite():
    t0 = time.perf_counter()
    failures = []
    for name in gradient_suite.OP_CASES:
        try:
            gradient_suite.test_op_gradients_match_finite_differences(name)
        except AssertionError as exc:
            failures.append(str(exc).splitlines()[0])
    for name in gradient_suite.BLOCK_CASES:
        try:
            gradient_suite.test_block_gradients_match_finite_differences(name)
        except AssertionError as exc:
            failures.append(str(exc).splitlines()[0])
    seconds = time.perf_counter() - t0
    ok = not failures and seconds <= 300
    n_ops, n_blocks = len(gradient_suite.OP_CASES), len(gradient_suite.BLOCK_CASES)
    record(2, ok, f"{n_ops} ops + {n_blocks} blocks x 100 instances, {len(failures)} failing, "
                  f"{seconds:.1f} s" + (f"; {failures}" if failures else ""))
    assert ok


def test_3_identity_when_all_gates_off(desk_models):
    pipe = desk_models.pipe
    rng = np.random.default_rng(3)
    segs = np.stack([simulate_fhr(SEGMENT_LEN, rng) for _ in range(1000)])
    # corrupt half of them so the branches have something to change
    for i in range(0, 1000, 2):
        segs[i] = inject(segs[i], InjectionConfig(seed=i)).corrupted
    x10, m10 = normalize_array(segs)
    offsets = rng.integers(0, 10, 1000) * 60
    out = pipe.run_normalized(x10, m10, offsets, gates=np.zeros((1000, 5), dtype=bool))
    x1 = np.take_along_axis(x10, offsets[:, None] + np.arange(60), axis=1)
    err = float(np.abs(out["output"] - x1).max())
    ok = err <= 1e-12
    record(3, ok, f"1000 segments, max |reconstruct(x) - x| = {err:.3g}")
    assert ok


def test_4_oracle_correction():
    worst = {}
    for cls, factor in ((Artefact.HALVING, 2.0), (Artefact.DOUBLING, 0.5)):
        errs = []
        for seed in range(200):
            rec = inject(simulate_fhr(SEGMENT_LEN, np.random.default_rng(seed)),
                         InjectionConfig.only(cls, compound_enabled=False, seed=seed))
            x, _ = normalize_array(rec.corrupted)
            clean, _ = normalize_array(rec.clean)
            mask = rec.masks[cls]
            out = math_correct(torch.as_tensor(x), torch.as_tensor(mask, dtype=torch.float64), factor).numpy()
            errs.append(float(np.mean((out[mask] - clean[mask]) ** 2)))
        worst[cls.key] = max(errs)
    ok = all(v <= 1e-12 for v in worst.values())
    record(4, ok, "worst corrupted-position MSE over 200 segments: "
                  + ", ".join(f"{k} {v:.3g}" for k, v in worst.items()))
    assert ok


def test_5_detection(desk_models):
    rep = evaluate_detection(desk_models.pipe, desk_models.heldout)
    per = {k: v.auroc for k, v in rep.per_class.items()}
    macro = rep.macro["auroc"]
    minutes = desk_models.detector_seconds / 60
    ok = macro is not None and macro >= 0.95 and all(v is not None and v >= 0.90 for v in per.values()) \
        and minutes <= 30
    record(5, ok, f"held-out macro AU-ROC {macro:.4f}; " + " ".join(f"{k}={v:.4f}" for k, v in per.items())
           + f"; trained on {desk_models.training_examples} examples in {minutes:.1f} min")
    assert ok


def test_6_reconstruction(desk_models):
    ev = evaluate_reconstruction(desk_models.pipe, desk_models.heldout)
    ours, lin, ar = (ev.reports[k] for k in ("cleanctg", "linear", "ar"))
    ok = (ours.mse_corrupt <= 0.5 * lin.mse_corrupt and ours.mse_corrupt <= 0.5 * ar.mse_corrupt
          and ours.mse_clean <= 0.1 * ours.mse_corrupt)
    record(6, ok, f"corrupted MSE {ours.mse_corrupt:.3e} vs linear {lin.mse_corrupt:.3e} "
                  f"(ratio {ours.mse_corrupt / lin.mse_corrupt:.2f}) and AR {ar.mse_corrupt:.3e} "
                  f"(ratio {ours.mse_corrupt / ar.mse_corrupt:.2f}); clean MSE {ours.mse_clean:.3e}; per class "
                  + " ".join(f"{k}={v:.2e}" for k, v in ours.per_class.items() if v is not None))
    assert ok


def test_7_length_sweep(desk_models):
    lengths = list(range(3, 61))
    cases = make_sweep_cases(clean_segments(200, 7), lengths, per_length=100, seed=7)
    methods = sweep_methods(desk_models.pipe)
    curves = length_sweep({"linear": methods["linear"], "cleanctg": methods["cleanctg"]}, cases)
    lin = np.array([curves["linear"][n] for n in lengths])
    ours = np.array([curves["cleanctg"][n] for n in lengths])
    rho = spearmanr(lengths, lin).statistic
    above = [n for n, a, b in zip(lengths, ours, lin) if n >= 10 and a > b]
    ok = rho > 0.9 and not above
    record(7, ok, f"Spearman rho(linear MSE, length) = {rho:.3f}; model above linear at "
                  f"{len(above)} of {sum(n >= 10 for n in lengths)} lengths >= 10"
                  + (f" {above}" if above else ""))
    assert ok


def test_8_auroc_oracle():
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 80))
        labels = rng.integers(0, 2, n)
        labels[:2] = [0, 1]
        scores = rng.integers(0, 10, n) / 10 if rng.random() < 0.5 else rng.random(n)
        worst = max(worst, abs(auroc(scores, labels) - pairwise_auroc(scores, labels)))
    fixed = (auroc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]), auroc([0.5] * 4, [1, 0, 1, 0]),
             auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]))
    ok = worst <= 1e-9 and fixed == (1.0, 0.5, 0.75)
    record(8, ok, f"max |fast - pairwise| over 1000 cases {worst:.2e}; fixed examples {fixed}")
    assert ok


def test_9_screen_proxy(desk_models):
    cohort = make_cohort(200, seed=9)
    denoised = denoise_traces(desk_models.pipe, cohort.corrupted)
    summary = cohort_summary(screen_cohort(cohort, denoised))
    med = {arm: summary["arms"][arm]["median_minutes"] for arm in ("clean", "corrupted", "denoised")}
    ok = summary["agreement_denoised"] >= summary["agreement_corrupted"] and med["denoised"] <= med["corrupted"]
    record(9, ok, f"agreement with clean: denoised {summary['agreement_denoised']:.3f}, corrupted "
                  f"{summary['agreement_corrupted']:.3f}; median minutes clean {med['clean']:.0f}, corrupted "
                  f"{med['corrupted']:.0f}, denoised {med['denoised']:.0f}; "
                  f"NormalMet clean/corrupted/denoised "
                  + "/".join(str(summary["arms"][a]["normal_met"]) for a in ("clean", "corrupted", "denoised")))
    assert ok


def _cli_session(workdir: Path, monkeypatch) -> dict[str, bytes]:
    """Run every command once inside `workdir` with relative paths; return produced files."""
    monkeypatch.chdir(workdir)
    rng = np.random.default_rng(10)
    write_signal_csv("clean.csv", simulate_fhr(3600, rng))
    Path("small.json").write_text(json.dumps({
        "train": {"max_steps": 4, "batch_size": 16, "max_epochs": 1},
        "detector": {"channels": 8, "d_model": 16, "heads": 2, "encoder_layers": 1, "ffn_dim": 32,
                     "head_hidden": 8},
        "reconstructor": {"d_model": 16, "heads": 2, "ffn_dim": 32, "branch_layers": 1, "mask_layers": 1,
                          "fusion_hidden": 16},
    }))
    cfg = ["--config", "small.json", "--seed", "5"]
    commands = [
        ["inject", "--in", "clean.csv", "--out", "c.csv", "--masks", "m.jsonl", "--seed", "42"],
        ["build-dataset", "--segments", "30", "--out", "ds.cctg", *cfg],
        ["train", "detector", "--data", "ds.cctg", "--run-dir", "det", *cfg],
        ["train", "reconstructor", "--data", "ds.cctg", "--run-dir", "rec", "--detector", "det/detector.cctg",
         *cfg],
        ["detect", "--in", "c.csv", "--detector", "det/detector.cctg", "--out", "detect.json"],
        ["denoise", "--in", "c.csv", "--detector", "det/detector.cctg", "--reconstructor",
         "rec/reconstructor.cctg", "--out", "d.csv"],
        ["eval", "detect", "--data", "ds.cctg", "--detector", "det/detector.cctg", "--out", "ed.json"],
        ["eval", "reconstruct", "--data", "ds.cctg", "--detector", "det/detector.cctg", "--reconstructor",
         "rec/reconstructor.cctg", "--out", "er.json"],
        ["sweep", "--detector", "det/detector.cctg", "--reconstructor", "rec/reconstructor.cctg",
         "--segments", "5", "--per-length", "4", "--lengths", "0,5,30", "--out-dir", "sweep"],
        ["screen", "--in", "c.csv", "--out", "screen.json"],
        ["compare", "--detector", "det/detector.cctg", "--reconstructor", "rec/reconstructor.cctg",
         "--traces", "3", "--out-dir", "cmp"],
    ]
    codes = [cli_main(c) for c in commands]
    assert codes == [0] * len(commands), codes
    files = {}
    for p in sorted(Path(".").rglob("*")):
        if not p.is_file():
            continue
        data = p.read_bytes()
        if "manifest" in p.name:
            manifest = json.loads(data)
            manifest.pop("wall_clock_sec")
            data = json.dumps(manifest, sort_keys=True).encode()
        files[str(p)] = data
    return files


def test_10_reproducibility(tmp_path, monkeypatch):
    torch.set_num_threads(1)
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    a = _cli_session(tmp_path / "a", monkeypatch)
    b = _cli_session(tmp_path / "b", monkeypatch)
    differing = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    ok = not differing and len(a) > 20
    record(10, ok, f"11 commands run twice, {len(a)} files compared (manifest wall clock excluded), "
                   f"{len(differing)} differ" + (f": {differing}" if differing else ""))
    assert ok
