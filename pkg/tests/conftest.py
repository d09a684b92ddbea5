"""Shared fixtures: desk-scale trained models and the acceptance report.

Training both stages takes a while on one CPU core, so the checkpoints are
cached under .acceptance-cache/ keyed by the training setup and the package
source. Set CLEANCTG_RETRAIN=1 to ignore the cache.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass
from pathlib import Path

import pytest
import torch

import cleanctg
from cleanctg.detector import ArtefactDetector
from cleanctg.noise import InjectionConfig
from cleanctg.pipeline import CleanCTG, save_detector, save_reconstructor
from cleanctg.numeric.state import ModelState
from cleanctg.reconstructor import SignalReconstructor
from cleanctg.synth import clean_segments
from cleanctg.training import Dataset, TrainConfig, build_dataset, split_by_parent, train_stage1, train_stage2

ROOT = Path(__file__).resolve().parents[1]
CACHE = Path(os.environ.get("CLEANCTG_ACCEPTANCE_CACHE", ROOT / ".acceptance-cache"))

# desk-scale setup: about 5,000 training slices, a separate held-out pool
DESK = {
    "train_segments": 500,
    "train_seed": 1,
    "heldout_segments": 400,
    "heldout_seed": 99,
    "train_seed_cfg": 0,
}

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"ACCEPTANCE {n:>2} {'PASS' if ok else 'FAIL'}: {detail}")


def _source_digest() -> str:
    h = hashlib.sha256(json.dumps(DESK, sort_keys=True).encode())
    for p in sorted(Path(cleanctg.__file__).parent.rglob("*.py")):
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


@dataclass
class DeskModels:
    pipe: CleanCTG
    detector_path: Path
    reconstructor_path: Path
    heldout: Dataset
    detector_seconds: float
    reconstructor_seconds: float
    training_examples: int


def _train(out: Path) -> dict:
    torch.set_num_threads(1)
    ds = build_dataset(clean_segments(DESK["train_segments"], DESK["train_seed"]),
                       InjectionConfig(seed=DESK["train_seed"]))
    cfg = TrainConfig(seed=DESK["train_seed_cfg"])
    sp = split_by_parent(ds.parent, cfg)
    train, val = ds.subset(sp.train), ds.subset(sp.val)
    t0 = time.perf_counter()
    det, _ = train_stage1(train, val, cfg)
    t1 = time.perf_counter()
    rec, _ = train_stage2(train, val, det, TrainConfig(stage="reconstructor", seed=DESK["train_seed_cfg"]))
    t2 = time.perf_counter()
    save_detector(out / "detector.cctg", det)
    save_reconstructor(out / "reconstructor.cctg", rec, ModelState.from_module(det).digest())
    meta = {"detector_seconds": t1 - t0, "reconstructor_seconds": t2 - t1, "training_examples": len(train)}
    (out / "meta.json").write_text(json.dumps(meta) + "\n")
    return meta


@pytest.fixture(scope="session")
def desk_models() -> DeskModels:
    out = CACHE / _source_digest()
    meta_path = out / "meta.json"
    if os.environ.get("CLEANCTG_RETRAIN") == "1" or not meta_path.exists():
        out.mkdir(parents=True, exist_ok=True)
        meta = _train(out)
    else:
        meta = json.loads(meta_path.read_text())
    pipe = CleanCTG.from_checkpoints(out / "detector.cctg", out / "reconstructor.cctg")
    heldout = build_dataset(clean_segments(DESK["heldout_segments"], DESK["heldout_seed"]),
                            InjectionConfig(seed=DESK["heldout_seed"]))
    return DeskModels(pipe, out / "detector.cctg", out / "reconstructor.cctg", heldout,
                      meta["detector_seconds"], meta["reconstructor_seconds"], meta["training_examples"])


@pytest.fixture(scope="session")
def untrained_pipe() -> CleanCTG:
    torch.manual_seed(0)
    return CleanCTG(ArtefactDetector(), SignalReconstructor())

