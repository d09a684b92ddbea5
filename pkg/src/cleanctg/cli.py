"""Command-line workbench.

Every command writes its reports plus a run manifest. Exit codes: 0 success,
1 validation error, 2 runtime error; failures print one line starting with
``ERROR <code>:``.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time
from pathlib import Path
from typing import Any

import numpy as np
import torch

from . import __version__
from .baselines import ArConfig
from .detector import DetectorConfig
from .metrics import length_sweep, sweep_to_csv
from .noise import InjectionConfig, InjectionError, dump_masks_jsonl
from .numeric.ops import ConfigError, ShapeError
from .numeric.state import CheckpointError, ModelState
from .pipeline import (CleanCTG, denoise_traces, evaluate_detection, evaluate_reconstruction, make_cohort,
                       make_sweep_cases, save_detector, save_reconstructor, screen_cohort, slice_reports,
                       sweep_methods)
from .reconstructor import ReconstructorConfig
from .screen import ScreenCriteria, cohort_summary, summary_csv, time_to_decision
from .signal import SEGMENT_LEN, SLICES_PER_SEGMENT, SignalError, downsample, read_signal_csv, segment, write_signal_csv
from .synth import FhrSimConfig, clean_segments
from .training import (Dataset, StageOrderError, TrainConfig, TrainingError, build_dataset, history_csv,
                       inject_all, split_by_parent, train_stage1, train_stage2)


class CliError(Exception):
    def __init__(self, code: str, message: str, exit_code: int = 1):
        super().__init__(message)
        self.code = code
        self.exit_code = exit_code


# ---------------------------------------------------------------------------
# configuration

SECTIONS = {
    "injection": InjectionConfig,
    "train": TrainConfig,
    "detector": DetectorConfig,
    "reconstructor": ReconstructorConfig,
    "screen": ScreenCriteria,
    "sim": FhrSimConfig,
    "ar": ArConfig,
}


def _flatten(d: dict, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _coerce(value, default):
    if isinstance(default, tuple) and isinstance(value, list):
        return tuple(value)
    return value


def load_configs(path: str | None, seed: int) -> dict[str, Any]:
    """Typed config objects with `--config` overrides applied by dotted path."""
    overrides: dict[str, Any] = {}
    if path:
        try:
            overrides = _flatten(json.loads(Path(path).read_text()))
        except FileNotFoundError:
            raise CliError("missing-file", f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise CliError("config", f"config is not valid JSON: {exc}") from None
    per_section: dict[str, dict] = {name: {} for name in SECTIONS}
    for key, value in overrides.items():
        section, _, field = key.partition(".")
        if section not in SECTIONS or not field or "." in field:
            raise CliError("config", f"unknown config path {key!r}")
        names = {f.name: f for f in dataclasses.fields(SECTIONS[section])}
        if field not in names:
            raise CliError("config", f"unknown config path {key!r}")
        per_section[section][field] = value
    configs = {}
    for name, cls in SECTIONS.items():
        base = cls()
        fields = {k: _coerce(v, getattr(base, k)) for k, v in per_section[name].items()}
        if name in ("injection", "train") and "seed" not in fields:
            fields["seed"] = seed
        try:
            configs[name] = dataclasses.replace(base, **fields)
        except (TypeError, ValueError) as exc:
            raise CliError("config", f"invalid {name} config: {exc}") from None
    return configs


def config_json(configs: dict) -> dict:
    return {k: dataclasses.asdict(v) for k, v in configs.items()}


def config_hash(configs: dict) -> str:
    return hashlib.sha256(json.dumps(config_json(configs), sort_keys=True).encode()).hexdigest()


# ---------------------------------------------------------------------------
# io helpers


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_json(path: str | Path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")
    return path


def write_text(path: str | Path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def _require(path: str | None, what: str) -> Path:
    if not path:
        raise CliError("usage", f"--{what} is required")
    p = Path(path)
    if not p.exists():
        raise CliError("missing-file", f"{what} not found: {path}")
    return p


def _read_signal(path: str):
    p = _require(path, "in")
    try:
        sig = read_signal_csv(p)
    except (SignalError, ValueError) as exc:
        raise CliError("csv", f"{p}: {exc}") from None
    return downsample(sig) if sig.rate_hz == 4 else sig


def _pipeline(args, need_reconstructor: bool) -> CleanCTG:
    det = _require(args.detector, "detector")
    rec = _require(args.reconstructor, "reconstructor") if need_reconstructor or args.reconstructor else None
    try:
        return CleanCTG.from_checkpoints(det, rec)
    except (CheckpointError, KeyError) as exc:
        raise CliError("checkpoint", str(exc)) from None


def _dataset(path: str) -> Dataset:
    p = _require(path, "data")
    try:
        return Dataset.load(p)
    except (CheckpointError, ValueError) as exc:
        raise CliError("dataset", f"{p}: {exc}") from None


@dataclasses.dataclass
class RunManifest:
    command: str
    argv: list[str]
    config: dict
    config_hash: str
    seed: int
    inputs: dict[str, str]
    outputs: dict[str, str]
    tool_version: str
    wall_clock_sec: float

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


class Run:
    """Collects inputs and outputs of one command and writes its manifest."""

    def __init__(self, args, configs):
        self.args = args
        self.configs = configs
        self.inputs: list[Path] = []
        self.outputs: list[Path] = []
        self.t0 = time.perf_counter()

    def input(self, p) -> None:
        if p:
            self.inputs.append(Path(p))

    def output(self, p: Path) -> Path:
        self.outputs.append(Path(p))
        return Path(p)

    def finish(self, default_manifest: Path) -> None:
        path = Path(self.args.manifest) if self.args.manifest else default_manifest
        manifest = RunManifest(
            command=self.args.command + (f" {self.args.target}" if getattr(self.args, "target", None) else ""),
            argv=self.args.argv,
            config=config_json(self.configs),
            config_hash=config_hash(self.configs),
            seed=self.args.seed,
            inputs={str(p): _sha256(p) for p in self.inputs if p.is_file()},
            outputs={str(p): _sha256(p) for p in self.outputs if p.is_file()},
            tool_version=__version__,
            wall_clock_sec=round(time.perf_counter() - self.t0, 3),
        )
        write_json(path, manifest.to_json())


# ---------------------------------------------------------------------------
# commands


def cmd_inject(args, configs, run: Run) -> None:
    sig = _read_signal(args.input)
    run.input(args.input)
    if not args.out or not args.masks:
        raise CliError("usage", "--out and --masks are required")
    segs = segment(sig)
    cfg = configs["injection"]
    try:
        records = inject_all(segs, cfg, args.jobs)
    except InjectionError as exc:
        raise CliError("unclean-input", str(exc)) from None
    corrupted = np.array(sig.samples, dtype=np.float64)
    lines = []
    for i, rec in enumerate(records):
        corrupted[i * SEGMENT_LEN:(i + 1) * SEGMENT_LEN] = rec.corrupted
        # runs are relative to the segment named by the id suffix
        lines.append({**rec.to_json(), "id": f"{sig.id}@{i * SEGMENT_LEN}"})
    write_signal_csv(run.output(Path(args.out)), corrupted)
    write_text(run.output(Path(args.masks)), dump_masks_jsonl(lines))
    run.finish(Path(args.out + ".manifest.json"))


def cmd_build_dataset(args, configs, run: Run) -> None:
    if not args.out:
        raise CliError("usage", "--out is required")
    if args.inputs:
        segs = []
        for p in args.inputs:
            run.input(p)
            segs.extend(segment(_read_signal(p)))
    else:
        segs = clean_segments(args.segments, args.seed, configs["sim"])
    try:
        ds = build_dataset(segs, configs["injection"], args.jobs)
    except InjectionError as exc:
        raise CliError("unclean-input", str(exc)) from None
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ds.save(out)
    run.output(out)
    run.output(Path(str(out) + ".json"))
    run.finish(Path(args.out + ".manifest.json"))


def _split(ds: Dataset, tcfg: TrainConfig):
    sp = split_by_parent(ds.parent, tcfg)
    return ds.subset(sp.train), ds.subset(sp.val), ds.subset(sp.test)


def cmd_train(args, configs, run: Run) -> None:
    ds = _dataset(args.data)
    run.input(args.data)
    if not args.run_dir:
        raise CliError("usage", "--run-dir is required")
    run_dir = Path(args.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    tcfg = dataclasses.replace(configs["train"], stage=args.target)
    train, val, test = _split(ds, tcfg)
    log = (lambda s: print(s, file=sys.stderr)) if args.verbose else None
    try:
        if args.target == "detector":
            model, result = train_stage1(train, val, tcfg, configs["detector"], log=log)
            ckpt = run_dir / "detector.cctg"
            save_detector(ckpt, model)
            pipe = CleanCTG(model)
            report = {"stage": "detector", "test": evaluate_detection(pipe, test).to_json()}
        else:
            if not args.detector or not Path(args.detector).exists():
                raise StageOrderError("stage 2 needs a trained stage-1 detector checkpoint (--detector)")
            run.input(args.detector)
            pipe = _pipeline(args, need_reconstructor=False)
            detector = pipe.detector.float()
            digest = ModelState.from_module(detector).digest()
            model, result = train_stage2(train, val, detector, tcfg, configs["reconstructor"], log=log)
            ckpt = run_dir / "reconstructor.cctg"
            save_reconstructor(ckpt, model, digest)
            pipe = CleanCTG(detector, model)
            report = {"stage": "reconstructor", "test": evaluate_reconstruction(pipe, test).to_json()}
    except StageOrderError as exc:
        raise CliError("stage-order", str(exc)) from None
    except TrainingError as exc:
        raise CliError("diverged", str(exc), exit_code=2) from None
    report.update({
        "best_epoch": result.best_epoch,
        "epochs_run": len(result.history),
        "examples": {"train": len(train), "val": len(val), "test": len(test)},
    })
    run.output(ckpt)
    run.output(Path(str(ckpt) + ".json"))
    run.output(write_json(run_dir / "config.json", config_json(configs)))
    run.output(write_text(run_dir / "metrics.csv", history_csv(result.history)))
    run.output(write_json(run_dir / "report.json", report))
    run.finish(run_dir / "manifest.json")


def cmd_detect(args, configs, run: Run) -> None:
    sig = _read_signal(args.input)
    run.input(args.input)
    run.input(args.detector)
    pipe = _pipeline(args, need_reconstructor=False)
    segs = segment(sig)
    x = np.stack([s.values for s in segs])
    out = pipe.run_bpm(np.repeat(x, SLICES_PER_SEGMENT, axis=0),
                       np.tile(np.arange(SLICES_PER_SEGMENT) * 60, len(segs)))
    reports = slice_reports(out, np.tile(np.arange(SLICES_PER_SEGMENT) * 60, len(segs)))
    for i, r in enumerate(reports):
        r["segment"] = i // SLICES_PER_SEGMENT
    target = run.output(write_json(args.out or "detect.json", {"id": sig.id, "slices": reports}))
    run.finish(Path(str(target) + ".manifest.json"))


def cmd_denoise(args, configs, run: Run) -> None:
    sig = _read_signal(args.input)
    run.input(args.input)
    run.input(args.detector)
    run.input(args.reconstructor)
    pipe = _pipeline(args, need_reconstructor=True)
    if not args.out:
        raise CliError("usage", "--out is required")
    try:
        cleaned, report = pipe.denoise_signal(sig)
    except ValueError as exc:
        raise CliError("shape", str(exc)) from None
    write_signal_csv(run.output(Path(args.out)), cleaned.samples)
    report["all_gates_off"] = all(not any(s["gates"].values()) for s in report["slices"])
    run.output(write_json(args.report or args.out + ".report.json", report))
    run.finish(Path(args.out + ".manifest.json"))


def _eval_subset(args, ds: Dataset, configs) -> Dataset:
    if args.split == "all":
        return ds
    _, _, test = _split(ds, configs["train"])
    return test


def cmd_eval(args, configs, run: Run) -> None:
    ds = _eval_subset(args, _dataset(args.data), configs)
    run.input(args.data)
    run.input(args.detector)
    if args.target == "detect":
        pipe = _pipeline(args, need_reconstructor=False)
        report = evaluate_detection(pipe, ds).to_json()
    else:
        run.input(args.reconstructor)
        pipe = _pipeline(args, need_reconstructor=True)
        ev = evaluate_reconstruction(pipe, ds)
        report = {
            "mse_corrupt": ev.reports["cleanctg"].mse_corrupt,
            "mse_clean": ev.reports["cleanctg"].mse_clean,
            "per_class": {m: r.per_class for m, r in ev.reports.items()},
            **ev.to_json(),
        }
    report["examples"] = len(ds)
    target = run.output(write_json(args.out or f"eval_{args.target}.json", report))
    run.finish(Path(str(target) + ".manifest.json"))


def _lengths(spec: str) -> list[int]:
    try:
        if ":" in spec:
            lo, hi = (int(v) for v in spec.split(":"))
            return list(range(lo, hi + 1))
        return [int(v) for v in spec.split(",")]
    except ValueError:
        raise CliError("usage", f"bad --lengths {spec!r}; use lo:hi or a,b,c") from None


def cmd_sweep(args, configs, run: Run) -> None:
    lengths = _lengths(args.lengths)
    if any(not 0 <= n <= 60 for n in lengths):
        raise CliError("usage", "run lengths must lie in 0..60")
    pipe = None
    if args.detector:
        run.input(args.detector)
        run.input(args.reconstructor)
        pipe = _pipeline(args, need_reconstructor=True)
    segs = clean_segments(args.segments, args.seed, configs["sim"])
    cases = make_sweep_cases(segs, lengths, args.per_length, args.seed, inj_cfg=configs["injection"])
    curves = length_sweep(sweep_methods(pipe), cases)
    out_dir = Path(args.out_dir or "sweep")
    run.output(write_json(out_dir / "sweep.json", {
        "per_length": args.per_length,
        "curves": {m: {str(k): v for k, v in c.items()} for m, c in curves.items()},
    }))
    for name, curve in curves.items():
        run.output(write_text(out_dir / f"sweep_{name}.csv", sweep_to_csv(curve)))
    run.finish(out_dir / "manifest.json")


def cmd_screen(args, configs, run: Run) -> None:
    sig = _read_signal(args.input)
    run.input(args.input)
    try:
        decision = time_to_decision(sig, configs["screen"])
    except SignalError as exc:
        raise CliError("shape", str(exc)) from None
    target = run.output(write_json(args.out or "screen.json", {
        "id": sig.id, "criteria": configs["screen"].to_dict(), **decision.to_json(),
    }))
    run.finish(Path(str(target) + ".manifest.json"))


def cmd_compare(args, configs, run: Run) -> None:
    run.input(args.detector)
    run.input(args.reconstructor)
    pipe = _pipeline(args, need_reconstructor=True)
    cohort = make_cohort(args.traces, args.seed, configs["injection"], configs["sim"], args.jobs)
    denoised = denoise_traces(pipe, cohort.corrupted)
    pairs = screen_cohort(cohort, denoised, configs["screen"], args.jobs)
    summary = cohort_summary(pairs)
    out_dir = Path(args.out_dir or "compare")
    run.output(write_text(out_dir / "pairs.jsonl", "".join(json.dumps(p.to_json(), sort_keys=True) + "\n"
                                                           for p in pairs)))
    run.output(write_json(out_dir / "summary.json", summary))
    run.output(write_text(out_dir / "summary.csv", summary_csv(summary)))
    run.finish(out_dir / "manifest.json")


COMMANDS = {
    "inject": cmd_inject,
    "build-dataset": cmd_build_dataset,
    "train": cmd_train,
    "detect": cmd_detect,
    "denoise": cmd_denoise,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "screen": cmd_screen,
    "compare": cmd_compare,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message)


def _default_seed() -> int:
    raw = os.environ.get("CLEANCTG_SEED", "0")
    try:
        return int(raw)
    except ValueError:
        raise CliError("usage", f"CLEANCTG_SEED must be an integer, got {raw!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed (default: $CLEANCTG_SEED or 0)")
    common.add_argument("--config", help="JSON file of dotted-path overrides, e.g. {\"train.lr\": 5e-4}")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for per-segment work")
    common.add_argument("--manifest", help="where to write the run manifest")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="cleanctg", description="FHR artefact detection and reconstruction workbench")
    p.add_argument("--version", action="version", version=f"cleanctg {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("inject", parents=[common], help="corrupt a clean trace with synthetic artefacts")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--masks", required=True)

    s = sub.add_parser("build-dataset", parents=[common], help="inject and slice clean segments")
    s.add_argument("--in", dest="inputs", nargs="*", help="clean CSV traces (default: synthetic)")
    s.add_argument("--segments", type=int, default=500, help="synthetic 10-minute segments")
    s.add_argument("--out", required=True)

    s = sub.add_parser("train", parents=[common], help="train one stage")
    s.add_argument("target", choices=["detector", "reconstructor"])
    s.add_argument("--data", required=True)
    s.add_argument("--run-dir", required=True)
    s.add_argument("--detector")
    s.add_argument("--reconstructor", help=argparse.SUPPRESS)

    s = sub.add_parser("detect", parents=[common], help="per-slice artefact probabilities")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--detector", required=True)
    s.add_argument("--reconstructor", help=argparse.SUPPRESS)
    s.add_argument("--out")

    s = sub.add_parser("denoise", parents=[common], help="clean a trace")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--detector", required=True)
    s.add_argument("--reconstructor", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--report")

    s = sub.add_parser("eval", parents=[common], help="evaluate on a dataset")
    s.add_argument("target", choices=["detect", "reconstruct"])
    s.add_argument("--data", required=True)
    s.add_argument("--detector", required=True)
    s.add_argument("--reconstructor")
    s.add_argument("--split", choices=["all", "test"], default="all")
    s.add_argument("--out")

    s = sub.add_parser("sweep", parents=[common], help="MSE against corruption run length")
    s.add_argument("--detector")
    s.add_argument("--reconstructor")
    s.add_argument("--segments", type=int, default=200)
    s.add_argument("--per-length", type=int, default=200)
    s.add_argument("--lengths", default="3:60")
    s.add_argument("--out-dir")

    s = sub.add_parser("screen", parents=[common], help="time to decision on a 60-minute trace")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out")

    s = sub.add_parser("compare", parents=[common], help="paired screen on a synthetic cohort")
    s.add_argument("--detector", required=True)
    s.add_argument("--reconstructor", required=True)
    s.add_argument("--traces", type=int, default=200)
    s.add_argument("--out-dir")
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        args.argv = argv
        if args.seed is None:
            args.seed = _default_seed()
        if args.jobs < 1:
            raise CliError("usage", "--jobs must be at least 1")
        torch.manual_seed(args.seed)
        configs = load_configs(args.config, args.seed)
        run = Run(args, configs)
        if args.config:
            run.input(args.config)
        COMMANDS[args.command](args, configs, run)
        return 0
    except CliError as exc:
        print(f"ERROR {exc.code}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ShapeError, SignalError) as exc:
        print(f"ERROR shape: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, InjectionError) as exc:
        print(f"ERROR config: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        msg = str(exc).replace("\n", " ")
        print(f"ERROR runtime: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
