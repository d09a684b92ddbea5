import json
from pathlib import Path

import numpy as np
import pytest

from cleanctg.cli import load_configs, main
from cleanctg.signal import read_signal_csv, write_signal_csv
from cleanctg.synth import simulate_fhr


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    write_signal_csv("clean.csv", simulate_fhr(1200, np.random.default_rng(0)))
    return tmp_path


def _error_line(capsys) -> str:
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1
    return err[0]


def test_inject_is_byte_identical_for_a_seed(workdir):
    assert main(["inject", "--in", "clean.csv", "--out", "a.csv", "--masks", "a.jsonl", "--seed", "3"]) == 0
    assert main(["inject", "--in", "clean.csv", "--out", "b.csv", "--masks", "b.jsonl", "--seed", "3"]) == 0
    assert Path("a.csv").read_bytes() == Path("b.csv").read_bytes()
    assert Path("a.jsonl").read_bytes() == Path("b.jsonl").read_bytes()
    assert main(["inject", "--in", "clean.csv", "--out", "c.csv", "--masks", "c.jsonl", "--seed", "4"]) == 0
    assert Path("a.csv").read_bytes() != Path("c.csv").read_bytes()


def test_inject_writes_manifest(workdir):
    assert main(["inject", "--in", "clean.csv", "--out", "a.csv", "--masks", "a.jsonl", "--seed", "3"]) == 0
    manifests = list(Path(".").glob("*manifest*"))
    assert manifests
    m = json.loads(manifests[0].read_text())
    for key in ("command", "argv", "config", "config_hash", "seed", "inputs", "outputs", "tool_version",
                "wall_clock_sec"):
        assert key in m
    assert m["seed"] == 3


def test_missing_input_is_validation_error(workdir, capsys):
    assert main(["inject", "--in", "nope.csv", "--out", "a.csv", "--masks", "a.jsonl"]) == 1
    line = _error_line(capsys)
    assert line.startswith("ERROR ") and not line.startswith("ERROR usage")


def test_unknown_argument_is_validation_error(workdir, capsys):
    assert main(["inject", "--bogus"]) == 1
    assert _error_line(capsys).startswith("ERROR usage:")


def test_unknown_config_path_rejected(workdir, capsys):
    Path("bad.json").write_text(json.dumps({"train.nonsense": 1}))
    assert main(["inject", "--in", "clean.csv", "--out", "a.csv", "--masks", "a.jsonl",
                 "--config", "bad.json"]) == 1
    assert _error_line(capsys).startswith("ERROR config:")


def test_corrupt_checkpoint_is_reported(workdir, capsys):
    Path("det.cctg").write_bytes(b"not a checkpoint")
    code = main(["detect", "--in", "clean.csv", "--detector", "det.cctg", "--out", "d.json"])
    assert code in (1, 2)
    assert _error_line(capsys).startswith("ERROR ")


def test_dotted_and_nested_overrides_agree(workdir):
    Path("a.json").write_text(json.dumps({"train.lr": 5e-4, "detector.heads": 2}))
    Path("b.json").write_text(json.dumps({"train": {"lr": 5e-4}, "detector": {"heads": 2}}))
    a, b = load_configs("a.json", 0), load_configs("b.json", 0)
    assert a["train"].lr == b["train"].lr == 5e-4
    assert a["detector"].heads == b["detector"].heads == 2


def test_seed_flows_into_configs():
    cfg = load_configs(None, 17)
    assert cfg["injection"].seed == 17 and cfg["train"].seed == 17


def test_screen_command(workdir):
    write_signal_csv("long.csv", simulate_fhr(3600, np.random.default_rng(1)))
    assert main(["screen", "--in", "long.csv", "--out", "s.json"]) == 0
    rep = json.loads(Path("s.json").read_text())
    assert {"criteria", "decision_minute", "verdict", "trace"} <= set(rep)


def test_denoise_clean_trace_with_desk_models(workdir, desk_models):
    assert main(["denoise", "--in", "clean.csv", "--detector", str(desk_models.detector_path),
                 "--reconstructor", str(desk_models.reconstructor_path), "--out", "d.csv"]) == 0
    report = json.loads(Path("d.csv.report.json").read_text())
    assert report["all_gates_off"]
    assert np.allclose(read_signal_csv("d.csv").samples, read_signal_csv("clean.csv").samples, atol=1e-9)


def test_eval_reconstruct_reports_all_methods(workdir, desk_models):
    assert main(["build-dataset", "--segments", "10", "--out", "ds.cctg", "--seed", "2"]) == 0
    assert main(["eval", "reconstruct", "--data", "ds.cctg", "--split", "all", "--detector",
                 str(desk_models.detector_path), "--reconstructor", str(desk_models.reconstructor_path),
                 "--out", "er.json"]) == 0
    rep = json.loads(Path("er.json").read_text())
    assert set(rep["methods"]) >= {"cleanctg", "linear", "ar"}
    for m in rep["methods"].values():
        assert {"mse_corrupt", "mse_clean", "per_class"} <= set(m)
