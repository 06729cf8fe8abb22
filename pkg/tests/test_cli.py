import json
import subprocess
import sys

import pytest

from normfree_fl.cli import main

CONFIG = """\
dataset: {domains: 2, train_per_domain: 16, test_per_domain: 8, image_shape: [1, 16, 16]}
federation: {algorithm: FedBN, rounds: 1, batch_size: 4}
seeds: [0]
output_dir: runs/tiny
"""


@pytest.fixture
def config(tmp_path, monkeypatch):
    monkeypatch.setenv("NFFL_OUTPUT_ROOT", str(tmp_path / "root"))
    p = tmp_path / "cfg.yaml"
    p.write_text(CONFIG)
    return p


def _error(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def test_run_report_and_bn_stats(config, tmp_path, capsys):
    assert main(["run", str(config), "--quiet"]) == 0
    out = capsys.readouterr().out
    run_dir = tmp_path / "root" / "runs" / "tiny"
    assert "Average" in out and str(run_dir) in out
    assert main(["run", str(config), "--quiet", "--set", "federation.algorithm=FedAvg",
                 "--out", str(tmp_path / "avg")]) == 0
    capsys.readouterr()
    csv_out = tmp_path / "table.csv"
    assert main(["report", str(run_dir / "summary.json"), str(tmp_path / "avg" / "summary.json"),
                 "--csv", str(csv_out)]) == 0
    assert capsys.readouterr().out.splitlines()[0].split() == ["FedBN", "FedAvg"]
    assert csv_out.read_text().startswith("row,FedBN_mean")
    assert main(["bn-stats", str(run_dir / "checkpoints" / "seed0_final.json"), "--layer", "2"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].startswith("channel,client0_mean,client0_var") and len(lines) == 1 + 8


def test_dump_data(config, tmp_path, capsys):
    assert main(["dump-data", str(config), "--out", str(tmp_path / "data")]) == 0
    assert (tmp_path / "data").is_dir() and any((tmp_path / "data").iterdir())


def test_errors_are_json_lines(config, tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("federation:\n  algorithm: FedBN\n  fraction: 0.1\n")
    assert main(["run", str(bad)]) == 1
    err = _error(capsys)
    assert err["error"] == "config" and err["type"] == "ConstraintViolation" and "line 3" in err["message"]
    bad.write_text("federation:\n  colour: 1\n")
    assert main(["run", str(bad)]) == 1
    assert _error(capsys)["type"] == "ParseError"
    assert main(["run", str(config), "--set", "federation.algorithm=FedAvg", "--set", "federation.batch_size=1"]) == 1
    assert _error(capsys)["type"] == "DegenerateBatch"
    assert main(["run", str(tmp_path / "missing.yaml")]) == 1
    assert _error(capsys)["error"] == "io"
    s1, s2 = tmp_path / "a.json", tmp_path / "b.json"
    base = {"label": "a", "algorithm": "FedWon", "seeds": [0], "final_acc": [[0.5]], "domain_mean": [0.5],
            "domain_std": [0.0], "overall_mean": 0.5, "overall_std": 0.0, "fingerprint": "x",
            "dataset_fingerprint": "d1", "final_loss": [1.0]}
    s1.write_text(json.dumps(base))
    s2.write_text(json.dumps(dict(base, dataset_fingerprint="d2")))
    assert main(["report", str(s1), str(s2)]) == 1
    assert _error(capsys)["type"] == "FingerprintMismatch"


def test_usage_error_exit_code():
    assert main(["frobnicate"]) == 2


def test_module_entry_point(config):
    proc = subprocess.run([sys.executable, "-m", "normfree_fl", "run", str(config), "--set", "federation.fraction=0.5"],
                          capture_output=True, text=True)
    assert proc.returncode == 1
    assert json.loads(proc.stderr.strip())["type"] == "ConstraintViolation"
