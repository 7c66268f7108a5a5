import csv
import subprocess
import sys

import numpy as np
import pytest

from gazedec.calibration import RecordTable, write_records_csv
from gazedec.cli import main

TINY_CFG = """s = 20
p = 3
overlaps = 0, 0.5
i_tr_list = 2, 5
j_tr = 10
trials = 2
test_subjects = 5
test_per_subject = 20
"""


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "tiny.cfg"
    p.write_text(TINY_CFG)
    return p


@pytest.fixture
def bias_csv(tmp_path):
    rng = np.random.default_rng(0)
    subj, g, t = [], [], []
    for k, off in enumerate([(1.0, 2.0), (-3.0, 0.5)]):
        gk = rng.uniform(-10, 10, (300, 2))
        subj += [f"p{k}"] * 300
        g.append(gk)
        t.append(gk - off)
    path = tmp_path / "rec.csv"
    write_records_csv(path, RecordTable(np.array(subj), np.vstack(g), np.vstack(t)))
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_simulate(cfg_path, tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["simulate", "--config", str(cfg_path), "--out", str(out), "--threads", "2"]) == 0
    rows = read_csv(out / "results.csv")
    assert len(rows) == 2 * 2 * 2 * 4
    assert "crossover" in capsys.readouterr().out


def test_simulate_seed_precedence(cfg_path, tmp_path, monkeypatch):
    def run(name, *extra):
        main(["simulate", "--config", str(cfg_path), "--out", str(tmp_path / name), *extra])
        return (tmp_path / name / "results.csv").read_text()

    base = run("a")
    monkeypatch.setenv("GAZEDEC_SEED", "7")
    env = run("b")
    assert env != base
    assert run("c", "--seed", "7") == env
    assert run("d", "--seed", "0") == base


def test_theorem_check_1(capsys):
    assert main(["theorem-check", "--which", "1", "--seeds", "10"]) == 0
    assert "PASS" in capsys.readouterr().out


def test_calibrate_constant_bias(bias_csv, tmp_path):
    out = tmp_path / "cal.csv"
    for proto in ("sgtc", "mgtc"):
        assert main(["calibrate", "--records", str(bias_csv), "--sigma0", "2", "--sigmat", "0",
                     "--S", "1", "--T", "1", "--trials", "5", "--protocol", proto,
                     "--out", str(out)]) == 0
        rows = read_csv(out)
        assert [r["subject_id"] for r in rows] == ["p0", "p1", "ALL"]
        assert all(float(r["calibrated_error_deg"]) < 1e-9 for r in rows)
        assert all(float(r["uncalibrated_error_deg"]) > 0.5 for r in rows)


def test_region_sweep(bias_csv, tmp_path):
    out = tmp_path / "sweep.csv"
    assert main(["region-sweep", "--records", str(bias_csv), "--sigma0", "2", "--sigmat", "0",
                 "--S", "3", "--grid-n", "2", "--out", str(out)]) == 0
    rows = read_csv(out)
    assert len(rows) == 16
    assert all(float(r["mean_error_deg"]) < 1e-9 for r in rows if r["mean_error_deg"])


def test_bad_input_exit_code(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("nope\n")
    assert main(["calibrate", "--records", str(bad), "--sigma0", "1", "--sigmat", "1"]) == 2
    assert main(["calibrate", "--records", str(tmp_path / "missing.csv"), "--sigma0", "1",
                 "--sigmat", "1"]) == 2
    assert main(["calibrate", "--records", str(bad), "--sigma0", "0", "--sigmat", "1"]) == 2


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "gazedec.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "simulate" in r.stdout
