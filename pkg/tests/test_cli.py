import csv
import subprocess
import sys

import pytest

from sgdoverfit.cli import main, read_config
from sgdoverfit.errors import ConfigError
from sgdoverfit.packing import PackingSet


def test_gen_packing_round_trip(tmp_path, capsys):
    out = tmp_path / "pk.txt"
    assert main(["gen-packing", "--kind", "SignedEighth", "--d", "64", "--m", "4", "--seed", "1",
                 "--out", str(out)]) == 0
    assert "passed=True" in capsys.readouterr().out
    ps = PackingSet.load(out)
    assert ps.m == 4 and ps.d_prime == 64 and out.read_text().split("\n")[0].split()[0] == "SignedEighth"


def test_lower_bound_writes_csv(tmp_path, capsys):
    out = tmp_path / "lb.csv"
    code = main(["lower-bound", "--variant", "small-k", "--mode", "scaled", "--trials", "3",
                 "--seed", "2", "--out", str(out)])
    assert code == 0
    assert "LowerBoundSmallK" in capsys.readouterr().out
    rows = list(csv.DictReader(out.open()))
    assert len(rows) == 3 and {r["mode"] for r in rows} == {"Scaled"} and rows[0]["seed"] == "2"


def test_config_file_and_flag_precedence(tmp_path, capsys):
    cfg = tmp_path / "c.txt"
    cfg.write_text("# coupon settings\nn=16\ntrials=40\nseed=3\n")
    assert main(["coupon", "--config", str(cfg), "--n", "1"]) == 0
    out = capsys.readouterr().out
    assert "'n': 1" in out and "'trials': 40" in out


def test_config_errors(tmp_path, capsys):
    bad = tmp_path / "bad.txt"
    bad.write_text("n=4\ncolour=blue\n")
    with pytest.raises(ConfigError):
        read_config(bad)
    assert main(["coupon", "--config", str(bad)]) == 2
    bad.write_text("n 4\n")
    assert main(["coupon", "--config", str(bad)]) == 2
    assert main(["coupon", "--config", str(tmp_path / "missing.txt")]) == 2
    assert main(["lower-bound", "--trials", "1"]) == 2
    assert main(["coverage", "--n", "13"]) == 2
    assert main(["lower-bound", "--variant", "small-k", "--n", "13"]) == 2
    assert main(["verify", "--fault", "nope"]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["sweep", "--mode", "loose"])
    assert exc.value.code == 2
    assert "config error" in capsys.readouterr().err


def test_check_failure_exit_code(capsys):
    # full coverage at delta = 1 violates the <= 0.45 check
    assert main(["coverage", "--n", "4", "--delta", "1", "--trials", "10"]) == 1
    assert "FAIL" in capsys.readouterr().out


def test_sweep_command(tmp_path, capsys):
    out = tmp_path / "sweep.csv"
    assert main(["sweep", "--mode", "scaled", "--trials", "2", "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert {"eta", "epoch", "measured", "envelope", "seed", "mode", "version"} <= set(rows[0])


def test_verify_fault_exit(tmp_path):
    out = tmp_path / "verify.txt"
    assert main(["verify", "--fault", "radius0.5", "--out", str(out)]) == 1
    assert "FAIL no-projection-OnePass" in out.read_text()


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "sgdoverfit.cli", "coupon", "--n", "1",
                           "--trials", "5"], capture_output=True, text=True)
    assert proc.returncode == 0 and "coupon: PASS" in proc.stdout
