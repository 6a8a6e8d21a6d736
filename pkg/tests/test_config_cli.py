import csv
import json

import numpy as np
import pytest

from rwpm.cli import CLAIMS, EXPERIMENTS, list_claims, main, resolve_op, run
from rwpm.config import ConfigError, default_config, load_config, parse_config

BASE = """
[kernel]
gamma = 0.75
[experiment]
name = simulate-z
"""


def read_rows(path):
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0].startswith("# config_hash=")
    return list(csv.DictReader(lines[1:]))


def test_defaults_filled():
    cfg = parse_config(BASE)
    assert cfg.kernel["gamma"] == 0.75 and cfg.kernel["slow_var"] == "constant"
    assert cfg.disorder["rho"] == [0.5] and cfg.experiment["workers"] == 1


@pytest.mark.parametrize("text, where", [
    (BASE + "gama = 0.5\n", "[experiment] gama"),
    (BASE.replace("gamma = 0.75", "gamma = 0.75\nkapa = 1"), "[kernel] kapa"),
    (BASE + "[model]\nstepp = 0.1\n", "[model] stepp"),
    (BASE + "[output]\ndir = x\n", "[output]"),
    (BASE + "[disorder]\nrho = 1.5\n", "[disorder] rho"),
    ("[kernel]\ngamma = 0.75\n", "[experiment]"),
    (BASE.replace("gamma = 0.75", "slow_var = constant"), "[kernel] gamma"),
    (BASE.replace("0.75", "abc"), "[kernel] gamma"),
    (BASE.replace("0.75", "1.5"), "[kernel]"),
])
def test_strict_parsing_names_location(text, where):
    with pytest.raises(ConfigError) as exc:
        parse_config(text, "run.ini")
    assert "run.ini" in str(exc.value) and where in str(exc.value)


def test_keys_are_case_sensitive():
    cfg = parse_config(BASE + "R = 7\n")
    assert cfg.experiment["R"] == 7.0
    with pytest.raises(ConfigError, match="r: unknown key"):
        parse_config(BASE + "r = 7\n")


def test_hash_ignores_formatting():
    a = parse_config(BASE)
    b = parse_config("# comment\n[experiment]\nname=simulate-z\n\n[kernel]\ngamma =   0.75\n")
    assert a.hash == b.hash
    assert parse_config(BASE.replace("0.75", "0.7")).hash != a.hash


def test_overrides_are_checked():
    cfg = default_config("homogeneous")
    assert cfg.with_overrides("disorder", seed=3).disorder["seed"] == 3
    with pytest.raises(ConfigError):
        cfg.with_overrides("disorder", sed=3)


def test_load_config(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text(BASE, encoding="utf-8")
    assert load_config(path).source == str(path)


def test_homogeneous_has_critical_row(tmp_path):
    run(default_config("homogeneous"), tmp_path)
    rows = read_rows(tmp_path / "free_energy.csv")
    assert len(rows) == 40 and float(rows[0]["F"]) == 0.0
    assert all(float(a["F"]) <= float(b["F"]) for a, b in zip(rows, rows[1:]))
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["outputs"] == sorted(["free_energy.csv", "renewal.csv", "homogeneous_summary.txt"])
    assert manifest["config_hash"] == default_config("homogeneous").hash


def _simulate(tmp_path, name, workers):
    out = tmp_path / name
    cfg = parse_config(BASE + "[disorder]\nrho = 0.5\nT = 8\nsamples = 6\nseed = 11\n")
    run(cfg, out, workers=workers, method="both")
    return (out / "simulate_z.csv").read_bytes()


def test_same_config_same_bytes(tmp_path):
    first = _simulate(tmp_path, "a", 1)
    assert first == _simulate(tmp_path, "b", 1)
    assert first == _simulate(tmp_path, "c", 2)


def test_simulate_z_columns(tmp_path):
    _simulate(tmp_path, "a", 1)
    rows = read_rows(tmp_path / "a" / "simulate_z.csv")
    assert list(rows[0]) == ["sample_id", "method", "kind", "value", "log_value", "stderr"]
    assert {r["method"] for r in rows} == {"volterra", "mc"}
    value = rows[0]["value"]
    assert len(value.replace(".", "").replace("-", "").split("e")[0].lstrip("0")) <= 17


def test_criticality_two_rows(tmp_path):
    cfg = parse_config("[kernel]\ngamma = 0.75\n[experiment]\nname = criticality\n"
                       "[disorder]\nrho = 0, 0.5\nT = 10 20 40\nsamples = 12\n")
    run(cfg, tmp_path)
    rows = [r for r in read_rows(tmp_path / "criticality.csv") if r["statistic"] == "slope log median"]
    assert [float(r["rho"]) for r in rows] == [0.0, 0.5]
    assert abs(float(rows[0]["value"])) <= 1e-6


def test_main_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text(BASE + "[disorder]\nsamplez = 3\n", encoding="utf-8")
    assert main(["simulate-z", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert "[disorder] samplez" in capsys.readouterr().err
    assert main(["simulate-z", "--T", "-1", "--out", str(tmp_path)]) == 1
    assert main(["simulate-z", "--T", "4", "--samples", "2", "--out", str(tmp_path / "ok")]) == 0


def test_claims_registry(capsys):
    assert len(CLAIMS) >= 13
    for claim in CLAIMS:
        for op in claim.ops:
            assert callable(resolve_op(op))
    text = list_claims()
    assert all(c.claim_id in text for c in CLAIMS)
    assert main(["claims"]) == 0
    assert "criticality decay" in capsys.readouterr().out


def test_every_experiment_has_subcommand():
    for name in EXPERIMENTS:
        with pytest.raises(SystemExit) as exc:
            main([name, "--help"])
        assert exc.value.code == 0
