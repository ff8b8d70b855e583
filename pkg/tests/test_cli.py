import json
import time

import pytest

from nccz.cli import main

SMOKE = """
[space]
dim = 1
side = 16
[field]
dim = 2
[experiment]
trials = 3
seed = 3
sides = [16, 32]
"""


@pytest.fixture
def smoke(tmp_path):
    path = tmp_path / "smoke.cfg"
    path.write_text(SMOKE)
    return path


def test_verify_identities_smoke(smoke, tmp_path):
    t0 = time.perf_counter()
    code = main(["verify", "identities", "--config", str(smoke), "--out", str(tmp_path / "o")])
    assert code == 0 and time.perf_counter() - t0 < 30
    report = json.loads((tmp_path / "o" / "report.json").read_text())
    assert report["schema_version"] and report["suites"]
    assert (tmp_path / "o" / "suites.csv").read_text().startswith("suite,kind,pass")


def test_missing_config_exits_2(tmp_path, capsys):
    assert main(["verify", "identities", "--config", str(tmp_path / "nope.cfg")]) == 2
    assert "not found" in capsys.readouterr().err


def test_bad_config_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("[space]\nside = 16\nwhat = 1\n")
    assert main(["cz", "run", "--config", str(bad)]) == 2
    assert "bad.cfg:3" in capsys.readouterr().err


def test_sweeps_write_tables_and_plot_data(smoke, tmp_path):
    assert main(["verify", "weak11", "--config", str(smoke), "--out", str(tmp_path / "w")]) == 0
    assert (tmp_path / "w" / "weak11_trend.dat").read_text().startswith("# side max_R")
    assert main(["verify", "strongpp", "--config", str(smoke), "--out", str(tmp_path / "s"),
                 "--seed", "9"]) == 0
    report = json.loads((tmp_path / "s" / "report.json").read_text())
    assert report["config"]["seed"] == 9
    assert (tmp_path / "s" / "strongpp_profile_N32.dat").exists()


def test_report_merge(smoke, tmp_path):
    for name in ("a", "b"):
        main(["verify", "identities", "--config", str(smoke), "--out", str(tmp_path / name)])
    out = tmp_path / "m.json"
    code = main(["report", "merge", str(tmp_path / "a" / "report.json"),
                 str(tmp_path / "b" / "report.json"), "--out", str(out)])
    merged = json.loads(out.read_text())
    assert code == 0 and len(merged["sources"]) == 2


def test_utility_commands(tmp_path, capsys):
    assert main(["space", "probe", "--side", "16"]) == 0
    assert json.loads(capsys.readouterr().out)["annular_eps"] > 0
    assert main(["cubes", "build", "--dim", "2", "--side", "8"]) == 0
    assert json.loads(capsys.readouterr().out)["certification"]["passed"]
    assert main(["weights", "ap", "--side", "8", "--kind", "step", "--csv", str(tmp_path / "w.csv")]) == 0
    assert json.loads(capsys.readouterr().out)["characteristic"] >= 1
    assert main(["bogus"]) == 2


def test_interrupt_flushes_partial_report(smoke, tmp_path, monkeypatch):
    from nccz import harness

    def boom(*args, **kwargs):
        raise KeyboardInterrupt

    monkeypatch.setattr(harness, "run_identities", boom)
    code = main(["verify", "identities", "--config", str(smoke), "--out", str(tmp_path / "i")])
    assert code == 130
    report = json.loads((tmp_path / "i" / "report.json").read_text())
    assert report["interrupted"] is True
