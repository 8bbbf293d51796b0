import json
from pathlib import Path

import pytest

from gspmarket.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

SMALL = """\
seed: 11
market:
  generate: {constructing: 30, adhering: 20, participation: 0.5}
  ctr: {K: 10}
  periods: 80
  auctions_per_period: 30
counterfactual:
  slots: [0, 1, 3]
  fallbacks: [polynomial]
  bounds: [lower, upper]
  adherence_prob: 0.4
calibration: {target_rate: 0.1, grid_step: 0.05, periods: 80}
did: {pre_periods: 8, post_periods: 8}
simulate: {periods: 20, fixture_days: 6}
"""


@pytest.fixture()
def small(tmp_path):
    p = tmp_path / "small.yaml"
    p.write_text(SMALL, encoding="utf-8")
    return p


def snapshot(d: Path) -> dict:
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


def run(*argv):
    return main([str(a) for a in argv])


def test_simulate_minimal_trace(tmp_path, capsys):
    out = tmp_path / "o"
    assert run("simulate", "--config", CONFIGS / "minimal.yaml", "--out", out) == EXIT_OK
    lines = (out / "trace.csv").read_text().splitlines()
    # alice outranks bob (0.2*10 > 0.1*6) and pays 0.1*6/0.2 per click
    assert lines[1] == "0,alice,10.0000,10.0000,1,3.0000,0"
    assert lines[2] == "0,bob,6.0000,6.0000,2,,0"
    man = json.loads((out / "manifest.json").read_text())
    assert set(man["outputs"]) == {"trace.csv", "summary.json"}
    assert "revenue per period 15.0000" in capsys.readouterr().out


@pytest.mark.parametrize("command, extra", [
    ("simulate", ["--fixture"]),
    ("calibrate", []),
    ("did", []),
    ("did", ["--planted"]),
])
def test_commands_are_byte_reproducible(tmp_path, small, command, extra):
    outs = []
    for k in range(2):
        out = tmp_path / f"{command}{k}"
        assert run(command, "--config", small, "--out", out, *extra) == EXIT_OK
        outs.append(snapshot(out))
    assert outs[0] == outs[1]
    assert "manifest.json" in outs[0]


def test_counterfactual_serial_equals_parallel(tmp_path, small, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("counterfactual", "--config", small, "--out", a, "--threads", 1) == EXIT_OK
    assert run("counterfactual", "--config", small, "--out", b, "--threads", 2) == EXIT_OK
    assert snapshot(a) == snapshot(b)
    rows = (a / "counterfactual.csv").read_text().strip().splitlines()
    assert len(rows) == 1 + 3 * 2
    assert run("counterfactual", "--config", small, "--out", tmp_path / "c", "--slots", "0") == 0
    rows = (tmp_path / "c" / "counterfactual.csv").read_text().strip().splitlines()
    assert [r.split(",")[2] for r in rows[1:]] == ["0", "0"]


def test_estimate_round_trip(tmp_path, small, capsys):
    sim, est = tmp_path / "sim", tmp_path / "est"
    assert run("simulate", "--config", small, "--out", sim, "--fixture") == EXIT_OK
    capsys.readouterr()
    args = ["estimate", "--config", small, "--bids", sim / "bids.csv",
            "--events", sim / "events.csv"]
    assert run(*args, "--out", est) == EXIT_OK
    printed = capsys.readouterr().out
    assert "median_relative_error" in printed and "censored_count" in printed
    assert {"pseudo-values.csv", "valuation-kde.json", "bounds.csv", "metrics.json",
            "manifest.json"} <= set(snapshot(est))
    assert (est / "bounds.csv").read_text().splitlines()[0].endswith("censored_count")
    metrics = json.loads((est / "metrics.json").read_text())
    assert metrics["bounds_coverage"] == 1.0
    assert run(*args, "--out", tmp_path / "est2") == EXIT_OK
    assert snapshot(est) == snapshot(tmp_path / "est2")


def test_estimate_empty_panel_fails(tmp_path, small, capsys):
    bids = tmp_path / "bids.csv"
    bids.write_text("bidder_id,day,bid\n")
    assert run("estimate", "--config", small, "--bids", bids, "--out", tmp_path / "e") == EXIT_DATA
    assert "bid panel is empty" in capsys.readouterr().err


def test_schema_error_names_row_and_column(tmp_path, small, capsys):
    bids = tmp_path / "bids.csv"
    bids.write_text("bidder_id,day,bid\na,0,1.5\nb,zero,2\n")
    assert run("estimate", "--config", small, "--bids", bids, "--out", tmp_path / "e") == EXIT_DATA
    assert "row 3, column 'day'" in capsys.readouterr().err


def test_config_error_is_line_precise(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("seed: 1\nmarket:\n  rec_slots: -1\n")
    assert run("simulate", "--config", bad, "--out", tmp_path / "o") == EXIT_DATA
    assert "bad.yaml:3:14: market.rec_slots" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [
    ["calibrate", "--target", "1.5"],
    ["counterfactual", "--slots", "0,x"],
    ["counterfactual", "--threads", "0"],
    ["frobnicate"],
    [],
])
def test_usage_errors(argv, capsys):
    assert main(argv) == EXIT_USAGE


def test_unreachable_calibration_target(tmp_path, small, capsys):
    assert run("calibrate", "--config", small, "--target", "0.9", "--out", tmp_path / "c") == EXIT_DATA
    assert "outside attainable range" in capsys.readouterr().err


def test_environment_variables(tmp_path, small, monkeypatch):
    monkeypatch.setenv("GSPMARKET_OUTPUT_DIR", str(tmp_path / "env"))
    assert run("did", "--config", small, "--planted") == EXIT_OK
    assert (tmp_path / "env" / "did.txt").exists()
    monkeypatch.setenv("GSPMARKET_THREADS", "many")
    assert run("counterfactual", "--config", small) == EXIT_USAGE


def test_seed_override_changes_output(tmp_path, small):
    assert run("did", "--config", small, "--planted", "--out", tmp_path / "a") == EXIT_OK
    assert run("did", "--config", small, "--planted", "--out", tmp_path / "b", "--seed", 12) == EXIT_OK
    assert snapshot(tmp_path / "a")["did.json"] != snapshot(tmp_path / "b")["did.json"]


def test_did_report_shape(tmp_path, small, capsys):
    assert run("did", "--config", small, "--planted", "--out", tmp_path / "d") == EXIT_OK
    text = capsys.readouterr().out
    assert "(1) pooled" in text and "(2) by position" in text and "T*Post*Top5" in text


def test_selftest_and_default_config(capsys):
    assert main(["selftest"]) == EXIT_OK
    assert main(["--print-default-config"]) == EXIT_OK
    assert capsys.readouterr().out.endswith((CONFIGS / "default.yaml").read_text())
