from pathlib import Path

import pandas as pd
import pytest

from ndvr import cli
from ndvr.simulation import InvariantError

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"
CHAIN = str(SCENARIOS / "chain.scn")


def test_validate_only(capsys, tmp_path):
    assert cli.main(["run", "--scenario", CHAIN, "--validate-only"]) == cli.OK
    assert "is valid: 4 nodes" in capsys.readouterr().out
    assert list(tmp_path.iterdir()) == []


def test_parse_args_requires_a_command():
    with pytest.raises(SystemExit):
        cli.parse_args([])


def test_bad_scenario_is_a_config_error(tmp_path, caplog):
    path = tmp_path / "bad.scn"
    path.write_text("[nodes]\ncount = 2\n[run]\nduration_s = never\n")
    assert cli.main(["run", "--scenario", str(path), "--validate-only"]) == cli.CONFIG_ERROR
    assert "line 4" in caplog.text


def test_missing_seed_is_a_config_error(tmp_path):
    path = tmp_path / "unseeded.scn"
    path.write_text("[nodes]\ncount = 2\n[run]\nduration_s = 1\n")
    assert cli.main(["run", "--scenario", str(path), "--out", str(tmp_path / "out")]) == cli.CONFIG_ERROR


def test_out_required_for_a_run():
    assert cli.main(["run", "--scenario", CHAIN]) == cli.CONFIG_ERROR


def test_negative_duration_rejected(tmp_path):
    argv = ["run", "--scenario", CHAIN, "--duration", "-1", "--out", str(tmp_path)]
    assert cli.main(argv) == cli.CONFIG_ERROR


def test_run_writes_artifacts(tmp_path, capsys):
    out = tmp_path / "out"
    assert cli.main(["run", "--scenario", CHAIN, "--duration", "5", "--out", str(out)]) == cli.OK
    assert "delivered" in capsys.readouterr().out

    expected = {"trace.log", "mobility.csv", "delays.csv", "cdf.csv", "summary.csv",
                "routes_A.csv", "routes_B.csv", "routes_C.csv", "routes_D.csv"}
    assert {p.name for p in out.iterdir()} == expected

    routes = pd.read_csv(out / "routes_A.csv")
    assert list(routes.columns) == ["prefix", "cost", "seqnum", "nexthop", "face"]
    assert dict(zip(routes["prefix"], routes["cost"])) == {"/ndn/A": 0, "/ndn/B": 1, "/ndn/C": 2, "/ndn/D": 3}

    mobility = pd.read_csv(out / "mobility.csv")
    assert list(mobility.columns) == ["time_s", "node_id", "x_m", "y_m"]
    assert (mobility[mobility["node_id"] == 3]["x_m"] == 150.0).all()

    trace = (out / "trace.log").read_text().splitlines()
    assert trace
    assert all(len(line.split(",")) == 6 for line in trace)


def test_trace_levels(tmp_path):
    quiet, full = tmp_path / "quiet", tmp_path / "full"
    assert cli.main(["run", "--scenario", CHAIN, "--duration", "2", "--trace-level", "none",
                     "--out", str(quiet)]) == cli.OK
    assert cli.main(["run", "--scenario", CHAIN, "--duration", "2", "--trace-level", "full",
                     "--out", str(full)]) == cli.OK
    assert not (quiet / "trace.log").exists()
    assert not (quiet / "events.log").exists()
    assert (full / "events.log").read_text()
    assert (full / "trace.log").read_text()


def test_same_seed_same_trace_bytes(tmp_path):
    for name in ("first", "second"):
        argv = ["run", "--scenario", CHAIN, "--seed", "11", "--duration", "3", "--out", str(tmp_path / name)]
        assert cli.main(argv) == cli.OK
    first = (tmp_path / "first" / "trace.log").read_bytes()
    assert first == (tmp_path / "second" / "trace.log").read_bytes()


def test_unwritable_output_is_a_runtime_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("in the way")
    argv = ["run", "--scenario", CHAIN, "--duration", "1", "--out", str(blocker / "out")]
    assert cli.main(argv) == cli.RUNTIME_ERROR


def test_invariant_breach_is_a_runtime_error(tmp_path, mocker, caplog):
    mocker.patch("ndvr.cli.Simulation.run", side_effect=InvariantError("node A would relay"))
    argv = ["run", "--scenario", CHAIN, "--out", str(tmp_path)]
    assert cli.main(argv) == cli.RUNTIME_ERROR
    assert "would relay" in caplog.text


def test_format_comparison():
    results = pd.DataFrame([
        ("NDVR_MULTICAST", 1, 10.0, 100, 50, 0),
        ("NDVR_MULTICAST", 2, 12.0, 120, 60, 1),
        ("MULTICAST_DEFAULT_ROUTE", 1, 5.0, 400, 0, 9),
        ("MULTICAST_DEFAULT_ROUTE", 2, 5.0, 420, 0, 8),
    ], columns=cli.COMPARE_COLUMNS)
    lines = cli.format_comparison(results)
    assert lines[0].startswith("NDVR_MULTICAST: delivery 11.00 +/- ")
    assert lines[1].startswith("MULTICAST_DEFAULT_ROUTE: delivery 5.00 +/- 0.00 pps, forwarded 410.0")
    assert lines[1].endswith("(2 seeds)")


def test_compare_command(tmp_path, capsys):
    argv = ["compare", "--scenario", CHAIN, "--seeds", "1", "2", "--duration", "2", "--out", str(tmp_path)]
    assert cli.main(argv) == cli.OK
    printed = capsys.readouterr().out.splitlines()
    assert [line.split(":")[0] for line in printed] == ["MULTICAST_DEFAULT_ROUTE", "NDVR_MULTICAST"]
    results = pd.read_csv(tmp_path / "compare.csv")
    assert list(results.columns) == cli.COMPARE_COLUMNS
    assert len(results) == 4


def test_negative_seed_is_a_config_error(tmp_path, caplog):
    argv = ["run", "--scenario", CHAIN, "--seed", "-1", "--out", str(tmp_path / "out")]
    assert cli.main(argv) == cli.CONFIG_ERROR
    assert "--seed must not be negative" in caplog.text
    assert not (tmp_path / "out").exists()


def test_negative_compare_seed_is_a_config_error():
    argv = ["compare", "--scenario", CHAIN, "--seeds", "1", "-2", "--duration", "1"]
    assert cli.main(argv) == cli.CONFIG_ERROR


@pytest.mark.parametrize("section", [
    "[ndvr]\nnetwork = /\n",
    "[workload]\nprefix = /a//b\n",
])
def test_malformed_names_are_config_errors(tmp_path, section):
    path = tmp_path / "names.scn"
    path.write_text("[nodes]\nA = 0, 0\nB = 50, 0\n" + section + "[run]\nduration_s = 2\nseed = 1\n")
    assert cli.main(["run", "--scenario", str(path), "--out", str(tmp_path / "out")]) == cli.CONFIG_ERROR
    assert cli.main(["run", "--scenario", str(path), "--validate-only"]) == cli.CONFIG_ERROR
