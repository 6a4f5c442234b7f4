"""Command-line interface: verbs, outputs, exit codes."""

import json

import pytest

from dcflow.cli import main

from conftest import CONFIG_DIR

SIX = str(CONFIG_DIR / "six_microgrid.json")


@pytest.fixture(scope="module")
def small_setup(tmp_path_factory):
    """A two-bus config plus a short scenario used by all CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    cfg = {
        "microgrids": [
            {"id": 1, "cost_a_per_kw2": 0.04, "cost_b_per_kw": 1.0,
             "load_kw": 10.0, "gen_max_kw": 30.0, "v_min_volts": 380.0,
             "v_max_volts": 420.0, "droop_k_v2_per_kw": 120.0,
             "v_star_volts": 420.0, "mode": "droop"},
            {"id": 2, "cost_a_per_kw2": 0.02, "cost_b_per_kw": 1.0,
             "load_kw": 10.0, "gen_max_kw": 30.0, "v_min_volts": 380.0,
             "v_max_volts": 420.0, "droop_k_v2_per_kw": 120.0,
             "v_star_volts": 420.0, "mode": "power"}],
        "lines": [{"from": 1, "to": 2, "resistance_ohm": 0.5}],
    }
    cfg_path = root / "two.json"
    cfg_path.write_text(json.dumps(cfg))
    scen = {
        "horizon_s": 40000.0,
        "sim": {"step_s": 1.0, "method": "rk4", "sample_every": 200},
        "events": [{"time_s": 5.0, "kind": "set_load", "node": 2,
                    "value_kw": 11.0}],
    }
    scen_path = root / "scen.json"
    scen_path.write_text(json.dumps(scen))
    return root, cfg_path, scen_path


def test_validate_ok(capsys):
    assert main(["validate", SIX]) == 0
    out = capsys.readouterr().out
    assert "microgrids: 6" in out


def test_validate_failure_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{}")
    assert main(["validate", str(bad)]) == 2


def test_simulate_solve_kkt_compare_pipeline(small_setup, capsys):
    root, cfg_path, scen_path = small_setup
    out_dir = root / "out"
    rc = main(["simulate", str(cfg_path), str(scen_path), "--out",
               str(out_dir), "--label", "demo"])
    assert rc == 0    # long horizon: the run converges by the detector
    trace_path = out_dir / "demo_trace.csv"
    assert trace_path.exists()
    assert (out_dir / "demo_manifest.json").exists()
    for fig in ("demo_generation.png", "demo_voltage.png",
                "demo_convergence.png", "demo_lyapunov.png"):
        assert (out_dir / fig).exists(), fig
    capsys.readouterr()

    assert main(["solve", str(cfg_path), "--out", str(out_dir)]) == 0
    ref_path = out_dir / "reference.json"
    assert ref_path.exists()
    capsys.readouterr()

    assert main(["kkt", str(cfg_path), str(trace_path), "--out",
                 str(out_dir)]) == 0
    report = json.loads((out_dir / "kkt_report.json").read_text())
    assert report["max_residual"] <= 1e-6
    capsys.readouterr()

    assert main(["compare", str(trace_path), str(ref_path), "--out",
                 str(out_dir)]) == 0
    out = capsys.readouterr().out
    assert "max |e(p_g)|" in out
    assert (out_dir / "comparison.csv").exists()
    assert (out_dir / "compare_errors.png").exists()


def test_simulate_nonconverged_exit_code(small_setup):
    root, cfg_path, scen_path = small_setup
    rc = main(["simulate", str(cfg_path), str(scen_path), "--out",
               str(root / "short"), "--horizon", "50", "--no-figures",
               "--no-lyapunov", "--label", "short"])
    assert rc == 3


def test_simulate_engine_parallel(small_setup):
    root, cfg_path, scen_path = small_setup
    rc = main(["simulate", str(cfg_path), str(scen_path), "--out",
               str(root / "par"), "--horizon", "50", "--engine", "parallel",
               "--no-figures", "--no-lyapunov", "--label", "par"])
    assert rc == 3    # short horizon: not converged, but runs fine
    assert (root / "par" / "par_trace.csv").exists()


def test_kkt_row_selection(small_setup, capsys):
    root, cfg_path, scen_path = small_setup
    trace_path = root / "out" / "demo_trace.csv"
    assert main(["kkt", str(cfg_path), str(trace_path), "--time", "0"]) == 0
    out = capsys.readouterr().out
    assert "t = 0" in out


def test_compare_unconverged_exit_code(small_setup):
    root, cfg_path, scen_path = small_setup
    # the short run from test_simulate_nonconverged_exit_code
    trace_path = root / "short" / "short_trace.csv"
    ref_path = root / "out" / "reference.json"
    assert main(["compare", str(trace_path), str(ref_path)]) == 3
