"""Scenario engine: events, determinism, trace schema, co-simulation
behavior on the shipped six-microgrid timelines."""

import json

import numpy as np
import pytest

from dcflow.network import ConfigError
from dcflow.oracle import ConvergenceError
from dcflow.scenario import (ScenarioEvent, SimConfig,
                             compare_with_reference, load_scenario,
                             read_trace, run_scenario, validate_events)

from conftest import build_model, make_mg
from dcflow.network import Line

NODES = [1, 2, 3, 4, 5, 6]


def small_model():
    return build_model(
        [make_mg(1, 0.04, 10.0, 30.0, "droop"),
         make_mg(2, 0.02, 10.0, 30.0, "power")],
        [Line(1, 2, 0.5)])


# -- events ---------------------------------------------------------------------

def test_event_validation():
    with pytest.raises(ConfigError, match="sorted"):
        validate_events([ScenarioEvent(2.0, "set_load", 1, 10.0),
                         ScenarioEvent(1.0, "set_load", 1, 10.0)])
    with pytest.raises(ConfigError, match="without disconnect"):
        validate_events([ScenarioEvent(1.0, "reconnect", 6)])
    with pytest.raises(ConfigError, match="disconnected twice"):
        validate_events([ScenarioEvent(1.0, "disconnect", 6),
                         ScenarioEvent(2.0, "disconnect", 6)])
    with pytest.raises(ConfigError, match="needs a value"):
        validate_events([ScenarioEvent(1.0, "set_load", 1)])
    validate_events([ScenarioEvent(1.0, "disconnect", 6),
                     ScenarioEvent(2.0, "reconnect", 6),
                     ScenarioEvent(2.0, "disconnect", 3)])


def test_scenario_file_round_trip(tmp_path):
    raw = {"horizon_s": 10.0,
           "sim": {"step_s": 0.5, "method": "rk4"},
           "events": [{"time_s": 2.0, "kind": "set_load", "node": 1,
                       "value_kw": 12.0}]}
    path = tmp_path / "s.json"
    path.write_text(json.dumps(raw))
    events, horizon, sim_raw = load_scenario(path)
    assert horizon == 10.0
    assert events[0] == ScenarioEvent(2.0, "set_load", 1, 12.0)
    sim = SimConfig.from_dict(sim_raw)
    assert sim.h == 0.5 and sim.method == "rk4"


def test_horizon_must_exceed_last_event(tmp_path):
    raw = {"horizon_s": 1.0,
           "events": [{"time_s": 2.0, "kind": "disconnect", "node": 1}]}
    path = tmp_path / "s.json"
    path.write_text(json.dumps(raw))
    with pytest.raises(ConfigError, match="horizon"):
        load_scenario(path)


# -- engine mechanics -------------------------------------------------------------

def test_event_atomicity_between_steps():
    """The load change lands exactly at its step boundary, never mid-step."""
    model = small_model()
    events = [ScenarioEvent(0.5, "set_load", 1, 14.0)]
    sim = SimConfig(h=0.1, method="euler", lyapunov=False, sample_every=1000)
    res = run_scenario(model, events, horizon=1.0, sim=sim)
    t = res.trace.col("t_s")
    # the balance deviation z jumps by the load delta at exactly t=0.5
    mu6 = res.trace.col("mu_1")
    row_pre = np.searchsorted(t, 0.5) - 1
    assert res.model_final.microgrid(1).load == 14.0
    assert t[row_pre] < 0.5 <= t[row_pre + 1]


def test_determinism_byte_identical(tmp_path):
    model = small_model()
    events = [ScenarioEvent(0.3, "set_load", 2, 12.0)]
    sim = SimConfig(h=0.05, method="rk4", lyapunov=False, sample_every=5)
    for label in ("a", "b"):
        run_scenario(model, events, horizon=1.0, sim=sim,
                     out_dir=tmp_path, label=label)
    a = (tmp_path / "a_trace.csv").read_bytes()
    b = (tmp_path / "b_trace.csv").read_bytes()
    assert a == b


def test_trace_schema_fixed_and_readable(tmp_path):
    model = small_model()
    sim = SimConfig(h=0.1, method="euler", lyapunov=False, sample_every=2)
    res = run_scenario(model, [], horizon=0.5, sim=sim, out_dir=tmp_path,
                       label="t")
    tr = read_trace(tmp_path / "t_trace.csv")
    assert tr.columns == res.trace.columns
    assert tr.data.shape == res.trace.data.shape
    # all kind-grouped column families present
    for stem in ("p_g_kw_1", "v_v2_2", "P_kw_1_2", "P_kw_2_1", "l_a2_1_2",
                 "rhs_inf", "kkt_max", "lyap_u"):
        assert stem in tr.columns


def test_saturation_flags_match_bounds(capacity_result):
    tr = capacity_result.trace
    t = tr.col("t_s")
    post = t >= 5000.0
    for nid, cap in ((2, 55.0), (5, 48.0)):
        p = tr.col(f"p_g_kw_{nid}")[post]
        flag = tr.col(f"sat_p_{nid}")[post]
        at_cap = flag == 1.0
        assert np.any(at_cap)
        assert np.all(p[at_cap] == cap)     # flagged == exactly at the bound


def test_engine_serial_parallel_identical_traces(tmp_path):
    model = small_model()
    events = [ScenarioEvent(0.2, "set_load", 1, 12.0)]
    for engine, label in (("serial", "s"), ("parallel", "p")):
        sim = SimConfig(h=0.05, method="euler", engine=engine,
                        lyapunov=False, sample_every=4)
        run_scenario(model, events, horizon=0.6, sim=sim, out_dir=tmp_path,
                     label=label)
    assert (tmp_path / "s_trace.csv").read_bytes() == \
        (tmp_path / "p_trace.csv").read_bytes()


def test_plant_neighbor_mode_runs_and_stays_in_box():
    """Measurement-based neighbor estimation: transiently different from
    the exact-exchange flow, but the hard boxes still hold everywhere."""
    model = small_model()
    sim = SimConfig(h=1e-3, method="euler", neighbor_info="plant",
                    lyapunov=False, sample_every=200)
    res = run_scenario(model, [], horizon=2.0, sim=sim)
    for nid in (1, 2):
        p = res.trace.col(f"p_g_kw_{nid}")
        v = res.trace.col(f"v_v2_{nid}")
        assert np.all((p >= 0.0) & (p <= 30.0))
        assert np.all((v >= 380.0 ** 2) & (v <= 420.0 ** 2))


def test_manifest_contents(steady_result):
    man = steady_result.manifest
    assert man["converged"] is True
    assert man["events"] == []
    assert len(man["segments"]) == 1
    assert man["trace_columns"] == len(steady_result.trace.columns)
    assert len(man["config_sha256"]) == 64


# -- shipped scenarios --------------------------------------------------------------

def test_steady_state_converges_by_detector(steady_result):
    seg = steady_result.segments[-1]
    assert seg.converged
    assert steady_result.trace.last("rhs_inf") <= 1e-6
    assert steady_result.trace.last("kkt_max") <= 1e-6


def test_load_step_segments_and_box(load_step_result):
    tr = load_step_result.trace
    model = load_step_result.model_final
    for mg in model.microgrids:
        p = tr.col(f"p_g_kw_{mg.id}")
        v = tr.col(f"v_v2_{mg.id}")
        assert np.all((p >= 0.0) & (p <= mg.gen_max))
        assert np.all((v >= mg.v_min ** 2) & (v <= mg.v_max ** 2))
    assert load_step_result.model_final.microgrid(1).load == 51.0


def test_capacity_event_pins_limited_units(capacity_result):
    tr = capacity_result.trace
    assert tr.last("p_g_kw_2") == pytest.approx(55.0, abs=1e-3)
    assert tr.last("p_g_kw_5") == pytest.approx(48.0, abs=1e-3)
    assert tr.last("sat_p_2") == 1.0
    assert tr.last("sat_p_5") == 1.0


def test_pnp_island_serves_own_load(pnp_result):
    tr = pnp_result.trace
    t = tr.col("t_s")
    island = (t > 17000) & (t < 18000)
    p6 = tr.col("p_g_kw_6")[island]
    assert np.all(np.abs(p6 - 40.0) <= 1e-3)
    # line 5-6 inactive during the island phase
    assert np.all(np.isnan(tr.col("I_plant_a_5_6")[island]))


def test_pnp_returns_to_pre_event_dispatch(pnp_result):
    tr = pnp_result.trace
    t = tr.col("t_s")
    pre = np.where(t < 12000.0)[0][-1]
    for nid in NODES:
        p = tr.col(f"p_g_kw_{nid}")
        rel = abs(p[-1] - p[pre]) / p[pre]
        assert rel <= 1e-3, (nid, p[pre], p[-1])


# -- comparison ----------------------------------------------------------------------

def test_compare_trace_to_itself(steady_result, six_idx):
    tr = steady_result.trace
    p_ref = [tr.last(f"p_g_kw_{n}") for n in NODES]
    phat_ref = [tr.last(f"p_hat_kw_{n}") for n in NODES]
    table = compare_with_reference(tr, NODES, p_ref, phat_ref, converged=True)
    assert table.max_abs_pg_err() == 0.0
    assert table.max_abs_phat_err() == 0.0


def test_compare_refuses_unconverged(steady_result):
    tr = steady_result.trace
    with pytest.raises(ConvergenceError):
        compare_with_reference(tr, NODES, [1.0] * 6, [1.0] * 6, converged=False)


def test_compare_against_reference_solve(steady_result, six_idx):
    from dcflow.oracle import centralized_reference_solve
    ref = centralized_reference_solve(six_idx, tol=1e-9)
    table = compare_with_reference(steady_result.trace, NODES, ref.x.p_g,
                                   ref.x.p_hat, converged=True)
    assert table.max_abs_pg_err() <= 0.07
    assert table.max_abs_phat_err() <= 0.6
    text = table.to_text()
    assert "p_g dist" in text and len(text.splitlines()) == 7
