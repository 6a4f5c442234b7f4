"""Shared fixtures: desk-scale instances, their oracle solves, and the
shipped six-microgrid scenario runs.  Expensive solves are session-scoped
and cached so every test module reads the same converged artifacts.
"""

from pathlib import Path

import numpy as np
import pytest

from dcflow.network import (ControlMode, GridIndex, GridModel, Line,
                            MicrogridParams, load_config, validate_model)
from dcflow.dynamics import solve_distributed
from dcflow.oracle import brute_force_solve, centralized_reference_solve
from dcflow.scenario import SimConfig, load_scenario, run_scenario

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


def make_mg(node_id, cost_a, load, gen_max, mode, cost_b=1.0, droop_k=120.0,
            v_star=420.0, v_min=380.0, v_max=420.0):
    return MicrogridParams(id=node_id, cost_a=cost_a, cost_b=cost_b,
                           load=load, gen_max=gen_max, v_min=v_min,
                           v_max=v_max, droop_k=droop_k, v_star=v_star ** 2,
                           mode=ControlMode(mode))


def build_model(mgs, lines):
    model = GridModel(microgrids=tuple(mgs), lines=tuple(lines))
    validate_model(model)
    return model


# -- desk-scale instances ---------------------------------------------------

def two_node_sym():
    return build_model(
        [make_mg(1, 0.03, 10.0, 30.0, "droop"),
         make_mg(2, 0.03, 10.0, 30.0, "droop")],
        [Line(1, 2, 0.5)])


def two_node_asym():
    return build_model(
        [make_mg(1, 0.04, 10.0, 30.0, "droop"),
         make_mg(2, 0.02, 10.0, 30.0, "power")],
        [Line(1, 2, 0.5)])


def two_node_capped():
    # the cheap bus wants far more than its ceiling allows
    return build_model(
        [make_mg(1, 0.05, 12.0, 30.0, "voltage"),
         make_mg(2, 0.01, 12.0, 14.0, "droop")],
        [Line(1, 2, 0.4)])


def three_node_path():
    return build_model(
        [make_mg(1, 0.05, 12.0, 30.0, "droop", droop_k=131.0),
         make_mg(2, 0.03, 10.0, 30.0, "power", droop_k=125.0),
         make_mg(3, 0.02, 11.0, 30.0, "voltage", droop_k=156.0)],
        [Line(1, 2, 0.5), Line(2, 3, 0.4)])


def three_node_triangle():
    return build_model(
        [make_mg(1, 0.045, 14.0, 30.0, "droop"),
         make_mg(2, 0.03, 10.0, 30.0, "droop", droop_k=140.0),
         make_mg(3, 0.02, 9.0, 30.0, "power", droop_k=150.0)],
        [Line(1, 2, 0.6), Line(2, 3, 0.5), Line(1, 3, 0.45)])


def three_node_mixed():
    return build_model(
        [make_mg(1, 0.06, 15.0, 25.0, "power", droop_k=120.0),
         make_mg(2, 0.025, 12.0, 35.0, "voltage", droop_k=131.0),
         make_mg(3, 0.035, 10.0, 30.0, "droop", droop_k=164.0)],
        [Line(1, 2, 0.35), Line(2, 3, 0.55)])


DESK_BUILDERS = {
    "two_asym": two_node_asym,
    "two_capped": two_node_capped,
    "three_path": three_node_path,
    "three_triangle": three_node_triangle,
    "three_mixed": three_node_mixed,
}


@pytest.fixture(scope="session")
def desk_models():
    return {name: build() for name, build in DESK_BUILDERS.items()}


@pytest.fixture(scope="session")
def sym_model():
    return two_node_sym()


@pytest.fixture(scope="session")
def asym_model():
    return two_node_asym()


@pytest.fixture(scope="session")
def asym_idx(asym_model):
    return GridIndex(asym_model)


@pytest.fixture(scope="session")
def desk_solutions(desk_models):
    """Distributed deep run + exhaustive + reference solve per fixture."""
    out = {}
    for name, model in desk_models.items():
        idx = GridIndex(model)
        import time
        t0 = time.time()
        dist = solve_distributed(idx, h=1.0, method="rk4", tol=5e-10,
                                 max_time=120000)
        wall = time.time() - t0
        bf = brute_force_solve(idx)
        ref = centralized_reference_solve(idx, tol=1e-9)
        out[name] = {"idx": idx, "dist": dist, "bf": bf, "ref": ref,
                     "wall_s": wall}
    return out


# -- shipped six-microgrid system -------------------------------------------

@pytest.fixture(scope="session")
def six_model():
    return load_config(CONFIG_DIR / "six_microgrid.json")


@pytest.fixture(scope="session")
def six_idx(six_model):
    return GridIndex(six_model)


def _run_shipped(model, name, tmp_dir=None):
    events, horizon, sim_raw = load_scenario(CONFIG_DIR / "scenarios" / name)
    sim = SimConfig.from_dict(sim_raw)
    return run_scenario(model, events, horizon, sim=sim, out_dir=tmp_dir,
                        label=name.replace(".json", ""))


@pytest.fixture(scope="session")
def steady_result(six_model, tmp_path_factory):
    out = tmp_path_factory.mktemp("steady")
    return _run_shipped(six_model, "steady_state.json", out)


@pytest.fixture(scope="session")
def load_step_result(six_model):
    return _run_shipped(six_model, "load_step.json")


@pytest.fixture(scope="session")
def capacity_result(six_model):
    return _run_shipped(six_model, "capacity_change.json")


@pytest.fixture(scope="session")
def pnp_result(six_model):
    return _run_shipped(six_model, "plug_and_play.json")


@pytest.fixture(scope="session")
def six_deep(six_model):
    """Deep distributed solve + reference on the stepped-load model."""
    from dcflow.network import set_load
    m = six_model
    for nid, ld in zip([1, 2, 3, 4, 5, 6], [51.0, 50.0, 52.0, 49.0, 52.0, 50.0]):
        m = set_load(m, nid, ld)
    idx = GridIndex(m)
    dist = solve_distributed(idx, h=1.0, method="rk4", tol=5e-10,
                             max_time=120000)
    ref = centralized_reference_solve(idx, tol=1e-9)
    return {"idx": idx, "dist": dist, "ref": ref}
