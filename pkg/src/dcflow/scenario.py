"""Scenario timeline execution and co-simulation orchestration.

One run advances the controller and the quasi-static plant in lockstep:
apply due events, solve the plant from the current commands, deliver the
message round, step every agent, append a trace record.  Runs are
deterministic functions of (model, events, config), and trace files are
byte-identical across repeats.

Event times snap to integrator step boundaries; a model mutation takes
effect exactly at its timestamped step, never mid-step.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

import warnings

from . import network, units
from .dynamics import (ConvergenceMonitor, DivergenceError, SysState,
                       check_dual_symmetry, clamp, emit_commands,
                       init_sys_state, primal_public, dual_public,
                       project_state, rhs_arrays, rhs_arrays_parallel,
                       step_arrays, _axpy)
from .formulation import PrimalState
from .network import ConfigError, GridIndex, GridModel
from .oracle import (ConvergenceError, LyapunovMonitor, ReferenceSolution,
                     kkt_residual, centralized_reference_solve)
from .plant import PlantState, PowerFlowError, solve_power_flow

EVENT_KINDS = ("set_load", "set_gen_max", "disconnect", "reconnect")
# bump when the trace column layout changes
TRACE_SCHEMA_VERSION = "dcflow-trace-1"


@dataclass(frozen=True)
class ScenarioEvent:
    time: float
    kind: str
    node: int
    value: float = None

    def apply(self, model: GridModel) -> GridModel:
        if self.kind == "set_load":
            return network.set_load(model, self.node, self.value)
        if self.kind == "set_gen_max":
            return network.set_gen_max(model, self.node, self.value)
        if self.kind == "disconnect":
            return network.disconnect(model, self.node)
        if self.kind == "reconnect":
            return network.reconnect(model, self.node)
        raise ConfigError(f"unknown event kind {self.kind!r}")


def validate_events(events) -> None:
    last_t = 0.0
    disconnected = set()
    for ev in events:
        if ev.time < 0:
            raise ConfigError(f"event at negative time {ev.time}")
        if ev.time < last_t:
            raise ConfigError("events must be sorted by time")
        last_t = ev.time
        if ev.kind not in EVENT_KINDS:
            raise ConfigError(f"unknown event kind {ev.kind!r}")
        if ev.kind in ("set_load", "set_gen_max") and ev.value is None:
            raise ConfigError(f"{ev.kind} event needs a value")
        if ev.kind == "disconnect":
            if ev.node in disconnected:
                raise ConfigError(f"node {ev.node} disconnected twice")
            disconnected.add(ev.node)
        if ev.kind == "reconnect":
            if ev.node not in disconnected:
                raise ConfigError(f"reconnect of node {ev.node} without disconnect")
            disconnected.discard(ev.node)


def load_scenario(path):
    """Read a scenario file: horizon, events, and sim-config overrides."""
    raw = json.loads(Path(path).read_text())
    events = []
    for entry in raw.get("events", []):
        events.append(ScenarioEvent(
            time=float(entry["time_s"]),
            kind=str(entry["kind"]),
            node=int(entry["node"]),
            value=float(entry["value_kw"]) if "value_kw" in entry else None,
        ))
    validate_events(events)
    horizon = float(raw["horizon_s"])
    if events and horizon <= events[-1].time:
        raise ConfigError("horizon must exceed the last event time")
    return events, horizon, raw.get("sim", {})


@dataclass
class SimConfig:
    """Integration and co-simulation knobs for one run."""

    h: float = 1e-3               # integrator step, seconds
    method: str = "euler"         # "euler" | "rk4"
    neighbor_info: str = "exact"  # "exact" | "plant"
    engine: str = "serial"        # "serial" | "parallel"
    detect_tol: float = 1e-6      # rhs infinity-norm threshold
    detect_hold: int = 100        # consecutive steps at/below tol
    sample_every: int = 50        # kkt / energy sampling cadence (steps)
    plant_every: int = 1          # plant solves per controller step (decimation)
    plant_fail_limit: int = 20    # consecutive plant failures tolerated
    lyapunov: bool = True         # evaluate the energy monitor per segment
    reference_tol: float = 1e-9   # equilibrium accuracy for the monitor

    @classmethod
    def from_dict(cls, raw: dict) -> "SimConfig":
        cfg = cls()
        mapping = {"step_s": "h", "method": "method",
                   "neighbor_info": "neighbor_info", "engine": "engine",
                   "detect_tol": "detect_tol", "detect_hold": "detect_hold",
                   "sample_every": "sample_every", "plant_every": "plant_every",
                   "lyapunov": "lyapunov", "reference_tol": "reference_tol"}
        for key, attr in mapping.items():
            if key in raw:
                setattr(cfg, attr, type(getattr(cfg, attr))(raw[key]))
        return cfg


@dataclass
class TraceTable:
    """Column-named trace matrix with the fixed schema of one run."""

    columns: list
    data: np.ndarray

    def col(self, name: str) -> np.ndarray:
        return self.data[:, self.columns.index(name)]

    def last(self, name: str) -> float:
        return float(self.col(name)[-1])

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(",".join(self.columns) + "\n")
            for row in self.data:
                fh.write(",".join(_fmt(v) for v in row) + "\n")


def _fmt(v: float) -> str:
    if np.isnan(v):
        return "nan"
    return repr(float(v))


def read_trace(path) -> TraceTable:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    data = np.genfromtxt(path, delimiter=",", skip_header=1)
    if data.ndim == 1:
        data = data[None, :]
    return TraceTable(columns=header, data=data)


@dataclass
class SegmentSummary:
    start_t: float
    end_t: float
    converged: bool
    final_rhs_inf: float
    reference: ReferenceSolution = None


@dataclass
class ScenarioResult:
    model_final: GridModel
    x: PrimalState
    d: object
    plant: PlantState
    trace: TraceTable
    manifest: dict
    segments: list
    converged: bool

    def segment_reference(self, i: int) -> ReferenceSolution:
        return self.segments[i].reference


class _TraceSchema:
    """Fixed column layout derived from the as-built network.

    Columns are grouped by kind (all p_g columns, then all v columns, ...)
    so a row assembles as one concatenation; per-directed-pair slots of
    currently inactive lines hold nan.
    """

    def __init__(self, model: GridModel):
        self.node_ids = sorted(mg.id for mg in model.microgrids)
        lines = sorted(model.lines, key=lambda ln: (min(ln.i, ln.k), max(ln.i, ln.k)))
        self.pair_ids = []
        self.line_ids = []
        for ln in lines:
            a, b = min(ln.i, ln.k), max(ln.i, ln.k)
            self.pair_ids.append((a, b))
            self.pair_ids.append((b, a))
            self.line_ids.append((a, b))
        cols = ["t_s"]
        for stem in ("p_g_kw", "v_v2", "p_hat_kw", "mu", "eps", "sat_p",
                     "sat_v", "V_plant_v", "g_plant_kw"):
            cols += [f"{stem}_{nid}" for nid in self.node_ids]
        for stem in ("P_kw", "lam", "gam", "rho", "I_plant_a"):
            cols += [f"{stem}_{a}_{b}" for (a, b) in self.pair_ids]
        cols += [f"l_a2_{a}_{b}" for (a, b) in self.line_ids]
        cols += ["rhs_inf", "kkt_max", "lyap_u", "sigma_switched"]
        self.columns = cols
        self._bound_idx = None

    def bind(self, idx: GridIndex) -> None:
        """Precompute where the active topology's arrays land in the row."""
        pair_slot = {key: s for s, key in enumerate(self.pair_ids)}
        line_slot = {key: s for s, key in enumerate(self.line_ids)}
        self._pair_gather = np.array(
            [pair_slot[(idx.node_ids[idx.src[j]], idx.node_ids[idx.dst[j]])]
             for j in range(idx.npairs)], dtype=int)
        self._line_gather = np.array(
            [line_slot[(idx.node_ids[i], idx.node_ids[k])]
             for (i, k) in idx.line_nodes], dtype=int)
        self._bound_idx = idx

    def row(self, idx: GridIndex, st: SysState, t: float, plant: PlantState,
            rhs_inf: float, kkt_max: float, lyap_u: float,
            switched: float) -> np.ndarray:
        if self._bound_idx is not idx:
            self.bind(idx)
        nslots = len(self.pair_ids)
        sat_p = np.where(st.p <= 0.0, -1.0, np.where(st.p >= idx.pmax, 1.0, 0.0))
        sat_v = np.where(st.v <= idx.vmin2, -1.0,
                         np.where(st.v >= idx.vmax2, 1.0, 0.0))
        if plant is not None:
            plant_v = plant.V
            plant_g = idx.d + plant.inj
            plant_i = plant.I
        else:
            plant_v = np.full(idx.n, np.nan)
            plant_g = np.full(idx.n, np.nan)
            plant_i = np.full(idx.npairs, np.nan)
        pair_block = np.full((5, nslots), np.nan)
        for r, arr in enumerate((st.P, st.lam, st.gam, st.rho, plant_i)):
            pair_block[r, self._pair_gather] = arr
        line_block = np.full(len(self.line_ids), np.nan)
        line_block[self._line_gather] = units.a2_from_solver(st.l)
        return np.concatenate([
            [t], st.p, units.v2_from_solver(st.v), st.ph, st.mu, st.eps,
            sat_p, sat_v, plant_v, plant_g, pair_block.ravel(),
            line_block, [rhs_inf, kkt_max, lyap_u, switched]])


def _remap_state(old_idx: GridIndex, new_idx: GridIndex, st: SysState) -> SysState:
    """Carry state across a topology or parameter change.

    Node blocks carry over one to one; line blocks follow their (i,k)
    identity, and freshly activated lines start from rest.
    """
    out = init_sys_state(new_idx)
    out.p = clamp(st.p.copy(), 0.0, new_idx.pmax)
    out.v = clamp(st.v.copy(), new_idx.vmin2, new_idx.vmax2)
    out.ph = st.ph.copy()
    out.mu = st.mu.copy()
    out.eps = st.eps.copy()
    old_pos = {}
    for j in range(old_idx.npairs):
        old_pos[(old_idx.node_ids[old_idx.src[j]],
                 old_idx.node_ids[old_idx.dst[j]])] = j
    for j in range(new_idx.npairs):
        key = (new_idx.node_ids[new_idx.src[j]], new_idx.node_ids[new_idx.dst[j]])
        if key in old_pos:
            jo = old_pos[key]
            out.P[j] = st.P[jo]
            out.lam[j] = st.lam[jo]
            out.gam[j] = st.gam[jo]
            out.rho[j] = st.rho[jo]
    old_line = {}
    for li, (i, k) in enumerate(old_idx.line_nodes):
        old_line[(old_idx.node_ids[i], old_idx.node_ids[k])] = li
    for li, (i, k) in enumerate(new_idx.line_nodes):
        key = (new_idx.node_ids[i], new_idx.node_ids[k])
        if key in old_line:
            out.l[li] = st.l[old_line[key]]
    return out


def _neighbor_inputs(idx: GridIndex, st: SysState, plant: PlantState, mode: str):
    """Per-directed-pair neighbor values for the rhs, per the info mode."""
    if mode == "exact" or idx.npairs == 0:
        return None, None
    if plant is None:
        return None, None
    current = plant.I
    p_opp = idx.r * current * current / units.W_PER_KW - st.P
    v_opp = (np.sqrt(st.v[idx.src] * units.V2_PER_UNIT)
             - idx.r * current) ** 2 / units.V2_PER_UNIT
    return p_opp, v_opp


def config_hash(model: GridModel, events, sim: SimConfig) -> str:
    blob = json.dumps({
        "microgrids": [[mg.id, mg.cost_a, mg.cost_b, mg.load, mg.gen_max,
                        mg.v_min, mg.v_max, mg.droop_k, mg.v_star, mg.mode.value]
                       for mg in model.microgrids],
        "lines": [[ln.i, ln.k, ln.resistance] for ln in model.lines],
        "events": [[ev.time, ev.kind, ev.node, ev.value] for ev in events],
        "sim": asdict(sim),
    }, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


def run_scenario(model: GridModel, events, horizon: float,
                 sim: SimConfig = None, out_dir=None,
                 label: str = "run") -> ScenarioResult:
    """Execute a full scenario timeline; see module docstring for the loop.

    Returns the in-memory result; when out_dir is given, also writes
    ``<label>_trace.csv`` and ``<label>_manifest.json`` there.
    """
    sim = sim or SimConfig()
    if sim.neighbor_info not in ("exact", "plant"):
        raise ConfigError(f"unknown neighbor_info {sim.neighbor_info!r}")
    if sim.engine not in ("serial", "parallel"):
        raise ConfigError(f"unknown engine {sim.engine!r}")
    events = sorted(events, key=lambda e: e.time)
    validate_events(events)
    if events and horizon <= events[-1].time:
        raise ConfigError("horizon must exceed the last event time")

    schema = _TraceSchema(model)
    idx = GridIndex(model)
    st = init_sys_state(idx)
    guard = 1e9 * (1.0 + st.inf_norm())
    plant_guess = np.sqrt(idx.vstar * units.V2_PER_UNIT)
    plant = None
    plant_failures = 0

    monitor = ConvergenceMonitor(tol=sim.detect_tol, hold=sim.detect_hold)
    segments = []
    seg_start = 0.0
    lyap, seg_ref = _segment_monitor(idx, st, sim) if sim.lyapunov else (None, None)

    pool = None
    if sim.engine == "parallel":
        from concurrent.futures import ThreadPoolExecutor
        pool = ThreadPoolExecutor(max_workers=min(8, max(2, idx.n)))

    nsteps = int(round(horizon / sim.h))
    rows = []
    ev_i = 0
    rhs_inf = np.nan
    try:
        for step_i in range(nsteps + 1):
            t = step_i * sim.h
            # events due at this boundary
            fired = False
            while ev_i < len(events) and events[ev_i].time <= t + 0.5 * sim.h:
                new_model = events[ev_i].apply(idx.model)
                new_idx = GridIndex(new_model)
                st = _remap_state(idx, new_idx, st)
                idx = new_idx
                ev_i += 1
                fired = True
            if fired:
                segments.append(SegmentSummary(seg_start, t, monitor.converged,
                                               rhs_inf if rows else np.nan,
                                               seg_ref))
                seg_start = t
                monitor = ConvergenceMonitor(tol=sim.detect_tol, hold=sim.detect_hold)
                if sim.lyapunov:
                    lyap, seg_ref = _segment_monitor(idx, st, sim)

            if step_i % sim.plant_every == 0 or plant is None:
                try:
                    commands = emit_commands(idx, primal_public(idx, st))
                    plant = solve_power_flow(idx, commands, guess=plant_guess)
                    plant_guess = plant.V.copy()
                    plant_failures = 0
                except PowerFlowError:
                    plant_failures += 1
                    if plant_failures > sim.plant_fail_limit or plant is None:
                        raise

            p_opp, v_opp = _neighbor_inputs(idx, st, plant, sim.neighbor_info)
            if sim.engine == "parallel":
                dots = rhs_arrays_parallel(idx, st, p_opp, v_opp, pool=pool)
            else:
                dots = rhs_arrays(idx, st, p_opp, v_opp)
            rhs_inf = dots.inf_norm()
            monitor.update(rhs_inf)

            sampled = (step_i % sim.sample_every == 0) or step_i == nsteps
            kkt_max = np.nan
            lyap_u = np.nan
            switched = np.nan
            if sampled:
                kkt_max = kkt_residual(idx, primal_public(idx, st),
                                       dual_public(st)).max_residual
                if lyap is not None:
                    s = lyap.sample(st, t)
                    lyap_u = s.U
                    switched = 1.0 if s.switched else 0.0
            rows.append(schema.row(idx, st, t, plant, rhs_inf, kkt_max,
                                   lyap_u, switched))

            if step_i == nsteps:
                break
            if sim.method == "euler":
                st = project_state(idx, _axpy(st, sim.h, dots))
                if not st.isfinite():
                    raise DivergenceError("nonfinite state after step")
            else:
                st = step_arrays(idx, st, sim.h, method=sim.method,
                                 p_opp=p_opp, v_opp=v_opp)
            if st.inf_norm() > guard:
                raise DivergenceError(f"state norm exceeded {guard:.1e} at t={t:.3f}")
            if sim.neighbor_info == "exact":
                check_dual_symmetry(idx, st)
    finally:
        if pool is not None:
            pool.shutdown(wait=False)

    segments.append(SegmentSummary(seg_start, nsteps * sim.h, monitor.converged,
                                   rhs_inf, seg_ref))
    trace = TraceTable(columns=schema.columns, data=np.array(rows))
    manifest = {
        "label": label,
        "trace_schema": TRACE_SCHEMA_VERSION,
        "config_sha256": config_hash(model, events, sim),
        "horizon_s": horizon,
        "steps": nsteps,
        "sim": asdict(sim),
        "events": [{"time_s": ev.time, "kind": ev.kind, "node": ev.node,
                    "value_kw": ev.value} for ev in events],
        "segments": [{"start_s": s.start_t, "end_s": s.end_t,
                      "converged": bool(s.converged),
                      "final_rhs_inf": float(s.final_rhs_inf)}
                     for s in segments],
        "converged": bool(segments[-1].converged),
        "trace_columns": len(schema.columns),
    }
    result = ScenarioResult(model_final=idx.model, x=primal_public(idx, st),
                            d=dual_public(st), plant=plant, trace=trace,
                            manifest=manifest, segments=segments,
                            converged=bool(segments[-1].converged))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        trace.write_csv(out / f"{label}_trace.csv")
        (out / f"{label}_manifest.json").write_text(
            json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        (out / f"{label}_diagnostics.json").write_text(
            json.dumps(_diagnostics_report(trace, manifest), indent=2,
                       sort_keys=True) + "\n")
    return result


def _diagnostics_report(trace: TraceTable, manifest: dict) -> dict:
    """Standalone report of the sampled optimality and energy diagnostics."""
    t = trace.col("t_s")
    kkt = trace.col("kkt_max")
    lyap = trace.col("lyap_u")
    switched = trace.col("sigma_switched")
    mask = ~np.isnan(kkt)
    samples = [{"t_s": float(tt), "kkt_max": float(kk),
                "lyap_u": None if np.isnan(uu) else float(uu),
                "cone_set_switched": None if np.isnan(sw) else bool(sw)}
               for tt, kk, uu, sw in zip(t[mask], kkt[mask], lyap[mask],
                                         switched[mask])]
    return {"trace_schema": manifest["trace_schema"],
            "config_sha256": manifest["config_sha256"],
            "segments": manifest["segments"],
            "samples": samples}


def _segment_monitor(idx: GridIndex, st: SysState, sim: SimConfig):
    """Reference equilibrium and streaming energy monitor for one segment.

    The energy function is nonincreasing against any equilibrium of the
    segment's model, so the (cacheable) flat-start reference serves every
    trajectory.  A segment whose reference solve misses tolerance runs
    unmonitored rather than aborting the whole scenario.
    """
    del st
    try:
        ref = centralized_reference_solve(idx, tol=sim.reference_tol)
    except ConvergenceError as exc:
        warnings.warn(f"energy monitor disabled for this segment: {exc}")
        return None, None
    return LyapunovMonitor(idx, ref.x, ref.d), ref


@dataclass
class ComparisonRow:
    node: int
    p_g_dist: float
    p_g_ref: float
    p_g_err_pct: float
    p_hat_dist: float
    p_hat_ref: float
    p_hat_err_pct: float


@dataclass
class ComparisonTable:
    rows: list

    def max_abs_pg_err(self) -> float:
        return max(abs(r.p_g_err_pct) for r in self.rows)

    def max_abs_phat_err(self) -> float:
        return max(abs(r.p_hat_err_pct) for r in self.rows)

    def to_text(self) -> str:
        out = [f"{'node':>5s} {'p_g dist':>12s} {'p_g ref':>12s} {'e(%)':>9s} "
               f"{'phat dist':>12s} {'phat ref':>12s} {'e(%)':>9s}"]
        for r in self.rows:
            out.append(f"{r.node:>5d} {r.p_g_dist:>12.4f} {r.p_g_ref:>12.4f} "
                       f"{r.p_g_err_pct:>9.4f} {r.p_hat_dist:>12.4f} "
                       f"{r.p_hat_ref:>12.4f} {r.p_hat_err_pct:>9.4f}")
        return "\n".join(out)

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("node,p_g_dist_kw,p_g_ref_kw,p_g_err_pct,"
                     "p_hat_dist_kw,p_hat_ref_kw,p_hat_err_pct\n")
            for r in self.rows:
                fh.write(f"{r.node},{_fmt(r.p_g_dist)},{_fmt(r.p_g_ref)},"
                         f"{_fmt(r.p_g_err_pct)},{_fmt(r.p_hat_dist)},"
                         f"{_fmt(r.p_hat_ref)},{_fmt(r.p_hat_err_pct)}\n")


def compare_with_reference(trace: TraceTable, node_ids, p_ref, phat_ref,
                           converged: bool) -> ComparisonTable:
    """Relative-error table of the final trace point against a reference.

    Raises on a trace that never met the convergence criterion: errors
    against a still-moving state would be meaningless.
    """
    if not converged:
        raise ConvergenceError("trace did not converge; refusing to compare")
    rows = []
    for j, nid in enumerate(node_ids):
        pd_ = trace.last(f"p_g_kw_{nid}")
        ph_ = trace.last(f"p_hat_kw_{nid}")
        pr, hr = float(p_ref[j]), float(phat_ref[j])
        rows.append(ComparisonRow(
            node=nid, p_g_dist=pd_, p_g_ref=pr,
            p_g_err_pct=100.0 * (pd_ - pr) / pr if pr != 0 else np.nan,
            p_hat_dist=ph_, p_hat_ref=hr,
            p_hat_err_pct=100.0 * (ph_ - hr) / hr if hr != 0 else np.nan))
    return ComparisonTable(rows)
