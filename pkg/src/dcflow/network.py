"""DC microgrid network model: per-microgrid parameters, lines, topology.

A stand-alone DC system is a connected graph of microgrids (buses with
generation and load) joined by resistive tie lines.  Each microgrid runs
one of three local control strategies: power control, voltage control,
or droop control on the squared voltage,

    v_i - v_i* = -k_i (p_i^g - phat_i),   v_i = V_i**2.

Microgrids that do not use droop control still carry (k_i, v_i*) so the
optimization layer can treat every bus uniformly; the coefficient has no
effect on their dispatch.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from . import units

# Strong-convexity floor for cost curvature (assumption on f'' > 0).
DEFAULT_ALPHA_FLOOR = 1e-6
# Fallback droop slope in V**2/kW when neither microgrid nor defaults give one.
DEFAULT_DROOP_K = 130.0


class ConfigError(ValueError):
    """Raised for unparsable configuration or a violated model invariant."""


class ControlMode(Enum):
    POWER = "power"
    VOLTAGE = "voltage"
    DROOP = "droop"


@dataclass(frozen=True)
class MicrogridParams:
    """Static per-microgrid data, in engineering units (kW, V, V**2/kW)."""

    id: int
    cost_a: float          # cost curvature, per kW**2
    cost_b: float          # cost slope, per kW
    load: float            # demand, kW
    gen_max: float         # generation capacity, kW
    v_min: float           # V
    v_max: float           # V
    droop_k: float         # V**2/kW
    v_star: float          # squared-voltage reference, V**2
    mode: ControlMode


@dataclass(frozen=True)
class Line:
    """Tie line between two microgrids."""

    i: int
    k: int
    resistance: float      # ohm

    def endpoints(self) -> frozenset:
        return frozenset((self.i, self.k))


@dataclass(frozen=True)
class GridModel:
    """Immutable network: microgrids, lines, and currently detached nodes.

    ``lines`` always holds the full as-built line set; a line is active
    only while both endpoints are attached.  Topology events produce a
    new model value, so concurrent readers never observe a mutation.
    """

    microgrids: tuple
    lines: tuple
    detached: frozenset = field(default_factory=frozenset)

    @property
    def n(self) -> int:
        return len(self.microgrids)

    @property
    def node_ids(self) -> list:
        return [mg.id for mg in self.microgrids]

    def microgrid(self, node_id: int) -> MicrogridParams:
        for mg in self.microgrids:
            if mg.id == node_id:
                return mg
        raise KeyError(f"unknown microgrid id {node_id}")

    def active_lines(self) -> list:
        return [ln for ln in self.lines
                if ln.i not in self.detached and ln.k not in self.detached]

    def adjacency(self) -> dict:
        """Neighbor sets N_i over the active lines."""
        adj = {mg.id: set() for mg in self.microgrids}
        for ln in self.active_lines():
            adj[ln.i].add(ln.k)
            adj[ln.k].add(ln.i)
        return adj

    def components(self) -> list:
        """Connected components (lists of node ids) of the active graph."""
        adj = self.adjacency()
        seen, comps = set(), []
        for mg in self.microgrids:
            if mg.id in seen:
                continue
            stack, comp = [mg.id], []
            seen.add(mg.id)
            while stack:
                u = stack.pop()
                comp.append(u)
                for w in sorted(adj[u]):
                    if w not in seen:
                        seen.add(w)
                        stack.append(w)
            comps.append(sorted(comp))
        return comps


def cost(params: MicrogridParams, p: float) -> float:
    """Generation cost f(p) = (a/2) p**2 + b p, p in kW."""
    return 0.5 * params.cost_a * p * p + params.cost_b * p


def cost_gradient(params: MicrogridParams, p: float) -> float:
    """Marginal generation cost f'(p) = a p + b."""
    return params.cost_a * p + params.cost_b


def validate_model(model: GridModel, alpha_floor: float = DEFAULT_ALPHA_FLOOR) -> None:
    """Check every model invariant; raise ConfigError naming the offender."""
    if not model.microgrids:
        raise ConfigError("model has no microgrids")
    ids = [mg.id for mg in model.microgrids]
    if len(set(ids)) != len(ids):
        raise ConfigError("duplicate microgrid ids")

    for mg in model.microgrids:
        where = f"microgrid {mg.id}"
        if mg.cost_a < alpha_floor:
            raise ConfigError(f"{where}: cost_a must be >= {alpha_floor} (strong convexity)")
        if mg.load <= 0:
            raise ConfigError(f"{where}: load must be positive")
        if mg.gen_max <= 0:
            raise ConfigError(f"{where}: gen_max must be positive")
        if not (0 < mg.v_min < mg.v_max):
            raise ConfigError(f"{where}: need 0 < v_min < v_max")
        if mg.droop_k <= 0:
            raise ConfigError(f"{where}: droop_k must be positive")
        if not (mg.v_min ** 2 <= mg.v_star <= mg.v_max ** 2):
            raise ConfigError(f"{where}: v_star outside [v_min**2, v_max**2]")

    # Exactness of the cone relaxation needs a common voltage ceiling.
    vmaxes = {mg.v_max for mg in model.microgrids}
    if len(vmaxes) != 1:
        raise ConfigError("all microgrids must share the same v_max")

    id_set = set(ids)
    seen_pairs = set()
    for ln in model.lines:
        where = f"line ({ln.i},{ln.k})"
        if ln.i not in id_set or ln.k not in id_set:
            raise ConfigError(f"{where}: unknown endpoint")
        if ln.i == ln.k:
            raise ConfigError(f"{where}: self-loop")
        if ln.resistance <= 0:
            raise ConfigError(f"{where}: resistance must be positive")
        pair = ln.endpoints()
        if pair in seen_pairs:
            raise ConfigError(f"{where}: duplicate line")
        seen_pairs.add(pair)

    for node in model.detached:
        if node not in id_set:
            raise ConfigError(f"detached node {node} does not exist")

    # Initially-loaded models must be connected; detached nodes split off
    # deliberately and each component is then treated on its own.
    comps = model.components()
    if not model.detached and len(comps) > 1:
        raise ConfigError(f"graph is not connected: components {comps}")

    for comp in comps:
        cap = sum(model.microgrid(i).gen_max for i in comp)
        dem = sum(model.microgrid(i).load for i in comp)
        if cap <= dem:
            raise ConfigError(
                f"component {comp}: generation capacity {cap} kW does not exceed load {dem} kW")


def load_config(path, alpha_floor: float = DEFAULT_ALPHA_FLOOR) -> GridModel:
    """Load and validate a grid configuration file (JSON schema).

    Top-level keys: ``microgrids`` (required), ``lines`` (required,
    possibly empty), ``defaults`` (optional: v_star_volts, droop_k_v2_per_kw),
    ``description`` (optional free text).
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: parse error: {exc}") from exc
    return model_from_dict(raw, alpha_floor=alpha_floor)


def model_from_dict(raw: dict, alpha_floor: float = DEFAULT_ALPHA_FLOOR) -> GridModel:
    if not isinstance(raw, dict):
        raise ConfigError("top level must be an object")
    defaults = raw.get("defaults", {})
    default_droop = defaults.get("droop_k_v2_per_kw", DEFAULT_DROOP_K)

    mgs = []
    for entry in raw.get("microgrids", []):
        try:
            node_id = int(entry["id"])
            v_min = float(entry["v_min_volts"])
            v_max = float(entry["v_max_volts"])
            default_vstar = defaults.get("v_star_volts", 0.5 * (v_min + v_max))
            mg = MicrogridParams(
                id=node_id,
                cost_a=float(entry["cost_a_per_kw2"]),
                cost_b=float(entry["cost_b_per_kw"]),
                load=float(entry["load_kw"]),
                gen_max=float(entry["gen_max_kw"]),
                v_min=v_min,
                v_max=v_max,
                droop_k=float(entry.get("droop_k_v2_per_kw", default_droop)),
                v_star=float(entry.get("v_star_volts", default_vstar)) ** 2,
                mode=ControlMode(entry.get("mode", "droop")),
            )
        except KeyError as exc:
            raise ConfigError(f"microgrid entry {entry.get('id', '?')}: missing field {exc}") from exc
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"microgrid entry {entry.get('id', '?')}: {exc}") from exc
        mgs.append(mg)

    lines = []
    for entry in raw.get("lines", []):
        try:
            lines.append(Line(i=int(entry["from"]), k=int(entry["to"]),
                              resistance=float(entry["resistance_ohm"])))
        except KeyError as exc:
            raise ConfigError(f"line entry {entry}: missing field {exc}") from exc
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"line entry {entry}: {exc}") from exc

    model = GridModel(microgrids=tuple(mgs), lines=tuple(lines))
    validate_model(model, alpha_floor=alpha_floor)
    return model


def disconnect(model: GridModel, node: int) -> GridModel:
    """Detach a microgrid: all incident lines drop, the node islands itself."""
    if node not in set(model.node_ids):
        raise ConfigError(f"unknown node {node}")
    if node in model.detached:
        raise ConfigError(f"node {node} is already disconnected")
    if model.n == 1:
        raise ConfigError("cannot disconnect the only microgrid")
    return replace(model, detached=model.detached | {node})


def reconnect(model: GridModel, node: int) -> GridModel:
    """Re-attach a previously disconnected microgrid; original lines return."""
    if node not in set(model.node_ids):
        raise ConfigError(f"unknown node {node}")
    if node not in model.detached:
        raise ConfigError(f"node {node} is not disconnected")
    return replace(model, detached=model.detached - {node})


def apply_topology_change(model: GridModel, kind: str, node: int) -> GridModel:
    """Apply a connect/disconnect event; returns a new model value."""
    if kind == "disconnect":
        return disconnect(model, node)
    if kind == "reconnect":
        return reconnect(model, node)
    raise ConfigError(f"unknown topology change {kind!r}")


def set_load(model: GridModel, node: int, load_kw: float) -> GridModel:
    if load_kw <= 0:
        raise ConfigError(f"node {node}: load must be positive")
    mgs = tuple(replace(mg, load=load_kw) if mg.id == node else mg
                for mg in model.microgrids)
    if not any(mg.id == node for mg in model.microgrids):
        raise ConfigError(f"unknown node {node}")
    return replace(model, microgrids=mgs)


def set_gen_max(model: GridModel, node: int, gen_max_kw: float) -> GridModel:
    if gen_max_kw <= 0:
        raise ConfigError(f"node {node}: gen_max must be positive")
    mgs = tuple(replace(mg, gen_max=gen_max_kw) if mg.id == node else mg
                for mg in model.microgrids)
    if not any(mg.id == node for mg in model.microgrids):
        raise ConfigError(f"unknown node {node}")
    return replace(model, microgrids=mgs)


class GridIndex:
    """Array view of a GridModel in solver units, shared by all kernels.

    Nodes are ordered by ascending id; every active line contributes two
    directed pairs (i,k) and (k,i).  Directed-pair arrays are sorted by
    (source index, destination index) so that reductions and traces are
    deterministic.
    """

    def __init__(self, model: GridModel):
        self.model = model
        mgs = sorted(model.microgrids, key=lambda m: m.id)
        self.node_ids = [mg.id for mg in mgs]
        self.index_of = {mg.id: i for i, mg in enumerate(mgs)}
        self.n = len(mgs)

        self.a = np.array([mg.cost_a for mg in mgs])
        self.b = np.array([mg.cost_b for mg in mgs])
        self.d = np.array([mg.load for mg in mgs])
        self.pmax = np.array([mg.gen_max for mg in mgs])
        self.vmin2 = np.array([units.volts_to_solver_v2(mg.v_min) for mg in mgs])
        self.vmax2 = np.array([units.volts_to_solver_v2(mg.v_max) for mg in mgs])
        self.vstar = np.array([units.v2_to_solver(mg.v_star) for mg in mgs])
        self.k = np.array([units.droop_to_solver(mg.droop_k) for mg in mgs])
        self.mode = [mg.mode for mg in mgs]

        act = sorted(model.active_lines(),
                     key=lambda ln: (self.index_of[min(ln.i, ln.k)],
                                     self.index_of[max(ln.i, ln.k)]))
        self.m = len(act)
        self.line_r = np.array([ln.resistance for ln in act]) if act else np.zeros(0)
        self.line_nodes = [(self.index_of[min(ln.i, ln.k)],
                            self.index_of[max(ln.i, ln.k)]) for ln in act]

        pairs = []
        for li, (i, k) in enumerate(self.line_nodes):
            pairs.append((i, k, li))
            pairs.append((k, i, li))
        pairs.sort()
        self.npairs = len(pairs)
        self.src = np.array([p[0] for p in pairs], dtype=int)
        self.dst = np.array([p[1] for p in pairs], dtype=int)
        self.line_of = np.array([p[2] for p in pairs], dtype=int)
        self.r = self.line_r[self.line_of] if pairs else np.zeros(0)
        pos = {(s, t): j for j, (s, t, _) in enumerate(pairs)}
        self.rev = np.array([pos[(t, s)] for s, t, _ in pairs], dtype=int)
        # first directed pair of each line (the (min,max) orientation)
        self.fwd_of_line = np.array([pos[(i, k)] for i, k in self.line_nodes], dtype=int) \
            if act else np.zeros(0, dtype=int)
        # directed pairs leaving each node, ascending pair index
        self.pairs_of_node = [np.flatnonzero(self.src == i) for i in range(self.n)]
        # static per-model facts, precomputed for the per-step loops
        self.components = [[self.index_of[nid] for nid in comp]
                           for comp in model.components()]
        self.component_ids = model.components()

    def node_sum(self, per_pair: np.ndarray) -> np.ndarray:
        """Sum a per-directed-pair quantity over each source node."""
        if self.npairs == 0:
            return np.zeros(self.n)
        return np.bincount(self.src, weights=per_pair, minlength=self.n)
