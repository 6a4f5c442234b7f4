"""Quasi-static physical layer: nonlinear DC power flow with mixed bus types.

Replaces an electromagnetic-transient simulation with the steady-state
network response to the current command set.  Inner converter loops are
treated as ideal trackers, so between controller steps the plant is the
exact solution of

    power bus:    p_ref - p_d = V_i * sum_k (V_i - V_k) / r_ik   (in W)
    voltage bus:  V_i = v_ref
    droop bus:    V_i**2 = v_i* - k_i (g_i - phat_ref),
                  g_i = p_d + V_i * sum_k (V_i - V_k) / r_ik

solved per connected component by damped Newton iteration on the free
bus voltages.  Droop rows are written in squared volts, matching the
droop law itself.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import units
from .network import ControlMode, GridIndex
from .dynamics import CommandSet

MAX_ITERATIONS = 50


class PowerFlowError(RuntimeError):
    """Newton failed to converge, or the network is underdetermined."""


@dataclass
class PlantState:
    """Physically consistent operating point, aligned with a GridIndex.

    V in volts per node; I in amps and Pflow in kW per directed pair;
    inj in kW per node (net injection g_i - p_i^d).  I and Pflow are
    derived exactly from V, so the loss and voltage-drop identities hold
    to machine precision.
    """

    V: np.ndarray
    I: np.ndarray
    Pflow: np.ndarray
    inj: np.ndarray

    def current(self, idx: GridIndex, i: int, k: int) -> float:
        a, b = idx.index_of[i], idx.index_of[k]
        for j in range(idx.npairs):
            if idx.src[j] == a and idx.dst[j] == b:
                return float(self.I[j])
        raise KeyError(f"no directed pair ({i},{k})")


@dataclass
class MeasurementBundle:
    """What one agent's sensors deliver: own voltage, line currents and
    powers toward each neighbor, and realized generation."""

    node: int
    V: float                  # volts
    I: dict                   # neighbor id -> amps
    Pflow: dict               # neighbor id -> kW
    g: float                  # kW

    def current(self, node: int, neighbor: int) -> float:
        return self.I[neighbor]


class PlantMeasurements:
    """Measurement access for all agents against one solved plant state."""

    def __init__(self, idx: GridIndex, state: PlantState):
        self.idx = idx
        self.state = state

    def current(self, node: int, neighbor: int) -> float:
        return self.state.current(self.idx, node, neighbor)

    def bundle(self, node: int) -> MeasurementBundle:
        return measurements_for(self.idx, self.state, node)


def _derived_flows(idx: GridIndex, V: np.ndarray) -> PlantState:
    I = (V[idx.src] - V[idx.dst]) / idx.r if idx.npairs else np.zeros(0)
    Pflow = V[idx.src] * I / units.W_PER_KW if idx.npairs else np.zeros(0)
    inj = idx.node_sum(Pflow)
    return PlantState(V=V, I=I, Pflow=Pflow, inj=inj)


def solve_power_flow(grid, commands: CommandSet, guess: np.ndarray = None,
                     tol: float = 1e-10, max_iter: int = MAX_ITERATIONS) -> PlantState:
    """Solve the network response to a command set.

    Every connected component needs at least one voltage-anchoring bus
    (voltage- or droop-controlled), otherwise the voltage level is
    undetermined.  `guess` (volts per node) warm-starts Newton; a flat
    start at sqrt(v*) is used otherwise.  `tol` bounds the residual
    infinity norm, in kW for power rows and V**2 (scaled to solver
    squared-voltage units) for droop rows.
    """
    idx = grid if isinstance(grid, GridIndex) else GridIndex(grid)
    V = np.sqrt(idx.vstar * units.V2_PER_UNIT) if guess is None \
        else np.asarray(guess, dtype=float).copy()
    if np.any(V <= 0):
        raise PowerFlowError("guess voltages must be positive")

    for comp, rows in zip(idx.component_ids, idx.components):
        if not any(idx.mode[i] in (ControlMode.VOLTAGE, ControlMode.DROOP)
                   for i in rows):
            raise PowerFlowError(
                f"component {comp} has no voltage-anchoring bus")

    # fixed (voltage-controlled) and free buses
    fixed = {}
    for i, nid in enumerate(idx.node_ids):
        if idx.mode[i] is ControlMode.VOLTAGE:
            if nid not in commands.v_ref:
                raise PowerFlowError(f"missing v_ref for voltage bus {nid}")
            fixed[i] = commands.v_ref[nid]
        elif idx.mode[i] is ControlMode.POWER and nid not in commands.p_ref:
            raise PowerFlowError(f"missing p_ref for power bus {nid}")
        elif idx.mode[i] is ControlMode.DROOP and nid not in commands.p_hat_ref:
            raise PowerFlowError(f"missing p_hat_ref for droop bus {nid}")
    for i, vref in fixed.items():
        V[i] = vref
    free = [i for i in range(idx.n) if i not in fixed]

    if not free:
        return _derived_flows(idx, V)

    free_pos = {i: j for j, i in enumerate(free)}

    def residual(V):
        plant = _derived_flows(idx, V)
        F = np.zeros(len(free))
        for i in free:
            nid = idx.node_ids[i]
            if idx.mode[i] is ControlMode.POWER:
                F[free_pos[i]] = (commands.p_ref[nid] - idx.d[i]) - plant.inj[i]
            else:  # droop
                g = idx.d[i] + plant.inj[i]
                F[free_pos[i]] = (units.volts_to_solver_v2(V[i])
                                  - (idx.vstar[i]
                                     - idx.k[i] * (g - commands.p_hat_ref[nid])))
        return F, plant

    def jacobian(V):
        J = np.zeros((len(free), len(free)))
        # d inj_i / dV (kW per volt)
        for i in free:
            row = free_pos[i]
            nid = idx.node_ids[i]
            dinj = {}
            dinj[i] = 0.0
            for j in idx.pairs_of_node[i]:
                k = int(idx.dst[j])
                dinj[i] += (2.0 * V[i] - V[k]) / idx.r[j] / units.W_PER_KW
                dinj[k] = -V[i] / idx.r[j] / units.W_PER_KW
            if idx.mode[i] is ControlMode.POWER:
                for k, val in dinj.items():
                    if k in free_pos:
                        J[row, free_pos[k]] = -val
            else:
                for k, val in dinj.items():
                    if k in free_pos:
                        J[row, free_pos[k]] = idx.k[i] * val
                J[row, free_pos[i]] += 2.0 * V[i] / units.V2_PER_UNIT
        return J

    F, plant = residual(V)
    for _ in range(max_iter):
        if float(np.max(np.abs(F), initial=0.0)) <= tol:
            return plant
        J = jacobian(V)
        try:
            delta = np.linalg.solve(J, F)
        except np.linalg.LinAlgError as exc:
            raise PowerFlowError(f"singular power-flow Jacobian: {exc}") from exc
        step = 1.0
        # keep voltages positive; halve the step if the residual grows badly
        for _ in range(12):
            Vn = V.copy()
            for i in free:
                Vn[i] = V[i] - step * delta[free_pos[i]]
            if np.all(Vn[free] > 1.0):
                Fn, plant_n = residual(Vn)
                if not np.all(np.isfinite(Fn)):
                    step *= 0.5
                    continue
                if np.max(np.abs(Fn), initial=0.0) <= max(
                        10.0 * tol, 0.9 * np.max(np.abs(F), initial=0.0)):
                    V, F, plant = Vn, Fn, plant_n
                    break
            step *= 0.5
        else:
            raise PowerFlowError("power-flow line search failed")
    raise PowerFlowError(
        f"no convergence after {max_iter} iterations "
        f"(residual {np.max(np.abs(F)):.3e})")


def measurements_for(grid, plant: PlantState, node: int) -> MeasurementBundle:
    """Local sensor bundle for one agent from a solved plant state."""
    idx = grid if isinstance(grid, GridIndex) else GridIndex(grid)
    i = idx.index_of[node]
    I = {}
    Pf = {}
    for j in idx.pairs_of_node[i]:
        nbr = idx.node_ids[idx.dst[j]]
        I[nbr] = float(plant.I[j])
        Pf[nbr] = float(plant.Pflow[j])
    return MeasurementBundle(node=node, V=float(plant.V[i]), I=I, Pflow=Pf,
                             g=float(idx.d[i] + plant.inj[i]))
