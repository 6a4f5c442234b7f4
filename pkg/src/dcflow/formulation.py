"""Branch-flow optimization quantities: objective, constraint residuals,
cone-tightness gaps, and the map between the bus-injection and branch-flow
variable sets.

Decision variables live in engineering units here (kW, V**2, A**2); see
units.py for the boundary conversions on the three flow equations.
Everything is a pure function of immutable inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import units
from .network import GridIndex

# determinant slack for the 2x2 PSD test, scaled by the matrix magnitude
PSD_DET_SLACK = 1e-9


def _index(grid) -> GridIndex:
    return grid if isinstance(grid, GridIndex) else GridIndex(grid)


@dataclass
class PrimalState:
    """Branch-flow primal point, array-aligned with a GridIndex.

    p_g, p_hat are kW per node; v is V**2 per node; P is kW per directed
    pair; l is A**2 per undirected line (symmetric by construction, so
    reading either direction returns the same value).
    """

    p_g: np.ndarray
    v: np.ndarray
    P: np.ndarray
    l: np.ndarray
    p_hat: np.ndarray

    def copy(self) -> "PrimalState":
        return PrimalState(self.p_g.copy(), self.v.copy(), self.P.copy(),
                           self.l.copy(), self.p_hat.copy())

    def l_between(self, idx: GridIndex, i: int, k: int) -> float:
        """Squared current on line (i,k), either orientation."""
        a, b = idx.index_of[i], idx.index_of[k]
        for li, (s, t) in enumerate(idx.line_nodes):
            if {s, t} == {a, b}:
                return float(self.l[li])
        raise KeyError(f"no line between {i} and {k}")

    def validate(self, idx: GridIndex) -> None:
        if self.p_g.shape != (idx.n,) or self.v.shape != (idx.n,) \
                or self.p_hat.shape != (idx.n,) or self.P.shape != (idx.npairs,) \
                or self.l.shape != (idx.m,):
            raise ValueError("state dimensions do not match the grid")
        if np.any(self.l < -1e-9):
            raise ValueError("negative squared current")
        if np.any(self.v <= 0):
            raise ValueError("nonpositive squared voltage")


@dataclass
class SocpSolution:
    """Bus-injection relaxation point: squared voltages and cross terms.

    W is per undirected line (W_ik = W_ki).  Feasibility requires each
    2x2 minor [[v_i, W_ik], [W_ik, v_k]] to be positive semidefinite.
    """

    v: np.ndarray     # V**2 per node
    W: np.ndarray     # V**2 per line
    p_g: np.ndarray   # kW per node

    def validate(self, idx: GridIndex) -> None:
        if self.v.shape != (idx.n,) or self.W.shape != (idx.m,) \
                or self.p_g.shape != (idx.n,):
            raise ValueError("solution dimensions do not match the grid")
        if np.any(self.W < 0):
            raise ValueError("negative cross term W")
        if np.any(self.v < 0):
            raise ValueError("negative squared voltage")
        for li, (i, k) in enumerate(idx.line_nodes):
            det = self.v[i] * self.v[k] - self.W[li] ** 2
            if det < -PSD_DET_SLACK * max(1.0, self.v[i] * self.v[k]):
                raise ValueError(f"line {li}: 2x2 voltage minor is not PSD")


def objective(grid, x: PrimalState) -> float:
    """Total generation cost sum_i f_i(p_i^g)."""
    idx = _index(grid)
    if x.p_g.shape != (idx.n,):
        raise ValueError("dimension mismatch")
    return float(np.sum(0.5 * idx.a * x.p_g ** 2 + idx.b * x.p_g))


def aux_y(grid, x: PrimalState) -> np.ndarray:
    """Droop deviation y_i = v_i + k_i p_i^g - v_i* - k_i phat_i, in V**2."""
    idx = _index(grid)
    k_v2 = idx.k * units.V2_PER_UNIT
    vstar_v2 = idx.vstar * units.V2_PER_UNIT
    return x.v + k_v2 * x.p_g - vstar_v2 - k_v2 * x.p_hat


def aux_z(grid, x: PrimalState) -> np.ndarray:
    """Power-balance deviation z_i = p_i^g - p_i^d - sum_k P_ik, in kW."""
    idx = _index(grid)
    return x.p_g - idx.d - idx.node_sum(x.P)


def augmented_objective(grid, x: PrimalState) -> float:
    """Objective plus the deviation penalties (1/2) y**2 + (1/2) z**2.

    Equals the plain objective at any feasible point, where y = z = 0.
    The droop deviation enters in solver squared-voltage units so the
    value matches the function the controller actually descends.
    """
    idx = _index(grid)
    y = units.v2_to_solver(aux_y(idx, x))
    z = aux_z(idx, x)
    return objective(idx, x) + 0.5 * float(np.sum(y ** 2)) + 0.5 * float(np.sum(z ** 2))


@dataclass
class ResidualReport:
    """Per-constraint residuals in natural units, plus a normalized norm."""

    loss_kw: np.ndarray      # per line:  P_ik + P_ki - r l
    ohm_v2: np.ndarray       # per line:  v_i - v_k - r (P_ik - P_ki)
    soc_a2: np.ndarray       # per directed pair:  P_ik**2/v_i - l  (>0 violates)
    vbox_v2: np.ndarray      # per node: distance outside [Vmin**2, Vmax**2]
    gbox_kw: np.ndarray      # per node: distance outside [0, pmax]
    droop_v2: np.ndarray     # per node: y_i
    balance_kw: np.ndarray   # per node: z_i
    normalized_inf: float

    def max_abs(self) -> dict:
        return {
            "loss_kw": float(np.max(np.abs(self.loss_kw), initial=0.0)),
            "ohm_v2": float(np.max(np.abs(self.ohm_v2), initial=0.0)),
            "soc_a2": float(np.max(np.abs(self.soc_a2), initial=0.0)),
            "vbox_v2": float(np.max(self.vbox_v2, initial=0.0)),
            "gbox_kw": float(np.max(self.gbox_kw, initial=0.0)),
            "droop_v2": float(np.max(np.abs(self.droop_v2), initial=0.0)),
            "balance_kw": float(np.max(np.abs(self.balance_kw), initial=0.0)),
        }


def residuals(grid, x: PrimalState) -> ResidualReport:
    """Evaluate every branch-flow constraint at x.

    Mixed units would make one raw norm misleading, so the normalized
    norm divides each family by its natural scale (capacity for power
    rows, the voltage ceiling for squared-voltage rows, the worst-case
    cone current for squared-current rows).
    """
    idx = _index(grid)
    x.validate(idx)
    fwd = idx.fwd_of_line
    P_f, P_b = x.P[fwd], x.P[idx.rev[fwd]]
    loss = P_f + P_b - units.line_loss_kw(idx.line_r, x.l)
    vi = x.v[idx.src[fwd]]
    vk = x.v[idx.dst[fwd]]
    ohm = vi - vk - units.ohm_drop_v2(idx.line_r, P_f - P_b)
    soc = units.soc_current_a2(x.P, x.v[idx.src]) - x.l[idx.line_of]

    vmin2 = idx.vmin2 * units.V2_PER_UNIT
    vmax2 = idx.vmax2 * units.V2_PER_UNIT
    vbox = np.maximum(vmin2 - x.v, 0.0) + np.maximum(x.v - vmax2, 0.0)
    gbox = np.maximum(-x.p_g, 0.0) + np.maximum(x.p_g - idx.pmax, 0.0)
    droop = aux_y(idx, x)
    balance = aux_z(idx, x)

    p_scale = max(1.0, float(np.max(idx.pmax)))
    v_scale = max(1.0, float(np.max(vmax2)))
    l_scale = max(1.0, float(np.max(units.soc_current_a2(np.max(idx.pmax), np.min(vmin2)))))
    normalized = 0.0
    for arr, scale in ((loss, p_scale), (gbox, p_scale), (balance, p_scale),
                       (ohm, v_scale), (vbox, v_scale), (droop, v_scale),
                       (soc, l_scale)):
        if arr.size:
            normalized = max(normalized, float(np.max(np.abs(arr))) / scale)
    return ResidualReport(loss, ohm, soc, vbox, gbox, droop, balance, normalized)


def exactness_gap(grid, x: PrimalState) -> np.ndarray:
    """Cone slack l - P_ik**2/v_i per directed pair, in A**2.

    Nonnegative means relaxation-feasible; near zero means the relaxed
    point is realizable by an actual current profile.
    """
    idx = _index(grid)
    if np.any(x.v <= 0):
        raise ValueError("nonpositive squared voltage")
    return x.l[idx.line_of] - units.soc_current_a2(x.P, x.v[idx.src])


def map_socp_to_branch(grid, s: SocpSolution) -> PrimalState:
    """One-to-one map from the bus-injection relaxation to branch flows:

        P_ik = (v_i - W_ik) / r_ik
        l_ik = (v_i - W_ik - W_ki + v_k) / r_ik**2

    The returned p_hat is the droop-consistent reference for each node.
    """
    idx = _index(grid)
    s.validate(idx)
    P = np.zeros(idx.npairs)
    for j in range(idx.npairs):
        li = idx.line_of[j]
        vi = s.v[idx.src[j]]
        P[j] = (vi - s.W[li]) / idx.r[j] / units.W_PER_KW
    l = np.zeros(idx.m)
    for li, (i, k) in enumerate(idx.line_nodes):
        l[li] = (s.v[i] - 2.0 * s.W[li] + s.v[k]) / idx.line_r[li] ** 2
    x = PrimalState(p_g=s.p_g.copy(), v=s.v.copy(), P=P, l=l,
                    p_hat=np.zeros(idx.n))
    x.p_hat = droop_reference(idx, x)
    return x


def droop_reference(grid, x: PrimalState) -> np.ndarray:
    """The unique phat making the droop law hold at (v, p_g), all nodes."""
    idx = _index(grid)
    k_v2 = idx.k * units.V2_PER_UNIT
    vstar_v2 = idx.vstar * units.V2_PER_UNIT
    return x.p_g + (x.v - vstar_v2) / k_v2


def droop_reference_for(grid, x: PrimalState, node: int) -> float:
    """phat_i = p_i^g + (v_i - v_i*) / k_i for one microgrid."""
    idx = _index(grid)
    return float(droop_reference(idx, x)[idx.index_of[node]])
