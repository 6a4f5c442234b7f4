"""Distributed primal-dual controller for the droop-constrained dispatch
problem: per-agent projected gradient flow, neighbor messaging and
estimation, saturation handling, and time integration.

Each agent i integrates its own primal block (p_i, v_i, P_ik, l_ik,
phat_i) and dual block (mu_i, eps_i, lambda_ik, gamma_ik, rho_ik).  The
generation and squared-voltage states are clamped into their operating
boxes inside the flow itself, so emitted commands are feasible at every
instant, not just in steady state.

Neighbor values P_ki and v_k enter only the per-line dual updates.  The
default engine exchanges them together with rho_ki in the one synchronous
message round per step ("exact" mode).  The measurement-based estimation
of P_ki and v_k from the locally metered line current is available as
"plant" mode; with the quasi-static plant used here it is consistent at
steady state but feeds transient plant/controller mismatch into the
duals, so it is not the default (see README).

All kernel math runs in the coherent solver units of units.py; the
public types carry engineering units (kW, V**2, A**2).
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import units
from .formulation import PrimalState
from .network import ControlMode, GridIndex

NEIGHBOR_MODES = ("exact", "plant")


class DivergenceError(RuntimeError):
    """The integrator produced a nonfinite or runaway state."""


def clamp(x, lo, hi):
    """Box projection: min(hi, max(lo, x)).  Requires lo <= hi."""
    if np.any(np.asarray(lo) > np.asarray(hi)):
        raise ValueError("clamp: lower bound exceeds upper bound")
    return np.minimum(hi, np.maximum(lo, x))


def positive_projection(x, a):
    """Pass x through unless it would drag a nonpositive state further down.

    Returns x when a > 0 or x > 0, else 0.  Keeps multipliers of
    inequality constraints nonnegative along the flow.
    """
    return np.where((np.asarray(a) > 0) | (np.asarray(x) > 0), x, 0.0)


@dataclass
class DualState:
    """Multiplier block, array-aligned with a GridIndex.

    mu, eps are per node; lam, gam, rho are per directed pair, each agent
    owning the copies for its outgoing directions.  Values are in solver
    scale (powers in kW, squared voltages in solver units).
    """

    mu: np.ndarray
    eps: np.ndarray
    lam: np.ndarray
    gam: np.ndarray
    rho: np.ndarray

    def copy(self) -> "DualState":
        return DualState(self.mu.copy(), self.eps.copy(), self.lam.copy(),
                         self.gam.copy(), self.rho.copy())


@dataclass
class CommandSet:
    """Per-node control commands keyed by microgrid id.

    Power-controlled nodes receive p_ref (kW), voltage-controlled nodes
    v_ref (V), droop-controlled nodes p_hat_ref (kW).  p_ref and v_ref
    are feasible whenever the emitting state sits in its operating box.
    """

    p_ref: dict = field(default_factory=dict)
    v_ref: dict = field(default_factory=dict)
    p_hat_ref: dict = field(default_factory=dict)


@dataclass
class AgentView:
    """What one agent can see: its own slices plus the neighbor inbox."""

    node: int
    p_g: float
    v: float                 # V**2
    p_hat: float
    mu: float
    eps: float
    P: dict                  # neighbor id -> own outgoing P_ik (kW)
    l: dict                  # neighbor id -> squared line current (A**2)
    lam: dict
    gam: dict
    rho: dict
    r: dict                  # neighbor id -> line resistance (ohm)
    inbox: dict              # neighbor id -> rho_ki message
    meas_i: dict = field(default_factory=dict)   # neighbor id -> metered I_ik (A)
    estimates: dict = field(default_factory=dict)  # neighbor id -> (P_ki, v_k)


# ---------------------------------------------------------------------------
# solver-unit state block


@dataclass
class SysState:
    """Flat controller state in solver units (internal)."""

    p: np.ndarray
    v: np.ndarray
    P: np.ndarray
    l: np.ndarray
    ph: np.ndarray
    mu: np.ndarray
    eps: np.ndarray
    lam: np.ndarray
    gam: np.ndarray
    rho: np.ndarray

    FIELDS = ("p", "v", "P", "l", "ph", "mu", "eps", "lam", "gam", "rho")

    def arrays(self):
        return [getattr(self, f) for f in self.FIELDS]

    def copy(self) -> "SysState":
        return SysState(*[a.copy() for a in self.arrays()])

    def to_vector(self) -> np.ndarray:
        return np.concatenate(self.arrays()) if self.p.size else np.zeros(0)

    def inf_norm(self) -> float:
        out = 0.0
        for a in self.arrays():
            if a.size:
                m = float(np.abs(a).max())
                if m > out:
                    out = m
        return out

    def isfinite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays())


def primal_public(idx: GridIndex, st: SysState) -> PrimalState:
    return PrimalState(p_g=st.p.copy(),
                       v=units.v2_from_solver(st.v),
                       P=st.P.copy(),
                       l=units.a2_from_solver(st.l),
                       p_hat=st.ph.copy())


def dual_public(st: SysState) -> DualState:
    return DualState(st.mu.copy(), st.eps.copy(), st.lam.copy(),
                     st.gam.copy(), st.rho.copy())


def pack_states(idx: GridIndex, x: PrimalState, d: DualState) -> SysState:
    return SysState(p=np.asarray(x.p_g, dtype=float).copy(),
                    v=units.v2_to_solver(np.asarray(x.v, dtype=float)),
                    P=np.asarray(x.P, dtype=float).copy(),
                    l=units.a2_to_solver(np.asarray(x.l, dtype=float)),
                    ph=np.asarray(x.p_hat, dtype=float).copy(),
                    mu=np.asarray(d.mu, dtype=float).copy(),
                    eps=np.asarray(d.eps, dtype=float).copy(),
                    lam=np.asarray(d.lam, dtype=float).copy(),
                    gam=np.asarray(d.gam, dtype=float).copy(),
                    rho=np.asarray(d.rho, dtype=float).copy())


def init_sys_state(idx: GridIndex, p0=None, v0=None) -> SysState:
    """Flat start: p(0) = min(d, pmax), v(0) = v*, phat(0) = p(0), duals 0.

    Initial (p, v) must sit inside the operating box; the flow then keeps
    them there for all time.
    """
    p = np.minimum(idx.d, idx.pmax).astype(float) if p0 is None \
        else np.asarray(p0, dtype=float).copy()
    v = idx.vstar.copy() if v0 is None else units.v2_to_solver(np.asarray(v0, dtype=float))
    if np.any(p < 0) or np.any(p > idx.pmax):
        raise ValueError("initial generation outside [0, pmax]")
    if np.any(v < idx.vmin2) or np.any(v > idx.vmax2):
        raise ValueError("initial squared voltage outside its box")
    zn = np.zeros(idx.n)
    zp = np.zeros(idx.npairs)
    return SysState(p=p, v=v, P=zp.copy(), l=np.zeros(idx.m), ph=p.copy(),
                    mu=zn.copy(), eps=zn.copy(), lam=zp.copy(), gam=zp.copy(),
                    rho=zp.copy())


def flow_field(idx: GridIndex, st: SysState, p_opp=None, v_opp=None):
    """Shared kernel: raw descent/ascent field F and projected rhs.

    Returns (F, dots) in solver units.  The flow is dots = H(x) - x with
    H the projection of x - F(x) onto the operating set (p and v boxed,
    every other coordinate free); the multiplier rho carries its own
    one-sided projection inside F, frozen on the index set where rho
    sits at zero against a strictly slack cone constraint.

    p_opp / v_opp are the per-directed-pair neighbor values P_ki and v_k;
    they default to the true neighbor state (exact message exchange).
    """
    p, v, P, l, ph = st.p, st.v, st.P, st.l, st.ph
    mu, eps, lam, gam, rho = st.mu, st.eps, st.lam, st.gam, st.rho
    if np.any(v <= 0):
        raise ValueError("nonpositive squared voltage in rhs")
    if p_opp is None:
        p_opp = P[idx.rev]
    if v_opp is None:
        v_opp = v[idx.dst]

    z = p - idx.d - idx.node_sum(P)
    y = v + idx.k * p - idx.vstar - idx.k * ph
    grad_cost = idx.a * p + idx.b

    F_p = grad_cost - mu + idx.k * eps + z + idx.k * y
    pdot = clamp(p - F_p, 0.0, idx.pmax) - p
    cone_pull = idx.node_sum(rho * P * P) / (v * v)
    F_v = y + idx.node_sum(gam) + eps - cone_pull
    vdot = clamp(v - F_v, idx.vmin2, idx.vmax2) - v
    F_P = (mu[idx.src] + lam - gam * idx.r + 2.0 * rho * P / v[idx.src]
           - z[idx.src])
    fwd = idx.fwd_of_line
    F_l = -(lam[fwd] * idx.line_r + rho[fwd] + rho[idx.rev[fwd]])
    F_ph = -idx.k * (eps + y)
    F_mu = z
    F_eps = -y
    F_lam = -(P + p_opp - idx.r * l[idx.line_of])
    F_gam = -(v[idx.src] - v_opp - idx.r * (P - p_opp))
    gap = P * P / v[idx.src] - l[idx.line_of]
    F_rho = -positive_projection(gap, rho)
    F = SysState(F_p, F_v, F_P, F_l, F_ph, F_mu, F_eps, F_lam, F_gam, F_rho)
    dots = SysState(pdot, vdot, -F_P, -F_l, -F_ph, -F_mu, -F_eps,
                    -F_lam, -F_gam, -F_rho)
    return F, dots


def rhs_arrays(idx: GridIndex, st: SysState, p_opp=None, v_opp=None) -> SysState:
    """Right-hand side of the projected flow, solver units."""
    return flow_field(idx, st, p_opp, v_opp)[1]


def cone_slack_set(idx: GridIndex, st: SysState, rho_tol: float = 1e-12,
                   gap_tol: float = 1e-12):
    """Directed pairs whose cone multiplier is pinned at zero against a
    strictly slack constraint (the frozen set of the rho projection).
    Thresholds make the floating-point zero crossings explicit."""
    gap = st.P * st.P / st.v[idx.src] - st.l[idx.line_of] if idx.npairs \
        else np.zeros(0)
    members = (st.rho < rho_tol) & (gap < -gap_tol)
    return frozenset(int(j) for j in np.flatnonzero(members))


def project_state(idx: GridIndex, st: SysState) -> SysState:
    """Re-impose the hard boxes: p, v into their ranges, rho nonnegative."""
    st.p = np.clip(st.p, 0.0, idx.pmax)
    st.v = np.clip(st.v, idx.vmin2, idx.vmax2)
    st.rho = np.maximum(st.rho, 0.0)
    return st


def _axpy(st: SysState, h: float, dots: SysState) -> SysState:
    return SysState(*[a + h * b for a, b in zip(st.arrays(), dots.arrays())])


def step_arrays(idx: GridIndex, st: SysState, h: float, method: str = "euler",
                p_opp=None, v_opp=None, check: bool = True) -> SysState:
    """One integrator step with post-step projection.

    Forward Euler is the reference discretization of the projected flow;
    the classical four-stage scheme re-applies the projections at every
    stage and buys a much larger stable step on the weakly damped line
    oscillations, at four rhs evaluations per step.
    """
    if h <= 0:
        raise ValueError("step size must be positive")
    if method == "euler":
        out = project_state(idx, _axpy(st, h, rhs_arrays(idx, st, p_opp, v_opp)))
    elif method == "rk4":
        k1 = rhs_arrays(idx, st, p_opp, v_opp)
        s2 = project_state(idx, _axpy(st, 0.5 * h, k1))
        k2 = rhs_arrays(idx, s2, p_opp, v_opp)
        s3 = project_state(idx, _axpy(st, 0.5 * h, k2))
        k3 = rhs_arrays(idx, s3, p_opp, v_opp)
        s4 = project_state(idx, _axpy(st, h, k3))
        k4 = rhs_arrays(idx, s4, p_opp, v_opp)
        incr = SysState(*[(a + 2.0 * b + 2.0 * c + e) / 6.0 for a, b, c, e in
                          zip(k1.arrays(), k2.arrays(), k3.arrays(), k4.arrays())])
        out = project_state(idx, _axpy(st, h, incr))
    else:
        raise ValueError(f"unknown integrator {method!r}")
    if check and not out.isfinite():
        raise DivergenceError("nonfinite state after step")
    return out


def check_dual_symmetry(idx: GridIndex, st: SysState, tol: float = 1e-9) -> None:
    """Assert the emergent lambda symmetry / gamma antisymmetry."""
    if idx.npairs == 0:
        return
    lam_gap = float(np.max(np.abs(st.lam - st.lam[idx.rev])))
    gam_gap = float(np.max(np.abs(st.gam + st.gam[idx.rev])))
    if lam_gap > tol or gam_gap > tol:
        raise AssertionError(
            f"dual symmetry broken: |lam - lam_rev|={lam_gap:.2e}, "
            f"|gam + gam_rev|={gam_gap:.2e}")


# ---------------------------------------------------------------------------
# messaging, estimation, commands


def exchange_messages(idx: GridIndex, st: SysState) -> dict:
    """One synchronous message round: every agent receives each neighbor's
    current rho for the shared line.  Returns {node_id: {neighbor_id: rho_ki}}.
    """
    inboxes = {nid: {} for nid in idx.node_ids}
    for j in range(idx.npairs):
        s, t = idx.src[j], idx.dst[j]
        # pair j is (s -> t); its reverse carries rho_ts, delivered to s
        inboxes[idx.node_ids[s]][idx.node_ids[t]] = float(st.rho[idx.rev[j]])
    return inboxes


def agent_view(idx: GridIndex, st: SysState, node: int, inboxes=None,
               measurements=None) -> AgentView:
    """Assemble the local view of one agent (public units)."""
    i = idx.index_of[node]
    if inboxes is None:
        inboxes = exchange_messages(idx, st)
    view = AgentView(
        node=node,
        p_g=float(st.p[i]),
        v=float(units.v2_from_solver(st.v[i])),
        p_hat=float(st.ph[i]),
        mu=float(st.mu[i]),
        eps=float(st.eps[i]),
        P={}, l={}, lam={}, gam={}, rho={}, r={},
        inbox=dict(inboxes[node]),
    )
    for j in idx.pairs_of_node[i]:
        nbr = idx.node_ids[idx.dst[j]]
        view.P[nbr] = float(st.P[j])
        view.l[nbr] = float(units.a2_from_solver(st.l[idx.line_of[j]]))
        view.lam[nbr] = float(st.lam[j])
        view.gam[nbr] = float(st.gam[j])
        view.rho[nbr] = float(st.rho[j])
        view.r[nbr] = float(idx.r[j])
        if measurements is not None:
            view.meas_i[nbr] = float(measurements.current(node, nbr))
    for nbr in view.P:
        view.estimates[nbr] = estimate_neighbor(idx, view, nbr)
    return view


def estimate_neighbor(grid, local: AgentView, k: int):
    """Estimate the neighbor quantities (P_ki, v_k) from local data.

    Uses the metered line current when available, else the cyber fallback
    I = sign(P_ik) sqrt(l_ik).  The line identities pin both estimates:
    the loss equation gives P_ki = r I**2 - P_ik, and walking the voltage
    drop gives v_k = (sqrt(v_i) - r I)**2.  Both are exact whenever the
    local states agree with an actual current profile.
    """
    if local.v <= 0:
        raise ValueError("nonpositive squared voltage")
    if k not in local.P:
        raise KeyError(f"{k} is not a neighbor of {local.node}")
    r = local.r[k]
    if k in local.meas_i:
        current = local.meas_i[k]
    else:
        current = float(np.sign(local.P[k]) * np.sqrt(max(local.l[k], 0.0)))
    p_ki = r * current * current / units.W_PER_KW - local.P[k]
    v_k = (np.sqrt(local.v) - r * current) ** 2
    return float(p_ki), float(v_k)


def emit_commands(grid, x: PrimalState) -> CommandSet:
    """Mode-appropriate control command for every microgrid."""
    idx = grid if isinstance(grid, GridIndex) else GridIndex(grid)
    cmds = CommandSet()
    for i, nid in enumerate(idx.node_ids):
        mode = idx.mode[i]
        if mode is ControlMode.POWER:
            cmds.p_ref[nid] = float(x.p_g[i])
        elif mode is ControlMode.VOLTAGE:
            cmds.v_ref[nid] = float(np.sqrt(x.v[i]))
        else:
            cmds.p_hat_ref[nid] = float(x.p_hat[i])
    return cmds


# ---------------------------------------------------------------------------
# public single-step API


def rhs(grid, x: PrimalState, d: DualState, p_opp=None, v_opp=None):
    """Time derivative of the public states (engineering units)."""
    idx = grid if isinstance(grid, GridIndex) else GridIndex(grid)
    dots = rhs_arrays(idx, pack_states(idx, x, d), p_opp, v_opp)
    # a rate converts like the state itself
    return primal_public(idx, dots), dual_public(dots)


def rhs_inf_norm(grid, x: PrimalState, d: DualState) -> float:
    """Max-magnitude rhs component in solver units (the convergence norm)."""
    idx = grid if isinstance(grid, GridIndex) else GridIndex(grid)
    return rhs_arrays(idx, pack_states(idx, x, d)).inf_norm()


def step(grid, x: PrimalState, d: DualState, h: float, method: str = "euler"):
    """Advance (x, d) one step; the result satisfies the boxes exactly."""
    idx = grid if isinstance(grid, GridIndex) else GridIndex(grid)
    st = step_arrays(idx, pack_states(idx, x, d), h, method=method)
    return primal_public(idx, st), dual_public(st)


# ---------------------------------------------------------------------------
# per-agent computation (the unit the parallel engine distributes)


def _agent_rhs(idx: GridIndex, st: SysState, i: int, p_opp, v_opp):
    """Agent i's rhs slices, computed from local reads only.

    Returns (pdot, vdot, phdot, mudot, epsdot, per-pair {j: (Pdot, lamdot,
    gamdot, rhodot)}, per-line {li: ldot}); the lower-indexed endpoint
    owns the shared squared-current state.
    """
    p_i, v_i, ph_i = st.p[i], st.v[i], st.ph[i]
    mu_i, eps_i = st.mu[i], st.eps[i]
    k_i = idx.k[i]
    flow_sum = 0.0
    gam_sum = 0.0
    cone_sum = 0.0
    for j in idx.pairs_of_node[i]:
        flow_sum += st.P[j]
        gam_sum += st.gam[j]
        cone_sum += st.rho[j] * st.P[j] * st.P[j]
    z_i = p_i - idx.d[i] - flow_sum
    y_i = v_i + k_i * p_i - idx.vstar[i] - k_i * ph_i
    pdot = float(clamp(p_i - ((idx.a[i] * p_i + idx.b[i]) - mu_i + k_i * eps_i
                              + z_i + k_i * y_i), 0.0, idx.pmax[i]) - p_i)
    vdot = float(clamp(v_i - (y_i + gam_sum + eps_i - cone_sum / (v_i * v_i)),
                       idx.vmin2[i], idx.vmax2[i]) - v_i)
    phdot = k_i * (eps_i + y_i)
    mudot = -z_i
    epsdot = y_i
    pairs = {}
    lines = {}
    for j in idx.pairs_of_node[i]:
        li = idx.line_of[j]
        Pdot = -(mu_i + st.lam[j] - st.gam[j] * idx.r[j]
                 + 2.0 * st.rho[j] * st.P[j] / v_i - z_i)
        lamdot = st.P[j] + p_opp[j] - idx.r[j] * st.l[li]
        gamdot = v_i - v_opp[j] - idx.r[j] * (st.P[j] - p_opp[j])
        gap = st.P[j] * st.P[j] / v_i - st.l[li]
        rhodot = float(gap) if (st.rho[j] > 0 or gap > 0) else 0.0
        pairs[j] = (float(Pdot), float(lamdot), float(gamdot), float(rhodot))
        if idx.fwd_of_line[li] == j:
            lines[li] = float(st.lam[j] * idx.line_r[li] + st.rho[j]
                              + st.rho[idx.rev[j]])
    return pdot, vdot, phdot, mudot, epsdot, pairs, lines


def rhs_arrays_parallel(idx: GridIndex, st: SysState, p_opp=None, v_opp=None,
                        pool: ThreadPoolExecutor = None) -> SysState:
    """Same rhs, computed agent by agent from a shared state snapshot.

    Each agent's block has a single writer and reads only its own and its
    neighbors' published values, so the compute phase can run concurrently;
    results are committed in node order and match the vectorized kernel
    bitwise.
    """
    if p_opp is None:
        p_opp = st.P[idx.rev]
    if v_opp is None:
        v_opp = st.v[idx.dst]
    out = SysState(p=np.zeros(idx.n), v=np.zeros(idx.n), P=np.zeros(idx.npairs),
                   l=np.zeros(idx.m), ph=np.zeros(idx.n), mu=np.zeros(idx.n),
                   eps=np.zeros(idx.n), lam=np.zeros(idx.npairs),
                   gam=np.zeros(idx.npairs), rho=np.zeros(idx.npairs))
    work = (lambda i: _agent_rhs(idx, st, i, p_opp, v_opp))
    if pool is None:
        results = [work(i) for i in range(idx.n)]
    else:
        results = list(pool.map(work, range(idx.n)))
    for i, (pdot, vdot, phdot, mudot, epsdot, pairs, lines) in enumerate(results):
        out.p[i], out.v[i], out.ph[i] = pdot, vdot, phdot
        out.mu[i], out.eps[i] = mudot, epsdot
        for j, (Pdot, lamdot, gamdot, rhodot) in pairs.items():
            out.P[j], out.lam[j], out.gam[j], out.rho[j] = Pdot, lamdot, gamdot, rhodot
        for li, ldot in lines.items():
            out.l[li] = ldot
    return out


# ---------------------------------------------------------------------------
# convergence bookkeeping


@dataclass
class ConvergenceMonitor:
    """Equilibrium detector: the rhs norm must stay at or below tol for
    `hold` consecutive steps before the state counts as converged (guards
    against slow transits through flat regions)."""

    tol: float = 1e-6
    hold: int = 100
    streak: int = 0
    converged: bool = False

    def update(self, rhs_norm: float) -> bool:
        self.streak = self.streak + 1 if rhs_norm <= self.tol else 0
        self.converged = self.streak >= self.hold
        return self.converged


@dataclass
class SolveResult:
    x: PrimalState
    d: DualState
    t: float
    steps: int
    converged: bool
    rhs_inf: float


def solve_distributed(grid, h: float = 1.0, method: str = "rk4",
                      tol: float = 1e-10, hold: int = 100,
                      max_time: float = 2e5, st0: SysState = None,
                      check_every: int = 10) -> SolveResult:
    """Run the controller on the pure cyber layer until equilibrium.

    This is the deep-convergence driver used for steady-state studies;
    scenario co-simulation (events, plant in the loop, traces) lives in
    scenario.py.
    """
    idx = grid if isinstance(grid, GridIndex) else GridIndex(grid)
    st = init_sys_state(idx) if st0 is None else st0.copy()
    guard = 1e9 * (1.0 + st.inf_norm())
    monitor = ConvergenceMonitor(tol=tol, hold=max(1, hold // check_every))
    nsteps = int(round(max_time / h))
    t, nrm = 0.0, np.inf
    for i in range(nsteps):
        st = step_arrays(idx, st, h, method=method)
        t += h
        if st.inf_norm() > guard:
            raise DivergenceError(f"state norm exceeded {guard:.1e} at t={t:.3f}")
        if (i + 1) % check_every == 0:
            nrm = rhs_arrays(idx, st).inf_norm()
            if monitor.update(nrm):
                return SolveResult(primal_public(idx, st), dual_public(st),
                                   t, i + 1, True, nrm)
    nrm = rhs_arrays(idx, st).inf_norm()
    return SolveResult(primal_public(idx, st), dual_public(st), t, nsteps,
                       False, nrm)
