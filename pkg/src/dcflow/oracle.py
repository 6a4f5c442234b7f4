"""Independent verification: first-order optimality residuals, exhaustive
and full-information reference solves, cone-exactness certification, and
the trajectory energy monitor.

Everything here either re-derives results by an independent route
(voltage-grid enumeration with exact physics) or evaluates closed-form
optimality conditions through the same kernel the controller integrates,
so monitor and algorithm cannot drift apart.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import units
from .dynamics import (SysState, DualState, cone_slack_set, flow_field,
                       init_sys_state, pack_states, primal_public, dual_public,
                       rhs_arrays, step_arrays, DivergenceError)
from .formulation import PrimalState, droop_reference, exactness_gap
from .network import GridIndex

KKT_CONDITIONS = ("stationarity_p", "stationarity_v", "stationarity_P",
                  "stationarity_l", "stationarity_phat", "balance", "droop",
                  "loss", "ohm", "complementarity")


class ConvergenceError(RuntimeError):
    """A reference solve missed its tolerance within the iteration budget."""


class InfeasibleError(RuntimeError):
    """The instance admits no feasible operating point."""


def _index(grid) -> GridIndex:
    return grid if isinstance(grid, GridIndex) else GridIndex(grid)


# ---------------------------------------------------------------------------
# first-order optimality


@dataclass
class KktReport:
    """Residual norms of the first-order conditions, solver units.

    The saturated stationarity rows use the fixed-point form
    |x - [x - F(x)]_box|, which is zero exactly where the multiplier-free
    sign conditions hold, so controller saturation never spoils the test.
    complementarity_worst is the worst rho * (P**2/v - l) product;
    cone_violation and rho_negativity track primal cone feasibility and
    multiplier sign.
    """

    conditions: dict
    max_residual: float
    complementarity_worst: float
    cone_violation: float
    rho_negativity: float


def kkt_residual(grid, x: PrimalState, d: DualState) -> KktReport:
    idx = _index(grid)
    st = pack_states(idx, x, d)
    if np.any(st.v <= 0):
        raise ValueError("nonpositive squared voltage")
    _, dots = flow_field(idx, st)

    def mx(a):
        return float(np.max(np.abs(a), initial=0.0))

    gap = st.P * st.P / st.v[idx.src] - st.l[idx.line_of] if idx.npairs \
        else np.zeros(0)
    comp = mx(st.rho * gap)
    conditions = {
        "stationarity_p": mx(dots.p),
        "stationarity_v": mx(dots.v),
        "stationarity_P": mx(dots.P),
        "stationarity_l": mx(dots.l),
        "stationarity_phat": mx(dots.ph),
        "balance": mx(dots.mu),
        "droop": mx(dots.eps),
        "loss": mx(dots.lam),
        "ohm": mx(dots.gam),
        "complementarity": comp,
    }
    cone_violation = float(np.max(gap, initial=0.0))
    rho_negativity = float(np.max(-st.rho, initial=0.0))
    max_residual = max(max(conditions.values()), cone_violation, rho_negativity)
    return KktReport(conditions=conditions, max_residual=max_residual,
                     complementarity_worst=comp, cone_violation=cone_violation,
                     rho_negativity=rho_negativity)


# ---------------------------------------------------------------------------
# exhaustive reference (voltage-grid enumeration with exact physics)


@dataclass
class BruteForceResult:
    x: PrimalState
    cost: float
    certified_cost_gap: float   # f(x) - f* is at most this
    certified_p_bound: float    # per-node |p - p*| is at most this (kW)
    grid_step: float            # finest voltage resolution used (V)


def brute_force_solve(grid, fine_step: float = 0.005,
                      coarse_step: float = 0.25) -> BruteForceResult:
    """Solve tiny instances (n <= 3) by enumerating bus voltages.

    Injections follow exactly from the voltage profile, so every grid
    point is physically exact; feasibility filters the operating boxes
    and the objective picks the incumbent.  The certificate is anchored
    to the coarsest complete sweep: with L the per-coordinate Lipschitz
    bounds of cost over the voltage box and delta the coarse half-steps,
    the optimum's nearest coarse neighbor (feasibility relaxed by the
    matching power margin) bounds f* from below, and strong convexity
    turns the cost gap into a per-node generation bound.  Refinement
    stages only improve the incumbent.
    """
    idx = _index(grid)
    if idx.n > 3:
        raise ValueError("exhaustive solve is limited to n <= 3")
    vlo = np.sqrt(idx.vmin2 * units.V2_PER_UNIT)
    vhi = np.sqrt(idx.vmax2 * units.V2_PER_UNIT)

    if idx.n == 1:
        d = float(idx.d[0])
        if d > float(idx.pmax[0]):
            raise InfeasibleError("load exceeds generation capacity")
        V = np.array([float(np.sqrt(idx.vstar[0] * units.V2_PER_UNIT))])
        x = _physical_state(idx, V)
        return BruteForceResult(x, _grid_cost_scalar(idx, x.p_g), 0.0, 0.0, 0.0)

    # per-coordinate bounds over the box:  |d p_i / d V_j| and |d f / d V_j|
    g_max = idx.a * idx.pmax + idx.b
    dp_dv = np.zeros((idx.n, idx.n))
    for j in range(idx.npairs):
        s, t = int(idx.src[j]), int(idx.dst[j])
        dp_dv[s, s] += (2 * vhi[s] + vhi[t]) / idx.r[j] / units.W_PER_KW
        dp_dv[t, s] += vhi[t] / idx.r[j] / units.W_PER_KW
    lip_cost = np.array([float(np.sum(g_max * dp_dv[:, j])) for j in range(idx.n)])

    if idx.n == 2:
        coarse_step = fine_step  # full fine sweep is affordable: exact anchor

    delta = 0.5 * coarse_step
    p_margin = float(np.max(np.sum(dp_dv, axis=1), initial=0.0)) * delta
    eps_cost = float(np.sum(lip_cost)) * delta

    best, best_relaxed = _sweep(idx, vlo, vhi, coarse_step, p_margin)
    if best is None:
        raise InfeasibleError("no feasible voltage profile on the search grid")

    # coarse-to-fine refinement around the incumbent (value only)
    step_now = coarse_step
    center = best[1]
    while step_now > fine_step:
        step_next = max(fine_step, step_now / 10.0)
        lo = np.maximum(vlo, center - 2.0 * step_now)
        hi = np.minimum(vhi, center + 2.0 * step_now)
        cand, _ = _sweep(idx, lo, hi, step_next, 0.0)
        if cand is not None and cand[0] < best[0]:
            best = cand
            center = cand[1]
        step_now = step_next

    x = _physical_state(idx, best[1])
    cost_gap = max(0.0, best[0] - (best_relaxed - eps_cost))
    alpha = float(np.min(idx.a))
    p_bound = float(np.sqrt(2.0 * cost_gap / alpha))
    return BruteForceResult(x, best[0], cost_gap, p_bound, fine_step)


def _grid_cost_scalar(idx, p):
    return float(np.sum(0.5 * idx.a * p ** 2 + idx.b * p))


def _physical_state(idx: GridIndex, V: np.ndarray) -> PrimalState:
    I = (V[idx.src] - V[idx.dst]) / idx.r if idx.npairs else np.zeros(0)
    P = V[idx.src] * I / units.W_PER_KW if idx.npairs else np.zeros(0)
    l = np.array([I[idx.fwd_of_line[li]] ** 2 for li in range(idx.m)])
    p = idx.d + idx.node_sum(P)
    x = PrimalState(p_g=p, v=V ** 2, P=P, l=l, p_hat=np.zeros(idx.n))
    x.p_hat = droop_reference(idx, x)
    return x


def _sweep(idx: GridIndex, vlo, vhi, step, p_margin):
    """Enumerate the voltage grid; return ((cost, V), relaxed_min_cost).

    Blocks the first axis so peak memory stays bounded regardless of
    resolution.
    """
    axes = [np.arange(vlo[i], vhi[i] + 0.5 * step, step) for i in range(idx.n)]
    best_cost, best_v = np.inf, None
    relaxed_min = np.inf
    rest = np.meshgrid(*axes[1:], indexing="ij") if idx.n > 1 else []
    rest = [g.ravel() for g in rest]
    rest_size = rest[0].size if rest else 1
    block = max(1, int(2_000_000 // rest_size))
    ax0 = axes[0]
    for lo in range(0, ax0.size, block):
        chunk = ax0[lo:lo + block]
        nb = chunk.size
        cols = [np.repeat(chunk, rest_size)]
        for g in rest:
            cols.append(np.tile(g, nb))
        V = np.stack(cols, axis=0)
        I = (V[idx.src] - V[idx.dst]) / idx.r[:, None]
        P = V[idx.src] * I / units.W_PER_KW
        p = idx.d[:, None] + _colsum(idx, P)
        cost = np.sum(0.5 * idx.a[:, None] * p ** 2 + idx.b[:, None] * p, axis=0)
        feas = np.all((p >= 0.0) & (p <= idx.pmax[:, None]), axis=0)
        relax = np.all((p >= -p_margin) & (p <= idx.pmax[:, None] + p_margin), axis=0)
        if np.any(relax):
            relaxed_min = min(relaxed_min, float(np.min(cost[relax])))
        if np.any(feas):
            cands = np.where(feas, cost, np.inf)
            j = int(np.argmin(cands))
            if cands[j] < best_cost:
                best_cost = float(cands[j])
                best_v = V[:, j].copy()
    if best_v is None:
        return None, relaxed_min
    return (best_cost, best_v), relaxed_min


def _colsum(idx: GridIndex, per_pair):
    out = np.zeros((idx.n, per_pair.shape[1]))
    for j in range(idx.npairs):
        out[idx.src[j]] += per_pair[j]
    return out


# ---------------------------------------------------------------------------
# full-information reference solve


@dataclass
class ReferenceSolution:
    x: PrimalState
    d: DualState
    rhs_inf: float
    iterations: int
    t: float


_REFERENCE_CACHE = {}


def _model_key(idx: GridIndex) -> tuple:
    mgs = tuple((mg.id, mg.cost_a, mg.cost_b, mg.load, mg.gen_max, mg.v_min,
                 mg.v_max, mg.droop_k, mg.v_star) for mg in idx.model.microgrids)
    lines = tuple((ln.i, ln.k, ln.resistance) for ln in idx.model.active_lines())
    return mgs, lines


def centralized_reference_solve(grid, tol: float = 1e-9,
                                max_iterations: int = 400_000,
                                h0: float = 0.25, h_max: float = 1.0,
                                st0: SysState = None,
                                cache: bool = True) -> ReferenceSolution:
    """High-accuracy saddle-point reference with global state.

    Integrates the same field as the distributed controller, with exact
    neighbor values and an adaptive step: ramp gently toward h_max while
    steps succeed, halve (without advancing) on divergence.  Plays the
    role of an external convex solver for accuracy comparisons and
    supplies the equilibrium the energy monitor measures against.

    Solves from the default flat start are cached per model content;
    custom starts bypass the cache.
    """
    idx = _index(grid)
    key = None
    if st0 is None and cache:
        key = (_model_key(idx), tol)
        hit = _REFERENCE_CACHE.get(key)
        if hit is not None:
            return hit
    st = init_sys_state(idx) if st0 is None else st0.copy()
    guard = 1e9 * (1.0 + st.inf_norm())
    h = h0
    best = np.inf
    hold = 0
    t = 0.0
    it = 0
    while it < max_iterations:
        it += 1
        try:
            cand = step_arrays(idx, st, h, method="rk4")
        except (DivergenceError, ValueError):
            h = max(h * 0.5, 1e-4)
            continue
        if cand.inf_norm() > guard:
            h = max(h * 0.5, 1e-4)
            continue
        st = cand
        t += h
        h = min(h * 1.02, h_max)
        nrm = rhs_arrays(idx, st).inf_norm()
        best = min(best, nrm)
        hold = hold + 1 if nrm <= tol else 0
        if hold >= 5:
            out = ReferenceSolution(primal_public(idx, st), dual_public(st),
                                    nrm, it, t)
            if key is not None:
                _REFERENCE_CACHE[key] = out
            return out
    raise ConvergenceError(
        f"reference solve missed tol={tol:g} within {max_iterations} iterations "
        f"(best residual {best:.3e})")


# ---------------------------------------------------------------------------
# trajectory energy monitor


@dataclass
class LyapunovSample:
    t: float
    U: float
    sigma_rho: frozenset      # directed-pair indices with frozen rho
    switched: bool


def _edge_vector(idx: GridIndex, st: SysState) -> np.ndarray:
    """State vector in the flow's intrinsic coordinates.

    The controller keeps per-direction copies of the loss and drop
    multipliers for locality; with zero initialization they mirror each
    other exactly (symmetric / antisymmetric), so the flow lives in a
    space with one loss and one drop multiplier per line.  The energy
    function must be evaluated there, or the mirrored copies would be
    double-counted.
    """
    fwd = idx.fwd_of_line
    return np.concatenate([st.p, st.v, st.P, st.l, st.ph, st.mu, st.eps,
                           st.lam[fwd], st.gam[fwd], st.rho])


def _energy(idx: GridIndex, st: SysState, star_vec: np.ndarray) -> float:
    F, dots = flow_field(idx, st)
    hx = _edge_vector(idx, dots)           # H(x) - x
    fv = _edge_vector(idx, F)
    dx = _edge_vector(idx, st) - star_vec
    return float(-fv @ hx - 0.5 * hx @ hx + 0.5 * dx @ dx)


def lyapunov_value(grid, x: PrimalState, d: DualState,
                   x_star: PrimalState, d_star: DualState,
                   t: float = 0.0, prev_sigma: frozenset = None) -> LyapunovSample:
    """Regularized-gap energy of the projected flow at (x, d).

        U = -F(x)' (H(x) - x) - 1/2 |H(x) - x|^2 + 1/2 |x - x*|^2

    with H the projection of x - F(x) onto the operating set and x* a
    fixed reference equilibrium.  U is nonnegative, vanishes only at
    equilibrium, and is nonincreasing along trajectories within one
    frozen cone-multiplier set; enlarging that set may only drop U.
    """
    idx = _index(grid)
    st = pack_states(idx, x, d)
    star_vec = _edge_vector(idx, pack_states(idx, x_star, d_star))
    U = _energy(idx, st, star_vec)
    sigma = cone_slack_set(idx, st)
    switched = prev_sigma is not None and sigma != prev_sigma
    return LyapunovSample(t=t, U=U, sigma_rho=sigma, switched=switched)


class LyapunovMonitor:
    """Streaming monitor: evaluates U against a fixed equilibrium and
    flags cone-set switches between consecutive samples."""

    def __init__(self, grid, x_star: PrimalState, d_star: DualState):
        self.idx = _index(grid)
        self.star_vec = _edge_vector(self.idx,
                                     pack_states(self.idx, x_star, d_star))
        self.prev_sigma = None
        self.samples = []

    def sample(self, st: SysState, t: float) -> LyapunovSample:
        U = _energy(self.idx, st, self.star_vec)
        sigma = cone_slack_set(self.idx, st)
        switched = self.prev_sigma is not None and sigma != self.prev_sigma
        self.prev_sigma = sigma
        out = LyapunovSample(t=t, U=U, sigma_rho=sigma, switched=switched)
        self.samples.append(out)
        return out


# ---------------------------------------------------------------------------
# cone exactness certification


@dataclass
class ExactnessReport:
    """Sufficient-condition checks plus the realized per-line verdicts."""

    equal_voltage_ceiling: bool
    loads_positive: bool
    net_generation_positive: bool
    cost_increasing: bool
    preconditions_met: bool
    line_gaps_a2: np.ndarray      # worst |l - P**2/v| per line, A**2
    verdicts: list                # "exact" | "slack" per line

    def all_exact(self) -> bool:
        return all(v == "exact" for v in self.verdicts)


def exactness_certificate(grid, x: PrimalState, tol_a2: float = 1e-6) -> ExactnessReport:
    idx = _index(grid)
    mgs = idx.model.microgrids
    equal_vmax = len({mg.v_max for mg in mgs}) == 1
    loads_pos = all(mg.load > 0 for mg in mgs)
    net_gen = float(np.sum(x.p_g - idx.d)) > 0.0
    cost_inc = all(mg.cost_a > 0 and mg.cost_b > 0 for mg in mgs)
    gaps = exactness_gap(idx, x)
    line_gaps = np.zeros(idx.m)
    for j in range(idx.npairs):
        li = idx.line_of[j]
        line_gaps[li] = max(line_gaps[li], abs(float(gaps[j])))
    verdicts = ["exact" if g <= tol_a2 else "slack" for g in line_gaps]
    return ExactnessReport(
        equal_voltage_ceiling=equal_vmax,
        loads_positive=loads_pos,
        net_generation_positive=net_gen,
        cost_increasing=cost_inc,
        preconditions_met=equal_vmax and loads_pos and net_gen and cost_inc,
        line_gaps_a2=line_gaps,
        verdicts=verdicts,
    )
