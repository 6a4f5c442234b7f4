"""Command-line interface.

Verbs:
  validate <config>                      check a grid configuration
  simulate <config> <scenario> [...]     run a scenario, write trace + figures
  solve <config> [...]                   centralized reference solve
  kkt <config> <trace> [...]             re-audit a trace row against the KKT system
  compare <trace> <reference> [...]      error table of a converged run vs a reference

Exit codes: 0 success, 2 validation failure, 3 non-convergence/divergence.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import network, report, scenario as scen
from .dynamics import DivergenceError, DualState
from .formulation import PrimalState
from .network import ConfigError, GridIndex
from .oracle import ConvergenceError, centralized_reference_solve, kkt_residual
from .plant import PowerFlowError

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NO_CONVERGENCE = 3


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ConvergenceError, DivergenceError, PowerFlowError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NO_CONVERGENCE


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dcflow",
                                description="stand-alone DC microgrid "
                                            "optimal-dispatch simulator")
    sub = p.add_subparsers(dest="verb", required=True)

    v = sub.add_parser("validate", help="validate a grid configuration")
    v.add_argument("config")
    v.set_defaults(func=cmd_validate)

    s = sub.add_parser("simulate", help="run a scenario against a configuration")
    s.add_argument("config")
    s.add_argument("scenario")
    s.add_argument("--out", default="out", help="output directory")
    s.add_argument("--step", type=float, default=None, help="integrator step (s)")
    s.add_argument("--horizon", type=float, default=None, help="override horizon (s)")
    s.add_argument("--method", choices=("euler", "rk4"), default=None)
    s.add_argument("--neighbor-info", choices=("exact", "plant"), default=None)
    s.add_argument("--engine", choices=("serial", "parallel"), default=None)
    s.add_argument("--no-figures", action="store_true")
    s.add_argument("--no-lyapunov", action="store_true")
    s.add_argument("--label", default="run")
    s.set_defaults(func=cmd_simulate)

    so = sub.add_parser("solve", help="centralized reference solve")
    so.add_argument("config")
    so.add_argument("--tol", type=float, default=1e-9)
    so.add_argument("--out", default=None, help="write reference.json here")
    so.set_defaults(func=cmd_solve)

    k = sub.add_parser("kkt", help="re-audit a trace row against the KKT system")
    k.add_argument("config")
    k.add_argument("trace")
    k.add_argument("--manifest", default=None,
                   help="run manifest (defaults to <trace dir>/<label>_manifest.json)")
    k.add_argument("--time", type=float, default=None,
                   help="audit the row at this time (default: last row)")
    k.add_argument("--out", default=None, help="write kkt_report.json here")
    k.set_defaults(func=cmd_kkt)

    c = sub.add_parser("compare", help="compare a converged trace to a reference")
    c.add_argument("trace")
    c.add_argument("reference")
    c.add_argument("--manifest", default=None)
    c.add_argument("--out", default=None, help="write comparison.csv and figure here")
    c.set_defaults(func=cmd_compare)
    return p


def cmd_validate(args) -> int:
    model = network.load_config(args.config)
    idx = GridIndex(model)
    total_cap = float(np.sum(idx.pmax))
    total_load = float(np.sum(idx.d))
    print(f"{args.config}: OK")
    print(f"  microgrids: {idx.n}  lines: {idx.m}")
    print(f"  total capacity {total_cap:.1f} kW, total load {total_load:.1f} kW")
    modes = ", ".join(f"{nid}:{m.value}" for nid, m in zip(idx.node_ids, idx.mode))
    print(f"  modes: {modes}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    model = network.load_config(args.config)
    events, horizon, sim_raw = scen.load_scenario(args.scenario)
    sim = scen.SimConfig.from_dict(sim_raw)
    if args.step is not None:
        sim.h = args.step
    if args.method is not None:
        sim.method = args.method
    if args.neighbor_info is not None:
        sim.neighbor_info = args.neighbor_info
    if args.engine is not None:
        sim.engine = args.engine
    if args.no_lyapunov:
        sim.lyapunov = False
    if args.horizon is not None:
        horizon = args.horizon

    result = scen.run_scenario(model, events, horizon, sim=sim,
                               out_dir=args.out, label=args.label)
    print(f"trace: {Path(args.out) / (args.label + '_trace.csv')}")
    for i, seg in enumerate(result.segments):
        state = "converged" if seg.converged else "not converged"
        print(f"  segment {i} [{seg.start_t:g}, {seg.end_t:g}] s: {state} "
              f"(final |rhs|inf = {seg.final_rhs_inf:.3e})")
    if not args.no_figures:
        caps = {mg.id: mg.gen_max for mg in result.model_final.microgrids}
        vlims = (result.model_final.microgrids[0].v_min,
                 result.model_final.microgrids[0].v_max)
        paths = report.render_trace_figures(result.trace, args.out,
                                            prefix=args.label, caps=caps,
                                            v_limits=vlims)
        for pth in paths:
            print(f"figure: {pth}")
    return EXIT_OK if result.converged else EXIT_NO_CONVERGENCE


def cmd_solve(args) -> int:
    model = network.load_config(args.config)
    idx = GridIndex(model)
    ref = centralized_reference_solve(idx, tol=args.tol)
    print(f"reference solve: |rhs|inf = {ref.rhs_inf:.3e} "
          f"after {ref.iterations} iterations")
    print(f"{'node':>5s} {'p_g (kW)':>12s} {'V (V)':>10s} {'phat (kW)':>12s}")
    for j, nid in enumerate(idx.node_ids):
        print(f"{nid:>5d} {ref.x.p_g[j]:>12.4f} {np.sqrt(ref.x.v[j]):>10.3f} "
              f"{ref.x.p_hat[j]:>12.4f}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        payload = {
            "nodes": idx.node_ids,
            "p_g_kw": [float(v) for v in ref.x.p_g],
            "p_hat_kw": [float(v) for v in ref.x.p_hat],
            "v_v2": [float(v) for v in ref.x.v],
            "P_kw": [float(v) for v in ref.x.P],
            "l_a2": [float(v) for v in ref.x.l],
            "rhs_inf": ref.rhs_inf,
            "duals": {
                "mu": [float(v) for v in ref.d.mu],
                "eps": [float(v) for v in ref.d.eps],
                "lam": [float(v) for v in ref.d.lam],
                "gam": [float(v) for v in ref.d.gam],
                "rho": [float(v) for v in ref.d.rho],
            },
        }
        path = out / "reference.json"
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        print(f"wrote {path}")
    return EXIT_OK


def _model_at_time(model, manifest_path, t):
    """Replay manifest events up to time t to rebuild the active model."""
    if manifest_path is None:
        return model
    manifest = json.loads(Path(manifest_path).read_text())
    for entry in manifest.get("events", []):
        if t is not None and entry["time_s"] > t:
            break
        ev = scen.ScenarioEvent(time=float(entry["time_s"]),
                                kind=str(entry["kind"]),
                                node=int(entry["node"]),
                                value=entry.get("value_kw"))
        model = ev.apply(model)
    return model


def _state_from_trace(idx: GridIndex, trace: scen.TraceTable, row: int):
    get = lambda name: float(trace.data[row, trace.columns.index(name)])
    n, npairs, m = idx.n, idx.npairs, idx.m
    p = np.array([get(f"p_g_kw_{nid}") for nid in idx.node_ids])
    v = np.array([get(f"v_v2_{nid}") for nid in idx.node_ids])
    ph = np.array([get(f"p_hat_kw_{nid}") for nid in idx.node_ids])
    mu = np.array([get(f"mu_{nid}") for nid in idx.node_ids])
    eps = np.array([get(f"eps_{nid}") for nid in idx.node_ids])
    P = np.zeros(npairs); lam = np.zeros(npairs)
    gam = np.zeros(npairs); rho = np.zeros(npairs)
    for j in range(npairs):
        a = idx.node_ids[idx.src[j]]
        b = idx.node_ids[idx.dst[j]]
        P[j] = get(f"P_kw_{a}_{b}")
        lam[j] = get(f"lam_{a}_{b}")
        gam[j] = get(f"gam_{a}_{b}")
        rho[j] = get(f"rho_{a}_{b}")
    l = np.zeros(m)
    for li, (i, k) in enumerate(idx.line_nodes):
        l[li] = get(f"l_a2_{idx.node_ids[i]}_{idx.node_ids[k]}")
    x = PrimalState(p_g=p, v=v, P=P, l=l, p_hat=ph)
    d = DualState(mu=mu, eps=eps, lam=lam, gam=gam, rho=rho)
    return x, d


def cmd_kkt(args) -> int:
    model = network.load_config(args.config)
    trace = scen.read_trace(args.trace)
    manifest = args.manifest
    if manifest is None:
        cand = Path(args.trace).with_name(
            Path(args.trace).name.replace("_trace.csv", "_manifest.json"))
        manifest = cand if cand.exists() else None
    t_col = trace.col("t_s")
    if args.time is None:
        row = len(t_col) - 1
    else:
        row = int(np.argmin(np.abs(t_col - args.time)))
    t_row = float(t_col[row])
    model = _model_at_time(model, manifest, t_row)
    idx = GridIndex(model)
    x, d = _state_from_trace(idx, trace, row)
    rep = kkt_residual(idx, x, d)
    print(f"KKT audit at t = {t_row:g} s (row {row})")
    for name, val in rep.conditions.items():
        print(f"  {name:>18s}: {val:.3e}")
    print(f"  {'cone violation':>18s}: {rep.cone_violation:.3e}")
    print(f"  {'rho negativity':>18s}: {rep.rho_negativity:.3e}")
    print(f"  max residual: {rep.max_residual:.3e}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        payload = {"t_s": t_row, "row": row, "conditions": rep.conditions,
                   "max_residual": rep.max_residual,
                   "complementarity_worst": rep.complementarity_worst,
                   "cone_violation": rep.cone_violation,
                   "rho_negativity": rep.rho_negativity}
        path = out / "kkt_report.json"
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        print(f"wrote {path}")
    return EXIT_OK


def cmd_compare(args) -> int:
    trace = scen.read_trace(args.trace)
    ref = json.loads(Path(args.reference).read_text())
    manifest_path = args.manifest
    if manifest_path is None:
        cand = Path(args.trace).with_name(
            Path(args.trace).name.replace("_trace.csv", "_manifest.json"))
        manifest_path = cand if cand.exists() else None
    converged = True
    if manifest_path is not None:
        manifest = json.loads(Path(manifest_path).read_text())
        converged = bool(manifest.get("converged", False))
    table = scen.compare_with_reference(trace, ref["nodes"], ref["p_g_kw"],
                                        ref["p_hat_kw"], converged)
    print(table.to_text())
    print(f"max |e(p_g)| = {table.max_abs_pg_err():.4f} %, "
          f"max |e(phat)| = {table.max_abs_phat_err():.4f} %")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        table.write_csv(out / "comparison.csv")
        fig = report.render_comparison_figure(table, out)
        print(f"wrote {out / 'comparison.csv'} and {fig}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
