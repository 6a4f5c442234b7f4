"""Figure rendering for simulation traces and comparison tables.

Trace CSV files are the primary interface; these helpers turn one run
into a small set of PNG figures written next to the delimited output.
Rendering is file-only (Agg backend), never interactive.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .scenario import ComparisonTable, TraceTable

_GRID_KW = dict(alpha=0.3)


def _node_ids(trace: TraceTable) -> list:
    ids = []
    for c in trace.columns:
        if c.startswith("p_g_kw_"):
            ids.append(int(c.split("_")[-1]))
    return ids


def render_trace_figures(trace: TraceTable, out_dir, prefix: str = "run",
                         caps: dict = None, v_limits=(380.0, 420.0)) -> list:
    """Write the standard run figures; returns the created paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t = trace.col("t_s")
    ids = _node_ids(trace)
    paths = []

    fig, ax = plt.subplots(figsize=(7, 3.6))
    for nid in ids:
        ax.plot(t, trace.col(f"p_g_kw_{nid}"), label=f"MG{nid}", lw=1.2)
    if caps:
        for nid, cap in caps.items():
            ax.axhline(cap, color="k", ls="--", lw=0.6, alpha=0.5)
    ax.set_xlabel("time (s)")
    ax.set_ylabel("generation (kW)")
    ax.set_title("Generation commands")
    ax.legend(fontsize=8, ncol=3)
    ax.grid(True, **_GRID_KW)
    p = out / f"{prefix}_generation.png"
    fig.savefig(p, dpi=150, bbox_inches="tight")
    plt.close(fig)
    paths.append(p)

    fig, ax = plt.subplots(figsize=(7, 3.6))
    for nid in ids:
        V = trace.col(f"V_plant_v_{nid}")
        if np.all(np.isnan(V)):
            V = np.sqrt(trace.col(f"v_v2_{nid}"))
        ax.plot(t, V, label=f"MG{nid}", lw=1.2)
    for lim in v_limits:
        ax.axhline(lim, color="r", ls="--", lw=0.8)
    ax.set_xlabel("time (s)")
    ax.set_ylabel("bus voltage (V)")
    ax.set_title("Plant voltages")
    ax.legend(fontsize=8, ncol=3)
    ax.grid(True, **_GRID_KW)
    p = out / f"{prefix}_voltage.png"
    fig.savefig(p, dpi=150, bbox_inches="tight")
    plt.close(fig)
    paths.append(p)

    fig, ax = plt.subplots(figsize=(7, 3.6))
    rhs = trace.col("rhs_inf")
    ax.semilogy(t, np.maximum(rhs, 1e-18), lw=1.0, label="|rhs|inf")
    kkt = trace.col("kkt_max")
    mask = ~np.isnan(kkt)
    if np.any(mask):
        ax.semilogy(t[mask], np.maximum(kkt[mask], 1e-18), ".", ms=4,
                    label="KKT residual (sampled)")
    ax.set_xlabel("time (s)")
    ax.set_ylabel("residual")
    ax.set_title("Convergence")
    ax.legend(fontsize=8)
    ax.grid(True, **_GRID_KW)
    p = out / f"{prefix}_convergence.png"
    fig.savefig(p, dpi=150, bbox_inches="tight")
    plt.close(fig)
    paths.append(p)

    lyap = trace.col("lyap_u")
    mask = ~np.isnan(lyap)
    if np.any(mask):
        fig, ax = plt.subplots(figsize=(7, 3.6))
        ax.semilogy(t[mask], np.maximum(lyap[mask], 1e-18), ".-", ms=3, lw=0.8)
        sw = trace.col("sigma_switched")
        swm = mask & (sw == 1.0)
        if np.any(swm):
            ax.semilogy(t[swm], np.maximum(lyap[swm], 1e-18), "rx", ms=6,
                        label="cone-set switch")
            ax.legend(fontsize=8)
        ax.set_xlabel("time (s)")
        ax.set_ylabel("U")
        ax.set_title("Trajectory energy (sampled)")
        ax.grid(True, **_GRID_KW)
        p = out / f"{prefix}_lyapunov.png"
        fig.savefig(p, dpi=150, bbox_inches="tight")
        plt.close(fig)
        paths.append(p)
    return paths


def render_comparison_figure(table: ComparisonTable, out_dir,
                             prefix: str = "compare") -> Path:
    """Bar chart of per-node relative errors against the reference."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    nodes = [r.node for r in table.rows]
    xpos = np.arange(len(nodes))
    fig, ax = plt.subplots(figsize=(7, 3.6))
    w = 0.38
    ax.bar(xpos - w / 2, [r.p_g_err_pct for r in table.rows], w, label="p_g")
    ax.bar(xpos + w / 2, [r.p_hat_err_pct for r in table.rows], w, label="p_hat")
    ax.set_xticks(xpos)
    ax.set_xticklabels([str(n) for n in nodes])
    ax.set_xlabel("microgrid")
    ax.set_ylabel("relative error (%)")
    ax.set_title("Distributed vs. reference solve")
    ax.axhline(0.0, color="k", lw=0.6)
    ax.legend(fontsize=8)
    ax.grid(True, axis="y", **_GRID_KW)
    p = out / f"{prefix}_errors.png"
    fig.savefig(p, dpi=150, bbox_inches="tight")
    plt.close(fig)
    return p
