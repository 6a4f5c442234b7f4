"""dcflow: distributed optimal power-flow control of stand-alone DC microgrids.

A library and CLI that couples a fully distributed primal-dual dispatch
controller with a quasi-static DC power-flow plant, plus independent
verification oracles (exhaustive solve, first-order optimality audit,
trajectory energy monitor).
"""

from .network import (ControlMode, GridModel, GridIndex, Line,
                      MicrogridParams, load_config, cost, cost_gradient,
                      apply_topology_change)
from .formulation import (PrimalState, SocpSolution, objective,
                          augmented_objective, aux_y, aux_z, residuals,
                          exactness_gap, map_socp_to_branch,
                          droop_reference_for)
from .dynamics import (DualState, AgentView, CommandSet, clamp,
                       positive_projection, rhs, step, estimate_neighbor,
                       exchange_messages, emit_commands, solve_distributed)
from .plant import PlantState, solve_power_flow, measurements_for
from .oracle import (KktReport, LyapunovSample, kkt_residual,
                     brute_force_solve, centralized_reference_solve,
                     lyapunov_value, exactness_certificate)
from .scenario import (ScenarioEvent, SimConfig, run_scenario,
                       compare_with_reference, read_trace)

__version__ = "0.1.0"
