"""Unit conventions, in one place.

Configuration files and all reported quantities use engineering units:
powers in kW, voltages in V, squared voltages in V**2, squared currents
in A**2, resistances in ohm, droop coefficients in V**2/kW.

The solver works in a coherent unit system chosen so that every flow
equation holds without conversion factors:

    power            kW
    squared voltage  kV2u   (1 kV2u = 1000 V**2)
    squared current  kA2u   (1 kA2u = 1000 A**2)
    resistance       ohm
    droop slope      kV2u/kW  (= V**2/W)

Coherence check: ohm's law in squares  v_i - v_k = r (P_ik - P_ki)
gives ohm * kW = 1000 V**2 = 1 kV2u; the loss equation P_ik + P_ki =
r * l_ik gives ohm * kA2u = 1000 W = 1 kW; and the cone term P**2 / v
gives kW**2 / kV2u = 1000 A**2 = 1 kA2u.  In this system the branch
power-flow model and the primal-dual controller equations are evaluated
exactly as written, and the kW-denominated cost coefficients (a in
1/kW**2, b in 1/kW) enter unchanged.

Only the quantities below convert at the configuration/report boundary;
nothing else in the code base carries unit factors.
"""

import numpy as np

# squared volts per solver squared-voltage unit
V2_PER_UNIT = 1000.0
# squared amps per solver squared-current unit
A2_PER_UNIT = 1000.0
# watts per kW (plant-side conversions between V*A and kW)
W_PER_KW = 1000.0


def v2_to_solver(v_squared_volts: float) -> float:
    """V**2 -> solver squared-voltage units."""
    return v_squared_volts / V2_PER_UNIT


def v2_from_solver(v_units) :
    """Solver squared-voltage units -> V**2."""
    return v_units * V2_PER_UNIT


def volts_to_solver_v2(volts: float) -> float:
    """Voltage magnitude in V -> squared voltage in solver units."""
    return volts * volts / V2_PER_UNIT


def a2_to_solver(amps_squared) :
    """A**2 -> solver squared-current units."""
    return amps_squared / A2_PER_UNIT


def a2_from_solver(l_units):
    """Solver squared-current units -> A**2."""
    return l_units * A2_PER_UNIT


def droop_to_solver(k_v2_per_kw: float) -> float:
    """Droop slope in V**2/kW -> solver units (kV2u/kW)."""
    return k_v2_per_kw / V2_PER_UNIT


# Flow-equation boundary (engineering units).  r I**2 is in W, r P is in
# V**2 only when P is in W, and P**2/v is in A**2 only when P is in W;
# these three helpers carry the whole kW <-> W consistency factor.

def line_loss_kw(r_ohm, l_a2):
    """Line loss r * l with l in A**2, returned in kW."""
    return r_ohm * l_a2 / W_PER_KW


def ohm_drop_v2(r_ohm, p_diff_kw):
    """Squared-voltage drop r * (P_ik - P_ki) with power in kW, in V**2."""
    return r_ohm * p_diff_kw * W_PER_KW


def soc_current_a2(p_kw, v_v2):
    """Cone current P**2 / v with P converted to W, returned in A**2."""
    p_w = np.asarray(p_kw, dtype=float) * W_PER_KW
    return p_w * p_w / np.asarray(v_v2, dtype=float)
