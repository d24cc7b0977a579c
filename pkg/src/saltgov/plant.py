"""Lumped-parameter surrogate of a molten-salt test loop.

A single flibe primary loop, heated in one channel and driven by a fixed
pump head, rejects heat through a counter-current heat exchanger (HX) to a
flinak secondary stream supplied at a fixed source temperature.  The model
is the smallest ODE network that exposes every quantity of interest:

Nodes (well-mixed, per-node heat capacity, first-order advection lag)::

    heater -> [T_p_3 hot leg] -> [T_p_in HX inlet] -> HX
           -> [T_p_out HX outlet] -> [T_p_1 cold leg] -> heater

* Heater power enters the ``T_p_3`` node balance.
* HX duty is quasi-steady effectiveness-NTU on the inlet temperatures
  (fixed UA, counter-current), removed from ``T_p_out`` and added to the
  single secondary node ``T_s_out``.
* Primary flow obeys a fixed pump head against quadratic loop friction
  (an inertance ODE), so it rides at its design value.
* Secondary flow is a first-order pump response to the drive signal.
* Tap pressures are static: ``p_p_1`` at the pump discharge and
  ``p_p_out`` one quadratic friction segment downstream.

Design-point calibration is closed form: the two specific heats come from
the loop-side energy balances of the design table, and the HX conductance
from inverting the effectiveness relation at the design duty.  Fluid
properties are treated as temperature independent and there is no
neutronics; the plant is a deterministic ground truth for the control
stack, not a best-estimate thermal-hydraulics code.

All transition functions are pure: they return new values and never mutate
their arguments.
"""

from dataclasses import dataclass, replace
import math

import numpy as np

from saltgov import kernels
from saltgov.kernels import (
    Y_MDOTP, Y_MDOTS, Y_TP1, Y_TP3, Y_TPIN, Y_TPOUT, Y_TSOUT,
)

# Design-point operating values (the calibration targets).
DESIGN_POINT = {
    "Q_dot": 18.0,        # MW
    "m_dot_p": 589.0,     # kg/s
    "T_p_in": 585.0,      # degC
    "T_p_out": 572.0,     # degC
    "T_p_1": 572.0,       # degC
    "T_p_3": 585.0,       # degC
    "P_p_out": 179.0,     # kPa
    "P_p_1": 200.0,       # kPa
    "m_dot_s": 380.0,     # kg/s
    "T_s_in": 492.0,      # degC
    "T_s_out": 517.0,     # degC
}

TEMP_RANGE = (400.0, 800.0)  # degC, hard validity band for any scenario

# Node ordering used for thermal_masses / transport_delays.
NODE_NAMES = ("t_p_1", "t_p_3", "t_p_in", "t_p_out", "t_s_out")

# Advection lag per node at design flow, seconds.  Chosen so closed-loop
# maneuvers settle in tens to hundreds of seconds.
_DEFAULT_LAGS = (15.0, 15.0, 8.0, 8.0, 12.0)

_DEFAULT_PUMP_HEAD = 150.0   # kPa, fixed boundary condition
_DEFAULT_PUMP_GAIN = 500.0   # kg/s of secondary flow per unit drive
_DEFAULT_PUMP_TAU = 4.0      # s, secondary pump response
_DEFAULT_FLOW_TAU = 2.0      # s, primary flow inertance time constant
U_S_MAX = 1.2


class CalibrationError(RuntimeError):
    """Raised when calibrated parameters fail to hold the design point."""


class PlantRangeError(RuntimeError):
    """Raised when a node temperature leaves the physical validity band."""


@dataclass(frozen=True)
class LoopParams:
    """Physical constants of the surrogate loop."""

    cp_primary: float          # J/(kg K)
    cp_secondary: float        # J/(kg K)
    thermal_masses: tuple      # J/K per node, NODE_NAMES order
    hx_ua: float               # W/K
    transport_delays: tuple    # s per node, NODE_NAMES order
    pump_head: float           # kPa, fixed primary pump head
    friction_coeff: float      # kPa s^2/kg^2 between the two pressure taps
    t_s_in: float              # degC, fixed secondary source temperature
    loop_friction: float       # kPa s^2/kg^2 total loop friction
    suction_pressure: float    # kPa at the primary pump suction
    pump_gain_s: float         # kg/s secondary flow per unit drive
    pump_tau_s: float          # s secondary pump lag
    flow_inertance: float      # Pa s^2/kg primary flow inertance

    def __post_init__(self):
        positives = {
            "cp_primary": self.cp_primary,
            "cp_secondary": self.cp_secondary,
            "hx_ua": self.hx_ua,
            "pump_head": self.pump_head,
            "friction_coeff": self.friction_coeff,
            "loop_friction": self.loop_friction,
            "pump_gain_s": self.pump_gain_s,
            "pump_tau_s": self.pump_tau_s,
            "flow_inertance": self.flow_inertance,
        }
        for name, value in positives.items():
            if not value > 0.0:
                raise ValueError(f"{name} must be strictly positive, got {value}")
        if len(self.thermal_masses) != len(NODE_NAMES):
            raise ValueError("thermal_masses must have one entry per node")
        if any(m <= 0.0 for m in self.thermal_masses):
            raise ValueError("thermal masses must be strictly positive")
        if any(d <= 0.0 for d in self.transport_delays):
            raise ValueError("transport delays must be strictly positive")


@dataclass(frozen=True)
class PlantState:
    """Instantaneous physical state of the loop."""

    t_p_in: float
    t_p_out: float
    t_p_1: float
    t_p_3: float
    t_s_out: float
    p_p_out: float
    p_p_1: float
    m_dot_p: float
    m_dot_s: float
    q_dot: float               # MW, heater power currently applied
    pi_integrators: dict       # controller name -> integral state


@dataclass(frozen=True)
class ActuatorCommand:
    """One step of actuator demands."""

    u_s: float                 # secondary pump drive, dimensionless
    q_dot: float               # heater power, MW

    def __post_init__(self):
        if self.q_dot < 0.0:
            raise ValueError("heater power must be non-negative")
        if not 0.0 <= self.u_s <= U_S_MAX:
            raise ValueError(f"pump drive outside [0, {U_S_MAX}]")


def calibrate_steady_state():
    """Closed-form calibration of LoopParams to the design point.

    Specific heats are fixed by the loop-side energy balances, the HX
    conductance by inverting the counter-current effectiveness relation at
    the design duty, and the friction/head split by the tabulated tap
    pressures.  The result is verified by simulation: holding the nominal
    actuator commands must keep the design point stationary.
    """
    dp = DESIGN_POINT
    q_w = dp["Q_dot"] * 1e6
    dt_p = dp["T_p_in"] - dp["T_p_out"]
    dt_s = dp["T_s_out"] - dp["T_s_in"]
    cp_p = q_w / (dp["m_dot_p"] * dt_p)
    cp_s = q_w / (dp["m_dot_s"] * dt_s)

    c_pf = dp["m_dot_p"] * cp_p
    c_sf = dp["m_dot_s"] * cp_s
    c_min, c_max = min(c_pf, c_sf), max(c_pf, c_sf)
    cr = c_min / c_max
    eff = q_w / (c_min * (dp["T_p_in"] - dp["T_s_in"]))
    if not 0.0 < eff < 1.0:
        raise CalibrationError(f"design duty implies effectiveness {eff}")
    if abs(1.0 - cr) < 1e-12:
        ntu = eff / (1.0 - eff)
    else:
        z = (1.0 - eff) / (1.0 - eff * cr)
        ntu = -math.log(z) / (1.0 - cr)
    ua = ntu * c_min

    masses = tuple(
        lag * (c_sf if name == "t_s_out" else c_pf)
        for name, lag in zip(NODE_NAMES, _DEFAULT_LAGS)
    )

    friction = (dp["P_p_1"] - dp["P_p_out"]) / dp["m_dot_p"] ** 2
    loop_friction = _DEFAULT_PUMP_HEAD / dp["m_dot_p"] ** 2
    suction = dp["P_p_1"] - _DEFAULT_PUMP_HEAD
    # inertance sized for a ~2 s linearized flow time constant
    inertance = _DEFAULT_FLOW_TAU * 2.0 * loop_friction * dp["m_dot_p"] * 1000.0

    params = LoopParams(
        cp_primary=cp_p,
        cp_secondary=cp_s,
        thermal_masses=masses,
        hx_ua=ua,
        transport_delays=_DEFAULT_LAGS,
        pump_head=_DEFAULT_PUMP_HEAD,
        friction_coeff=friction,
        t_s_in=dp["T_s_in"],
        loop_friction=loop_friction,
        suction_pressure=suction,
        pump_gain_s=_DEFAULT_PUMP_GAIN,
        pump_tau_s=_DEFAULT_PUMP_TAU,
        flow_inertance=inertance,
    )

    # verification: the design point must be a fixed point of the dynamics
    state = nominal_state(params)
    cmd = nominal_command(params)
    probe = state
    for _ in range(50):
        probe = step_plant(probe, cmd, 0.2, params=params)
    drift = max(
        abs(probe.t_p_in - state.t_p_in),
        abs(probe.t_p_out - state.t_p_out),
        abs(probe.t_p_1 - state.t_p_1),
        abs(probe.t_p_3 - state.t_p_3),
        abs(probe.t_s_out - state.t_s_out),
    )
    if drift > 1e-6:
        raise CalibrationError(f"design point drifts by {drift} degC over 10 s")
    return params


def with_overrides(params, overrides):
    """Return params with selected fields replaced (scenario config hook)."""
    if not overrides:
        return params
    fields = set(LoopParams.__dataclass_fields__)
    unknown = set(overrides) - fields
    if unknown:
        raise ValueError(f"unknown plant parameter(s): {sorted(unknown)}")
    clean = {
        k: tuple(v) if isinstance(v, list) else v for k, v in overrides.items()
    }
    return replace(params, **clean)


def tap_pressures(params, m_dot_p):
    """Static pressures (p_p_out, p_p_1) at the two taps for a given flow."""
    p1 = params.suction_pressure + params.pump_head
    p_out = p1 - params.friction_coeff * m_dot_p ** 2
    return p_out, p1


def nominal_state(params):
    dp = DESIGN_POINT
    p_out, p1 = tap_pressures(params, dp["m_dot_p"])
    return PlantState(
        t_p_in=dp["T_p_in"],
        t_p_out=dp["T_p_out"],
        t_p_1=dp["T_p_1"],
        t_p_3=dp["T_p_3"],
        t_s_out=dp["T_s_out"],
        p_p_out=p_out,
        p_p_1=p1,
        m_dot_p=dp["m_dot_p"],
        m_dot_s=dp["m_dot_s"],
        q_dot=dp["Q_dot"],
        pi_integrators={},
    )


def nominal_command(params):
    return ActuatorCommand(
        u_s=DESIGN_POINT["m_dot_s"] / params.pump_gain_s,
        q_dot=DESIGN_POINT["Q_dot"],
    )


def pack_params(params):
    """Marshal LoopParams into the kernel parameter vector."""
    m = params.thermal_masses
    return np.array([
        params.cp_primary, params.cp_secondary,
        m[0], m[1], m[2], m[3], m[4],
        params.hx_ua, params.t_s_in,
        params.pump_head, params.loop_friction, params.suction_pressure,
        params.friction_coeff, params.pump_gain_s, params.pump_tau_s,
        params.flow_inertance, TEMP_RANGE[0], TEMP_RANGE[1],
    ])


def pack_state(state):
    y = np.empty(kernels.N_STATE)
    y[Y_TP1] = state.t_p_1
    y[Y_TP3] = state.t_p_3
    y[Y_TPIN] = state.t_p_in
    y[Y_TPOUT] = state.t_p_out
    y[Y_TSOUT] = state.t_s_out
    y[Y_MDOTP] = state.m_dot_p
    y[Y_MDOTS] = state.m_dot_s
    return y


def unpack_state(y, params, q_dot, pi_integrators):
    p_out, p1 = tap_pressures(params, y[Y_MDOTP])
    return PlantState(
        t_p_in=float(y[Y_TPIN]),
        t_p_out=float(y[Y_TPOUT]),
        t_p_1=float(y[Y_TP1]),
        t_p_3=float(y[Y_TP3]),
        t_s_out=float(y[Y_TSOUT]),
        p_p_out=float(p_out),
        p_p_1=float(p1),
        m_dot_p=float(y[Y_MDOTP]),
        m_dot_s=float(y[Y_MDOTS]),
        q_dot=float(q_dot),
        pi_integrators=dict(pi_integrators),
    )


def step_plant(state, cmd, dt, *, params, nsub=10, kern=None):
    """Advance the plant one sample of length dt under a fixed command.

    Deterministic: identical inputs give bit-identical outputs.  Raises
    PlantRangeError if any node temperature leaves the validity band.
    """
    if kern is None:
        kern = kernels.get_kernels()
    y = pack_state(state)
    y_new, ok = kern.loop_step(y, cmd.u_s, cmd.q_dot * 1e6, pack_params(params), dt, nsub)
    if not ok:
        raise PlantRangeError(
            f"node temperature outside {TEMP_RANGE} degC "
            f"(u_s={cmd.u_s}, q_dot={cmd.q_dot} MW)"
        )
    return unpack_state(y_new, params, cmd.q_dot, state.pi_integrators)


# Output vector ordering: [T_p_out, T_s_out, P_p_out, P_p_1].
OUTPUT_NAMES = ("T_p_out", "T_s_out", "P_p_out", "P_p_1")


def measure_outputs(state):
    """Measured output vector in the fixed order of OUTPUT_NAMES."""
    return np.array([state.t_p_out, state.t_s_out, state.p_p_out, state.p_p_1])


def reference_values(params):
    """Design-point value for every loggable signal (deviation origins)."""
    dp = DESIGN_POINT
    return {
        "m_dot_s_ref": dp["m_dot_s"],
        "T_p_in_ref": dp["T_p_in"],
        "m_dot_s": dp["m_dot_s"],
        "T_p_in": dp["T_p_in"],
        "T_p_out": dp["T_p_out"],
        "T_s_out": dp["T_s_out"],
        "T_p_1": dp["T_p_1"],
        "T_p_3": dp["T_p_3"],
        "P_p_out": dp["P_p_out"],
        "P_p_1": dp["P_p_1"],
        "Q_dot": dp["Q_dot"],
        "u_s": dp["m_dot_s"] / params.pump_gain_s,
        "I_pi_mdot_s": 0.0,
        "I_pi_q": 0.0,
    }
