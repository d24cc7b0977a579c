"""Inner-loop PI controllers and their open-loop tuning.

Two loops close around the plant: the secondary pump drive regulates the
secondary mass flow to its setpoint, and the heater power regulates the HX
primary inlet temperature to its setpoint.  Gains come from a recorded
open-loop step response fit as first-order-plus-dead-time and plugged into
the SIMC rules; any gains meeting the overshoot/settling contract may be
supplied through the scenario config instead.
"""

from dataclasses import dataclass, replace

import numpy as np

from saltgov import plant as plant_mod
from saltgov.plant import ActuatorCommand, U_S_MAX


class TuningError(RuntimeError):
    """Raised when an open-loop step response is unusable for tuning."""


@dataclass(frozen=True)
class PiController:
    """Discrete PI regulator with conditional-integration anti-windup.

    Command law: u = bias + kp * e + ki * integrator, e = setpoint - y.
    The integrator accumulates e*dt and is held frozen on any step whose
    unclamped command would violate output_limits.
    """

    kp: float
    ki: float
    setpoint: float
    output_limits: tuple
    bias: float = 0.0
    integrator: float = 0.0


def with_setpoint(ctrl, setpoint):
    return replace(ctrl, setpoint=float(setpoint))


def pi_step(ctrl, measurement, dt):
    """One controller update; returns (new controller, clamped command)."""
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    lo, hi = ctrl.output_limits
    e = ctrl.setpoint - measurement
    i_new = ctrl.integrator + e * dt
    u = ctrl.bias + ctrl.kp * e + ctrl.ki * i_new
    if lo <= u <= hi:
        return replace(ctrl, integrator=i_new), u
    # anti-windup: keep the integrator, clamp the command recomputed with it
    u = ctrl.bias + ctrl.kp * e + ctrl.ki * ctrl.integrator
    return ctrl, min(max(u, lo), hi)


@dataclass(frozen=True)
class PiGains:
    kp: float
    ki: float


def _fit_fopdt(t, y, u_step, t_step):
    """Two-point first-order-plus-dead-time fit of a recorded step response."""
    y0 = y[0]
    y_inf = y[-1]
    dy = y_inf - y0
    span = abs(dy)
    if span <= 0.0:
        raise TuningError("step response has zero steady-state change")
    # monotonicity check (small numerical slack allowed)
    diffs = np.diff(y) * np.sign(dy)
    if diffs.min() < -1e-6 * span:
        raise TuningError("step response is non-monotonic beyond tolerance")
    gain = dy / u_step

    def crossing(frac):
        target = y0 + frac * dy
        idx = np.argmax(np.sign(dy) * (y - target) >= 0.0)
        if idx == 0:
            return t[0]
        t0, t1 = t[idx - 1], t[idx]
        f0, f1 = y[idx - 1], y[idx]
        if f1 == f0:
            return t1
        return t0 + (t1 - t0) * (target - f0) / (f1 - f0)

    t28 = crossing(0.283)
    t63 = crossing(0.632)
    tau = 1.5 * (t63 - t28)
    dead = max(t63 - tau - t_step, 0.0)
    return gain, max(tau, 1e-6), dead


def _simc_pi(gain, tau, dead, dt):
    dead = max(dead, dt)
    tau_c = max(2.0 * dead, tau / 4.0, 1.0)
    kp = tau / (abs(gain) * (tau_c + dead))
    ti = min(tau, 4.0 * (tau_c + dead))
    kp *= np.sign(gain)
    return PiGains(kp=float(kp), ki=float(kp / ti))


def _record_step(params, kern, hold, u_s, q_dot, total_s, dt, signal):
    state = plant_mod.nominal_state(params)
    cmd_hold = plant_mod.nominal_command(params)
    n_hold = int(round(hold / dt))
    for _ in range(n_hold):
        state = plant_mod.step_plant(state, cmd_hold, dt, params=params, kern=kern)
    cmd = ActuatorCommand(u_s=u_s, q_dot=q_dot)
    n = int(round(total_s / dt))
    t = np.empty(n + 1)
    y = np.empty(n + 1)
    t[0] = 0.0
    y[0] = getattr(state, signal)
    for k in range(n):
        state = plant_mod.step_plant(state, cmd, dt, params=params, kern=kern)
        t[k + 1] = (k + 1) * dt
        y[k + 1] = getattr(state, signal)
    return t, y


def tune_open_loop(params, dt=0.2, kern=None):
    """Derive PI gains for both loops from open-loop step responses.

    Returns {"m_dot_s": PiGains, "t_p_in": PiGains}.  Deterministic: the
    same parameters always produce the same gains.
    """
    from saltgov import kernels

    if kern is None:
        kern = kernels.get_kernels()
    cmd0 = plant_mod.nominal_command(params)

    # secondary flow vs pump drive: fast single lag
    du = 0.02 * cmd0.u_s
    t, y = _record_step(params, kern, 20.0, cmd0.u_s + du, cmd0.q_dot,
                        120.0, dt, "m_dot_s")
    g, tau, dead = _fit_fopdt(t, y, du, 0.0)
    flow = _simc_pi(g, tau, dead, dt)

    # HX inlet temperature vs heater power: slow loop-recirculation response
    dq = 0.02 * cmd0.q_dot
    t, y = _record_step(params, kern, 20.0, cmd0.u_s, cmd0.q_dot + dq,
                        3000.0, dt, "t_p_in")
    g, tau, dead = _fit_fopdt(t, y, dq, 0.0)
    temp = _simc_pi(g, tau, dead, dt)

    for gains in (flow, temp):
        if gains.kp == 0.0 or gains.ki == 0.0:
            raise TuningError("tuning produced a zero gain")
    return {"m_dot_s": flow, "t_p_in": temp}


def make_controllers(params, gains):
    """Controllers biased to hold the design point with zero integrators."""
    cmd0 = plant_mod.nominal_command(params)
    flow = PiController(
        kp=gains["m_dot_s"].kp,
        ki=gains["m_dot_s"].ki,
        setpoint=plant_mod.DESIGN_POINT["m_dot_s"],
        output_limits=(0.0, U_S_MAX),
        bias=cmd0.u_s,
    )
    temp = PiController(
        kp=gains["t_p_in"].kp,
        ki=gains["t_p_in"].ki,
        setpoint=plant_mod.DESIGN_POINT["T_p_in"],
        output_limits=(0.0, 40.0),
        bias=cmd0.q_dot,
    )
    return flow, temp
