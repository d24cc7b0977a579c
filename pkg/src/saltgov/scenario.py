"""Transient scenarios and the closed-loop runner.

A scenario couples the surrogate loop, its two PI loops, and a governor
into one deterministic simulation: at every sample the governor filters
the reference setpoints through the admissible set, the PI controllers
turn the filtered setpoints into actuator commands, and the plant advances
one step.  Reference trajectories are piecewise linear per setpoint;
constraint bounds may be scheduled in time, in which case the admissible
set's right-hand side is refreshed point-wise.

The canonical load-follow trajectory is shaped so that, run unsupervised,
it violates both output limits: a strong inlet-temperature ramp pushes the
HX outlet temperature over its maximum early in the run, and a later
high-flow / low-inlet-temperature dwell drags the secondary outlet
temperature under its minimum through the window where the scheduled
bounds move.  A second, alternating-ramp trajectory of milder moves serves
as held-out validation data for identification.

Runs are reproducible: a manifest captures the fully resolved
configuration (numeric gains, explicit segments, the identified model
inline, the kernel mode) and re-running from it reproduces every artifact
byte for byte.
"""

from dataclasses import dataclass
import math
import os

import numpy as np

from saltgov import control, dmdc, governor as governor_mod, kernels, moas
from saltgov import plant as plant_mod
from saltgov import runio
from saltgov.kernels import Y_MDOTP, Y_MDOTS, Y_TP1, Y_TP3, Y_TPIN, Y_TPOUT, Y_TSOUT

T_P_OUT_MAX_DEFAULT = 586.85   # degC
T_S_OUT_MIN_DEFAULT = 512.85   # degC

# Scheduled-bound shape for the time-dependent scenarios: hold, ramp at
# 2.5 degC per 1000 s between 2000 s and 2800 s, then hold the 2 degC shift.
SCHEDULE_RAMP_RATE = 2.5 / 1000.0
SCHEDULE_RAMP_START = 2000.0
SCHEDULE_RAMP_END = 2800.0

MV_NAMES = ("m_dot_s_ref", "T_p_in_ref")

DEFAULT_STATE_CANDIDATES = (
    "T_p_1", "T_p_3", "T_p_in", "T_p_out", "T_s_out", "m_dot_s",
    "I_pi_mdot_s", "I_pi_q",
)

CONSTRAINT_SCHEDULES = ("constant", "eq7-increasing", "eq7-decreasing")


class ConfigError(ValueError):
    """Configuration problem; `key` names the offending entry."""

    def __init__(self, key, message):
        super().__init__(f"config key '{key}': {message}")
        self.key = key


class ScenarioInvalidError(RuntimeError):
    """The unsupervised run failed to violate the limits it must violate."""


@dataclass(frozen=True)
class ReferenceTrajectory:
    """Piecewise-linear setpoint trajectories, one lane per MV."""

    segments: dict    # MV name -> tuple of (t0, t1, v0, v1)

    def __post_init__(self):
        for name, segs in self.segments.items():
            prev_end = 0.0
            for t0, t1, _v0, _v1 in segs:
                if abs(t0 - prev_end) > 1e-9:
                    raise ValueError(f"{name}: segments not contiguous at t={t0}")
                if not t1 > t0:
                    raise ValueError(f"{name}: empty segment at t={t0}")
                prev_end = t1

    def value_at(self, t, name):
        segs = self.segments[name]
        for t0, t1, v0, v1 in segs:
            if t < t1 or math.isinf(t1):
                if t <= t0:
                    return v0
                if math.isinf(t1):
                    return v0 if v0 == v1 else v1
                return v0 + (v1 - v0) * (t - t0) / (t1 - t0)
        return segs[-1][3]

    def values_at(self, t):
        return np.array([self.value_at(t, name) for name in MV_NAMES])


@dataclass(frozen=True)
class ConstraintSchedule:
    """Time-dependent bound for one constraint row."""

    label: str
    segments: tuple   # (t0, t1, v0, v1), final t1 may be inf

    def __post_init__(self):
        prev = None
        for t0, t1, v0, v1 in self.segments:
            if prev is not None and abs(prev - v0) > 1e-12:
                raise ValueError(f"{self.label}: discontinuity at t={t0}")
            prev = v1

    @property
    def constant(self):
        return all(v0 == v1 for _t0, _t1, v0, v1 in self.segments)


def bound_at(schedule, t):
    """Exact piecewise evaluation of a scheduled bound."""
    if t < 0.0:
        raise ValueError("t must be non-negative")
    for t0, t1, v0, v1 in schedule.segments:
        if t < t1 or math.isinf(t1):
            if t <= t0 or v0 == v1:
                return v0
            return v0 + (v1 - v0) * (t - t0) / (t1 - t0)
    return schedule.segments[-1][3]


def make_bound_schedule(kind, base=T_S_OUT_MIN_DEFAULT, label="T_s_out_min"):
    """Constant or ramped bound schedule for the secondary outlet minimum."""
    if kind == "constant":
        return ConstraintSchedule(label, ((0.0, math.inf, base, base),))
    if kind == "eq7-increasing":
        sign = 1.0
    elif kind == "eq7-decreasing":
        sign = -1.0
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    shift = sign * SCHEDULE_RAMP_RATE * (SCHEDULE_RAMP_END - SCHEDULE_RAMP_START)
    final = base + shift
    return ConstraintSchedule(label, (
        (0.0, SCHEDULE_RAMP_START, base, base),
        (SCHEDULE_RAMP_START, SCHEDULE_RAMP_END, base, final),
        (SCHEDULE_RAMP_END, math.inf, final, final),
    ))


def build_load_follow():
    """Canonical supervised-maneuver demonstration trajectory (3600 s).

    The inlet-temperature setpoint carries the constraint work: an early
    ramp to 606 degC pushes T_p_out over its cap, and a late descent to
    564 degC drags T_s_out under its floor through the scheduled-bound
    window.  Flow moves are mild, placed in temperature-quiet windows
    (plus one combined corner sweep) so the data stays close to the
    envelope where a linear model is faithful while still exciting both
    input channels and the region the supervised runs settle into.
    """
    inf = math.inf
    return ReferenceTrajectory(segments={
        "m_dot_s_ref": (
            (0.0, 1050.0, 380.0, 380.0),
            (1050.0, 1200.0, 380.0, 400.0),
            (1200.0, 1350.0, 400.0, 400.0),
            (1350.0, 1500.0, 400.0, 380.0),
            (1500.0, 1800.0, 380.0, 350.0),
            (1800.0, 2000.0, 350.0, 380.0),
            (2000.0, 3000.0, 380.0, 380.0),
            (3000.0, inf, 380.0, 380.0),
        ),
        "T_p_in_ref": (
            (0.0, 200.0, 585.0, 585.0),
            (200.0, 450.0, 585.0, 606.0),
            (450.0, 800.0, 606.0, 606.0),
            (800.0, 1050.0, 606.0, 585.0),
            (1050.0, 1450.0, 585.0, 585.0),
            (1450.0, 1850.0, 585.0, 566.0),
            (1850.0, 2000.0, 566.0, 564.0),
            (2000.0, 3000.0, 564.0, 564.0),
            (3000.0, 3300.0, 564.0, 585.0),
            (3300.0, inf, 585.0, 585.0),
        ),
    })


def build_alternating_ramps():
    """Milder alternating up/down ramps used as held-out validation data.

    Flow and temperature setpoints move in disjoint windows so the two
    channels are excited one at a time.
    """
    inf = math.inf
    return ReferenceTrajectory(segments={
        "m_dot_s_ref": (
            (0.0, 300.0, 380.0, 380.0),
            (300.0, 600.0, 380.0, 400.0),
            (600.0, 900.0, 400.0, 400.0),
            (900.0, 1200.0, 400.0, 368.0),
            (1200.0, 1500.0, 368.0, 368.0),
            (1500.0, 1800.0, 368.0, 380.0),
            (1800.0, inf, 380.0, 380.0),
        ),
        "T_p_in_ref": (
            (0.0, 1800.0, 585.0, 585.0),
            (1800.0, 2100.0, 585.0, 593.0),
            (2100.0, 2400.0, 593.0, 593.0),
            (2400.0, 2700.0, 593.0, 577.0),
            (2700.0, 3000.0, 577.0, 577.0),
            (3000.0, 3300.0, 577.0, 585.0),
            (3300.0, inf, 585.0, 585.0),
        ),
    })


def build_hold():
    inf = math.inf
    return ReferenceTrajectory(segments={
        "m_dot_s_ref": ((0.0, inf, 380.0, 380.0),),
        "T_p_in_ref": ((0.0, inf, 585.0, 585.0),),
    })


_PRESETS = {
    "load_follow": build_load_follow,
    "alternating": build_alternating_ramps,
    "hold": build_hold,
}


def default_config(mode="bypass", constraints="constant", trajectory="load_follow",
                   **overrides):
    cfg = {
        "duration_s": 3600.0,
        "dt_s": 0.2,
        "plant": {},
        "pi": "auto",
        "trajectory": trajectory,
        "constraints": {
            "t_p_out_max": T_P_OUT_MAX_DEFAULT,
            "t_s_out_min": T_S_OUT_MIN_DEFAULT,
            "schedule": constraints,
        },
        "governor": {
            "mode": mode,
            "horizon": 1500,
            "epsilon": 0.02,
            "q_weight": None,
        },
        "model": None if mode == "bypass" else {"identify": {"states": "auto", "rank": None}},
        "moas_slice_times": [],
        "accel": "auto",
    }
    cfg.update(overrides)
    return cfg


def _trajectory_from_config(spec):
    if isinstance(spec, str):
        if spec not in _PRESETS:
            raise ConfigError("trajectory", f"unknown preset {spec!r}")
        return _PRESETS[spec]()
    if isinstance(spec, dict):
        try:
            segments = {
                name: tuple(
                    (float(t0), float(t1) if t1 is not None else math.inf,
                     float(v0), float(v1))
                    for t0, t1, v0, v1 in spec[name]
                )
                for name in MV_NAMES
            }
        except KeyError as exc:
            raise ConfigError("trajectory", f"missing lane {exc.args[0]!r}") from exc
        return ReferenceTrajectory(segments=segments)
    raise ConfigError("trajectory", "must be a preset name or a segment table")


def _trajectory_to_config(traj):
    return {
        name: [[t0, None if math.isinf(t1) else t1, v0, v1]
               for t0, t1, v0, v1 in traj.segments[name]]
        for name in MV_NAMES
    }


@dataclass
class RunResult:
    """Everything a run produced, kept in memory for tests and export."""

    config: dict                  # fully resolved configuration
    params: plant_mod.LoopParams
    gains: dict
    trace: dict                   # TRACE_COLUMNS name -> (N+1,) array
    governor_log: dict            # per-step arrays (N rows)
    model: object                 # LtiModel or None
    selection: object             # SelectionResult or None
    aset: object                  # AdmissibleSet at build bounds, or None
    schedules: dict               # constraint label -> ConstraintSchedule
    slices: dict                  # time -> vertex array
    violations: dict              # constraint label -> {"max": .., "count": ..}
    fallback_steps: int

    def write_artifacts(self, out_dir):
        return write_artifacts(self, out_dir)


@dataclass(frozen=True)
class RunArtifacts:
    trace_csv: str
    governor_csv: str
    model_json: str               # may be None for bypass runs
    moas_slices: tuple
    manifest_json: str


def _validate_config(cfg):
    known = {"duration_s", "dt_s", "plant", "pi", "trajectory", "constraints",
             "governor", "model", "moas_slice_times", "accel"}
    unknown = set(cfg) - known
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown configuration key")
    duration = float(cfg.get("duration_s", 3600.0))
    dt = float(cfg.get("dt_s", 0.2))
    if duration <= 0:
        raise ConfigError("duration_s", "must be positive")
    if dt <= 0:
        raise ConfigError("dt_s", "must be positive")

    gov = dict(cfg.get("governor") or {})
    mode = gov.get("mode", "bypass")
    if mode not in governor_mod.MODES:
        raise ConfigError("governor.mode", f"must be one of {governor_mod.MODES}")
    horizon = int(gov.get("horizon", 1500))
    if horizon < 1:
        raise ConfigError("governor.horizon", "must be at least 1")
    epsilon = float(gov.get("epsilon", 0.02))
    if not 0.0 < epsilon <= 0.1:
        raise ConfigError("governor.epsilon", "must lie in (0, 0.1]")

    cons = dict(cfg.get("constraints") or {})
    schedule = cons.get("schedule", "constant")
    if schedule not in CONSTRAINT_SCHEDULES:
        raise ConfigError("constraints.schedule",
                          f"must be one of {CONSTRAINT_SCHEDULES}")

    model_spec = cfg.get("model")
    if mode != "bypass" and model_spec is None:
        raise ConfigError("model", "a governed run needs a model or an identify block")
    return duration, dt, gov, cons, model_spec


def _resolve_gains(cfg, params, kern):
    spec = cfg.get("pi", "auto")
    if spec == "auto":
        return control.tune_open_loop(params, dt=float(cfg.get("dt_s", 0.2)), kern=kern)
    if not isinstance(spec, dict):
        raise ConfigError("pi", "must be 'auto' or a gain table")
    gains = {}
    for loop in ("m_dot_s", "t_p_in"):
        if loop not in spec:
            raise ConfigError(f"pi.{loop}", "missing gain entry")
        entry = spec[loop]
        try:
            gains[loop] = control.PiGains(kp=float(entry["kp"]), ki=float(entry["ki"]))
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"pi.{loop}", "needs numeric kp and ki") from exc
    return gains


def _signal_reader(label, refs):
    """Reader for a loggable signal given the loop-state vector and PIs."""
    vec = {
        "T_p_1": Y_TP1, "T_p_3": Y_TP3, "T_p_in": Y_TPIN,
        "T_p_out": Y_TPOUT, "T_s_out": Y_TSOUT, "m_dot_s": Y_MDOTS,
        "m_dot_p": Y_MDOTP,
    }
    if label in vec:
        idx = vec[label]
        return lambda y, flow_pi, temp_pi: y[idx]
    if label == "I_pi_mdot_s":
        return lambda y, flow_pi, temp_pi: flow_pi.integrator
    if label == "I_pi_q":
        return lambda y, flow_pi, temp_pi: temp_pi.integrator
    raise ConfigError("model.identify.states", f"unknown state label {label!r}")


def derive_heater_integral(columns):
    """Reconstruct the heater PI integral from trace columns.

    The integral state accumulates (T_p_in_ref - T_p_in) * dt starting from
    zero (runs begin at the design point), and the logged value at each
    instant is the pre-update one, so it is an exact cumulative sum of the
    trace as long as the heater never saturated.
    """
    t = np.asarray(columns["t"], dtype=float)
    dt = float(t[1] - t[0])  # uniform sampling; matches the run loop exactly
    err = np.asarray(columns["T_p_in_ref"], dtype=float) \
        - np.asarray(columns["T_p_in"], dtype=float)
    out = np.empty_like(t)
    acc = 0.0
    out[0] = 0.0
    for k in range(len(t) - 1):
        acc = acc + err[k] * dt
        out[k + 1] = acc
    return out


def snapshot_log_from_trace(columns, state_names, params=None, extra_states=None):
    """Assemble a SnapshotLog from trace columns, binding rows by name."""
    if params is None:
        params = plant_mod.calibrate_steady_state()
    refs = plant_mod.reference_values(params)
    source = dict(columns)
    if extra_states:
        source.update(extra_states)
    if "I_pi_q" in state_names and "I_pi_q" not in source:
        source["I_pi_q"] = derive_heater_integral(source)
    runio.require_columns(source, ("t",) + tuple(MV_NAMES) + tuple(state_names)
                          + plant_mod.OUTPUT_NAMES)
    times = np.asarray(source["t"], dtype=float)
    n_cols = len(times)
    if n_cols < 3:
        raise ValueError("trace has too few rows to identify anything")
    states = np.vstack([source[name] for name in state_names])
    inputs = np.vstack([source[name][: n_cols - 1] for name in MV_NAMES])
    outputs = np.vstack([source[name] for name in plant_mod.OUTPUT_NAMES])
    return dmdc.SnapshotLog(
        times=times, states=states, inputs=inputs, outputs=outputs,
        state_names=tuple(state_names), input_names=tuple(MV_NAMES),
        output_names=tuple(plant_mod.OUTPUT_NAMES),
        ref_states=np.array([refs[name] for name in state_names]),
        ref_inputs=np.array([refs[name] for name in MV_NAMES]),
        ref_outputs=np.array([refs[name] for name in plant_mod.OUTPUT_NAMES]),
    )


def identify_from_trace(columns, states="auto", rank=None, params=None,
                        extra_states=None, kern=None):
    """Feature-select (optionally) and fit the model from trace columns.

    Returns (model, SelectionResult or None).  "auto" runs forward
    selection over the default candidates and always scores the compact
    three-state set for reference.
    """
    if states == "auto":
        log = snapshot_log_from_trace(columns, DEFAULT_STATE_CANDIDATES,
                                      params=params, extra_states=extra_states)
        selection = dmdc.select_states(
            log, DEFAULT_STATE_CANDIDATES,
            always_evaluate=(dmdc.COMPACT_STATE_SET,), rank_truncation=rank,
            kern=kern,
        )
        chosen = selection.selected
    else:
        chosen = tuple(states)
        selection = None
    log = snapshot_log_from_trace(columns, chosen, params=params,
                                  extra_states=extra_states)
    model = dmdc.identify_dmdc(log, rank_truncation=rank)
    return model, selection


def _resolve_model(cfg, model_spec, params, gains, kern):
    """Produce the governing model, identifying from a bypass run if asked."""
    if model_spec is None:
        return None, None
    if "inline" in model_spec:
        return dmdc.model_from_dict(model_spec["inline"]), None
    if "path" in model_spec:
        return dmdc.load_model(model_spec["path"]), None
    if "identify" not in model_spec:
        raise ConfigError("model", "expected 'inline', 'path', or 'identify'")
    ident = dict(model_spec["identify"])
    states = ident.get("states", "auto")
    rank = ident.get("rank")
    nested = dict(cfg)
    nested["governor"] = {"mode": "bypass", "horizon": 1, "epsilon": 0.01,
                          "q_weight": None}
    nested["model"] = None
    nested["moas_slice_times"] = []
    bypass = run_experiment(nested, _params=params, _gains=gains)
    extra = {"I_pi_q": bypass.governor_log["i_pi_q"]}
    model, selection = identify_from_trace(
        bypass.trace, states=states, rank=rank, params=params,
        extra_states=extra, kern=kern,
    )
    return model, selection


def run_experiment(cfg, out_dir=None, *, _params=None, _gains=None):
    """Execute one closed-loop transient; optionally write its artifacts."""
    duration, dt, gov_cfg, cons_cfg, model_spec = _validate_config(cfg)
    mode = gov_cfg.get("mode", "bypass")
    accel = kernels.resolve_mode(cfg.get("accel", "auto"))
    kern = kernels.get_kernels(accel)

    params = _params
    if params is None:
        params = plant_mod.with_overrides(
            plant_mod.calibrate_steady_state(), cfg.get("plant") or {}
        )
    gains = _gains if _gains is not None else _resolve_gains(cfg, params, kern)
    trajectory = _trajectory_from_config(cfg.get("trajectory", "load_follow"))

    t_p_out_max = float(cons_cfg.get("t_p_out_max", T_P_OUT_MAX_DEFAULT))
    t_s_out_min = float(cons_cfg.get("t_s_out_min", T_S_OUT_MIN_DEFAULT))
    schedule_kind = cons_cfg.get("schedule", "constant")
    schedules = {
        "T_p_out_max": ConstraintSchedule(
            "T_p_out_max", ((0.0, math.inf, t_p_out_max, t_p_out_max),)),
        "T_s_out_min": make_bound_schedule(schedule_kind, base=t_s_out_min),
    }
    base_cset = moas.output_limits(t_p_out_max, t_s_out_min)

    model, selection = _resolve_model(cfg, model_spec, params, gains, kern)
    aset0 = None
    x_readers = None
    if mode != "bypass":
        if model is None:
            raise ConfigError("model", "governed run without a model")
        refs = plant_mod.reference_values(params)
        aset0 = moas.build_moas(
            model,
            base_cset.with_bounds(_bounds_at(base_cset, schedules, 0.0)),
            horizon=int(gov_cfg.get("horizon", 1500)),
            epsilon=float(gov_cfg.get("epsilon", 0.02)),
            time_index=0,
        )
        x_readers = [(_signal_reader(name, refs), refs[name])
                     for name in model.state_names]

    # resolved configuration for the manifest
    resolved = {
        "duration_s": duration,
        "dt_s": dt,
        "plant": dict(cfg.get("plant") or {}),
        "pi": {
            "m_dot_s": {"kp": gains["m_dot_s"].kp, "ki": gains["m_dot_s"].ki},
            "t_p_in": {"kp": gains["t_p_in"].kp, "ki": gains["t_p_in"].ki},
        },
        "trajectory": _trajectory_to_config(trajectory),
        "constraints": {
            "t_p_out_max": t_p_out_max,
            "t_s_out_min": t_s_out_min,
            "schedule": schedule_kind,
        },
        "governor": {
            "mode": mode,
            "horizon": int(gov_cfg.get("horizon", 1500)),
            "epsilon": float(gov_cfg.get("epsilon", 0.02)),
            "q_weight": None if gov_cfg.get("q_weight") is None
            else [list(map(float, row)) for row in gov_cfg["q_weight"]],
        },
        "model": None if model is None else {"inline": dmdc.model_to_dict(model)},
        "moas_slice_times": [float(t) for t in cfg.get("moas_slice_times") or []],
        "accel": accel,
    }

    result = _run_loop(resolved, params, gains, trajectory, schedules,
                       base_cset, model, selection, aset0, x_readers, kern)
    if out_dir is not None:
        result.write_artifacts(out_dir)
    return result


def _bounds_at(base_cset, schedules, t):
    """Signed right-hand sides of the constraint rows at time t."""
    vals = []
    for label in base_cset.labels:
        b = bound_at(schedules[label], t)
        vals.append(-b if label == "T_s_out_min" else b)
    return np.array(vals)


def _run_loop(resolved, params, gains, trajectory, schedules, base_cset,
              model, selection, aset0, x_readers, kern):
    duration = resolved["duration_s"]
    dt = resolved["dt_s"]
    mode = resolved["governor"]["mode"]
    n_steps = int(round(duration / dt))
    slice_times = list(resolved["moas_slice_times"])

    prm = plant_mod.pack_params(params)
    y = plant_mod.pack_state(plant_mod.nominal_state(params))
    flow_pi, temp_pi = control.make_controllers(params, gains)

    # the admissible set lives in deviation coordinates; references and
    # applied setpoints are converted at this boundary
    ref_inputs = model.ref_inputs if model is not None else np.zeros(2)
    q_weight = resolved["governor"]["q_weight"]
    gov = governor_mod.make_governor(
        mode, trajectory.values_at(0.0) - (ref_inputs if mode != "bypass" else 0.0),
        q_weight=None if q_weight is None else np.array(q_weight, dtype=float),
    )
    aset = aset0

    trace = {name: np.empty(n_steps + 1) for name in runio.TRACE_COLUMNS}
    glog = {
        "t": np.empty(n_steps), "r": np.empty((n_steps, 2)),
        "v": np.empty((n_steps, 2)), "kappa": np.empty(n_steps),
        "margin": np.empty(n_steps), "flag": np.zeros(n_steps, dtype=int),
        "n_active": np.empty(n_steps, dtype=int), "kkt": np.empty(n_steps),
        "i_pi_q": np.empty(n_steps + 1),
    }
    slices = {}
    violations = {label: {"max": -np.inf, "count": 0} for label in base_cset.labels}
    fallback_steps = 0
    current_bounds = base_cset.bounds.copy()

    v_applied = trajectory.values_at(0.0)
    u_s_cmd = plant_mod.nominal_command(params).u_s
    q_cmd = plant_mod.nominal_command(params).q_dot
    dev_bounds_sign = base_cset.coeffs  # rows over measured outputs

    for k in range(n_steps + 1):
        t = k * dt
        # record the state at this instant
        trace["t"][k] = t
        trace["m_dot_s"][k] = y[Y_MDOTS]
        trace["T_p_in"][k] = y[Y_TPIN]
        trace["T_p_out"][k] = y[Y_TPOUT]
        trace["T_s_out"][k] = y[Y_TSOUT]
        trace["T_p_1"][k] = y[Y_TP1]
        trace["T_p_3"][k] = y[Y_TP3]
        trace["I_pi_mdot_s"][k] = flow_pi.integrator
        glog["i_pi_q"][k] = temp_pi.integrator
        p_out, p_1 = plant_mod.tap_pressures(params, y[Y_MDOTP])
        trace["P_p_out"][k] = p_out
        trace["P_p_1"][k] = p_1

        # constraint bookkeeping against the scheduled bounds at t
        y_meas = np.array([y[Y_TPOUT], y[Y_TSOUT], p_out, p_1])
        for j, label in enumerate(base_cset.labels):
            bnd = bound_at(schedules[label], t)
            signed = bnd if label != "T_s_out_min" else -bnd
            excess = float(dev_bounds_sign[j] @ y_meas) - signed
            if excess > violations[label]["max"]:
                violations[label]["max"] = excess
            if excess > 0.0:
                violations[label]["count"] += 1

        if k == n_steps:
            # final instant: keep the last applied commands in the record
            trace["m_dot_s_ref"][k] = v_applied[0]
            trace["T_p_in_ref"][k] = v_applied[1]
            trace["Q_dot"][k] = q_cmd
            trace["u_s"][k] = u_s_cmd
            break

        r_k = trajectory.values_at(t)
        if mode != "bypass":
            new_bounds = _bounds_at(base_cset, schedules, t)
            if not np.array_equal(new_bounds, current_bounds):
                aset = moas.rebuild_bounds(
                    aset, aset.constraints.with_bounds(new_bounds), time_index=k)
                current_bounds = new_bounds
            x_dev = np.array([reader(y, flow_pi, temp_pi) - ref
                              for reader, ref in x_readers])
            gov, v_dev, rec = governor_mod.govern(
                gov, aset, x_dev, r_k - ref_inputs, kern=kern)
            v_applied = v_dev + ref_inputs
            fallback_steps += rec.flag
        else:
            x_dev = None
            gov, v_applied, rec = governor_mod.govern(gov, None, None, r_k, kern=kern)

        glog["t"][k] = t
        glog["r"][k] = r_k
        glog["v"][k] = v_applied
        glog["kappa"][k] = rec.kappa
        glog["margin"][k] = rec.margin
        glog["flag"][k] = rec.flag
        glog["n_active"][k] = rec.n_active
        glog["kkt"][k] = rec.kkt_residual

        if slice_times and mode != "bypass":
            for st in list(slice_times):
                if abs(t - st) < dt / 2.0:
                    slices[st] = moas.export_slice(aset, x_dev)
                    slice_times.remove(st)

        trace["m_dot_s_ref"][k] = v_applied[0]
        trace["T_p_in_ref"][k] = v_applied[1]

        flow_pi = control.with_setpoint(flow_pi, v_applied[0])
        temp_pi = control.with_setpoint(temp_pi, v_applied[1])
        flow_pi, u_s_cmd = control.pi_step(flow_pi, y[Y_MDOTS], dt)
        temp_pi, q_cmd = control.pi_step(temp_pi, y[Y_TPIN], dt)
        trace["Q_dot"][k] = q_cmd
        trace["u_s"][k] = u_s_cmd

        y, ok = kern.loop_step(y, u_s_cmd, q_cmd * 1e6, prm, dt, 10)
        if not ok:
            raise plant_mod.PlantRangeError(
                f"temperature left {plant_mod.TEMP_RANGE} degC at step {k} (t={t} s)"
            )

    return RunResult(
        config=resolved, params=params, gains=gains, trace=trace,
        governor_log=glog, model=model, selection=selection, aset=aset0,
        schedules=schedules, slices=slices, violations=violations,
        fallback_steps=fallback_steps,
    )


def write_artifacts(result, out_dir):
    """Serialize a run: trace, governor log, model, slices, manifest."""
    os.makedirs(out_dir, exist_ok=True)
    trace_path = os.path.join(out_dir, "trace.csv")
    runio.write_columns_csv(trace_path, runio.TRACE_COLUMNS, result.trace)

    gov_path = os.path.join(out_dir, "governor.csv")
    glog = result.governor_log
    runio.write_columns_csv(gov_path, runio.GOVERNOR_COLUMNS, {
        "t": glog["t"],
        "r_m_dot_s_ref": glog["r"][:, 0],
        "r_T_p_in_ref": glog["r"][:, 1],
        "v_m_dot_s_ref": glog["v"][:, 0],
        "v_T_p_in_ref": glog["v"][:, 1],
        "kappa_or_nan": glog["kappa"],
        "margin": glog["margin"],
        "flag": glog["flag"].astype(float),
    })

    model_path = None
    if result.model is not None:
        model_path = os.path.join(out_dir, "model.json")
        dmdc.save_model(result.model, model_path)

    slice_paths = []
    for st in sorted(result.slices):
        sp = os.path.join(out_dir, f"moas_slice_t{int(round(st))}.csv")
        verts = result.slices[st]
        runio.write_columns_csv(sp, runio.SLICE_COLUMNS, {
            "dm_dot_s_ref": verts[:, 0], "dT_p_in_ref": verts[:, 1],
        })
        slice_paths.append(sp)

    manifest_path = os.path.join(out_dir, "manifest.json")
    manifest = {
        "kind": "saltgov-run",
        "version": _package_version(),
        "config": result.config,
        "summary": {
            "violations": {
                label: {"max": float(entry["max"]), "count": int(entry["count"])}
                for label, entry in result.violations.items()
            },
            "fallback_steps": int(result.fallback_steps),
        },
        "artifacts": {
            "trace_csv": _artifact_entry(trace_path),
            "governor_csv": _artifact_entry(gov_path),
            "model_json": _artifact_entry(model_path) if model_path else None,
            "moas_slices": [_artifact_entry(p) for p in slice_paths],
        },
    }
    runio.write_json(manifest_path, manifest)
    return RunArtifacts(
        trace_csv=trace_path, governor_csv=gov_path, model_json=model_path,
        moas_slices=tuple(slice_paths), manifest_json=manifest_path,
    )


def _artifact_entry(path):
    return {"path": os.path.basename(path), "sha256": runio.sha256_file(path)}


def _package_version():
    from saltgov import __version__

    return __version__


def rerun_from_manifest(manifest_path, out_dir):
    """Re-execute a run from its manifest alone (bit-exact artifacts)."""
    manifest = runio.read_json(manifest_path)
    if manifest.get("kind") != "saltgov-run":
        raise ConfigError("kind", "not a run manifest")
    return run_experiment(manifest["config"], out_dir=out_dir)


def verify_load_follow(result, margin=1.0):
    """Check that an unsupervised run violates both limits by >= margin."""
    over = result.violations["T_p_out_max"]["max"]
    under = result.violations["T_s_out_min"]["max"]
    if over < margin or under < margin:
        raise ScenarioInvalidError(
            f"unsupervised run must violate both limits by >= {margin} degC "
            f"(got T_p_out excess {over:.3f}, T_s_out shortfall {under:.3f})"
        )
    return over, under
