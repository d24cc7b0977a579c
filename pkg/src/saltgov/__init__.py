"""Setpoint supervision toolkit for a simulated molten-salt loop.

The package couples a deterministic lumped-parameter loop simulator with
PI inner loops, least-squares state-space identification from snapshot
logs, finite-horizon admissible-set construction, and scalar/quadratic
setpoint governors that keep output limits satisfied through load-follow
maneuvers, including limits that move in time.
"""

__version__ = "0.1.0"

from saltgov.plant import (
    ActuatorCommand,
    CalibrationError,
    LoopParams,
    PlantRangeError,
    PlantState,
    calibrate_steady_state,
    measure_outputs,
    step_plant,
)
from saltgov.control import PiController, PiGains, pi_step, tune_open_loop
from saltgov.dmdc import (
    LtiModel,
    SnapshotLog,
    identify_dmdc,
    select_states,
    simulate_model,
)
from saltgov.moas import (
    AdmissibleSet,
    OutputConstraintSet,
    build_moas,
    export_slice,
    is_member,
    rebuild_bounds,
)
from saltgov.governor import (
    GovernorState,
    QpProblem,
    cg_step,
    govern,
    make_governor,
    solve_qp,
    srg_step,
)
from saltgov.scenario import (
    ConstraintSchedule,
    ReferenceTrajectory,
    RunArtifacts,
    bound_at,
    build_load_follow,
    run_experiment,
)

__all__ = [
    "__version__",
    "ActuatorCommand", "CalibrationError", "LoopParams", "PlantRangeError",
    "PlantState", "calibrate_steady_state", "measure_outputs", "step_plant",
    "PiController", "PiGains", "pi_step", "tune_open_loop",
    "LtiModel", "SnapshotLog", "identify_dmdc", "select_states", "simulate_model",
    "AdmissibleSet", "OutputConstraintSet", "build_moas", "export_slice",
    "is_member", "rebuild_bounds",
    "GovernorState", "QpProblem", "cg_step", "govern", "make_governor",
    "solve_qp", "srg_step",
    "ConstraintSchedule", "ReferenceTrajectory", "RunArtifacts", "bound_at",
    "build_load_follow", "run_experiment",
]
