"""Data-driven identification of discrete-time state-space models.

Given time-aligned snapshots of states X, inputs U, and outputs Y, the
state and input matrices are the least-squares solution of
``X' ~= [A B] [X; U]`` computed through a truncated SVD of the stacked
data matrix, and the output matrix is an ordinary least-squares fit
``Y ~= C X``.  The feedthrough term is identically zero.  All fits are
performed in deviation coordinates about a stored reference point; the
reference is re-added when simulating outputs.

A forward sequential feature-selection routine picks the state set that
minimizes validation replay error of the outputs, which is how the small
physical state sets used by the governor are justified.
"""

from dataclasses import dataclass, replace
import json
import hashlib
import warnings

import numpy as np

from saltgov import kernels

SVD_TRUNCATION_DEFAULT = 1e-8       # keep sigma_i / sigma_1 above this
CONDITION_WARN_THRESHOLD = 1e12

# Compact physical state set used by the supervisory layer when a minimal
# model is requested: the two pipe temperatures plus the flow-loop integral.
COMPACT_STATE_SET = ("T_p_1", "T_p_3", "I_pi_mdot_s")


class RankDeficiencyError(RuntimeError):
    """Raised when the data cannot support the requested rank."""


class IllConditioningWarning(UserWarning):
    """Emitted when retained singular values span a huge dynamic range."""


@dataclass(frozen=True)
class SnapshotLog:
    """Uniformly sampled records of states, inputs, and outputs.

    Values are stored in physical units together with the reference point
    that identification subtracts.  States hold one more column than
    inputs: inputs[:, k] acts between states[:, k] and states[:, k+1].
    """

    times: np.ndarray          # (L+1,)
    states: np.ndarray         # (n, L+1)
    inputs: np.ndarray         # (m, L)
    outputs: np.ndarray        # (p, L+1)
    state_names: tuple
    input_names: tuple
    output_names: tuple
    ref_states: np.ndarray     # (n,)
    ref_inputs: np.ndarray     # (m,)
    ref_outputs: np.ndarray    # (p,)

    def __post_init__(self):
        if self.states.shape[1] != self.inputs.shape[1] + 1:
            raise ValueError("states must have exactly one more column than inputs")
        if self.outputs.shape[1] != self.states.shape[1]:
            raise ValueError("outputs and states must share sample instants")
        if len(self.times) != self.states.shape[1]:
            raise ValueError("times length mismatch")
        if len(self.times) > 1:
            steps = np.diff(self.times)
            if np.max(np.abs(steps - steps[0])) >= 1e-9:
                raise ValueError("sampling is not uniform to 1e-9 s")

    @property
    def dt(self):
        return float(self.times[1] - self.times[0])

    def subset(self, state_names):
        """View of the log restricted to the given state rows."""
        idx = [self.state_names.index(name) for name in state_names]
        return replace(
            self,
            states=self.states[idx, :],
            state_names=tuple(state_names),
            ref_states=self.ref_states[list(idx)],
        )

    def window(self, start, stop):
        """Slice sample instants [start, stop) keeping column alignment."""
        return replace(
            self,
            times=self.times[start:stop],
            states=self.states[:, start:stop],
            outputs=self.outputs[:, start:stop],
            inputs=self.inputs[:, start:stop - 1],
        )


@dataclass(frozen=True)
class LtiModel:
    """Discrete-time (A, B, C, D) quadruple in deviation coordinates."""

    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    d: np.ndarray
    dt: float
    state_names: tuple
    input_names: tuple
    output_names: tuple
    ref_states: np.ndarray
    ref_inputs: np.ndarray
    ref_outputs: np.ndarray

    @property
    def n(self):
        return self.a.shape[0]

    @property
    def m(self):
        return self.b.shape[1]

    @property
    def p(self):
        return self.c.shape[0]

    def spectral_radius(self):
        return float(np.max(np.abs(np.linalg.eigvals(self.a))))


def model_to_dict(model):
    return {
        "a": model.a.tolist(),
        "b": model.b.tolist(),
        "c": model.c.tolist(),
        "d": model.d.tolist(),
        "dt": model.dt,
        "state_names": list(model.state_names),
        "input_names": list(model.input_names),
        "output_names": list(model.output_names),
        "reference_point": {
            "states": model.ref_states.tolist(),
            "inputs": model.ref_inputs.tolist(),
            "outputs": model.ref_outputs.tolist(),
        },
    }


def model_from_dict(data):
    ref = data["reference_point"]
    return LtiModel(
        a=np.array(data["a"], dtype=float),
        b=np.array(data["b"], dtype=float),
        c=np.array(data["c"], dtype=float),
        d=np.array(data["d"], dtype=float),
        dt=float(data["dt"]),
        state_names=tuple(data["state_names"]),
        input_names=tuple(data["input_names"]),
        output_names=tuple(data["output_names"]),
        ref_states=np.array(ref["states"], dtype=float),
        ref_inputs=np.array(ref["inputs"], dtype=float),
        ref_outputs=np.array(ref["outputs"], dtype=float),
    )


def save_model(model, path):
    with open(path, "w") as fh:
        json.dump(model_to_dict(model), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_model(path):
    with open(path) as fh:
        return model_from_dict(json.load(fh))


def model_hash(model):
    blob = json.dumps(model_to_dict(model), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def _truncated_rank(sigma, rank_truncation):
    if sigma.size == 0 or sigma[0] == 0.0:
        raise RankDeficiencyError("data matrix is identically zero")
    rel = sigma / sigma[0]
    numerical = int(np.sum(rel > 1e-14))
    if rank_truncation is None:
        rank_truncation = SVD_TRUNCATION_DEFAULT
    if isinstance(rank_truncation, (int, np.integer)) and not isinstance(rank_truncation, bool):
        r = int(rank_truncation)
        if r <= 0:
            raise ValueError("rank truncation must be positive")
        if r > numerical:
            raise RankDeficiencyError(
                f"requested rank {r} but data supports only {numerical} directions"
            )
        return r
    thr = float(rank_truncation)
    if not 0.0 < thr < 1.0:
        raise ValueError("energy threshold must lie in (0, 1)")
    return int(np.sum(rel > thr))


def identify_dmdc(log, rank_truncation=None):
    """Fit A, B by truncated-SVD least squares and C by ordinary LS.

    The stacked snapshot matrix [X_0..L-1; U] is factored by SVD and the
    pseudo-inverse is formed from the retained directions.  Output rows
    whose label matches a state label become exact selector rows.
    """
    n = log.states.shape[0]
    m = log.inputs.shape[0]
    ncols = log.inputs.shape[1]
    if ncols < n + m:
        raise ValueError(
            f"need at least n+m={n + m} snapshot pairs, got {ncols}"
        )
    x = log.states - log.ref_states[:, None]
    u = log.inputs - log.ref_inputs[:, None]
    y = log.outputs - log.ref_outputs[:, None]

    omega = np.vstack([x[:, :-1], u])
    xp = x[:, 1:]

    uu, sig, vt = np.linalg.svd(omega, full_matrices=False)
    r = _truncated_rank(sig, rank_truncation)
    if sig[0] / sig[r - 1] > CONDITION_WARN_THRESHOLD:
        warnings.warn(
            f"retained singular values span condition {sig[0] / sig[r - 1]:.3e}",
            IllConditioningWarning,
        )
    pinv = vt[:r, :].T @ np.diag(1.0 / sig[:r]) @ uu[:, :r].T
    ab = xp @ pinv
    a = ab[:, :n]
    b = ab[:, n:]

    # output map: exact selector rows where an output is itself a state
    c = np.zeros((log.outputs.shape[0], n))
    free_rows = []
    for i, name in enumerate(log.output_names):
        if name in log.state_names:
            c[i, log.state_names.index(name)] = 1.0
        else:
            free_rows.append(i)
    if free_rows:
        sol, *_ = np.linalg.lstsq(x.T, y[free_rows, :].T, rcond=None)
        c[free_rows, :] = sol.T
    d = np.zeros((log.outputs.shape[0], m))

    return LtiModel(
        a=a, b=b, c=c, d=d, dt=log.dt,
        state_names=log.state_names,
        input_names=log.input_names,
        output_names=log.output_names,
        ref_states=log.ref_states.copy(),
        ref_inputs=log.ref_inputs.copy(),
        ref_outputs=log.ref_outputs.copy(),
    )


def simulate_model(model, x0, inputs, kern=None):
    """Iterate the difference equations from a deviation initial state.

    x0 and inputs are deviations from the reference point; the returned
    states stay in deviation coordinates while outputs have the reference
    re-added (physical units).  inputs is (m, N); states come back as
    (n, N+1) and outputs as (p, N+1).
    """
    x0 = np.asarray(x0, dtype=float)
    inputs = np.asarray(inputs, dtype=float)
    if inputs.ndim != 2 or inputs.shape[0] != model.m:
        raise ValueError(f"inputs must be ({model.m}, N)")
    if x0.shape != (model.n,):
        raise ValueError(f"x0 must have length {model.n}")
    if kern is None:
        kern = kernels.get_kernels()
    states = kern.lti_sim(model.a, model.b, x0, inputs)
    outputs = model.c @ states + model.ref_outputs[:, None]
    return states, outputs


def replay_outputs(model, log, kern=None):
    """Model outputs along a log's inputs, starting from its first state."""
    idx = [log.state_names.index(name) for name in model.state_names]
    x0 = log.states[idx, 0] - model.ref_states
    u = log.inputs - model.ref_inputs[:, None]
    _, outputs = simulate_model(model, x0, u, kern=kern)
    return outputs


def normalized_output_mse(model, log, kern=None):
    """Per-output replay MSE normalized by the measured signal variance.

    Constant signals get a small absolute floor so an exact replay of a
    flat channel scores zero instead of 0/0.
    """
    predicted = replay_outputs(model, log, kern=kern)
    scores = {}
    for i, name in enumerate(model.output_names):
        y = log.outputs[i, :]
        err = predicted[i, :] - y
        floor = (1e-6 * max(1.0, abs(float(model.ref_outputs[i])))) ** 2
        denom = max(float(np.var(y)), floor)
        scores[name] = float(np.mean(err ** 2)) / denom
    return scores


@dataclass(frozen=True)
class SelectionResult:
    selected: tuple                    # chosen labels, selection order
    score: float                       # validation objective of the chosen set
    evaluations: tuple                 # ((labels...), score) for every fit tried


def _validation_score(log, state_names, split, rank, kern):
    sub = log.subset(state_names)
    n_cols = sub.states.shape[1]
    cut = max(int(np.floor(split * n_cols)), sub.states.shape[0] + sub.inputs.shape[0] + 1)
    cut = min(cut, n_cols - 2)
    train = sub.window(0, cut + 1)
    val = sub.window(cut, n_cols)
    model = identify_dmdc(train, rank_truncation=rank)
    scores = normalized_output_mse(model, val, kern=kern)
    score = float(np.mean(list(scores.values())))
    return score if np.isfinite(score) else np.inf


def select_states(log, candidate_states, outputs=None, *, rel_improvement=0.01,
                  split=0.7, rank_truncation=None, always_evaluate=(), kern=None):
    """Greedy forward selection of the state set.

    Starting from the empty set, each round adds the candidate whose
    inclusion minimizes validation replay MSE of the outputs (train on the
    first `split` of the log in time order, validate on the rest).  The
    search stops when the relative improvement drops below
    `rel_improvement` or candidates are exhausted.  Ties break toward the
    earlier candidate in the given order, so the result is deterministic.

    Sets listed in `always_evaluate` are scored and reported even when the
    greedy path never visits them.
    """
    del outputs  # outputs are fixed by the log; kept for call-site clarity
    if kern is None:
        kern = kernels.get_kernels()
    for name in candidate_states:
        if name not in log.state_names:
            raise ValueError(f"candidate {name!r} not present in the log")

    evaluations = []
    selected = []
    remaining = list(candidate_states)
    best_score = np.inf
    while remaining:
        round_best = None
        round_score = np.inf
        for cand in remaining:
            trial = tuple(selected + [cand])
            score = _validation_score(log, trial, split, rank_truncation, kern)
            evaluations.append((trial, score))
            if score < round_score:
                round_score = score
                round_best = cand
        if np.isfinite(best_score):
            gain = (best_score - round_score) / best_score
            if gain < rel_improvement:
                break
        selected.append(round_best)
        remaining.remove(round_best)
        best_score = round_score

    for extra in always_evaluate:
        extra = tuple(extra)
        if not any(set(ev[0]) == set(extra) for ev in evaluations):
            score = _validation_score(log, extra, split, rank_truncation, kern)
            evaluations.append((extra, score))

    return SelectionResult(
        selected=tuple(selected),
        score=float(best_score),
        evaluations=tuple(evaluations),
    )
