"""Hot numerical kernels: numba-jitted with a pure-numpy fallback.

The per-step work of a transient run (loop integration, discrete-time model
rollout, governor row scans) executes tens of thousands of times per
scenario, so these inner loops are compiled with numba's ``@njit`` when
available.  Every kernel has a numpy/python twin so the package works, and
tests pass, without a working numba install.

Implementation selection:

* ``SALTGOV_NUMBA=0`` (also ``off``, ``no``, ``false``) forces the numpy
  fallback.
* ``SALTGOV_NUMBA=1`` requires numba and raises if it cannot be imported.
* unset: numba when importable, fallback otherwise.

Run manifests record the resolved mode so a rerun from a manifest uses the
same code path bit-for-bit.  ``benchmarks/bench_kernels.py`` compares the
two paths.

Kernel calling conventions use flat float64 arrays; the layouts below are
shared with :mod:`saltgov.plant`.  Constants must be passed through the
parameter vector (no global lookups inside jitted code).
"""

import math
import os
from types import SimpleNamespace

import numpy as np

try:
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - exercised only without numba
    njit = None
    NUMBA_AVAILABLE = False


# Loop-parameter vector layout (see plant.pack_params).
P_CP_P, P_CP_S, P_M_P1, P_M_P3, P_M_PIN, P_M_POUT, P_M_SEC, P_UA, P_TSIN, \
    P_HEAD, P_KLOOP, P_PSUC, P_KTAP, P_PGAIN, P_PTAU, P_INERT, P_TMIN, \
    P_TMAX = range(18)

# Loop-state vector layout (see plant.pack_state).
Y_TP1, Y_TP3, Y_TPIN, Y_TPOUT, Y_TSOUT, Y_MDOTP, Y_MDOTS = range(7)

N_STATE = 7
_N_TEMPS = 5  # leading entries of the state vector that are temperatures


def _loop_step_impl(y0, u_s, q_dot_w, prm, dt, nsub):
    """Advance the loop state one sample of length dt with RK4 substeps.

    Returns (new state, in-range flag); the flag goes false if any node
    temperature leaves [prm[P_TMIN], prm[P_TMAX]] at a substep boundary.
    """
    y = y0.copy()
    ks = np.empty((4, N_STATE))
    yt = np.empty(N_STATE)
    h = dt / nsub
    ok = True
    for _ in range(nsub):
        for stage in range(4):
            if stage == 0:
                for i in range(N_STATE):
                    yt[i] = y[i]
            elif stage == 3:
                for i in range(N_STATE):
                    yt[i] = y[i] + h * ks[2, i]
            else:
                for i in range(N_STATE):
                    yt[i] = y[i] + 0.5 * h * ks[stage - 1, i]

            # energy balances with a quasi-steady counter-current HX
            m_p = yt[Y_MDOTP]
            m_s = yt[Y_MDOTS]
            if m_p < 1e-9:
                m_p = 1e-9
            if m_s < 1e-9:
                m_s = 1e-9
            c_pf = m_p * prm[P_CP_P]
            c_sf = m_s * prm[P_CP_S]
            if c_pf <= c_sf:
                c_min = c_pf
                c_max = c_sf
            else:
                c_min = c_sf
                c_max = c_pf
            ntu = prm[P_UA] / c_min
            cr = c_min / c_max
            if cr > 1.0 - 1e-12:
                eff = ntu / (1.0 + ntu)
            else:
                ez = math.exp(-ntu * (1.0 - cr))
                eff = (1.0 - ez) / (1.0 - cr * ez)
            q_hx = eff * c_min * (yt[Y_TPIN] - prm[P_TSIN])

            ks[stage, Y_TP1] = c_pf * (yt[Y_TPOUT] - yt[Y_TP1]) / prm[P_M_P1]
            ks[stage, Y_TP3] = (c_pf * (yt[Y_TP1] - yt[Y_TP3]) + q_dot_w) / prm[P_M_P3]
            ks[stage, Y_TPIN] = c_pf * (yt[Y_TP3] - yt[Y_TPIN]) / prm[P_M_PIN]
            ks[stage, Y_TPOUT] = (c_pf * (yt[Y_TPIN] - yt[Y_TPOUT]) - q_hx) / prm[P_M_POUT]
            ks[stage, Y_TSOUT] = (c_sf * (prm[P_TSIN] - yt[Y_TSOUT]) + q_hx) / prm[P_M_SEC]
            # fixed pump head against quadratic loop friction (kPa -> Pa)
            ks[stage, Y_MDOTP] = (prm[P_HEAD] - prm[P_KLOOP] * yt[Y_MDOTP] * yt[Y_MDOTP]) \
                * 1000.0 / prm[P_INERT]
            ks[stage, Y_MDOTS] = (u_s * prm[P_PGAIN] - yt[Y_MDOTS]) / prm[P_PTAU]

        for i in range(N_STATE):
            y[i] = y[i] + (h / 6.0) * (ks[0, i] + 2.0 * ks[1, i] + 2.0 * ks[2, i] + ks[3, i])
        for i in range(_N_TEMPS):
            if not (prm[P_TMIN] <= y[i] <= prm[P_TMAX]):
                ok = False
    return y, ok


def _lti_sim_loop(a, b, x0, u):
    """Roll x[k+1] = a x[k] + b u[k]; u is (m, N), returns (n, N+1)."""
    n = a.shape[0]
    m = b.shape[1]
    nsteps = u.shape[1]
    xs = np.empty((n, nsteps + 1))
    for i in range(n):
        xs[i, 0] = x0[i]
    for k in range(nsteps):
        for i in range(n):
            acc = 0.0
            for j in range(n):
                acc += a[i, j] * xs[j, k]
            for j in range(m):
                acc += b[i, j] * u[j, k]
            xs[i, k + 1] = acc
    return xs


def _lti_sim_numpy(a, b, x0, u):
    nsteps = u.shape[1]
    xs = np.empty((a.shape[0], nsteps + 1))
    xs[:, 0] = x0
    x = np.asarray(x0, dtype=float)
    for k in range(nsteps):
        x = a @ x + b @ u[:, k]
        xs[:, k + 1] = x
    return xs


def _srg_kappa_loop(alpha, beta):
    """Largest admissible fraction of the move v_prev -> r.

    alpha[i] is row slack at the current command, beta[i] the row's response
    to the full move; rows with beta <= 0 can never cap the step.
    """
    kap = 1.0
    for i in range(alpha.shape[0]):
        b = beta[i]
        if b > 0.0:
            a = alpha[i]
            if a < b:
                c = a / b
                if c < kap:
                    kap = c
    if kap < 0.0:
        kap = 0.0
    return kap


def _srg_kappa_numpy(alpha, beta):
    mask = beta > 0.0
    if not mask.any():
        return 1.0
    caps = alpha[mask] / beta[mask]
    kap = min(1.0, float(caps.min()))
    return max(kap, 0.0)


def _margins_loop(h, hx, hv, x, v):
    """Row slacks h - hx x - hv v of the admissible-set inequalities."""
    nrows = h.shape[0]
    out = np.empty(nrows)
    for i in range(nrows):
        acc = h[i]
        for j in range(hx.shape[1]):
            acc -= hx[i, j] * x[j]
        for j in range(hv.shape[1]):
            acc -= hv[i, j] * v[j]
        out[i] = acc
    return out


def _margins_numpy(h, hx, hv, x, v):
    return h - hx @ x - hv @ v


_NUMPY = SimpleNamespace(
    mode="numpy",
    loop_step=_loop_step_impl,
    lti_sim=_lti_sim_numpy,
    srg_kappa=_srg_kappa_numpy,
    margins=_margins_numpy,
)

if NUMBA_AVAILABLE:
    _NUMBA = SimpleNamespace(
        mode="numba",
        loop_step=njit(cache=True)(_loop_step_impl),
        lti_sim=njit(cache=True)(_lti_sim_loop),
        srg_kappa=njit(cache=True)(_srg_kappa_loop),
        margins=njit(cache=True)(_margins_loop),
    )
else:  # pragma: no cover
    _NUMBA = None


def env_default_mode():
    flag = os.environ.get("SALTGOV_NUMBA", "").strip().lower()
    if flag in ("0", "off", "no", "false"):
        return "numpy"
    if flag in ("1", "on", "yes", "true"):
        if not NUMBA_AVAILABLE:
            raise RuntimeError("SALTGOV_NUMBA=1 but numba is not importable")
        return "numba"
    return "numba" if NUMBA_AVAILABLE else "numpy"


def resolve_mode(requested=None):
    """Map a requested mode ('auto'/None/'numba'/'numpy') to a concrete one."""
    if requested in (None, "", "auto"):
        return env_default_mode()
    if requested == "numpy":
        return "numpy"
    if requested == "numba":
        if not NUMBA_AVAILABLE:
            raise RuntimeError("numba kernels requested but numba is not importable")
        return "numba"
    raise ValueError(f"unknown kernel mode {requested!r}")


def get_kernels(mode=None):
    """Return the kernel namespace for a mode (default: resolve from env)."""
    mode = resolve_mode(mode)
    return _NUMBA if mode == "numba" else _NUMPY


def warm_up(mode=None):
    """Trigger JIT compilation of every kernel so later timings are clean."""
    ker = get_kernels(mode)
    y = np.array([572.0, 585.0, 585.0, 572.0, 517.0, 589.0, 380.0])
    prm = np.array([2350.0, 1894.0, 2e7, 2e7, 1e7, 1e7, 8e6, 2.4e5, 492.0,
                    150.0, 150.0 / 589.0 ** 2, 50.0, 21.0 / 589.0 ** 2,
                    500.0, 4.0, 1018.0, 400.0, 800.0])
    ker.loop_step(y, 0.76, 18e6, prm, 0.2, 10)
    a = np.array([[0.9, 0.0], [0.1, 0.8]])
    b = np.array([[0.1], [0.0]])
    ker.lti_sim(a, b, np.zeros(2), np.ones((1, 3)))
    ker.srg_kappa(np.array([1.0, 2.0]), np.array([0.5, -1.0]))
    ker.margins(np.array([1.0]), np.array([[0.5, 0.5]]),
                np.array([[0.2]]), np.array([0.1, 0.1]), np.array([0.3]))
    return ker.mode
