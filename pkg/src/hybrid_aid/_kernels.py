"""Compiled inner loops for the glucose-insulin ODE.

Everything here works on flat float64 arrays so that the same code serves the
plant, the estimator, the controller linearization and the fitting objective.
Parameter and state layouts are defined by the index constants below.
"""

import math

import numpy as np
from numba import njit

# state layout; the plant appends two fast-absorption gut compartments
Q1, Q2, X1, X2, X3, S1, S2, I, D1, D2, R1, R2 = range(12)
N_STATE = 10
N_PLANT = 12

# parameter vector layout (absolute units, body weight already applied)
(
    P_K12, P_EGP0, P_KA1, P_KA2, P_KA3, P_KB1, P_KB2, P_KB3, P_TAU_S, P_KE,
    P_AG, P_MWG, P_TAU_D, P_VG, P_VI, P_F01, P_TAU_FAST,
) = range(17)
N_THETA = 17


@njit(cache=True)
def rhs(x, u, d, th, out):
    """Right-hand side; u in mU/min, d in g/min. Writes into ``out``."""
    vg = th[P_VG]
    tau_s = th[P_TAU_S]
    tau_d = th[P_TAU_D]
    g = x[Q1] / vg

    if g >= 4.5:
        f01c = th[P_F01]
    else:
        f01c = th[P_F01] * g / 4.5
    if g >= 9.0:
        fr = 0.003 * (g - 9.0) * vg
    else:
        fr = 0.0
    egp = th[P_EGP0] * (1.0 - x[X3])
    if egp < 0.0:
        egp = 0.0

    ug = x[D2] / tau_d
    if x.shape[0] > N_STATE:
        tf = th[P_TAU_FAST]
        ug += x[R2] / tf
        out[R1] = -x[R1] / tf
        out[R2] = x[R1] / tf - x[R2] / tf

    out[Q1] = ug - x[X1] * x[Q1] - f01c - fr + th[P_K12] * x[Q2] + egp
    out[Q2] = x[X1] * x[Q1] - (x[X2] + th[P_K12]) * x[Q2]
    out[X1] = -th[P_KA1] * x[X1] + th[P_KB1] * x[I]
    out[X2] = -th[P_KA2] * x[X2] + th[P_KB2] * x[I]
    out[X3] = -th[P_KA3] * x[X3] + th[P_KB3] * x[I]
    out[S1] = -x[S1] / tau_s + u
    out[S2] = x[S1] / tau_s - x[S2] / tau_s
    out[I] = -th[P_KE] * x[I] + x[S2] / (tau_s * th[P_VI])
    out[D1] = 1000.0 * th[P_AG] / th[P_MWG] * d - x[D1] / tau_d
    out[D2] = x[D1] / tau_d - x[D2] / tau_d


@njit(cache=True)
def rk4(x, u, d, th, dt, n_sub):
    """``n_sub`` RK4 substeps of length ``dt``; negative components clamp to 0.

    Returns the new state and the number of clamped components.
    """
    n = x.shape[0]
    y = x.copy()
    k1 = np.empty(n)
    k2 = np.empty(n)
    k3 = np.empty(n)
    k4 = np.empty(n)
    tmp = np.empty(n)
    clamped = 0
    for _ in range(n_sub):
        rhs(y, u, d, th, k1)
        for j in range(n):
            tmp[j] = y[j] + 0.5 * dt * k1[j]
        rhs(tmp, u, d, th, k2)
        for j in range(n):
            tmp[j] = y[j] + 0.5 * dt * k2[j]
        rhs(tmp, u, d, th, k3)
        for j in range(n):
            tmp[j] = y[j] + dt * k3[j]
        rhs(tmp, u, d, th, k4)
        for j in range(n):
            y[j] += dt / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j])
            if y[j] < 0.0:
                y[j] = 0.0
                clamped += 1
    return y, clamped


@njit(cache=True)
def jacobian(x, th):
    """Analytic ∂f/∂x (10x10) of the controller model at ``x``."""
    a = np.zeros((N_STATE, N_STATE))
    vg = th[P_VG]
    tau_s = th[P_TAU_S]
    tau_d = th[P_TAU_D]
    k12 = th[P_K12]
    g = x[Q1] / vg

    dq1 = -x[X1]
    if g < 4.5:
        dq1 -= th[P_F01] / (4.5 * vg)
    if g >= 9.0:
        dq1 -= 0.003
    a[Q1, Q1] = dq1
    a[Q1, Q2] = k12
    a[Q1, X1] = -x[Q1]
    if 1.0 - x[X3] >= 0.0:
        a[Q1, X3] = -th[P_EGP0]
    a[Q1, D2] = 1.0 / tau_d

    a[Q2, Q1] = x[X1]
    a[Q2, Q2] = -(x[X2] + k12)
    a[Q2, X1] = x[Q1]
    a[Q2, X2] = -x[Q2]

    a[X1, X1] = -th[P_KA1]
    a[X1, I] = th[P_KB1]
    a[X2, X2] = -th[P_KA2]
    a[X2, I] = th[P_KB2]
    a[X3, X3] = -th[P_KA3]
    a[X3, I] = th[P_KB3]

    a[S1, S1] = -1.0 / tau_s
    a[S2, S1] = 1.0 / tau_s
    a[S2, S2] = -1.0 / tau_s
    a[I, S2] = 1.0 / (tau_s * th[P_VI])
    a[I, I] = -th[P_KE]

    a[D1, D1] = -1.0 / tau_d
    a[D2, D1] = 1.0 / tau_d
    a[D2, D2] = -1.0 / tau_d
    return a


@njit(cache=True)
def expm(m, tol):
    """Matrix exponential by truncated Taylor series with scaling and squaring."""
    n = m.shape[0]
    norm = 0.0
    for j in range(n):
        s = 0.0
        for i in range(n):
            s += abs(m[i, j])
        if s > norm:
            norm = s
    squarings = 0
    if norm > 0.5:
        squarings = int(math.ceil(math.log2(norm / 0.5)))
    ms = m / (2.0 ** squarings)
    result = np.eye(n)
    term = np.eye(n)
    for k in range(1, 40):
        term = term @ ms / k
        result += term
        tn = 0.0
        rn = 0.0
        for i in range(n):
            for j in range(n):
                tn = max(tn, abs(term[i, j]))
                rn = max(rn, abs(result[i, j]))
        if tn <= tol * rn:
            break
    for _ in range(squarings):
        result = result @ result
    return result


@njit(cache=True)
def discretize(x, u, th, ts, tol):
    """Zero-order-hold discretization of the affine linearization at (x, u).

    Returns (A, B, w) with δx⁺ = A δx + B δu + w, where w is the free drift
    over one sample caused by f(x, u) ≠ 0. u is in mU/min.
    """
    n = N_STATE
    ac = jacobian(x, th)
    f0 = np.empty(n)
    rhs(x[:n].copy(), u, 0.0, th, f0)
    m = np.zeros((n + 2, n + 2))
    m[:n, :n] = ac * ts
    m[S1, n] = ts
    for i in range(n):
        m[i, n + 1] = f0[i] * ts
    e = expm(m, tol)
    return e[:n, :n].copy(), e[:n, n].copy(), e[:n, n + 1].copy()


@njit(cache=True)
def simulate_glucose(x0, th, u_steps, meal_steps, ts, n_sub):
    """Open-loop run on a ``ts`` grid; returns plasma glucose (mg/dL) per step.

    ``u_steps`` holds the mU/min rate held over each step, ``meal_steps`` the
    CHO grams appearing in D1 at the start of each step. A NaN in the output
    marks an integration failure.
    """
    n_steps = u_steps.shape[0]
    out = np.empty(n_steps)
    x = x0.copy()
    to_mmol = 1000.0 * th[P_AG] / th[P_MWG]
    mgdl = th[P_MWG] / 10.0
    dt = ts / n_sub
    for k in range(n_steps):
        out[k] = x[Q1] / th[P_VG] * mgdl
        if meal_steps[k] > 0.0:
            x[D1] += to_mmol * meal_steps[k]
        x, _ = rk4(x, u_steps[k], 0.0, th, dt, n_sub)
        if not np.isfinite(x[Q1]):
            out[k:] = np.nan
            break
    return out
