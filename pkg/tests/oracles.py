"""Independent reference implementations used only by the tests."""

from __future__ import annotations

import math

import numpy as np
from scipy.integrate import solve_ivp


def hovorka_rhs(x, u, d, p):
    """Plain-Python Hovorka right-hand side in the textbook notation.

    x = (Q1, Q2, x1, x2, x3, S1, S2, I, D1, D2); u in mU/min, d in g/min.
    """
    Q1, Q2, x1, x2, x3, S1, S2, I, D1, D2 = x
    VG = p.V_G_per_kg * p.BW
    VI = p.V_I_per_kg * p.BW
    F01 = p.F01_per_kg * p.BW
    EGP0 = p.EGP0_per_kg * p.BW
    G = Q1 / VG
    F01c = F01 if G >= 4.5 else F01 * G / 4.5
    FR = 0.003 * (G - 9.0) * VG if G >= 9.0 else 0.0
    UG = D2 / p.tau_D
    EGP = max(0.0, EGP0 * (1.0 - x3))
    kb1, kb2, kb3 = p.SI1 * p.k_a1, p.SI2 * p.k_a2, p.SI3 * p.k_a3
    return np.array([
        -F01c - FR - x1 * Q1 + p.k12 * Q2 + UG + EGP,
        x1 * Q1 - (p.k12 + x2) * Q2,
        -p.k_a1 * x1 + kb1 * I,
        -p.k_a2 * x2 + kb2 * I,
        -p.k_a3 * x3 + kb3 * I,
        u - S1 / p.tau_S,
        S1 / p.tau_S - S2 / p.tau_S,
        S2 / (p.tau_S * VI) - p.k_e * I,
        1000.0 * p.AG / p.M_wg * d - D1 / p.tau_D,
        D1 / p.tau_D - D2 / p.tau_D,
    ])


def reference_trajectory(x0, u, p, t_end, t_eval):
    """Adaptive Runge-Kutta (scipy) at tight tolerances, constant inputs."""
    sol = solve_ivp(lambda t, x: hovorka_rhs(x, u, 0.0, p), (0.0, t_end), np.asarray(x0, float),
                    method="DOP853", rtol=1e-11, atol=1e-12, t_eval=t_eval)
    return sol.y.T


def fd_jacobian(f, x, rel=1e-6):
    """Central differences with a relative step."""
    x = np.asarray(x, float)
    n = x.size
    f0 = f(x)
    J = np.empty((f0.size, n))
    for j in range(n):
        h = rel * max(abs(x[j]), 1e-3)
        xp, xm = x.copy(), x.copy()
        xp[j] += h
        xm[j] -= h
        J[:, j] = (f(xp) - f(xm)) / (2 * h)
    return J


def projected_gradient(H, g, lb, ub, tol=1e-10, max_iter=200_000):
    """Accelerated projected gradient (FISTA with restart) for box QPs."""
    L = float(np.linalg.eigvalsh(H)[-1])
    x = np.clip(np.zeros_like(g), lb, ub)
    y, t = x.copy(), 1.0
    for _ in range(max_iter):
        x_new = np.clip(y - (H @ y + g) / L, lb, ub)
        t_new = 0.5 * (1 + math.sqrt(1 + 4 * t * t))
        if (x_new - x) @ (H @ x_new + g) > 0:  # objective went up: restart momentum
            t_new, y = 1.0, x_new.copy()
        else:
            y = x_new + (t - 1) / t_new * (x_new - x)
        if np.max(np.abs(x_new - x)) < tol:
            x = x_new
            break
        x, t = x_new, t_new
    # final plain projected-gradient polish
    for _ in range(1000):
        x_new = np.clip(x - (H @ x + g) / L, lb, ub)
        if np.max(np.abs(x_new - x)) < tol * 1e-2:
            return x_new
        x = x_new
    return x


def random_spd(rng, n, cond=100.0):
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    eig = np.exp(rng.uniform(0.0, math.log(cond), n))
    return (q * eig) @ q.T


def risk(bg):
    """Kovatchev risk per sample from the published transform constants."""
    f = 1.509 * (math.log(bg) ** 1.084 - 5.381)
    return 10.0 * f * f, f
