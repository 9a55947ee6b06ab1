import itertools
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybrid_aid.qp import INFEASIBLE, OPTIMAL, QpProblem, kkt_residual, solve_qp

from .oracles import projected_gradient, random_spd


def random_box_qp(rng, n):
    H = random_spd(rng, n, cond=rng.uniform(1.0, 1e3))
    g = rng.normal(0.0, 3.0, n)
    lb = rng.uniform(-2.0, 0.5, n)
    ub = lb + rng.uniform(0.0, 2.5, n)
    # a few fixed and one-sided coordinates
    fixed = rng.random(n) < 0.05
    ub[fixed] = lb[fixed]
    return QpProblem(H, g, lb, ub)


def test_separable_interior():
    res = solve_qp(QpProblem(np.eye(4), -2.0 * np.ones(4), np.zeros(4), 10.0 * np.ones(4)))
    assert res.ok
    np.testing.assert_allclose(res.u, 2.0, atol=1e-14)


def test_lower_bound_active():
    res = solve_qp(QpProblem(np.eye(4), 5.0 * np.ones(4), np.zeros(4), 10.0 * np.ones(4)))
    np.testing.assert_array_equal(res.u, 0.0)


def test_validation():
    with pytest.raises(ValueError):
        QpProblem(np.eye(2), np.zeros(2), np.ones(2), np.zeros(2))
    with pytest.raises(ValueError):
        QpProblem(np.eye(2), np.zeros(3), np.zeros(3), np.ones(3))


def test_oracle_1000_cases():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst_gap, worst_kkt = 0.0, 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 13))
        qp = random_box_qp(rng, n)
        res = solve_qp(qp)
        ref = projected_gradient(qp.H, qp.g, qp.lb, qp.ub)
        assert res.status == OPTIMAL
        assert res.iterations <= 20 * n
        worst_gap = max(worst_gap, qp.objective(res.u) - qp.objective(ref))
        worst_kkt = max(worst_kkt, res.kkt_residual)
        assert np.all(res.u >= qp.lb) and np.all(res.u <= qp.ub)
    assert worst_gap < 1e-6
    assert worst_kkt < 1e-8
    assert time.perf_counter() - t0 < 30.0


def test_deterministic_resolve():
    rng = np.random.default_rng(5)
    qp = random_box_qp(rng, 12)
    a, b = solve_qp(qp), solve_qp(qp)
    assert a.u.tobytes() == b.u.tobytes() and a.iterations == b.iterations


def test_iteration_cap_reports_status():
    rng = np.random.default_rng(9)
    qp = random_box_qp(rng, 12)
    res = solve_qp(qp, max_iter=1)
    assert res.status in ("max_iter", OPTIMAL)
    assert np.all(res.u >= qp.lb) and np.all(res.u <= qp.ub)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2**32 - 1))
def test_property_kkt_and_feasibility(n, seed):
    rng = np.random.default_rng(seed)
    qp = random_box_qp(rng, n)
    res = solve_qp(qp, u0=rng.uniform(-5, 5, n))
    assert res.ok and res.kkt_residual < 1e-8
    assert kkt_residual(qp, res.u) == res.kkt_residual


# --- general rows -------------------------------------------------------------

def enumerate_active_sets(H, g, G, h):
    """Brute-force oracle: best feasible KKT point over every working set."""
    n, m = g.size, h.size
    best, best_val = None, np.inf
    for k in range(0, min(n, m) + 1):
        for rows in itertools.combinations(range(m), k):
            gw = G[list(rows)]
            if k and np.linalg.matrix_rank(gw) < k:
                continue
            kkt = np.block([[H, gw.T], [gw, np.zeros((k, k))]]) if k else H
            rhs = np.concatenate([-g, h[list(rows)]]) if k else -g
            sol = np.linalg.solve(kkt, rhs)
            x = sol[:n]
            if np.any(G @ x - h > 1e-9):
                continue
            val = 0.5 * x @ H @ x + g @ x
            if val < best_val:
                best, best_val = x, val
    return best, best_val


def test_general_rows_against_enumeration():
    rng = np.random.default_rng(11)
    for _ in range(150):
        n = int(rng.integers(1, 5))
        H = random_spd(rng, n, cond=50.0)
        g = rng.normal(0, 3, n)
        lb, ub = -np.ones(n) * 2, np.ones(n) * 2
        m = int(rng.integers(1, 4))
        A = rng.normal(0, 1, (m, n))
        b = rng.uniform(0.1, 1.5, m)  # origin strictly feasible
        qp = QpProblem(H, g, lb, ub, A, b)
        res = solve_qp(qp, u0=np.zeros(n))
        G, h = qp.stacked()
        ref, ref_val = enumerate_active_sets(H, g, G, h)
        assert res.ok
        assert qp.objective(res.u) == pytest.approx(ref_val, abs=1e-9)
        np.testing.assert_allclose(res.u, ref, atol=1e-7)
        assert qp.max_violation(res.u) < 1e-9
        assert res.kkt_residual < 1e-8


def test_general_rows_phase_one_start():
    # infeasible warm start: the LP phase finds a feasible point first
    H, g = np.eye(2), np.array([-4.0, -4.0])
    qp = QpProblem(H, g, np.zeros(2), 3 * np.ones(2), np.array([[1.0, 1.0]]), np.array([2.0]))
    res = solve_qp(qp, u0=np.array([3.0, 3.0]))
    assert res.ok
    np.testing.assert_allclose(res.u, [1.0, 1.0], atol=1e-12)


def test_general_rows_infeasible():
    qp = QpProblem(np.eye(1), np.zeros(1), np.zeros(1), np.ones(1), np.array([[1.0]]), np.array([-1.0]))
    assert solve_qp(qp).status == INFEASIBLE


def test_redundant_rows_match_box_solution():
    rng = np.random.default_rng(3)
    for _ in range(50):
        qp = random_box_qp(rng, 6)
        loose = QpProblem(qp.H, qp.g, qp.lb, qp.ub, np.ones((1, 6)), np.array([1e6]))
        u0 = np.clip(np.zeros(6), qp.lb, qp.ub)
        np.testing.assert_allclose(solve_qp(loose, u0=u0).u, solve_qp(qp).u, atol=1e-10)
