import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gridmm import grid, nlp, opf
from gridmm.nlp import NlpProblem


def quad1():
    return NlpProblem(1, [0.0], [10.0], [1.0], f=lambda x: (x[0] - 3.0) ** 2,
                      grad=lambda x: np.array([2.0 * (x[0] - 3.0)]),
                      hess=lambda x, ye, yi: np.array([[2.0]]))


def circle():
    return NlpProblem(2, [-2.0, -2.0], [2.0, 2.0], [0.5, 0.2], f=lambda x: x[0] + x[1],
                      grad=lambda x: np.ones(2), c_eq=lambda x: np.array([x @ x - 2.0]),
                      jac_eq=lambda x: 2.0 * x[None, :], m_eq=1)


def test_unconstrained_quadratic():
    s = nlp.solve(quad1())
    assert s.converged
    assert s.x[0] == pytest.approx(3.0, abs=1e-6)
    assert s.objective == pytest.approx(0.0, abs=1e-10)


def test_circle_equality():
    s = nlp.solve(circle())
    assert s.converged
    np.testing.assert_allclose(s.x, [-1.0, -1.0], atol=1e-6)
    assert s.objective == pytest.approx(-2.0, abs=1e-6)


def test_nan_callback_reports_failure():
    P = NlpProblem(1, [0.0], [1.0], [0.5], f=lambda x: float("nan"), grad=lambda x: np.array([np.nan]))
    s = nlp.solve(P)
    assert s.status == nlp.FAILURE


def test_bad_bounds_rejected():
    with pytest.raises(ValueError):
        NlpProblem(1, [1.0], [0.0], [0.5], f=lambda x: 0.0, grad=lambda x: np.zeros(1))


def test_centralized_against_penalty_oracle(case6):
    P = opf.centralized_model(case6).problem()
    s = nlp.solve(P)
    ref = nlp.solve_penalty(P, feas_tol=1e-7, opt_tol=1e-7, max_iter=500)
    assert s.converged
    assert ref.max_violation <= 1e-7
    assert s.objective == pytest.approx(ref.objective, rel=1e-4)


def test_check_kkt_at_minimizer():
    r = nlp.check_kkt(quad1(), [3.0])
    assert max(r.stationarity, r.max_violation, r.complementarity) < 1e-8


def test_check_kkt_nonstationary_feasible():
    r = nlp.check_kkt(circle(), [np.sqrt(2.0), 0.0], tol=1e-6)
    assert r.max_violation < 1e-12
    assert r.stationarity > 1e-6
    assert not r.passes(1e-6)


def test_check_kkt_on_solver_output(case6, rng):
    view = grid.partition(case6)[1]
    m = opf.RegionalModel(view)
    n = len(m.arcs)
    tg = opf.CouplingTargets(m.arcs, np.tile([0.1, 0.0, 1.0, 0.0], (n, 1)), rng.normal(size=(n, 4)))
    P = m.problem(tg, 10.0)
    s = nlp.solve(P)
    assert s.converged
    rep = nlp.check_kkt(P, s.x, multipliers=s.warm())
    assert rep.max_violation <= 1e-6
    assert rep.stationarity <= 1e-5
    assert nlp.check_kkt(P, s.x).passes(1e-5)


def test_deterministic_iterates(case14):
    P = opf.centralized_model(case14).problem()
    a, b = nlp.solve(P), nlp.solve(P)
    assert a.x.tobytes() == b.x.tobytes()
    assert a.merit_history == b.merit_history


def _random_qp(seed, n=2, m=3):
    rng = np.random.default_rng(seed)
    L = rng.normal(size=(n, n))
    Q = L @ L.T + 0.5 * np.eye(n)
    c = rng.normal(size=n) * 3
    A = rng.normal(size=(m, n))
    b = rng.uniform(0.2, 1.5, m)     # x = 0 is strictly feasible
    return Q, c, A, b


def _qp_problem(Q, c, A, b, box=5.0):
    n = len(c)
    return NlpProblem(n, -box * np.ones(n), box * np.ones(n), np.zeros(n),
                      f=lambda x: 0.5 * x @ Q @ x + c @ x, grad=lambda x: Q @ x + c,
                      c_ineq=lambda x: A @ x - b, jac_ineq=lambda x: A, m_ineq=len(b),
                      hess=lambda x, ye, yi: Q)


def _active_set_oracle(Q, c, A, b, box=5.0):
    n = len(c)
    G = np.vstack([A, np.eye(n), -np.eye(n)])
    h = np.concatenate([b, box * np.ones(n), box * np.ones(n)])
    best = None
    for k in range(n + 1):
        for act in itertools.combinations(range(len(h)), k):
            act = list(act)
            Ga = G[act]
            K = np.block([[Q, Ga.T], [Ga, np.zeros((k, k))]])
            rhs = np.concatenate([-c, h[act]])
            try:
                sol = np.linalg.solve(K, rhs)
            except np.linalg.LinAlgError:
                continue
            x, lam = sol[:n], sol[n:]
            if np.all(G @ x <= h + 1e-9) and np.all(lam >= -1e-9):
                val = 0.5 * x @ Q @ x + c @ x
                if best is None or val < best[1]:
                    best = (x, val)
    return best


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_convex_qp_matches_active_set_enumeration(seed):
    Q, c, A, b = _random_qp(seed)
    s = nlp.solve(_qp_problem(Q, c, A, b), feas_tol=1e-8, opt_tol=1e-8)
    x, _ = _active_set_oracle(Q, c, A, b)
    assert s.converged
    np.testing.assert_allclose(s.x, x, atol=1e-6)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_merit_never_increases_on_accepted_steps(seed):
    Q, c, A, b = _random_qp(seed, n=3, m=4)
    s = nlp.solve(_qp_problem(Q, c, A, b))
    assert s.merit_history
    for before, after in s.merit_history:
        assert after <= before + 1e-12 * max(1.0, abs(before))
