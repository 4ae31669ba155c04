import numpy as np
import pandas as pd
import pytest
import scipy.sparse as sp

from ContractPricing.common import ContractViolation
from ContractPricing.nlpcore import INFEASIBLE, NlpOptions, NlpProblem, SOLVED, kkt_residual, multistart_solve, \
    perturbed_starts, poly_problem, solve
from ContractPricing.poly import Poly2


def _square(n=1):
    """sum x_j^2"""
    return Poly2(1, n, None, None, (np.zeros(n), np.arange(n), np.arange(n), np.ones(n)))


def _bounded_below():
    """min x^2 s.t. x - 1 >= 0"""
    ineq = Poly2(1, 1, [-1.], ([0], [0], [1.]))
    return poly_problem(_square(), None, ineq, None, None, label='x>=1')


def _double_well():
    """min (x^2 - 1)^2, minima at +-1"""
    return NlpProblem(
        n=1, objective=lambda x: float((x[0] ** 2 - 1.) ** 2),
        gradient=lambda x: np.array([4. * x[0] * (x[0] ** 2 - 1.)]),
        lb=None, ub=None,
        hessian=lambda x, obj_factor, y_eq, y_in: sp.csr_matrix([[obj_factor * (12. * x[0] ** 2 - 4.)]]),
        label='double well')


def test_active_inequality(nlp_options):
    sol = solve(_bounded_below(), nlp_options)
    assert sol.status == SOLVED
    assert sol.x[0] == pytest.approx(1., abs=1e-6)
    assert sol.mu_ineq[0] == pytest.approx(2., abs=1e-5)
    assert max(sol.kkt) <= nlp_options.tol


def test_equality_constrained_quadratic(nlp_options):
    # min x0^2 + x1^2 s.t. x0 + x1 = 2
    eq = Poly2(1, 2, [-2.], ([0, 0], [0, 1], [1., 1.]))
    sol = solve(poly_problem(_square(2), eq, None, None, None), nlp_options)
    assert sol.solved
    assert sol.x == pytest.approx([1., 1.], abs=1e-8)
    assert sol.lambda_eq[0] == pytest.approx(2., abs=1e-7)
    assert sol.iters <= 3


def test_quasi_newton_mode(nlp_options):
    eq = Poly2(1, 2, [-2.], ([0, 0], [0, 1], [1., 1.]))
    options = NlpOptions(tol=1e-8, hessian_mode='quasi-newton')
    sol = solve(poly_problem(_square(2), eq, None, None, None), options)
    assert sol.solved
    assert sol.x == pytest.approx([1., 1.], abs=1e-6)


def test_box_bounds_and_multipliers(nlp_options):
    # min (x - 3)^2 on [0, 2]: upper bound active with z_U = 2
    obj = Poly2(1, 1, [9.], ([0], [0], [-6.]), ([0], [0], [0], [1.]))
    sol = solve(poly_problem(obj, None, None, np.array([0.]), np.array([2.])), nlp_options)
    assert sol.solved
    assert sol.x[0] == pytest.approx(2., abs=1e-6)
    assert sol.z_bounds[0] == pytest.approx(-2., abs=1e-5)


def _linear(A, b):
    """A x - b as a Poly2 system"""
    A = np.asarray(A, dtype=float)
    r, c = np.nonzero(A)
    return Poly2(A.shape[0], A.shape[1], -np.asarray(b, dtype=float), (r, c, A[r, c]))


def test_least_norm_solution():
    rng = np.random.default_rng(7)
    A, b = rng.normal(size=(3, 6)), rng.normal(size=3)
    sol = solve(poly_problem(_square(6), _linear(A, b), None, None, None), NlpOptions(tol=1e-10))
    assert sol.solved
    assert sol.x == pytest.approx(A.T @ np.linalg.solve(A @ A.T, b), abs=1e-8)


def test_contradictory_equalities_are_infeasible():
    # x0 + x1 = 1 and x0 + x1 = 3
    problem = poly_problem(_square(2), _linear([[1., 1.], [1., 1.]], [1., 3.]), None, None, None)
    sol = solve(problem, NlpOptions(tol=1e-8, max_iter=300))
    assert sol.status == INFEASIBLE
    assert sol.kkt[1] >= 0.5


def test_repeated_equalities_still_solve():
    # a rank-deficient Jacobian needs the constraint regularization
    problem = poly_problem(_square(2), _linear([[1., 1.], [1., 1.]], [2., 2.]), None, None, None)
    sol = solve(problem, NlpOptions(tol=1e-8, max_iter=300))
    assert sol.solved
    assert sol.x == pytest.approx([1., 1.], abs=1e-7)


def test_degenerate_bound_at_the_minimizer():
    # min (x - 1)^2 on x <= 1: the bound is active with a zero multiplier
    obj = Poly2(1, 1, [1.], ([0], [0], [-2.]), ([0], [0], [0], [1.]))
    sol = solve(poly_problem(obj, None, None, np.array([-np.inf]), np.array([1.])), NlpOptions(tol=1e-8))
    assert sol.solved
    assert sol.x[0] == pytest.approx(1., abs=1e-4)
    assert abs(sol.z_bounds[0]) <= 1e-4


def test_convex_quadratic_from_five_starts():
    rng = np.random.default_rng(11)
    M = rng.normal(size=(4, 4))
    Q, c = M.T @ M + np.eye(4), rng.normal(size=4)
    i, j = np.meshgrid(np.arange(4), np.arange(4), indexing='ij')
    obj = Poly2(1, 4, None, (np.zeros(4), np.arange(4), c),
                (np.zeros(16), i.ravel(), j.ravel(), 0.5 * Q.ravel()))
    options = NlpOptions(tol=1e-10, multistart=5, seed=2, perturbation=0.5)
    result = multistart_solve(poly_problem(obj, None, None, None, None, x0=np.ones(4)), options)
    assert len(result.attempts) == 5
    expected = np.linalg.solve(Q, -c)
    for a in result.attempts:
        assert a.solved
        assert a.x == pytest.approx(expected, abs=1e-8)


def test_infeasible_problem_is_not_reported_solved():
    # x - 2 >= 0 with x <= 1
    ineq = Poly2(1, 1, [-2.], ([0], [0], [1.]))
    problem = poly_problem(_square(), None, ineq, np.array([-np.inf]), np.array([1.]))
    sol = solve(problem, NlpOptions(tol=1e-8, max_iter=200))
    assert sol.status != SOLVED
    assert sol.kkt[1] >= 0.99 or not np.isfinite(sol.kkt[1])


@pytest.mark.parametrize('start, root', [(2., 1.), (-2., -1.)])
def test_nonconvex_objective_from_two_sides(nlp_options, start, root):
    sol = solve(_double_well(), nlp_options, start=np.array([start]))
    assert sol.solved
    assert sol.x[0] == pytest.approx(root, abs=1e-6)
    assert sol.objective == pytest.approx(0., abs=1e-10)


def test_runs_are_deterministic(nlp_options):
    a = solve(_bounded_below(), nlp_options)
    b = solve(_bounded_below(), nlp_options)
    assert np.array_equal(a.x, b.x)
    assert a.iters == b.iters


def test_trace_is_written(tmp_path):
    path = tmp_path / 'trace.csv'
    solve(_bounded_below(), NlpOptions(trace_path=str(path)))
    trace = pd.read_csv(path)
    assert {'iter', 'objective', 'barrier', 'stationarity', 'feasibility', 'complementarity'} <= set(trace.columns)
    assert trace['status'].dropna().iloc[-1] == SOLVED


def test_multistart_keeps_every_attempt(tmp_path):
    options = NlpOptions(tol=1e-8, trace_path=str(tmp_path / 'trace.csv'))
    result = multistart_solve(_double_well(), options, starts=[np.array([2.]), np.array([-2.])])
    assert [a.start_id for a in result.attempts] == [0, 1]
    assert all(a.solved for a in result.attempts)
    assert abs(result.best.x[0]) == pytest.approx(1., abs=1e-6)
    assert (tmp_path / 'trace_start0.csv').exists() and (tmp_path / 'trace_start1.csv').exists()


def test_perturbed_starts_are_seeded():
    problem = _bounded_below()
    a = perturbed_starts(problem, NlpOptions(multistart=4, seed=3), base=np.array([1.5]))
    b = perturbed_starts(problem, NlpOptions(multistart=4, seed=3), base=np.array([1.5]))
    assert len(a) == 4
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert a[0][0] == 1.5


def test_kkt_residual_at_a_known_point():
    problem = _bounded_below()
    assert kkt_residual(problem, [1.], [], [2.], [0.]) == pytest.approx((0., 0., 0.))
    stat, feas, comp = kkt_residual(problem, [0.5], [], [0.], [0.])
    assert stat == pytest.approx(1.)
    assert feas == pytest.approx(0.5)


def test_problem_contract_violations():
    with pytest.raises(ContractViolation):
        poly_problem(_square(), None, None, np.array([1.]), np.array([0.]))
    with pytest.raises(ContractViolation):
        solve(poly_problem(_square(), None, None, np.array([1.]), np.array([1.])))
    with pytest.raises(ContractViolation):
        NlpProblem(n=1, objective=lambda x: 0., gradient=lambda x: np.zeros(1), lb=None, ub=None, m_eq=1)
