"""Primal-dual interior-point solver for smooth nonlinear programs.

    min f(x)  s.t.  c_E(x) = 0,  c_I(x) >= 0,  lb <= x <= ub

Inequalities receive slacks (c_I(x) - s = 0, s >= 0).  Each iteration solves
the primal-dual Newton system in augmented form with an inertia-corrected
symmetric indefinite factorization of the equilibrated matrix, keeps bounded
quantities strictly inside their bounds by a fraction-to-boundary rule and
globalizes with Armijo backtracking on an l1 exact-penalty barrier merit.  When
backtracking fails, the full primal-dual step is still taken if it reduces the
barrier-problem error; a run that stalls with all residuals below
``acceptable_tol`` ends as solved.  The barrier parameter follows the monotone
Fiacco-McCormick schedule.

Multiplier conventions: L = f - y_E^T c_E - y_I^T c_I - z_L^T (x - lb) - z_U^T (ub - x),
with y_I, z_L, z_U >= 0 at a KKT point.
"""
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence

import numpy as np
import pandas as pd
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from ContractPricing.common import get_logger, ContractViolation, rng_with_seed
from ContractPricing.metrics import get_writer
from ContractPricing.poly import Poly2

logger = get_logger('ContractPricing.nlpcore')

SOLVED, MAX_ITER, INFEASIBLE, NUMERICAL_FAILURE = 'solved', 'max_iter', 'infeasible', 'numerical_failure'
EPS = np.finfo(float).eps


@dataclass
class NlpProblem:
    n: int
    objective: Callable
    gradient: Callable
    lb: np.ndarray
    ub: np.ndarray
    m_eq: int = 0
    eq: Optional[Callable] = None
    eq_jac: Optional[Callable] = None
    m_in: int = 0
    ineq: Optional[Callable] = None
    ineq_jac: Optional[Callable] = None
    # (x, obj_factor, y_eq, y_in) -> obj_factor * Hess f - sum y_eq Hess c_E - sum y_in Hess c_I
    hessian: Optional[Callable] = None
    x0: Optional[np.ndarray] = None
    names: Optional[List[str]] = None
    eq_names: Optional[List[str]] = None
    ineq_names: Optional[List[str]] = None
    label: str = ''

    def __post_init__(self):
        self.lb = np.full(self.n, -np.inf) if self.lb is None else np.asarray(self.lb, dtype=float)
        self.ub = np.full(self.n, np.inf) if self.ub is None else np.asarray(self.ub, dtype=float)
        if self.lb.shape != (self.n,) or self.ub.shape != (self.n,):
            raise ContractViolation(f'bounds must have length {self.n}')
        if np.any(self.lb > self.ub):
            raise ContractViolation('lower bound above upper bound for ' +
                                    ', '.join(self.var_name(j) for j in np.flatnonzero(self.lb > self.ub)[:5]))
        if self.m_eq and (self.eq is None or self.eq_jac is None):
            raise ContractViolation('equality evaluator or Jacobian missing')
        if self.m_in and (self.ineq is None or self.ineq_jac is None):
            raise ContractViolation('inequality evaluator or Jacobian missing')
        if self.x0 is not None:
            self.x0 = np.asarray(self.x0, dtype=float)
            if self.x0.shape != (self.n,):
                raise ContractViolation(f'start must have length {self.n}')

    def var_name(self, j):
        return self.names[j] if self.names else f'x[{j}]'

    def eq_name(self, i):
        return self.eq_names[i] if self.eq_names else f'eq[{i}]'

    def ineq_name(self, i):
        return self.ineq_names[i] if self.ineq_names else f'ineq[{i}]'

    def eval_eq(self, x):
        return np.asarray(self.eq(x), dtype=float) if self.m_eq else np.zeros(0)

    def eval_ineq(self, x):
        return np.asarray(self.ineq(x), dtype=float) if self.m_in else np.zeros(0)

    def jac_eq(self, x):
        return sp.csr_matrix(self.eq_jac(x)) if self.m_eq else sp.csr_matrix((0, self.n))

    def jac_ineq(self, x):
        return sp.csr_matrix(self.ineq_jac(x)) if self.m_in else sp.csr_matrix((0, self.n))


@dataclass
class NlpOptions:
    tol: float = 1e-8
    max_iter: int = 500
    mu0: float = 0.1
    multistart: int = 1
    seed: int = 0
    hessian_mode: str = 'exact'  # exact | quasi-newton
    trace_path: Optional[str] = None
    writer_dir: Optional[str] = None
    verbose: bool = False
    dense_limit: int = 2000
    acceptable_tol: float = 1e-6
    perturbation: float = 0.1
    workers: Optional[int] = None
    bound_push: float = 1e-2
    mu_target: Optional[float] = None

    def __post_init__(self):
        assert self.tol > 0, 'tol must be positive'
        assert self.max_iter >= 1, 'max_iter must be at least 1'
        assert self.multistart >= 1, 'multistart must be at least 1'
        assert self.hessian_mode in ('exact', 'quasi-newton'), self.hessian_mode


@dataclass
class NlpSolution:
    x: np.ndarray
    lambda_eq: np.ndarray
    mu_ineq: np.ndarray
    z_lower: np.ndarray
    z_upper: np.ndarray
    status: str
    kkt: tuple
    iters: int
    wall_seconds: float
    objective: float = float('nan')
    start_id: int = 0
    message: str = ''

    @property
    def z_bounds(self):
        return self.z_lower - self.z_upper

    @property
    def solved(self):
        return self.status == SOLVED

    @property
    def worst_residual(self):
        return float(max(self.kkt)) if self.kkt else float('inf')


@dataclass
class MultistartResult:
    best: NlpSolution
    attempts: List[NlpSolution] = field(default_factory=list)


def poly_problem(objective: Poly2, eq: Optional[Poly2], ineq: Optional[Poly2], lb, ub, x0=None, names=None,
                 eq_names=None, ineq_names=None, label=''):
    """``NlpProblem`` whose functions are ``Poly2`` systems (exact constant-pattern derivatives)."""
    assert objective.m == 1
    n = objective.n
    eq = eq if eq is not None and eq.m else None
    ineq = ineq if ineq is not None and ineq.m else None
    one = np.ones(1)

    def hessian(x, obj_factor, y_eq, y_in):
        h = objective.hessian(obj_factor * one)
        if eq is not None:
            h = h - eq.hessian(y_eq)
        if ineq is not None:
            h = h - ineq.hessian(y_in)
        return h

    return NlpProblem(
        n=n, objective=lambda x: float(objective.evaluate(x)[0]),
        gradient=lambda x: np.asarray(objective.jacobian(x).todense()).reshape(-1),
        lb=lb, ub=ub,
        m_eq=eq.m if eq is not None else 0, eq=eq.evaluate if eq is not None else None,
        eq_jac=eq.jacobian if eq is not None else None,
        m_in=ineq.m if ineq is not None else 0, ineq=ineq.evaluate if ineq is not None else None,
        ineq_jac=ineq.jacobian if ineq is not None else None,
        hessian=hessian, x0=x0, names=names, eq_names=eq_names, ineq_names=ineq_names, label=label)


def _inf_norm(v):
    return float(np.max(np.abs(v))) if np.size(v) else 0.


def _kkt_norms(problem, x, g, Je, Ji, ce, ci, y_eq, y_in, z):
    stat = g - Je.T @ y_eq - Ji.T @ y_in - z
    zl, zu = np.maximum(z, 0.), np.maximum(-z, 0.)
    has_l, has_u = np.isfinite(problem.lb), np.isfinite(problem.ub)
    feas = max(_inf_norm(ce), _inf_norm(np.minimum(ci, 0.)),
               _inf_norm(np.maximum(problem.lb[has_l] - x[has_l], 0.)),
               _inf_norm(np.maximum(x[has_u] - problem.ub[has_u], 0.)))
    comp = max(_inf_norm(y_in * ci), _inf_norm(np.minimum(y_in, 0.)),
               _inf_norm(zl[has_l] * (x[has_l] - problem.lb[has_l])),
               _inf_norm(zu[has_u] * (problem.ub[has_u] - x[has_u])),
               _inf_norm(zl[~has_l]), _inf_norm(zu[~has_u]))
    return _inf_norm(stat), feas, comp


def kkt_residual(problem: NlpProblem, x, lambda_eq, mu_ineq, z_bounds):
    """Infinity norms (stationarity, feasibility, complementarity) of the KKT system at a primal-dual point.

    ``z_bounds`` is the signed bound multiplier z_L - z_U.
    """
    x = np.asarray(x, dtype=float)
    lambda_eq = np.asarray(lambda_eq, dtype=float).reshape(problem.m_eq)
    mu_ineq = np.asarray(mu_ineq, dtype=float).reshape(problem.m_in)
    z = np.asarray(z_bounds, dtype=float).reshape(problem.n)
    g = np.asarray(problem.gradient(x), dtype=float)
    return _kkt_norms(problem, x, g, problem.jac_eq(x), problem.jac_ineq(x), problem.eval_eq(x),
                      problem.eval_ineq(x), lambda_eq, mu_ineq, z)


class _EvalError(Exception):
    pass


def _ruiz(A, iters=10):
    """Symmetric equilibration of ``|K|``: returns ``d`` with max row entry of diag(d) |K| diag(d) close to one.

    Congruence with a positive diagonal keeps the inertia of K.
    """
    d = np.ones(A.shape[0])
    for _ in range(iters):
        if sp.issparse(A):
            big = np.asarray((sp.diags(d) @ A @ sp.diags(d)).max(axis=1).todense()).ravel()
        else:
            big = np.max(d[:, None] * A * d[None, :], axis=1)
        r = np.sqrt(np.where(big > 0., big, 1.))
        d = d / r
        if np.max(np.abs(r - 1.)) <= 1e-2:
            break
    return d


class KktFactorization:
    """Factor-and-solve of the augmented system with inertia correction.

    The matrix is equilibrated first.  Small systems go through a dense Bunch-Kaufman
    LDL^T whose block diagonal gives the inertia exactly; larger ones through sparse LU
    plus a curvature test on the computed step.  Every solve is refined against the
    unscaled matrix and rejected when the residual stays large.
    """
    pivot_tol = 1e-13
    delta_c_max = 1e-4

    def __init__(self, n_primal, n_dual, dense_limit):
        self.n, self.m = n_primal, n_dual
        self.dense = n_primal + n_dual <= dense_limit
        self.delta_w_last = 0.
        self.delta_w = 0.
        self.delta_c = 0.

    def _assemble(self, W, J, sigma, dw, dc):
        top = W + sp.diags(sigma + dw)
        if not self.m:
            return sp.csc_matrix(top)
        return sp.bmat([[top, J.T], [J, -dc * sp.eye(self.m)]], format='csc')

    @staticmethod
    def _inertia(d, tiny):
        pos = neg = zero = 0
        i, n = 0, d.shape[0]
        while i < n:
            if i + 1 < n and d[i + 1, i] != 0.:
                a, b, c = d[i, i], d[i + 1, i], d[i + 1, i + 1]
                mid, rad = 0.5 * (a + c), np.hypot(0.5 * (a - c), b)
                eig = (mid - rad, mid + rad)
                i += 2
            else:
                eig = (d[i, i],)
                i += 1
            for e in eig:
                if e > tiny:
                    pos += 1
                elif e < -tiny:
                    neg += 1
                else:
                    zero += 1
        return pos, neg, zero

    def _refine(self, K, rhs, solve_scaled, D):
        x = D * solve_scaled(D * rhs)
        scale = max(1., _inf_norm(rhs))
        for _ in range(3):
            r = rhs - K @ x
            if _inf_norm(r) <= 1e-12 * scale:
                break
            x = x + D * solve_scaled(D * r)
        if not np.all(np.isfinite(x)) or _inf_norm(rhs - K @ x) > 1e-6 * scale:
            return None
        return x

    def _dense_try(self, K, rhs, W, sigma, dw):
        Kd = K.toarray()
        D = _ruiz(np.abs(Kd))
        Ks = D[:, None] * Kd * D[None, :]
        lu, d, perm = sla.ldl(Ks, lower=True)
        pos, neg, zero = self._inertia(d, self.pivot_tol * max(1., float(np.max(np.abs(d)))))
        if zero:
            return None, 'singular'
        if pos != self.n or neg != self.m:
            return None, 'inertia'
        L = lu[perm]
        N = d.shape[0]
        ab = np.zeros((3, N))
        ab[1] = np.diag(d)
        if N > 1:
            ab[0, 1:] = np.diag(d, 1)
            ab[2, :-1] = np.diag(d, -1)

        def solve_scaled(b):
            y = sla.solve_triangular(L, b[perm], lower=True, unit_diagonal=True)
            y = sla.solve_banded((1, 1), ab, y)
            y = sla.solve_triangular(L.T, y, lower=False, unit_diagonal=True)
            out = np.empty_like(b)
            out[perm] = y
            return out

        sol = self._refine(Kd, rhs, solve_scaled, D)
        return (sol, 'ok') if sol is not None else (None, 'singular')

    def _sparse_try(self, K, rhs, W, sigma, dw):
        D = _ruiz(abs(K).tocsr())
        Ks = (sp.diags(D) @ K @ sp.diags(D)).tocsc()
        try:
            lu = spla.splu(Ks, permc_spec='MMD_AT_PLUS_A')
        except RuntimeError:
            return None, 'singular'
        sol = self._refine(K, rhs, lu.solve, D)
        if sol is None:
            return None, 'singular'
        dx = sol[:self.n]
        curvature = dx @ (W @ dx) + dx @ ((sigma + dw) * dx)
        if curvature < 1e-10 * (dx @ dx):
            return None, 'inertia'
        return sol, 'ok'

    def solve(self, W, J, sigma, rhs, mu):
        dw, dc = 0., 0.
        attempt = self._dense_try if self.dense else self._sparse_try
        for _ in range(80):
            K = self._assemble(W, J, sigma, dw, dc)
            sol, why = attempt(K, rhs, W, sigma, dw)
            if why == 'ok':
                if dw > 0:
                    self.delta_w_last = dw
                self.delta_w, self.delta_c = dw, dc
                return sol
            if why == 'singular' and self.m:
                if dc == 0.:
                    dc = 1e-8 * mu ** 0.25
                    continue
                dc = min(10. * dc, self.delta_c_max)
            if dw == 0.:
                dw = 1e-4 if self.delta_w_last == 0. else max(1e-20, self.delta_w_last / 3.)
            else:
                dw *= 100. if self.delta_w_last == 0. else 8.
            if dw > 1e40:
                break
        return None


class InteriorPoint:
    tau = 0.995
    kappa_eps = 10.
    kappa_mu = 0.2
    theta_mu = 1.5
    kappa_sigma = 1e10
    eta = 1e-4
    rho = 0.1
    nonmonotone = 5
    max_backtrack = 40
    acceptable_iter = 15

    def __init__(self, problem: NlpProblem, options: NlpOptions, start=None, duals=None, start_id=0):
        self.p, self.o = problem, options
        self.start, self.duals, self.start_id = start, duals, start_id
        self.n, self.me, self.mi = problem.n, problem.m_eq, problem.m_in
        self.N, self.m = self.n + self.mi, self.me + self.mi
        self.XL = np.concatenate([problem.lb, np.zeros(self.mi)])
        self.XU = np.concatenate([problem.ub, np.full(self.mi, np.inf)])
        self.has_l, self.has_u = np.isfinite(self.XL), np.isfinite(self.XU)
        self.mu_min = options.mu_target if options.mu_target is not None else options.tol / 10.
        self._patterns = {}
        self.trace = []

    # ---- evaluation helpers

    def _check_pattern(self, key, M, rows):
        if M.shape != (rows, self.n):
            raise ContractViolation(f'{key} Jacobian has shape {M.shape}, expected {(rows, self.n)}')
        M.sort_indices()
        if key not in self._patterns:
            self._patterns[key] = (M.indptr.copy(), M.indices.copy())
            return
        indptr, indices = self._patterns[key]
        if not (np.array_equal(indptr, M.indptr) and np.array_equal(indices, M.indices)):
            raise ContractViolation(f'{key} Jacobian sparsity changed between evaluations')

    def _functions(self, X):
        x, s = X[:self.n], X[self.n:]
        f = float(self.p.objective(x))
        if not np.isfinite(f):
            raise _EvalError('objective')
        ce, ci = self.p.eval_eq(x), self.p.eval_ineq(x)
        if ce.shape != (self.me,) or ci.shape != (self.mi,):
            raise ContractViolation('constraint evaluator returned the wrong number of rows')
        bad = np.flatnonzero(~np.isfinite(ce))
        if bad.size:
            raise _EvalError(self.p.eq_name(bad[0]))
        bad = np.flatnonzero(~np.isfinite(ci))
        if bad.size:
            raise _EvalError(self.p.ineq_name(bad[0]))
        return f, np.concatenate([ce, ci - s]), ce, ci

    def _derivatives(self, X, y):
        x = X[:self.n]
        g = np.asarray(self.p.gradient(x), dtype=float).reshape(-1)
        if g.shape != (self.n,):
            raise ContractViolation('gradient has the wrong length')
        bad = np.flatnonzero(~np.isfinite(g))
        if bad.size:
            raise _EvalError(f'gradient wrt {self.p.var_name(bad[0])}')
        Je, Ji = self.p.jac_eq(x), self.p.jac_ineq(x)
        self._check_pattern('equality', Je, self.me)
        self._check_pattern('inequality', Ji, self.mi)
        if self.mi:
            J = sp.bmat([[Je, None], [Ji, -sp.eye(self.mi)]], format='csr') if self.me else \
                sp.hstack([Ji, -sp.eye(self.mi)], format='csr')
        else:
            J = Je
        return g, Je, Ji, J

    def _lagrangian_hessian(self, X, y):
        x = X[:self.n]
        H = self.p.hessian(x, 1., y[:self.me], y[self.me:])
        H = sp.csr_matrix(H)
        if H.shape != (self.n, self.n):
            raise ContractViolation('Hessian has the wrong shape')
        return H

    # ---- start

    def _initial_primal(self):
        lb, ub = self.p.lb, self.p.ub
        if self.start is not None:
            x = np.asarray(self.start, dtype=float).copy()
        elif self.p.x0 is not None:
            x = self.p.x0.copy()
        else:
            x = np.zeros(self.n)
            both = np.isfinite(lb) & np.isfinite(ub)
            x[both] = 0.5 * (lb[both] + ub[both])
            only_l = np.isfinite(lb) & ~np.isfinite(ub)
            only_u = ~np.isfinite(lb) & np.isfinite(ub)
            x[only_l] = np.maximum(0., lb[only_l])
            x[only_u] = np.minimum(0., ub[only_u])
        if x.shape != (self.n,):
            raise ContractViolation(f'start must have length {self.n}')
        width = np.where(np.isfinite(ub - lb), ub - lb, np.inf)
        with np.errstate(invalid='ignore'):
            push_l = np.minimum(self.o.bound_push * np.maximum(1., np.abs(lb)), self.o.bound_push * width)
            push_u = np.minimum(self.o.bound_push * np.maximum(1., np.abs(ub)), self.o.bound_push * width)
        fl, fu = np.isfinite(lb), np.isfinite(ub)
        x[fl] = np.maximum(x[fl], lb[fl] + push_l[fl])
        x[fu] = np.minimum(x[fu], ub[fu] - push_u[fu])
        fixed = fl & fu & (width <= 0)
        if np.any(fixed):
            raise ContractViolation('fixed variables (lb == ub) are not supported: ' +
                                    ', '.join(self.p.var_name(j) for j in np.flatnonzero(fixed)[:5]))
        return x

    # ---- main loop

    def solve(self) -> NlpSolution:
        t0 = time.time()
        o = self.o
        writer = get_writer(o.writer_dir)
        x = self._initial_primal()
        try:
            ci0 = self.p.eval_ineq(x)
            s = np.maximum(ci0, o.bound_push)
            X = np.concatenate([x, s])
            f, C, ce, ci = self._functions(X)
        except _EvalError as e:
            return self._failure(x, f'non-finite value in {e} at the start point', t0, 0)

        y = np.zeros(self.m)
        zL = np.where(self.has_l, 1., 0.)
        zU = np.where(self.has_u, 1., 0.)
        if self.duals is not None:
            y_eq, mu_in, z_b = self.duals
            y[:self.me] = y_eq
            y[self.me:] = np.maximum(mu_in, 0.)
            zL[:self.n] = np.where(self.has_l[:self.n], np.maximum(z_b, 0.) + 1e-6, 0.)
            zU[:self.n] = np.where(self.has_u[:self.n], np.maximum(-z_b, 0.) + 1e-6, 0.)
            zL[self.n:] = np.maximum(mu_in, 1e-6)

        mu = o.mu0
        nu = 1.
        history = []
        kkt_fact = KktFactorization(self.N, self.m, o.dense_limit)
        stall = ls_fail = tiny_steps = acceptable = 0
        force_mu = False
        qn = None if (o.hessian_mode == 'exact' and self.p.hessian is not None) else np.eye(self.n)
        prev_grad_l = None
        status, message = MAX_ITER, ''
        kkt = (np.inf, np.inf, np.inf)
        it = 0

        for it in range(o.max_iter + 1):
            try:
                g, Je, Ji, J = self._derivatives(X, y)
            except _EvalError as e:
                status, message = NUMERICAL_FAILURE, f'non-finite value in {e}'
                break
            x, s = X[:self.n], X[self.n:]
            y_eq, y_in = y[:self.me], y[self.me:]
            kkt = _kkt_norms(self.p, x, g, Je, Ji, ce, ci, y_eq, y_in, zL[:self.n] - zU[:self.n])
            theta = _inf_norm(C)

            if qn is not None:
                grad_l = g - Je.T @ y_eq - Ji.T @ y_in
                if prev_grad_l is not None:
                    qn = self._bfgs(qn, x - prev_x, grad_l - (prev_g - prev_Je.T @ y_eq - prev_Ji.T @ y_in))
                prev_grad_l, prev_x, prev_g, prev_Je, prev_Ji = grad_l, x.copy(), g, Je, Ji

            self.trace.append(dict(iter=it, objective=f, barrier=mu, stationarity=kkt[0], feasibility=kkt[1],
                                   complementarity=kkt[2], penalty=nu, delta_w=kkt_fact.delta_w))
            for k, v in self.trace[-1].items():
                if k != 'iter':
                    writer.add_scalar(f'nlp/{k}', v, it)
            logger.debug('it=%3d f=%.8e mu=%.1e stat=%.2e feas=%.2e comp=%.2e nu=%.1e', it, f, mu, *kkt, nu)

            if max(kkt) <= o.tol and (o.mu_target is None or mu <= self.mu_min):
                status = SOLVED
                break
            acceptable = acceptable + 1 if max(kkt) <= o.acceptable_tol else 0
            if acceptable >= self.acceptable_iter:
                status, message = SOLVED, 'solved to acceptable level'
                break
            if it == o.max_iter:
                status = MAX_ITER
                break

            # barrier update
            if force_mu and mu > self.mu_min:
                mu = max(self.mu_min, self.kappa_mu * mu)
                history = []
            force_mu = False
            while mu > self.mu_min and self._barrier_error(X, g, J, C, y, zL, zU, mu) <= self.kappa_eps * mu:
                mu = max(self.mu_min, min(self.kappa_mu * mu, mu ** self.theta_mu))
                history = []

            # stationary point of the constraint violation
            if theta > max(o.tol, 1e-6) and self._violation_stationary(X, J, C, theta):
                stall += 1
                if stall >= 5:
                    status, message = INFEASIBLE, 'constraint violation converged to a nonzero stationary value'
                    break
            else:
                stall = 0
            if nu > 1e12:
                status, message = INFEASIBLE, 'penalty parameter diverged'
                break

            # Newton step
            dL = np.where(self.has_l, X - np.where(self.has_l, self.XL, 0.), 1.)
            dU = np.where(self.has_u, np.where(self.has_u, self.XU, 0.) - X, 1.)
            sigma = np.where(self.has_l, zL / dL, 0.) + np.where(self.has_u, zU / dU, 0.)
            if qn is None:
                H = self._lagrangian_hessian(X, y)
            else:
                H = sp.csr_matrix(qn)
            W = sp.block_diag([H, sp.csr_matrix((self.mi, self.mi))], format='csr') if self.mi else H
            grad_b = np.concatenate([g, np.zeros(self.mi)]) - np.where(self.has_l, mu / dL, 0.) \
                + np.where(self.has_u, mu / dU, 0.)
            rhs = -np.concatenate([grad_b - J.T @ y, C])
            sol = kkt_fact.solve(W, J, sigma, rhs, mu)
            if sol is None:
                if max(kkt) <= o.acceptable_tol:
                    status, message = SOLVED, 'solved to acceptable level'
                else:
                    status, message = NUMERICAL_FAILURE, 'KKT system could not be factorized'
                break
            dX, dy = sol[:self.N], -sol[self.N:]
            dzL = np.where(self.has_l, mu / dL - zL - sigma_part(zL, dL, self.has_l) * dX, 0.)
            dzU = np.where(self.has_u, mu / dU - zU + sigma_part(zU, dU, self.has_u) * dX, 0.)

            alpha_max = min(_max_step(dL[self.has_l], dX[self.has_l], self.tau),
                            _max_step(dU[self.has_u], -dX[self.has_u], self.tau))
            alpha_z = min(_max_step(zL[self.has_l], dzL[self.has_l], self.tau),
                          _max_step(zU[self.has_u], dzU[self.has_u], self.tau))

            c1 = float(np.sum(np.abs(C)))
            slope = float(grad_b @ dX)
            if c1 > 1e-14:
                curv = float(dX @ (W @ dX) + dX @ (sigma * dX))
                nu_trial = (slope + 0.5 * max(curv, 0.)) / ((1. - self.rho) * c1)
                if nu < nu_trial:
                    nu = nu_trial + 1.
                    history = []
            descent = min(slope - nu * c1, 0.)
            phi0 = self._merit(f, X, C, mu, nu)
            history = (history + [phi0])[-self.nonmonotone:]
            ref = max(history)
            # merit differences below this are rounding
            noise = 10. * EPS * (abs(f) + mu * self._log_mass(X) + nu * (float(np.sum(abs(J) @ np.abs(X))) + c1 + 1.))

            trial, accepted = None, False
            if _inf_norm(dX / (1. + np.abs(X))) <= 10. * EPS:
                tiny_steps += 1
                force_mu = True
                if tiny_steps >= 2 and mu <= self.mu_min:
                    status, message = (SOLVED, 'solved to acceptable level') if max(kkt) <= o.acceptable_tol \
                        else (NUMERICAL_FAILURE, 'search direction became too small')
                    break
                trial = self._trial(X, dX, alpha_max, mu, nu)
                accepted = trial is not None
            else:
                tiny_steps = 0
                alpha = alpha_max
                for _ in range(self.max_backtrack):
                    candidate = self._trial(X, dX, alpha, mu, nu)
                    if candidate is None:
                        alpha *= 0.5
                        continue
                    trial = candidate
                    if np.isfinite(candidate[5]) and candidate[5] <= ref + self.eta * alpha * descent + noise:
                        accepted = True
                        break
                    alpha *= 0.5
            if not accepted:
                err0 = self._barrier_error(X, g, J, C, y, zL, zU, mu)
                soft = self._soft_restoration(X, y, zL, zU, dX, dy, dzL, dzU, alpha_max, alpha_z, mu, nu, err0)
                if soft is not None:
                    trial = soft
                    history = []
                elif max(kkt) <= o.acceptable_tol:
                    status, message = SOLVED, 'solved to acceptable level'
                    break
                else:
                    ls_fail += 1
                    if ls_fail > 10 or trial is None:
                        status, message = NUMERICAL_FAILURE, 'line search failed repeatedly'
                        break
                    if ls_fail == 1:
                        # one unguarded full step before settling for the shortest trial
                        trial = self._trial(X, dX, alpha_max, mu, nu) or trial
            else:
                ls_fail = 0
            X, f, C, ce, ci, phit, alpha = trial
            self.trace[-1]['step'] = alpha
            history.append(phit)
            y = y + alpha * dy
            zL = zL + alpha_z * dzL
            zU = zU + alpha_z * dzU
            zL, zU = self._safeguard(X, zL, zU, mu)

        if self.trace:
            self.trace[-1]['status'] = status
        x = X[:self.n]
        sol = NlpSolution(x=x.copy(), lambda_eq=y[:self.me].copy(),
                          mu_ineq=np.maximum(y[self.me:], 0.) if status == SOLVED else y[self.me:].copy(),
                          z_lower=zL[:self.n].copy(), z_upper=zU[:self.n].copy(), status=status,
                          kkt=tuple(float(k) for k in kkt), iters=it, wall_seconds=time.time() - t0,
                          objective=float(self.p.objective(x)), start_id=self.start_id, message=message)
        if o.trace_path:
            pd.DataFrame(self.trace).to_csv(o.trace_path, index=False)
        writer.close()
        log = logger.info if o.verbose else logger.debug
        log('%s: %s after %d iterations (%.2fs) stat=%.1e feas=%.1e comp=%.1e %s', self.p.label or 'nlp', status,
            it, sol.wall_seconds, *sol.kkt, message)
        return sol

    def _failure(self, x, message, t0, it):
        nan = np.full(3, np.nan)
        return NlpSolution(x=x, lambda_eq=np.zeros(self.me), mu_ineq=np.zeros(self.mi), z_lower=np.zeros(self.n),
                           z_upper=np.zeros(self.n), status=NUMERICAL_FAILURE, kkt=tuple(nan), iters=it,
                           wall_seconds=time.time() - t0, start_id=self.start_id, message=message)

    def _trial(self, X, dX, alpha, mu, nu):
        Xt = X + alpha * dX
        try:
            ft, Ct, cet, cit = self._functions(Xt)
        except _EvalError:
            return None
        return Xt, ft, Ct, cet, cit, self._merit(ft, Xt, Ct, mu, nu), alpha

    def _soft_restoration(self, X, y, zL, zU, dX, dy, dzL, dzU, alpha_max, alpha_z, mu, nu, err0):
        """Full primal-dual step, taken when it reduces the barrier-problem error."""
        trial = self._trial(X, dX, alpha_max, mu, nu)
        if trial is None or not np.isfinite(trial[5]):
            return None
        Xt, ft, Ct = trial[:3]
        yt = y + alpha_max * dy
        try:
            gt, _, _, Jt = self._derivatives(Xt, yt)
        except _EvalError:
            return None
        err = self._barrier_error(Xt, gt, Jt, Ct, yt, zL + alpha_z * dzL, zU + alpha_z * dzU, mu)
        return trial if err <= (1. - 1e-4) * err0 else None

    def _log_mass(self, X):
        dL = X[self.has_l] - self.XL[self.has_l]
        dU = self.XU[self.has_u] - X[self.has_u]
        with np.errstate(divide='ignore', invalid='ignore'):
            return float(np.sum(np.abs(np.log(dL))) + np.sum(np.abs(np.log(dU))))

    def _merit(self, f, X, C, mu, nu):
        dL = X[self.has_l] - self.XL[self.has_l]
        dU = self.XU[self.has_u] - X[self.has_u]
        if np.any(dL <= 0) or np.any(dU <= 0):
            return np.inf
        return f - mu * (np.sum(np.log(dL)) + np.sum(np.log(dU))) + nu * float(np.sum(np.abs(C)))

    def _barrier_error(self, X, g, J, C, y, zL, zU, mu):
        dL = X[self.has_l] - self.XL[self.has_l]
        dU = self.XU[self.has_u] - X[self.has_u]
        rd = np.concatenate([g, np.zeros(self.mi)]) - J.T @ y - zL + zU
        comp = max(_inf_norm(zL[self.has_l] * dL - mu), _inf_norm(zU[self.has_u] * dU - mu))
        s_max = 100.
        nz = max(1, self.has_l.sum() + self.has_u.sum())
        s_d = max(s_max, (np.sum(np.abs(y)) + np.sum(zL) + np.sum(zU)) / max(1, self.m + nz)) / s_max
        s_c = max(s_max, (np.sum(zL) + np.sum(zU)) / nz) / s_max
        return max(_inf_norm(rd) / s_d, _inf_norm(C), comp / s_c)

    def _violation_stationary(self, X, J, C, theta):
        grad = J.T @ C
        near_l = self.has_l & (X - np.where(self.has_l, self.XL, 0.) <= 1e-3 * np.maximum(1., np.abs(X)))
        near_u = self.has_u & (np.where(self.has_u, self.XU, 0.) - X <= 1e-3 * np.maximum(1., np.abs(X)))
        grad[near_l & (grad > 0)] = 0.
        grad[near_u & (grad < 0)] = 0.
        return _inf_norm(grad) / max(1., theta) <= 1e-6

    def _safeguard(self, X, zL, zU, mu):
        k = self.kappa_sigma
        dL = X - np.where(self.has_l, self.XL, 0.)
        dU = np.where(self.has_u, self.XU, 0.) - X
        with np.errstate(divide='ignore', invalid='ignore'):
            zL = np.where(self.has_l, np.clip(zL, mu / (k * dL), k * mu / dL), 0.)
            zU = np.where(self.has_u, np.clip(zU, mu / (k * dU), k * mu / dU), 0.)
        return zL, zU

    @staticmethod
    def _bfgs(B, s, yv):
        # Powell-damped update keeps B positive definite
        if s @ s < 1e-20:
            return B
        Bs = B @ s
        sBs = s @ Bs
        sy = s @ yv
        theta = 1. if sy >= 0.2 * sBs else 0.8 * sBs / (sBs - sy)
        r = theta * yv + (1. - theta) * Bs
        return B - np.outer(Bs, Bs) / sBs + np.outer(r, r) / (s @ r)


def sigma_part(z, d, mask):
    return np.where(mask, z / d, 0.)


def _max_step(v, dv, tau):
    neg = dv < 0
    if not np.any(neg):
        return 1.
    return float(min(1., np.min(-tau * v[neg] / dv[neg])))


def solve(problem: NlpProblem, options: NlpOptions = None, start=None, duals=None, start_id=0) -> NlpSolution:
    """One interior-point run from ``start`` (or the problem's start).

    ``duals`` = (y_eq, mu_ineq, z_bounds) warm-starts the multipliers.
    """
    options = options or NlpOptions()
    return InteriorPoint(problem, options, start, duals, start_id).solve()


def perturbed_starts(problem: NlpProblem, options: NlpOptions, base=None):
    """``options.multistart`` primal starts: the base point, then seeded +/- perturbation, clipped to the box."""
    if base is None:
        base = problem.x0 if problem.x0 is not None else InteriorPoint(problem, options)._initial_primal()
    starts = [np.asarray(base, dtype=float)]
    for k in range(1, options.multistart):
        rng = rng_with_seed(options.seed, k)
        u = rng.uniform(-options.perturbation, options.perturbation, size=problem.n)
        x = starts[0] * (1. + u) + u * (starts[0] == 0.)
        starts.append(np.clip(x, problem.lb, problem.ub))
    return starts


def _rank(sol: NlpSolution):
    if sol.solved:
        return 0, sol.objective, sol.start_id
    return 1, sol.worst_residual if np.isfinite(sol.worst_residual) else np.inf, sol.start_id


def multistart_solve(problem: NlpProblem, options: NlpOptions = None, starts: Sequence = None) -> MultistartResult:
    """Independent solves from several starts; best solved attempt by objective, else best residual."""
    options = options or NlpOptions()
    starts = list(starts) if starts is not None else perturbed_starts(problem, options)
    if len(starts) == 1:
        sol = solve(problem, options, starts[0], start_id=0)
        return MultistartResult(sol, [sol])

    def attempt(k):
        opts = options
        if options.trace_path:
            root, ext = os.path.splitext(options.trace_path)
            opts = replace(options, trace_path=f'{root}_start{k}{ext or ".csv"}')
        return solve(problem, opts, starts[k], start_id=k)

    workers = options.workers or min(len(starts), os.cpu_count() or 1)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        attempts = list(pool.map(attempt, range(len(starts))))
    best = min(attempts, key=_rank)
    if not best.solved:
        logger.warning('%s: none of %d starts solved; best residual %.2e', problem.label or 'nlp', len(attempts),
                       best.worst_residual)
    return MultistartResult(best, attempts)
