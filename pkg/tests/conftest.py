"""Shared test helpers: random problem generators and independent oracles."""
from __future__ import annotations

import itertools

import numpy as np
import pytest

from dflsched import qp


def random_strictly_convex_qp(rng: np.random.Generator, n: int, m_eq: int,
                              m_in: int) -> qp.QpProblem:
    """Feasible-by-construction instance with Q = M'M + I."""
    M = rng.normal(size=(n, n))
    Q = M.T @ M + np.eye(n)
    q = rng.normal(size=n)
    u0 = rng.normal(size=n)
    A = rng.normal(size=(m_eq, n)) if m_eq else None
    b = A @ u0 if m_eq else None
    G = rng.normal(size=(m_in, n)) if m_in else None
    h = G @ u0 + rng.uniform(0.01, 0.6, size=m_in) if m_in else None
    return qp.QpProblem(n, Q, q, A, b, G, h)


def complementarity_margin(problem: qp.QpProblem, solution: qp.QpSolution) -> float:
    """Strict complementarity margin: min over inequalities of
    max(dual, slack); small values mean a constraint is on the fence."""
    if problem.num_in == 0:
        return np.inf
    slack = problem.h - problem.G @ solution.primal
    return float(np.minimum.reduce(np.maximum(solution.dual_in, slack)))


def enumerate_active_sets(problem: qp.QpProblem, tol: float = 1e-9):
    """Brute-force oracle: solve the equality-constrained KKT system for
    every candidate active set, keep the feasible-and-dual-feasible optimum.
    Only viable for small m_in."""
    n, m_eq, m_in = problem.num_vars, problem.num_eq, problem.num_in
    Q = problem.Q.toarray()
    A = problem.A.toarray()
    G = problem.G.toarray()
    best = None
    for r in range(m_in + 1):
        for subset in itertools.combinations(range(m_in), r):
            S = list(subset)
            C = np.vstack([A, G[S]]) if (m_eq or S) else np.zeros((0, n))
            d = np.concatenate([problem.b, problem.h[S]])
            k = C.shape[0]
            kkt = np.block([[Q, C.T], [C, np.zeros((k, k))]])
            rhs = np.concatenate([-problem.q, d])
            try:
                sol = np.linalg.solve(kkt, rhs)
            except np.linalg.LinAlgError:
                continue
            u, mults = sol[:n], sol[n + m_eq:]
            if m_in and np.any(G @ u - problem.h > tol):
                continue
            if np.any(mults < -tol):
                continue
            obj = problem.objective(u)
            if best is None or obj < best[1] - 1e-12:
                mu = np.zeros(m_in)
                mu[S] = mults
                best = (u, obj, sol[n:n + m_eq], mu)
    return best


def fd_gradient(fn, x0: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function."""
    x0 = np.asarray(x0, dtype=float)
    grad = np.zeros_like(x0)
    for i in range(x0.size):
        xp = x0.copy()
        xm = x0.copy()
        xp.flat[i] += eps
        xm.flat[i] -= eps
        grad.flat[i] = (fn(xp) - fn(xm)) / (2 * eps)
    return grad


def rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), floor)
    return float(np.abs(a - b).max(initial=0.0) / scale)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
