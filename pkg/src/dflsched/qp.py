"""Convex quadratic programs: solving and differentiating through the KKT system.

Problems have the canonical form

    min  1/2 u'Qu + q'u
    s.t. Au = b          (equality block, duals y, free sign)
         Gu <= h         (inequality block, duals mu >= 0)

``solve`` runs a Mehrotra predictor-corrector primal-dual interior-point
method; robust duals are needed downstream, which rules out active-set
methods with sloppy multiplier recovery.  ``backward`` turns a loss gradient
with respect to the primal solution into gradients with respect to every
data block (Q, q, A, b, G, h) by solving one adjoint system on the
active-set-reduced KKT Jacobian.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from enum import Enum
from typing import IO

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class QpStatus(Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    MAX_ITER = "max_iter"


class QpError(Exception):
    pass


class SingularKktError(QpError):
    """Adjoint KKT system is singular beyond the regularization floor."""


class DegenerateActiveSetWarning(UserWarning):
    """An inequality sits at the active/inactive boundary (tiny dual and
    tiny slack); it is treated as inactive for differentiation."""


# Inequalities with dual and slack both below this are degenerate: neither
# strictly active nor strictly inactive.  Treated as inactive, with a warning.
DEGENERACY_THRESHOLD = 1e-6

# Static regularization of interior-point KKT systems (quasi-definite trick).
_IPM_REG = 1e-9
# Diagonal shift applied to the adjoint KKT system when near-singular.
_ADJOINT_REG = 1e-10


def _csr(m, shape) -> sp.csr_matrix:
    if m is None:
        return sp.csr_matrix(shape)
    if sp.issparse(m):
        out = m.tocsr().astype(float)
    else:
        arr = np.asarray(m, dtype=float)
        if arr.size == 0:
            return sp.csr_matrix(shape)
        out = sp.csr_matrix(np.atleast_2d(arr))
    return out


def _vec(v) -> np.ndarray:
    if v is None:
        return np.zeros(0)
    return np.asarray(v, dtype=float).ravel()


@dataclass(frozen=True)
class QpProblem:
    """Immutable problem data. Matrices may be passed dense or sparse;
    A/b (or G/h) may be None for problems without that block."""

    num_vars: int
    Q: sp.csr_matrix
    q: np.ndarray
    A: sp.csr_matrix = None
    b: np.ndarray = None
    G: sp.csr_matrix = None
    h: np.ndarray = None

    def __post_init__(self):
        n = self.num_vars
        b, h = _vec(self.b), _vec(self.h)
        object.__setattr__(self, "Q", _csr(self.Q, (n, n)))
        object.__setattr__(self, "q", _vec(self.q))
        object.__setattr__(self, "A", _csr(self.A, (len(b), n)))
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "G", _csr(self.G, (len(h), n)))
        object.__setattr__(self, "h", h)
        if self.Q.shape != (n, n):
            raise QpError(f"Q must be {n}x{n}, got {self.Q.shape}")
        if self.q.shape != (n,):
            raise QpError(f"q must have length {n}")
        if self.A.shape != (len(b), n):
            raise QpError("equality block dimensions inconsistent")
        if self.G.shape != (len(h), n):
            raise QpError("inequality block dimensions inconsistent")

    @property
    def num_eq(self) -> int:
        return self.A.shape[0]

    @property
    def num_in(self) -> int:
        return self.G.shape[0]

    def validate(self, psd_limit: int = 200) -> None:
        """Check symmetry and positive semidefiniteness of Q.

        The dense eigenvalue check is O(n^3), so above ``psd_limit``
        variables only diagonal Q is checked exactly; non-diagonal large Q
        relies on the solver detecting indefiniteness.
        """
        if not all(np.all(np.isfinite(x)) for x in (self.q, self.b, self.h)):
            raise QpError("problem data contains non-finite values")
        scale = max(abs(self.Q).max(), 1.0) if self.Q.nnz else 1.0
        sym_gap = self.Q - self.Q.T
        if sym_gap.nnz and abs(sym_gap).max() > 1e-12 * scale:
            raise QpError("Q is not symmetric within 1e-12 relative tolerance")
        offdiag = self.Q - sp.diags(self.Q.diagonal())
        if offdiag.nnz == 0:
            if np.any(self.Q.diagonal() < -1e-10 * scale):
                raise QpError("Q has a negative diagonal entry (not PSD)")
        elif self.num_vars <= psd_limit:
            w = np.linalg.eigvalsh(self.Q.toarray())
            if w.min() < -1e-10 * max(abs(w).max(), 1.0):
                raise QpError("Q is not positive semidefinite")

    def objective(self, u: np.ndarray) -> float:
        return float(0.5 * u @ (self.Q @ u) + self.q @ u)


@dataclass(frozen=True)
class QpSolution:
    primal: np.ndarray
    dual_eq: np.ndarray
    dual_in: np.ndarray
    objective_value: float
    status: QpStatus
    kkt_residual: float
    iterations: int = 0


@dataclass
class SolutionSensitivity:
    """Gradients of a scalar loss with respect to each data block."""

    grad_Q: np.ndarray
    grad_q: np.ndarray
    grad_A: np.ndarray
    grad_b: np.ndarray
    grad_G: np.ndarray
    grad_h: np.ndarray


@dataclass(frozen=True)
class CoefficientMap:
    """Sparse Jacobian from raw parameters to QP data entries.

    Slot k names one QP coefficient: ``blocks[k]`` in {'Q','q','A','b','G',
    'h'} with ``rows``/``cols`` locating the entry (cols is -1 for vector
    blocks).  ``jacobian`` has one row per slot, one column per raw
    parameter, holding d(coefficient)/d(parameter).
    """

    blocks: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    jacobian: sp.csr_matrix

    def __post_init__(self):
        s = len(self.blocks)
        if not (len(self.rows) == len(self.cols) == s == self.jacobian.shape[0]):
            raise QpError("coefficient map slot arrays disagree in length")


def kkt_residual(problem: QpProblem, solution: QpSolution) -> float:
    """Infinity norm of the KKT residual of (primal, dual_eq, dual_in).

    Covers stationarity, equality violation, clipped inequality violation,
    dual nonnegativity violation and complementarity.
    """
    u, y, mu = solution.primal, solution.dual_eq, solution.dual_in
    stat = problem.Q @ u + problem.q
    worst = 0.0
    if problem.num_eq:
        stat = stat + problem.A.T @ y
        r = problem.A @ u - problem.b
        worst = max(worst, float(np.abs(r).max()))
    if problem.num_in:
        gap = problem.G @ u - problem.h
        stat = stat + problem.G.T @ mu
        worst = max(worst, float(np.maximum(gap, 0.0).max()))
        worst = max(worst, float(np.maximum(-mu, 0.0).max()))
        worst = max(worst, float(np.abs(mu * gap).max()))
    if stat.size:
        worst = max(worst, float(np.abs(stat).max()))
    return worst


# ---------------------------------------------------------------------------
# presolve


class _Presolve:
    """Removes variables fixed by singleton equality rows and, for equality
    blocks small enough to QR-factorize, dependent rows.  Keeps enough
    bookkeeping to reconstruct the full primal/dual solution afterwards."""

    def __init__(self, problem: QpProblem, rank_check_limit: int):
        self.orig = problem
        n, m_eq = problem.num_vars, problem.num_eq
        self.keep_var = np.ones(n, dtype=bool)
        self.keep_row = np.ones(m_eq, dtype=bool)
        self.fixed_value = np.zeros(n)
        self.fixed_order: list[tuple[int, int]] = []  # (var, row), in fix order
        self.infeasible = False

        b_scale = max(1.0, float(np.abs(problem.b).max())) if m_eq else 1.0
        if m_eq:
            A_work = problem.A.copy().tocsr()
            b_eff = problem.b.copy()
            for _ in range(20):  # sweeps; terminates when no singleton remains
                A_work.eliminate_zeros()
                counts = np.diff(A_work.indptr)
                singles = np.flatnonzero((counts == 1) & self.keep_row)
                if singles.size == 0:
                    break
                fixed_cols = []
                for i in singles:
                    j = A_work.indices[A_work.indptr[i]]
                    coef = A_work.data[A_work.indptr[i]]
                    if not self.keep_var[j]:
                        continue  # another row in this sweep fixed it first
                    val = b_eff[i] / coef
                    self.fixed_value[j] = val
                    self.keep_var[j] = False
                    self.keep_row[i] = False
                    self.fixed_order.append((j, i))
                    fixed_cols.append(j)
                if not fixed_cols:
                    break
                cols = np.array(fixed_cols)
                b_eff = b_eff - np.asarray(
                    problem.A[:, cols] @ self.fixed_value[cols]).ravel()
                b_eff[~self.keep_row] = 0.0
                zero_out = sp.diags(self.keep_var.astype(float))
                A_work = (problem.A @ zero_out).tocsr()
            # rows that lost every variable must now read 0 = 0
            A_work.eliminate_zeros()
            counts = np.diff(A_work.indptr)
            empty = np.flatnonzero((counts == 0) & self.keep_row)
            for i in empty:
                if abs(b_eff[i]) > 1e-9 * b_scale:
                    self.infeasible = True
                self.keep_row[i] = False
            self.b_eff = b_eff
        else:
            self.b_eff = np.zeros(0)

        vidx = np.flatnonzero(self.keep_var)
        ridx = np.flatnonzero(self.keep_row)
        fidx = np.flatnonzero(~self.keep_var)
        Q_rr = problem.Q[np.ix_(vidx, vidx)]
        q_red = problem.q[vidx].copy()
        if fidx.size:
            q_red += np.asarray(problem.Q[np.ix_(vidx, fidx)]
                                @ self.fixed_value[fidx]).ravel()
        A_red = problem.A[np.ix_(ridx, vidx)] if m_eq else None
        b_red = self.b_eff[ridx] if m_eq else None
        if problem.num_in:
            G_red = problem.G[:, vidx]
            h_red = problem.h.copy()
            if fidx.size:
                h_red -= np.asarray(problem.G[:, fidx] @ self.fixed_value[fidx]).ravel()
        else:
            G_red, h_red = None, None

        # dependent-row elimination (pivoted QR); the scheduler builds
        # full-rank systems by construction, so this only runs for blocks
        # small enough that the dense factorization is cheap
        self.row_map = ridx
        if A_red is not None and 0 < A_red.shape[0] <= rank_check_limit:
            Ad = A_red.toarray()
            _, R, piv = sla.qr(Ad.T, mode="economic", pivoting=True)
            diag = np.abs(np.diag(R))
            tol = max(Ad.shape) * np.finfo(float).eps * (diag.max() if diag.size else 0.0)
            rank = int(np.sum(diag > max(tol, 1e-13)))
            if rank < Ad.shape[0]:
                kept = np.sort(piv[:rank])
                dropped = np.sort(piv[rank:])
                Ak, bk = Ad[kept], b_red[kept]
                for i in dropped:
                    w, *_ = np.linalg.lstsq(Ak.T, Ad[i], rcond=None)
                    if abs(b_red[i] - w @ bk) > 1e-8 * b_scale:
                        self.infeasible = True
                self.row_map = ridx[kept]
                A_red, b_red = A_red[kept], b_red[kept]

        self.reduced = QpProblem(len(vidx), Q_rr, q_red, A_red, b_red, G_red, h_red)

    def expand(self, u_r: np.ndarray, y_r: np.ndarray,
               mu: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Reconstruct the full primal and equality duals.

        Singleton-row duals come from the stationarity condition of the
        variable each row fixed, recovered in reverse elimination order;
        dropped dependent rows get zero duals.
        """
        p = self.orig
        u = self.fixed_value.copy()
        u[np.flatnonzero(self.keep_var)] = u_r
        y = np.zeros(p.num_eq)
        y[self.row_map] = y_r
        if self.fixed_order:
            A_csc = p.A.tocsc()
            G_csc = p.G.tocsc() if p.num_in else None
            Q_csr = p.Q
            for j, i in reversed(self.fixed_order):
                r_j = (Q_csr.getrow(j) @ u)[0] + p.q[j]
                r_j += (A_csc.getcol(j).T @ y)[0]
                if G_csc is not None:
                    r_j += (G_csc.getcol(j).T @ mu)[0]
                coef = p.A[i, j]
                y[i] = -r_j / coef
        return u, y


# ---------------------------------------------------------------------------
# interior-point solver


def solve(problem: QpProblem, tolerance: float = 1e-8, max_iter: int = 50,
          rank_check_limit: int = 400) -> QpSolution:
    """Solve the QP with a Mehrotra predictor-corrector interior-point method.

    When the returned status is OPTIMAL the solution's ``kkt_residual`` is at
    most ``tolerance``.  INFEASIBLE and UNBOUNDED are certified by presolve
    where possible and otherwise detected from iterate divergence.
    """
    if tolerance <= 0:
        raise QpError("tolerance must be positive")
    problem.validate()

    pre = _Presolve(problem, rank_check_limit)
    if pre.infeasible:
        return _finish(problem, np.zeros(problem.num_vars), np.zeros(problem.num_eq),
                       np.zeros(problem.num_in), QpStatus.INFEASIBLE, 0, tolerance)
    red = pre.reduced
    n, m_eq, m_in = red.num_vars, red.num_eq, red.num_in

    if n == 0:
        u, y = pre.expand(np.zeros(0), np.zeros(m_eq), np.zeros(problem.num_in))
        return _finish(problem, u, y, np.zeros(problem.num_in),
                       QpStatus.OPTIMAL, 0, tolerance)

    if m_in == 0:
        u_r, y_r, status, iters = _solve_equality_qp(red, tolerance)
        mu = np.zeros(problem.num_in)
        u, y = pre.expand(u_r, y_r, mu)
        return _finish(problem, u, y, mu, status, iters, tolerance)

    Q, q, A, b, G, h = red.Q, red.q, red.A, red.b, red.G, red.h

    u = _least_norm_start(red)
    y = np.zeros(m_eq)
    gap = h - G @ u
    shift = max(0.0, 1.5 * float(-gap.min())) if gap.size else 0.0
    s = gap + shift + 1.0
    z = np.ones(m_in)

    status = QpStatus.MAX_ITER
    it = 0
    best_res = np.inf
    best = (u.copy(), y.copy(), z.copy())
    for it in range(1, max_iter + 1):
        r_d = Q @ u + q + (A.T @ y if m_eq else 0.0) + G.T @ z
        r_p = (A @ u - b) if m_eq else np.zeros(0)
        r_g = G @ u + s - h
        mu_gap = float(s @ z) / m_in

        res = kkt_residual(red, QpSolution(u, y, z, 0.0, QpStatus.OPTIMAL, 0.0))
        if res < best_res:
            best_res = res
            best = (u.copy(), y.copy(), z.copy())
        if res <= tolerance:
            status = QpStatus.OPTIMAL
            break
        # central path numerically exhausted: pushing mu further only
        # degrades the dual residual through the 1/s scaling
        if mu_gap <= 1e-3 * tolerance:
            status = QpStatus.OPTIMAL if best_res <= tolerance else QpStatus.MAX_ITER
            break

        big = max(float(np.abs(u).max()), float(np.abs(z).max()),
                  float(np.abs(y).max()) if m_eq else 0.0)
        if big > 1e10 or not np.isfinite(big):
            obj = red.objective(np.nan_to_num(u, nan=0.0, posinf=0.0, neginf=0.0))
            status = (QpStatus.UNBOUNDED
                      if float(np.abs(u).max()) > 1e8 and obj < -1e10
                      else QpStatus.INFEASIBLE)
            break

        s_safe = np.maximum(s, 1e-300)
        D = np.minimum(z / s_safe, 1e16)
        K = sp.bmat(
            [[Q + G.T @ sp.diags(D) @ G + _IPM_REG * sp.identity(n),
              A.T if m_eq else None],
             [A if m_eq else None,
              -_IPM_REG * sp.identity(m_eq) if m_eq else None]],
            format="csc",
        ) if m_eq else (Q + G.T @ sp.diags(D) @ G
                        + _IPM_REG * sp.identity(n)).tocsc()
        try:
            factor = spla.splu(K)
        except RuntimeError:
            break  # leaves MAX_ITER with the current iterate

        def newton(r_sz):
            rhs_u = -(r_d + G.T @ (D * r_g - r_sz / s_safe))
            rhs = np.concatenate([rhs_u, -r_p]) if m_eq else rhs_u
            sol = factor.solve(rhs)
            du, dy = sol[:n], sol[n:]
            dz = D * (G @ du + r_g) - r_sz / s_safe
            ds = -r_g - G @ du
            return du, dy, dz, ds

        du_a, dy_a, dz_a, ds_a = newton(s * z)
        alpha_a = _step_length(s, ds_a, z, dz_a)
        mu_aff = float((s + alpha_a * ds_a) @ (z + alpha_a * dz_a)) / m_in
        sigma = (mu_aff / mu_gap) ** 3 if mu_gap > 0 else 0.0

        r_sz = s * z + ds_a * dz_a - sigma * mu_gap
        du, dy, dz, ds = newton(r_sz)
        alpha = min(1.0, 0.99 * _step_length(s, ds, z, dz))

        u = u + alpha * du
        if m_eq:
            y = y + alpha * dy
        z = np.maximum(z + alpha * dz, 1e-300)
        s = np.maximum(s + alpha * ds, 1e-300)

    if status in (QpStatus.OPTIMAL, QpStatus.MAX_ITER) and best_res < np.inf:
        u, y, z = best
        u, y, z, best_res = _polish(red, u, y, z, best_res)
        if best_res <= tolerance:
            status = QpStatus.OPTIMAL
    mu_full = z if status != QpStatus.INFEASIBLE else np.zeros(m_in)
    u_f, y_f = pre.expand(u, y, mu_full)
    return _finish(problem, u_f, y_f, mu_full, status, it, tolerance)


def _polish(red: QpProblem, u, y, z, res):
    """Active-set cleanup of the interior-point iterate.

    Solves the equality-constrained KKT system on the constraints the
    iterate marks active, then refines the set for a few rounds (drop
    negative-dual rows, add violated rows).  The best candidate by KKT
    residual wins; the incoming iterate is kept if nothing improves on it.
    """
    n, m_eq = red.num_vars, red.num_eq
    slack = red.h - red.G @ u
    act = set(np.flatnonzero(z > np.maximum(slack, 1e-12)).tolist())
    best = (u, y, z, res)
    for _ in range(12):
        rows = sorted(act)
        G_act = red.G[rows] if rows else None
        K = sp.bmat(
            [[red.Q, red.A.T if m_eq else None,
              G_act.T if rows else None],
             [red.A if m_eq else None, None, None],
             [G_act if rows else None, None, None]],
            format="csc",
        ) if (m_eq or rows) else red.Q.tocsc()
        rhs = np.concatenate([-red.q, red.b, red.h[rows]])
        try:
            sol = _solve_adjoint(K, rhs, n_primal=n)
        except SingularKktError:
            # dependent actives with inconsistent right-hand sides (a floor
            # cap plus every one of its zone caps): prune the weakest active
            if not rows:
                break
            act.discard(min(rows, key=lambda i: z[i]))
            continue
        u2 = sol[:n]
        y2 = sol[n:n + m_eq]
        duals = sol[n + m_eq:]
        z2 = np.zeros(red.num_in)
        z2[rows] = np.maximum(duals, 0.0)
        res2 = kkt_residual(red, QpSolution(u2, y2, z2, 0.0, QpStatus.OPTIMAL, 0.0))
        if res2 < best[3]:
            best = (u2, y2, z2, res2)
        negative = [rows[k] for k in np.flatnonzero(duals < -1e-10)]
        violated = np.flatnonzero(red.G @ u2 - red.h > 1e-10)
        changed = False
        for i in negative:
            act.discard(i)
            changed = True
        for i in violated:
            if i not in act:
                act.add(int(i))
                changed = True
        if not changed:
            break
    return best


def _step_length(s, ds, z, dz) -> float:
    alpha = 1.0
    neg = ds < 0
    if neg.any():
        alpha = min(alpha, float((-s[neg] / ds[neg]).min()))
    neg = dz < 0
    if neg.any():
        alpha = min(alpha, float((-z[neg] / dz[neg]).min()))
    return alpha


def _least_norm_start(red: QpProblem) -> np.ndarray:
    n, m = red.num_vars, red.num_eq
    if m == 0:
        return np.zeros(n)
    K = sp.bmat([[sp.identity(n), red.A.T],
                 [red.A, -_IPM_REG * sp.identity(m)]], format="csc")
    sol = spla.splu(K).solve(np.concatenate([np.zeros(n), red.b]))
    return sol[:n]


def _solve_equality_qp(red: QpProblem, tolerance: float):
    """Direct KKT solve for problems without inequalities."""
    n, m = red.num_vars, red.num_eq
    scale = max(1.0, float(np.abs(red.q).max()),
                float(np.abs(red.b).max()) if m else 0.0)
    if m == 0:
        Qd = red.Q.toarray()
        u, *_ = np.linalg.lstsq(Qd, -red.q, rcond=None)
        if np.max(np.abs(Qd @ u + red.q)) > max(tolerance, 1e-9) * scale:
            return u, np.zeros(0), QpStatus.UNBOUNDED, 1
        return u, np.zeros(0), QpStatus.OPTIMAL, 1
    K = sp.bmat([[red.Q + _IPM_REG * sp.identity(n), red.A.T],
                 [red.A, -_IPM_REG * sp.identity(m)]], format="csc")
    rhs = np.concatenate([-red.q, red.b])
    try:
        factor = spla.splu(K)
    except RuntimeError:
        return np.zeros(n), np.zeros(m), QpStatus.INFEASIBLE, 1
    sol = factor.solve(rhs)
    K0 = sp.bmat([[red.Q, red.A.T], [red.A, None]], format="csr")
    for _ in range(3):  # refine away the static regularization
        r = rhs - K0 @ sol
        if np.max(np.abs(r)) < 1e-14 * scale:
            break
        sol = sol + factor.solve(r)
    u, y = sol[:n], sol[n:]
    res = max(float(np.abs(red.Q @ u + red.q + red.A.T @ y).max()),
              float(np.abs(red.A @ u - red.b).max()))
    ok = res <= max(tolerance, 1e-8) * scale
    return u, y, QpStatus.OPTIMAL if ok else QpStatus.MAX_ITER, 1


def _finish(problem: QpProblem, u, y, mu, status, iters, tolerance) -> QpSolution:
    sol = QpSolution(u, y, mu, problem.objective(u), status, 0.0, iters)
    res = kkt_residual(problem, sol)
    if status == QpStatus.OPTIMAL and res > tolerance * 10:
        status = QpStatus.MAX_ITER
    return QpSolution(u, y, mu, problem.objective(u), status, res, iters)


# ---------------------------------------------------------------------------
# implicit differentiation


def backward(problem: QpProblem, solution: QpSolution,
             grad_primal: np.ndarray) -> SolutionSensitivity:
    """Vector-Jacobian products of the solution map at an optimal point.

    Solves one adjoint system on the active-set-reduced KKT Jacobian with
    right-hand side ``grad_primal``; the returned blocks satisfy, to first
    order, dL = <grad_X, dX> for any data perturbation dX.  Inequalities
    with dual below DEGENERACY_THRESHOLD are treated as inactive; if their
    slack is also below the threshold a DegenerateActiveSetWarning is issued.
    """
    if solution.status != QpStatus.OPTIMAL:
        raise QpError("backward requires an OPTIMAL solution")
    grad_primal = _vec(grad_primal)
    n = problem.num_vars
    if grad_primal.shape != (n,):
        raise QpError(f"grad_primal must have length {n}")

    u, y, mu = solution.primal, solution.dual_eq, solution.dual_in
    m_eq, m_in = problem.num_eq, problem.num_in

    if m_in:
        slack = problem.h - problem.G @ u
        # interior-point methods leave degenerate pairs with dual and slack
        # both near sqrt(complementarity), so the floor adapts to the
        # solution's residual scale
        threshold = max(DEGENERACY_THRESHOLD,
                        3.0 * np.sqrt(max(solution.kkt_residual, 0.0)))
        active = mu > threshold
        degenerate = (~active) & (slack < threshold)
        if degenerate.any():
            warnings.warn(
                f"{int(degenerate.sum())} inequality constraint(s) are degenerate "
                "(dual and slack both below threshold); treated as inactive",
                DegenerateActiveSetWarning,
                stacklevel=2,
            )
        act = np.flatnonzero(active)
    else:
        act = np.zeros(0, dtype=int)

    G_act = problem.G[act] if len(act) else None
    m_act = len(act)

    if m_eq or m_act:
        K = sp.bmat(
            [
                [problem.Q,
                 problem.A.T if m_eq else None,
                 G_act.T if m_act else None],
                [problem.A if m_eq else None, None, None],
                [G_act if m_act else None, None, None],
            ],
            format="csc",
        )
    else:
        K = problem.Q.tocsc()
    rhs = np.concatenate([grad_primal, np.zeros(m_eq + m_act)])
    v = _solve_adjoint(K, rhs, n_primal=n)

    v_u = v[:n]
    v_y = v[n:n + m_eq]
    v_mu = v[n + m_eq:]

    grad_q = -v_u
    grad_Q = -0.5 * (np.outer(v_u, u) + np.outer(u, v_u))
    grad_b = v_y.copy()
    grad_A = -(np.outer(y, v_u) + np.outer(v_y, u)) if m_eq else np.zeros((0, n))
    grad_G = np.zeros((m_in, n))
    grad_h = np.zeros(m_in)
    if m_act:
        grad_G[act] = -(np.outer(mu[act], v_u) + np.outer(v_mu, u))
        grad_h[act] = v_mu
    return SolutionSensitivity(grad_Q, grad_q, grad_A, grad_b, grad_G, grad_h)


def _solve_adjoint(K, rhs: np.ndarray, n_primal: int | None = None) -> np.ndarray:
    """Solve a symmetric (quasi-definite-able) KKT system.

    A signed diagonal shift (+delta on the primal block, -delta on the
    multiplier block) keeps the factorization structurally nonsingular even
    with linearly dependent active rows; iterative refinement against the
    unshifted system then removes the bias.  Raises SingularKktError only
    when no shift level yields a consistent solve.
    """
    scale = max(1.0, float(np.abs(rhs).max()))
    if n_primal is None:
        n_primal = K.shape[0]
    sign = np.ones(K.shape[0])
    sign[n_primal:] = -1.0
    K = K.tocsc()
    for delta in (_ADJOINT_REG, 1e-8, 1e-6):
        try:
            factor = spla.splu(K + sp.diags(delta * sign, format="csc"))
        except RuntimeError:
            continue
        v = factor.solve(rhs)
        for _ in range(5):
            if not np.all(np.isfinite(v)):
                break
            r = rhs - K @ v
            if np.max(np.abs(r)) <= 1e-14 * scale:
                break
            v = v + factor.solve(r)
        if np.all(np.isfinite(v)) and np.max(np.abs(K @ v - rhs)) <= 1e-6 * scale:
            return v
    raise SingularKktError("adjoint KKT system singular beyond regularization")


def backward_through_map(sensitivity: SolutionSensitivity,
                         coefficient_jacobian: CoefficientMap) -> np.ndarray:
    """Contract data-block gradients with a coefficient Jacobian.

    Returns dL/dtheta_raw = J' g where g gathers the sensitivity entry of
    every slot named by the map.
    """
    cm = coefficient_jacobian
    g = np.empty(len(cm.blocks))
    lookup = {
        "A": lambda r, c: sensitivity.grad_A[r, c],
        "b": lambda r, c: sensitivity.grad_b[r],
        "G": lambda r, c: sensitivity.grad_G[r, c],
        "h": lambda r, c: sensitivity.grad_h[r],
        "Q": lambda r, c: sensitivity.grad_Q[r, c],
        "q": lambda r, c: sensitivity.grad_q[r],
    }
    for k, code in enumerate(cm.blocks):
        try:
            g[k] = lookup[code](cm.rows[k], cm.cols[k])
        except KeyError:
            raise QpError(f"unknown block code {code!r}") from None
    return np.asarray(cm.jacobian.T @ g).ravel()


# ---------------------------------------------------------------------------
# plain-text dump/load for debugging reproducibility


def dump(problem: QpProblem, fp: IO[str]) -> None:
    """Write the problem in plain text: a ``qp n m_eq m_in`` header followed
    by dense row-major blocks Q, q, A, b, G, h (one matrix row per line)."""
    fp.write(f"qp {problem.num_vars} {problem.num_eq} {problem.num_in}\n")
    for name, block in (("Q", problem.Q.toarray()), ("q", problem.q),
                        ("A", problem.A.toarray()), ("b", problem.b),
                        ("G", problem.G.toarray()), ("h", problem.h)):
        fp.write(name + "\n")
        for row in np.atleast_2d(block):
            fp.write(" ".join(repr(float(x)) for x in row) + "\n")


def load(fp: IO[str]) -> QpProblem:
    header = fp.readline().split()
    if len(header) != 4 or header[0] != "qp":
        raise QpError("not a QP dump: bad header")
    n, m_eq, m_in = (int(x) for x in header[1:])
    blocks = {}
    expect = (("Q", n, n), ("q", 1, n), ("A", m_eq, n), ("b", 1, m_eq),
              ("G", m_in, n), ("h", 1, m_in))
    for name, rows, cols in expect:
        label = fp.readline().strip()
        if label != name:
            raise QpError(f"expected block {name!r}, found {label!r}")
        data = [[float(x) for x in fp.readline().split()] for _ in range(rows)]
        arr = np.asarray(data, dtype=float).reshape(rows, cols) if rows * cols else np.zeros((rows, cols))
        blocks[name] = arr
    return QpProblem(n, blocks["Q"], blocks["q"].ravel(), blocks["A"],
                     blocks["b"].ravel(), blocks["G"], blocks["h"].ravel())
