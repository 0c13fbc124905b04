"""Small dense LCP / QP solvers.

solve_lcp finds x >= 0 with w = M x + q >= 0 and x.w = 0 for a positive
definite M. It runs accelerated projected gradient (FISTA with restart) on
0.5 x'Mx + q'x from a warm start, then polishes the active set with block
principal pivoting so the returned point satisfies complementarity to
machine precision. enumerate_lcp is the brute-force reference.
"""
from dataclasses import dataclass
from itertools import combinations

import numpy as np
from numba import njit

from .errors import SolverError


@dataclass
class LcpSolution:
    x: np.ndarray
    w: np.ndarray
    iterations: int
    pivots: int
    residual: float


@njit(cache=True)
def _fista(M, q, x0, max_iter, tol, early):
    n = q.shape[0]
    # step from the Gershgorin bound on the largest eigenvalue
    L = 0.0
    for i in range(n):
        s = 0.0
        for j in range(n):
            s += abs(M[i, j])
        if s > L:
            L = s
    if L <= 0.0:
        L = 1.0
    x = np.maximum(x0, 0.0)
    y = x.copy()
    t = 1.0
    it = 0
    stable = 0
    prev_pattern = x > 0
    for it in range(1, max_iter + 1):
        g = M @ y + q
        xn = np.maximum(y - g / L, 0.0)
        tn = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        d = xn - x
        # gradient-based adaptive restart
        if np.dot(g, d) > 0.0:
            tn = 1.0
            y = xn.copy()
        else:
            y = xn + ((t - 1.0) / tn) * d
        x = xn
        t = tn
        w = M @ x + q
        res = 0.0
        for i in range(n):
            r = abs(min(x[i], w[i]))
            if r > res:
                res = r
        if res <= tol:
            break
        pattern = x > 0
        if np.all(pattern == prev_pattern):
            stable += 1
        else:
            stable = 0
        prev_pattern = pattern
        # the polish only needs a good active-set guess
        if early and stable >= 25 and it >= 50:
            break
    return x, it


@njit(cache=True)
def _bpp(M, q, active, max_pivots, tol):
    """Block principal pivoting (Judice-Pires) with Murty single-pivot backup."""
    n = q.shape[0]
    x = np.zeros(n)
    w = q.copy()
    best = n + 1
    budget = 3
    for piv in range(max_pivots):
        idx = np.flatnonzero(active)
        x[:] = 0.0
        if idx.shape[0] > 0:
            MA = np.empty((idx.shape[0], idx.shape[0]))
            qa = np.empty(idx.shape[0])
            for a in range(idx.shape[0]):
                qa[a] = -q[idx[a]]
                for b in range(idx.shape[0]):
                    MA[a, b] = M[idx[a], idx[b]]
            xa = np.linalg.solve(MA, qa)
            for a in range(idx.shape[0]):
                x[idx[a]] = xa[a]
        w = M @ x + q
        for a in range(idx.shape[0]):
            w[idx[a]] = 0.0
        bad = np.zeros(n, dtype=np.bool_)
        nbad = 0
        for i in range(n):
            if (active[i] and x[i] < -tol) or ((not active[i]) and w[i] < -tol):
                bad[i] = True
                nbad += 1
        if nbad == 0:
            for i in range(n):
                if x[i] < 0.0:
                    x[i] = 0.0
                if w[i] < 0.0 and not active[i]:
                    w[i] = 0.0
            return x, w, piv, True
        if nbad < best:
            best = nbad
            budget = 3
            for i in range(n):
                if bad[i]:
                    active[i] = not active[i]
        elif budget > 0:
            budget -= 1
            for i in range(n):
                if bad[i]:
                    active[i] = not active[i]
        else:
            for i in range(n - 1, -1, -1):
                if bad[i]:
                    active[i] = not active[i]
                    break
    return x, w, max_pivots, False


def lcp_residual(M, q, x):
    """Max of -x, -w and |x_i w_i| violations."""
    w = M @ x + q
    if len(x) == 0:
        return 0.0
    return float(max(np.max(-x, initial=0.0), np.max(-w, initial=0.0), np.max(np.abs(x * w))))


def solve_lcp(M, q, x0=None, max_iter=2000, tol=1e-9, polish=True) -> LcpSolution:
    M = np.ascontiguousarray(M, dtype=float)
    q = np.ascontiguousarray(q, dtype=float)
    n = len(q)
    if n == 0:
        return LcpSolution(np.zeros(0), np.zeros(0), 0, 0, 0.0)
    if np.all(q >= 0):
        return LcpSolution(np.zeros(n), q.copy(), 0, 0, 0.0)
    if x0 is None or len(x0) != n:
        x0 = np.zeros(n)
    scale = max(1.0, float(np.abs(q).max()))
    x, iters = _fista(M, q, np.asarray(x0, dtype=float), max_iter, tol * 1e-3, polish)
    pivots = 0
    ok = False
    if polish:
        try:
            xp, wp, pivots, ok = _bpp(M, q, x > 0, 10 * n + 50, 1e-14 * scale)
        except np.linalg.LinAlgError:
            # singular principal block (degenerate dual); keep the first-order point
            ok = False
        if ok:
            x = xp
        else:
            x, more = _fista(M, q, x, max_iter, tol * 1e-3, False)
            iters += more
    res = lcp_residual(M, q, x)
    if not np.isfinite(res) or res > tol:
        raise SolverError(f"LCP did not converge after {iters} iterations", res)
    return LcpSolution(x, M @ x + q, iters, pivots, res)


def enumerate_lcp(M, q, tol=1e-10):
    """Reference solver: try every active set, smallest first.

    Returns the first complementary solution. For a P-matrix it is unique."""
    M = np.asarray(M, dtype=float)
    q = np.asarray(q, dtype=float)
    n = len(q)
    scale = max(1.0, float(np.abs(q).max()))
    if np.all(q >= -tol * scale):
        return np.zeros(n)
    for k in range(1, n + 1):
        sets = np.array(list(combinations(range(n), k)))
        MA = M[sets[:, :, None], sets[:, None, :]]
        qa = -q[sets]
        xa = np.linalg.solve(MA, qa[..., None])[..., 0]
        ok = np.all(xa >= -tol * scale, axis=1)
        for s in np.flatnonzero(ok):
            x = np.zeros(n)
            x[sets[s]] = np.maximum(xa[s], 0.0)
            w = M @ x + q
            w[sets[s]] = 0.0
            if np.all(w >= -tol * scale):
                return x
    raise SolverError("no complementary solution found by enumeration")


def solve_qp(H, c, A, b, max_iter=2000, tol=1e-10, x0=None):
    """min 0.5 x'Hx + c'x  s.t.  A x >= b, H positive definite.

    Without x0 this goes through the dual LCP. With a feasible x0 it runs a primal
    active-set method instead, which copes with degenerate (rank-deficient) duals."""
    H = np.asarray(H, dtype=float)
    c = np.asarray(c, dtype=float)
    A = np.atleast_2d(np.asarray(A, dtype=float))
    b = np.asarray(b, dtype=float)
    if x0 is not None:
        return _primal_active_set(H, c, A, b, np.asarray(x0, dtype=float), max_iter, tol)
    Hi_c = np.linalg.solve(H, c)
    Hi_At = np.linalg.solve(H, A.T)
    M = A @ Hi_At
    M = 0.5 * (M + M.T)
    q = -A @ Hi_c - b
    sol = solve_lcp(M + 1e-12 * np.eye(len(b)), q, max_iter=max_iter, tol=tol)
    x = Hi_At @ sol.x - Hi_c
    return x, sol.x


def _independent(A, rows, tol=1e-10):
    """Greedy subset of rows with linearly independent constraint normals."""
    keep = []
    for i in rows:
        trial = A[keep + [i]]
        if np.linalg.matrix_rank(trial, tol) == len(keep) + 1:
            keep.append(i)
    return keep


def _primal_active_set(H, c, A, b, x, max_iter, tol):
    m, n = A.shape
    scale = max(1.0, float(np.abs(b).max(initial=0.0)))
    if np.any(A @ x - b < -1e-9 * scale):
        raise SolverError("active-set start point is infeasible")
    W = _independent(A, [i for i in range(m) if A[i] @ x - b[i] <= 1e-12 * scale])
    mu = np.zeros(0)
    for _ in range(max_iter):
        g = H @ x + c
        k = len(W)
        K = np.zeros((n + k, n + k))
        K[:n, :n] = H
        K[:n, n:] = -A[W].T
        K[n:, :n] = A[W]
        sol = np.linalg.lstsq(K, np.concatenate([-g, np.zeros(k)]), rcond=None)[0]
        p, mu = sol[:n], sol[n:]
        if np.linalg.norm(p) <= tol * (1.0 + np.linalg.norm(x)):
            if k == 0 or mu.min() >= -tol * (1.0 + np.abs(g).max()):
                lam = np.zeros(m)
                lam[W] = np.maximum(mu, 0.0)
                return x, lam
            W.pop(int(np.argmin(mu)))
            continue
        # ratio test over constraints outside the working set
        Ap = A @ p
        alpha, block = 1.0, -1
        for i in range(m):
            if i not in W and Ap[i] < -1e-14:
                a = (b[i] - A[i] @ x) / Ap[i]
                if a < alpha:
                    alpha, block = max(a, 0.0), i
        x = x + alpha * p
        if block >= 0:
            W.append(block)
    raise SolverError("active-set QP did not converge", float(np.linalg.norm(p)))
