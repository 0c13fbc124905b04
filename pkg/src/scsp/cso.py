"""Contact selection: for every valid candidate, the best robot force under the
surrogate model, then the lowest-cost candidate.

The inner problem per candidate has three unknowns (normal and two tangential
force components) constrained to the friction pyramid |t_i| <= mu n with
0 <= n <= lam_max. It is solved by monotone accelerated projected gradient
with backtracking; the projection onto the pyramid is closed form. The
objective is only piecewise smooth (environment rows switch on and off), so
stationarity is certified with the Clarke gradient at clamp kinks. A
candidate whose solve does not reach the residual tolerance is reported with
infinite cost.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .dynamics import Pose, SystemParams, WorldState
from .errors import InfeasibleGraspError, SolverError
from .geometry import CandidateSet, SurfaceSample
from .lcp import solve_qp
from .rotations import quat_to_matrix
from .scm import ScmFrozenScene

BRANCH_POSE = 0
BRANCH_STAB = 1


@dataclass(frozen=True)
class CsoObjectiveSpec:
    goal: Pose
    w_pos: float = 500.0
    w_quat: float = 5.0
    metric: str = "planar"   # "planar": stable-set switch on the up axis; "pose": pose cost only
    up_tol: float = 0.02     # membership: 1 - up(x).up(goal) <= up_tol

    def __post_init__(self):
        if self.w_pos < 0 or self.w_quat < 0:
            raise ValueError("weights must be nonnegative")
        if self.metric not in ("planar", "pose"):
            raise ValueError(f"unknown metric {self.metric!r}")


def up_axis(q):
    return quat_to_matrix(q)[..., :, 2]


def in_goal_set(x_o: Pose, spec: CsoObjectiveSpec) -> bool:
    """Planar stable set: object up axis matches the goal up axis."""
    return bool(1.0 - up_axis(x_o.q) @ up_axis(spec.goal.q) <= spec.up_tol)


def objective_branch(state: WorldState, spec: CsoObjectiveSpec) -> int:
    if spec.metric == "pose" or in_goal_set(state.x_o, spec):
        return BRANCH_POSE
    return BRANCH_STAB


def pose_cost(x: Pose, goal: Pose, w_pos, w_quat):
    d = x.p - goal.p
    return float(w_pos * (d @ d) + w_quat * (1.0 - (x.q @ goal.q) ** 2))


def stab_cost(x: Pose, goal: Pose):
    return float(1.0 - up_axis(x.q) @ up_axis(goal.q))


def cso_objective(x_next: Pose, state: WorldState, spec: CsoObjectiveSpec) -> float:
    """Stable-set transfer cost while the current pose is outside the goal set, pose cost inside."""
    if objective_branch(state, spec) == BRANCH_STAB:
        return stab_cost(x_next, spec.goal)
    return pose_cost(x_next, spec.goal, spec.w_pos, spec.w_quat)


# ---------------------------------------------------------------- projection

@njit(cache=True)
def project_pyramid(y, mu, nmax):
    """Euclidean projection onto {|t1| <= mu n, |t2| <= mu n, 0 <= n <= nmax}."""
    yn, a1, a2 = y[0], abs(y[1]), abs(y[2])
    lo, hi = min(a1, a2), max(a1, a2)
    if mu <= 0.0:
        n = yn
    else:
        n = yn
        if yn * mu < hi:
            n = (yn + mu * hi) / (1.0 + mu * mu)
            if n * mu < lo:
                n = (yn + mu * (lo + hi)) / (1.0 + 2.0 * mu * mu)
    n = min(max(n, 0.0), nmax)
    out = np.empty(3)
    out[0] = n
    c = mu * n
    out[1] = np.sign(y[1]) * min(a1, c)
    out[2] = np.sign(y[2]) * min(a2, c)
    return out


# ---------------------------------------------------------------- kernel

@njit(cache=True)
def _exp_jac(r):
    theta = np.sqrt(r[0] * r[0] + r[1] * r[1] + r[2] * r[2])
    if theta < 1e-6:
        s = 0.5 - theta * theta / 48.0
        ds = -1.0 / 24.0
        dc = -0.25
    else:
        s = np.sin(0.5 * theta) / theta
        ds = (0.5 * np.cos(0.5 * theta) * theta - np.sin(0.5 * theta)) / theta ** 3
        dc = -0.5 * np.sin(0.5 * theta) / theta
    e = np.empty(4)
    e[0] = np.cos(0.5 * theta)
    de = np.zeros((4, 3))
    for i in range(3):
        e[i + 1] = s * r[i]
        de[0, i] = dc * r[i]
        for j in range(3):
            de[i + 1, j] = ds * r[i] * r[j]
        de[i + 1, i] += s
    return e, de


@njit(cache=True)
def _left_mat(q):
    w, x, y, z = q[0], q[1], q[2], q[3]
    L = np.empty((4, 4))
    L[0, 0], L[0, 1], L[0, 2], L[0, 3] = w, -x, -y, -z
    L[1, 0], L[1, 1], L[1, 2], L[1, 3] = x, w, z, -y
    L[2, 0], L[2, 1], L[2, 2], L[2, 3] = y, -z, w, x
    L[3, 0], L[3, 1], L[3, 2], L[3, 3] = z, y, -x, w
    return L


@njit(cache=True)
def _eval(lam, B, A, v0, g0, D, E, p, q, vk, hT, gp, gq, branch, w_pos, w_quat, want_grad):
    m = g0.shape[0]
    g = g0 + A @ lam
    lam_env = np.zeros(m)
    Ahat = np.zeros((m, 3))
    for j in range(m):
        if g[j] < 0.0:
            lam_env[j] = -g[j] / D[j]
            for c in range(3):
                Ahat[j, c] = -A[j, c] / D[j]
    v = v0 + B @ lam + E @ lam_env + vk
    ph = p + hT * v[:3]
    r = hT * v[3:]
    e, de = _exp_jac(r)
    Lq = _left_mat(q)
    qq = Lq @ e
    nq = np.sqrt(qq @ qq)
    qh = qq / nq
    dcdp = np.zeros(3)
    dcdq = np.zeros(4)
    if branch == 0:
        d = ph - gp
        dot = qh @ gq
        cost = w_pos * (d @ d) + w_quat * (1.0 - dot * dot)
        dcdp = 2.0 * w_pos * d
        dcdq = -2.0 * w_quat * dot * gq
    else:
        w, x, y, z = qh[0], qh[1], qh[2], qh[3]
        u0 = 2.0 * (x * z + w * y)
        u1 = 2.0 * (y * z - w * x)
        u2 = 1.0 - 2.0 * (x * x + y * y)
        # goal up axis
        gw, gx, gy, gz = gq[0], gq[1], gq[2], gq[3]
        g0u = 2.0 * (gx * gz + gw * gy)
        g1u = 2.0 * (gy * gz - gw * gx)
        g2u = 1.0 - 2.0 * (gx * gx + gy * gy)
        cost = 1.0 - (u0 * g0u + u1 * g1u + u2 * g2u)
        dcdq[0] = -(2 * y * g0u - 2 * x * g1u)
        dcdq[1] = -(2 * z * g0u - 2 * w * g1u - 4 * x * g2u)
        dcdq[2] = -(2 * w * g0u + 2 * z * g1u - 4 * y * g2u)
        dcdq[3] = -(2 * x * g0u + 2 * y * g1u)
    grad = np.zeros(3)
    dcdv = np.zeros(6)
    if want_grad:
        dv = B + E @ Ahat
        # d qh / d omega = (I - qh qh') / nq * Lq * de * hT
        dqdw = Lq @ de
        P = np.eye(4)
        for i in range(4):
            for j in range(4):
                P[i, j] -= qh[i] * qh[j]
        dqdw = (P @ dqdw) * (hT / nq)
        dcdv[:3] = hT * dcdp
        dcdv[3:] = dcdq @ dqdw
        grad = dcdv @ dv
    return cost, grad, dcdv, g



@njit(cache=True)
def _bvls_residual(Z, base, hi):
    """min |base + Z y| over 0 <= y <= hi by a primal active-set method (tiny n).

    Stark-Parker style: free one bound-optimal-violating variable at a time, solve the
    free least squares (minimum norm), and back off to the box when it leaves it."""
    n = Z.shape[1]
    y = np.zeros(n)
    free = np.zeros(n, dtype=np.bool_)
    r = base + Z @ y
    scale = 1.0 + np.sqrt(base @ base)
    otol = 1e-13 * scale
    for outer in range(4 * n + 10):
        w = -(Z.T @ r)
        jbest = -1
        vbest = otol
        for j in range(n):
            if free[j]:
                continue
            if y[j] <= 0.0 and w[j] > vbest:
                jbest, vbest = j, w[j]
            elif y[j] >= hi[j] and -w[j] > vbest:
                jbest, vbest = j, -w[j]
        if jbest < 0:
            break
        free[jbest] = True
        for inner in range(n + 2):
            idx = np.flatnonzero(free)
            if len(idx) == 0:
                break
            fixed = base.copy()
            for j in range(n):
                if not free[j]:
                    fixed += Z[:, j] * y[j]
            Zf = np.ascontiguousarray(Z[:, idx])
            sol = np.linalg.lstsq(Zf, -fixed)[0]
            inside = True
            for a in range(len(idx)):
                if sol[a] < 0.0 or sol[a] > hi[idx[a]]:
                    inside = False
            if inside:
                for a in range(len(idx)):
                    y[idx[a]] = sol[a]
                break
            # largest step toward sol that stays in the box
            alpha = 1.0
            for a in range(len(idx)):
                j = idx[a]
                d = sol[a] - y[j]
                if d < 0.0 and sol[a] < 0.0:
                    alpha = min(alpha, y[j] / -d)
                elif d > 0.0 and sol[a] > hi[j]:
                    alpha = min(alpha, (hi[j] - y[j]) / d)
            alpha = max(alpha, 0.0)
            for a in range(len(idx)):
                j = idx[a]
                y[j] += alpha * (sol[a] - y[j])
                if y[j] <= 1e-15 * (1.0 + hi[j] if hi[j] < np.inf else 1.0):
                    y[j] = 0.0
                    free[j] = False
                elif y[j] >= hi[j] * (1.0 - 1e-15):
                    y[j] = hi[j]
                    free[j] = False
        r = base + Z @ y
    return np.sqrt(r @ r)


@njit(cache=True)
def _kkt_residual(x, B, A, v0, g0, D, E, p, q, vk, hT, gp, gq, branch, w_pos, w_quat, mu, nmax, kink_tol,
                  tol=0.0):
    """Stationarity residual dist(-df(x), N(x)) with the Clarke gradient at clamp kinks.

    Rows whose pre-clamp value is within kink_tol of zero may take any activation
    in [0, 1]; active pyramid constraints contribute their normal cone."""
    _, grad, dcdv, g = _eval(x, B, A, v0, g0, D, E, p, q, vk, hT, gp, gq, branch, w_pos, w_quat, True)
    m = g.shape[0]
    cols = np.zeros((3, m + 6))
    hi = np.zeros(m + 6)
    nc = 0
    base = grad.copy()
    for j in range(m):
        scale = abs(g0[j]) + nmax * (abs(A[j, 0]) + abs(A[j, 1]) + abs(A[j, 2]))
        if abs(g[j]) <= kink_tol * scale:
            # contribution of row j when fully active
            ej = 0.0
            for i in range(6):
                ej += dcdv[i] * E[i, j]
            gj = np.empty(3)
            for c in range(3):
                gj[c] = -ej * A[j, c] / D[j]
            if g[j] < 0.0:
                base -= gj
            cols[:, nc] = gj
            hi[nc] = 1.0
            nc += 1
    ctol = 1e-10 * max(nmax, 1e-12)
    # constraints c(x) >= 0; stationarity grad = sum alpha_c dc, alpha >= 0
    cons = np.array([[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [mu, -1.0, 0.0], [mu, 1.0, 0.0],
                     [mu, 0.0, -1.0], [mu, 0.0, 1.0]])
    vals = np.array([x[0], nmax - x[0], mu * x[0] - x[1], mu * x[0] + x[1],
                     mu * x[0] - x[2], mu * x[0] + x[2]])
    for c in range(6):
        if vals[c] <= ctol:
            cols[:, nc] = -cons[c]
            hi[nc] = np.inf
            nc += 1
    if nc == 0:
        return np.sqrt(base @ base)
    Z = cols[:, :nc].copy()
    # unit columns for conditioning; bounds scale with them
    for j in range(nc):
        cn = np.sqrt(Z[0, j] ** 2 + Z[1, j] ** 2 + Z[2, j] ** 2)
        if cn > 0.0:
            Z[:, j] /= cn
            hi[j] *= cn
    return _bvls_residual(Z, base, hi[:nc].copy())



@njit(cache=True)
def _feasible_step(x, d, mu, nmax, skip):
    """Largest t with x + t d inside the pyramid; constraints flagged in skip are ignored."""
    cons = np.array([[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [mu, -1.0, 0.0], [mu, 1.0, 0.0],
                     [mu, 0.0, -1.0], [mu, 0.0, 1.0]])
    rhs = np.array([0.0, -nmax, 0.0, 0.0, 0.0, 0.0])
    tmax = np.inf
    for c in range(6):
        if skip[c]:
            continue
        rate = cons[c] @ d
        if rate < 0.0:
            slack = max(cons[c] @ x - rhs[c], 0.0)
            tmax = min(tmax, slack / -rate)
    return tmax


@njit(cache=True)
def _polish(x, B, A, v0, g0, D, E, p, q, vk, hT, gp, gq, branch, w_pos, w_quat, mu, nmax,
            n_eq, band, L, tol, kink_tol):
    """Smooth descent on the intersection of the n_eq nearest kink / face hyperplanes.

    Kink rows contribute gradients along their own normal, so the objective is
    smooth along the intersection. Returns (x, f, residual)."""
    m = g0.shape[0]
    _, _, _, g = _eval(x, B, A, v0, g0, D, E, p, q, vk, hT, gp, gq, branch, w_pos, w_quat, False)
    cons = np.array([[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [mu, -1.0, 0.0], [mu, 1.0, 0.0],
                     [mu, 0.0, -1.0], [mu, 0.0, 1.0]])
    rhs = np.array([0.0, -nmax, 0.0, 0.0, 0.0, 0.0])
    H = np.zeros((m + 6, 3))
    b = np.zeros(m + 6)
    dist = np.full(m + 6, np.inf)
    for j in range(m):
        na = np.sqrt(A[j] @ A[j])
        if na > 0.0:
            H[j] = A[j] / na
            b[j] = -g0[j] / na
            dist[j] = abs(g[j]) / na
    for c in range(6):
        na = np.sqrt(cons[c] @ cons[c])
        H[m + c] = cons[c] / na
        b[m + c] = rhs[c] / na
        dist[m + c] = abs(cons[c] @ x - rhs[c]) / na
    order = np.argsort(dist)
    Qb = np.zeros((3, 3))
    Hs = np.zeros((3, 3))
    bs = np.zeros(3)
    skip = np.zeros(6, dtype=np.bool_)
    k = 0
    for o in order:
        if k >= n_eq or dist[o] > band:
            break
        w = H[o].copy()
        for i in range(k):
            w -= (w @ Qb[i]) * Qb[i]
        nw = np.sqrt(w @ w)
        if nw < 1e-6:
            continue
        Qb[k] = w / nw
        Hs[k] = H[o]
        bs[k] = b[o]
        if o >= m:
            skip[o - m] = True
        k += 1
    if k == 0:
        return x, np.inf, np.inf
    # closest point of the affine set
    Hk = Hs[:k]
    G = Hk @ Hk.T
    y = x - Hk.T @ np.linalg.solve(G, Hk @ x - bs[:k])
    for c in range(6):
        if cons[c] @ y - rhs[c] < -1e-12 * max(nmax, 1.0):
            return x, np.inf, np.inf
    # null-space projector
    P = np.eye(3)
    for i in range(k):
        P -= np.outer(Qb[i], Qb[i])
    f, gr, _, _ = _eval(y, B, A, v0, g0, D, E, p, q, vk, hT, gp, gq, branch, w_pos, w_quat, True)
    if k < 3:
        for it in range(200):
            d = -(P @ gr)
            nd = np.sqrt(d @ d)
            if nd <= 0.1 * tol:
                break
            tmax = _feasible_step(y, d, mu, nmax, skip)
            if tmax <= 1e-300:
                break
            t = min(1.0 / L, tmax)
            ok = False
            for _ in range(60):
                yn = y + t * d
                fn, gn, _, _ = _eval(yn, B, A, v0, g0, D, E, p, q, vk, hT, gp, gq, branch, w_pos, w_quat, True)
                if fn <= f - 1e-4 * t * nd * nd:
                    ok = True
                    break
                t *= 0.5
            if not ok:
                break
            # grow the step estimate when the full step was accepted
            if t >= 1.0 / L:
                L *= 0.7
            else:
                L = 1.0 / t
            y, f, gr = yn, fn, gn
    res = _kkt_residual(y, B, A, v0, g0, D, E, p, q, vk, hT, gp, gq, branch, w_pos, w_quat, mu, nmax,
                        kink_tol, tol)
    return y, f, res


@njit(cache=True)
def _solve_one(B, A, v0, g0, D, E, p, q, vk, hT, gp, gq, branch, w_pos, w_quat, mu, nmax,
               lam0, L0, max_iter, tol, kink_tol):
    x = project_pyramid(lam0, mu, nmax)
    fx, gx, _, _ = _eval(x, B, A, v0, g0, D, E, p, q, vk, hT, gp, gq, branch, w_pos, w_quat, True)
    zero = np.zeros(3)
    f0, g0_, _, _ = _eval(zero, B, A, v0, g0, D, E, p, q, vk, hT, gp, gq, branch, w_pos, w_quat, True)
    if f0 < fx:
        x, fx, gx = zero, f0, g0_
    L = L0
    y = x.copy()
    fy, gy = fx, gx
    t = 1.0
    res = np.inf
    it = 0
    for it in range(max_iter + 1):
        # convergence on the gradient mapping at the current best point
        xm = project_pyramid(x - gx / L, mu, nmax)
        res = L * np.sqrt(((x - xm) ** 2).sum())
        if res <= tol:
            break
        if it % 5 == 4 or it == max_iter:
            res = min(res, _kkt_residual(x, B, A, v0, g0, D, E, p, q, vk, hT, gp, gq, branch,
                                         w_pos, w_quat, mu, nmax, kink_tol, tol))
            if res <= tol:
                break
        if it % 25 == 24 or it == max_iter:
            # zigzag across kinks: try the smooth problem on their intersection
            done = False
            for n_eq in range(1, 4):
                xp, fp, rp = _polish(x, B, A, v0, g0, D, E, p, q, vk, hT, gp, gq, branch, w_pos,
                                     w_quat, mu, nmax, n_eq, 0.25 * nmax, L, tol, kink_tol)
                if fp <= fx:
                    # keep any improvement and restart momentum from it
                    x, fx, res = xp, fp, rp
                    fx, gx, _, _ = _eval(x, B, A, v0, g0, D, E, p, q, vk, hT, gp, gq, branch, w_pos, w_quat, True)
                    y = x.copy()
                    fy, gy = fx, gx
                    t = 1.0
                    if rp <= tol:
                        done = True
                        break
            if done:
                break
        if it == max_iter:
            break
        for _ in range(60):
            z = project_pyramid(y - gy / L, mu, nmax)
            fz, gz, _, _ = _eval(z, B, A, v0, g0, D, E, p, q, vk, hT, gp, gq, branch, w_pos, w_quat, True)
            d = z - y
            if fz <= fy + gy @ d + 0.5 * L * (d @ d) + 1e-15 * (1.0 + abs(fy)):
                break
            L *= 2.0
        tn = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        if fz <= fx:
            xn, fxn, gxn = z, fz, gz
        else:
            xn, fxn, gxn = x, fx, gx
        y = xn + (t / tn) * (z - xn) + ((t - 1.0) / tn) * (xn - x)
        y = project_pyramid(y, mu, nmax)
        if fz > fx:
            # momentum restart
            tn = 1.0
            y = xn.copy()
        x, fx, gx, t = xn, fxn, gxn, tn
        fy, gy, _, _ = _eval(y, B, A, v0, g0, D, E, p, q, vk, hT, gp, gq, branch, w_pos, w_quat, True)
        L = max(L * 0.9, 1e-12)
    return x, fx, res, it


@njit(cache=True)
def solve_candidates(Bs, As, v0, g0, D, E, p, q, vk, hT, gp, gq, branch, w_pos, w_quat,
                     mu, nmax, lam0, L0s, max_iter, tol, kink_tol):
    K = Bs.shape[0]
    lam = np.zeros((K, 3))
    cost = np.empty(K)
    res = np.empty(K)
    iters = np.zeros(K, dtype=np.int64)
    for k in range(K):
        x, f, r, it = _solve_one(Bs[k], As[k], v0, g0, D, E, p, q, vk, hT, gp, gq, branch,
                                 w_pos, w_quat, mu, nmax, lam0[k], L0s[k], max_iter, tol, kink_tol)
        lam[k] = x
        cost[k] = f
        res[k] = r
        iters[k] = it
    return lam, cost, res, iters


@njit(cache=True)
def eval_candidates_at(Bs, As, v0, g0, D, E, p, q, vk, hT, gp, gq, branch, w_pos, w_quat, lam):
    """Cost for each (candidate, force) pair; used by grid oracles and diagnostics."""
    K = lam.shape[0]
    out = np.empty(K)
    for k in range(K):
        c, _, _, _ = _eval(lam[k], Bs[k], As[k], v0, g0, D, E, p, q, vk, hT, gp, gq, branch, w_pos, w_quat, False)
        out[k] = c
    return out


# ---------------------------------------------------------------- python side

@dataclass
class CsoResult:
    best: int
    p_star: np.ndarray        # world frame
    p_star_body: np.ndarray
    n_star: np.ndarray        # world outward normal
    lam_star: np.ndarray
    costs: np.ndarray         # +inf for invalid or failed candidates
    l_min: float
    l_max: float
    lam_all: np.ndarray
    residuals: np.ndarray
    iterations: np.ndarray
    wall_time: float
    branch: int
    failed: np.ndarray = field(default_factory=lambda: np.zeros(0, bool))

    def to_dict(self):
        finite = np.isfinite(self.costs)
        return {
            "best": int(self.best),
            "p_star": self.p_star.tolist(),
            "lam_star": self.lam_star.tolist(),
            "costs": [float(c) if f else None for c, f in zip(self.costs, finite)],
            "l_min": self.l_min,
            "l_max": self.l_max,
            "iterations": int(self.iterations.sum()),
            "wall_time": self.wall_time,
            "branch": int(self.branch),
        }


@dataclass(frozen=True)
class CsoSolverParams:
    max_iter: int = 300
    tol: float = 1e-6
    kink_tol: float = 1e-6   # relative width of the clamp kink band in the stationarity test


def candidate_matrices(points, normals, t1, t2, frozen: ScmFrozenScene, x_o: Pose):
    """Per-candidate B = M^-1 J_r' and A = J_env M^-1 h J_r'."""
    Rm = x_o.R
    r = points @ Rm.T
    dirs = np.stack([-(normals @ Rm.T), t1 @ Rm.T, t2 @ Rm.T], axis=1)   # (K, 3, 3)
    Jr = np.concatenate([dirs, np.cross(r[:, None, :], dirs)], axis=2)      # (K, 3, 6)
    Bs = np.einsum("ij,kcj->kic", frozen.Minv, Jr)                          # (K, 6, 3)
    As = frozen.h * np.einsum("mi,kic->kmc", frozen.J_env, Bs)               # (K, m, 3)
    return np.ascontiguousarray(Bs), np.ascontiguousarray(As), Jr


def _scene_arrays(frozen: ScmFrozenScene, state: WorldState):
    h = frozen.h
    v0 = frozen.Minv @ frozen.tau_o
    g0 = frozen.J_env @ (frozen.Minv @ (h * frozen.tau_o))
    E = np.ascontiguousarray(frozen.Minv @ frozen.J_env.T / h)
    vk = frozen.v_k.copy() if frozen.carry_velocity else np.zeros(6)
    hT = h * frozen.horizon
    return v0, np.ascontiguousarray(g0), np.ascontiguousarray(frozen.D, dtype=float), E, vk, hT


def _lipschitz_guess(Bs, hT, spec):
    s_lin = np.linalg.norm(Bs[:, :3, :], axis=(1, 2))
    s_rot = np.linalg.norm(Bs[:, 3:, :], axis=(1, 2))
    L = 2 * (spec.w_pos * (hT * s_lin) ** 2 + (spec.w_quat + 1.0) * (hT * s_rot) ** 2)
    return np.maximum(L, 1e-9)


def _run(points, normals, t1, t2, frozen, state, spec, params: SystemParams, lam0=None,
         solver: CsoSolverParams = CsoSolverParams()):
    Bs, As, _ = candidate_matrices(points, normals, t1, t2, frozen, state.x_o)
    v0, g0, D, E, vk, hT = _scene_arrays(frozen, state)
    branch = objective_branch(state, spec)
    K = len(points)
    lam0 = np.zeros((K, 3)) if lam0 is None else np.ascontiguousarray(lam0, dtype=float)
    L0 = _lipschitz_guess(Bs, hT, spec)
    lam, cost, res, iters = solve_candidates(
        Bs, As, v0, g0, D, E, state.x_o.p.astype(float), state.x_o.q.astype(float), vk, hT,
        spec.goal.p.astype(float), spec.goal.q.astype(float), branch, float(spec.w_pos),
        float(spec.w_quat), float(params.mu_r), float(params.lam_max), lam0, L0,
        solver.max_iter, solver.tol, solver.kink_tol)
    failed = ~(res <= solver.tol) | ~np.isfinite(cost)
    cost = np.where(failed, np.inf, cost)
    return lam, cost, res, iters, failed, branch


def eval_candidate(sample: SurfaceSample, frozen: ScmFrozenScene, state: WorldState,
                   spec: CsoObjectiveSpec, params: SystemParams, lam0=None, solver=CsoSolverParams()):
    """(cost, force) for one body-frame sample; cost is +inf when the solve fails."""
    lam, cost, *_ = _run(sample.p[None], sample.n[None], sample.t1[None], sample.t2[None],
                         frozen, state, spec, params, None if lam0 is None else np.asarray(lam0)[None],
                         solver)
    return float(cost[0]), lam[0]


def select_contact(candidates: CandidateSet, frozen: ScmFrozenScene, state: WorldState,
                   spec: CsoObjectiveSpec, params: SystemParams, warm=None,
                   solver=CsoSolverParams()) -> CsoResult:
    t0 = time.perf_counter()
    idx = candidates.valid_indices
    if idx is None or len(idx) == 0:
        raise SolverError("no valid candidates")
    K = len(candidates)
    lam0 = None if warm is None else np.asarray(warm, dtype=float)[idx]
    lam_v, cost_v, res_v, it_v, fail_v, branch = _run(
        candidates.points[idx], candidates.normals[idx], candidates.t1[idx], candidates.t2[idx],
        frozen, state, spec, params, lam0, solver)
    costs = np.full(K, np.inf)
    costs[idx] = cost_v
    lam_all = np.zeros((K, 3)) if warm is None else np.array(warm, dtype=float)
    lam_all[idx] = lam_v
    res = np.full(K, np.nan)
    res[idx] = res_v
    iters = np.zeros(K, dtype=np.int64)
    iters[idx] = it_v
    failed = np.zeros(K, bool)
    failed[idx] = fail_v
    ok = np.isfinite(costs)
    if not ok.any():
        raise SolverError("all candidates failed")
    best = int(np.flatnonzero(costs == costs[ok].min()).min())
    Rm = state.x_o.R
    pb = candidates.points[best]
    return CsoResult(best, state.x_o.to_world(pb), pb.copy(), Rm @ candidates.normals[best],
                     lam_all[best].copy(), costs, float(costs[ok].min()), float(costs[ok].max()),
                     lam_all, res, iters, time.perf_counter() - t0, branch, failed)


def grid_forces(mu, nmax, pitch):
    """Every force on a cubic lattice of the given pitch inside the pyramid."""
    n = pitch * np.arange(int(np.floor(nmax / pitch + 1e-9)) + 1)
    k = int(np.floor(mu * nmax / pitch + 1e-9))
    t = pitch * np.arange(-k, k + 1)
    N, T1, T2 = np.meshgrid(n, t, t, indexing="ij")
    pts = np.stack([N.ravel(), T1.ravel(), T2.ravel()], axis=1)
    keep = (np.abs(pts[:, 1]) <= mu * pts[:, 0] + 1e-12) & (np.abs(pts[:, 2]) <= mu * pts[:, 0] + 1e-12)
    return pts[keep]


# ---------------------------------------------------------------- force closure

def force_closure_objective(contacts, wrenches, params: SystemParams, xi=1.0, zeta=None, w_lam=0.1,
                            x_o: Pose | None = None):
    """Disturbance-rejection force assignment for several robot contacts.

    contacts: list of SurfaceSample (body frame, outward normal) or
              (p_world, n_in, t1, t2) tuples. Returns (cost, forces (J, K, 3))."""
    from .scm import robot_jacobian, sample_jacobian
    if w_lam <= 0:
        raise ValueError("w_lam must be positive (it keeps the QP strictly convex)")
    x_o = Pose.identity() if x_o is None else x_o
    zeta = 0.5 * params.lam_max if zeta is None else zeta
    rows = []
    for c in contacts:
        if isinstance(c, SurfaceSample):
            rows.append(sample_jacobian(c.p, c.n, c.t1, c.t2, x_o))
        else:
            rows.append(robot_jacobian(*c, x_o))
    K = len(rows)
    if K == 0:
        raise InfeasibleGraspError("no contacts")
    if K * params.lam_max < zeta - 1e-12:
        raise InfeasibleGraspError(f"minimum normal force {zeta} unreachable with {K} contacts")
    G = np.concatenate(rows, axis=0).T  # (6, 3K)
    mu = params.mu_r
    # per contact: n >= 0, n <= nmax, mu n -+ t1 >= 0, mu n -+ t2 >= 0
    cons, rhs = [], []
    for i in range(K):
        o = 3 * i
        for coef in ([1, 0, 0], [-1, 0, 0], [mu, -1, 0], [mu, 1, 0], [mu, 0, -1], [mu, 0, 1]):
            r = np.zeros(3 * K)
            r[o:o + 3] = coef
            cons.append(r)
        rhs += [0.0, -params.lam_max, 0.0, 0.0, 0.0, 0.0]
    r = np.zeros(3 * K)
    r[0::3] = 1.0
    cons.append(r)
    rhs.append(zeta)
    A = np.array(cons)
    b = np.array(rhs)
    H = 2 * (G.T @ G + w_lam * np.eye(3 * K))
    wrenches = np.atleast_2d(np.asarray(wrenches, dtype=float))
    total = 0.0
    forces = np.zeros((len(wrenches), K, 3))
    # feasible start: the minimum normal force spread evenly, no friction
    x0 = np.zeros(3 * K)
    x0[0::3] = zeta / K
    for j, w in enumerate(wrenches):
        c = -2 * xi * G.T @ w
        lam, _ = solve_qp(H, c, A, b, x0=x0)
        forces[j] = lam.reshape(K, 3)
        resid = xi * w - G @ lam
        total += float(resid @ resid + w_lam * lam @ lam)
    return total, forces
