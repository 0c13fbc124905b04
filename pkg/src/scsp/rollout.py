"""Compiled closed-form rollouts for the planner.

Mirrors dynamics.step_cf_batch for convex meshes (inside test by face planes)
so that a few thousand candidate steps per planning cycle stay cheap. The
numpy batch step remains the reference implementation.
"""
from __future__ import annotations

import numpy as np
from numba import njit

from .dynamics import RolloutModel, gravity_wrench

E_Z = np.array([0.0, 0.0, 1.0])


@njit(cache=True)
def _quat_to_matrix(q):
    w, x, y, z = q[0], q[1], q[2], q[3]
    R = np.empty((3, 3))
    R[0, 0] = 1 - 2 * (y * y + z * z)
    R[0, 1] = 2 * (x * y - w * z)
    R[0, 2] = 2 * (x * z + w * y)
    R[1, 0] = 2 * (x * y + w * z)
    R[1, 1] = 1 - 2 * (x * x + z * z)
    R[1, 2] = 2 * (y * z - w * x)
    R[2, 0] = 2 * (x * z - w * y)
    R[2, 1] = 2 * (y * z + w * x)
    R[2, 2] = 1 - 2 * (x * x + y * y)
    return R


@njit(cache=True)
def _integrate_quat(q, w, h):
    r = w * h
    theta = np.sqrt(r[0] ** 2 + r[1] ** 2 + r[2] ** 2)
    half = 0.5 * theta
    k = 0.5 - theta ** 2 / 48.0 if theta < 1e-8 else np.sin(half) / theta
    a = np.array([np.cos(half), k * r[0], k * r[1], k * r[2]])
    b = q
    out = np.empty(4)
    out[0] = a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3]
    out[1] = a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2]
    out[2] = a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1]
    out[3] = a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0]
    return out / np.sqrt(out[0] ** 2 + out[1] ** 2 + out[2] ** 2 + out[3] ** 2)


@njit(cache=True)
def _cross(a, b):
    return np.array([a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]])


@njit(cache=True)
def _d3(a, b):
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


@njit(cache=True)
def _mv(A, x):
    """A @ x without a BLAS call (small fixed sizes)."""
    n, m = A.shape
    out = np.empty(n)
    for i in range(n):
        acc = 0.0
        for j in range(m):
            acc += A[i, j] * x[j]
        out[i] = acc
    return out


@njit(cache=True)
def _mtv(A, x):
    n, m = A.shape
    out = np.zeros(m)
    for i in range(n):
        for j in range(m):
            out[j] += A[i, j] * x[i]
    return out


@njit(cache=True)
def _sandwich(Rm, B):
    """Rm B Rm^T for 3x3 blocks."""
    T = np.empty((3, 3))
    for i in range(3):
        for k in range(3):
            T[i, k] = Rm[i, 0] * B[0, k] + Rm[i, 1] * B[1, k] + Rm[i, 2] * B[2, k]
    out = np.empty((3, 3))
    for i in range(3):
        for k in range(3):
            out[i, k] = T[i, 0] * Rm[k, 0] + T[i, 1] * Rm[k, 1] + T[i, 2] * Rm[k, 2]
    return out


@njit(cache=True)
def _closest_on_triangle(p, T):
    """Closest point of the triangle T (3x3, rows are vertices) to p, as a tuple."""
    ax, ay, az = T[0, 0], T[0, 1], T[0, 2]
    abx, aby, abz = T[1, 0] - ax, T[1, 1] - ay, T[1, 2] - az
    acx, acy, acz = T[2, 0] - ax, T[2, 1] - ay, T[2, 2] - az
    apx, apy, apz = p[0] - ax, p[1] - ay, p[2] - az
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0.0 and d2 <= 0.0:
        return ax, ay, az
    bpx, bpy, bpz = p[0] - T[1, 0], p[1] - T[1, 1], p[2] - T[1, 2]
    d3 = abx * bpx + aby * bpy + abz * bpz
    d4 = acx * bpx + acy * bpy + acz * bpz
    if d3 >= 0.0 and d4 <= d3:
        return T[1, 0], T[1, 1], T[1, 2]
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        t = d1 / (d1 - d3)
        return ax + t * abx, ay + t * aby, az + t * abz
    cpx, cpy, cpz = p[0] - T[2, 0], p[1] - T[2, 1], p[2] - T[2, 2]
    d5 = abx * cpx + aby * cpy + abz * cpz
    d6 = acx * cpx + acy * cpy + acz * cpz
    if d6 >= 0.0 and d5 <= d6:
        return T[2, 0], T[2, 1], T[2, 2]
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        t = d2 / (d2 - d6)
        return ax + t * acx, ay + t * acy, az + t * acz
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return (T[1, 0] + t * (T[2, 0] - T[1, 0]), T[1, 1] + t * (T[2, 1] - T[1, 1]),
                T[1, 2] + t * (T[2, 2] - T[1, 2]))
    denom = 1.0 / (va + vb + vc)
    v, w = vb * denom, vc * denom
    return ax + abx * v + acx * w, ay + aby * v + acy * w, az + abz * v + acz * w


@njit(cache=True)
def _yaw_axis(R):
    for col in range(2):
        a = np.array([R[0, col], R[1, col], 0.0])
        n = np.sqrt(a[0] ** 2 + a[1] ** 2)
        if n > 1e-6:
            return a / n
    return np.array([1.0, 0.0, 0.0])


@njit(cache=True)
def _row(a_o, a_r, ph, Qi_o, Qib_o, Kr_inv, u, R_reg, h, s_o, s_r):
    """Clamped diagonal impulse of one active pyramid row; accumulates J'beta."""
    Wd = R_reg
    g = ph
    for c in range(6):
        qa = 0.0
        for e in range(6):
            qa += Qi_o[c, e] * a_o[e]
        Wd += a_o[c] * qa
        g += a_o[c] * Qib_o[c]
    for c in range(3):
        qa = 0.0
        for e in range(3):
            qa += Kr_inv[c, e] * a_r[e]
        Wd += a_r[c] * qa
        g += a_r[c] * u[c]
    beta = max(-h * g / Wd, 0.0)
    if beta > 0.0:
        for c in range(6):
            s_o[c] += a_o[c] * beta
        for c in range(3):
            s_r[c] += a_r[c] * beta


@njit(cache=True)
def cf_step(p, q, pee, u, env_pts, tris, fnorm, foff, Minv_body, Kr_inv, tau, mu_env, mu_r, n_d,
            h, eps, R_reg, margin, r_tip):
    """One closed-form step; returns (p, q, p_ee, gap of the fingertip).

    Only active rows are assembled; inactive rows have zero impulse."""
    Rm = _quat_to_matrix(q)
    ya = _yaw_axis(Rm)
    t2e = np.array([-ya[1], ya[0], 0.0])      # e_z x ya
    ang = 2.0 * np.pi / n_d
    cs = np.empty(n_d)
    sn = np.empty(n_d)
    for j in range(n_d):
        cs[j] = np.cos(ang * j)
        sn[j] = np.sin(ang * j)
    # Q^-1 blocks
    Qi_o = np.empty((6, 6))
    RM = _sandwich(Rm, Minv_body[:3, :3])
    RI = _sandwich(Rm, Minv_body[3:, 3:])
    RX = _sandwich(Rm, Minv_body[:3, 3:])
    RY = _sandwich(Rm, Minv_body[3:, :3])
    c0 = h * h / eps
    for i in range(3):
        for k in range(3):
            Qi_o[i, k] = c0 * RM[i, k]
            Qi_o[3 + i, 3 + k] = c0 * RI[i, k]
            Qi_o[i, 3 + k] = c0 * RX[i, k]
            Qi_o[3 + i, k] = c0 * RY[i, k]
    Qib_o = _mv(Qi_o, tau)
    s_o = np.zeros(6)
    s_r = np.zeros(3)
    a_o = np.empty(6)
    a_r = np.zeros(3)
    for i in range(env_pts.shape[0]):
        r = _mv(Rm, env_pts[i])
        ph = r[2] + p[2]
        if not ph < margin:
            continue
        for j in range(n_d):
            a0 = -mu_env * (cs[j] * ya[0] + sn[j] * t2e[0])
            a1 = -mu_env * (cs[j] * ya[1] + sn[j] * t2e[1])
            a2 = 1.0
            a_o[0], a_o[1], a_o[2] = a0, a1, a2
            a_o[3] = r[1] * a2 - r[2] * a1
            a_o[4] = r[2] * a0 - r[0] * a2
            a_o[5] = r[0] * a1 - r[1] * a0
            _row(a_o, a_r, ph, Qi_o, Qib_o, Kr_inv, u, R_reg, h, s_o, s_r)
    # fingertip
    cb = _mtv(Rm, pee - p)
    best = np.inf
    closest = np.zeros(3)
    face = 0
    for f in range(tris.shape[0]):
        x, y, z = _closest_on_triangle(cb, tris[f])
        dd = (x - cb[0]) ** 2 + (y - cb[1]) ** 2 + (z - cb[2]) ** 2
        if dd < best:
            best = dd
            closest[0], closest[1], closest[2] = x, y, z
            face = f
    inside = True
    for f in range(tris.shape[0]):
        if _d3(fnorm[f], cb) - foff[f] >= 0.0:
            inside = False
            break
    dist = np.sqrt(best)
    sd = -dist if inside else dist
    gap = sd - r_tip
    if gap < margin:
        diff = cb - closest
        nd = np.sqrt(_d3(diff, diff))
        if nd > 1e-9:
            nb = diff / nd * (-1.0 if inside else 1.0)
        else:
            nb = fnorm[face].copy()
        n_out = _mv(Rm, nb)
        pc = _mv(Rm, closest) + p
        n_in = -n_out
        aa = ya if abs(n_in[2]) > 1 - 1e-6 else np.array([0.0, 0.0, 1.0])
        t1 = aa - _d3(aa, n_in) * n_in
        t1 = t1 / np.sqrt(_d3(t1, t1))
        t2 = _cross(n_in, t1)
        rr = pc - p
        for j in range(n_d):
            a = n_out - mu_r * (cs[j] * t1 + sn[j] * t2)
            ra = _cross(rr, a)
            for c in range(3):
                a_o[c] = -a[c]
                a_o[3 + c] = -ra[c]
                a_r[c] = a[c]
            _row(a_o, a_r, gap, Qi_o, Qib_o, Kr_inv, u, R_reg, h, s_o, s_r)
    v_o = Qib_o / h + _mv(Qi_o, s_o) / (h * h)
    v_r = u / h + _mv(Kr_inv, s_r) / (h * h)
    return p + h * v_o[:3], _integrate_quat(q, v_o[3:], h), pee + h * v_r, gap


class CompiledModel:
    """Arrays for the compiled step, built once per planner."""

    def __init__(self, model: RolloutModel, tau_o=None):
        if not model.convex:
            raise ValueError("compiled rollouts need a convex mesh")
        prm = model.params
        mesh = model.mesh
        self.model = model
        self.env_pts = np.ascontiguousarray(model.env_points, dtype=float)
        self.tris = np.ascontiguousarray(mesh.triangles, dtype=float)
        self.fnorm = np.ascontiguousarray(mesh.face_normals, dtype=float)
        self.foff = np.einsum("ij,ij->i", mesh.face_normals, mesh.face_centers)
        self.Minv = np.linalg.inv(prm.M_o)
        self.Kr_inv = np.linalg.inv(prm.K_r)
        self.tau = np.asarray(gravity_wrench(prm) if tau_o is None else tau_o, dtype=float)
        self.args = (self.env_pts, self.tris, self.fnorm, self.foff, self.Minv, self.Kr_inv, self.tau,
                     float(prm.mu_env), float(prm.mu_r), int(prm.n_d), float(prm.h), float(prm.eps),
                     float(prm.R), float(prm.margin), float(prm.r_tip))

    def step(self, p, q, pee, u):
        return cf_step(np.asarray(p, float), np.asarray(q, float), np.asarray(pee, float),
                       np.asarray(u, float), *self.args)


# cost layout shared with cpo.pack_cost
MODE_LP, MODE_TRACK, MODE_ALIGN = 0, 1, 2
TERM_CSO, TERM_POSE = 0, 1


@njit(cache=True)
def _up(q):
    w, x, y, z = q[0], q[1], q[2], q[3]
    return np.array([2.0 * (x * z + w * y), 2.0 * (y * z - w * x), 1.0 - 2.0 * (x * x + y * y)])


@njit(cache=True)
def stage_lp(pee, po, qo, gamma, w_att, w_obs, sigma, eps_log, w_con, w_o, con_ref, p_lift, p_ref_body):
    if gamma == 0:
        d = pee - p_lift
        c = w_att * (d @ d)
        e = pee - po
        d2 = e @ e
        if d2 <= sigma:
            c -= abs(w_obs) * np.log(d2 + eps_log)
        return c
    e = pee - po
    d2 = e @ e
    if con_ref:
        tgt = _quat_to_matrix(qo) @ p_ref_body + po
        f = pee - tgt
        dc = f @ f
    else:
        dc = d2
    return w_con * np.log(dc + eps_log) + w_o * d2


@njit(cache=True)
def align_cost(pee, po, pg):
    a = pg - po
    b = po - pee
    na = np.sqrt(a @ a)
    nb = np.sqrt(b @ b)
    if na < 1e-12 or nb < 1e-12:
        return 0.0
    return -((a @ b) / (na * nb) + 1.0) / 2.0


@njit(cache=True)
def terminal_cost(po, qo, kind, branch, gp, gq, w_pos, w_quat, w_z):
    if kind == TERM_CSO and branch == 1:
        return 1.0 - _up(qo) @ _up(gq)
    d = po - gp
    dq = qo @ gq
    return w_pos * (d[0] * d[0] + d[1] * d[1] + w_z * d[2] * d[2]) + w_quat * (1.0 - dq * dq)


@njit(cache=True)
def rollout_costs(p0, q0, pee0, U, env_pts, tris, fnorm, foff, Minv_body, Kr_inv, tau, mu_env, mu_r,
                  n_d, h, eps, R_reg, margin, r_tip, cw, p_lift, p_ref_body, gp, gq):
    """Total cost of each control sequence U[s] from the same start state.

    cw = [mode, gamma, w_lp, w_u, w_term, w_att, w_obs, sigma, eps_log, w_con, w_o,
          con_ref, w_pos, w_quat, branch, term_kind, w_track, w_align, w_z]"""
    S, N = U.shape[0], U.shape[1]
    mode = int(cw[0])
    gamma = int(cw[1])
    w_lp, w_u, w_term = cw[2], cw[3], cw[4]
    out = np.empty(S)
    for s in range(S):
        p, q, pee = p0.copy(), q0.copy(), pee0.copy()
        c = 0.0
        for t in range(N):
            u = U[s, t].copy()
            # fingertip stays above the ground
            if pee[2] + u[2] < r_tip:
                u[2] = r_tip - pee[2]
            p, q, pee, _ = cf_step(p, q, pee, u, env_pts, tris, fnorm, foff, Minv_body, Kr_inv, tau,
                                   mu_env, mu_r, n_d, h, eps, R_reg, margin, r_tip)
            if mode == MODE_LP:
                c += w_lp * stage_lp(pee, p, q, gamma, cw[5], cw[6], cw[7], cw[8], cw[9], cw[10],
                                     cw[11] > 0.5, p_lift, p_ref_body)
            else:
                e = p - pee
                c += cw[16] * (e @ e)
                if mode == MODE_ALIGN:
                    c += cw[17] * align_cost(pee, p, gp)
            c += w_u * (u @ u)
        c += w_term * terminal_cost(p, q, int(cw[15]), int(cw[14]), gp, gq, cw[12], cw[13], cw[18])
        out[s] = c if np.isfinite(c) else np.inf
    return out
