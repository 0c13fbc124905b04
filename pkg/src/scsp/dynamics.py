"""Quasi-static contact dynamics for one rigid object and a spherical fingertip.

Generalized velocity v = [v_lin, omega, v_ee] (world frame, 9 entries).
One step solves

    min_v  0.5 h^2 v'Qv - h v'b   s.t.  (J^n - mu J^{d_j}) v + phi/h >= 0

with Q = blockdiag(eps M_o / h^2, K_r) and b = [tau_o; K_r u]. With this
scaling the object obeys eps M_o v = h tau_o + J'beta and the fingertip
tracks the per-step displacement u through its stiffness. The multiplier
beta of each pyramid row is the contact impulse, and it solves

    0 <= beta  _|_  (1/h)(J Q^-1 J' + R) beta + (J Q^-1 b + phi) >= 0.

The primal velocity is recovered as v = Q^-1 b / h + Q^-1 J' beta / h^2.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, SolverError
from .geometry import CandidateSet, TriMesh, closest_points_on_triangles, signed_distance
from .lcp import solve_lcp
from .rotations import integrate_quat, quat_identity, quat_normalize, quat_to_matrix

GRAVITY = 9.81
E_Z = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class Pose:
    p: np.ndarray
    q: np.ndarray

    @classmethod
    def identity(cls):
        return cls(np.zeros(3), quat_identity())

    @classmethod
    def make(cls, p, q=None):
        return cls(np.asarray(p, dtype=float).copy(),
                   quat_identity() if q is None else quat_normalize(q))

    @property
    def R(self):
        return quat_to_matrix(self.q)

    def to_world(self, pts):
        return np.asarray(pts) @ self.R.T + self.p

    def to_body(self, pts):
        return (np.asarray(pts) - self.p) @ self.R

    def as_array(self):
        return np.concatenate([self.p, self.q])


@dataclass(frozen=True)
class WorldState:
    x_o: Pose
    p_ee: np.ndarray
    v_o: np.ndarray = field(default_factory=lambda: np.zeros(6))
    v_ee: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def with_pose(self, x_o):
        return replace(self, x_o=x_o)


@dataclass(frozen=True)
class SystemParams:
    """M_o is given in the object body frame (mass block, inertia block)."""
    M_o: np.ndarray
    K_r: np.ndarray
    mu_env: float = 0.5
    mu_r: float = 0.5
    h: float = 0.02
    n_d: int = 4
    R: float = 1e-6
    lam_max: float = 0.2
    eps: float = 1.0
    mass: float = 0.1
    gravity: float = GRAVITY
    margin: float = 0.01
    r_tip: float = 0.01
    carry_velocity: bool = False

    def __post_init__(self):
        M = np.asarray(self.M_o, dtype=float)
        K = np.asarray(self.K_r, dtype=float)
        if M.shape != (6, 6) or K.shape != (3, 3):
            raise ConfigError("M_o must be 6x6 and K_r 3x3")
        for name, A in (("M_o", M), ("K_r", K)):
            if not np.allclose(A, A.T) or np.linalg.eigvalsh(A).min() <= 0:
                raise ConfigError(f"{name} must be symmetric positive definite")
        if self.h <= 0 or self.R <= 0 or self.eps <= 0:
            raise ConfigError("h, R and eps must be positive")
        if self.n_d < 4 or self.n_d % 2:
            raise ConfigError("n_d must be even and >= 4")
        if self.mu_env < 0 or self.mu_r < 0:
            raise ConfigError("friction coefficients must be nonnegative")
        if self.lam_max <= 0 or self.mass <= 0 or self.margin < 0 or self.r_tip < 0:
            raise ConfigError("lam_max, mass must be positive; margin, r_tip nonnegative")
        object.__setattr__(self, "M_o", M)
        object.__setattr__(self, "K_r", K)

    @classmethod
    def paper_planner(cls, **kw):
        """Planner-side parameters with the diagonal mass matrix from the experiments."""
        kw.setdefault("M_o", np.diag([50.0, 50.0, 50.0, 0.05, 0.05, 0.05]))
        kw.setdefault("K_r", 300.0 * np.eye(3))
        return cls(**kw)

    def world_mass(self, q):
        """M_o expressed in world coordinates for orientation q."""
        Rm = quat_to_matrix(q)
        T = np.zeros((6, 6))
        T[:3, :3] = Rm
        T[3:, 3:] = Rm
        return T @ self.M_o @ T.T

    def directions(self):
        ang = 2 * np.pi * np.arange(self.n_d) / self.n_d
        return np.cos(ang), np.sin(ang)


@dataclass(frozen=True)
class ContactPoint:
    p_c: np.ndarray
    n: np.ndarray
    t1: np.ndarray
    t2: np.ndarray
    phi: float
    pair: str  # "env" or "robot"
    mu: float


@dataclass
class ContactJacobians:
    Jn: np.ndarray      # (nc, 9)
    Jt1: np.ndarray
    Jt2: np.ndarray
    J_tilde: np.ndarray  # (nc * n_d, 9)
    phi_tilde: np.ndarray


@dataclass
class SystemMatrices:
    Q: np.ndarray
    b: np.ndarray
    J_tilde: np.ndarray
    phi_tilde: np.ndarray
    jac: ContactJacobians


@dataclass
class ContactImpulses:
    beta: np.ndarray
    slack: np.ndarray       # w of the regularized LCP (m)
    contacts: list
    iterations: int = 0
    pivots: int = 0
    residual: float = 0.0

    def kkt(self):
        """(min primal slack, min impulse, max |beta * slack|)."""
        if len(self.beta) == 0:
            return 0.0, 0.0, 0.0
        return float(self.slack.min()), float(self.beta.min()), float(np.abs(self.beta * self.slack).max())

    def per_contact(self, n_d):
        return self.beta.reshape(-1, n_d)


# ---------------------------------------------------------------- contact frames

def yaw_axis(q):
    """Horizontal reference axis that turns with the object's yaw."""
    Rm = quat_to_matrix(q)
    for col in (0, 1):
        a = Rm[:, col].copy()
        a[2] = 0.0
        nrm = np.linalg.norm(a)
        if nrm > 1e-6:
            return a / nrm
    return np.array([1.0, 0.0, 0.0])


def frame_from_normal(n, q_obj):
    """Tangents for normal n: fixed axis e_z, falling back to the yaw axis."""
    a = E_Z if abs(n @ E_Z) <= 1 - 1e-6 else yaw_axis(q_obj)
    t1 = a - (a @ n) * n
    t1 /= np.linalg.norm(t1)
    return t1, np.cross(n, t1)


def _robot_contact(state: WorldState, mesh: TriMesh, params: SystemParams, convex=None):
    c_body = state.x_o.to_body(state.p_ee)
    dist, cp, face = signed_distance(mesh, c_body[None])
    dist, cp, face = float(dist[0]), cp[0], int(face[0])
    phi = dist - params.r_tip
    Rm = state.x_o.R
    diff = c_body - cp
    nd = np.linalg.norm(diff)
    if nd > 1e-9:
        n_out = diff / nd if dist >= 0 else -diff / nd
    else:
        n_out = mesh.face_normals[face]
    n_out = Rm @ n_out
    n_in = -n_out
    t1, t2 = frame_from_normal(n_in, state.x_o.q)
    return ContactPoint(state.x_o.to_world(cp), n_in, t1, t2, phi, "robot", params.mu_r)


def detect_contacts(state: WorldState, mesh: TriMesh, candidates: CandidateSet | np.ndarray,
                    params: SystemParams, robot=True) -> list[ContactPoint]:
    """Env contacts from collision points below the ground margin, plus the fingertip contact."""
    pts = candidates.points if isinstance(candidates, CandidateSet) else np.asarray(candidates)
    world = state.x_o.to_world(pts)
    out = []
    t1 = yaw_axis(state.x_o.q)
    t2 = np.cross(E_Z, t1)
    for pw in world:
        phi = float(pw[2])
        if phi < params.margin:
            out.append(ContactPoint(pw.copy(), E_Z.copy(), t1.copy(), t2.copy(), phi, "env", params.mu_env))
    if robot:
        rc = _robot_contact(state, mesh, params)
        if rc.phi < params.margin:
            out.append(rc)
    return out


# ---------------------------------------------------------------- assembly

def contact_jacobians(state: WorldState, contacts, params: SystemParams) -> ContactJacobians:
    nc = len(contacts)
    Jn = np.zeros((nc, 9))
    Jt1 = np.zeros((nc, 9))
    Jt2 = np.zeros((nc, 9))
    mus = np.zeros(nc)
    phi = np.zeros(nc)
    for i, c in enumerate(contacts):
        r = c.p_c - state.x_o.p
        if c.pair == "env":
            # velocity of the object point along the ground frame
            for J, d in ((Jn, c.n), (Jt1, c.t1), (Jt2, c.t2)):
                J[i, :3] = d
                J[i, 3:6] = np.cross(r, d)
        else:
            # gap rate: outward normal dotted with fingertip minus object point velocity
            for J, d in ((Jn, -c.n), (Jt1, c.t1), (Jt2, c.t2)):
                J[i, :3] = -d
                J[i, 3:6] = -np.cross(r, d)
                J[i, 6:] = d
        mus[i] = c.mu
        phi[i] = c.phi
    cs, sn = params.directions()
    nd = params.n_d
    J_tilde = (Jn[:, None, :] - mus[:, None, None] * (cs[None, :, None] * Jt1[:, None, :]
                                                      + sn[None, :, None] * Jt2[:, None, :]))
    return ContactJacobians(Jn, Jt1, Jt2, J_tilde.reshape(nc * nd, 9), np.repeat(phi, nd))


def gravity_wrench(params: SystemParams):
    return np.array([0.0, 0.0, -params.mass * params.gravity, 0.0, 0.0, 0.0])


def assemble_system(state: WorldState, contacts, u, params: SystemParams, tau_o=None) -> SystemMatrices:
    h = params.h
    Q = np.zeros((9, 9))
    Q[:6, :6] = params.eps * params.world_mass(state.x_o.q) / h ** 2
    Q[6:, 6:] = params.K_r
    try:
        np.linalg.cholesky(Q)
    except np.linalg.LinAlgError as exc:
        raise ConfigError("Q is not positive definite") from exc
    if tau_o is None:
        tau_o = gravity_wrench(params)
    # tau_r = 0: the fingertip is driven only by its stiffness toward p_ee + u
    b = np.concatenate([tau_o, params.K_r @ np.asarray(u, dtype=float)])
    jac = contact_jacobians(state, contacts, params)
    return SystemMatrices(Q, b, jac.J_tilde, jac.phi_tilde, jac)


def delassus(sm: SystemMatrices, params: SystemParams):
    Qi_Jt = np.linalg.solve(sm.Q, sm.J_tilde.T)
    W = sm.J_tilde @ Qi_Jt + params.R * np.eye(len(sm.phi_tilde))
    return 0.5 * (W + W.T), Qi_Jt


def integrate(state: WorldState, v, params: SystemParams) -> WorldState:
    h = params.h
    v = np.asarray(v, dtype=float)
    v_obj = v[:6] + (state.v_o if params.carry_velocity else 0.0)
    v_ee = v[6:] + (state.v_ee if params.carry_velocity else 0.0)
    p = state.x_o.p + h * v_obj[:3]
    q = integrate_quat(state.x_o.q, v_obj[3:], h)
    return WorldState(Pose(p, q), state.p_ee + h * v_ee, v[:6].copy(), v[6:].copy())


def solve_contact_lcp(sm: SystemMatrices, params: SystemParams, beta0=None):
    """Returns (beta, slack, lcp solution, Q^-1 b)."""
    h = params.h
    W, Qi_Jt = delassus(sm, params)
    Qi_b = np.linalg.solve(sm.Q, sm.b)
    g = sm.J_tilde @ Qi_b + sm.phi_tilde
    sol = solve_lcp(W / h, g, x0=beta0)
    return sol, Qi_b, Qi_Jt


def step_exact(state: WorldState, u, mesh: TriMesh, candidates, params: SystemParams,
               beta0=None, tau_o=None, contacts=None):
    """Ground-truth step. Returns (next state, ContactImpulses)."""
    if contacts is None:
        contacts = detect_contacts(state, mesh, candidates, params)
    sm = assemble_system(state, contacts, u, params, tau_o)
    h = params.h
    try:
        sol, Qi_b, Qi_Jt = solve_contact_lcp(sm, params, beta0)
    except SolverError:
        raise
    v = Qi_b / h + Qi_Jt @ sol.x / h ** 2
    if not np.all(np.isfinite(v)):
        raise SolverError("non-finite velocity")
    imp = ContactImpulses(sol.x, sol.w, contacts, sol.iterations, sol.pivots, sol.residual)
    return integrate(state, v, params), imp


def cf_impulse(sm: SystemMatrices, params: SystemParams):
    """Closed-form impulse max(-h K (J Q^-1 b + phi), 0) with K = diag(J Q^-1 J' + R)^-1."""
    h = params.h
    Qi_b = np.linalg.solve(sm.Q, sm.b)
    Qi_Jt = np.linalg.solve(sm.Q, sm.J_tilde.T)
    Wd = np.einsum("ij,ji->i", sm.J_tilde, Qi_Jt) + params.R
    g = sm.J_tilde @ Qi_b + sm.phi_tilde
    beta = np.maximum(-h * g / Wd, 0.0)
    return beta, Qi_b, Qi_Jt


def step_cf(state: WorldState, u, contacts, params: SystemParams, tau_o=None) -> WorldState:
    """Complementarity-free step on a given contact list."""
    sm = assemble_system(state, contacts, u, params, tau_o)
    beta, Qi_b, Qi_Jt = cf_impulse(sm, params)
    h = params.h
    v = Qi_b / h + Qi_Jt @ beta / h ** 2
    return integrate(state, v, params)


# ---------------------------------------------------------------- batched closed-form model

@dataclass(frozen=True)
class RolloutModel:
    """Planner-side geometry for vectorized complementarity-free rollouts."""
    mesh: TriMesh
    env_points: np.ndarray  # body-frame collision points
    params: SystemParams
    convex: bool = True

    @classmethod
    def build(cls, mesh, env_points, params):
        pts = env_points.points if isinstance(env_points, CandidateSet) else np.asarray(env_points)
        return cls(mesh, np.asarray(pts, dtype=float), params, mesh.is_convex())


def _batch_frames(n, yaw_a):
    """Tangent frames for a batch of unit normals (..., 3); yaw_a (B, 3) per batch element."""
    vert = np.abs(n[..., 2]) > 1 - 1e-6
    a = np.where(vert[..., None], np.broadcast_to(yaw_a[:, None, :] if n.ndim == 3 else yaw_a, n.shape), E_Z)
    t1 = a - np.sum(a * n, axis=-1, keepdims=True) * n
    t1 /= np.linalg.norm(t1, axis=-1, keepdims=True)
    return t1, np.cross(n, t1)


def batch_yaw_axis(Rm):
    a = Rm[:, :, 0].copy()
    a[:, 2] = 0.0
    nrm = np.linalg.norm(a, axis=1)
    b = Rm[:, :, 1].copy()
    b[:, 2] = 0.0
    use_b = nrm <= 1e-6
    a = np.where(use_b[:, None], b, a)
    nrm = np.linalg.norm(a, axis=1)
    a = np.where((nrm <= 1e-6)[:, None], np.array([1.0, 0.0, 0.0]), a / np.maximum(nrm, 1e-300)[:, None])
    return a


def batch_robot_geometry(model: RolloutModel, p_o, Rm, p_ee):
    """Signed gap, world contact point and outward normal for fingertips (B, 3)."""
    mesh = model.mesh
    c_body = np.einsum("bji,bj->bi", Rm, p_ee - p_o)
    cp = closest_points_on_triangles(c_body, mesh.triangles)
    d2 = ((cp - c_body[:, None, :]) ** 2).sum(-1)
    face = np.argmin(d2, axis=1)
    rows = np.arange(len(c_body))
    closest = cp[rows, face]
    dist = np.sqrt(d2[rows, face])
    if model.convex:
        plane = (c_body @ mesh.face_normals.T
                 - np.einsum("ij,ij->i", mesh.face_normals, mesh.face_centers)[None])
        inside = np.all(plane < 0, axis=1)
    else:
        from .geometry import winding_number
        inside = winding_number(mesh, c_body) > 0.5
    sd = np.where(inside, -dist, dist)
    diff = c_body - closest
    nd = np.linalg.norm(diff, axis=1)
    n_body = np.where((nd > 1e-9)[:, None], diff / np.maximum(nd, 1e-300)[:, None] * np.where(inside, -1.0, 1.0)[:, None],
                      mesh.face_normals[face])
    n_out = np.einsum("bij,bj->bi", Rm, n_body)
    p_c = np.einsum("bij,bj->bi", Rm, closest) + p_o
    return sd - model.params.r_tip, p_c, n_out


def step_cf_batch(model: RolloutModel, p_o, q_o, p_ee, u, v_prev=None, tau_o=None):
    """Vectorized closed-form step for B states. Returns (p_o, q_o, p_ee, v)."""
    prm = model.params
    h = prm.h
    B = len(p_o)
    Rm = quat_to_matrix(q_o)
    cs, sn = prm.directions()
    yaw_a = batch_yaw_axis(Rm)
    # env rows
    world = np.einsum("bij,mj->bmi", Rm, model.env_points) + p_o[:, None, :]
    r_env = world - p_o[:, None, :]
    phi_env = world[:, :, 2]
    t1e = yaw_a[:, None, :]
    t2e = np.cross(E_Z, yaw_a)[:, None, :]
    d_env = cs[None, None, :, None] * t1e[:, :, None, :] + sn[None, None, :, None] * t2e[:, :, None, :]
    a_env = E_Z - prm.mu_env * d_env                                   # (B, 1, nd, 3)
    a_env = np.broadcast_to(a_env, (B, len(model.env_points), prm.n_d, 3))
    J_env = np.zeros((B, len(model.env_points), prm.n_d, 9))
    J_env[..., :3] = a_env
    J_env[..., 3:6] = np.cross(r_env[:, :, None, :], a_env)
    act_env = phi_env < prm.margin
    # robot row
    phi_r, pc_r, n_out = batch_robot_geometry(model, p_o, Rm, p_ee)
    t1r, t2r = _batch_frames(-n_out, yaw_a)
    d_r = cs[None, :, None] * t1r[:, None, :] + sn[None, :, None] * t2r[:, None, :]
    a_r = n_out[:, None, :] - prm.mu_r * d_r                            # (B, nd, 3)
    r_r = pc_r - p_o
    J_r = np.zeros((B, 1, prm.n_d, 9))
    J_r[:, 0, :, :3] = -a_r
    J_r[:, 0, :, 3:6] = -np.cross(r_r[:, None, :], a_r)
    J_r[:, 0, :, 6:] = a_r
    act_r = phi_r < prm.margin
    J = np.concatenate([J_env, J_r], axis=1).reshape(B, -1, 9)
    phi = np.concatenate([phi_env, phi_r[:, None]], axis=1)
    act = np.concatenate([act_env, act_r[:, None]], axis=1)
    phi = np.repeat(phi, prm.n_d, axis=1)
    act = np.repeat(act, prm.n_d, axis=1)
    # Q^-1 per sample
    Minv_body = np.linalg.inv(prm.M_o)
    T = np.zeros((B, 6, 6))
    T[:, :3, :3] = Rm
    T[:, 3:, 3:] = Rm
    Qi_o = (h ** 2 / prm.eps) * np.einsum("bij,jk,blk->bil", T, Minv_body, T)
    Kr_inv = np.linalg.inv(prm.K_r)
    if tau_o is None:
        tau_o = gravity_wrench(prm)
    Qib_o = np.einsum("bij,j->bi", Qi_o, tau_o)
    Qib_r = np.asarray(u, dtype=float) @ np.eye(3)  # K_r^-1 K_r u
    Qib = np.concatenate([Qib_o, Qib_r], axis=1)
    QiJt_o = np.einsum("bij,bmj->bim", Qi_o, J[..., :6])
    QiJt_r = np.einsum("ij,bmj->bim", Kr_inv, J[..., 6:])
    Wd = np.einsum("bmi,bim->bm", J[..., :6], QiJt_o) + np.einsum("bmi,bim->bm", J[..., 6:], QiJt_r) + prm.R
    g = np.einsum("bmi,bi->bm", J, Qib) + phi
    beta = np.where(act, np.maximum(-h * g / Wd, 0.0), 0.0)
    v_o = Qib_o / h + np.einsum("bim,bm->bi", QiJt_o, beta) / h ** 2
    v_r = Qib_r / h + np.einsum("bim,bm->bi", QiJt_r, beta) / h ** 2
    v = np.concatenate([v_o, v_r], axis=1)
    if prm.carry_velocity and v_prev is not None:
        v_int = v + v_prev
    else:
        v_int = v
    p_new = p_o + h * v_int[:, :3]
    q_new = integrate_quat(q_o, v_int[:, 3:6], h)
    pee_new = p_ee + h * v_int[:, 6:]
    return p_new, q_new, pee_new, v
