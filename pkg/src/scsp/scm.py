"""Surrogate contact model: decoupled, frozen-set environment response.

Per environment pyramid row j the impulse is the clamped one-row solution

    lam_j = max(-(J_j M^-1 b) / D_j, 0),   b = h (tau_o + J_r' lam_r)

with D the diagonal of the per-contact Delassus block plus a small
scale-relative regularizer. The object velocity is then

    v = M^-1 (b + J' lam) / h

so prediction is piecewise affine in the robot force lam_r. The force-unit
quantity returned by env_force is lam / h.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import ContactPoint, Pose, SystemParams, WorldState, contact_jacobians, gravity_wrench
from .rotations import integrate_quat, integrate_quat_jacobian, quat_to_matrix


@dataclass(frozen=True, eq=False)
class DelassusBlocks:
    blocks: np.ndarray          # (n_env, n_d, n_d)
    W_full: np.ndarray          # (n_env*n_d, n_env*n_d), includes R
    offdiag_norms: np.ndarray   # (n_env, n_env) spectral norms of W_ij, zero diagonal

    @property
    def n_env(self):
        return len(self.blocks)


@dataclass(frozen=True, eq=False)
class ScmFrozenScene:
    J_env: np.ndarray    # (m, 6) pyramid rows acting on the object twist
    D: np.ndarray        # (m,) diagonal approximation
    Minv: np.ndarray     # (6, 6) world-frame inverse mass
    tau_o: np.ndarray    # (6,)
    h: float
    n_d: int
    x0: Pose
    blocks: DelassusBlocks
    v_k: np.ndarray      # object velocity at freeze time (used only with carry_velocity)
    carry_velocity: bool = False
    horizon: int = 1

    @property
    def n_rows(self):
        return len(self.D)


def scm_inverse_mass(params: SystemParams, q, mass_model="consistent"):
    """World-frame M^-1 used by the surrogate.

    "consistent": the regularized mass eps M_o / h, so that v = M^-1 (b + J' lam) / h
    reproduces the one-step object motion of the complementarity-free model.
    "literal": the bare M_o. Impulses agree between the two up to R; only the
    predicted velocity scales."""
    Minv = np.linalg.inv(params.world_mass(q))
    if mass_model == "consistent":
        return Minv * (params.h / params.eps)
    if mass_model == "literal":
        return Minv
    raise ValueError(f"unknown mass_model {mass_model!r}")


def freeze_scene(state: WorldState, contacts_env, params: SystemParams, tau_o=None, horizon=1,
                 mass_model="consistent") -> ScmFrozenScene:
    """Capture env rows and their diagonal approximation at the current state."""
    contacts_env = [c for c in contacts_env if c.pair == "env"]
    nd = params.n_d
    Minv = scm_inverse_mass(params, state.x_o.q, mass_model)
    if tau_o is None:
        tau_o = gravity_wrench(params)
    if contacts_env:
        jac = contact_jacobians(state, contacts_env, params)
        J = jac.J_tilde[:, :6].copy()
    else:
        J = np.zeros((0, 6))
    m = len(J)
    W = J @ Minv @ J.T + params.R * np.eye(m)
    W = 0.5 * (W + W.T)
    ne = m // nd
    blocks = np.array([W[i * nd:(i + 1) * nd, i * nd:(i + 1) * nd] for i in range(ne)]).reshape(ne, nd, nd)
    off = np.zeros((ne, ne))
    for i in range(ne):
        for j in range(ne):
            if i != j:
                off[i, j] = np.linalg.norm(W[i * nd:(i + 1) * nd, j * nd:(j + 1) * nd], 2)
    D = np.zeros(m)
    for i in range(ne):
        Wi = blocks[i]
        eps_reg = 1e-6 * np.trace(Wi) / nd
        D[i * nd:(i + 1) * nd] = np.diag(Wi) + eps_reg
    for a in (J, D, Minv, W, blocks, off):
        a.setflags(write=False)
    return ScmFrozenScene(J, D, Minv, np.asarray(tau_o, dtype=float), params.h, nd, state.x_o,
                          DelassusBlocks(blocks, W, off), np.asarray(state.v_o, dtype=float).copy(),
                          params.carry_velocity, horizon)


def robot_jacobian(p_world, n_in, t1, t2, x_o: Pose):
    """(3, 6) map with wrench = J' [lam_n, lam_t1, lam_t2] for a point force at p_world."""
    r = np.asarray(p_world) - x_o.p
    J = np.empty((3, 6))
    for k, d in enumerate((n_in, t1, t2)):
        J[k, :3] = d
        J[k, 3:] = np.cross(r, d)
    return J


def sample_jacobian(p_body, n_body, t1_body, t2_body, x_o: Pose):
    """Robot Jacobian for a body-frame surface sample (outward normal n_body)."""
    Rm = x_o.R
    return robot_jacobian(x_o.to_world(p_body), -(Rm @ n_body), Rm @ t1_body, Rm @ t2_body, x_o)


def _btilde(frozen, lam_r, J_r):
    lam_r = np.asarray(lam_r, dtype=float).ravel()
    J_r = np.asarray(J_r, dtype=float).reshape(-1, 6)
    return frozen.h * (frozen.tau_o + J_r.T @ lam_r)


def env_impulse(frozen: ScmFrozenScene, lam_r, J_r):
    b = _btilde(frozen, lam_r, J_r)
    g = frozen.J_env @ (frozen.Minv @ b)
    return np.maximum(-g / frozen.D, 0.0)


def env_force(frozen: ScmFrozenScene, lam_r, J_r):
    """Force-unit environment response max(-D^-1 J M^-1 (tau + J_r' lam_r), 0)."""
    lam_r = np.asarray(lam_r, dtype=float).ravel()
    J_r = np.asarray(J_r, dtype=float).reshape(-1, 6)
    g = frozen.J_env @ (frozen.Minv @ (frozen.tau_o + J_r.T @ lam_r))
    return np.maximum(-g / frozen.D, 0.0)


def predict_velocity(frozen: ScmFrozenScene, lam_r, J_r):
    b = _btilde(frozen, lam_r, J_r)
    lam = env_impulse(frozen, lam_r, J_r)
    return frozen.Minv @ (b + frozen.J_env.T @ lam) / frozen.h


def _step_velocity(frozen, v):
    return v + frozen.v_k if frozen.carry_velocity else v


def predict(frozen: ScmFrozenScene, state: WorldState, lam_r, J_r, h=None) -> Pose:
    """Object pose after the frozen-set horizon under a constant robot force."""
    h = frozen.h if h is None else h
    v = _step_velocity(frozen, predict_velocity(frozen, lam_r, J_r))
    p, q = state.x_o.p.copy(), state.x_o.q.copy()
    for _ in range(frozen.horizon):
        p = p + h * v[:3]
        q = integrate_quat(q, v[3:], h)
    return Pose(p, q)


def clamp_pattern(frozen: ScmFrozenScene, lam_r, J_r):
    """Rows whose clamp is active (strictly positive impulse)."""
    b = _btilde(frozen, lam_r, J_r)
    g = frozen.J_env @ (frozen.Minv @ b)
    return g < 0


def velocity_jacobian(frozen: ScmFrozenScene, lam_r, J_r):
    """d v / d lam_r, shape (6, 3 n_r). Clamp boundaries count as inactive."""
    J_r = np.asarray(J_r, dtype=float).reshape(-1, 6)
    h = frozen.h
    act = clamp_pattern(frozen, lam_r, J_r)
    # d lam_env / d lam_r = -diag(act / D) J_env M^-1 h J_r'
    dlam = -(act / frozen.D)[:, None] * (frozen.J_env @ frozen.Minv @ (h * J_r.T))
    return frozen.Minv @ (h * J_r.T + frozen.J_env.T @ dlam) / h


def scm_gradient(frozen: ScmFrozenScene, state: WorldState, lam_r, J_r, h=None):
    """d [p, q] / d lam_r of the predicted pose, shape (7, 3 n_r)."""
    h = frozen.h if h is None else h
    dv = velocity_jacobian(frozen, lam_r, J_r)
    v = _step_velocity(frozen, predict_velocity(frozen, lam_r, J_r))
    T = frozen.horizon
    # horizon steps with constant v: p moves T h v, q = exp(T h w / 2) q0
    dp = T * h * dv[:3]
    dq = integrate_quat_jacobian(state.x_o.q, v[3:], T * h) @ dv[3:]
    return np.vstack([dp, dq])


# ---------------------------------------------------------------- audits

def full_lcp_impulse(frozen: ScmFrozenScene, lam_r, J_r):
    """Coupled reference: 0 <= lam _|_ W lam + J M^-1 b >= 0 (W includes R)."""
    from .lcp import solve_lcp
    b = _btilde(frozen, lam_r, J_r)
    g = frozen.J_env @ (frozen.Minv @ b)
    if len(g) == 0:
        return np.zeros(0)
    return solve_lcp(frozen.blocks.W_full, g, tol=1e-11).x


def error_bound_check(frozen: ScmFrozenScene, lam_r, J_r):
    """Returns (error, bound) for the state-update error against the coupled solution.

    error = h |v - v_hat|, bound = C |W - D|_2 with C = h |M^-1|_2 sum_i |J_i'|_2 sigma
    and sigma = 1 / lambda_min(W). Forces here are in force units (impulse / h)."""
    h = frozen.h
    m = frozen.n_rows
    if m == 0:
        return 0.0, 0.0
    lam_true = full_lcp_impulse(frozen, lam_r, J_r) / h
    lam_hat = env_impulse(frozen, lam_r, J_r) / h
    err = h * np.linalg.norm(frozen.Minv @ frozen.J_env.T @ (lam_true - lam_hat))
    W = frozen.blocks.W_full
    sigma = 1.0 / np.linalg.eigvalsh(W).min()
    nd = frozen.n_d
    sum_J = sum(np.linalg.norm(frozen.J_env[i * nd:(i + 1) * nd].T, 2) for i in range(m // nd))
    C = h * np.linalg.norm(frozen.Minv, 2) * sum_J * sigma
    return float(err), float(C * np.linalg.norm(W - np.diag(frozen.D), 2))


def frobenius_diag_check(W, n_perturb=10_000, scale=None, rng=None):
    """Smallest margin |W - D'|_F^2 - |W - diag(W)|_F^2 over random diagonal D'.

    Evaluated directly on the matrices; a negative value is a counterexample."""
    rng = np.random.default_rng() if rng is None else rng
    W = np.asarray(W, dtype=float)
    d = np.diag(W)
    scale = np.abs(d).max() if scale is None else scale
    base = np.sum((W - np.diag(d)) ** 2)
    pert = d[None, :] + scale * rng.standard_normal((n_perturb, len(d)))
    Dp = pert[:, :, None] * np.eye(len(d))[None]
    err = np.sum((W[None] - Dp) ** 2, axis=(1, 2))
    return float((err - base).min())
