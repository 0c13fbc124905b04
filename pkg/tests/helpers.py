"""Random contact scenes shared by the dynamics tests and the acceptance run."""
import numpy as np

from scsp.dynamics import Pose, WorldState, assemble_system, delassus, detect_contacts
from scsp.geometry import make_box, make_prism, signed_distance
from scsp.lcp import enumerate_lcp
from scsp.rotations import quat_from_euler, quat_to_matrix

BOX = make_box((0.1, 0.1, 0.1))
TRI = make_prism(3, 0.06, 0.08)


def resting_pose(mesh, n_env, rng):
    yaw = rng.uniform(-np.pi, np.pi)
    if n_env == 3:
        mesh, q = TRI, quat_from_euler(0.0, 0.0, yaw)
    elif n_env == 2:
        q = quat_from_euler(rng.uniform(0.1, 0.6) * rng.choice([-1, 1]), 0.0, yaw)
    else:
        q = quat_from_euler(rng.uniform(0.2, 0.6), rng.uniform(0.2, 0.6), yaw)
    z = -(mesh.vertices @ quat_to_matrix(q).T)[:, 2].min()
    # small random penetration or gap on the lowest touching points
    z += rng.uniform(-1e-3, 1e-3)
    return mesh, Pose.make([rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1), z], q)


def random_contact_scene(rng, params, max_contacts=3):
    """Object touching the ground at 1-3 vertices, optionally a fingertip touching it.

    Returns (mesh, state, contacts, u) with len(contacts) <= max_contacts."""
    while True:
        n_env = int(rng.integers(1, 4))
        mesh = BOX if n_env < 3 else TRI
        mesh, x_o = resting_pose(mesh, n_env, rng)
        # fingertip: on a random outward direction roughly at contact distance
        d = rng.standard_normal(3)
        d[2] = abs(d[2]) + 0.2
        d /= np.linalg.norm(d)
        far = x_o.p + 0.5 * d
        dist, cp, _ = signed_distance(mesh, x_o.to_body(far)[None])
        n_out = x_o.R @ (x_o.to_body(far) - cp[0]) / dist[0]
        gap = rng.uniform(-2e-3, 3e-3) if rng.random() < 0.7 else 0.5
        p_ee = x_o.to_world(cp[0]) + n_out * (params.r_tip + gap)
        state = WorldState(x_o, p_ee)
        contacts = detect_contacts(state, mesh, mesh.vertices, params)
        if 1 <= len(contacts) <= max_contacts:
            u = rng.uniform(-0.01, 0.01, 3)
            if rng.random() < 0.5:
                u = -0.01 * n_out + rng.uniform(-0.003, 0.003, 3)
            return mesh, state, contacts, u


def enumeration_step(state, contacts, u, params):
    """Velocity and impulses from brute-force active-set enumeration of the same LCP."""
    sm = assemble_system(state, contacts, u, params)
    h = params.h
    W, Qi_Jt = delassus(sm, params)
    Qi_b = np.linalg.solve(sm.Q, sm.b)
    g = sm.J_tilde @ Qi_b + sm.phi_tilde
    beta = enumerate_lcp(W / h, g)
    return Qi_b / h + Qi_Jt @ beta / h ** 2, beta


def cso_arrays(cands, frozen, state):
    from scsp.cso import _scene_arrays, candidate_matrices
    idx = cands.valid_indices
    Bs, As, _ = candidate_matrices(cands.points[idx], cands.normals[idx], cands.t1[idx],
                                   cands.t2[idx], frozen, state.x_o)
    return idx, Bs, As, _scene_arrays(frozen, state)


def grid_oracle(cands, frozen, state, spec, params, pitch=0.005):
    """Per-candidate minimum cost over a cubic force lattice inside the pyramid."""
    from scsp.cso import eval_candidates_at, grid_forces, objective_branch
    F = grid_forces(params.mu_r, params.lam_max, pitch)
    idx, Bs, As, (v0, g0, D, E, vk, hT) = cso_arrays(cands, frozen, state)
    branch = objective_branch(state, spec)
    out = np.full(len(cands), np.inf)
    arg = np.zeros((len(cands), 3))
    for k, i in enumerate(idx):
        Bk = np.ascontiguousarray(np.broadcast_to(Bs[k], (len(F),) + Bs[k].shape))
        Ak = np.ascontiguousarray(np.broadcast_to(As[k], (len(F),) + As[k].shape))
        c = eval_candidates_at(Bk, Ak, v0, g0, D, E, state.x_o.p, state.x_o.q, vk, hT,
                               spec.goal.p, spec.goal.q, branch, float(spec.w_pos),
                               float(spec.w_quat), F)
        j = int(np.argmin(c))
        out[i], arg[i] = c[j], F[j]
    return out, arg


def planar_cso_scene(rng, params, n_cand=8, horizon=10):
    """Cube resting flat at random yaw, planar goal offset, a few side-face candidates."""
    from scsp.cso import CsoObjectiveSpec
    from scsp.geometry import CandidateSet, farthest_point_sample
    from scsp.scm import freeze_scene
    yaw = rng.uniform(-np.pi, np.pi)
    x_o = Pose.make([rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1), 0.05], quat_from_euler(0, 0, yaw))
    state = WorldState(x_o, x_o.p + np.array([0.0, 0.0, 0.3]))
    c = detect_contacts(state, BOX, BOX.vertices, params, robot=False)
    frozen = freeze_scene(state, c, params, horizon=horizon)
    d = rng.uniform(0.02, 0.08)
    ang = rng.uniform(-np.pi, np.pi)
    goal = Pose.make(x_o.p + d * np.array([np.cos(ang), np.sin(ang), 0.0]),
                     quat_from_euler(0, 0, yaw + rng.uniform(-0.5, 0.5)))
    pool = farthest_point_sample(BOX, 60, rng_seed=int(rng.integers(1 << 30)))
    side = [s for s in pool if abs(s.n[2]) < 0.5]
    pick = rng.choice(len(side), size=min(n_cand, len(side)), replace=False)
    cands = CandidateSet.from_samples([side[i] for i in sorted(pick)])
    return state, frozen, CsoObjectiveSpec(goal), cands
