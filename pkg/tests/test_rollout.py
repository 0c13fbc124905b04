"""Compiled rollout kernels against the numpy reference implementations."""
import numpy as np
import pytest
from hypothesis import given, strategies as st

from scsp import cpo
from scsp.cpo import CpoCostSpec
from scsp.dynamics import Pose, RolloutModel, step_cf_batch
from scsp.geometry import make_prism
from scsp.rollout import (MODE_ALIGN, MODE_LP, TERM_CSO, TERM_POSE, CompiledModel, align_cost,
                          rollout_costs, stage_lp, terminal_cost)
from scsp.rotations import quat_from_euler


def _states(rng, n, mesh):
    p = np.column_stack([rng.uniform(-0.05, 0.05, n), rng.uniform(-0.05, 0.05, n),
                         rng.uniform(0.045, 0.056, n)])
    q = np.array([quat_from_euler(rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05),
                                  rng.uniform(-np.pi, np.pi)) for _ in range(n)])
    # fingertip near a random side of the object
    d = rng.standard_normal((n, 3))
    d[:, 2] = 0.0
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    pee = p + d * rng.uniform(0.05, 0.09, (n, 1))
    u = rng.uniform(-0.01, 0.01, (n, 3))
    return p, q, pee, u


@pytest.mark.parametrize("mesh_kind", ["box", "prism"])
def test_compiled_step_matches_numpy_batch(mesh_kind, box, planner_prm):
    mesh = box if mesh_kind == "box" else make_prism(6, 0.05, 0.1)
    model = RolloutModel.build(mesh, mesh.vertices, planner_prm)
    cm = CompiledModel(model)
    rng = np.random.default_rng(3)
    p, q, pee, u = _states(rng, 200, mesh)
    P, Q, E, _ = step_cf_batch(model, p, q, pee, u)
    for i in range(len(p)):
        pi, qi, ei, _ = cm.step(p[i], q[i], pee[i], u[i])
        assert np.allclose(pi, P[i], atol=1e-12, rtol=1e-9)
        assert np.allclose(qi, Q[i], atol=1e-12, rtol=1e-9)
        assert np.allclose(ei, E[i], atol=1e-12, rtol=1e-9)


def test_compiled_model_rejects_nonconvex(planner_prm):
    from scsp.geometry import build_mesh
    # L-shaped prism
    xy = np.array([[0, 0], [2, 0], [2, 1], [1, 1], [1, 2], [0, 2]], float) * 0.05
    v = np.vstack([np.column_stack([xy, np.zeros(6)]), np.column_stack([xy, np.full(6, 0.05)])])
    f = []
    for i in range(6):
        j = (i + 1) % 6
        f += [[i, j, 6 + j], [i, 6 + j, 6 + i]]
    f += [[0, 2, 1], [0, 3, 2], [0, 5, 3], [3, 5, 4]]
    f += [[6, 7, 8], [6, 8, 9], [6, 9, 11], [9, 10, 11]]
    mesh = build_mesh(v, np.array(f))
    assert not mesh.is_convex()
    model = RolloutModel.build(mesh, mesh.vertices, planner_prm)
    with pytest.raises(ValueError):
        CompiledModel(model)


pts = st.lists(st.floats(-0.2, 0.2), min_size=3, max_size=3).map(np.array)


@given(pts, pts, pts, st.integers(0, 1), st.sampled_from(["object", "ref"]))
def test_stage_lp_matches_numpy(pee, po, p_lift, gamma, con_target):
    spec = CpoCostSpec(con_target=con_target)
    qo = quat_from_euler(0.1, -0.2, 0.7)
    p_ref_body = np.array([0.05, 0.01, -0.02])
    p_ref = Pose.make(po, qo).to_world(p_ref_body)
    ref = cpo.lp_cost(gamma, pee, po, p_lift, p_ref, spec)
    got = stage_lp(pee, po, qo, gamma, spec.w_att, spec.w_obs, spec.sigma, spec.eps_log, spec.w_con,
                   spec.w_o, con_target == "ref", p_lift, p_ref_body)
    assert got == pytest.approx(ref, rel=1e-12, abs=1e-12)


@given(pts, pts, pts)
def test_align_kernel_matches_numpy(pee, po, pg):
    assert align_cost(pee, po, pg) == pytest.approx(cpo.align_cost(pee, po, pg), abs=1e-12)


def test_terminal_cost_branches():
    gp = np.array([0.1, 0.0, 0.05])
    gq = quat_from_euler(0.0, 0.0, 0.3)
    # pose branch: planar position error, w_z scales z
    po = gp + np.array([0.01, -0.02, 0.03])
    c = terminal_cost(po, gq, TERM_POSE, 0, gp, gq, 500.0, 5.0, 0.0)
    assert c == pytest.approx(500.0 * (0.01 ** 2 + 0.02 ** 2))
    c1 = terminal_cost(po, gq, TERM_POSE, 0, gp, gq, 500.0, 5.0, 1.0)
    assert c1 == pytest.approx(500.0 * (0.01 ** 2 + 0.02 ** 2 + 0.03 ** 2))
    # orientation term is 1 - (q.g)^2, sign invariant
    assert terminal_cost(gp, -gq, TERM_POSE, 0, gp, gq, 500.0, 5.0, 0.0) == pytest.approx(0.0, abs=1e-12)
    qz = quat_from_euler(0.0, 0.0, 0.3 + np.pi)
    assert terminal_cost(gp, qz, TERM_POSE, 0, gp, gq, 1.0, 1.0, 0.0) == pytest.approx(1.0)
    # up-vector branch of the CSO terminal ignores position and yaw
    q_tilt = quat_from_euler(np.pi / 2, 0.0, 0.0)
    assert terminal_cost(po, q_tilt, TERM_CSO, 1, gp, gq, 500.0, 5.0, 0.0) == pytest.approx(1.0)
    assert terminal_cost(po, qz, TERM_CSO, 1, gp, gq, 500.0, 5.0, 0.0) == pytest.approx(0.0, abs=1e-12)


def test_rollout_costs_zero_control_reference(box, planner_prm):
    """Cost of a sequence equals a hand-rolled loop over the compiled step."""
    model = RolloutModel.build(box, box.vertices, planner_prm)
    cm = CompiledModel(model)
    spec = CpoCostSpec()
    p0 = np.array([0.0, 0.0, 0.05])
    q0 = np.array([1.0, 0.0, 0.0, 0.0])
    e0 = np.array([-0.08, 0.0, 0.05])
    gp, gq = np.array([0.1, 0.0, 0.05]), q0
    p_lift = np.array([-0.1, 0.0, 0.05])
    p_ref_body = np.array([-0.05, 0.0, 0.0])
    rng = np.random.default_rng(0)
    U = rng.uniform(-0.01, 0.01, (4, 5, 3))
    from scsp.cso import CsoObjectiveSpec
    cso_spec = CsoObjectiveSpec(Pose.make(gp, gq))
    for gamma in (0, 1):
        cw = cpo._pack_cost("scsp", gamma, spec, cso_spec, 0)
        got = rollout_costs(p0, q0, e0, U, *cm.args, cw, p_lift, p_ref_body, gp, gq)
        for s in range(len(U)):
            p, q, e = p0, q0, e0
            c = 0.0
            for t in range(U.shape[1]):
                u = U[s, t].copy()
                u[2] = max(u[2], planner_prm.r_tip - e[2])
                p, q, e, _ = cm.step(p, q, e, u)
                c += spec.w_lp * stage_lp(e, p, q, gamma, spec.w_att, spec.w_obs, spec.sigma,
                                          spec.eps_log, spec.w_con, spec.w_o, False, p_lift, p_ref_body)
                c += spec.w_u * (u @ u)
            c += spec.w_cso * terminal_cost(p, q, TERM_CSO, 0, gp, gq, 500.0, 5.0, 0.0)
            assert got[s] == pytest.approx(c, rel=1e-12)
    assert cpo._pack_cost("a_mpc", 0, spec, cso_spec, 0)[0] == MODE_ALIGN
    assert cpo._pack_cost("scsp_no_rs", 0, spec, cso_spec, 0)[0] == MODE_LP
