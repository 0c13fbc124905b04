"""Ranking trigger, stage costs and the shooting planner."""
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from scsp import cpo
from scsp.cpo import (CemParams, CpoCostSpec, Planner, PlannerConfig, PlannerState, RankingParams,
                      align_cost, cem, compute_improvement_ratio, kappa_of, lift_cost, lp_cost,
                      obs_cost, place_cost, update_trigger)
from scsp.cso import CsoResult
from scsp.dynamics import Pose, WorldState
from scsp.errors import ConfigError
from scsp.geometry import CandidateSet, farthest_point_sample


def _result(l_min, l_max, n=3):
    z = np.zeros(3)
    return CsoResult(0, z, z, z, np.zeros(3), np.zeros(n), l_min, l_max, np.zeros((n, 3)),
                     np.zeros(n), np.zeros(n, int), 0.0, 0)


# ---------------------------------------------------------------- ratio and params

def test_ratio_example():
    assert compute_improvement_ratio(3.0, _result(1.0, 5.0), 0.01) == pytest.approx(0.5)


def test_ratio_uses_eps_floor():
    # l_max == l_min: denominator falls back to eps
    assert compute_improvement_ratio(2.0, _result(2.0, 2.0), 0.01) == 0.0
    assert compute_improvement_ratio(2.005, _result(2.0, 2.0), 0.01) == pytest.approx(0.5)


@pytest.mark.parametrize("kw", [dict(rho_bar=0.0), dict(rho_bar=1.0), dict(T1=0), dict(T3=0),
                                dict(eps=0.0), dict(accept_when="x"), dict(row1_counter="x")])
def test_ranking_params_validation(kw):
    with pytest.raises(ConfigError):
        RankingParams(**kw)


def test_kappa_modes():
    above = RankingParams(accept_when="above")
    below = RankingParams(accept_when="below")
    assert kappa_of(0.9, above) == 1 and kappa_of(0.5, above) == 0
    assert kappa_of(0.9, below) == 0 and kappa_of(0.5, below) == 1
    # threshold itself is not strictly above or below
    assert kappa_of(0.75, above) == 0 and kappa_of(0.75, below) == 0


# ---------------------------------------------------------------- trigger traces

def _run(rhos, prm, contact=True, state=None):
    s = PlannerState() if state is None else state
    trace = []
    for r in rhos:
        s = update_trigger(s, r, prm, contact, p_star=np.array([1.0, 0, 0]), p_near=np.array([0, 1.0, 0]),
                           star_index=7, near_index=3)
        trace.append((s.gamma, s.kappa, s.t_k1, s.t_k0, s.t_contact))
    return s, trace


def test_no_switch_before_T1():
    prm = RankingParams()
    # rho below the threshold gives kappa = 0; four of them stay short of T1 = 5
    s, trace = _run([0.1] * 4, prm)
    assert all(g == 0 for g, *_ in trace)
    assert s.t_k0 == 4 and s.switches == 0
    s, _ = _run([0.1], prm, state=s)
    assert s.gamma == 1 and s.switches == 1
    assert s.t_k0 == 0 and s.t_k1 == 0


def test_hand_simulated_table():
    prm = RankingParams()
    start = PlannerState(gamma=1, t_contact=19)
    _, trace = _run([0.9] * 10 + [0.1], prm, state=start)
    expected = [(1, 1, k, 0, 19 + k) for k in range(1, 10)]
    # tenth kappa = 1 step: t_k1 = T2 and t_contact = 29 >= T3, switch and reset
    expected.append((0, 1, 0, 0, 29))
    expected.append((0, 0, 0, 1, 30))
    assert trace == expected


def test_contact_counter_gates_return():
    prm = RankingParams()
    start = PlannerState(gamma=1)
    s, trace = _run([0.9] * 20, prm, contact=False, state=start)
    assert s.gamma == 1 and s.t_contact == 0 and s.t_k1 == 20
    # contact resets on loss, starts counting on touch
    s, _ = _run([0.9] * 15, prm, contact=True, state=s)
    assert s.gamma == 0 and s.switches == 1


def test_row1_kappa1_variant():
    prm = RankingParams(row1_counter="kappa1")
    # kappa = 0 alone never lifts the flag in the literal reading
    s, _ = _run([0.1] * 20, prm)
    assert s.gamma == 0
    s, _ = _run([0.9] * 5 + [0.1], prm, state=s)
    assert s.gamma == 1


def test_below_mode_mirrors_above():
    a, _ = _run([0.1] * 5, RankingParams(accept_when="above"))
    b, _ = _run([0.9] * 5, RankingParams(accept_when="below"))
    assert a.gamma == b.gamma == 1


def test_p_ref_follows_phase():
    prm = RankingParams()
    s, _ = _run([0.1] * 4, prm)
    assert s.ref_index == 7 and np.allclose(s.p_ref, [1, 0, 0])
    s, _ = _run([0.1], prm, state=s)
    assert s.ref_index == 3 and np.allclose(s.p_ref, [0, 1, 0])


@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=200), st.lists(st.booleans(), min_size=200,
       max_size=200), st.sampled_from(["kappa0", "kappa1"]), st.sampled_from(["above", "below"]))
def test_hysteresis_min_dwell(rhos, contact, row1, mode):
    prm = RankingParams(row1_counter=row1, accept_when=mode)
    s = PlannerState()
    last_switch = -10 ** 6
    for k, r in enumerate(rhos):
        g0 = s.gamma
        s = update_trigger(s, r, prm, contact[k], np.zeros(3), np.ones(3), 0, 1)
        assert s.gamma in (0, 1)
        assert s.t_k1 + s.t_k0 <= k + 1
        if s.gamma != g0:
            if last_switch >= 0:
                assert k - last_switch >= min(prm.T1, prm.T2)
            last_switch = k
        # reference always comes from the current phase
        assert s.ref_index == (0 if s.gamma == 0 else 1)


# ---------------------------------------------------------------- stage costs

def test_obs_branch_boundary():
    spec = CpoCostSpec(sigma=0.0625, eps_log=1e-3)
    p_o = np.zeros(3)
    edge = np.array([0.25, 0.0, 0.0])         # squared distance exactly sigma
    assert obs_cost(edge, p_o, spec) == pytest.approx(np.log(0.0625 + 1e-3))
    assert obs_cost(edge * 1.0001, p_o, spec) == 0.0
    # sigma is compared against the squared distance, not the distance
    assert obs_cost(np.array([0.2, 0, 0]), p_o, spec) != 0.0
    assert obs_cost(np.array([0.3, 0, 0]), p_o, spec) == 0.0


def test_lift_cost_repels_from_center():
    spec = CpoCostSpec()
    p_o = np.zeros(3)
    p_lift = np.array([0.05, 0.0, 0.0])
    # same distance to p_lift, both inside sigma; the one nearer the center pays more
    near = np.array([0.05, 0.03, 0.0])
    far = np.array([0.08, 0.0, 0.0])
    assert lift_cost(near, p_o, p_lift, spec) > lift_cost(far, p_o, p_lift, spec)


def test_place_cost_monotone_along_ray():
    spec = CpoCostSpec()
    p_o = np.zeros(3)
    d = np.array([1.0, 2.0, -0.5]) / np.linalg.norm([1.0, 2.0, -0.5])
    c = [place_cost(t * d, p_o, None, spec) for t in np.linspace(0.0, 0.3, 50)]
    assert np.all(np.diff(c) > 0)
    assert c[0] == pytest.approx(spec.w_con * np.log(spec.eps_log))


def test_place_cost_without_log_is_quadratic():
    spec = CpoCostSpec(w_con=0.0, w_o=3.0)
    p = np.array([0.1, -0.2, 0.05])
    assert place_cost(p, np.zeros(3), None, spec) == pytest.approx(3.0 * p @ p)


def test_place_cost_ref_target():
    spec = CpoCostSpec(con_target="ref")
    p_ref = np.array([0.05, 0.0, 0.0])
    a = place_cost(p_ref, np.zeros(3), p_ref, spec)
    assert a == pytest.approx(spec.w_con * np.log(spec.eps_log) + spec.w_o * 0.05 ** 2)


def test_lp_identity():
    spec = CpoCostSpec()
    args = (np.array([0.1, 0.0, 0.02]), np.zeros(3), np.array([0.05, 0, 0]), np.array([0.04, 0, 0]))
    assert lp_cost(0, *args, spec) == lift_cost(args[0], args[1], args[2], spec)
    assert lp_cost(1, *args, spec) == place_cost(args[0], args[1], args[3], spec)


def test_align_cost_values():
    g = np.array([1.0, 0, 0])
    o = np.zeros(3)
    assert align_cost(np.array([-1.0, 0, 0]), o, g) == pytest.approx(-1.0)
    assert align_cost(np.array([1.0, 0, 0]), o, g) == pytest.approx(0.0)
    assert align_cost(np.array([0.0, 1.0, 0]), o, g) == pytest.approx(-0.5)
    assert align_cost(o, o, g) == 0.0


@pytest.mark.parametrize("kw", [dict(w_u=-1.0), dict(sigma=0.0), dict(con_target="x")])
def test_cost_spec_validation(kw):
    with pytest.raises(ConfigError):
        CpoCostSpec(**kw)


def test_planner_config_roundtrip():
    cfg = PlannerConfig(method="a_mpc", ranking=RankingParams(T1=3), cem=CemParams(samples=16))
    back = PlannerConfig.from_dict(cfg.to_dict())
    assert back == cfg
    with pytest.raises(ConfigError):
        PlannerConfig(method="bogus")
    with pytest.raises(ConfigError):
        PlannerConfig.from_dict({"nope": 1})


# ---------------------------------------------------------------- optimizers

def _quadratic(target):
    def f(U):
        return np.sum((U - target) ** 2, axis=(1, 2))
    return f


def test_cem_descends_and_is_deterministic():
    p = CemParams(horizon=4)
    target = np.full((4, 3), 0.004)
    f = _quadratic(target)
    u1, c1, c0, n = cem(f, np.zeros((4, 3)), p, np.random.default_rng(5))
    u2, c2, _, _ = cem(f, np.zeros((4, 3)), p, np.random.default_rng(5))
    assert c1 <= c0 and c1 < 0.5 * c0
    assert np.array_equal(u1, u2) and c1 == c2
    assert n == p.samples * p.iters
    assert np.all(np.abs(u1) <= p.u_max)


def test_cem_keeps_zero_when_best():
    p = CemParams(horizon=3)
    u, c, c0, _ = cem(_quadratic(np.zeros((3, 3))), np.full((3, 3), 0.005), p, np.random.default_rng(0))
    assert c == c0 == 0.0 and np.all(u == 0)


def test_gradient_backend_descends():
    p = CemParams(horizon=3, backend="gradient")
    f = _quadratic(np.full((3, 3), -0.003))
    u, c, c0, _ = cpo.projected_gradient(f, np.zeros((3, 3)), p)
    assert c < c0 and np.all(np.abs(u) <= p.u_max)


# ---------------------------------------------------------------- planner cycles

@pytest.fixture(scope="module")
def cands(box):
    return CandidateSet.from_samples(farthest_point_sample(box, 40, seed=0))


def _world(ee=(-0.08, 0.0, 0.04)):
    return WorldState(Pose.make([0.0, 0.0, 0.05]), np.array(ee, float))


def _goal():
    return Pose.make([0.1, 0.0, 0.05])


@pytest.mark.parametrize("method", cpo.METHODS)
def test_plan_descends_and_respects_box(method, box, cands, planner_prm):
    cfg = PlannerConfig(method=method)
    pl = Planner(box, cands, _goal(), planner_prm, cfg)
    for _ in range(3):
        u, d = pl.plan(_world())
        assert d.rollout_cost <= d.zero_cost
        assert np.all(np.abs(np.array(u[:2])) <= cfg.cem.u_max + 1e-15)
        assert d.error is None
    if method in ("scsp", "scsp_no_rs"):
        assert d.cso_best_cost is not None


def test_plan_deterministic(box, cands, planner_prm):
    a = Planner(box, cands, _goal(), planner_prm, PlannerConfig(seed=4))
    b = Planner(box, cands, _goal(), planner_prm, PlannerConfig(seed=4))
    for _ in range(3):
        ua, _ = a.plan(_world())
        ub, _ = b.plan(_world())
        assert np.array_equal(ua, ub)


def test_fingertip_floor(box, cands, planner_prm):
    pl = Planner(box, cands, _goal(), planner_prm, PlannerConfig())
    world = _world(ee=(-0.2, 0.0, planner_prm.r_tip))
    u, _ = pl.plan(world)
    assert world.p_ee[2] + u[2] >= planner_prm.r_tip - 1e-15


def test_placing_push_direction(box, cands, planner_prm):
    """In the placing phase with the fingertip behind the object, the first move heads
    toward the object and goal, matching a brute-force grid over constant controls."""
    cfg = PlannerConfig()
    pl = Planner(box, cands, _goal(), planner_prm, cfg)
    world = _world(ee=(-0.06, 0.0, 0.05))
    pl.state.last = pl.run_cso(world)
    near = cands.nearest_index(world.x_o.to_body(world.p_ee))
    pl.state = replace(pl.state, gamma=1, ref_index=near, p_ref=cands.points[near].copy())
    u, st_, diag = cpo.cpo_step(world, pl.state, pl.reachable(world), cfg.cost, pl)
    assert st_.gamma == 1
    assert u[0] > 0
    # grid over constant sequences with the same cost function
    cw = cpo._pack_cost("scsp", 1, cfg.cost, pl.cso_spec, 0)
    g = np.linspace(-cfg.cem.u_max, cfg.cem.u_max, 7)
    U = np.array([[[a, b, c]] * cfg.cem.horizon for a in g for b in g for c in g])
    from scsp.rollout import rollout_costs
    costs = rollout_costs(world.x_o.p, world.x_o.q, world.p_ee, U, *pl.compiled.args, cw,
                          cpo.lift_point(pl.state.last, cfg.cost.d), cands.points[near],
                          pl.cso_spec.goal.p, pl.cso_spec.goal.q)
    best = U[int(np.argmin(costs)), 0]
    assert np.sign(best[0]) == np.sign(u[0])


def test_diverged_rollout_safe_stop(box, cands, planner_prm, monkeypatch):
    pl = Planner(box, cands, _goal(), planner_prm, PlannerConfig(method="cf_mpc"))

    def bad(cost_fn, mean0, cem_p, rng):
        return np.full((cem_p.horizon, 3), np.nan), np.nan, np.nan, 0
    monkeypatch.setattr(cpo, "cem", bad)
    world = _world(ee=(-0.2, 0.0, 0.05))
    u, d = pl.plan(world)
    assert np.all(u == 0) and d.error == "rollout diverged"


def test_reachable_mask(box, cands, planner_prm):
    pl = Planner(box, cands, _goal(), planner_prm, PlannerConfig())
    r = pl.reachable(_world())
    z = cands.points[:, 2] + 0.05
    ok = (z >= 0.005) & (cands.normals[:, 2] >= -0.5)
    assert np.array_equal(r.valid, ok)
    assert not np.any(r.valid & (cands.normals[:, 2] < -0.9))
