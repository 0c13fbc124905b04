"""World-side plumbing: success test, randomization, trials and disturbances."""
import json
from dataclasses import replace

import numpy as np
import pytest

from scsp.cpo import CemParams, PlannerConfig
from scsp.dynamics import Pose, WorldState
from scsp.errors import ConfigError
from scsp.rotations import quat_from_euler
from scsp import sim
from scsp.sim import (Scene, TaskSpec, check_success, goal_pose, inject_disturbance, make_battery,
                      pose_errors, randomize, run_trial)


# ---------------------------------------------------------------- success metric

def test_success_position_boundary():
    g = Pose.make([0.0, 0.0, 0.05])
    assert check_success(Pose.make([0.02, 0.0, 0.05]), g)
    assert not check_success(Pose.make([0.021, 0.0, 0.05]), g)
    assert not check_success(Pose.make([np.nextafter(0.02, 1.0), 0.0, 0.05]), g)


def test_success_quaternion_boundary():
    g = Pose.identity()
    # 1 - cos^2(a/2) = sin^2(a/2); build a quaternion whose error is exactly 0.05 in floats
    q = np.array([np.sqrt(0.95), 0.0, 0.0, np.sqrt(0.05)])
    err = 1.0 - q[0] ** 2
    assert pose_errors(Pose(np.zeros(3), q), g)[1] == err
    assert (err <= 0.05) == check_success(Pose(np.zeros(3), q), g)
    q_bad = np.array([np.sqrt(0.94), 0.0, 0.0, np.sqrt(0.06)])
    assert not check_success(Pose(np.zeros(3), q_bad), g)
    # the limit itself is inclusive
    assert sim.QUAT_TOL == 0.05 and sim.POS_TOL == 0.02


def test_success_double_cover():
    q = quat_from_euler(0.3, -0.2, 1.0)
    g = Pose.make([0.1, 0.2, 0.05], q)
    assert pose_errors(Pose(g.p.copy(), -q), g) == (0.0, pytest.approx(0.0, abs=1e-15))
    assert check_success(Pose(g.p.copy(), -q), g)
    assert check_success(WorldState(g, np.zeros(3)), g)


# ---------------------------------------------------------------- randomization

def test_friction_draws_in_range():
    scene = Scene()
    mus = np.array([randomize(scene, np.random.default_rng(s))[1:] for s in range(10_000)])
    assert mus.min() >= 0.3 and mus.max() <= 0.7
    # both halves of the interval are used
    assert mus.min() < 0.31 and mus.max() > 0.69


def test_mass_spans_one_decade():
    scene = Scene()
    m = np.array([randomize(scene, np.random.default_rng(s))[0] for s in range(10_000)])
    lo, hi = scene.mass / np.sqrt(10), scene.mass * np.sqrt(10)
    assert m.min() >= lo and m.max() <= hi
    assert m.max() / m.min() > 9.5
    # log-uniform: median near the nominal mass
    assert np.median(m) == pytest.approx(scene.mass, rel=0.05)
    lit = replace(scene, mass_mode="literal")
    ml = np.array([randomize(lit, np.random.default_rng(s))[0] for s in range(2000)])
    assert ml.min() >= scene.mass and ml.max() <= 10 * scene.mass


def test_randomize_deterministic_and_off():
    scene = Scene()
    assert randomize(scene, np.random.default_rng(9)) == randomize(scene, np.random.default_rng(9))
    fixed = replace(scene, randomize=False)
    assert randomize(fixed, np.random.default_rng(1)) == (0.1, 0.5, 0.5)


@pytest.mark.parametrize("kw", [dict(mass=0.0), dict(n_s=0), dict(friction_delta=0.6),
                                dict(mass_mode="x"), dict(max_step_displacement=0.0)])
def test_scene_validation(kw):
    with pytest.raises(ConfigError):
        Scene(**kw)


def test_task_validation():
    with pytest.raises(ConfigError):
        TaskSpec(max_steps=-1)
    with pytest.raises(ConfigError):
        TaskSpec(disturbances=((1, 0.0, 0.0),))


# ---------------------------------------------------------------- disturbances

def test_identity_disturbance():
    s = WorldState(Pose.make([0.1, 0.0, 0.05], quat_from_euler(0, 0, 0.4)), np.array([0.0, 0.1, 0.02]))
    d = inject_disturbance(s, (0.0, 0.0, 0.0))
    assert np.array_equal(d.x_o.p, s.x_o.p)
    assert np.allclose(d.x_o.q, s.x_o.q, atol=1e-15)
    assert np.array_equal(d.p_ee, s.p_ee)


def test_disturbance_composes_and_zeroes_velocity():
    s = WorldState(Pose.make([0.1, 0.0, 0.05]), np.zeros(3), np.ones(6), np.ones(3))
    d = inject_disturbance(s, (0.05, -0.01, np.pi / 2))
    assert np.allclose(d.x_o.p, [0.15, -0.01, 0.05])
    assert np.allclose(d.x_o.q, quat_from_euler(0, 0, np.pi / 2))
    assert not d.v_o.any() and not d.v_ee.any()


# ---------------------------------------------------------------- trials

FAST = PlannerConfig(cem=CemParams(samples=16, iters=1))


def test_goal_equals_init_succeeds_immediately():
    task = TaskSpec(init_xy=(0.0, 0.0), goal_xy=(0.0, 0.0), max_steps=50)
    rec = run_trial(Scene(), task, FAST, seed=0)
    assert rec.success and rec.status == "success"
    assert rec.steps == 0 and rec.exec_time == 0.0
    assert rec.max_kkt <= 1e-8


def test_trial_reproducible(tmp_path):
    task = TaskSpec(init_xy=(0.1, 0.0), max_steps=15)
    a = run_trial(Scene(n_s=20), task, FAST, seed=3, trajectory=str(tmp_path / "a.jsonl"))
    b = run_trial(Scene(n_s=20), task, FAST, seed=3, trajectory=str(tmp_path / "b.jsonl"))
    skip = {"wall_time", "plan_time", "cso_time", "cpo_time"}
    ra = {k: v for k, v in a.to_row().items() if k not in skip}
    rb = {k: v for k, v in b.to_row().items() if k not in skip}
    assert ra == rb
    assert (tmp_path / "a.jsonl").read_text() == (tmp_path / "b.jsonl").read_text()
    lines = [json.loads(x) for x in (tmp_path / "a.jsonl").read_text().splitlines()]
    assert len(lines) == 15
    assert set(lines[0]) >= {"step", "p_o", "q_o", "p_ee", "u", "gamma", "rho", "contacts", "robot_contact"}
    assert a.status == "timeout" and not a.success


def test_displacement_cap_aborts():
    scene = Scene(n_s=20, max_step_displacement=1e-9)
    task = TaskSpec(init_xy=(0.1, 0.0), ee_start=(0.045, 0.0, 0.03), max_steps=200)
    rec = run_trial(scene, task, FAST, seed=0)
    assert rec.status == "error" and "displacement" in rec.error
    assert not rec.success


def test_goal_pose_rests_on_ground():
    mesh = Scene().mesh()
    g = goal_pose(mesh, TaskSpec(goal_euler=(0.0, np.pi / 2, 0.3)))
    z = (mesh.vertices @ g.R.T)[:, 2] + g.p[2]
    assert z.min() == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("kind", ["push", "rotation", "adversarial", "rotation_full", "adversarial_full"])
def test_batteries(kind):
    a = make_battery(kind, 20, seed=1)
    assert a == make_battery(kind, 20, seed=1)
    for t in a:
        assert np.hypot(*t.init_xy) >= 0.08
        assert t.adversarial == kind.startswith("adversarial")
    if kind.endswith("_full"):
        assert all(max(abs(x) for x in t.init_xy) <= 0.3 for t in a)
    with pytest.raises(ConfigError):
        make_battery("nope", 1)


def test_adversarial_start_is_goal_side():
    mesh = Scene().mesh()
    for t in make_battery("adversarial", 10, seed=2):
        g = goal_pose(mesh, t)
        s = sim.initial_state(mesh, t, g, np.random.default_rng(0))
        to_goal = g.p[:2] - s.x_o.p[:2]
        to_ee = s.p_ee[:2] - s.x_o.p[:2]
        assert to_goal @ to_ee > 0.99 * np.linalg.norm(to_goal) * np.linalg.norm(to_ee)
