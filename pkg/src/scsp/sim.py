"""Closed-loop trials: the exact time-stepping model is the world, the planner
only sees its own closed-form and surrogate models.

A trial settles the object, then alternates planner cycles and exact steps
until the goal test passes or the step budget runs out.
"""
from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .cpo import Planner, PlannerConfig
from .dynamics import Pose, SystemParams, WorldState, step_exact
from .errors import ConfigError, SolverError
from .geometry import (TriMesh, apply_valid_mask, farthest_point_sample, load_mesh, make_primitive,
                       mass_properties)
from .rotations import quat_from_euler, quat_mul, quat_normalize

POS_TOL = 0.02
QUAT_TOL = 0.05


@dataclass(frozen=True)
class Scene:
    """Object, physical parameters and their randomization."""
    object: str = "box"                 # primitive kind or path to an OBJ file
    size: tuple = (0.1, 0.1, 0.1)       # box edge lengths (primitives only)
    mass: float = 0.1
    mu_env: float = 0.5
    mu_r: float = 0.5
    h: float = 0.02
    n_s: int = 70
    randomize: bool = True
    friction_delta: float = 0.2
    mass_factor: float = 10.0
    mass_mode: str = "loguniform"       # "loguniform": [1/sqrt(f), sqrt(f)]; "literal": [1, f]
    max_step_displacement: float = 0.05
    settle_steps: int = 100
    margin: float = 0.01
    r_tip: float = 0.01

    def __post_init__(self):
        if self.mass <= 0 or self.h <= 0 or self.n_s < 1:
            raise ConfigError("mass, h must be positive and n_s >= 1")
        if self.mass_mode not in ("loguniform", "literal"):
            raise ConfigError("mass_mode must be 'loguniform' or 'literal'")
        if self.mass_factor < 1 or self.friction_delta < 0:
            raise ConfigError("mass_factor >= 1 and friction_delta >= 0 required")
        if self.friction_delta > min(self.mu_env, self.mu_r):
            raise ConfigError("friction_delta would allow negative friction")
        if self.max_step_displacement <= 0 or self.settle_steps < 0:
            raise ConfigError("max_step_displacement > 0 and settle_steps >= 0 required")

    def mesh(self) -> TriMesh:
        """Object mesh with its center of mass at the body origin."""
        if self.object.lower().endswith(".obj"):
            m = load_mesh(self.object)
        elif self.object in ("box", "cube"):
            m = make_primitive("box", size=tuple(self.size))
        else:
            m = make_primitive(self.object)
        com, _ = mass_properties(m, 1.0)
        return m.translated(-com)


@dataclass(frozen=True)
class TaskSpec:
    init_xy: tuple = (0.2, 0.0)
    init_euler: tuple = (0.0, 0.0, 0.0)
    goal_xy: tuple = (0.0, 0.0)
    goal_euler: tuple = (0.0, 0.0, 0.0)
    ee_start: tuple | None = None       # world position; None draws a random start
    adversarial: bool = False           # fingertip between object and goal
    ee_distance: float = 0.12
    max_steps: int = 2500
    disturbances: tuple = ()            # ((step, dx, dy, dyaw), ...)

    def __post_init__(self):
        if self.max_steps < 0:
            raise ConfigError("max_steps must be nonnegative")
        for d in self.disturbances:
            if len(d) != 4:
                raise ConfigError("disturbance entries are (step, dx, dy, dyaw)")


@dataclass
class TrialRecord:
    seed: int
    method: str
    n_s: int
    status: str                 # "success", "timeout" or "error"
    success: bool
    steps: int
    exec_time: float            # simulated seconds, steps * h
    wall_time: float
    plan_time: float            # mean wall time per planner cycle
    cso_time: float
    cpo_time: float
    pos_err: float
    quat_err: float
    switches: int
    max_kkt: float
    mass: float
    mu_env: float
    mu_r: float
    error: str = ""

    @classmethod
    def columns(cls):
        return [f.name for f in fields(cls)]

    def to_row(self):
        return asdict(self)


# ---------------------------------------------------------------- parameters

def randomize(scene: Scene, rng: np.random.Generator):
    """(mass, mu_env, mu_r) for one trial."""
    if not scene.randomize:
        return scene.mass, scene.mu_env, scene.mu_r
    d = scene.friction_delta
    mu_env = rng.uniform(scene.mu_env - d, scene.mu_env + d)
    mu_r = rng.uniform(scene.mu_r - d, scene.mu_r + d)
    f = scene.mass_factor
    if scene.mass_mode == "loguniform":
        s = np.exp(rng.uniform(-0.5 * np.log(f), 0.5 * np.log(f)))
    else:
        s = rng.uniform(1.0, f)
    return float(scene.mass * s), float(mu_env), float(mu_r)


def truth_params(mesh: TriMesh, mass, mu_env, mu_r, scene: Scene) -> SystemParams:
    """World parameters: real mass, inertia from the mesh, no regularization."""
    _, inertia = mass_properties(mesh, mass)
    M = np.zeros((6, 6))
    M[:3, :3] = mass * np.eye(3)
    M[3:, 3:] = 0.5 * (inertia + inertia.T)
    return SystemParams(M_o=M, K_r=300.0 * np.eye(3), mu_env=mu_env, mu_r=mu_r, h=scene.h,
                        mass=mass, margin=scene.margin, r_tip=scene.r_tip)


def planner_params(scene: Scene, eps=0.002) -> SystemParams:
    """Planner parameters at nominal values, independent of the trial's randomization."""
    return SystemParams.paper_planner(eps=eps, mu_env=scene.mu_env, mu_r=scene.mu_r, h=scene.h,
                                      mass=scene.mass, margin=scene.margin, r_tip=scene.r_tip)


def rest_height(mesh: TriMesh, q):
    return float(-(mesh.vertices @ Pose.make(np.zeros(3), q).R.T)[:, 2].min())


def goal_pose(mesh: TriMesh, task: TaskSpec) -> Pose:
    q = quat_from_euler(*task.goal_euler)
    return Pose.make([task.goal_xy[0], task.goal_xy[1], rest_height(mesh, q)], q)


# ---------------------------------------------------------------- metrics

def pose_errors(x_o: Pose, goal: Pose):
    pos = float(np.linalg.norm(x_o.p - goal.p))
    quat = float(1.0 - (goal.q @ x_o.q) ** 2)
    return pos, quat


def check_success(state: WorldState | Pose, goal: Pose) -> bool:
    x = state.x_o if isinstance(state, WorldState) else state
    pos, quat = pose_errors(x, goal)
    return bool(pos <= POS_TOL and quat <= QUAT_TOL)


# ---------------------------------------------------------------- world

def _kkt_violation(imp):
    slack, beta, comp = imp.kkt()
    return max(-slack, -beta, comp, 0.0)


def settle(state: WorldState, mesh, env_pts, params, max_steps=100, tol=1e-6):
    """Zero-control exact steps until the object stops moving. Returns (state, steps, max kkt)."""
    worst = 0.0
    hold = np.zeros(3)
    for k in range(max_steps):
        nxt, imp = step_exact(state, hold, mesh, env_pts, params)
        worst = max(worst, _kkt_violation(imp))
        moved = np.linalg.norm(nxt.x_o.p - state.x_o.p)
        state = replace(nxt, v_o=np.zeros(6), v_ee=np.zeros(3))
        if moved < tol:
            return state, k + 1, worst
    return state, max_steps, worst


def inject_disturbance(state: WorldState, dpose) -> WorldState:
    """Compose the object pose with a planar offset (dx, dy, dyaw); velocities reset."""
    dx, dy, dyaw = dpose
    q = quat_normalize(quat_mul(quat_from_euler(0.0, 0.0, dyaw), state.x_o.q))
    p = state.x_o.p + np.array([dx, dy, 0.0])
    return WorldState(Pose(p, q), state.p_ee.copy(), np.zeros(6), np.zeros(3))


def initial_state(mesh: TriMesh, task: TaskSpec, goal: Pose, rng):
    q = quat_from_euler(*task.init_euler)
    p = np.array([task.init_xy[0], task.init_xy[1], rest_height(mesh, q)])
    if task.ee_start is not None:
        ee = np.asarray(task.ee_start, dtype=float)
    else:
        to_goal = goal.p[:2] - p[:2]
        n = np.linalg.norm(to_goal)
        if task.adversarial and n > 1e-6:
            d = to_goal / n
        else:
            a = rng.uniform(-np.pi, np.pi)
            d = np.array([np.cos(a), np.sin(a)])
            if n > 1e-6 and not task.adversarial:
                # start away from the goal side so the adversarial case stays distinct
                if d @ to_goal / n > 0.5:
                    d = -d
        ee = np.array([p[0] + task.ee_distance * d[0], p[1] + task.ee_distance * d[1],
                       max(0.5 * p[2], 0.02)])
    return WorldState(Pose(p, q), ee)


class TrialAbort(RuntimeError):
    pass


def run_trial(scene: Scene, task: TaskSpec, config: PlannerConfig, seed: int,
              trajectory=None) -> TrialRecord:
    """One closed-loop trial. trajectory: optional path for per-step JSON lines."""
    rng = np.random.default_rng(seed)
    mesh = scene.mesh()
    mass, mu_env, mu_r = randomize(scene, rng)
    world_p = truth_params(mesh, mass, mu_env, mu_r, scene)
    env_pts = mesh.vertices
    goal = goal_pose(mesh, task)
    state = initial_state(mesh, task, goal, rng)
    state, _, worst_kkt = settle(state, mesh, env_pts, world_p, scene.settle_steps)
    cands = apply_valid_mask(farthest_point_sample(mesh, scene.n_s))
    cfg = replace(config, seed=int(seed))
    wall0 = time.perf_counter()
    planner = Planner(mesh, cands, goal, planner_params(scene), cfg)
    kicks = {int(d[0]): tuple(d[1:]) for d in task.disturbances}
    out = open(trajectory, "w") if trajectory else None
    status, error = "timeout", ""
    cso_t = cpo_t = 0.0
    cycles = 0
    steps = 0
    try:
        for k in range(task.max_steps + 1):
            steps = k
            if check_success(state, goal):
                status = "success"
                break
            if k == task.max_steps:
                break
            if k in kicks:
                state = inject_disturbance(state, kicks[k])
                state, _, kk = settle(state, mesh, env_pts, world_p, 1)
                worst_kkt = max(worst_kkt, kk)
            u, diag = planner.plan(state)
            cycles += 1
            cso_t += diag.cso_time
            cpo_t += diag.cpo_time
            if diag.error:
                raise TrialAbort(f"planner: {diag.error}")
            nxt, imp = step_exact(state, u, mesh, env_pts, world_p)
            worst_kkt = max(worst_kkt, _kkt_violation(imp))
            if np.linalg.norm(nxt.x_o.p - state.x_o.p) > scene.max_step_displacement:
                raise TrialAbort("object displacement per step exceeds the cap")
            state = nxt
            if out is not None:
                out.write(json.dumps({
                    "step": k, "p_o": state.x_o.p.tolist(), "q_o": state.x_o.q.tolist(),
                    "p_ee": state.p_ee.tolist(), "u": u.tolist(), "gamma": diag.gamma,
                    "rho": None if not np.isfinite(diag.rho) else diag.rho,
                    "contacts": [c.pair for c in imp.contacts].count("env"),
                    "robot_contact": any(c.pair == "robot" for c in imp.contacts),
                    "p_ref": diag.p_ref}) + "\n")
    except (SolverError, TrialAbort, FloatingPointError) as exc:
        status, error = "error", f"{type(exc).__name__}: {exc}"
    finally:
        if out is not None:
            out.close()
    wall = time.perf_counter() - wall0
    pos, quat = pose_errors(state.x_o, goal)
    n = max(cycles, 1)
    return TrialRecord(int(seed), cfg.method, scene.n_s, status, status == "success", steps,
                       steps * scene.h, wall, (cso_t + cpo_t) / n, cso_t / n, cpo_t / n, pos, quat,
                       planner.state.switches, worst_kkt, mass, mu_env, mu_r, error)


# ---------------------------------------------------------------- batteries

def make_battery(kind: str, n: int, seed: int = 0, max_steps=None, **task_kw):
    """Task list for a named battery.

    "push":        0.2 m planar push, no rotation
    "rotation":    desk-scale on-ground rotation, random xy and yaw
    "adversarial": rotation tasks with the fingertip starting on the goal side
    "rotation_full", "adversarial_full": xy in [-0.3, 0.3] and yaw in [-pi, pi]
    """
    rng = np.random.default_rng([seed, 7919])
    tasks = []
    for _ in range(n):
        if kind == "push":
            t = TaskSpec(init_xy=(0.2, 0.0), max_steps=2500 if max_steps is None else max_steps)
        elif kind in ("rotation", "adversarial", "rotation_full", "adversarial_full"):
            full = kind.endswith("_full")
            r, yr = (0.3, np.pi) if full else (0.15, np.pi / 2)
            xy = rng.uniform(-r, r, 2)
            while np.linalg.norm(xy) < 0.08:
                xy = rng.uniform(-r, r, 2)
            yaw = rng.uniform(-yr, yr)
            t = TaskSpec(init_xy=tuple(xy), init_euler=(0.0, 0.0, float(yaw)),
                         adversarial=kind.startswith("adversarial"),
                         max_steps=(2500 if full else 600) if max_steps is None else max_steps)
        else:
            raise ConfigError(f"unknown battery {kind!r}")
        tasks.append(replace(t, **task_kw) if task_kw else t)
    return tasks


# ---------------------------------------------------------------- I/O

def _tuplify(d, cls):
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    out = {}
    for k, v in d.items():
        if isinstance(v, list):
            v = tuple(tuple(x) if isinstance(x, list) else x for x in v)
        out[k] = v
    return out


def scene_from_dict(d) -> Scene:
    return Scene(**_tuplify(d, Scene))


def task_from_dict(d) -> TaskSpec:
    return TaskSpec(**_tuplify(d, TaskSpec))


def load_json(path):
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def append_csv(path, records):
    path = Path(path)
    new = not path.exists()
    with path.open("a", newline="") as f:
        w = csv.DictWriter(f, fieldnames=TrialRecord.columns())
        if new:
            w.writeheader()
        for r in records:
            w.writerow(r.to_row())
