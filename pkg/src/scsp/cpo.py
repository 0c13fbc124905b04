"""Contact planning: ranking between the CSO optimum and the nearest surface
point, lift / place potential fields, and a short-horizon shooting MPC over
the closed-form contact model.

The trigger is

    rho   = (l_near - l_min) / max(l_max - l_min, eps)
    kappa = 1(rho > rho_bar)          (accept_when="above")
    gamma <- 1  if kappa = 0 and t_row1 >= T1
    gamma <- 0  if kappa = 1 and t_(kappa=1) >= T2 and t_contact >= T3

with gamma = 0 the lifting phase (reference = CSO optimum) and gamma = 1 the
placing phase (reference = nearest point).
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .cso import CsoObjectiveSpec, CsoResult, CsoSolverParams, objective_branch, select_contact
from .dynamics import RolloutModel, SystemParams, WorldState, batch_robot_geometry, detect_contacts
from .errors import ConfigError
from .geometry import CandidateSet, TriMesh
from .rollout import (MODE_ALIGN, MODE_LP, MODE_TRACK, TERM_CSO, TERM_POSE, CompiledModel,
                      rollout_costs)
from .scm import freeze_scene

METHODS = ("scsp", "scsp_no_rs", "cf_mpc", "a_mpc")


@dataclass(frozen=True)
class RankingParams:
    rho_bar: float = 0.75
    T1: int = 5
    T2: int = 10
    T3: int = 15
    eps: float = 0.01
    accept_when: str = "above"      # kappa = 1(rho > rho_bar); "below" flips the comparison
    row1_counter: str = "kappa0"    # "kappa0": t_(kappa=0) >= T1; "kappa1": literal t_(kappa=1) >= T1

    def __post_init__(self):
        if not 0.0 < self.rho_bar < 1.0:
            raise ConfigError("rho_bar must lie in (0, 1)")
        if min(self.T1, self.T2, self.T3) < 1:
            raise ConfigError("T1, T2, T3 must be >= 1")
        if self.eps <= 0:
            raise ConfigError("eps must be positive")
        if self.accept_when not in ("above", "below"):
            raise ConfigError("accept_when must be 'above' or 'below'")
        if self.row1_counter not in ("kappa0", "kappa1"):
            raise ConfigError("row1_counter must be 'kappa0' or 'kappa1'")


@dataclass(frozen=True)
class CpoCostSpec:
    w_lp: float = 1.0
    w_u: float = 50.0
    w_cso: float = 10.0
    w_att: float = 100.0
    w_obs: float = 1.0
    w_con: float = 1.0
    w_o: float = 100.0
    sigma: float = 0.01       # squared-distance radius of the repulsion (m^2)
    d: float = 0.05           # lift offset along the contact normal (m)
    eps_log: float = 1e-3
    con_target: str = "object"   # "object": log term on |p_ee - p_o|; "ref": on |p_ee - p_ref|
    # baseline stage weights
    w_track: float = 1.0
    w_align: float = 1.0
    # relative weight of the vertical position error in the terminal cost; on a flat
    # support the resting height follows from orientation, and the closed-form model
    # lets pushed objects float slightly
    w_z: float = 0.0

    def __post_init__(self):
        for k in ("w_lp", "w_u", "w_cso", "w_att", "w_con", "w_o", "w_track", "w_align", "w_z"):
            if getattr(self, k) < 0:
                raise ConfigError(f"{k} must be nonnegative")
        if self.sigma <= 0 or self.d <= 0 or self.eps_log <= 0:
            raise ConfigError("sigma, d and eps_log must be positive")
        if self.con_target not in ("object", "ref"):
            raise ConfigError("con_target must be 'object' or 'ref'")


@dataclass(frozen=True)
class CemParams:
    samples: int = 64
    elites: int = 8
    iters: int = 3
    horizon: int = 5
    u_max: float = 0.01
    init_std: float = 0.5     # fraction of u_max
    min_std: float = 0.02
    backend: str = "cem"      # "cem" or "gradient"

    def __post_init__(self):
        if self.samples < 2 or not 1 <= self.elites <= self.samples:
            raise ConfigError("need samples >= 2 and 1 <= elites <= samples")
        if self.horizon < 1 or self.iters < 1 or self.u_max <= 0:
            raise ConfigError("horizon, iters >= 1 and u_max > 0 required")
        if self.backend not in ("cem", "gradient"):
            raise ConfigError("backend must be 'cem' or 'gradient'")


@dataclass
class PlannerState:
    gamma: int = 0
    kappa: int = 0
    rho: float = float("nan")
    p_ref: np.ndarray | None = None       # world frame at the last update
    ref_index: int = -1
    near_index: int = -1
    t_k1: int = 0
    t_k0: int = 0
    t_contact: int = 0
    last: CsoResult | None = None
    u_mean: np.ndarray | None = None
    cycle: int = 0
    switches: int = 0


# ---------------------------------------------------------------- ranking

def compute_improvement_ratio(l_near, result: CsoResult, eps) -> float:
    return float((l_near - result.l_min) / max(result.l_max - result.l_min, eps))


def kappa_of(rho, params: RankingParams) -> int:
    if params.accept_when == "above":
        return int(rho > params.rho_bar)
    return int(rho < params.rho_bar)


def update_trigger(planner: PlannerState, rho, params: RankingParams, in_contact=None,
                   p_star=None, p_near=None, star_index=-1, near_index=-1) -> PlannerState:
    """Advance counters and the phase flag; returns a new PlannerState.

    Counters restart whenever gamma switches. p_ref follows the phase every cycle."""
    kappa = kappa_of(rho, params)
    t_k1 = planner.t_k1 + kappa
    t_k0 = planner.t_k0 + (1 - kappa)
    t_contact = planner.t_contact
    if in_contact is not None:
        t_contact = t_contact + 1 if in_contact else 0
    row1 = t_k0 if params.row1_counter == "kappa0" else t_k1
    gamma = planner.gamma
    if kappa == 0 and row1 >= params.T1:
        gamma = 1
    elif kappa == 1 and t_k1 >= params.T2 and t_contact >= params.T3:
        gamma = 0
    switches = planner.switches
    if gamma != planner.gamma:
        t_k1 = t_k0 = 0
        switches += 1
    p_ref, ref_index = planner.p_ref, planner.ref_index
    if gamma == 0 and p_star is not None:
        p_ref, ref_index = np.asarray(p_star, float).copy(), star_index
    elif gamma == 1 and p_near is not None:
        p_ref, ref_index = np.asarray(p_near, float).copy(), near_index
    return replace(planner, gamma=gamma, kappa=kappa, rho=float(rho), t_k1=t_k1, t_k0=t_k0,
                   t_contact=t_contact, p_ref=p_ref, ref_index=ref_index, switches=switches)


# ---------------------------------------------------------------- stage costs

def obs_cost(p_ee, p_o, spec: CpoCostSpec):
    d2 = float(np.sum((np.asarray(p_ee) - p_o) ** 2))
    return float(np.log(d2 + spec.eps_log)) if d2 <= spec.sigma else 0.0


def lift_cost(p_ee, p_o, p_lift, spec: CpoCostSpec):
    """Attraction to p_lift plus repulsion from the object center (penalizes proximity)."""
    d = np.asarray(p_ee) - p_lift
    return float(spec.w_att * (d @ d) - abs(spec.w_obs) * obs_cost(p_ee, p_o, spec))


def place_cost(p_ee, p_o, p_ref, spec: CpoCostSpec):
    e = np.asarray(p_ee) - p_o
    d2 = float(e @ e)
    if spec.con_target == "ref":
        f = np.asarray(p_ee) - p_ref
        dc = float(f @ f)
    else:
        dc = d2
    return float(spec.w_con * np.log(dc + spec.eps_log) + spec.w_o * d2)


def lp_cost(gamma, p_ee, p_o, p_lift, p_ref, spec: CpoCostSpec):
    return lift_cost(p_ee, p_o, p_lift, spec) if gamma == 0 else place_cost(p_ee, p_o, p_ref, spec)


def align_cost(p_ee, p_obj, p_goal):
    """-(cos(goal - obj, obj - ee) + 1) / 2; zero when either direction is undefined."""
    a = np.asarray(p_goal, float) - p_obj
    b = np.asarray(p_obj, float) - p_ee
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-12 or nb < 1e-12:
        return 0.0
    return float(-((a @ b) / (na * nb) + 1.0) / 2.0)


def lift_point(result: CsoResult, d):
    return result.p_star + d * result.n_star


# ---------------------------------------------------------------- optimizers

def _pack_cost(method, gamma, spec: CpoCostSpec, cso_spec: CsoObjectiveSpec, branch):
    if method in ("scsp", "scsp_no_rs"):
        mode, term, w_term = MODE_LP, TERM_CSO, spec.w_cso
    elif method == "cf_mpc":
        mode, term, w_term = MODE_TRACK, TERM_POSE, 1.0
    else:
        mode, term, w_term = MODE_ALIGN, TERM_POSE, 1.0
    w_u = spec.w_u if mode == MODE_LP else 1.0
    return np.array([mode, gamma, spec.w_lp, w_u, w_term, spec.w_att, spec.w_obs, spec.sigma,
                     spec.eps_log, spec.w_con, spec.w_o, float(spec.con_target == "ref"),
                     cso_spec.w_pos, cso_spec.w_quat, branch, term, spec.w_track, spec.w_align, spec.w_z],
                    dtype=float)


def cem(cost_fn, mean0, cem_p: CemParams, rng):
    """Cross-entropy search over control sequences inside the box; u = 0 and the
    warm start are always among the candidates, so the result never costs more than u = 0."""
    N = cem_p.horizon
    u_max = cem_p.u_max
    zero = np.zeros((N, 3))
    mean = np.clip(mean0, -u_max, u_max)
    std = np.full((N, 3), cem_p.init_std * u_max)
    best_u, best_c = zero, np.inf
    c_zero = np.inf
    evals = 0
    for it in range(cem_p.iters):
        U = mean + std * rng.standard_normal((cem_p.samples, N, 3))
        if it == 0:
            U[0] = zero
            U[1] = mean
        U = np.clip(U, -u_max, u_max)
        c = cost_fn(U)
        evals += len(U)
        if it == 0:
            c_zero = c[0]
        k = int(np.argmin(c))
        if c[k] < best_c:
            best_c, best_u = float(c[k]), U[k].copy()
        if not np.isfinite(c).any():
            break
        el = np.argsort(c, kind="stable")[:cem_p.elites]
        mean = U[el].mean(axis=0)
        std = np.maximum(U[el].std(axis=0), cem_p.min_std * u_max)
    return best_u, best_c, float(c_zero), evals


def projected_gradient(cost_fn, mean0, cem_p: CemParams, iters=None, fd=1e-4):
    """Finite-difference projected gradient over the sequence; alternative backend."""
    N = cem_p.horizon
    u_max = cem_p.u_max
    iters = cem_p.iters * 4 if iters is None else iters
    x = np.clip(mean0, -u_max, u_max).ravel()
    n = len(x)
    c_zero = float(cost_fn(np.zeros((1, N, 3)))[0])
    cx = float(cost_fn(x.reshape(1, N, 3))[0])
    if c_zero < cx:
        x, cx = np.zeros(n), c_zero
    step = u_max
    evals = 2
    for _ in range(iters):
        pert = np.concatenate([x + fd * np.eye(n), x - fd * np.eye(n)]).reshape(-1, N, 3)
        c = cost_fn(pert)
        evals += len(c)
        g = (c[:n] - c[n:]) / (2 * fd)
        if not np.all(np.isfinite(g)) or np.linalg.norm(g) == 0:
            break
        d = -g / np.linalg.norm(g)
        trial = np.clip(x + step * d, -u_max, u_max)
        ct = float(cost_fn(trial.reshape(1, N, 3))[0])
        evals += 1
        if ct < cx:
            x, cx = trial, ct
            step *= 1.5
        else:
            step *= 0.5
            if step < 1e-6 * u_max:
                break
    return x.reshape(N, 3), cx, c_zero, evals


# ---------------------------------------------------------------- planner

@dataclass(frozen=True)
class PlannerConfig:
    method: str = "scsp"
    ranking: RankingParams = field(default_factory=RankingParams)
    cost: CpoCostSpec = field(default_factory=CpoCostSpec)
    cem: CemParams = field(default_factory=CemParams)
    w_pos: float = 500.0
    w_quat: float = 5.0
    metric: str = "planar"
    up_tol: float = 0.02
    cso_period: int = 1
    scm_horizon: int = 10    # frozen-set SCM prediction steps inside CSO
    scm_mass: str = "consistent"
    reach_tol: float = 0.02   # scsp_no_rs: distance to p_lift that starts placing
    no_rs_tol: float = 0.0    # scsp_no_rs: extra distance at which p_near still counts as the optimum
    # candidates outside these world-frame limits are unreachable this cycle
    min_contact_height: float = 0.005
    min_normal_z: float = -0.5
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}")
        if self.cso_period < 1 or self.scm_horizon < 1:
            raise ConfigError("cso_period and scm_horizon must be >= 1")
        if self.scm_mass not in ("consistent", "literal"):
            raise ConfigError("scm_mass must be 'consistent' or 'literal'")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key, typ in (("ranking", RankingParams), ("cost", CpoCostSpec), ("cem", CemParams)):
            if key in d and isinstance(d[key], dict):
                d[key] = typ(**d[key])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


@dataclass
class CycleDiagnostics:
    cycle: int
    gamma: int
    kappa: int
    rho: float
    p_ref: list | None
    u: list
    rollout_cost: float
    zero_cost: float
    cso_best_cost: float | None
    cso_time: float
    cpo_time: float
    error: str | None = None

    def to_dict(self):
        return asdict(self)


def fingertip_gap(model: RolloutModel, world: WorldState):
    gap, _, _ = batch_robot_geometry(model, world.x_o.p[None], world.x_o.R[None], world.p_ee[None])
    return float(gap[0])


def cpo_step(world: WorldState, planner: PlannerState, candidates: CandidateSet, spec: CpoCostSpec,
             runtime: "Planner"):
    """One CPO cycle given the CSO result in planner.last: ranking update, then the
    shooting problem. Returns (u, planner, diagnostics dict)."""
    cfg = runtime.config
    t0 = time.perf_counter()
    res = planner.last
    gap = fingertip_gap(runtime.model, world)
    in_contact = gap < runtime.params.margin
    p_lift = np.zeros(3)
    if cfg.method in ("scsp", "scsp_no_rs"):
        if res is None:
            raise ConfigError("planner has no CSO result")
        near = candidates.nearest_index(world.x_o.to_body(world.p_ee))
        p_near = world.x_o.to_world(candidates.points[near])
        p_lift = lift_point(res, spec.d)
        if cfg.method == "scsp":
            l_near = res.costs[near]
            if not np.isfinite(l_near):
                l_near = res.l_max
            rho = compute_improvement_ratio(l_near, res, cfg.ranking.eps)
            planner = update_trigger(planner, rho, cfg.ranking, in_contact, res.p_star, p_near,
                                     res.best, near)
        else:
            # follow the CSO optimum every cycle: place once above it, lift as soon as the
            # optimum is no longer the sample under the fingertip
            near_star = near == res.best or np.linalg.norm(p_near - res.p_star) <= cfg.no_rs_tol
            reach = np.linalg.norm(world.p_ee - p_lift) <= cfg.reach_tol
            gamma = int(reach or (planner.gamma == 1 and near_star))
            planner = replace(planner, gamma=gamma, kappa=0, rho=float("nan"), p_ref=res.p_star.copy(),
                              ref_index=res.best, switches=planner.switches + int(gamma != planner.gamma),
                              t_contact=planner.t_contact + 1 if in_contact else 0)
        planner.near_index = near
    else:
        planner = replace(planner, t_contact=planner.t_contact + 1 if in_contact else 0)
    gamma = planner.gamma
    p_ref_body = (candidates.points[planner.ref_index] if planner.ref_index >= 0 else np.zeros(3))
    cso_spec = runtime.cso_spec
    branch = 0
    if cfg.method in ("scsp", "scsp_no_rs"):
        branch = objective_branch(world, cso_spec)
    cw = _pack_cost(cfg.method, gamma, spec, cso_spec, branch)
    cm = runtime.compiled
    p0, q0, e0 = world.x_o.p.astype(float), world.x_o.q.astype(float), world.p_ee.astype(float)
    gp, gq = cso_spec.goal.p.astype(float), cso_spec.goal.q.astype(float)

    def cost_fn(U):
        return rollout_costs(p0, q0, e0, np.ascontiguousarray(U, dtype=float), *cm.args, cw,
                             p_lift.astype(float), np.asarray(p_ref_body, float), gp, gq)

    N = cfg.cem.horizon
    mean0 = np.zeros((N, 3))
    if planner.u_mean is not None and planner.u_mean.shape == (N, 3):
        mean0 = np.vstack([planner.u_mean[1:], planner.u_mean[-1:]])
    rng = np.random.default_rng([cfg.seed, planner.cycle])
    if cfg.cem.backend == "cem":
        U, c_best, c_zero, evals = cem(cost_fn, mean0, cfg.cem, rng)
    else:
        U, c_best, c_zero, evals = projected_gradient(cost_fn, mean0, cfg.cem)
    error = None
    if not np.isfinite(c_best) or not np.all(np.isfinite(U)):
        U = np.zeros((N, 3))
        error = "rollout diverged"
    u = U[0].copy()
    # same fingertip floor as inside the rollouts
    u[2] = max(u[2], runtime.params.r_tip - world.p_ee[2])
    planner.u_mean = U
    diag = CycleDiagnostics(planner.cycle, int(gamma), int(planner.kappa), float(planner.rho),
                            None if planner.p_ref is None else planner.p_ref.tolist(), u.tolist(),
                            float(c_best), float(c_zero), None if res is None else float(res.l_min),
                            0.0, time.perf_counter() - t0, error)
    planner.cycle += 1
    return u, planner, diag


class Planner:
    """Closed-loop SCSP planner (or a baseline) on the planner-side model only."""

    def __init__(self, mesh: TriMesh, candidates: CandidateSet, goal, params: SystemParams,
                 config: PlannerConfig = PlannerConfig(), env_points=None,
                 solver: CsoSolverParams = CsoSolverParams()):
        self.mesh = mesh
        self.candidates = candidates
        self.params = params
        self.config = config
        self.env_points = mesh.vertices if env_points is None else np.asarray(env_points)
        self.model = RolloutModel.build(mesh, self.env_points, params)
        self.compiled = CompiledModel(self.model)
        self.cso_spec = CsoObjectiveSpec(goal, config.w_pos, config.w_quat, config.metric, config.up_tol)
        self.solver = solver
        self.state = PlannerState()

    def reset(self):
        self.state = PlannerState()

    def reachable(self, world: WorldState) -> CandidateSet:
        """Candidates restricted to points the fingertip can reach from above the support."""
        c = self.candidates
        Rm = world.x_o.R
        z = c.points @ Rm[2] + world.x_o.p[2]
        nz = c.normals @ Rm[2]
        mask = c.valid & (z >= self.config.min_contact_height) & (nz >= self.config.min_normal_z)
        return c.with_valid(mask) if mask.any() else c

    def run_cso(self, world: WorldState, cands: CandidateSet | None = None) -> CsoResult:
        cands = self.reachable(world) if cands is None else cands
        contacts = detect_contacts(world, self.mesh, self.env_points, self.params, robot=False)
        frozen = freeze_scene(world, contacts, self.params, horizon=self.config.scm_horizon,
                              mass_model=self.config.scm_mass)
        warm = None if self.state.last is None else self.state.last.lam_all
        return select_contact(cands, frozen, world, self.cso_spec, self.params, warm, self.solver)

    def plan(self, world: WorldState):
        """Returns (u, diagnostics)."""
        cso_time = 0.0
        cands = self.candidates
        if self.config.method in ("scsp", "scsp_no_rs"):
            cands = self.reachable(world)
            if self.state.last is None or self.state.cycle % self.config.cso_period == 0:
                t0 = time.perf_counter()
                self.state.last = self.run_cso(world, cands)
                cso_time = time.perf_counter() - t0
        u, self.state, diag = cpo_step(world, self.state, cands, self.config.cost, self)
        diag.cso_time = cso_time
        return u, diag
