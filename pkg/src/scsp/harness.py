"""Experiment runner: batches of closed-loop trials per method, aggregate
tables, model audits, and the command-line interface.

Exit codes: 0 ok, 1 configuration error, 2 audit failure, 3 too many hard errors.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .cpo import METHODS, PlannerConfig, align_cost, lift_cost, lp_cost, place_cost, CpoCostSpec
from .dynamics import Pose, SystemParams, WorldState, detect_contacts
from .errors import ConfigError
from .geometry import apply_valid_mask, farthest_point_sample, make_box, make_prism
from .rotations import quat_from_euler, quat_to_matrix
from .scm import (env_force, clamp_pattern, freeze_scene, frobenius_diag_check, error_bound_check,
                  predict, sample_jacobian, scm_gradient)
from .sim import (Scene, TaskSpec, TrialRecord, append_csv, load_json, make_battery, run_trial,
                  scene_from_dict, task_from_dict)

log = logging.getLogger("scsp")

REPORT_VERSION = 1
WORKERS_ENV = "SCSP_WORKERS"
HARD_ERROR_LIMIT = 0.10


@dataclass(frozen=True)
class ExperimentConfig:
    scene: dict = field(default_factory=dict)
    battery: str = "rotation"           # named battery, used when tasks is empty
    tasks: tuple = ()                   # explicit TaskSpec dicts (cycled over trials)
    methods: tuple = ("scsp",)
    trials: int = 10
    seed: int = 0
    ns: tuple = ()                      # n_s sweep; empty keeps scene.n_s
    max_steps: int | None = None
    planner: dict = field(default_factory=dict)
    out: str = "results"
    trajectories: bool = False
    plots: bool = True

    def __post_init__(self):
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}")
        if any(int(n) < 1 for n in self.ns):
            raise ConfigError("n_s values must be >= 1")

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "method" in d:
            d["methods"] = (d.pop("method"),)
        for k in ("methods", "ns", "tasks"):
            if k in d:
                d[k] = tuple(d[k])
        try:
            cfg = cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        scene_from_dict(cfg.scene)
        PlannerConfig.from_dict(cfg.planner)
        return cfg

    @classmethod
    def load(cls, path):
        return cls.from_dict(load_json(path))


@dataclass
class MethodSummary:
    method: str
    n_s: int
    trials: int
    success_rate: float
    hard_errors: int
    exec_time: float        # mean simulated seconds over successful trials
    plan_time: float        # mean wall seconds per planner cycle over all trials
    cso_time: float
    cpo_time: float
    pos_err: float          # mean final errors over successful trials
    quat_err: float


@dataclass
class AggregateReport:
    version: int
    rows: list
    records: list

    def rate(self, method, n_s=None):
        for r in self.rows:
            if r.method == method and (n_s is None or r.n_s == n_s):
                return r.success_rate
        raise KeyError((method, n_s))

    def to_dict(self):
        return {"version": self.version, "rows": [asdict(r) for r in self.rows]}

    def markdown(self):
        lines = ["# Results", "",
                 "Errors and execution time are averaged over successful trials; planning time "
                 "is wall-clock per planner cycle (CSO + CPO) over all trials.", "",
                 "| method | n_s | trials | success | exec time (s) | plan time (ms) | CSO (ms) | CPO (ms) "
                 "| pos err (m) | quat err | hard errors |",
                 "|---|---|---|---|---|---|---|---|---|---|---|"]
        for r in self.rows:
            lines.append(f"| {r.method} | {r.n_s} | {r.trials} | {r.success_rate:.2f} | {r.exec_time:.2f} "
                         f"| {1e3 * r.plan_time:.1f} | {1e3 * r.cso_time:.1f} | {1e3 * r.cpo_time:.1f} "
                         f"| {r.pos_err:.4f} | {r.quat_err:.4f} | {r.hard_errors} |")
        return "\n".join(lines) + "\n"


def summarize(records) -> list:
    groups = {}
    for r in records:
        groups.setdefault((r.method, r.n_s), []).append(r)
    rows = []
    for (m, ns), rs in groups.items():
        ok = [r for r in rs if r.success]

        def mean(vals):
            return float(np.mean(vals)) if len(vals) else float("nan")
        rows.append(MethodSummary(m, ns, len(rs), len(ok) / len(rs), sum(r.status == "error" for r in rs),
                                  mean([r.exec_time for r in ok]), mean([r.plan_time for r in rs]),
                                  mean([r.cso_time for r in rs]), mean([r.cpo_time for r in rs]),
                                  mean([r.pos_err for r in ok]), mean([r.quat_err for r in ok])))
    return rows


def _job(args):
    scene, task, planner, seed, traj = args
    return run_trial(scene, task, planner, seed, traj)


def _workers():
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be an integer")


def build_jobs(cfg: ExperimentConfig, out: Path | None):
    scene = scene_from_dict(cfg.scene)
    if cfg.tasks:
        base = [task_from_dict(t) for t in cfg.tasks]
        tasks = [base[i % len(base)] for i in range(cfg.trials)]
        if cfg.max_steps is not None:
            tasks = [replace(t, max_steps=cfg.max_steps) for t in tasks]
    else:
        tasks = make_battery(cfg.battery, cfg.trials, cfg.seed, cfg.max_steps)
    ns_list = [int(n) for n in cfg.ns] or [scene.n_s]
    jobs = []
    for m in cfg.methods:
        pc = PlannerConfig.from_dict(dict(cfg.planner, method=m))
        for ns in ns_list:
            sc = replace(scene, n_s=ns)
            for i, t in enumerate(tasks):
                seed = cfg.seed + i
                traj = None
                if cfg.trajectories and out is not None:
                    traj = str(out / "trajectories" / f"{m}_ns{ns}_seed{seed}.jsonl")
                jobs.append((sc, t, pc, seed, traj))
    return jobs


def run_batch(cfg: ExperimentConfig, workers=None) -> AggregateReport:
    """Run every (method, n_s, trial) job, write CSV / markdown / plots under cfg.out."""
    out = Path(cfg.out) if cfg.out else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if cfg.trajectories:
            (out / "trajectories").mkdir(exist_ok=True)
    jobs = build_jobs(cfg, out)
    workers = _workers() if workers is None else workers
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            records = list(ex.map(_job, jobs))
    else:
        records = [_job(j) for j in jobs]
    report = AggregateReport(REPORT_VERSION, summarize(records), records)
    if out is not None:
        csv_path = out / "trials.csv"
        if csv_path.exists():
            csv_path.unlink()
        append_csv(csv_path, records)
        (out / "summary.md").write_text(report.markdown())
        (out / "summary.json").write_text(json.dumps(report.to_dict(), indent=2))
        if cfg.plots and cfg.trajectories:
            plot_error_curves(out)
    return report


def hard_error_fraction(report: AggregateReport):
    n = len(report.records)
    return sum(r.status == "error" for r in report.records) / max(n, 1)


# ---------------------------------------------------------------- plots

def plot_error_curves(out: Path):
    """Position error against step, one curve per method (mean over its trajectories)."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from .sim import goal_pose
    curves = {}
    for f in sorted((out / "trajectories").glob("*.jsonl")):
        method = f.name.split("_ns")[0]
        err = []
        for line in f.read_text().splitlines():
            rec = json.loads(line)
            err.append(np.linalg.norm(np.asarray(rec["p_o"][:2])))
        if err:
            curves.setdefault(method, []).append(np.asarray(err))
    if not curves:
        return None
    fig, ax = plt.subplots(figsize=(6, 4))
    for m, cs in curves.items():
        n = max(len(c) for c in cs)
        # trials that finished early hold their final error
        pad = np.array([np.concatenate([c, np.full(n - len(c), c[-1])]) for c in cs])
        mu, sd = pad.mean(axis=0), pad.std(axis=0)
        ax.plot(mu, label=m)
        ax.fill_between(np.arange(n), mu - sd, mu + sd, alpha=0.2)
    ax.set_xlabel("step")
    ax.set_ylabel("planar distance to goal (m)")
    ax.legend()
    fig.tight_layout()
    path = out / "error_curves.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_candidate_costs(mesh, candidates, costs, path):
    """Scatter of candidate points coloured by CSO cost."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    c = np.asarray(costs, float)
    ok = np.isfinite(c)
    fig = plt.figure(figsize=(5, 5))
    ax = fig.add_subplot(projection="3d")
    p = candidates.points
    sc = ax.scatter(p[ok, 0], p[ok, 1], p[ok, 2], c=c[ok], cmap="viridis")
    ax.scatter(p[~ok, 0], p[~ok, 1], p[~ok, 2], c="lightgray")
    fig.colorbar(sc, ax=ax, shrink=0.6, label="cost")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


# ---------------------------------------------------------------- audits

def random_scm_scene(rng, params: SystemParams):
    """Object resting on the ground with 1 to 4 touching vertices, plus a robot sample."""
    nc = int(rng.integers(1, 5))
    yaw = rng.uniform(-np.pi, np.pi)
    if nc == 3:
        mesh = make_prism(3, 0.06, 0.08)
        q = quat_from_euler(0.0, 0.0, yaw)
    else:
        mesh = make_box((0.1, 0.1, 0.1))
        if nc == 4:
            q = quat_from_euler(0.0, 0.0, yaw)
        elif nc == 2:
            q = quat_from_euler(rng.uniform(0.1, 0.6) * rng.choice([-1, 1]), 0.0, yaw)
        else:
            q = quat_from_euler(rng.uniform(0.2, 0.6), rng.uniform(0.2, 0.6), yaw)
    z = -(mesh.vertices @ quat_to_matrix(q).T)[:, 2].min()
    state = WorldState(Pose.make([0.0, 0.0, z], q), np.array([1.0, 1.0, 1.0]))
    contacts = detect_contacts(state, mesh, mesh.vertices, params, robot=False)
    frozen = freeze_scene(state, contacts, params)
    cands = apply_valid_mask(farthest_point_sample(mesh, 30))
    s = cands.sample(int(rng.integers(len(cands))))
    Jr = sample_jacobian(s.p, s.n, s.t1, s.t2, state.x_o)
    return state, frozen, Jr


def random_pyramid_force(rng, mu, nmax):
    n = rng.uniform(0.0, nmax)
    return np.array([n, *rng.uniform(-mu * n, mu * n, 2)])


def audit_error_bound(n_scenes=1000, seed=0):
    rng = np.random.default_rng([seed, 3])
    params = SystemParams.paper_planner(eps=0.002)
    bad, worst = [], 0.0
    for s in range(n_scenes):
        _, frozen, Jr = random_scm_scene(rng, params)
        lam = random_pyramid_force(rng, params.mu_r, params.lam_max)
        err, bound = error_bound_check(frozen, lam, Jr)
        worst = max(worst, err / bound if bound > 0 else (np.inf if err > 0 else 0.0))
        if err > bound * (1 + 1e-9) + 1e-15:
            bad.append(s)
    return {"name": "scm_error_bound", "scenes": n_scenes, "violations": bad, "max_ratio": worst}


def audit_diagonal(n_blocks=500, n_perturb=10_000, seed=0):
    rng = np.random.default_rng([seed, 5])
    bad, worst = [], np.inf
    for s in range(n_blocks):
        A = rng.standard_normal((3, 3))
        W = A @ A.T + 1e-3 * np.eye(3)
        margin = frobenius_diag_check(W, n_perturb, rng=rng)
        worst = min(worst, margin)
        if margin < 0:
            bad.append(s)
    return {"name": "diag_frobenius", "blocks": n_blocks, "violations": bad, "min_margin": worst}


def audit_piecewise_linear(n_points=100, seed=0, fd=1e-6):
    """Affinity of env_force within a clamp pattern; scm_gradient against central differences."""
    rng = np.random.default_rng([seed, 11])
    params = SystemParams.paper_planner(eps=0.002)
    lin_bad, grad_bad = [], []
    lin_worst = grad_worst = 0.0
    done = tries = 0
    while done < n_points and tries < 50 * n_points:
        tries += 1
        state, frozen, Jr = random_scm_scene(rng, params)
        lam = random_pyramid_force(rng, params.mu_r, params.lam_max)
        pat = clamp_pattern(frozen, lam, Jr)
        # interior point: every pre-clamp value away from zero
        g = frozen.J_env @ (frozen.Minv @ (frozen.h * (frozen.tau_o + Jr.T @ lam)))
        if np.any(np.abs(g) < 1e-6 * (1 + np.abs(g).max())):
            continue
        d = rng.standard_normal(3)
        d *= 1e-4 / np.linalg.norm(d)
        if not np.array_equal(pat, clamp_pattern(frozen, lam + d, Jr)) or \
                not np.array_equal(pat, clamp_pattern(frozen, lam - d, Jr)):
            continue
        f0, f1, f2 = (env_force(frozen, x, Jr) for x in (lam - d, lam, lam + d))
        scale = 1.0 + np.abs(f1).max()
        lin = np.abs(f0 + f2 - 2 * f1).max() / scale
        lin_worst = max(lin_worst, lin)
        if lin > 1e-12:
            lin_bad.append(done)
        G = scm_gradient(frozen, state, lam, Jr)
        Gfd = np.empty_like(G)
        for k in range(3):
            e = np.zeros(3)
            e[k] = fd
            xp, xm = predict(frozen, state, lam + e, Jr), predict(frozen, state, lam - e, Jr)
            Gfd[:, k] = (np.concatenate([xp.p, xp.q]) - np.concatenate([xm.p, xm.q])) / (2 * fd)
        rel = np.abs(G - Gfd).max() / max(np.abs(Gfd).max(), 1e-12)
        grad_worst = max(grad_worst, rel)
        if rel > 1e-5:
            grad_bad.append(done)
        done += 1
    return {"name": "piecewise_linear", "points": done, "violations": lin_bad + grad_bad,
            "max_linearity": lin_worst, "max_grad_rel": grad_worst}


def audit_lp_split(n=200, seed=0):
    """The switched stage cost equals the selected branch exactly."""
    rng = np.random.default_rng([seed, 13])
    spec = CpoCostSpec()
    bad = []
    for s in range(n):
        p_ee, p_o, p_lift, p_ref = (rng.uniform(-0.2, 0.2, 3) for _ in range(4))
        if lp_cost(0, p_ee, p_o, p_lift, p_ref, spec) != lift_cost(p_ee, p_o, p_lift, spec):
            bad.append(s)
        if lp_cost(1, p_ee, p_o, p_lift, p_ref, spec) != place_cost(p_ee, p_o, p_ref, spec):
            bad.append(s)
    return {"name": "lp_case_split", "samples": n, "violations": bad}


def run_audits(n_scenes=1000, seed=0):
    results = [audit_error_bound(n_scenes, seed), audit_diagonal(max(1, n_scenes // 2), seed=seed),
               audit_piecewise_linear(min(100, n_scenes), seed), audit_lp_split(seed=seed)]
    return {"ok": all(not r["violations"] for r in results), "audits": results}


def baseline_a_mpc_cost(p_ee, p_obj, p_goal):
    return align_cost(p_ee, p_obj, p_goal)


# ---------------------------------------------------------------- CLI

def _parser():
    p = argparse.ArgumentParser(prog="scsp", description="Contact selection and planning experiments")
    sub = p.add_subparsers(dest="cmd", required=True)
    r = sub.add_parser("run", help="run a batch of trials")
    r.add_argument("--config", required=True)
    r.add_argument("--method", choices=METHODS)
    r.add_argument("--trials", type=int)
    r.add_argument("--seed", type=int)
    r.add_argument("--out")
    a = sub.add_parser("audit", help="model audits")
    a.add_argument("--scenes", type=int, default=1000)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out")
    s = sub.add_parser("sweep", help="success against the number of candidates")
    s.add_argument("--ns", default="5,10,70,120,500")
    s.add_argument("--config")
    s.add_argument("--trials", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    return p


def _overrides(cfg: ExperimentConfig, args):
    kw = {}
    if getattr(args, "method", None):
        kw["methods"] = (args.method,)
    if args.trials is not None:
        kw["trials"] = args.trials
    if args.seed is not None:
        kw["seed"] = args.seed
    if args.out:
        kw["out"] = args.out
    return ExperimentConfig.from_dict({**asdict(cfg), **kw}) if kw else cfg


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code else 0
    try:
        if args.cmd == "audit":
            res = run_audits(args.scenes, args.seed)
            text = json.dumps(res, indent=2, default=float)
            if args.out:
                Path(args.out).write_text(text)
            for r in res["audits"]:
                log.info("%s: %s", r["name"], "ok" if not r["violations"] else f"FAIL {r['violations'][:10]}")
            return 0 if res["ok"] else 2
        if args.cmd == "run":
            cfg = _overrides(ExperimentConfig.load(args.config), args)
        else:
            base = ExperimentConfig.load(args.config) if args.config else ExperimentConfig(battery="rotation")
            ns = tuple(int(x) for x in args.ns.split(","))
            cfg = _overrides(replace(base, ns=ns), args)
        t0 = time.perf_counter()
        report = run_batch(cfg)
        log.info(report.markdown())
        log.info("wall time %.1f s", time.perf_counter() - t0)
        return 3 if hard_error_fraction(report) > HARD_ERROR_LIMIT else 0
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return 1
    except ValueError as exc:
        log.error("config error: %s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
