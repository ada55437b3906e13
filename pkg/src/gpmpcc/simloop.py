"""Closed-loop racing simulation, training-data collection and lap metrics."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .gp import GPDataset, GPModel, default_hyperparameters, fit_hyperparameters
from .mpcc import MPCCConfig, Solution, build_ocp
from .propagation import VarianceTube, ZeroResidual, braking_rollout, build_variance_tube
from .solver import SQPSolver
from .sparse import SparseGPModel, build_fitc, refresh_inducing, select_inducing
from .track import ProjectionError, Track, load_track
from .vehicle import (BD, NU, NX, VehicleParams, discrete_step, perturbed_plant, plant_step,
                      NoiseSpec)
from .config import load_toml

logger = logging.getLogger(__name__)

COLD_START_PASSES = 5

STATE_COLUMNS = ("X", "Y", "Phi", "vx", "vy", "omega")
ERROR_COLUMNS = tuple(f"e_{n}" for n in STATE_COLUMNS)
LOG_COLUMNS = (("k", "theta") + STATE_COLUMNS + ("p", "delta", "slack") + ERROR_COLUMNS
               + ("status", "iterations"))
TIMING_COLUMNS = ("k", "solve_time", "refresh_time")


@dataclass
class LapLog:
    """Per-step record of one closed-loop run.

    ``states`` and ``theta`` have one more row than ``inputs``: the last row is
    the state reached after the final applied input. ``slack[k]`` is the
    lateral violation of ``states[k]`` (zero inside the track) and
    ``errors[k]`` the one-step prediction error ``mu_1 - x(k+1)``.
    """

    variant: str
    seed: int
    config_hash: str
    track_length: float
    Ts: float
    states: np.ndarray
    inputs: np.ndarray
    theta: np.ndarray
    slack: np.ndarray
    errors: np.ndarray
    status: list[str]
    iterations: np.ndarray
    solve_time: np.ndarray
    refresh_time: np.ndarray
    completed: bool
    diverged: bool
    plan_xy: list = field(default_factory=list)

    @property
    def n_steps(self) -> int:
        return self.inputs.shape[0]

    # -- serialization ------------------------------------------------------

    def write(self, stem: str | Path) -> dict[str, Path]:
        """Write ``<stem>.csv``, ``<stem>.timing.csv`` and ``<stem>.json``.

        The CSV and JSON are deterministic; wall-clock timings live in the
        separate timing file.
        """
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        paths = {"log": stem.with_suffix(".csv"), "timing": stem.with_suffix(".timing.csv"),
                 "summary": stem.with_suffix(".json")}
        with open(paths["log"], "w", newline="") as fh:
            fh.write(f"# config_hash={self.config_hash} seed={self.seed} variant={self.variant}\n")
            writer = csv.writer(fh)
            writer.writerow(LOG_COLUMNS)
            for k in range(self.n_steps + 1):
                last = k == self.n_steps
                u = [math.nan] * NU if last else self.inputs[k].tolist()
                e = [math.nan] * NX if last else self.errors[k].tolist()
                status = "" if last else self.status[k]
                its = "" if last else int(self.iterations[k])
                writer.writerow([k, repr(float(self.theta[k]))] + [repr(float(v)) for v in self.states[k]]
                                + [repr(float(v)) for v in u] + [repr(float(self.slack[k]))]
                                + [repr(float(v)) for v in e] + [status, its])
        with open(paths["timing"], "w", newline="") as fh:
            fh.write(f"# config_hash={self.config_hash} seed={self.seed} variant={self.variant}\n")
            writer = csv.writer(fh)
            writer.writerow(TIMING_COLUMNS)
            for k in range(self.n_steps):
                writer.writerow([k, repr(float(self.solve_time[k])), repr(float(self.refresh_time[k]))])
        summary = {"variant": self.variant, "seed": self.seed, "config_hash": self.config_hash,
                   "track_length": self.track_length, "Ts": self.Ts, "completed": self.completed,
                   "diverged": self.diverged, "metrics": deterministic_metrics(compute_metrics(self))}
        paths["summary"].write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        return paths

    @classmethod
    def read(cls, stem: str | Path) -> "LapLog":
        """Load a log written by :meth:`write`; timings are optional."""
        stem = Path(stem)
        summary = json.loads(stem.with_suffix(".json").read_text())
        with open(stem.with_suffix(".csv"), newline="") as fh:
            rows = [r for r in csv.reader(line for line in fh if not line.startswith("#"))]
        header, body = rows[0], rows[1:]
        if tuple(header) != LOG_COLUMNS:
            raise ValueError(f"{stem}.csv: unexpected columns")
        col = {name: i for i, name in enumerate(header)}

        def floats(names, rows_):
            return np.array([[float(r[col[n]]) for n in names] for r in rows_])

        states = floats(STATE_COLUMNS, body)
        theta = floats(("theta",), body)[:, 0]
        slack = floats(("slack",), body)[:, 0]
        steps = body[:-1]
        inputs = floats(("p", "delta"), steps).reshape(-1, NU)
        errors = floats(ERROR_COLUMNS, steps).reshape(-1, NX)
        status = [r[col["status"]] for r in steps]
        iterations = np.array([int(r[col["iterations"]]) for r in steps], dtype=int)
        n = len(steps)
        solve_time = np.full(n, math.nan)
        refresh_time = np.full(n, math.nan)
        timing = stem.with_suffix(".timing.csv")
        if timing.exists():
            with open(timing, newline="") as fh:
                trows = [r for r in csv.reader(line for line in fh if not line.startswith("#"))][1:]
            for r in trows:
                solve_time[int(r[0])] = float(r[1])
                refresh_time[int(r[0])] = float(r[2])
        return cls(summary["variant"], int(summary["seed"]), summary["config_hash"],
                   float(summary["track_length"]), float(summary["Ts"]), states, inputs, theta, slack,
                   errors, status, iterations, solve_time, refresh_time, bool(summary["completed"]),
                   bool(summary["diverged"]))


# -- metrics ----------------------------------------------------------------

def nearest_rank(values, q: float) -> float:
    """Nearest-rank percentile ``q`` in ``(0, 100]``."""
    v = np.sort(np.asarray(values, dtype=float))
    if v.size == 0:
        return math.nan
    rank = max(int(math.ceil(q / 100.0 * v.size)), 1)
    return float(v[rank - 1])


def lap_time(theta, Ts: float, length: float) -> float | None:
    """Time at which progress first reaches ``theta[0] + length``, linearly interpolated."""
    theta = np.asarray(theta, dtype=float)
    goal = theta[0] + length
    hit = np.nonzero(theta >= goal)[0]
    if hit.size == 0:
        return None
    k = int(hit[0])
    if k == 0:
        return 0.0
    frac = (goal - theta[k - 1]) / (theta[k] - theta[k - 1])
    return float((k - 1 + frac) * Ts)


def compute_metrics(log: LapLog) -> dict:
    """Lap time, mean squared slack, mean prediction error and solve-time statistics.

    Means run over the logged steps; on an incomplete lap the lap time is
    ``None`` and ``partial`` is set.
    """
    n = log.n_steps
    T = lap_time(log.theta, log.Ts, log.track_length)
    slack = np.maximum(log.slack[:n], 0.0)
    return {
        "lap_time": T,
        "mean_sq_slack": float(np.mean(slack ** 2)) if n else math.nan,
        "mean_error_norm": float(np.mean(np.linalg.norm(log.errors, axis=1))) if n else math.nan,
        "mean_solve_time": float(np.mean(log.solve_time)) if n else math.nan,
        "p999_solve_time": nearest_rank(log.solve_time, 99.9),
        "mean_refresh_time": float(np.mean(log.refresh_time)) if n else math.nan,
        "steps": n,
        "partial": T is None or not log.completed,
    }


TIMING_METRICS = ("mean_solve_time", "p999_solve_time", "mean_refresh_time")


def deterministic_metrics(metrics: dict) -> dict:
    return {k: v for k, v in metrics.items() if k not in TIMING_METRICS}


# -- training data ----------------------------------------------------------

def residual_targets(states, inputs, nominal: VehicleParams) -> tuple[np.ndarray, np.ndarray]:
    """Inputs ``z_j = [x_j; u_j]`` and targets ``y_j = B_d^+ (x_{j+1} - f(x_j, u_j))``."""
    states = np.asarray(states, dtype=float)
    inputs = np.asarray(inputs, dtype=float)
    n = inputs.shape[0]
    Z = np.hstack([states[:n], inputs])
    Y = np.empty((n, BD.shape[1]))
    pinv = np.linalg.pinv(BD)
    for j in range(n):
        Y[j] = pinv @ (states[j + 1] - discrete_step(states[j], inputs[j], nominal))
    return Z, Y


def collect_training_data(log: LapLog, nominal: VehicleParams, count: int) -> GPDataset:
    """Residual dataset from a logged lap, subsampled with a uniform stride to ``count`` points."""
    Z, Y = residual_targets(log.states, log.inputs, nominal)
    n = Z.shape[0]
    if n <= count:
        return GPDataset(Z, Y)
    idx = (np.arange(count) * n) // count
    return GPDataset(Z[idx], Y[idx])


# -- controller -------------------------------------------------------------

@dataclass(frozen=True)
class LoopSettings:
    """Everything a single run needs besides the variant and the seed."""

    track: Track
    nominal: VehicleParams
    true_params: VehicleParams
    noise: NoiseSpec
    mpcc: MPCCConfig
    max_iter: int = 75
    tol: float = 1e-6
    max_steps: int = 600
    divergence_factor: float = 5.0
    start_theta: float = 0.0
    substeps: int = 1
    tube_noise: bool = True
    r_min_frac: float = 0.1
    n_inducing: int = 10
    decay: float = 1.3
    min_separation: float = 1e-6
    incremental: bool = True
    config_hash: str = ""


class _Controller:
    """Variant-specific model, tube and sparse-refresh logic."""

    def __init__(self, variant: str, settings: LoopSettings, gp: GPModel | None):
        self.variant = variant
        self.s = settings
        if variant in ("gp-full", "gp-sparse") and gp is None:
            raise ValueError(f"variant {variant} needs a fitted GP")
        self.params = settings.true_params if variant == "reference" else settings.nominal
        self.gp = gp
        self.model = gp if variant == "gp-full" else ZeroResidual()
        self.uses_tube = variant in ("gp-full", "gp-sparse")
        self.sigma_w = np.array(settings.noise.sigma_w) if settings.tube_noise and not settings.noise.is_zero else None

    def prepare(self, ref_x, ref_u) -> float:
        """Point the sparse model at the reference trajectory; returns the wall time spent."""
        if self.variant != "gp-sparse":
            return 0.0
        t0 = time.perf_counter()
        traj = np.hstack([ref_x[:-1], ref_u])
        s = self.s
        if isinstance(self.model, SparseGPModel):
            self.model = refresh_inducing(self.model, traj, s.n_inducing, s.decay, s.min_separation,
                                          s.incremental)
        else:
            ind = select_inducing(traj, s.n_inducing, s.decay, self.gp.hypers, s.min_separation)
            self.model = build_fitc(self.gp, ind)
        return time.perf_counter() - t0

    def tube(self, ref_x, ref_u) -> VarianceTube:
        c, track = self.s.mpcc, self.s.track
        if not self.uses_tube:
            return VarianceTube.zero(c.N, track.half_width)
        return build_variance_tube(ref_x[:-1], ref_u, self.model, self.params, self.sigma_w, track.half_width,
                                   c.chi2_level, c.n_tight, self.s.r_min_frac)


def _shift(sol: Solution) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    xs = np.vstack([sol.states[1:], sol.states[-1:]])
    us = np.vstack([sol.inputs[1:], sol.inputs[-1:]])
    vs = np.concatenate([sol.progress[1:], sol.progress[-1:]])
    return xs, us, vs


def start_state(track: Track, theta: float) -> np.ndarray:
    """Standstill on the centerline, aligned with its tangent."""
    pose = track.eval_centerline(theta)
    return np.array([pose.Xc, pose.Yc, pose.Phic, 0.0, 0.0, 0.0])


def run_lap(variant: str, settings: LoopSettings, seed: int, gp: GPModel | None = None,
            record_plan: bool = False) -> LapLog:
    """Race one lap from standstill with one controller variant.

    Each step solves the OCP around the shifted previous solution, applies
    the first input to the plant and logs the outcome. The loop stops on lap
    completion, on divergence beyond ``divergence_factor * r`` or after
    ``max_steps``.
    """
    s = settings
    cfg, track, P = s.mpcc, s.track, s.nominal
    N = cfg.N
    ctrl = _Controller(variant, s, gp)
    rng = np.random.default_rng(seed)
    solver = SQPSolver(max_iter=s.max_iter, tol=s.tol)

    x = start_state(track, s.start_theta)
    theta = s.start_theta
    u_prev = np.zeros(NU)
    v_prev = 0.0
    ref_x, ref_u = braking_rollout(x, ctrl.params, N)
    ref_v = np.zeros(N)
    prev: Solution | None = None
    goal = s.start_theta + track.length
    r = track.half_width
    lo = np.array([0.0, -P.delta_max])
    hi = np.array([1.0, P.delta_max])

    states, inputs, thetas, slacks, errors = [x], [], [theta], [], []
    status, iterations, solve_time, refresh_time, plans = [], [], [], [], []
    completed = diverged = False
    for k in range(s.max_steps):
        slacks.append(max(track.distance(x, theta) - r, 0.0))
        t_refresh = 0.0
        passes = COLD_START_PASSES if k == 0 else 1
        t_solve = 0.0
        for rep in range(passes):
            t_refresh += ctrl.prepare(ref_x, ref_u)
            tube = ctrl.tube(ref_x, ref_u)
            ocp = build_ocp(x, theta, ref_x, ref_v, u_prev, v_prev, ctrl.model, tube, track, ctrl.params, cfg)
            t0 = time.perf_counter()
            sol, report = solver.solve(ocp, ocp.initial_guess(prev))
            t_solve += time.perf_counter() - t0
            if rep < passes - 1:
                # cold start: re-freeze the OCP around the fresh plan
                ref_x, ref_u, ref_v = sol.states, sol.inputs, sol.progress
        u = sol.inputs[0]
        if np.any(u < lo - 1e-9) or np.any(u > hi + 1e-9):
            raise AssertionError(f"solver returned an input outside its bounds: {u}")
        u = np.clip(u, lo, hi)
        x_next = plant_step(x, u, s.true_params, s.noise, rng, s.substeps)
        errors.append(sol.states[1] - x_next)
        inputs.append(u)
        status.append(report.status)
        iterations.append(report.iterations)
        solve_time.append(t_solve)
        refresh_time.append(t_refresh)
        if record_plan:
            plans.append({"k": k, "xy": sol.states[:, :2].tolist(), "radii": tube.radii.tolist(),
                          "theta": sol.theta.tolist()})
        hint = theta + float(sol.progress[0])
        try:
            theta_next = track.project(x_next, hint)
        except ProjectionError as err:
            theta_next = err.theta
        if theta_next < theta - 0.5 * track.length or theta_next > theta + 0.5 * track.length:
            theta_next = theta
        x, theta = x_next, theta_next
        states.append(x)
        thetas.append(theta)
        prev = sol
        u_prev, v_prev = u, float(sol.progress[0])
        ref_x, ref_u, ref_v = _shift(sol)
        if not np.all(np.isfinite(x)) or track.distance(x, theta) > s.divergence_factor * r:
            diverged = True
            break
        if theta >= goal:
            completed = True
            break
    slacks.append(max(track.distance(x, theta) - r, 0.0) if np.all(np.isfinite(x)) else math.inf)
    if diverged:
        logger.warning("%s seed %d left the track at step %d", variant, seed, len(inputs))
    return LapLog(variant, seed, s.config_hash, track.length, P.Ts, np.array(states), np.array(inputs).reshape(-1, NU),
                  np.array(thetas), np.array(slacks), np.array(errors).reshape(-1, NX), status,
                  np.array(iterations, dtype=int), np.array(solve_time), np.array(refresh_time),
                  completed, diverged, plans)


# -- experiments ------------------------------------------------------------

def settings_from_config(config: dict) -> LoopSettings:
    """Assemble loop settings from a resolved experiment config."""
    exp = config["experiment"]
    track = load_track(exp["track_path"])
    nominal = VehicleParams.from_dict(load_toml(exp["vehicle_path"]))
    pl = config["plant"]
    true_params = perturbed_plant(nominal, pl["perturbation"], pl["perturbation_seed"])
    nz = config["noise"]
    noise = NoiseSpec(tuple(float(v) * nz["scale"] for v in nz["variance_per_step"])) if nz["enabled"] else NoiseSpec()
    sim, sp, tb, sv = config["sim"], config["sparse"], config["tube"], config["solver"]
    return LoopSettings(track, nominal, true_params, noise, MPCCConfig.from_config(config["mpcc"], nominal.Ts),
                        max_iter=sv["max_iter"], tol=sv["tol"], max_steps=sim["max_steps"],
                        divergence_factor=sim["divergence_factor"], start_theta=sim["start_theta"],
                        substeps=pl["substeps"], tube_noise=tb["include_process_noise"],
                        r_min_frac=tb["r_min_frac"], n_inducing=sp["n_inducing"], decay=sp["decay"],
                        min_separation=sp["min_separation"], incremental=sp["incremental"],
                        config_hash=config.get("hash", ""))


def learn_residual_model(settings: LoopSettings, config: dict) -> tuple[GPModel, LapLog]:
    """Baseline lap, residual data and the fitted exact GP."""
    log = run_lap("baseline", settings, config["experiment"]["data_seed"])
    if log.n_steps == 0:
        raise RuntimeError("data lap produced no samples")
    gpc = config["gp"]
    data = collect_training_data(log, settings.nominal, gpc["n_data"])
    hypers = default_hyperparameters(data)
    if gpc["fit_hyperparameters"]:
        hypers = fit_hyperparameters(data, hypers, gpc["hyper_budget"])
    return GPModel(data, hypers), log


def _run_one(args):
    variant, settings, seed, gp, record_plan = args
    return run_lap(variant, settings, seed, gp, record_plan)


def aggregate(rows: list[dict]) -> dict:
    """Per-variant metric means over the runs that stayed on track."""
    out: dict[str, dict] = {}
    for variant in dict.fromkeys(r["variant"] for r in rows):
        mine = [r for r in rows if r["variant"] == variant]
        good = [r for r in mine if not r["outlier"]]
        summary = {"runs": len(mine), "outliers": len(mine) - len(good),
                   "incomplete": sum(1 for r in good if r["metrics"]["partial"])}
        for key in ("lap_time", "mean_sq_slack", "mean_error_norm", "mean_solve_time", "p999_solve_time",
                    "mean_refresh_time"):
            vals = [r["metrics"][key] for r in good if r["metrics"][key] is not None]
            summary[key] = float(np.mean(vals)) if vals else None
        out[variant] = summary
    return out


def run_experiment(config: dict, jobs: int = 1, record_plan: bool = False, gp: GPModel | None = None) -> dict:
    """Data lap, GP fit and every variant over every seed.

    Runs that leave the track are excluded from the averages and counted as
    outliers.

    Returns:
        ``{"hash", "rows", "aggregate", "logs", "gp", "data_log"}``; ``rows``
        has one entry per (variant, seed).
    """
    settings = settings_from_config(config)
    variants = config["experiment"]["variants"]
    seeds = config["experiment"]["seeds"]
    data_log = None
    if gp is None and any(v.startswith("gp") for v in variants):
        gp, data_log = learn_residual_model(settings, config)
    tasks = [(v, settings, seed, gp, record_plan) for v in variants for seed in seeds]
    if jobs > 1 and len(tasks) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            logs = list(pool.map(_run_one, tasks))
    else:
        logs = [_run_one(t) for t in tasks]
    rows = []
    for log in logs:
        metrics = compute_metrics(log)
        rows.append({"variant": log.variant, "seed": log.seed, "outlier": log.diverged,
                     "completed": log.completed, "metrics": metrics})
    return {"hash": config.get("hash", ""), "rows": rows, "aggregate": aggregate(rows), "logs": logs,
            "gp": gp, "data_log": data_log}
