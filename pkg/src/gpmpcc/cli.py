"""Command-line entry point: ``gpmpcc race | replay | validate``.

Exit codes: 0 success, 1 runtime failure (or replay mismatch), 2 config error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

from .config import CONFIG_DIR_ENV, ConfigError, load_experiment_config
from .simloop import TIMING_METRICS, LapLog, compute_metrics, deterministic_metrics, run_experiment
from .track import load_track

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG = 0, 1, 2

TRAJECTORY_COLUMNS = ("k", "theta", "X", "Y", "Xc", "Yc", "r", "r_tight",
                      "left_X", "left_Y", "right_X", "right_Y")

logger = logging.getLogger("gpmpcc")


def parse_seeds(text: str) -> list[int]:
    """``"1..5"`` (inclusive range), ``"0,3,7"`` or a mix such as ``"0,2..4"``."""
    seeds: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if ".." in part:
            lo, hi = (int(v) for v in part.split("..", 1))
            if hi < lo:
                raise ValueError(f"empty seed range '{part}'")
            seeds.extend(range(lo, hi + 1))
        else:
            seeds.append(int(part))
    if not seeds:
        raise ValueError("no seeds given")
    return seeds


def _overrides(args) -> list[str]:
    items = list(args.set or [])
    if getattr(args, "seeds", None):
        try:
            seeds = parse_seeds(args.seeds)
        except ValueError as err:
            raise ConfigError([f"--seeds: {err}"]) from err
        items.append(f"experiment.seeds={json.dumps(seeds)}")
    if getattr(args, "variants", None):
        names = [v.strip() for v in args.variants.split(",") if v.strip()]
        items.append(f"experiment.variants={json.dumps(names)}")
    if getattr(args, "output_dir", None):
        items.append(f"experiment.output_dir={json.dumps(str(args.output_dir))}")
    return items


def _load(args) -> dict:
    return load_experiment_config(args.config, _overrides(args))


# -- artifacts --------------------------------------------------------------

def run_stem(variant: str, seed: int) -> str:
    return f"{variant}_seed{seed}"


def write_trajectory(log: LapLog, track, path: Path) -> None:
    """Plot-ready trace: realized position, centerline and the tightened bounds.

    ``r_tight`` is the tightened radius the controller imposed on the next
    state at step ``k``; the final row (no solve) repeats the nominal radius.
    """
    r = track.half_width
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash={log.config_hash} seed={log.seed} variant={log.variant}\n")
        writer = csv.writer(fh)
        writer.writerow(TRAJECTORY_COLUMNS)
        for k in range(log.states.shape[0]):
            theta = float(log.theta[k])
            pose = track.eval_centerline(theta)
            r_tight = float(log.plan_xy[k]["radii"][1]) if k < len(log.plan_xy) else r
            nx, ny = -math.sin(pose.Phic), math.cos(pose.Phic)
            row = [k, theta, float(log.states[k, 0]), float(log.states[k, 1]), pose.Xc, pose.Yc, r, r_tight,
                   pose.Xc + r_tight * nx, pose.Yc + r_tight * ny, pose.Xc - r_tight * nx, pose.Yc - r_tight * ny]
            writer.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def write_race_artifacts(config: dict, result: dict) -> dict[str, Path]:
    """Report, per-run logs and trajectories, all below ``experiment.output_dir``.

    Wall-clock timings go to ``report.timing.json`` so that every other
    artifact is reproducible bit for bit.
    """
    out = Path(config["experiment"]["output_dir"])
    runs = out / "runs"
    runs.mkdir(parents=True, exist_ok=True)
    track = load_track(config["experiment"]["track_path"])
    header = {"config_hash": config["hash"], "seeds": config["experiment"]["seeds"],
              "variants": config["experiment"]["variants"], "config": {k: v for k, v in config.items() if k != "hash"}}
    header["config"]["experiment"] = {k: v for k, v in config["experiment"].items()
                                      if k not in ("track_path", "vehicle_path", "output_dir")}
    rows, timing_rows = [], []
    for row, log in zip(result["rows"], result["logs"]):
        stem = runs / run_stem(log.variant, log.seed)
        log.write(stem)
        write_trajectory(log, track, stem.with_suffix(".trajectory.csv"))
        rows.append({**row, "metrics": deterministic_metrics(row["metrics"]), "log": str(stem.relative_to(out))})
        timing_rows.append({"variant": row["variant"], "seed": row["seed"],
                            **{k: row["metrics"][k] for k in TIMING_METRICS}})
    if result.get("data_log") is not None:
        result["data_log"].write(runs / "data_lap")
    aggregate = {v: {k: x for k, x in s.items() if k not in TIMING_METRICS} for v, s in result["aggregate"].items()}
    timing_agg = {v: {k: s[k] for k in TIMING_METRICS} for v, s in result["aggregate"].items()}
    report = out / "report.json"
    report.write_text(json.dumps({**header, "rows": rows, "aggregate": aggregate}, indent=2, sort_keys=True) + "\n")
    timing = out / "report.timing.json"
    timing.write_text(json.dumps({"config_hash": config["hash"], "rows": timing_rows, "aggregate": timing_agg},
                                 indent=2, sort_keys=True) + "\n")
    return {"report": report, "timing": timing, "runs": runs}


# -- replay -----------------------------------------------------------------

def _log_stem(path: str | Path) -> Path:
    p = Path(path)
    for suffix in (".timing.csv", ".trajectory.csv", ".csv", ".json"):
        if p.name.endswith(suffix):
            return p.with_name(p.name[: -len(suffix)])
    return p


def compare_metrics(stored: dict, recomputed: dict, tol: float = 1e-12) -> list[str]:
    """Names of the deterministic metrics that differ by more than ``tol``."""
    diverging = []
    for key in sorted(set(stored) | set(recomputed)):
        a, b = stored.get(key), recomputed.get(key)
        if isinstance(a, bool) or isinstance(b, bool) or a is None or b is None:
            same = a == b
        elif isinstance(a, (int, float)) and isinstance(b, (int, float)):
            same = (math.isnan(a) and math.isnan(b)) or abs(a - b) <= tol * max(1.0, abs(a))
        else:
            same = a == b
        if not same:
            diverging.append(key)
    return diverging


# -- commands ---------------------------------------------------------------

def cmd_race(args) -> int:
    config = _load(args)
    result = run_experiment(config, jobs=args.jobs, record_plan=True)
    paths = write_race_artifacts(config, result)
    for variant, s in result["aggregate"].items():
        lap = "n/a" if s["lap_time"] is None else f"{s['lap_time']:.3f} s"
        print(f"{variant:10s} runs={s['runs']} outliers={s['outliers']} lap={lap} "
              f"slack2={s['mean_sq_slack']:.3g} |e|={s['mean_error_norm']:.3g}")
    print(f"report: {paths['report']}")
    return EXIT_OK


def cmd_replay(args) -> int:
    stem = _log_stem(args.log)
    try:
        log = LapLog.read(stem)
        stored = json.loads(stem.with_suffix(".json").read_text())["metrics"]
    except (OSError, ValueError, KeyError, IndexError) as err:
        print(f"error: cannot read log {stem}: {err}", file=sys.stderr)
        return EXIT_FAILURE
    recomputed = deterministic_metrics(compute_metrics(log))
    diverging = compare_metrics(stored, recomputed)
    if diverging:
        for key in diverging:
            print(f"mismatch {key}: stored={stored.get(key)!r} recomputed={recomputed.get(key)!r}",
                  file=sys.stderr)
        return EXIT_FAILURE
    print(json.dumps(recomputed, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_validate(args) -> int:
    config = _load(args)
    print(f"valid (hash {config['hash']})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gpmpcc",
        description="Learning-based contouring control for miniature race cars.",
        epilog=f"Default config directory: ${CONFIG_DIR_ENV} or the packaged data directory.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log solver warnings")
    sub = parser.add_subparsers(dest="command", required=True)

    def config_args(p):
        p.add_argument("config", nargs="?", default=None, help="experiment TOML (default: experiment_default.toml)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key, e.g. mpcc.q_c=2")

    race = sub.add_parser("race", help="run an experiment and write report, logs and trajectories")
    config_args(race)
    race.add_argument("--seeds", help="seed list, e.g. 1..5 or 0,3,7")
    race.add_argument("--variants", help="comma-separated controller variants")
    race.add_argument("--jobs", type=int, default=1, help="parallel runs (default 1)")
    race.add_argument("--output-dir", type=Path, help="override experiment.output_dir")
    race.set_defaults(func=cmd_race)

    replay = sub.add_parser("replay", help="recompute a lap log's metrics and compare with its summary")
    replay.add_argument("log", help="log stem or any of its .csv/.json files")
    replay.set_defaults(func=cmd_replay)

    check = sub.add_parser("validate", help="validate a config without running it")
    config_args(check)
    check.set_defaults(func=cmd_validate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(message)s")
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as err:
        for line in err.errors:
            print(f"config error: {line}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as err:  # noqa: BLE001 - report any runtime failure as exit 1
        logger.debug("failure", exc_info=True)
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
