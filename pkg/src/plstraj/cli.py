"""Batch command-line front end.

Subcommands: ``simulate`` (scenario generation), ``estimate`` (one method
over one scenario), ``bench`` (per-step timing of the windowed estimator vs
the full-horizon smoother), ``navigate`` (obstacle-avoidance planning demo).
All outputs are CSV/JSON; every command is deterministic given its config
and seed (timing fields excluded).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import adate, baselines, nav, sim, solver

SCHEMA_VERSION = 1
EXIT_USAGE = 2
EXIT_NUMERICAL = 3

METHODS = ("adate-pls", "ekf-ca", "ukf-ca", "ukf-pls", "ekf-pls", "map-ct")

DEFAULT_Q_JERK = 1e-3


class UsageError(Exception):
    pass


def _write_json(path: Path, payload: dict):
    payload = {"schema": SCHEMA_VERSION, **payload}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _load_scenario(path: Path) -> sim.Scenario:
    try:
        return sim.scenario_from_json(path.read_text())
    except FileNotFoundError:
        raise UsageError(f"{path}: scenario file not found")
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        raise UsageError(f"{path}: malformed scenario config: {exc}")


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(args) -> int:
    scn = _load_scenario(Path(args.config))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    truth, observations = sim.generate(scn)
    sim.write_truth_csv(out / "truth.csv", truth)
    sim.write_observations_csv(out / "observations.csv", observations)
    (out / "scenario.json").write_text(sim.scenario_to_json(scn) + "\n")
    rep = sim.evaluate(truth, truth, observations)
    _write_json(
        out / "simulate.json",
        {
            "route": scn.route,
            "length": scn.length,
            "sensors": scn.sensors,
            "seed": scn.seed,
            "observation_count": int(sum(len(o) for o in observations)),
            "observation_rmse": rep.rmse_obs,
        },
    )
    return 0


# ---------------------------------------------------------------------------
# estimate


def _mean_obs(step_obs):
    zs = [z for z, _ in step_obs]
    return (np.mean(zs, axis=0), len(zs)) if zs else (None, 0)


def _run_filter_method(method: str, scn: sim.Scenario, observations):
    """Run one of the recursive filters; returns (positions, times, diverged)."""
    params = sim.nominal_params()
    r = scn.noise_sigma**2 * np.eye(3)
    s = cov = None
    track, times = [], []
    diverged = False
    for step_obs in observations:
        t0 = time.perf_counter()
        z, count = _mean_obs(step_obs)
        rr = r / max(count, 1)
        flags: list = []
        if s is None:
            if z is None:
                times.append(0.0)
                track.append(None)
                continue
            if method in ("ekf-ca", "ukf-ca"):
                s, cov = baselines.ca_initial(z, rr)
            else:
                s, cov = baselines.pls_initial(z, params, rr)
        elif method == "ekf-ca":
            s, cov = baselines.ekf_ca_step(s, cov, z, scn.tau, DEFAULT_Q_JERK, rr, flags)
        elif method == "ukf-ca":
            s, cov = baselines.ukf_ca_step(s, cov, z, scn.tau, DEFAULT_Q_JERK, rr, flags=flags)
        elif method == "ukf-pls":
            s, cov = baselines.ukf_pls_step(s, cov, z, params, scn.tau, rr, flags=flags)
        elif method == "ekf-pls":
            s, cov = baselines.ekf_pls_step(s, cov, z, params, scn.tau, rr, flags)
        if baselines.FLAG_DIVERGED in flags:
            diverged = True
        track.append(None if s is None else s[:3].copy())
        times.append(time.perf_counter() - t0)
    first = next((p for p in track if p is not None), np.zeros(3))
    positions = np.asarray([(p if p is not None else first) for p in track])
    return positions, times, diverged


def _run_adate(scn: sim.Scenario, observations):
    params = sim.nominal_params()
    cfg = adate.AdateConfig(tau=scn.tau)
    r = scn.noise_sigma**2 * np.eye(3)
    est = None
    times = []
    for step_obs in observations:
        t0 = time.perf_counter()
        triples = [(z, sid, r) for z, sid in step_obs]
        if est is None and not triples:
            times.append(0.0)
            continue
        est = adate.step(est, triples, params, cfg)
        times.append(time.perf_counter() - t0)
    positions = est.positions()
    if len(positions) < len(observations):
        pad = np.tile(positions[:1], (len(observations) - len(positions), 1))
        positions = np.vstack([pad, positions])
    return positions, times, False


def _run_map_ct(scn: sim.Scenario, observations):
    """Full-horizon smoother re-solved at every step (non-adaptive)."""
    r = scn.noise_sigma**2 * np.eye(3)
    cfg = baselines.MapCtConfig(tau=scn.tau)
    times = []
    est = None
    for k in range(len(observations)):
        t0 = time.perf_counter()
        est = baselines.map_ct(observations[: k + 1], r, cfg)
        times.append(time.perf_counter() - t0)
    return est[:, :3], times, False


def run_method(method: str, scn: sim.Scenario, observations):
    """Dispatch one estimation method over an observation stream.

    Returns (positions, per-step seconds, diverged flag).
    """
    if method == "adate-pls":
        return _run_adate(scn, observations)
    if method == "map-ct":
        return _run_map_ct(scn, observations)
    if method in ("ekf-ca", "ukf-ca", "ukf-pls", "ekf-pls"):
        return _run_filter_method(method, scn, observations)
    raise UsageError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")


def cmd_estimate(args) -> int:
    scn_dir = Path(args.scenario)
    scn = _load_scenario(scn_dir / "scenario.json" if scn_dir.is_dir() else scn_dir)
    if args.method not in METHODS:
        raise UsageError(f"unknown method {args.method!r}; choose from {', '.join(METHODS)}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    truth, observations = sim.generate(scn)
    positions, times, diverged = run_method(args.method, scn, observations)
    rep = sim.evaluate(truth, positions, observations)

    with open(out / "estimate.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "x", "y", "z"])
        for t, p in enumerate(positions):
            w.writerow([t, *(f"{v:.9g}" for v in p)])
    _write_json(
        out / "report.json",
        {
            "method": args.method,
            "route": scn.route,
            "seed": scn.seed,
            "rmse_obs": rep.rmse_obs,
            "rmse_est": rep.rmse_est,
            "normalized": rep.normalized,
            "diverged": bool(diverged),
            "per_step_seconds": times,
        },
    )
    return 0


# ---------------------------------------------------------------------------
# bench


def cmd_bench(args) -> int:
    scn_dir = Path(args.scenario)
    scn = _load_scenario(scn_dir / "scenario.json" if scn_dir.is_dir() else scn_dir)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _, observations = sim.generate(scn)

    rows = {}
    for method in ("adate-pls", "map-ct"):
        _, times, _ = run_method(method, scn, observations)
        rows[method] = times
        with open(out / f"bench_{method}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "ms"])
            for k, t in enumerate(times):
                w.writerow([k, f"{1e3 * t:.6g}"])

    slope = float(np.polyfit(np.arange(len(rows["map-ct"])), rows["map-ct"], 1)[0])
    _write_json(
        out / "bench.json",
        {
            "steps": len(observations),
            "map_ct_slope_ms_per_step": 1e3 * slope,
            "adate_mean_ms": 1e3 * float(np.mean(rows["adate-pls"])),
            "map_ct_mean_ms": 1e3 * float(np.mean(rows["map-ct"])),
        },
    )
    return 0


# ---------------------------------------------------------------------------
# navigate


def cmd_navigate(args) -> int:
    path = Path(args.scenario)
    try:
        nodes, obstacles = nav.nav_scene_from_json(path.read_text())
    except FileNotFoundError:
        raise UsageError(f"{path}: scene file not found")
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        raise UsageError(f"{path}: malformed scene: {exc}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    params = sim.nominal_params()
    result = nav.plan_window(None, nodes, obstacles, params)
    nav.write_plan_csv(out / "plan.csv", result)
    _write_json(
        out / "navigate.json",
        {
            "iterations": result.iterations,
            "infeasible": nav.FLAG_INFEASIBLE in result.flags,
            "unsafe_steps": sorted(
                int(f.split("[")[1].rstrip("]")) for f in result.flags if f.startswith("unsafe")
            ),
            "obstacles": len(obstacles),
            "nodes": len(nodes.nodes),
        },
    )
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="plstraj", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a scenario to CSV/JSON")
    p.add_argument("--config", required=True, help="scenario JSON config")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("estimate", help="run one estimation method")
    p.add_argument("--scenario", required=True, help="scenario JSON (or simulate output dir)")
    p.add_argument("--method", required=True, help=f"one of: {', '.join(METHODS)}")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("bench", help="per-step timing: adate-pls vs map-ct")
    p.add_argument("--scenario", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("navigate", help="plan through nodes around obstacles")
    p.add_argument("--scenario", required=True, help="nav scene JSON")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_navigate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (solver.SolverError, np.linalg.LinAlgError, FloatingPointError, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
