"""Command line front end: plan, compare, serve."""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from .model import discretize
from .scenarios import CANNED, canned, perturb_timings, with_time_tags
from .serialize import (Scenario, ScenarioError, load_scenario,
                        write_jerk_csv, write_report_json,
                        write_trajectory_csv)
from .solver import (MODES, SolveInputError, keyframe_passage_times,
                     schedule_timing_overlay, solve, solve_timed_baseline)
from .tracking import design_lqr, jerk_series, metrics, simulate

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_NOT_CONVERGED = 2


def _parse_set(entries) -> dict:
    overrides = {}
    for entry in entries or ():
        key, sep, value = entry.partition("=")
        if not sep or not key:
            raise ScenarioError(f"--set expects key=value, got {entry!r}")
        try:
            overrides[key] = float(value)
        except ValueError:
            raise ScenarioError(f"--set {key}: {value!r} is not a number") from None
    return overrides


def _load(args) -> Scenario:
    name = args.scenario
    if Path(name).exists():
        scenario = load_scenario(name)
    elif name in CANNED:
        sc = canned(name)
        scenario = Scenario(id=sc.name, keyframes=sc.keyframes, mode=sc.mode,
                            overrides=dict(sc.weight_overrides))
    else:
        raise ScenarioError(
            f"{name!r} is neither a scenario file nor one of {sorted(CANNED)}")
    overrides = dict(scenario.overrides)
    overrides.update(_parse_set(args.set))
    if args.t_len is not None:
        overrides["t_len"] = args.t_len
    return scenario.with_fields(
        mode=args.mode or scenario.mode,
        preset=args.weights_preset or scenario.preset,
        overrides=overrides)


def _solve_with_report(scenario: Scenario, sigma: float, seed: int):
    traj = solve(scenario.to_request())
    gains = design_lqr(discretize(scenario.params, traj.dt))
    sim = simulate(traj, gains, params=scenario.params, sigma=sigma, seed=seed)
    return traj, sim.report


def _write_artifacts(out_dir: Path, stem: str, traj, report) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [out_dir / f"{stem}_trajectory.csv",
             out_dir / f"{stem}_metrics.json",
             out_dir / f"{stem}_jerk.csv",
             out_dir / f"{stem}_solver.log"]
    write_trajectory_csv(traj, paths[0])
    doc = report.to_dict()
    doc.update(T=traj.T, converged=traj.converged,
               status=traj.diagnostics.status,
               objective=traj.diagnostics.objective)
    write_report_json(doc, paths[1])
    write_jerk_csv(jerk_series(traj), paths[2])
    paths[3].write_text("\n".join(traj.diagnostics.log_lines) + "\n")
    return paths


def _compare_rows(scenario: Scenario, strength: float, sigma: float, seed: int,
                  baseline: str = "keyframes"):
    """Auto solve plus a quasi-hard baseline on perturbed timings.

    `baseline` picks what the perturbation warps: "keyframes" re-tags the
    keyframes with warped passage times and leaves the interior schedule
    free, the way tools with hard keyframe times behave; "schedule" pins
    the whole warped schedule, the way an edited progress curve does.
    """
    auto_sc = scenario.with_fields(mode="auto")
    auto, auto_report = _solve_with_report(auto_sc, sigma, seed)
    try:
        if baseline == "schedule":
            overlay = schedule_timing_overlay(
                auto, perturb_timings(auto.times, strength))
            base_req = replace(scenario.to_request(), timing=overlay)
        else:
            tags = perturb_timings(keyframe_passage_times(auto), strength)
            base_req = replace(scenario.to_request(),
                               keyframes=with_time_tags(scenario.keyframes, tags),
                               timing=None)
        base = solve_timed_baseline(base_req)
        base_report = metrics(base, scenario.params)
        base_row = ("quasi-hard", base_report.mean_sq_jerk,
                    base_report.mean_sq_ang_jerk, base.T,
                    base.diagnostics.status)
    except (SolveInputError, ValueError) as exc:
        base, base_row = None, ("quasi-hard", None, None, None, f"infeasible: {exc}")
    auto_row = ("auto", auto_report.mean_sq_jerk, auto_report.mean_sq_ang_jerk,
                auto.T, auto.diagnostics.status)
    return auto, auto_report, base, [auto_row, base_row]


def _print_table(rows) -> None:
    header = ("mode", "mean_sq_jerk", "mean_sq_ang_jerk", "T", "status")
    fmt = "{:<12} {:>16} {:>18} {:>8} {:<14}"
    print(fmt.format(*header))
    for mode, jerk, ang, T, status in rows:
        num = lambda x, p: "-" if x is None else f"{x:.{p}g}"
        print(fmt.format(mode, num(jerk, 6), num(ang, 6), num(T, 5), status))


def _cmd_plan(args) -> int:
    scenario = _load(args)
    traj, report = _solve_with_report(scenario, args.sim_sigma, args.seed)
    paths = _write_artifacts(Path(args.out_dir), scenario.id, traj, report)
    for p in paths:
        print(p)
    print(f"status {traj.diagnostics.status}, T {traj.T:.3f} s, "
          f"objective {traj.diagnostics.objective:.6g}")
    if args.compare:
        *_, rows = _compare_rows(scenario, args.perturb, args.sim_sigma,
                                 args.seed, args.baseline)
        _print_table(rows)
    return EXIT_OK if traj.converged else EXIT_NOT_CONVERGED


def _cmd_compare(args) -> int:
    scenario = _load(args)
    auto, auto_report, base, rows = _compare_rows(
        scenario, args.perturb, args.sim_sigma, args.seed, args.baseline)
    out_dir = Path(args.out_dir)
    _write_artifacts(out_dir, f"{scenario.id}_auto", auto, auto_report)
    if base is not None:
        _write_artifacts(out_dir, f"{scenario.id}_quasi_hard", base,
                         metrics(base, scenario.params))
    _print_table(rows)
    return EXIT_OK if auto.converged else EXIT_NOT_CONVERGED


def _cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(args.store_dir), host=args.host, port=args.port)
    return EXIT_OK


def _add_common(p) -> None:
    p.add_argument("scenario", help="scenario JSON file or canned name")
    p.add_argument("--mode", choices=MODES, default=None)
    p.add_argument("--weights-preset", default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="weight override, e.g. --set w_j=20")
    p.add_argument("--t-len", type=float, default=None,
                   help="target duration for fixed-length mode, seconds")
    p.add_argument("--out-dir", default="out")
    p.add_argument("--perturb", type=float, default=1.0,
                   help="timing-warp strength for the quasi-hard baseline")
    p.add_argument("--baseline", choices=("keyframes", "schedule"),
                   default="keyframes",
                   help="pin warped times at the keyframes only, or pin the "
                        "whole warped schedule")
    p.add_argument("--sim-sigma", type=float, default=0.0,
                   help="tracking-sim disturbance, m/s^2")
    p.add_argument("--seed", type=int, default=0, help="tracking-sim seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cinetraj",
        description="Plan smooth quadrotor camera trajectories from keyframes.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_plan = sub.add_parser("plan", help="solve one scenario and export artifacts")
    _add_common(p_plan)
    p_plan.add_argument("--compare", action="store_true",
                        help="also run the quasi-hard timing baseline")
    p_plan.set_defaults(func=_cmd_plan)

    p_cmp = sub.add_parser("compare",
                           help="auto vs quasi-hard baseline metrics table")
    _add_common(p_cmp)
    p_cmp.set_defaults(func=_cmd_compare)

    p_srv = sub.add_parser("serve", help="run the HTTP planning service")
    p_srv.add_argument("--store-dir", default="scenarios")
    p_srv.add_argument("--host", default="127.0.0.1")
    p_srv.add_argument("--port", type=int, default=8321)
    p_srv.set_defaults(func=_cmd_serve)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ScenarioError, SolveInputError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
