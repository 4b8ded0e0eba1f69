"""Command-line front end: validate, synthesize, run, verify, export.

Exit codes: 0 success, 1 validation failure, 2 synthesis failure,
3 verification failure (a W2 error above the scenario's eps).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .records import (
    ScenarioError,
    canonical_json,
    default_threads,
    export_trajectories,
    load_record,
    load_scenario,
    run_scenario,
    save_record,
    schedule_to_dict,
    scenario_digest,
    verify_record,
)
from .synthesis import SynthesisError

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_SYNTHESIS = 2
EXIT_VERIFICATION = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sphereflow",
        description="Steer ensembles of spherical particle clouds onto targets "
                    "with piecewise-constant schedules, and verify the match in W2.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, scenario=True):
        if scenario:
            p.add_argument("scenario", help="scenario JSON file")
        p.add_argument("--mode", choices=["points", "restricted", "general"],
                       help="override the scenario's mode")
        p.add_argument("--eps", type=float, help="override the scenario's tolerance")
        p.add_argument("--horizon", type=float, help="override the schedule horizon")
        p.add_argument("--seed", type=int, default=0, help="synthesis seed")
        p.add_argument("--step", type=float, default=None, help="integrator step override")
        p.add_argument("--stride", type=int, default=0,
                       help="record every N-th integrator step (0 = no trajectories)")
        p.add_argument("--threads", type=int, default=None,
                       help=f"worker threads (default: ${'{'}SPHEREFLOW_THREADS{'}'} or all cores)")

    common(sub.add_parser("validate", help="parse and validate a scenario file"))
    p = sub.add_parser("synthesize", help="construct the schedule and write it out")
    common(p)
    p.add_argument("-o", "--output", default="schedule.json", help="schedule output path")
    p = sub.add_parser("run", help="synthesize, integrate, verify, and persist a run record")
    common(p)
    p.add_argument("-o", "--output-dir", default=".", help="directory for the run record")
    p = sub.add_parser("verify", help="recompute W2 errors from a run record")
    p.add_argument("record", help="run record JSON file")
    p.add_argument("--step", type=float, default=None)
    p.add_argument("--threads", type=int, default=None)
    p = sub.add_parser("export", help="write trajectory and segment files from a record")
    p.add_argument("record", help="run record JSON file")
    p.add_argument("-o", "--output-dir", default=".", help="directory for exported files")
    p.add_argument("--format", dest="fmt", default="csv", choices=["csv"])
    return parser


def _load_with_overrides(args) -> "ScenarioSpec":
    from .pipeline import ScenarioSpec

    spec = load_scenario(args.scenario)
    overrides = {}
    if args.mode:
        overrides["mode"] = args.mode
    if args.eps is not None:
        overrides["eps"] = args.eps
    if args.horizon is not None:
        overrides["horizon"] = args.horizon
    if overrides:
        spec = ScenarioSpec(
            dimension=spec.dimension,
            inputs=spec.inputs,
            targets=spec.targets,
            eps=overrides.get("eps", spec.eps),
            horizon=overrides.get("horizon", spec.horizon),
            mode=overrides.get("mode", spec.mode),
        )
    return spec


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "validate":
            spec = _load_with_overrides(args)
            print(f"scenario ok: {spec.n_pairs} pair(s), d={spec.dimension}, "
                  f"mode={spec.mode}, digest {scenario_digest(spec)[:12]}")
            return EXIT_OK

        if args.command == "synthesize":
            spec = _load_with_overrides(args)
            record = run_scenario(spec, seed=args.seed, stride=0, step=None,
                                  threads=args.threads)
            with open(args.output, "w") as fh:
                fh.write(canonical_json(schedule_to_dict(record.schedule)))
                fh.write("\n")
            print(f"schedule: {len(record.schedule.segments)} segments, "
                  f"{record.switch_count} switches, sup-norm {record.param_norm:.4g} "
                  f"-> {args.output}")
            return EXIT_OK

        if args.command == "run":
            spec = _load_with_overrides(args)
            record = run_scenario(spec, seed=args.seed, stride=args.stride,
                                  step=args.step, threads=args.threads)
            os.makedirs(args.output_dir, exist_ok=True)
            record_path = os.path.join(args.output_dir, "record.json")
            save_record(record, record_path)
            paths = [record_path]
            if record.times is not None:
                paths += export_trajectories(record, args.output_dir)
            print(f"W2 errors: {['%.3g' % v for v in record.w2_errors]} "
                  f"(eps {spec.eps}); wrote {', '.join(paths)}")
            if record.max_error > spec.eps:
                return EXIT_VERIFICATION
            return EXIT_OK

        if args.command == "verify":
            record = load_record(args.record)
            errors = verify_record(record, threads=args.threads, step=args.step)
            eps = float(record.scenario["eps"])
            print(f"recomputed W2 errors: {['%.3g' % v for v in errors]} (eps {eps})")
            if max(errors) > eps:
                return EXIT_VERIFICATION
            return EXIT_OK

        if args.command == "export":
            record = load_record(args.record)
            paths = export_trajectories(record, args.output_dir, fmt=args.fmt)
            print("wrote " + ", ".join(paths))
            return EXIT_OK

    except ScenarioError as err:
        print(f"validation error: {err}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ValueError, json.JSONDecodeError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_VALIDATION
    except SynthesisError as err:
        print(f"synthesis error: {err}", file=sys.stderr)
        return EXIT_SYNTHESIS
    raise AssertionError("unreachable")


if __name__ == "__main__":
    sys.exit(main())
