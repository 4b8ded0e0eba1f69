"""Scenario files, run records, and plot-ready exports.

Scenario files are JSON (nested key/value with arrays) so they stay
auditable and diffable; all floats are emitted at full round-trip
precision, making load -> save -> load a fixed point.  A run record
captures everything needed to reproduce and re-verify a run: the
canonical scenario, its digest, the seed, the full schedule (every
segment's matrices), the verification errors, and optionally sampled
trajectories.
"""

from __future__ import annotations

import datetime
import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .dynamics import AttentionMode, ParamSchedule, Segment, TransformerParams, integrate
from .measures import EmpiricalMeasure, wasserstein2
from .pipeline import (
    MatchReport,
    ScenarioSpec,
    match_general_empirical,
    match_point_targets,
    match_restricted,
)

THREADS_ENV_VAR = "SPHEREFLOW_THREADS"
NORM_REPAIR_TOL = 1e-6


class ScenarioError(ValueError):
    """Scenario file failed to parse or violated an invariant."""


def default_threads(flag: Optional[int] = None) -> int:
    """Worker count: CLI flag wins, then the environment, then all cores."""
    if flag is not None and flag > 0:
        return flag
    env = os.environ.get(THREADS_ENV_VAR)
    if env:
        try:
            value = int(env)
            if value > 0:
                return value
        except ValueError:
            pass
    return os.cpu_count() or 1


def _measure_to_dict(m: EmpiricalMeasure) -> dict:
    return {
        "points": [[float(v) for v in row] for row in m.points],
        "weights": [float(w) for w in m.weights],
    }


def _measure_from_dict(obj: dict, what: str) -> EmpiricalMeasure:
    try:
        points = np.asarray(obj["points"], dtype=float)
    except (KeyError, TypeError, ValueError) as err:
        raise ScenarioError(f"{what}: invalid or missing 'points' ({err})")
    if points.ndim != 2:
        raise ScenarioError(f"{what}: 'points' must be a list of coordinate rows")
    norms = np.linalg.norm(points, axis=1)
    if np.any(np.abs(norms - 1.0) > NORM_REPAIR_TOL):
        worst = float(np.max(np.abs(norms - 1.0)))
        raise ScenarioError(
            f"{what}: atom norm off the sphere by {worst:.3g} (> {NORM_REPAIR_TOL}); refusing to renormalize"
        )
    # Repair only atoms that need it, so loading is bit-stable on files we
    # wrote ourselves.
    repair = np.abs(norms - 1.0) > 1e-12
    if np.any(repair):
        points = points.copy()
        points[repair] = points[repair] / norms[repair, None]
    weights = obj.get("weights")
    if weights is not None:
        weights = np.asarray(weights, dtype=float)
        if weights.shape != (points.shape[0],):
            raise ScenarioError(f"{what}: one weight per atom required")
        total = float(np.sum(weights))
        if abs(total - 1.0) > 1e-9:
            raise ScenarioError(f"{what}: weights sum to {total!r}, not 1")
        if abs(total - 1.0) > 1e-12:  # repair hand-written rounding only
            weights = weights / total
    try:
        return EmpiricalMeasure(points, weights)
    except ValueError as err:
        raise ScenarioError(f"{what}: {err}")


def scenario_to_dict(spec: ScenarioSpec) -> dict:
    return {
        "dimension": spec.dimension,
        "mode": spec.mode,
        "eps": float(spec.eps),
        "horizon": float(spec.horizon),
        "inputs": [_measure_to_dict(m) for m in spec.inputs],
        "targets": [_measure_to_dict(m) for m in spec.targets],
    }


def scenario_from_dict(obj: dict) -> ScenarioSpec:
    for key in ("dimension", "mode", "eps", "horizon", "inputs", "targets"):
        if key not in obj:
            raise ScenarioError(f"scenario missing field {key!r}")
    inputs = [_measure_from_dict(m, f"input measure {k}") for k, m in enumerate(obj["inputs"])]
    targets = [_measure_from_dict(m, f"target measure {k}") for k, m in enumerate(obj["targets"])]
    try:
        return ScenarioSpec(
            dimension=int(obj["dimension"]),
            inputs=inputs,
            targets=targets,
            eps=float(obj["eps"]),
            horizon=float(obj["horizon"]),
            mode=str(obj["mode"]),
        )
    except ValueError as err:
        raise ScenarioError(str(err))


def canonical_json(obj: dict) -> str:
    return json.dumps(obj, sort_keys=True, indent=1)


def scenario_digest(spec: ScenarioSpec) -> str:
    return hashlib.sha256(canonical_json(scenario_to_dict(spec)).encode()).hexdigest()


def load_scenario(path: str) -> ScenarioSpec:
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except OSError as err:
        raise ScenarioError(f"cannot read {path}: {err}")
    except json.JSONDecodeError as err:
        raise ScenarioError(f"{path}:{err.lineno}:{err.colno}: {err.msg}")
    return scenario_from_dict(obj)


def save_scenario(spec: ScenarioSpec, path: str):
    with open(path, "w") as fh:
        fh.write(canonical_json(scenario_to_dict(spec)))
        fh.write("\n")


def schedule_to_dict(schedule: ParamSchedule) -> dict:
    return {
        "horizon": float(schedule.horizon),
        "segments": [
            {
                "t_start": float(s.t_start),
                "t_end": float(s.t_end),
                "V": s.params.V.tolist(),
                "B": s.params.B.tolist(),
                "W": s.params.W.tolist(),
                "U": s.params.U.tolist(),
                "b": s.params.b.tolist(),
            }
            for s in schedule.segments
        ],
    }


def schedule_from_dict(obj: dict) -> ParamSchedule:
    segs = tuple(
        Segment(
            float(s["t_start"]),
            float(s["t_end"]),
            TransformerParams(
                np.asarray(s["V"], dtype=float),
                np.asarray(s["B"], dtype=float),
                np.asarray(s["W"], dtype=float),
                np.asarray(s["U"], dtype=float),
                np.asarray(s["b"], dtype=float),
            ),
        )
        for s in obj["segments"]
    )
    return ParamSchedule(segs, float(obj["horizon"]))


@dataclass
class RunRecord:
    """Everything needed to reproduce, re-verify, and export one run."""

    scenario: dict
    digest: str
    seed: int
    mode: str
    version: str
    created: str
    w2_errors: list[float]
    switch_count: int
    param_norm: float
    stage_summaries: list[dict]
    notes: list[str]
    schedule: ParamSchedule
    stride: int = 0
    times: Optional[np.ndarray] = None
    trajectories: Optional[list[np.ndarray]] = None

    @property
    def max_error(self) -> float:
        return max(self.w2_errors) if self.w2_errors else 0.0


def parallel_w2(finals: Sequence[EmpiricalMeasure], targets: Sequence[EmpiricalMeasure],
                threads: int) -> list[float]:
    """Per-measure exact W2, computed in a pool but reduced in index order."""
    if threads <= 1 or len(finals) <= 1:
        return [wasserstein2(a, b) for a, b in zip(finals, targets)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(wasserstein2, a, b) for a, b in zip(finals, targets)]
        return [f.result() for f in futures]


def run_scenario(spec: ScenarioSpec, seed: int = 0, stride: int = 0,
                 step: Optional[float] = None, threads: Optional[int] = None) -> RunRecord:
    """Dispatch to the pipeline for the scenario's mode and build a record."""
    matcher = {
        "points": match_point_targets,
        "restricted": match_restricted,
        "general": match_general_empirical,
    }[spec.mode]
    report: MatchReport = matcher(spec, seed=seed)

    n_threads = default_threads(threads)
    times = trajectories = None
    w2 = report.w2_errors
    if stride > 0 and report.schedule.segments:
        res = integrate(spec.inputs, report.schedule, AttentionMode.MEAN,
                        step=step, record_stride=stride)
        times = res.times
        trajectories = res.trajectory
        w2 = parallel_w2(res.final, spec.targets, n_threads)
    elif step is not None and report.schedule.segments:
        res = integrate(spec.inputs, report.schedule, AttentionMode.MEAN, step=step)
        w2 = parallel_w2(res.final, spec.targets, n_threads)

    return RunRecord(
        scenario=scenario_to_dict(spec),
        digest=scenario_digest(spec),
        seed=seed,
        mode=spec.mode,
        version=__version__,
        created=datetime.datetime.now(datetime.timezone.utc).isoformat(),
        w2_errors=[float(v) for v in w2],
        switch_count=report.switch_count,
        param_norm=float(report.param_norm),
        stage_summaries=[
            {"name": s.name, "switch_count": s.switch_count,
             "param_norm": float(s.param_norm), "seconds": float(s.seconds)}
            for s in report.stages
        ],
        notes=list(report.notes),
        schedule=report.schedule,
        stride=stride,
        times=times,
        trajectories=trajectories,
    )


def record_to_dict(record: RunRecord) -> dict:
    obj = {
        "scenario": record.scenario,
        "digest": record.digest,
        "seed": record.seed,
        "mode": record.mode,
        "version": record.version,
        "created": record.created,
        "w2_errors": record.w2_errors,
        "switch_count": record.switch_count,
        "param_norm": record.param_norm,
        "stage_summaries": record.stage_summaries,
        "notes": record.notes,
        "schedule": schedule_to_dict(record.schedule),
        "stride": record.stride,
    }
    if record.times is not None:
        obj["times"] = [float(t) for t in record.times]
        obj["trajectories"] = [traj.tolist() for traj in record.trajectories]
    return obj


def record_from_dict(obj: dict) -> RunRecord:
    times = obj.get("times")
    trajectories = obj.get("trajectories")
    return RunRecord(
        scenario=obj["scenario"],
        digest=obj["digest"],
        seed=int(obj["seed"]),
        mode=obj["mode"],
        version=obj.get("version", "unknown"),
        created=obj.get("created", ""),
        w2_errors=[float(v) for v in obj["w2_errors"]],
        switch_count=int(obj["switch_count"]),
        param_norm=float(obj["param_norm"]),
        stage_summaries=obj.get("stage_summaries", []),
        notes=obj.get("notes", []),
        schedule=schedule_from_dict(obj["schedule"]),
        stride=int(obj.get("stride", 0)),
        times=np.asarray(times) if times is not None else None,
        trajectories=[np.asarray(t) for t in trajectories] if trajectories is not None else None,
    )


def save_record(record: RunRecord, path: str):
    with open(path, "w") as fh:
        fh.write(canonical_json(record_to_dict(record)))
        fh.write("\n")


def load_record(path: str) -> RunRecord:
    with open(path) as fh:
        return record_from_dict(json.load(fh))


def verify_record(record: RunRecord, threads: Optional[int] = None,
                  step: Optional[float] = None) -> list[float]:
    """Re-integrate the record's schedule on its scenario and recompute W2."""
    spec = scenario_from_dict(record.scenario)
    if record.schedule.segments:
        finals = integrate(spec.inputs, record.schedule, AttentionMode.MEAN, step=step).final
    else:
        finals = list(spec.inputs)
    return parallel_w2(finals, spec.targets, default_threads(threads))


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def export_trajectories(record: RunRecord, out_dir: str, fmt: str = "csv") -> list[str]:
    """Write the sampled trajectories and the schedule segments as
    line-delimited files; one row per (time, measure, particle)."""
    if fmt != "csv":
        raise ValueError(f"unsupported export format {fmt!r}")
    if record.times is None or record.trajectories is None:
        raise ValueError("record carries no trajectory data (run with a positive stride)")
    os.makedirs(out_dir, exist_ok=True)
    d = record.trajectories[0].shape[2] if record.trajectories else 0

    traj_path = os.path.join(out_dir, "trajectories.csv")
    with open(traj_path, "w") as fh:
        fh.write("t,measure_index,particle_index," + ",".join(f"x{k}" for k in range(d)) + "\n")
        for m_idx, frames in enumerate(record.trajectories):
            for t, frame in zip(record.times, frames):
                for p_idx, row in enumerate(frame):
                    fh.write(f"{_fmt(t)},{m_idx},{p_idx},"
                             + ",".join(_fmt(v) for v in row) + "\n")

    seg_path = os.path.join(out_dir, "segments.csv")
    with open(seg_path, "w") as fh:
        blocks = [f"{name}{i}{j}" for name in ("V", "B", "W", "U")
                  for i in range(d) for j in range(d)] + [f"b{i}" for i in range(d)]
        fh.write("t_start,t_end," + ",".join(blocks) + "\n")
        for seg in record.schedule.segments:
            flat = np.concatenate([seg.params.V.ravel(), seg.params.B.ravel(),
                                   seg.params.W.ravel(), seg.params.U.ravel(),
                                   seg.params.b])
            fh.write(f"{_fmt(seg.t_start)},{_fmt(seg.t_end)},"
                     + ",".join(_fmt(v) for v in flat) + "\n")
    return [traj_path, seg_path]
