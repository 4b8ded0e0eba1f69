"""Shared machinery for schedule synthesis: gate parameters, reports,
travel-time bounds, and calibration-by-doubling.

Conventions used by every construction here:
  - a "gate" realizes the field (<a, x> - tau)_+ P_x z through the
    perceptron blocks U = 1 a^T, b = -tau 1, W = z 1^T / d;
  - caps switch gates on strictly inside (a = center, tau = cos radius)
    or strictly outside (a = -center, tau = -cos radius);
  - constructions are assembled at unit parameter norm with explicit
    durations, then compressed onto the requested horizon, which scales
    V and W by total_unit_time / T.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from ..dynamics import AttentionMode, ParamSchedule, TransformerParams, integrate
from ..geometry import SphericalCap, unit
from ..measures import EmpiricalMeasure


class SynthesisError(RuntimeError):
    """A construction's preconditions failed or calibration gave up."""


@dataclass(frozen=True)
class GateSpec:
    """Perceptron gate: field (<a, x> - tau)_+ P_x z."""

    a: np.ndarray
    tau: float
    z: np.ndarray

    def params(self) -> TransformerParams:
        a = np.asarray(self.a, dtype=float)
        z = np.asarray(self.z, dtype=float)
        d = a.shape[0]
        U = np.outer(np.ones(d), a)
        b = -self.tau * np.ones(d)
        W = np.outer(z, np.ones(d)) / d
        zero = np.zeros((d, d))
        return TransformerParams(zero, zero.copy(), W, U, b)

    def value(self, x: np.ndarray) -> float:
        return max(0.0, float(np.dot(self.a, x)) - self.tau)


def gate_on_cap(cap: SphericalCap, z: np.ndarray) -> GateSpec:
    """Gate active strictly inside the cap, driving toward z."""
    return GateSpec(cap.center, float(np.cos(cap.radius)), np.asarray(z, dtype=float))


def gate_off_cap(cap: SphericalCap, z: np.ndarray) -> GateSpec:
    """Gate active strictly outside the cap, driving toward z."""
    return GateSpec(-cap.center, float(-np.cos(cap.radius)), np.asarray(z, dtype=float))


def constant_drift_params(z: np.ndarray) -> TransformerParams:
    """Ungated drift P_x z everywhere: relu(0 x + 1) = 1 and W 1 = z."""
    z = np.asarray(z, dtype=float)
    d = z.shape[0]
    zero = np.zeros((d, d))
    W = np.outer(z, np.ones(d)) / d
    return TransformerParams(zero, zero.copy(), W, zero.copy(), np.ones(d))


@dataclass
class SynthesisReport:
    """A synthesized schedule plus the bookkeeping acceptance wants to see."""

    schedule: ParamSchedule
    switch_count: int
    param_norm: float
    notes: list[str] = field(default_factory=list)

    @staticmethod
    def from_schedule(schedule: ParamSchedule, notes: Optional[list[str]] = None) -> "SynthesisReport":
        return SynthesisReport(
            schedule=schedule,
            switch_count=schedule.switch_count,
            param_norm=schedule.param_norm(),
            notes=list(notes or []),
        )


def artanh_clipped(c: float, ceiling: float = 1.0 - 1e-14) -> float:
    return float(np.arctanh(min(max(c, -ceiling), ceiling)))


def tanh_travel_time(c_start: float, c_target: float, gate_min: float, pad: float = 1.25) -> float:
    """Upper bound on the time for <x, w> to climb from c_start to c_target
    when d/dt <x, w> >= gate_min (1 - <x, w>^2).

    Exact for a constant gate; the pad absorbs gate variation.
    """
    if gate_min <= 0.0:
        raise SynthesisError(f"gate lower bound must be positive, got {gate_min}")
    if c_target <= c_start:
        return 0.0
    return pad * (artanh_clipped(c_target) - artanh_clipped(c_start)) / gate_min


def run_unit_stage(
    measures: Sequence[EmpiricalMeasure],
    params: TransformerParams,
    duration: float,
    mode: AttentionMode = AttentionMode.MEAN,
    step: Optional[float] = None,
    accuracy: float = 0.01,
) -> list[EmpiricalMeasure]:
    """Integrate one constant-parameter stage (used while building schedules).

    accuracy bounds step * field_bound; calibration probes pass a coarse
    value since only the final verification needs tight integration.
    """
    if duration <= 0.0:
        return list(measures)
    if step is None:
        step = min(duration / 8.0, accuracy / max(params.field_bound(), 1e-9))
    sched = ParamSchedule.from_params([(duration, params)])
    return integrate(measures, sched, mode, step=step).final


def calibrate_duration(
    measures: Sequence[EmpiricalMeasure],
    params: TransformerParams,
    predicate: Callable[[list[EmpiricalMeasure]], bool],
    t_init: float,
    mode: AttentionMode = AttentionMode.MEAN,
    step: Optional[float] = None,
    max_doublings: int = 8,
    what: str = "stage",
    tighten: bool = True,
    accuracy: float = 0.05,
) -> tuple[float, list[EmpiricalMeasure]]:
    """Duration whose endpoint satisfies the predicate, found by doubling
    from the analytic estimate t_init.

    Every construction that the source material closes with "for T large
    enough" goes through here.  The passing duration is
    bisected back toward the threshold (a generous estimate would
    otherwise overshoot exponentially contracting stages by orders of
    magnitude).
    """
    t = max(t_init, 1e-6)
    passing = None
    for _ in range(max_doublings + 1):
        final = run_unit_stage(measures, params, t, mode, step, accuracy)
        if predicate(final):
            passing = (t, final)
            break
        t *= 2.0
    if passing is None:
        raise SynthesisError(f"{what}: target not reached after {max_doublings} doublings "
                             f"(final duration {t / 2.0:.3g})")
    if not tighten:
        return passing
    t_hi, final_hi = passing
    t_lo = t_hi
    for _ in range(6):
        trial = t_lo / 2.0
        final = run_unit_stage(measures, params, trial, mode, step, accuracy)
        if not predicate(final):
            break
        t_lo, t_hi, final_hi = trial, trial, final
    else:
        return t_hi, final_hi
    lo = t_lo / 2.0
    for _ in range(4):
        mid = 0.5 * (lo + t_hi)
        final = run_unit_stage(measures, params, mid, mode, step, accuracy)
        if predicate(final):
            t_hi, final_hi = mid, final
        else:
            lo = mid
    return t_hi, final_hi


def intersection_deep_point(cap_a: SphericalCap, cap_b: SphericalCap) -> np.ndarray:
    """Point of maximal joint depth inside cap_a ∩ cap_b (on the center geodesic)."""
    from ..geometry import geodesic_distance, geodesic_point

    dist = geodesic_distance(cap_a.center, cap_b.center)
    if dist >= cap_a.radius + cap_b.radius:
        raise SynthesisError("caps do not intersect")
    if dist < 1e-12:
        return cap_a.center.copy()
    # Equal-depth point between the centers.
    s = (dist + cap_a.radius - cap_b.radius) / 2.0
    s = min(max(s, 0.0), dist)
    return geodesic_point(cap_a.center, cap_b.center, s / dist)


def min_distance_to_points(x: np.ndarray, clouds: Sequence[np.ndarray]) -> float:
    """Min geodesic distance from x to any atom of any of the clouds."""
    best = np.inf
    for pts in clouds:
        if pts.size == 0:
            continue
        g = np.clip(np.asarray(pts) @ unit(x), -1.0, 1.0)
        best = min(best, float(np.min(np.arccos(g))))
    return best
