"""Exact point relocation: move each source point to its target while every
other point is parked away and restored.

Per pair, the construction works inside the great circle through source
and target: a slab normal gamma orthogonal to both isolates the pair (all
other points sit at |<gamma, .>| >= margin), two gather gates park those
points near anchors off the slab, a lane gate (zero on the anchor cap)
drives the source along the circle to its target, and the gathers are run
backwards.  Six segments per moved pair.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from ..dynamics import AttentionMode, ParamSchedule, TransformerParams
from ..geometry import geodesic_distance, orthonormal_complement_basis, unit
from ..measures import EmpiricalMeasure
from .base import (
    GateSpec,
    SynthesisError,
    SynthesisReport,
    calibrate_duration,
    run_unit_stage,
    tanh_travel_time,
)

PARK_CAP = 3.0 * np.pi / 16.0
ANCHOR_OFFSET = np.pi / 8.0
EPS_CEILING = 0.35  # keeps the anchors inside their gather regions (sin(pi/8) ~ 0.383)


def _slab_normal(x: np.ndarray, y: np.ndarray, others: np.ndarray,
                 rng: np.random.Generator) -> tuple[np.ndarray, float]:
    """Unit gamma orthogonal to x and y maximizing min |<gamma, p>| over others."""
    d = x.shape[0]
    span = np.vstack([x, y])
    q, _ = np.linalg.qr(span.T, mode="complete")
    rank = np.linalg.matrix_rank(span, tol=1e-12)
    basis = q[:, rank:].T  # orthonormal basis of span{x, y}^perp
    if basis.shape[0] == 0:
        raise SynthesisError("source and target span the whole space; no slab normal exists")

    def margin(g: np.ndarray) -> float:
        if others.size == 0:
            return np.inf
        return float(np.min(np.abs(others @ g)))

    if basis.shape[0] == 1:
        g = unit(basis[0])
        return g, margin(g)
    candidates = [unit(b) for b in basis]
    for _ in range(256):
        coef = rng.standard_normal(basis.shape[0])
        candidates.append(unit(basis.T @ coef))
    best = max(candidates, key=margin)
    # Local refinement around the best candidate.
    for scale in (0.3, 0.1, 0.03):
        for _ in range(64):
            coef = rng.standard_normal(basis.shape[0])
            cand = unit(best + scale * (basis.T @ coef - np.dot(basis.T @ coef, best) * best))
            cand = unit(basis.T @ (basis @ cand))  # project back into the subspace
            if margin(cand) > margin(best):
                best = cand
    return best, margin(best)


def _pair_circle(x: np.ndarray, y: np.ndarray, gamma: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    """Orthonormal frame (u1, u2) of the great circle through x and y
    (orthogonal to gamma) plus the angle of y on it."""
    u1 = x
    residual = y - np.dot(x, y) * x
    if np.linalg.norm(residual) < 1e-12:
        # Antipodal pair: any circle through x orthogonal to gamma works.
        for b in orthonormal_complement_basis(x):
            cand = b - np.dot(b, gamma) * gamma
            if np.linalg.norm(cand) > 1e-9:
                u2 = unit(cand)
                break
        else:
            raise SynthesisError("could not build a lane circle for an antipodal pair")
    else:
        u2 = unit(residual)
    phi_y = float(np.arctan2(np.dot(y, u2), np.dot(y, u1))) % (2.0 * np.pi)
    return u1, u2, phi_y


def _choose_anchor(u1: np.ndarray, u2: np.ndarray, gamma: np.ndarray, phi_y: float,
                   others: np.ndarray) -> tuple[np.ndarray, float]:
    """Anchor omega on the lane circle, far from both endpoints, whose
    gather targets omega+- are clear of stuck (antipodal) points."""
    best = None
    for phi in np.linspace(0.0, 2.0 * np.pi, 721)[:-1]:
        omega = np.cos(phi) * u1 + np.sin(phi) * u2
        d_x = min(phi, 2.0 * np.pi - phi)
        d_y = abs(phi - phi_y)
        d_y = min(d_y, 2.0 * np.pi - d_y)
        score = min(d_x, d_y)
        if score < np.pi / 2.0 - 0.05:
            continue
        omega_plus = np.cos(ANCHOR_OFFSET) * omega + np.sin(ANCHOR_OFFSET) * gamma
        omega_minus = np.cos(ANCHOR_OFFSET) * omega - np.sin(ANCHOR_OFFSET) * gamma
        if others.size:
            stuck = min(
                float(np.min(np.linalg.norm(others + omega_plus, axis=1))),
                float(np.min(np.linalg.norm(others + omega_minus, axis=1))),
            )
            if stuck < 0.05:
                continue
        if best is None or score > best[1]:
            best = (omega, score, phi)
    if best is None:
        raise SynthesisError("no anchor position clear of endpoints and stuck points")
    return best[0], best[2]


def _lane_waypoints(u1: np.ndarray, u2: np.ndarray, phi_y: float, phi_omega: float):
    """Arc from the source (angle 0) to the target avoiding the anchor cap,
    sampled for clearance, with a mid waypoint keeping hops short."""
    # Two candidate arcs: ascending [0, phi_y], or descending through 2*pi.
    def arc_min_dist_to_omega(start, end, direction):
        angles = np.linspace(0.0, 1.0, 101)
        if direction > 0:
            phis = start + angles * ((end - start) % (2.0 * np.pi))
        else:
            phis = start - angles * ((start - end) % (2.0 * np.pi))
        diff = np.abs((phis - phi_omega + np.pi) % (2.0 * np.pi) - np.pi)
        return float(np.min(diff)), phis

    d_up, phis_up = arc_min_dist_to_omega(0.0, phi_y, +1)
    d_dn, phis_dn = arc_min_dist_to_omega(0.0, phi_y, -1)
    dist, phis = (d_up, phis_up) if d_up >= d_dn else (d_dn, phis_dn)
    if dist <= PARK_CAP + 0.02:
        raise SynthesisError("both lane arcs graze the anchor cap")
    waypoint_phi = phis[len(phis) // 2]
    z1 = np.cos(waypoint_phi) * u1 + np.sin(waypoint_phi) * u2
    gate_min = float(np.cos(PARK_CAP) - np.cos(dist))
    return z1, gate_min


def synth_point_match(
    pairs: Sequence[tuple[np.ndarray, np.ndarray]],
    T: float = 1.0,
    endpoint_tol: float = 1e-5,
    seed: int = 0,
    bystander_radius: float = 0.0,
) -> SynthesisReport:
    """Schedule moving every source point to its target (six segments per
    pair that actually moves), leaving all other points restored.

    bystander_radius widens every clearance so that small clusters riding
    along with the nominal points stay inside the guaranteed regions.
    """
    sources = np.asarray([unit(np.asarray(x, dtype=float)) for x, _ in pairs])
    targets = np.asarray([unit(np.asarray(y, dtype=float)) for _, y in pairs])
    M, d = sources.shape
    if d < 3:
        raise SynthesisError("point matching needs dimension >= 3 (points cannot pass on a circle)")
    for arr, what in ((sources, "source"), (targets, "target")):
        for i in range(M):
            for j in range(i + 1, M):
                if np.linalg.norm(arr[i] - arr[j]) < 1e-9:
                    raise SynthesisError(f"{what} points {i} and {j} coincide")

    # Slab margins depend on where the bystanders sit when a pair's turn
    # comes, so an unlucky processing order can starve a pair; retry with
    # shuffled orders before giving up.
    rng = np.random.default_rng(seed)
    orders = [np.arange(M)] + [rng.permutation(M) for _ in range(5)]
    last_error: Exception | None = None
    for order in orders:
        try:
            pieces, notes, margins = _construct_in_order(
                order, sources, targets, endpoint_tol, bystander_radius,
                np.random.default_rng(seed), M)
            break
        except SynthesisError as err:
            last_error = err
    else:
        raise SynthesisError(f"point matching failed for every pair order: {last_error}")
    notes.insert(0, f"seed {seed}, order {list(map(int, order))}")

    if margins:
        notes.append(f"min slab margin {min(margins):.4f}")
    if not pieces:
        return SynthesisReport.from_schedule(ParamSchedule.empty(), notes=notes)
    schedule = ParamSchedule.from_params(pieces).rescaled(T)
    return SynthesisReport.from_schedule(schedule, notes=notes)


def _construct_in_order(order, sources, targets, endpoint_tol, bystander_radius, rng, M):
    notes: list[str] = []
    pieces: list[tuple[float, TransformerParams]] = []
    current = sources.copy()
    margins = []

    # Calibrations integrate only the points a gate actually moves; gates
    # are exactly zero elsewhere, so the untouched rows carry over.
    def apply_subset(points: np.ndarray, idx: np.ndarray, params, duration) -> np.ndarray:
        out = points.copy()
        if idx.size and duration > 0.0:
            moved = run_unit_stage([EmpiricalMeasure(points[idx])], params, duration,
                                   AttentionMode.MEAN)[0]
            out[idx] = moved.points
        return out

    for i in order:
        x, y = current[i], targets[i]
        if geodesic_distance(x, y) <= endpoint_tol:
            notes.append(f"pair {i}: already at target")
            continue
        others = np.delete(current, i, axis=0)
        gamma, margin = _slab_normal(x, y, others, rng)
        if margin - bystander_radius < 1e-4:
            raise SynthesisError(
                f"pair {i}: slab margin {margin:.2e} too small; points crowd the lane circle"
            )
        eps_i = min(margin - bystander_radius, EPS_CEILING)
        margins.append(eps_i)

        u1, u2, phi_y = _pair_circle(x, y, gamma)
        omega, phi_omega = _choose_anchor(u1, u2, gamma, phi_y, others)
        omega_plus = np.cos(ANCHOR_OFFSET) * omega + np.sin(ANCHOR_OFFSET) * gamma
        omega_minus = np.cos(ANCHOR_OFFSET) * omega - np.sin(ANCHOR_OFFSET) * gamma
        park_limit = PARK_CAP - 0.01 - bystander_radius

        pair_pieces: list[tuple[float, TransformerParams]] = []
        gather_pieces: list[tuple[float, TransformerParams]] = []
        for sign, anchor in ((+1.0, omega_plus), (-1.0, omega_minus)):
            side = np.nonzero((sign * (current @ gamma)) >= eps_i)[0]
            side = side[side != i]
            if side.size == 0:
                continue
            gate = GateSpec(sign * gamma, eps_i / 2.0, anchor)
            c_min = float(np.min(current[side] @ anchor))
            if c_min < -1.0 + 1e-6:
                raise SynthesisError(f"pair {i}: a parked point is antipodal to its anchor")
            # The climb out of the slab accelerates itself; the time is
            # logarithmic in the slab width, not 1/eps.
            t_init = 8.0 + 3.0 * np.log(1.0 / eps_i) + tanh_travel_time(
                min(c_min + 0.5, 0.0), np.cos(np.pi / 16.0), 0.3)

            def parked(finals: list[EmpiricalMeasure], omega=omega) -> bool:
                pts = finals[0].points
                return float(np.max(np.arccos(np.clip(pts @ omega, -1, 1)))) < park_limit

            t_g, _ = calibrate_duration([EmpiricalMeasure(current[side])], gate.params(),
                                        parked, t_init, mode=AttentionMode.MEAN,
                                        what=f"pair {i} gather {'+' if sign > 0 else '-'}")
            gather_pieces.append((t_g, gate.params()))
            current = apply_subset(current, side, gate.params(), t_g)

        pair_pieces.extend(gather_pieces)
        mover = np.asarray([i])

        # Lane: drive the source along the circle, through a waypoint, to y.
        z1, lane_gate_min = _lane_waypoints(u1, u2, phi_y, phi_omega)
        lane_gate = GateSpec(-omega, -np.cos(PARK_CAP), z1)
        if geodesic_distance(current[i], z1) > 0.02:
            t_init = tanh_travel_time(float(current[i] @ z1), np.cos(0.02),
                                      max(lane_gate_min, 1e-3))

            def near_waypoint(finals: list[EmpiricalMeasure], z1=z1) -> bool:
                return geodesic_distance(finals[0].points[0], z1) < 0.02

            t_l1, _ = calibrate_duration([EmpiricalMeasure(current[mover])], lane_gate.params(),
                                         near_waypoint, t_init,
                                         mode=AttentionMode.MEAN, what=f"pair {i} lane 1")
            pair_pieces.append((t_l1, lane_gate.params()))
            current = apply_subset(current, mover, lane_gate.params(), t_l1)

        lane_gate2 = GateSpec(-omega, -np.cos(PARK_CAP), y)
        t_init = tanh_travel_time(float(current[i] @ y), np.cos(endpoint_tol / 3.0),
                                  max(lane_gate_min, 1e-3))

        def at_target(finals: list[EmpiricalMeasure]) -> bool:
            return geodesic_distance(finals[0].points[0], y) < endpoint_tol / 2.0

        t_l2, _ = calibrate_duration([EmpiricalMeasure(current[mover])], lane_gate2.params(),
                                     at_target, t_init, mode=AttentionMode.MEAN,
                                     what=f"pair {i} lane 2", tighten=False)
        pair_pieces.append((t_l2, lane_gate2.params()))
        current = apply_subset(current, mover, lane_gate2.params(), t_l2)

        # Release: run the gathers backwards (same durations, negated drifts).
        all_idx = np.arange(M)
        for t_g, params in gather_pieces[::-1]:
            pair_pieces.append((t_g, params.negated()))
            current = apply_subset(current, all_idx, params.negated(), t_g)

        pieces.extend(pair_pieces)
        notes.append(
            f"pair {i}: margin {margin:.4f}, eps {eps_i:.4f}, "
            f"{len(pair_pieces)} segments, endpoint error "
            f"{geodesic_distance(current[i], y):.2e}"
        )

    return pieces, notes, margins
