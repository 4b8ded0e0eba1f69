"""Mass-transport constructions: orthant staging, cap-to-cap transfer,
chained transfers, and compression of clouds onto prescribed atoms.

All schedules here are perceptron-only (V = 0), so they are identity
wherever their gates vanish and can be inverted by schedule reversal.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from ..dynamics import AttentionMode, ParamSchedule, TransformerParams
from ..geometry import (
    SphericalCap,
    geodesic_distance,
    geodesic_point,
    orthonormal_complement_basis,
    unit,
)
from ..measures import EmpiricalMeasure
from .base import (
    GateSpec,
    SynthesisError,
    SynthesisReport,
    calibrate_duration,
    constant_drift_params,
    gate_on_cap,
    intersection_deep_point,
    min_distance_to_points,
    run_unit_stage,
    tanh_travel_time,
)


def synth_orthant_transport(
    measures: Sequence[EmpiricalMeasure],
    hole: np.ndarray,
    T: float,
) -> SynthesisReport:
    """Two-segment drift moving every cloud into the open positive orthant.

    First segment pushes all mass toward -hole into a small cap; the second
    drifts everything toward a positive-orthant target whose antipode lies
    outside that cap.  One switch total.
    """
    hole = unit(hole)
    d = hole.shape[0]
    all_points = [m.points for m in measures]
    hole_gap = min_distance_to_points(hole, all_points)
    if hole_gap <= 1e-9:
        raise SynthesisError("hole coincides with an atom of some input measure")

    gather_cap = np.pi / 8.0
    # Phase 1: constant drift toward -hole.
    c_min = min(float(np.min(pts @ (-hole))) for pts in all_points)
    t1_init = tanh_travel_time(max(c_min, -np.cos(hole_gap / 2.0)), np.cos(gather_cap * 0.9), 1.0)
    params1 = constant_drift_params(-hole)

    def gathered(finals: list[EmpiricalMeasure]) -> bool:
        return all(float(np.min(m.points @ (-hole))) > np.cos(gather_cap) for m in finals)

    t1, staged = calibrate_duration(measures, params1, gathered, t1_init,
                                    mode=AttentionMode.MEAN, what="orthant transport phase 1")

    # Phase 2: pick a positive-orthant target alpha with -alpha outside the cap.
    candidates = [unit(np.ones(d))]
    for k in range(d):
        bump = np.ones(d)
        bump[k] = 2.0
        candidates.append(unit(bump))
        bump = np.ones(d)
        bump[k] = 0.5
        candidates.append(unit(bump))
    alpha = max(candidates, key=lambda a: geodesic_distance(hole, a))
    if geodesic_distance(hole, alpha) <= gather_cap + 0.05:
        raise SynthesisError("no positive-orthant target clear of the staging cap")

    # Land within a cap around alpha that sits strictly inside the orthant.
    r_target = 0.8 * float(np.arcsin(np.min(alpha)))
    c0 = np.cos(min(np.pi - 1e-6, geodesic_distance(alpha, -hole) + gather_cap))
    t2_init = tanh_travel_time(c0, np.cos(r_target * 0.9), 1.0)
    params2 = constant_drift_params(alpha)

    def inside_orthant(finals: list[EmpiricalMeasure]) -> bool:
        return all(
            np.all(m.points > 0.0) and float(np.min(m.points @ alpha)) > np.cos(r_target)
            for m in finals
        )

    t2, _ = calibrate_duration(staged, params2, inside_orthant, t2_init,
                               mode=AttentionMode.MEAN, what="orthant transport phase 2")

    schedule = ParamSchedule.from_params([(t1, params1), (t2, params2)]).rescaled(T)
    return SynthesisReport.from_schedule(schedule, notes=[
        f"hole gap {hole_gap:.4f}",
        f"staging cap radius {gather_cap:.4f} around -hole",
        f"orthant target {np.array2string(alpha, precision=4)} cap radius {r_target:.4f}",
        f"unit durations {t1:.3g} + {t2:.3g}",
    ])


def _cap_transfer_duration(
    b0: SphericalCap,
    omega: np.ndarray,
    shell_depth: float,
    arrive_radius: float,
) -> float:
    """Conservative time for mass at depth >= shell_depth in b0 to reach
    B(omega, arrive_radius): the gate along a geodesic into the interior
    point omega is bounded below by its endpoint values.
    """
    depth_omega = b0.radius - geodesic_distance(b0.center, omega)
    if depth_omega <= 0.0:
        raise SynthesisError("drift target must lie strictly inside the source cap")
    g_min = min(
        np.cos(b0.radius - shell_depth) - np.cos(b0.radius),
        np.cos(b0.radius - depth_omega) - np.cos(b0.radius),
    )
    if g_min <= 0.0:
        raise SynthesisError("cap shell too thin to bound the gate")
    c_start = np.cos(min(np.pi - 1e-6, (b0.radius - shell_depth)
                         + geodesic_distance(b0.center, omega)))
    return tanh_travel_time(float(c_start), float(np.cos(arrive_radius)), float(g_min))


def synth_two_balls(
    b0: SphericalCap,
    b1: SphericalCap,
    omega: np.ndarray,
    eps: float,
    T: float,
) -> SynthesisReport:
    """Single-segment transfer: gate on inside b0, drift toward omega.

    Points outside b0 never move.  Mass at depth >= eps*radius/4 inside b0
    reaches the arrival cap around omega within the schedule, which covers
    at least a (1 - eps) fraction of reasonably spread mass in b0.
    """
    omega = unit(omega)
    if not b0.intersects(b1):
        raise SynthesisError("caps do not intersect")
    depth0 = b0.radius - geodesic_distance(b0.center, omega)
    if depth0 <= 0.0:
        raise SynthesisError("omega must lie strictly inside the source cap")
    depth1 = b1.radius - geodesic_distance(b1.center, omega)

    if depth1 > 0.0:
        arrive = 0.9 * min(depth0, depth1)
        variant = "transfer into the cap intersection"
    else:
        arrive = 0.5 * depth0
        variant = "concentration inside the source cap"
    shell = max(1e-6, eps * b0.radius / 4.0)
    duration = _cap_transfer_duration(b0, omega, shell, arrive)
    schedule = ParamSchedule.from_params([(duration, gate_on_cap(b0, omega).params())]).rescaled(T)
    return SynthesisReport.from_schedule(schedule, notes=[
        variant,
        f"boundary shell depth {shell:.4g} (mass fraction budget eps={eps})",
        f"arrival radius {arrive:.4g} around omega",
        f"unit duration {duration:.4g}",
    ])


def _validate_chain(balls: Sequence[SphericalCap]):
    for k in range(len(balls) - 1):
        if not balls[k].intersects(balls[k + 1]):
            raise SynthesisError(f"chain balls {k} and {k + 1} do not intersect")
    for i in range(len(balls)):
        for j in range(i + 2, len(balls)):
            dist = geodesic_distance(balls[i].center, balls[j].center)
            if dist < balls[i].radius + balls[j].radius:
                raise SynthesisError(f"chain balls {i} and {j} must be disjoint")


def synth_tubular_chain(
    balls: Sequence[SphericalCap],
    omega_final: np.ndarray,
    eps: float,
    T: float,
) -> SynthesisReport:
    """Chain of cap-to-cap transfers along overlapping balls.

    Stage k moves the current content of ball k-1 into ball k; the schedule
    is identity off the union of the balls.  Each stage keeps a (1 - eps)
    mass fraction, giving the (1 - eps)^K lower bound on the delivered mass.
    """
    balls = list(balls)
    if len(balls) < 2:
        raise SynthesisError("a chain needs at least two balls")
    _validate_chain(balls)
    omega_final = unit(omega_final)
    if geodesic_distance(omega_final, balls[-1].center) >= balls[-1].radius:
        raise SynthesisError("final drift point must lie inside the last ball")

    K = len(balls) - 1
    pieces = []
    notes = [f"{K} transfer stages"]
    for k in range(1, K + 1):
        prev_ball, next_ball = balls[k - 1], balls[k]
        deep = intersection_deep_point(prev_ball, next_ball)
        joint_depth = min(
            prev_ball.radius - geodesic_distance(prev_ball.center, deep),
            next_ball.radius - geodesic_distance(next_ball.center, deep),
        )
        use_final = (
            k == K
            and geodesic_distance(omega_final, prev_ball.center) < prev_ball.radius
            and geodesic_distance(omega_final, next_ball.center) < next_ball.radius
        )
        omega_k = omega_final if use_final else deep
        arrive = 0.5 * min(
            prev_ball.radius - geodesic_distance(prev_ball.center, omega_k),
            next_ball.radius - geodesic_distance(next_ball.center, omega_k),
        )
        shell = max(1e-6, min(eps * prev_ball.radius / 4.0, joint_depth / 4.0))
        duration = _cap_transfer_duration(prev_ball, omega_k, shell, arrive)
        pieces.append((duration, gate_on_cap(prev_ball, omega_k).params()))
        notes.append(f"stage {k}: drift {'omega_final' if use_final else 'deep point'}, "
                     f"shell {shell:.3g}, arrive {arrive:.3g}, unit duration {duration:.3g}")
    schedule = ParamSchedule.from_params(pieces).rescaled(T)
    return SynthesisReport.from_schedule(schedule, notes=notes)


# ---------------------------------------------------------------------------
# Compression: sweep-capture a cloud into M parked clusters, then deliver
# them to prescribed anchors through cap chains.
# ---------------------------------------------------------------------------


class _SweepFrame:
    """Great circle through the cloud's barycenter along its principal axis."""

    def __init__(self, points: np.ndarray, axis_hint: Optional[np.ndarray] = None):
        self.center = unit(np.mean(points, axis=0))
        tangent = points - np.outer(points @ self.center, self.center)
        if axis_hint is not None:
            u = axis_hint - np.dot(axis_hint, self.center) * self.center
            self.axis = unit(u)
        elif np.linalg.norm(tangent) < 1e-12:
            self.axis = orthonormal_complement_basis(self.center)[0]
        else:
            _, _, vt = np.linalg.svd(tangent, full_matrices=False)
            self.axis = unit(vt[0] - np.dot(vt[0], self.center) * self.center)
        self.normal = None
        for b in orthonormal_complement_basis(self.center):
            residual = b - np.dot(b, self.axis) * self.axis
            if np.linalg.norm(residual) > 1e-9:
                self.normal = unit(residual)
                break

    def at(self, s: float, offset: float = 0.0) -> np.ndarray:
        on_circle = np.cos(s) * self.center + np.sin(s) * self.axis
        if offset == 0.0 or self.normal is None:
            return on_circle
        return unit(np.cos(offset) * on_circle + np.sin(offset) * self.normal)

    def orient_away(self, obstacles: list[np.ndarray], back_reach: float) -> "_SweepFrame":
        """Flip the axis if the parking side (negative s) would face the
        obstacles; parked clusters trail behind the sweep."""
        if not obstacles:
            return self
        here = min_distance_to_points(self.at(-back_reach), obstacles)
        flipped = min_distance_to_points(self.at(back_reach), obstacles)
        if flipped > here:
            out = _SweepFrame.__new__(_SweepFrame)
            out.center = self.center
            out.axis = -self.axis
            out.normal = self.normal
            return out
        return self

    def coords(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Axis angle p and transverse distance tau of each point."""
        a = points @ self.center
        b = points @ self.axis
        p = np.arctan2(b, a)
        tau = np.arccos(np.clip(np.hypot(a, b), -1.0, 1.0))
        return p, tau


def _best_prefix(weights_sorted: np.ndarray, target: float) -> int:
    """Length (>= 1) of the prefix whose weight best matches target."""
    cum = np.cumsum(weights_sorted)
    cut = int(np.searchsorted(cum, target))
    if cut >= len(cum):
        cut = len(cum) - 1
    elif cut > 0 and abs(cum[cut - 1] - target) <= abs(cum[cut] - target):
        cut -= 1
    return cut + 1


def _run_sweep(
    measure: EmpiricalMeasure,
    frame: "_SweepFrame",
    p: np.ndarray,
    tau: np.ndarray,
    masses: np.ndarray,
    r0: float,
    eta: float,
    slack: float,
    rho_park: float,
    obstacles: list[np.ndarray],
):
    """Greedy monotone sweep: at each stage, park the next mass group.

    Stage k uses a ball of radius r0 - k*eta whose center advances along
    the frame axis; the radius shrinkage keeps every parked cluster out of
    all later balls regardless of how dense the capture cuts are.
    """
    M = len(masses)
    n = measure.n
    rho_park = min(rho_park, eta / 4.0)  # parked clusters must clear later balls
    pieces: list[tuple[float, TransformerParams]] = []
    current = measure
    parked: list[np.ndarray] = []
    achieved: list[float] = []
    groups: list[np.ndarray] = []
    unparked = np.ones(n, dtype=bool)
    prev_s = -np.inf

    for k in range(M):
        r_k = r0 - k * eta
        delta = np.arccos(np.clip(np.cos(r_k) / np.cos(tau), -1.0, 1.0))
        entry = p - delta
        idx = np.nonzero(unparked)[0]
        idx = idx[np.argsort(entry[idx], kind="stable")]
        if k + 1 < M:
            take = _best_prefix(measure.weights[idx], float(masses[k]))
            take = min(take, len(idx) - (M - 1 - k))  # leave atoms for later groups
            take = max(take, 1)
        else:
            take = len(idx)
        group = idx[:take]
        rest = idx[take:]
        s_lo = float(np.max(entry[group]))
        s_hi = float(np.min(entry[rest])) if rest.size else s_lo + slack
        if s_hi - s_lo <= 1e-9:
            raise SynthesisError("capture cut is degenerate; atoms share an entry position")
        s_k = max(min(s_lo + 0.5 * (s_hi - s_lo), s_lo + 0.5 * slack), prev_s + 1e-6)
        if s_k >= s_hi:
            raise SynthesisError("sweep centers cannot advance monotonically")
        # No captured atom may already be past the ball's leading edge.
        if np.any(s_k >= p[group] + delta[group]):
            raise SynthesisError("an atom would be swept past before capture")
        prev_s = s_k

        ball = SphericalCap(frame.at(s_k), r_k)
        if obstacles and min_distance_to_points(ball.center, obstacles) <= r_k + 0.05:
            raise SynthesisError("sweep ball would reach another measure's atoms")
        # Alternating transverse offsets keep the parked clusters off any
        # single great circle (downstream slab constructions need that)
        # while staying inside this ball and clear of all later ones.
        off = (1 if k % 2 == 0 else -1) * min(0.1, np.sqrt(0.5 * r_k * eta))
        z_k = frame.at(s_k - r_k + eta / 2.0, offset=off)
        if geodesic_distance(z_k, ball.center) >= r_k - eta / 4.0:
            z_k = frame.at(s_k - r_k + eta / 2.0)
        if obstacles and min_distance_to_points(z_k, obstacles) <= 0.05:
            raise SynthesisError("parking point too close to another measure")

        member = ball.contains_points(current.points)
        expected = np.zeros(n, dtype=bool)
        expected[group] = True
        if not np.array_equal(member, expected):
            raise SynthesisError("sweep ball membership does not match the intended group")

        g_params = gate_on_cap(ball, z_k).params()
        gate_at_z = np.cos(r_k - eta / 2.0) - np.cos(r_k)
        t_init = max(5.0, 2.0 / max(gate_at_z, 1e-4))

        def parked_ok(finals: list[EmpiricalMeasure], group=group, z_k=z_k) -> bool:
            pts = finals[0].points[group]
            return bool(np.max(np.arccos(np.clip(pts @ z_k, -1, 1))) <= rho_park)

        t_k, final = calibrate_duration([current], g_params, parked_ok, t_init,
                                        mode=AttentionMode.MEAN,
                                        what=f"compression capture stage {k}")
        pieces.append((t_k, g_params))
        current = final[0]
        unparked[group] = False
        parked.append(z_k)
        groups.append(group)
        achieved.append(float(np.sum(measure.weights[group])))

    return pieces, np.asarray(parked), np.asarray(achieved), current, groups, rho_park


def _compress_measure(
    measure: EmpiricalMeasure,
    anchors: Optional[np.ndarray],
    masses: np.ndarray,
    eps: float,
    obstacles: list[np.ndarray],
    rng: np.random.Generator,
    notes: list[str],
) -> tuple[list[tuple[float, TransformerParams]], np.ndarray, np.ndarray, EmpiricalMeasure]:
    """Capture the cloud into len(masses) parked clusters and (if anchors are
    given) deliver them to the anchors.

    Returns (schedule pieces, final cluster positions, achieved masses,
    measure after the pieces run).
    """
    M = len(masses)
    n = measure.n
    if M > n:
        raise SynthesisError("more target atoms than source atoms")
    rho_park = max(min(eps / 3.0, 0.02), 1e-4)

    last_error = "sweep capture failed"
    for attempt in range(8):
        hint = rng.standard_normal(measure.d) if attempt > 0 else None
        frame = _SweepFrame(measure.points, axis_hint=hint)
        p, tau = frame.coords(measure.points)
        span = float(np.max(p) - np.min(p))
        tau_max = float(np.max(tau))
        slack = max(0.05, 0.2 * span)
        eta = max(0.02, min(0.08, slack / max(M, 1)))
        r0 = tau_max + span + slack + M * eta
        if r0 > 1.5:  # sweep balls must stay inside a hemisphere
            raise SynthesisError("cloud too spread for a sweep capture; cluster it first")
        frame = frame.orient_away(obstacles, 2.0 * r0)
        p, tau = frame.coords(measure.points)
        try:
            result = _run_sweep(measure, frame, p, tau, masses, r0, eta, slack,
                                rho_park, obstacles)
            break
        except SynthesisError as err:
            last_error = str(err)
    else:
        raise SynthesisError(f"sweep capture failed after 8 axis attempts: {last_error}")

    pieces, parked, achieved, current, groups, rho_park = result
    notes.append(f"sweep radius {r0:.3f}, shrink {eta:.3f}, park radius {rho_park:.2g}")

    if anchors is None:
        return pieces, parked, achieved, current

    # Delivery: walk each parked cluster to its anchor through a cap chain.
    # Anchors are matched to sweep groups in axis order, so group masses land
    # on the intended anchors.
    anchor_p, _ = frame.coords(anchors)
    anchor_order = np.argsort(anchor_p, kind="stable")
    # groups were captured in ascending axis order; masses were provided in
    # anchor order already matched by the caller.
    for k in reversed(range(M)):
        target = anchors[anchor_order[k]]
        start = parked[k]
        others = [anchors[anchor_order[j]] for j in range(M) if j != k]
        others += [parked[j] for j in range(M) if j != k]
        obstacle_pts = ([np.asarray(others)] if others else []) + obstacles
        hop_pieces, hop_count = _deliver_cluster(start, target, rho_park, obstacle_pts)
        for piece in hop_pieces:
            pieces.append(piece)
            current = run_unit_stage([current], piece[1], piece[0], AttentionMode.MEAN)[0]
        parked[k] = target
        notes.append(f"delivered group {k} to anchor {anchor_order[k]} in {hop_count} hops")

    order = np.argsort(anchor_p, kind="stable")
    final_positions = anchors[order]
    return pieces, final_positions, achieved, current


def _polyline_clearance(waypoints: list[np.ndarray], obstacles: list[np.ndarray]) -> float:
    clearance = np.inf
    for a, b in zip(waypoints, waypoints[1:]):
        for s in np.linspace(0.0, 1.0, 17):
            clearance = min(clearance, min_distance_to_points(geodesic_point(a, b, s), obstacles))
    return float(clearance)


def _chain_along(a: np.ndarray, b: np.ndarray, rho_d: float, rho_cluster: float
                 ) -> list[tuple[float, TransformerParams]]:
    """Hops of a cap chain moving a rho_cluster-cluster from a to b."""
    total = geodesic_distance(a, b)
    if total <= 1e-12:
        return []
    hop = 0.5 * rho_d
    n_hops = int(np.ceil(total / hop))
    pieces = []
    pos = 0.0
    for _ in range(n_hops):
        here = geodesic_point(a, b, pos / total)
        next_pos = min(pos + hop, total)
        nxt = geodesic_point(a, b, next_pos / total)
        cap = SphericalCap(here, rho_d)
        gate_at_target = np.cos(geodesic_distance(here, nxt)) - np.cos(rho_d)
        g_min = min(np.cos(rho_cluster) - np.cos(rho_d), gate_at_target)
        if g_min <= 0.0:
            raise SynthesisError("delivery hop geometry degenerate")
        c_start = np.cos(geodesic_distance(here, nxt) + rho_cluster)
        duration = tanh_travel_time(float(c_start), float(np.cos(rho_cluster * 0.9)),
                                    float(g_min))
        pieces.append((duration, gate_on_cap(cap, nxt).params()))
        pos = next_pos
    return pieces


def _deliver_cluster(
    start: np.ndarray,
    target: np.ndarray,
    rho_cluster: float,
    obstacles: list[np.ndarray],
) -> tuple[list[tuple[float, TransformerParams]], int]:
    """Cap-chain moving a parked cluster from start to target.

    Chain caps follow the geodesic (or a detour through an offset
    waypoint when the direct path is blocked); their radius is limited by
    the clearance to every obstacle point, with one cluster radius of
    slack since obstacles are themselves cluster centers.
    """
    total = geodesic_distance(start, target)
    if total <= rho_cluster:
        return [], 0

    routes: list[list[np.ndarray]] = [[start, target]]
    mid = geodesic_point(start, target, 0.5)
    tangent = target - np.dot(start, target) * start
    if np.linalg.norm(tangent) > 1e-9:
        tangent = unit(tangent)
        for b in orthonormal_complement_basis(mid):
            n = b - np.dot(b, tangent) * tangent
            if np.linalg.norm(n) > 1e-6:
                n = unit(n)
                for h in (0.08, -0.08, 0.16, -0.16, 0.25, -0.25):
                    routes.append([start, unit(np.cos(h) * mid + np.sin(h) * n), target])
                break

    floor = max(3.0 * rho_cluster, 0.015)
    for waypoints in routes:
        clearance = _polyline_clearance(waypoints, obstacles)
        rho_d = min(0.25, 0.8 * (clearance - 2.0 * rho_cluster))
        if rho_d < floor:
            continue
        pieces = []
        for a, b in zip(waypoints, waypoints[1:]):
            pieces.extend(_chain_along(a, b, rho_d, rho_cluster))
        return pieces, len(pieces)
    raise SynthesisError("delivery path blocked: no clearance for a cap chain")


def synth_compression(
    measures: Sequence[EmpiricalMeasure],
    targets_per_measure: Sequence[Sequence[tuple[np.ndarray, float]]],
    eps: float,
    T: float,
    seed: int = 0,
) -> SynthesisReport:
    """Compress every cloud onto its prescribed atoms (anchor, mass) lists.

    Per measure: a monotone sweep of shrinking capture balls parks
    contiguous mass groups behind the cloud, then cap chains deliver the
    parked clusters to their anchors.  Measures are processed one at a
    time; every gate is local, so the other clouds never move.
    """
    rng = np.random.default_rng(seed)
    notes = [f"seed {seed}"]
    all_pieces: list[tuple[float, TransformerParams]] = []
    states = list(measures)

    for i, targets in enumerate(targets_per_measure):
        anchors = np.asarray([unit(np.asarray(a, dtype=float)) for a, _ in targets])
        masses = np.asarray([m for _, m in targets], dtype=float)
        if abs(float(np.sum(masses)) - 1.0) > 1e-9:
            raise SynthesisError(f"measure {i}: target masses sum to {float(np.sum(masses))!r}, not 1")

        mu = states[i]
        # Trivial case: already atomic at the anchors with matching masses.
        if mu.n == len(anchors):
            dists = np.arccos(np.clip(mu.points @ anchors.T, -1, 1))
            from scipy.optimize import linear_sum_assignment

            rows, cols = linear_sum_assignment(dists)
            if (np.max(dists[rows, cols]) < 1e-9
                    and np.max(np.abs(mu.weights[rows] - masses[cols])) < 1e-9):
                notes.append(f"measure {i}: already atomic at the anchors; no segments")
                continue

        obstacles = [states[j].points for j in range(len(states)) if j != i]
        sep = min((min_distance_to_points(a, [mu.points]) for a in anchors), default=np.inf)
        if obstacles:
            other_gap = min(
                min_distance_to_points(a, obstacles) for a in anchors
            )
            if other_gap <= sep:
                raise SynthesisError(
                    f"measure {i}: an anchor is closer to another measure than to its own atoms"
                )

        # Masses must be presented in sweep-axis order of their anchors so
        # captured groups land on the right anchors.
        frame = _SweepFrame(mu.points)
        anchor_p, _ = frame.coords(anchors)
        order = np.argsort(anchor_p, kind="stable")
        pieces, finals, achieved, new_state = _compress_measure(
            mu, anchors, masses[order], eps, obstacles, rng, notes
        )
        quant = float(np.max(np.abs(achieved - masses[order])))
        notes.append(f"measure {i}: mass quantization error {quant:.3g}")
        all_pieces.extend(pieces)
        states[i] = new_state

    if not all_pieces:
        return SynthesisReport.from_schedule(ParamSchedule.empty(), notes=notes)
    schedule = ParamSchedule.from_params(all_pieces).rescaled(T)
    return SynthesisReport.from_schedule(schedule, notes=notes)
