"""Particle dynamics on the sphere: attention + gated perceptron fields,
piecewise-constant parameter schedules, and RK4 flow maps.

The field at a point x of a cloud mu is

    P_x(V * A_B[mu](x) + W * relu(U x + b)),   P_x = I - x x^T,

where A_B is softmax attention over the cloud's own atoms.  MEAN mode
replaces attention by the cloud barycenter (valid only with B = 0);
FEEDBACK mode recomputes B and W from the current state at every RK4
stage.  Atom-indexed reductions are order-canonicalized so permuting
atoms permutes trajectories bit-exactly.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .measures import EmpiricalMeasure, stable_weighted_sum

DEFAULT_STEP_CAP = 1e-2
DEFAULT_STEP_FRACTION = 1e-3


class AttentionMode(enum.Enum):
    FULL = "full"
    MEAN = "mean"
    FEEDBACK = "feedback"


class Direction(enum.Enum):
    FORWARD = "forward"
    BACKWARD = "backward"


@dataclass(frozen=True)
class TransformerParams:
    """One constant parameter tuple (V, B, W, U, b), all blocks d x d and b in R^d."""

    V: np.ndarray
    B: np.ndarray
    W: np.ndarray
    U: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        arrs = {}
        d = None
        for name in ("V", "B", "W", "U"):
            m = np.asarray(getattr(self, name), dtype=float)
            if m.ndim != 2 or m.shape[0] != m.shape[1]:
                raise ValueError(f"{name} must be a square matrix, got shape {m.shape}")
            d = d or m.shape[0]
            if m.shape[0] != d:
                raise ValueError("parameter blocks have inconsistent dimensions")
            arrs[name] = m
        b = np.asarray(self.b, dtype=float)
        if b.shape != (d,):
            raise ValueError(f"b must have shape ({d},), got {b.shape}")
        for name, m in arrs.items():
            object.__setattr__(self, name, m)
        object.__setattr__(self, "b", b)

    @property
    def d(self) -> int:
        return self.b.shape[0]

    @staticmethod
    def zero(d: int) -> "TransformerParams":
        z = np.zeros((d, d))
        return TransformerParams(z, z.copy(), z.copy(), z.copy(), np.zeros(d))

    @staticmethod
    def attention_only(V: np.ndarray, B: np.ndarray | None = None) -> "TransformerParams":
        V = np.asarray(V, dtype=float)
        d = V.shape[0]
        B = np.zeros((d, d)) if B is None else np.asarray(B, dtype=float)
        return TransformerParams(V, B, np.zeros((d, d)), np.zeros((d, d)), np.zeros(d))

    @staticmethod
    def perceptron_only(W: np.ndarray, U: np.ndarray, b: np.ndarray) -> "TransformerParams":
        W = np.asarray(W, dtype=float)
        d = W.shape[0]
        z = np.zeros((d, d))
        return TransformerParams(z, z.copy(), W, U, b)

    def block_norm(self) -> float:
        """Max over blocks of the operator 2-norm (Euclidean norm for b)."""
        return max(
            float(np.linalg.norm(self.V, 2)),
            float(np.linalg.norm(self.B, 2)),
            float(np.linalg.norm(self.W, 2)),
            float(np.linalg.norm(self.U, 2)),
            float(np.linalg.norm(self.b)),
        )

    def field_bound(self) -> float:
        """Upper bound on the field magnitude over the sphere.

        Attention output has norm <= 1, so the V term contributes ||V||.
        For the rank-one gate pattern (identical U rows, constant b) the
        perceptron bound is exact; otherwise a generic operator bound is
        used.
        """
        att = float(np.linalg.norm(self.V, 2))
        if not self.W.any():
            return att
        rows_equal = np.all(np.abs(self.U - self.U[:1, :]) < 1e-15)
        b_const = np.all(np.abs(self.b - self.b[0]) < 1e-15)
        if rows_equal and b_const:
            gate_max = max(0.0, float(np.linalg.norm(self.U[0]) + self.b[0]))
            return att + gate_max * float(np.linalg.norm(self.W @ np.ones(self.d)))
        relu_max = float(np.linalg.norm(self.U, 2)) + float(np.linalg.norm(self.b))
        return att + float(np.linalg.norm(self.W, 2)) * relu_max

    def scaled_field(self, factor: float) -> "TransformerParams":
        """Scale the generated field by `factor` (acts on V and W only)."""
        return TransformerParams(self.V * factor, self.B, self.W * factor, self.U, self.b)

    def negated(self) -> "TransformerParams":
        return self.scaled_field(-1.0)


@dataclass(frozen=True)
class Segment:
    t_start: float
    t_end: float
    params: TransformerParams

    def __post_init__(self):
        if not self.t_start < self.t_end:
            raise ValueError(f"segment needs t_start < t_end, got [{self.t_start}, {self.t_end}]")

    @property
    def length(self) -> float:
        return self.t_end - self.t_start


@dataclass(frozen=True)
class ParamSchedule:
    """Piecewise-constant parameters tiling [0, horizon] exactly."""

    segments: tuple[Segment, ...]
    horizon: float

    def __post_init__(self):
        segs = tuple(self.segments)
        if segs:
            if abs(segs[0].t_start) > 1e-9 or abs(segs[-1].t_end - self.horizon) > 1e-9:
                raise ValueError("segments must tile [0, horizon]")
            for a, b in zip(segs, segs[1:]):
                if abs(a.t_end - b.t_start) > 1e-9:
                    raise ValueError(f"segments must be contiguous; gap at t={a.t_end}")
        elif self.horizon != 0.0:
            raise ValueError("empty schedule must have horizon 0")
        object.__setattr__(self, "segments", segs)

    @property
    def switch_count(self) -> int:
        return max(0, len(self.segments) - 1)

    @property
    def d(self) -> Optional[int]:
        return self.segments[0].params.d if self.segments else None

    def param_norm(self) -> float:
        return max((s.params.block_norm() for s in self.segments), default=0.0)

    def shortest_segment(self) -> float:
        return min((s.length for s in self.segments), default=0.0)

    @staticmethod
    def empty() -> "ParamSchedule":
        return ParamSchedule((), 0.0)

    @staticmethod
    def from_params(pieces: Sequence[tuple[float, TransformerParams]]) -> "ParamSchedule":
        """Build from (duration, params) pairs laid end to end from t = 0."""
        segs = []
        t = 0.0
        for duration, p in pieces:
            segs.append(Segment(t, t + duration, p))
            t += duration
        return ParamSchedule(tuple(segs), t)

    def concat(self, other: "ParamSchedule") -> "ParamSchedule":
        pieces = [(s.length, s.params) for s in self.segments]
        pieces += [(s.length, s.params) for s in other.segments]
        return ParamSchedule.from_params(pieces)

    def reversed(self) -> "ParamSchedule":
        """Schedule generating the inverse flow: segments in reverse order, fields negated."""
        pieces = [(s.length, s.params.negated()) for s in self.segments[::-1]]
        return ParamSchedule.from_params(pieces)

    def rescaled(self, new_horizon: float) -> "ParamSchedule":
        """Time-reparametrize onto [0, new_horizon]; V and W scale by the inverse factor."""
        if not self.segments:
            return self
        if new_horizon <= 0.0:
            raise ValueError("new horizon must be positive")
        rho = new_horizon / self.horizon
        pieces = [(s.length * rho, s.params.scaled_field(1.0 / rho)) for s in self.segments]
        return ParamSchedule.from_params(pieces)


class FeedbackLaw:
    """State-dependent parameters for FEEDBACK mode.

    Tracks one atom x+ of one cloud and cancels the attention drift there:
    W(t) 1 = (x+ - A_B[mu](x+)) / <a, x+>_+ with B = beta * x+ x+^T, so the
    tracked atom is a fixed point while the gate <a, x>_+ shields every
    cloud on the other side of the hyperplane {<a, x> = 0}.
    """

    def __init__(self, measure_index: int, atom_index: int, a: np.ndarray, beta: float):
        self.measure_index = measure_index
        self.atom_index = atom_index
        self.a = np.asarray(a, dtype=float)
        self.beta = float(beta)

    def params_for(self, states: Sequence[np.ndarray], weights: Sequence[np.ndarray]) -> TransformerParams:
        x_plus = states[self.measure_index][self.atom_index]
        d = x_plus.shape[0]
        B = self.beta * np.outer(x_plus, x_plus)
        att = attention_at(states[self.measure_index], weights[self.measure_index], B, x_plus)
        gate = float(np.dot(self.a, x_plus))
        if gate <= 0.0:
            raise RuntimeError("feedback gate closed at the tracked atom; law is undefined")
        w_one = (x_plus - att) / gate
        W = np.outer(w_one, np.ones(d)) / d
        U = np.outer(np.ones(d), self.a)
        return TransformerParams(np.eye(d), B, W, U, np.zeros(d))


@dataclass
class FlowDiagnostics:
    max_norm_drift: float = 0.0
    max_tangency_violation: float = 0.0
    steps: int = 0


@dataclass
class FlowResult:
    """Final clouds plus optional sampled trajectories and integrator diagnostics."""

    final: list[EmpiricalMeasure]
    times: Optional[np.ndarray] = None
    trajectory: Optional[list[np.ndarray]] = None  # per measure: (n_samples, n_atoms, d)
    diagnostics: FlowDiagnostics = field(default_factory=FlowDiagnostics)


def attention_at(points: np.ndarray, weights: np.ndarray, B: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Softmax attention of the cloud evaluated at a single query point x."""
    logits = points @ (B @ x)
    logits = logits - np.max(logits)
    e = weights * np.exp(logits)
    num = np.sum(np.sort(e[:, None] * points, axis=0), axis=0)
    den = float(np.sum(np.sort(e)))
    return num / den


def attention(mu: EmpiricalMeasure, B: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Spec surface for single-query attention against a measure."""
    return attention_at(mu.points, mu.weights, np.asarray(B, dtype=float), np.asarray(x, dtype=float))


def _attention_matrix(X: np.ndarray, w: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Attention of the cloud at each of its own atoms; rows are A_B[mu](x_i)."""
    logits = (X @ B.T) @ X.T  # logits[i, j] = <B x_i, x_j>
    logits = logits - np.max(logits, axis=1, keepdims=True)
    e = np.exp(logits) * w[None, :]
    num = np.sum(np.sort(e[:, :, None] * X[None, :, :], axis=1), axis=1)
    den = np.sum(np.sort(e, axis=1), axis=1)
    return num / den[:, None]


def _field(X: np.ndarray, w: np.ndarray, p: TransformerParams, mode: AttentionMode) -> np.ndarray:
    """Vector field at every atom of one cloud; rows are tangent at the atoms."""
    drive = np.maximum(X @ p.U.T + p.b[None, :], 0.0) @ p.W.T
    if mode is AttentionMode.MEAN:
        att = stable_weighted_sum(X, w)[None, :] @ p.V.T
        u = drive + att
    elif p.V.any():
        u = drive + _attention_matrix(X, w, p.B) @ p.V.T
    else:
        u = drive
    return u - np.sum(u * X, axis=1, keepdims=True) * X


def vector_field(
    mu: EmpiricalMeasure,
    params: TransformerParams,
    mode: AttentionMode,
    x: np.ndarray,
) -> np.ndarray:
    """Field of the cloud evaluated at an arbitrary query point x."""
    _check_mode(params, mode)
    x = np.asarray(x, dtype=float)
    drive = params.W @ np.maximum(params.U @ x + params.b, 0.0)
    if mode is AttentionMode.MEAN:
        att = params.V @ stable_weighted_sum(mu.points, mu.weights)
    else:
        att = params.V @ attention_at(mu.points, mu.weights, params.B, x)
    u = att + drive
    return u - np.dot(x, u) * x


def _check_mode(params: TransformerParams, mode: AttentionMode):
    if mode is AttentionMode.MEAN and params.B.any():
        raise ValueError("MEAN attention mode requires B = 0 in every segment")


def default_step(segment: Segment) -> float:
    """Per-segment step: at least 8 steps, with h * field_bound <= 0.02.

    A fixed fraction of the segment length would over-resolve the weak
    gate fields that synthesized schedules spend most of their time in,
    and under-resolve strongly rescaled ones; tying the step to the field
    bound keeps the local RK4 error scale-free.
    """
    bound = segment.params.field_bound()
    return min(segment.length / 8.0, 0.01 / max(bound, 1e-9))


def integrate(
    measures: Sequence[EmpiricalMeasure],
    schedule: ParamSchedule,
    mode: AttentionMode = AttentionMode.FULL,
    step: Optional[float] = None,
    direction: Direction = Direction.FORWARD,
    record_stride: int = 0,
    feedback: Optional[FeedbackLaw] = None,
) -> FlowResult:
    """RK4 flow of every cloud under a shared schedule.

    Clouds do not interact with each other; each one's attention sees only
    its own atoms.  Atoms are renormalized to unit length after every step
    and the worst pre-renormalization drift is reported.  BACKWARD runs the
    time-reversed schedule (segments reversed, fields negated).

    record_stride > 0 stores every record_stride-th state (plus endpoints).
    """
    if mode is AttentionMode.FEEDBACK and feedback is None:
        raise ValueError("FEEDBACK mode needs a FeedbackLaw")
    if step is not None:
        if step <= 0.0:
            raise ValueError("step must be positive")
        if schedule.segments and step > schedule.shortest_segment() + 1e-12:
            raise ValueError(
                f"step {step} exceeds the shortest segment length {schedule.shortest_segment()}"
            )

    sched = schedule if direction is Direction.FORWARD else schedule.reversed()
    states = [m.points.copy() for m in measures]
    weights = [m.weights for m in measures]
    diag = FlowDiagnostics()

    recording = record_stride > 0
    times: list[float] = []
    traj: list[list[np.ndarray]] = [[] for _ in measures]

    def record(t: float):
        times.append(t)
        for k, X in enumerate(states):
            traj[k].append(X.copy())

    if recording:
        record(0.0)

    t = 0.0
    global_step_idx = 0
    for seg_idx, seg in enumerate(sched.segments):
        if mode is not AttentionMode.FEEDBACK:
            _check_mode(seg.params, mode)
        target = step if step is not None else default_step(seg)
        n_steps = max(1, int(np.ceil(seg.length / target - 1e-12)))
        h = seg.length / n_steps

        def joint_field(stage: list[np.ndarray]) -> list[np.ndarray]:
            if mode is AttentionMode.FEEDBACK:
                p = feedback.params_for(stage, weights)
                return [_field(Y, w, p, AttentionMode.FULL) for Y, w in zip(stage, weights)]
            return [_field(Y, w, seg.params, mode) for Y, w in zip(stage, weights)]

        for _ in range(n_steps):
            k1 = joint_field(states)
            for X, v in zip(states, k1):
                if X.size:
                    diag.max_tangency_violation = max(
                        diag.max_tangency_violation,
                        float(np.max(np.abs(np.sum(v * X, axis=1)))),
                    )
            k2 = joint_field([X + 0.5 * h * v for X, v in zip(states, k1)])
            k3 = joint_field([X + 0.5 * h * v for X, v in zip(states, k2)])
            k4 = joint_field([X + h * v for X, v in zip(states, k3)])
            for k, X in enumerate(states):
                X_new = X + (h / 6.0) * (k1[k] + 2.0 * k2[k] + 2.0 * k3[k] + k4[k])
                if np.any(~np.isfinite(X_new)):
                    raise RuntimeError(f"non-finite state in segment {seg_idx} at t={t + h:.6g}")
                norms = np.linalg.norm(X_new, axis=1)
                diag.max_norm_drift = max(diag.max_norm_drift, float(np.max(np.abs(norms - 1.0))))
                states[k] = X_new / norms[:, None]
            t += h
            diag.steps += 1
            global_step_idx += 1
            if recording and (global_step_idx % record_stride == 0):
                record(t)

    if recording and (not times or abs(times[-1] - t) > 1e-15):
        record(t)

    finals = [m.with_points(X) for m, X in zip(measures, states)]
    return FlowResult(
        final=finals,
        times=np.asarray(times) if recording else None,
        trajectory=[np.asarray(frames) for frames in traj] if recording else None,
        diagnostics=diag,
    )


def flow_map(
    schedule: ParamSchedule,
    mode: AttentionMode = AttentionMode.MEAN,
    step: Optional[float] = None,
    direction: Direction = Direction.FORWARD,
) -> Callable[[np.ndarray], np.ndarray]:
    """Point-to-point flow map of a perceptron-only schedule.

    Requires V = 0 in every segment so the field carries no coupling to the
    measure; the map can then be applied to arbitrary points or stacks of
    points and composed with pushforward.
    """
    for seg in schedule.segments:
        if seg.params.V.any():
            raise ValueError("flow_map requires V = 0 in every segment (measure-independent field)")

    sched = schedule if direction is Direction.FORWARD else schedule.reversed()

    def transport(x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        X = np.atleast_2d(x).copy()
        for seg in sched.segments:
            target = step if step is not None else default_step(seg)
            n_steps = max(1, int(np.ceil(seg.length / target - 1e-12)))
            h = seg.length / n_steps
            p = seg.params

            def f(Y):
                u = np.maximum(Y @ p.U.T + p.b[None, :], 0.0) @ p.W.T
                return u - np.sum(u * Y, axis=1, keepdims=True) * Y

            for _ in range(n_steps):
                k1 = f(X)
                k2 = f(X + 0.5 * h * k1)
                k3 = f(X + 0.5 * h * k2)
                k4 = f(X + h * k3)
                X = X + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
                X = X / np.linalg.norm(X, axis=1, keepdims=True)
        return X[0] if single else X

    return transport
