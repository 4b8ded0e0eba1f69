"""Collapsing trailing coordinates onto the (x1, x2) circle, and the
state-feedback controller that separates circle clouds through attention.

Coordinate collapse uses one pair of opposed half-space gates per
coordinate: (x_k)_+ drifting toward -e_k kills the positive side, then
(-x_k)_+ drifting toward +e_k kills the negative side.  The flow scales
the remaining coordinates uniformly, so each atom converges to its own
circle projection.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy.optimize import linprog

from ..dynamics import AttentionMode, FeedbackLaw, ParamSchedule, TransformerParams
from ..measures import EmpiricalMeasure
from .base import (
    GateSpec,
    SynthesisError,
    SynthesisReport,
    calibrate_duration,
)


def synth_squash_to_circle(
    measures: Sequence[EmpiricalMeasure],
    eps: float,
    T: float = 1.0,
) -> SynthesisReport:
    """Drive coordinates 3..d of every atom to zero (within eps overall).

    At most 2(d-2) segments.  Atoms at a pole of a collapsed coordinate
    are fixed points of its gates and make the collapse impossible.
    """
    if not measures:
        raise SynthesisError("no measures to squash")
    d = measures[0].d
    if d < 3:
        return SynthesisReport.from_schedule(ParamSchedule.empty(), notes=["already a circle"])

    states = list(measures)
    residual = eps / (2.0 * max(d - 2, 1))
    pieces = []
    notes = [f"per-coordinate residual {residual:.3g}"]

    for k in range(d - 1, 1, -1):
        e_k = np.zeros(d)
        e_k[k] = 1.0
        worst = max(float(np.max(np.abs(m.points[:, k]))) for m in states)
        if worst >= 1.0 - 1e-9:
            raise SynthesisError(f"an atom sits at a pole of coordinate {k}; cannot collapse it")
        if worst <= residual:
            continue
        # Residual decay is exponential: x/sqrt(1-x^2) shrinks by e^{-t}.
        c0 = min(worst, 1.0 - 1e-12)
        t_init = float(np.log((c0 / np.sqrt(1.0 - c0**2)) / (residual / 2.0))) + 1.0

        for sign in (+1.0, -1.0):
            sided = any(np.any(sign * m.points[:, k] > residual / 4.0) for m in states)
            if not sided:
                continue
            gate = GateSpec(sign * e_k, 0.0, -sign * e_k)

            def collapsed(finals: list[EmpiricalMeasure], k=k, sign=sign) -> bool:
                return all(
                    float(np.max(sign * m.points[:, k])) <= residual for m in finals
                )

            t_s, states = calibrate_duration(states, gate.params(), collapsed, t_init,
                                             mode=AttentionMode.MEAN,
                                             what=f"coordinate {k} collapse ({'+' if sign > 0 else '-'})")
            pieces.append((t_s, gate.params()))

    if not pieces:
        return SynthesisReport.from_schedule(ParamSchedule.empty(), notes=notes)
    schedule = ParamSchedule.from_params(pieces).rescaled(T)
    report = SynthesisReport.from_schedule(schedule, notes=notes)
    if report.switch_count > 2 * (d - 2):
        raise SynthesisError("collapse emitted more segments than its switch budget")
    return report


def _homogeneous_separator(point_pos: np.ndarray, others: np.ndarray) -> np.ndarray:
    """Unit a with <a, point_pos> > 0 > <a, q> for all rows q, max margin."""
    d = point_pos.shape[0]
    n_var = d + 1
    cvec = np.zeros(n_var)
    cvec[-1] = -1.0
    rows = [np.concatenate([-point_pos, [1.0]])]
    rhs = [0.0]
    for q in others:
        rows.append(np.concatenate([q, [1.0]]))
        rhs.append(0.0)
    bounds = [(-1.0, 1.0)] * d + [(None, None)]
    res = linprog(cvec, A_ub=np.asarray(rows), b_ub=np.asarray(rhs), bounds=bounds,
                  method="highs")
    if not res.success or float(res.x[-1]) <= 1e-9:
        raise SynthesisError("no homogeneous separator between the leading atom and the rest")
    a = res.x[:d]
    return a / np.linalg.norm(a)


def synth_feedback_disentangle(
    measures: Sequence[EmpiricalMeasure],
    beta: float,
    T: float = 1.0,
) -> tuple[FeedbackLaw, SynthesisReport]:
    """State-feedback controller separating the leading circle cloud.

    Clouds must be pre-squashed onto the (x1, x2) circle.  The cloud whose
    atom reaches highest along e_2 leads: a rank-one logit matrix
    beta x+ x+^T concentrates its attention near that atom, the feedback
    drift pins the atom in place, and a homogeneous gate hides the other
    clouds from the drift while their own attention contracts them.
    Experimental: the returned schedule is empty, the law drives FEEDBACK
    integration for the horizon T.
    """
    if len(measures) == 0:
        raise SynthesisError("no measures given")
    d = measures[0].d
    for m in measures:
        if d > 2 and float(np.max(np.abs(m.points[:, 2:]))) > 0.05:
            raise SynthesisError("clouds must be squashed to the circle first "
                                 "(see synth_squash_to_circle)")

    tops = [float(np.max(m.points[:, 1])) for m in measures]
    lead = int(np.argmax(tops))
    atom_index = int(np.argmax(measures[lead].points[:, 1]))
    x_plus = measures[lead].points[atom_index]

    others_tops = [t for j, t in enumerate(tops) if j != lead]
    if others_tops and tops[lead] - max(others_tops) < 1e-3:
        raise SynthesisError("leading atoms coincide; circle boundary supports must be disjoint")

    if len(measures) == 1:
        a = x_plus.copy()
        notes = ["single cloud: controller inert"]
    else:
        others = np.vstack([m.points for j, m in enumerate(measures) if j != lead])
        a = _homogeneous_separator(x_plus, others)
        notes = [f"leading cloud {lead}, atom {atom_index}",
                 f"gate direction margin {float(np.min(np.abs(others @ a))):.4f}"]
    law = FeedbackLaw(lead, atom_index, a, beta)
    notes.append(f"beta {beta}; run with AttentionMode.FEEDBACK for horizon {T}")
    report = SynthesisReport.from_schedule(ParamSchedule.empty(), notes=notes)
    return law, report
