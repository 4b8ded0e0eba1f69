"""Attention-driven clustering of a cloud toward a single point mass.

With V = I, W = 0 and a fixed logit matrix B, every cloud supported in an
open hemisphere contracts: its support diameter is nonincreasing and the
time to reach diameter eps grows like log(1/eps).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from ..dynamics import AttentionMode, TransformerParams, _field
from ..measures import EmpiricalMeasure, open_hemisphere_direction, support_diameter
from .base import SynthesisError


def synth_cluster_single(
    B: np.ndarray,
    stop_eps: float,
) -> tuple[TransformerParams, Callable[[EmpiricalMeasure], bool]]:
    """Constant clustering parameters (V = I, given B, W = 0) and the
    stopping rule 'support diameter <= stop_eps'."""
    B = np.asarray(B, dtype=float)
    params = TransformerParams.attention_only(np.eye(B.shape[0]), B)

    def stopped(mu: EmpiricalMeasure) -> bool:
        return support_diameter(mu) <= stop_eps

    return params, stopped


@dataclass
class ClusterRun:
    """Trace of one clustering run up to its stopping time."""

    times: np.ndarray
    diameters: np.ndarray
    hitting_time: float
    final: EmpiricalMeasure
    params: TransformerParams

    def hitting_time_for(self, eps: float) -> float:
        """First recorded time with diameter <= eps."""
        idx = np.nonzero(self.diameters <= eps)[0]
        if idx.size == 0:
            raise ValueError(f"diameter never reached {eps} during the run")
        return float(self.times[idx[0]])


def cluster_measure(
    mu: EmpiricalMeasure,
    B: Optional[np.ndarray] = None,
    stop_eps: float = 1e-3,
    step: Optional[float] = None,
    t_max: float = 400.0,
    require_hemisphere: bool = True,
) -> ClusterRun:
    """Run the clustering dynamics until the support diameter reaches stop_eps.

    By default the cloud must lie in an open hemisphere (checked by LP),
    which guarantees contraction; random-cloud probes may disable the
    check and rely on the generic almost-sure collapse instead.
    """
    d = mu.d
    B = np.zeros((d, d)) if B is None else np.asarray(B, dtype=float)
    if require_hemisphere and open_hemisphere_direction(mu.points) is None:
        raise SynthesisError("clustering requires support in an open hemisphere")
    params, stopped = synth_cluster_single(B, stop_eps)
    h = step if step is not None else min(1e-2, 0.01 / max(params.field_bound(), 1.0))

    X = mu.points.copy()
    w = mu.weights
    times = [0.0]
    diams = [support_diameter(mu)]
    t = 0.0
    mode = AttentionMode.FULL
    while diams[-1] > stop_eps:
        if t >= t_max:
            raise SynthesisError(
                f"clustering did not reach diameter {stop_eps} by t={t_max} "
                f"(current {diams[-1]:.3g})"
            )
        k1 = _field(X, w, params, mode)
        k2 = _field(X + 0.5 * h * k1, w, params, mode)
        k3 = _field(X + 0.5 * h * k2, w, params, mode)
        k4 = _field(X + h * k3, w, params, mode)
        X = X + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        X /= np.linalg.norm(X, axis=1, keepdims=True)
        t += h
        g = np.clip(X @ X.T, -1.0, 1.0)
        diams.append(float(np.max(np.arccos(g))))
        times.append(t)

    final = mu.with_points(X)
    return ClusterRun(
        times=np.asarray(times),
        diameters=np.asarray(diams),
        hitting_time=t,
        final=final,
        params=params,
    )
