"""Empirical measures on the sphere and the transport/separability tools used to judge them.

A measure is a weighted particle cloud.  Wasserstein-2 uses the ambient
squared Euclidean ground cost; it is computed exactly by optimal
assignment (uniform clouds of equal size) or by the transportation LP,
with an entropic Sinkhorn surrogate offered for large clouds only.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

import numpy as np
from scipy.optimize import linear_sum_assignment, linprog

from .geometry import UNIT_NORM_TOL, pairwise_geodesic_distances, unit

WEIGHT_TOL = 1e-12


def stable_weighted_sum(points: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Weighted sum of rows, invariant to row permutation at the bit level.

    Terms are sorted per coordinate before summation, so reordering the
    atoms cannot change rounding.
    """
    terms = points * weights[:, None]
    return np.sum(np.sort(terms, axis=0), axis=0)


@dataclass(frozen=True)
class EmpiricalMeasure:
    """Weighted atoms on S^{d-1}; weights are nonnegative and sum to 1."""

    points: np.ndarray
    weights: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        if pts.shape[0] < 1 or pts.shape[1] < 2:
            raise ValueError(f"need at least one atom in dimension >= 2, got shape {pts.shape}")
        norms = np.linalg.norm(pts, axis=1)
        if np.any(np.abs(norms - 1.0) > UNIT_NORM_TOL):
            worst = float(np.max(np.abs(norms - 1.0)))
            raise ValueError(f"atoms must be unit vectors within {UNIT_NORM_TOL}; worst deviation {worst:.3e}")
        if self.weights is None:
            w = np.full(pts.shape[0], 1.0 / pts.shape[0])
        else:
            w = np.asarray(self.weights, dtype=float)
            if w.shape != (pts.shape[0],):
                raise ValueError("weights must be one per atom")
            if np.any(w < 0.0):
                raise ValueError("weights must be nonnegative")
            if abs(float(np.sum(w)) - 1.0) > WEIGHT_TOL:
                raise ValueError(f"weights sum to {float(np.sum(w))!r}, not 1 within {WEIGHT_TOL}")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]

    @property
    def is_uniform(self) -> bool:
        return bool(np.allclose(self.weights, 1.0 / self.n, atol=WEIGHT_TOL, rtol=0.0))

    @staticmethod
    def dirac(x: np.ndarray) -> "EmpiricalMeasure":
        return EmpiricalMeasure(np.atleast_2d(np.asarray(x, dtype=float)))

    def with_points(self, points: np.ndarray) -> "EmpiricalMeasure":
        """Same weights on new atom positions."""
        return EmpiricalMeasure(points, self.weights.copy())


@dataclass(frozen=True)
class Coupling:
    """Transport plan between two measures; marginals must match their weights."""

    plan: np.ndarray
    source_weights: np.ndarray
    target_weights: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.plan, dtype=float)
        if np.any(p < -1e-12):
            raise ValueError("coupling entries must be nonnegative")
        row_err = float(np.max(np.abs(p.sum(axis=1) - self.source_weights)))
        col_err = float(np.max(np.abs(p.sum(axis=0) - self.target_weights)))
        if max(row_err, col_err) > 1e-9:
            raise ValueError(f"marginal violation {max(row_err, col_err):.3e} exceeds 1e-9")
        object.__setattr__(self, "plan", p)


def mean(mu: EmpiricalMeasure) -> np.ndarray:
    """Weighted Euclidean barycenter of the atoms (norm <= 1, not renormalized)."""
    return stable_weighted_sum(mu.points, mu.weights)


def support_diameter(mu: EmpiricalMeasure) -> float:
    """Maximal pairwise geodesic distance over atoms."""
    if mu.n == 1:
        return 0.0
    return float(np.max(pairwise_geodesic_distances(mu.points)))


def squared_euclidean_cost(mu: EmpiricalMeasure, nu: EmpiricalMeasure) -> np.ndarray:
    diff = mu.points[:, None, :] - nu.points[None, :, :]
    return np.sum(diff * diff, axis=2)


def optimal_coupling(mu: EmpiricalMeasure, nu: EmpiricalMeasure) -> tuple[Coupling, float]:
    """Exact optimal transport plan and squared-W2 cost.

    Uniform clouds of equal size are solved by optimal assignment;
    anything else goes through the transportation LP.
    """
    cost = squared_euclidean_cost(mu, nu)
    if mu.n == nu.n and mu.is_uniform and nu.is_uniform:
        rows, cols = linear_sum_assignment(cost)
        plan = np.zeros_like(cost)
        plan[rows, cols] = 1.0 / mu.n
        total = float(np.sum(cost[rows, cols]) / mu.n)
        return Coupling(plan, mu.weights, nu.weights), total

    n, m = mu.n, nu.n
    # Equality constraints: all row sums, and all but the last column sum
    # (redundant once rows are fixed).
    a_rows = np.zeros((n, n * m))
    for i in range(n):
        a_rows[i, i * m:(i + 1) * m] = 1.0
    a_cols = np.zeros((m - 1, n * m))
    for j in range(m - 1):
        a_cols[j, j::m] = 1.0
    a_eq = np.vstack([a_rows, a_cols])
    b_eq = np.concatenate([mu.weights, nu.weights[:-1]])
    res = linprog(cost.ravel(), A_eq=a_eq, b_eq=b_eq, bounds=(0.0, None), method="highs")
    if not res.success:
        raise RuntimeError(f"transportation LP failed: {res.message}")
    plan = np.maximum(res.x.reshape(n, m), 0.0)
    # Clean the marginals against LP round-off before validating.
    row = plan.sum(axis=1)
    plan[row > 0] *= (mu.weights[row > 0] / row[row > 0])[:, None]
    return Coupling(plan, mu.weights, nu.weights), float(np.sum(plan * cost))


def wasserstein2(mu: EmpiricalMeasure, nu: EmpiricalMeasure) -> float:
    """Exact Wasserstein-2 distance with ambient squared Euclidean ground cost."""
    _, total = optimal_coupling(mu, nu)
    return float(np.sqrt(max(total, 0.0)))


def wasserstein2_sinkhorn(
    mu: EmpiricalMeasure,
    nu: EmpiricalMeasure,
    reg: float,
    max_iter: int = 5000,
    tol: float = 1e-6,
) -> float:
    """Entropic-regularized surrogate for wasserstein2.

    Approaches the exact value as reg -> 0.  Raises on non-convergence,
    reporting the final marginal violation.  Intended for large clouds;
    acceptance checks always use the exact solvers.
    """
    if reg <= 0.0:
        raise ValueError("reg must be positive")
    cost = squared_euclidean_cost(mu, nu)
    log_w = np.log(np.maximum(mu.weights, 1e-300))
    log_v = np.log(np.maximum(nu.weights, 1e-300))
    f = np.zeros(mu.n)
    g = np.zeros(nu.n)

    # Log-domain iterations with epsilon-scaling: anneal from a loose
    # regularization down to the requested one, warm-starting the potentials;
    # plain iterations stall for reg well below the cost scale.
    levels = [reg]
    while levels[-1] < 1.0:
        levels.append(levels[-1] * 4.0)
    violation = np.inf
    spent = 0
    for level in reversed(levels):
        while spent < max_iter:
            m1 = (g[None, :] - cost) / level
            f = -level * (np.log(np.sum(np.exp(m1 - m1.max(axis=1, keepdims=True)), axis=1))
                          + m1.max(axis=1)) + level * log_w
            m2 = (f[:, None] - cost) / level
            g = -level * (np.log(np.sum(np.exp(m2 - m2.max(axis=0, keepdims=True)), axis=0))
                          + m2.max(axis=0)) + level * log_v
            spent += 1
            plan = np.exp((f[:, None] + g[None, :] - cost) / level)
            violation = max(
                float(np.max(np.abs(plan.sum(axis=1) - mu.weights))),
                float(np.max(np.abs(plan.sum(axis=0) - nu.weights))),
            )
            if violation < tol:
                break
        if violation >= tol:
            raise RuntimeError(
                f"Sinkhorn did not converge in {max_iter} iterations; "
                f"marginal violation {violation:.3e}"
            )
    return float(np.sqrt(max(float(np.sum(plan * cost)), 0.0)))


class Separator(NamedTuple):
    normal: np.ndarray
    margin: float
    threshold: float


def linearly_separable(mu: EmpiricalMeasure, nu: EmpiricalMeasure) -> Optional[Separator]:
    """Strict linear separator between the atom sets, if one exists.

    Solves the hard-margin LP  max t  s.t.  <a,x> <= c - t on mu,
    <a,y> >= c + t on nu, |a|_inf <= 1.  Returns the unit normal (pointing
    from mu toward nu), the geometric margin, and the midpoint threshold,
    or None when no strict separator exists.
    """
    d = mu.d
    if nu.d != d:
        raise ValueError("measures live in different dimensions")
    # Variables: a (d), c, t.  Maximize t.
    n_var = d + 2
    cvec = np.zeros(n_var)
    cvec[-1] = -1.0
    rows = []
    rhs = []
    for x in mu.points:
        r = np.zeros(n_var)
        r[:d] = x
        r[d] = -1.0
        r[d + 1] = 1.0
        rows.append(r)  # <a,x> - c + t <= 0
        rhs.append(0.0)
    for y in nu.points:
        r = np.zeros(n_var)
        r[:d] = -y
        r[d] = 1.0
        r[d + 1] = 1.0
        rows.append(r)  # -<a,y> + c + t <= 0
        rhs.append(0.0)
    bounds = [(-1.0, 1.0)] * d + [(-2.0 * np.sqrt(d), 2.0 * np.sqrt(d)), (None, None)]
    res = linprog(cvec, A_ub=np.asarray(rows), b_ub=np.asarray(rhs), bounds=bounds, method="highs")
    if not res.success:
        return None
    t_star = float(res.x[-1])
    if t_star <= 1e-12:
        return None
    a = res.x[:d]
    na = float(np.linalg.norm(a))
    if na < 1e-15:
        return None
    a = a / na
    lo = float(np.max(mu.points @ a))
    hi = float(np.min(nu.points @ a))
    margin = (hi - lo) / 2.0
    if margin <= 0.0:
        return None
    return Separator(a, margin, (hi + lo) / 2.0)


def open_hemisphere_direction(points: np.ndarray) -> Optional[np.ndarray]:
    """Unit direction a with <a, x> > 0 for every row x, or None.

    Existence is equivalent to the points lying in an open hemisphere.
    """
    points = np.atleast_2d(points)
    d = points.shape[1]
    n_var = d + 1
    cvec = np.zeros(n_var)
    cvec[-1] = -1.0
    a_ub = np.hstack([-points, np.ones((points.shape[0], 1))])  # t - <a,x> <= 0
    b_ub = np.zeros(points.shape[0])
    bounds = [(-1.0, 1.0)] * d + [(None, None)]
    res = linprog(cvec, A_ub=a_ub, b_ub=b_ub, bounds=bounds, method="highs")
    if not res.success or float(res.x[-1]) <= 1e-12:
        return None
    return unit(res.x[:d])


def pushforward(mu: EmpiricalMeasure, transport: Callable[[np.ndarray], np.ndarray]) -> EmpiricalMeasure:
    """Image measure: apply a sphere-to-sphere map to every atom, keep weights."""
    new_pts = np.asarray([transport(x) for x in mu.points], dtype=float)
    norms = np.linalg.norm(new_pts, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        worst = float(np.max(np.abs(norms - 1.0)))
        raise ValueError(f"map output leaves the sphere by {worst:.3e} (> 1e-6)")
    new_pts = new_pts / norms[:, None]
    return EmpiricalMeasure(new_pts, mu.weights.copy())


def concentrate_mass_orthant(mu: EmpiricalMeasure, anchor: np.ndarray) -> EmpiricalMeasure:
    """Replace every atom outside the closed positive orthant by the anchor.

    Weights of the moved atoms are merged onto the anchor; atoms already
    in the orthant are untouched.  The anchor must have all coordinates
    strictly positive.
    """
    anchor = np.asarray(anchor, dtype=float)
    if np.any(anchor <= 0.0):
        raise ValueError("anchor must lie in the open positive orthant")
    inside = np.all(mu.points >= 0.0, axis=1)
    if np.all(inside):
        return mu
    moved_weight = float(np.sum(mu.weights[~inside]))
    pts = np.vstack([mu.points[inside], anchor[None, :]])
    w = np.concatenate([mu.weights[inside], [moved_weight]])
    return EmpiricalMeasure(pts, w)
