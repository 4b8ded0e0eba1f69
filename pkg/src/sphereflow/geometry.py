"""Geometry of the unit sphere S^{d-1} embedded in R^d.

Points are plain numpy vectors of unit Euclidean norm.  All angles and
radii are geodesic (radians).  Caps are open: a point at geodesic
distance exactly equal to the radius counts as outside.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

UNIT_NORM_TOL = 1e-9


def unit(v: np.ndarray) -> np.ndarray:
    """Normalize v to unit Euclidean norm."""
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v)
    if n == 0.0:
        raise ValueError("cannot normalize the zero vector")
    return v / n


def check_unit(x: np.ndarray, tol: float = UNIT_NORM_TOL) -> np.ndarray:
    """Validate that x is a unit vector of dimension >= 2; returns x as float array."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.shape[0] < 2:
        raise ValueError(f"expected a vector of dimension >= 2, got shape {x.shape}")
    if abs(np.linalg.norm(x) - 1.0) > tol:
        raise ValueError(f"vector has norm {np.linalg.norm(x)!r}, not unit within {tol}")
    return x


def project_tangent(x: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Orthogonal projection (I - x x^T) v of v onto the tangent space at x."""
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    if x.shape != v.shape:
        raise ValueError(f"dimension mismatch: x has shape {x.shape}, v has shape {v.shape}")
    return v - np.dot(x, v) * x


def geodesic_distance(x: np.ndarray, y: np.ndarray) -> float:
    """Geodesic (great-circle) distance in [0, pi].

    The inner product is clamped to [-1, 1] so numerically colinear
    inputs cannot produce NaN.
    """
    c = float(np.dot(x, y))
    return float(np.arccos(min(1.0, max(-1.0, c))))


def pairwise_geodesic_distances(points: np.ndarray) -> np.ndarray:
    """All pairwise geodesic distances of an (n, d) array of unit vectors."""
    g = np.clip(points @ points.T, -1.0, 1.0)
    return np.arccos(g)


def geodesic_point(x: np.ndarray, y: np.ndarray, s: float) -> np.ndarray:
    """Point at fraction s in [0, 1] along the minimizing geodesic from x to y (slerp).

    Antipodal endpoints have no unique minimizing geodesic and raise ValueError.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if not 0.0 <= s <= 1.0:
        raise ValueError(f"fraction s={s} outside [0, 1]")
    theta = geodesic_distance(x, y)
    if theta > np.pi - 1e-9:
        raise ValueError("geodesic_point is undefined for antipodal endpoints")
    if theta < 1e-15:
        return x.copy()
    st = np.sin(theta)
    p = (np.sin((1.0 - s) * theta) / st) * x + (np.sin(s * theta) / st) * y
    return unit(p)


@dataclass(frozen=True)
class SphericalCap:
    """Open geodesic ball B(center, radius) with radius in (0, pi)."""

    center: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", check_unit(self.center))
        if not 0.0 < self.radius < np.pi:
            raise ValueError(f"cap radius must lie in (0, pi), got {self.radius}")

    def contains(self, x: np.ndarray) -> bool:
        return geodesic_distance(x, self.center) < self.radius

    def contains_points(self, points: np.ndarray) -> np.ndarray:
        """Vectorized open-ball membership for an (n, d) array."""
        g = np.clip(np.asarray(points) @ self.center, -1.0, 1.0)
        return np.arccos(g) < self.radius

    def intersects(self, other: "SphericalCap") -> bool:
        return geodesic_distance(self.center, other.center) < self.radius + other.radius


def in_cap(x: np.ndarray, cap: SphericalCap) -> bool:
    """Open-ball membership test: true iff d_g(x, center) < radius."""
    return cap.contains(x)


def random_unit_vectors(n: int, d: int, rng: np.random.Generator) -> np.ndarray:
    """n points drawn uniformly from S^{d-1}, as an (n, d) array."""
    g = rng.standard_normal((n, d))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def orthonormal_complement_basis(v: np.ndarray) -> np.ndarray:
    """Rows form an orthonormal basis of the orthogonal complement of span{v}."""
    v = unit(v)
    d = v.shape[0]
    # Householder reflection mapping e_1 to v; remaining columns span v-perp.
    w = v.copy()
    w[0] -= 1.0
    nw = np.linalg.norm(w)
    if nw < 1e-14:
        basis = np.eye(d)[1:]
    else:
        w /= nw
        H = np.eye(d) - 2.0 * np.outer(w, w)
        basis = H[:, 1:].T
    return basis


def rotation_aligning(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Rotation matrix R with R a = b, acting in the plane span{a, b}."""
    a = unit(a)
    b = unit(b)
    c = float(np.dot(a, b))
    if c > 1.0 - 1e-14:
        return np.eye(a.shape[0])
    if c < -1.0 + 1e-14:
        raise ValueError("rotation between antipodal vectors is not unique")
    u = a
    w = unit(b - c * a)
    s = np.sqrt(max(0.0, 1.0 - c * c))
    R = np.eye(a.shape[0])
    R += (c - 1.0) * (np.outer(u, u) + np.outer(w, w))
    R += s * (np.outer(w, u) - np.outer(u, w))
    return R
