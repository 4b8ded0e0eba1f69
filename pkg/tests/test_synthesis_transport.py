"""Transport constructions: orthant staging, cap transfers, chains, compression.

Claims checked:
    - orthant transport lands every atom strictly inside the positive
      orthant with exactly one switch, and is benign on orthant inputs
    - cap-to-cap transfer moves interior mass into the intersection and
      leaves outside probes bit-still; an atom at the drift point is fixed
    - chains deliver (1-eps)^K of the union mass to the last ball
    - compression reaches the prescribed atomic measure in W2 and leaves
      far-away measures untouched
    - gate locality: points in the zero region never move
"""

import numpy as np
import pytest

from sphereflow.dynamics import AttentionMode, integrate
from sphereflow.geometry import SphericalCap, geodesic_distance, geodesic_point, random_unit_vectors, unit
from sphereflow.measures import EmpiricalMeasure, wasserstein2
from sphereflow.synthesis import (
    SynthesisError,
    synth_compression,
    synth_orthant_transport,
    synth_tubular_chain,
    synth_two_balls,
)


def e(i, d=3):
    v = np.zeros(d)
    v[i] = 1.0
    return v


def cap_cloud(rng, center, radius, n) -> EmpiricalMeasure:
    center = unit(center)
    d = center.shape[0]
    pts = []
    while len(pts) < n:
        x = unit(center + radius * 0.6 * rng.standard_normal(d))
        if geodesic_distance(x, center) < radius:
            pts.append(x)
    return EmpiricalMeasure(np.asarray(pts))


class TestOrthantTransport:
    def test_single_atom_lands_in_orthant(self):
        x = unit(np.array([-0.3, 0.8, -0.52]))
        mu = EmpiricalMeasure.dirac(x)
        hole = unit(np.array([0.9, -0.1, 0.4]))
        report = synth_orthant_transport([mu], hole, T=1.0)
        assert report.switch_count == 1
        out = integrate([mu], report.schedule, AttentionMode.MEAN).final[0]
        assert np.all(out.points > 0.0)

    def test_orthant_inputs_stay_in_orthant(self):
        rng = np.random.default_rng(0)
        mu = cap_cloud(rng, np.ones(3), 0.3, 12)
        hole = -unit(np.ones(3))
        report = synth_orthant_transport([mu], hole, T=2.0)
        out = integrate([mu], report.schedule, AttentionMode.MEAN).final[0]
        assert np.all(out.points > 0.0)

    def test_several_measures_share_the_schedule(self):
        rng = np.random.default_rng(1)
        measures = [
            cap_cloud(rng, np.array([-1.0, 0.2, 0.1]), 0.3, 10),
            cap_cloud(rng, np.array([0.1, -1.0, 0.3]), 0.3, 10),
        ]
        hole = unit(np.array([0.2, 0.3, -1.0]))
        report = synth_orthant_transport(measures, hole, T=1.0)
        outs = integrate(measures, report.schedule, AttentionMode.MEAN).final
        for out in outs:
            assert np.all(out.points > 0.0)

    def test_hole_on_an_atom_rejected(self):
        mu = EmpiricalMeasure.dirac(e(0))
        with pytest.raises(SynthesisError):
            synth_orthant_transport([mu], e(0), T=1.0)

    def test_drift_norm_scales_inversely_with_horizon(self):
        mu = EmpiricalMeasure.dirac(unit(np.array([-0.5, 0.5, 0.7])))
        hole = unit(np.array([0.7, -0.7, 0.1]))
        r1 = synth_orthant_transport([mu], hole, T=1.0)
        r2 = synth_orthant_transport([mu], hole, T=2.0)
        w1 = max(np.linalg.norm(s.params.W, 2) for s in r1.schedule.segments)
        w2 = max(np.linalg.norm(s.params.W, 2) for s in r2.schedule.segments)
        assert w1 == pytest.approx(2.0 * w2, rel=1e-9)


class TestTwoBalls:
    def setup_method(self):
        self.b0 = SphericalCap(e(0), 0.5)
        self.omega = geodesic_point(e(0), e(1), 0.3 / (np.pi / 2))  # 0.3 rad from e0
        self.b1 = SphericalCap(self.omega, 0.25)

    def test_interior_mass_reaches_intersection(self):
        rng = np.random.default_rng(2)
        mu = cap_cloud(rng, e(0), 0.45, 64)
        report = synth_two_balls(self.b0, self.b1, self.omega, eps=0.05, T=1.0)
        assert report.switch_count == 0
        out = integrate([mu], report.schedule, AttentionMode.MEAN).final[0]
        inside = self.b0.contains_points(out.points) & self.b1.contains_points(out.points)
        assert float(np.sum(out.weights[inside])) >= 0.95

    def test_outside_points_bit_still(self):
        rng = np.random.default_rng(3)
        pts = []
        while len(pts) < 1000:
            x = random_unit_vectors(1, 3, rng)[0]
            if geodesic_distance(x, self.b0.center) >= self.b0.radius:
                pts.append(x)
        probes = EmpiricalMeasure(np.asarray(pts))
        report = synth_two_balls(self.b0, self.b1, self.omega, eps=0.05, T=1.0)
        out = integrate([probes], report.schedule, AttentionMode.MEAN).final[0]
        assert np.max(np.linalg.norm(out.points - probes.points, axis=1)) < 1e-9

    def test_atom_at_drift_point_fixed(self):
        mu = EmpiricalMeasure.dirac(self.omega)
        report = synth_two_balls(self.b0, self.b1, self.omega, eps=0.05, T=1.0)
        out = integrate([mu], report.schedule, AttentionMode.MEAN).final[0]
        assert np.max(np.abs(out.points[0] - self.omega)) < 1e-9

    def test_empty_intersection_rejected(self):
        far = SphericalCap(-e(0), 0.2)
        with pytest.raises(SynthesisError):
            synth_two_balls(self.b0, far, self.omega, eps=0.05, T=1.0)

    def test_omega_outside_source_rejected(self):
        with pytest.raises(SynthesisError):
            synth_two_balls(self.b0, self.b1, e(2), eps=0.05, T=1.0)


class TestTubularChain:
    def chain(self, k=3, radius=0.35, spacing=0.5):
        centers = [geodesic_point(e(0), e(1), min(1.0, j * spacing / (np.pi / 2)))
                   for j in range(k + 1)]
        return [SphericalCap(c, radius) for c in centers]

    def test_degenerate_chain_matches_two_balls(self):
        balls = self.chain(k=1)
        omega = geodesic_point(balls[0].center, balls[1].center, 0.5)
        report = synth_tubular_chain(balls, omega, eps=0.05, T=1.0)
        assert len(report.schedule.segments) == 1

    def test_three_stage_chain_delivers_mass(self):
        rng = np.random.default_rng(4)
        balls = self.chain(k=3)
        mu = cap_cloud(rng, balls[0].center, 0.30, 48)
        omega = geodesic_point(balls[2].center, balls[3].center, 0.5)
        report = synth_tubular_chain(balls, omega, eps=0.05, T=1.0)
        assert len(report.schedule.segments) == 3
        out = integrate([mu], report.schedule, AttentionMode.MEAN).final[0]
        final_mass = float(np.sum(out.weights[balls[-1].contains_points(out.points)]))
        assert final_mass >= (1.0 - 0.05) ** 3

    def test_points_outside_union_fixed(self):
        rng = np.random.default_rng(5)
        balls = self.chain(k=3)
        pts = []
        while len(pts) < 200:
            x = random_unit_vectors(1, 3, rng)[0]
            if all(geodesic_distance(x, b.center) >= b.radius + 1e-3 for b in balls):
                pts.append(x)
        probes = EmpiricalMeasure(np.asarray(pts))
        omega = geodesic_point(balls[2].center, balls[3].center, 0.5)
        report = synth_tubular_chain(balls, omega, eps=0.05, T=1.0)
        out = integrate([probes], report.schedule, AttentionMode.MEAN).final[0]
        assert np.max(np.linalg.norm(out.points - probes.points, axis=1)) < 1e-9

    def test_broken_chain_rejected(self):
        balls = self.chain(k=2)
        # Pull ball 2 next to ball 0: non-consecutive overlap.
        bad = [balls[0], balls[1], SphericalCap(balls[0].center, balls[0].radius)]
        with pytest.raises(SynthesisError, match="disjoint"):
            synth_tubular_chain(bad, bad[-1].center, eps=0.05, T=1.0)


class TestCompression:
    def test_already_atomic_gives_empty_schedule(self):
        anchors = [e(0), e(1)]
        mu = EmpiricalMeasure(np.vstack(anchors), np.array([0.5, 0.5]))
        report = synth_compression([mu], [[(anchors[0], 0.5), (anchors[1], 0.5)]],
                                   eps=0.05, T=1.0)
        assert len(report.schedule.segments) == 0

    def test_cap_cloud_to_three_anchors(self):
        rng = np.random.default_rng(6)
        mu = cap_cloud(rng, e(0), 0.4, 63)
        anchors = [
            geodesic_point(e(0), e(1), 0.10),
            e(0),
            geodesic_point(e(0), e(2), 0.12),
        ]
        targets = [(a, 1.0 / 3.0) for a in anchors]
        report = synth_compression([mu], [targets], eps=0.05, T=1.0)
        out = integrate([mu], report.schedule, AttentionMode.MEAN).final[0]
        goal = EmpiricalMeasure(np.vstack(anchors), np.full(3, 1.0 / 3.0))
        assert wasserstein2(out, goal) <= 0.05 + 0.02  # tolerance + mass quantization

    def test_far_measure_untouched(self):
        # The far measure's own target is already satisfied, so the whole
        # schedule consists of the near measure's stages; locality of the
        # gates must leave the far atoms bit-still.
        rng = np.random.default_rng(7)
        mu = cap_cloud(rng, e(0), 0.3, 32)
        other = EmpiricalMeasure.dirac(-e(0))
        anchors = [geodesic_point(e(0), e(1), 0.08), geodesic_point(e(0), e(2), 0.08)]
        targets = [[(anchors[0], 0.5), (anchors[1], 0.5)], [(-e(0), 1.0)]]
        report = synth_compression([mu, other], targets, eps=0.05, T=1.0)
        out = integrate([mu, other], report.schedule, AttentionMode.MEAN).final
        assert np.max(np.linalg.norm(out[1].points - other.points, axis=1)) < 1e-9
        goal = EmpiricalMeasure(np.vstack(anchors), np.array([0.5, 0.5]))
        assert wasserstein2(out[0], goal) <= 0.05 + 0.02

    def test_bad_masses_rejected(self):
        mu = EmpiricalMeasure(np.vstack([e(0), e(1)]))
        with pytest.raises(SynthesisError, match="sum"):
            synth_compression([mu], [[(e(0), 0.4), (e(1), 0.4)]], eps=0.05, T=1.0)
