"""Transformer field and RK4 flows on the sphere.

Claims checked:
    - attention is a stabilized softmax combination (closed two-atom form)
    - vector_field output is tangent within 1e-12 on random draws
    - the pure-drift flow obeys <x(t), w> = tanh(t + artanh <x0, w>)
    - forward-then-backward integration is the identity at 1e-6
    - norm drift per RK4 step stays below 1e-8 before renormalization
    - permutation equivariance is bit-exact; rotation equivariance at 1e-6
    - clouds never see each other's atoms
    - flow_map requires V = 0 and round-trips with its reversal
    - schedule rescaling (halve T, double V and W) preserves endpoints
"""

import numpy as np
import pytest

from sphereflow.dynamics import (
    AttentionMode,
    Direction,
    ParamSchedule,
    TransformerParams,
    attention,
    flow_map,
    integrate,
    vector_field,
)
from sphereflow.geometry import random_unit_vectors, rotation_aligning, unit
from sphereflow.measures import EmpiricalMeasure, pushforward


def e(i, d=3):
    v = np.zeros(d)
    v[i] = 1.0
    return v


def drift_params(omega: np.ndarray) -> TransformerParams:
    """Constant field P_x omega: relu(0 x + 1) = 1 and W 1 = omega."""
    d = omega.shape[0]
    z = np.zeros((d, d))
    W = np.outer(omega, np.ones(d)) / d
    return TransformerParams(z, z.copy(), W, z.copy(), np.ones(d))


def random_params(rng, d, scale=1.0) -> TransformerParams:
    mats = [scale * rng.standard_normal((d, d)) for _ in range(4)]
    return TransformerParams(*mats, scale * rng.standard_normal(d))


class TestAttention:
    def test_single_atom(self):
        mu = EmpiricalMeasure.dirac(e(1))
        rng = np.random.default_rng(0)
        B = rng.standard_normal((3, 3))
        assert np.allclose(attention(mu, B, e(0)), e(1))

    def test_zero_logits_give_mean(self):
        mu = EmpiricalMeasure(np.vstack([e(0), e(1)]))
        out = attention(mu, np.zeros((3, 3)), e(2))
        assert np.allclose(out, [0.5, 0.5, 0.0])

    def test_two_atom_closed_form(self):
        # B = I, query e0: logits (1, 0) -> weights (e, 1)/(e+1).
        mu = EmpiricalMeasure(np.vstack([e(0), e(1)]))
        out = attention(mu, np.eye(3), e(0))
        expected = (np.e * e(0) + e(1)) / (np.e + 1.0)
        assert np.allclose(out, expected, atol=1e-14)

    def test_output_is_convex_combination(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            n, d = int(rng.integers(1, 9)), int(rng.integers(2, 5))
            mu = EmpiricalMeasure(random_unit_vectors(n, d, rng), rng.dirichlet(np.ones(n)))
            B = 3.0 * rng.standard_normal((d, d))
            x = random_unit_vectors(1, d, rng)[0]
            out = attention(mu, B, x)
            assert np.linalg.norm(out) <= 1.0 + 1e-12
            coeff, *_ = np.linalg.lstsq(mu.points.T, out, rcond=None)
            if n <= d:  # coefficients identifiable
                assert np.sum(coeff) == pytest.approx(1.0, abs=1e-9)

    def test_large_logits_are_stable(self):
        mu = EmpiricalMeasure(np.vstack([e(0), e(1)]))
        out = attention(mu, 1e6 * np.eye(3), e(0))
        assert np.all(np.isfinite(out))
        assert np.allclose(out, e(0), atol=1e-12)


class TestVectorField:
    def test_fixed_point_single_atom(self):
        mu = EmpiricalMeasure.dirac(e(0))
        p = TransformerParams.attention_only(np.eye(3))
        assert np.allclose(vector_field(mu, p, AttentionMode.FULL, e(0)), 0.0)

    def test_pure_drift_value(self):
        omega = unit(np.array([1.0, 2.0, -1.0]))
        p = drift_params(omega)
        p = TransformerParams(p.V, p.B, -p.W, p.U, p.b)  # W 1 = -omega
        mu = EmpiricalMeasure.dirac(e(0))
        x = unit(np.array([0.3, -0.5, 0.8]))
        expected = -(omega - np.dot(x, omega) * x)
        assert np.allclose(vector_field(mu, p, AttentionMode.FULL, x), expected, atol=1e-14)

    def test_gate_off_region_gives_zero(self):
        # relu(<a, x> - 0.5) vanishes when <a, x> <= 0.5.
        d = 3
        a = e(0)
        U = np.outer(np.ones(d), a)
        b = -0.5 * np.ones(d)
        W = np.outer(e(1), np.ones(d)) / d
        p = TransformerParams(np.zeros((d, d)), np.zeros((d, d)), W, U, b)
        mu = EmpiricalMeasure.dirac(e(0))
        x = unit(np.array([0.2, 0.5, 0.84]))
        assert np.allclose(vector_field(mu, p, AttentionMode.FULL, x), 0.0)

    def test_tangency_random_sweep(self):
        rng = np.random.default_rng(2)
        for _ in range(10_000):
            d = int(rng.integers(2, 5))
            n = int(rng.integers(1, 6))
            mu = EmpiricalMeasure(random_unit_vectors(n, d, rng))
            p = random_params(rng, d)
            x = random_unit_vectors(1, d, rng)[0]
            v = vector_field(mu, p, AttentionMode.FULL, x)
            assert abs(np.dot(v, x)) <= 1e-12

    def test_mean_mode_rejects_nonzero_B(self):
        p = TransformerParams.attention_only(np.eye(3), B=np.eye(3))
        mu = EmpiricalMeasure.dirac(e(0))
        with pytest.raises(ValueError):
            vector_field(mu, p, AttentionMode.MEAN, e(1))


class TestIntegrate:
    def test_zero_schedule_is_identity(self):
        rng = np.random.default_rng(3)
        measures = [EmpiricalMeasure(random_unit_vectors(5, 3, rng)) for _ in range(3)]
        sched = ParamSchedule.from_params([(1.0, TransformerParams.zero(3))])
        res = integrate(measures, sched, AttentionMode.FULL, step=1e-2)
        for m0, m1 in zip(measures, res.final):
            assert np.allclose(m0.points, m1.points, atol=1e-15)

    def test_tanh_oracle(self):
        # Single particle under P_x omega: c(t) = tanh(t + artanh c0).
        omega = e(2)
        sched = ParamSchedule.from_params([(5.0, drift_params(omega))])
        x0 = unit(np.array([0.6, 0.5, -0.4]))
        c0 = float(np.dot(x0, omega))
        res = integrate(
            [EmpiricalMeasure.dirac(x0)], sched, AttentionMode.FULL,
            step=1e-3, record_stride=100,
        )
        for t, frame in zip(res.times, res.trajectory[0]):
            expected = np.tanh(t + np.arctanh(c0))
            assert float(frame[0] @ omega) == pytest.approx(expected, abs=1e-6)

    def test_forward_backward_roundtrip(self):
        rng = np.random.default_rng(4)
        cloud = EmpiricalMeasure(random_unit_vectors(16, 3, rng))
        sched = ParamSchedule.from_params(
            [(0.4, random_params(rng, 3)), (0.3, random_params(rng, 3)), (0.3, random_params(rng, 3))]
        )
        fwd = integrate([cloud], sched, AttentionMode.FULL, step=1e-3)
        back = integrate(fwd.final, sched, AttentionMode.FULL, step=1e-3,
                         direction=Direction.BACKWARD)
        err = np.max(np.linalg.norm(back.final[0].points - cloud.points, axis=1))
        assert err <= 1e-6

    def test_norm_drift_bound(self):
        rng = np.random.default_rng(5)
        cloud = EmpiricalMeasure(random_unit_vectors(12, 4, rng))
        sched = ParamSchedule.from_params([(2.0, random_params(rng, 4))])
        res = integrate([cloud], sched, AttentionMode.FULL, step=1e-3)
        assert res.diagnostics.max_norm_drift <= 1e-8
        assert res.diagnostics.max_tangency_violation <= 1e-12

    def test_permutation_equivariance_bit_exact(self):
        rng = np.random.default_rng(6)
        pts = random_unit_vectors(7, 3, rng)
        w = rng.dirichlet(np.ones(7))
        perm = rng.permutation(7)
        sched = ParamSchedule.from_params([(0.5, random_params(rng, 3))])
        res_a = integrate([EmpiricalMeasure(pts, w)], sched, AttentionMode.FULL, step=1e-2)
        res_b = integrate([EmpiricalMeasure(pts[perm], w[perm])], sched, AttentionMode.FULL, step=1e-2)
        assert np.array_equal(res_a.final[0].points[perm], res_b.final[0].points)

    def test_rotation_equivariance_attention_dynamics(self):
        # Conjugating V and B rotates attention trajectories.  (Componentwise
        # ReLU does not commute with rotations, so the perceptron term is
        # excluded; the clustering dynamics this property protects is
        # attention-only.)
        rng = np.random.default_rng(7)
        R = rotation_aligning(unit(np.array([1.0, 1.0, 0.0])), e(2))
        pts = random_unit_vectors(6, 3, rng)
        V = rng.standard_normal((3, 3))
        B = rng.standard_normal((3, 3))
        sched = ParamSchedule.from_params([(1.0, TransformerParams.attention_only(V, B))])
        sched_rot = ParamSchedule.from_params(
            [(1.0, TransformerParams.attention_only(R @ V @ R.T, R @ B @ R.T))]
        )
        res = integrate([EmpiricalMeasure(pts)], sched, AttentionMode.FULL, step=1e-3)
        res_rot = integrate([EmpiricalMeasure(pts @ R.T)], sched_rot, AttentionMode.FULL, step=1e-3)
        assert np.max(np.abs(res.final[0].points @ R.T - res_rot.final[0].points)) <= 1e-6

    def test_measures_do_not_interact(self):
        rng = np.random.default_rng(8)
        a = EmpiricalMeasure(random_unit_vectors(5, 3, rng))
        b1 = EmpiricalMeasure(random_unit_vectors(4, 3, rng))
        b2 = EmpiricalMeasure(random_unit_vectors(4, 3, rng))
        sched = ParamSchedule.from_params([(0.7, random_params(rng, 3))])
        for mode in (AttentionMode.FULL, AttentionMode.MEAN):
            arg = sched
            if mode is AttentionMode.MEAN:
                p = sched.segments[0].params
                arg = ParamSchedule.from_params(
                    [(0.7, TransformerParams(p.V, np.zeros((3, 3)), p.W, p.U, p.b))]
                )
            r1 = integrate([a, b1], arg, mode, step=1e-2)
            r2 = integrate([a, b2], arg, mode, step=1e-2)
            assert np.array_equal(r1.final[0].points, r2.final[0].points)

    def test_step_larger_than_segment_rejected(self):
        sched = ParamSchedule.from_params([(0.1, TransformerParams.zero(3))])
        with pytest.raises(ValueError):
            integrate([EmpiricalMeasure.dirac(e(0))], sched, step=0.2)

    def test_nan_detection_names_segment(self):
        bad = TransformerParams(np.full((3, 3), np.nan), np.zeros((3, 3)),
                                np.zeros((3, 3)), np.zeros((3, 3)), np.zeros(3))
        sched = ParamSchedule.from_params([(0.1, bad)])
        with pytest.raises(RuntimeError, match="segment 0"):
            integrate([EmpiricalMeasure.dirac(e(0))], sched, AttentionMode.FULL, step=1e-2)


class TestFlowMap:
    def test_requires_perceptron_only(self):
        sched = ParamSchedule.from_params([(1.0, TransformerParams.attention_only(np.eye(3)))])
        with pytest.raises(ValueError):
            flow_map(sched)

    def test_zero_schedule_identity(self):
        sched = ParamSchedule.from_params([(1.0, TransformerParams.zero(3))])
        f = flow_map(sched, step=1e-2)
        x = unit(np.array([0.1, -0.7, 0.7]))
        assert np.allclose(f(x), x)

    def test_roundtrip_through_reversal(self):
        rng = np.random.default_rng(9)
        z = np.zeros((3, 3))
        pieces = []
        for _ in range(3):
            W = rng.standard_normal((3, 3))
            U = rng.standard_normal((3, 3))
            b = rng.standard_normal(3)
            pieces.append((0.3, TransformerParams(z, z, W, U, b)))
        sched = ParamSchedule.from_params(pieces)
        fwd = flow_map(sched, step=1e-3)
        back = flow_map(sched.reversed(), step=1e-3)
        pts = random_unit_vectors(1000, 3, rng)
        out = back(fwd(pts))
        assert np.max(np.linalg.norm(out - pts, axis=1)) <= 1e-6

    def test_composes_with_pushforward(self):
        rng = np.random.default_rng(10)
        omega = e(2)
        sched = ParamSchedule.from_params([(1.0, drift_params(omega))])
        f = flow_map(sched, step=1e-3)
        mu = EmpiricalMeasure(random_unit_vectors(6, 3, rng))
        out = pushforward(mu, f)
        assert np.all(out.points @ omega > mu.points @ omega)


class TestScheduleAlgebra:
    def test_tiling_validation(self):
        from sphereflow.dynamics import Segment
        with pytest.raises(ValueError):
            ParamSchedule((Segment(0.0, 1.0, TransformerParams.zero(3)),
                           Segment(1.5, 2.0, TransformerParams.zero(3))), 2.0)

    def test_switch_count(self):
        p = TransformerParams.zero(3)
        assert ParamSchedule.empty().switch_count == 0
        assert ParamSchedule.from_params([(1.0, p)]).switch_count == 0
        assert ParamSchedule.from_params([(1.0, p), (1.0, p)]).switch_count == 1

    def test_rescaling_invariance(self):
        # Halving T while doubling V and W reproduces the endpoint.
        rng = np.random.default_rng(11)
        z = np.zeros((3, 3))
        W = rng.standard_normal((3, 3))
        U = rng.standard_normal((3, 3))
        b = rng.standard_normal(3)
        sched = ParamSchedule.from_params([(1.0, TransformerParams(z, z, W, U, b))])
        half = sched.rescaled(0.5)
        assert half.horizon == pytest.approx(0.5)
        assert np.allclose(half.segments[0].params.W, 2.0 * W)
        cloud = EmpiricalMeasure(random_unit_vectors(10, 3, rng))
        a = integrate([cloud], sched, AttentionMode.MEAN, step=1e-3).final[0]
        bb = integrate([cloud], half, AttentionMode.MEAN, step=5e-4).final[0]
        assert np.max(np.linalg.norm(a.points - bb.points, axis=1)) <= 1e-6
