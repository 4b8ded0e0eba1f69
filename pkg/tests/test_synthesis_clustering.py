"""Attention clustering toward a point mass.

Claims checked:
    - a single atom is already clustered (hitting time 0)
    - cap clouds contract with stepwise-nonincreasing diameter for B = 0
      and B = I, with finite hitting times
    - hitting times grow affinely in log(1/eps) (R^2 >= 0.99)
    - support outside an open hemisphere is rejected
"""

import numpy as np
import pytest

from sphereflow.geometry import geodesic_distance, unit
from sphereflow.measures import EmpiricalMeasure
from sphereflow.synthesis import SynthesisError, cluster_measure, synth_cluster_single


def e(i, d=3):
    v = np.zeros(d)
    v[i] = 1.0
    return v


def cap_cloud(rng, center, radius, n) -> EmpiricalMeasure:
    center = unit(center)
    pts = []
    while len(pts) < n:
        x = unit(center + radius * 0.6 * rng.standard_normal(center.shape[0]))
        if geodesic_distance(x, center) < radius:
            pts.append(x)
    return EmpiricalMeasure(np.asarray(pts))


def fit_r_squared(x, y):
    x = np.asarray(x)
    y = np.asarray(y)
    A = np.vstack([x, np.ones_like(x)]).T
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    ss_res = float(np.sum(resid**2))
    ss_tot = float(np.sum((y - np.mean(y)) ** 2))
    return coef, 1.0 - ss_res / ss_tot


class TestClusterSingle:
    def test_single_atom_hits_immediately(self):
        run = cluster_measure(EmpiricalMeasure.dirac(e(0)), stop_eps=1e-6)
        assert run.hitting_time == 0.0
        assert np.allclose(run.final.points[0], e(0))

    @pytest.mark.parametrize("logits", ["zero", "identity"])
    def test_cap_cloud_contracts_monotonically(self, logits):
        rng = np.random.default_rng(8)
        mu = cap_cloud(rng, e(0), 0.5, 32)
        B = np.zeros((3, 3)) if logits == "zero" else np.eye(3)
        run = cluster_measure(mu, B=B, stop_eps=1e-4)
        assert np.all(np.diff(run.diameters) <= 1e-9)
        assert np.isfinite(run.hitting_time)
        # Limit point stays inside the initial spread.
        limit = run.final.points[0]
        assert geodesic_distance(limit, e(0)) < 0.6

    def test_hitting_time_is_logarithmic_in_eps(self):
        rng = np.random.default_rng(9)
        mu = cap_cloud(rng, e(0), 0.5, 32)
        run = cluster_measure(mu, B=np.zeros((3, 3)), stop_eps=1e-4)
        eps_grid = [1e-1, 1e-2, 1e-3, 1e-4]
        times = [run.hitting_time_for(eps) for eps in eps_grid]
        coef, r2 = fit_r_squared(np.log(1.0 / np.asarray(eps_grid)), times)
        assert coef[0] > 0.0
        assert r2 >= 0.99

    def test_full_sphere_support_rejected(self):
        mu = EmpiricalMeasure(np.vstack([e(0), -e(0)]))
        with pytest.raises(SynthesisError, match="hemisphere"):
            cluster_measure(mu, stop_eps=0.1)

    def test_stopping_rule_exposed(self):
        params, stopped = synth_cluster_single(np.zeros((3, 3)), stop_eps=0.5)
        assert np.allclose(params.V, np.eye(3))
        assert not params.W.any()
        wide = EmpiricalMeasure(np.vstack([e(0), e(1)]))
        assert not stopped(wide)
        assert stopped(EmpiricalMeasure.dirac(e(0)))
