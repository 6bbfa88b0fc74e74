"""Optimal transport: exact oracle, Sinkhorn solver, divergence, diagnostics."""
import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geoloop.errors import UnsupportedInstanceError, ValidationError
from geoloop import ot
from geoloop.rep_metrics import EmpiricalMeasure


def brute_force_w2(xa, xb):
    """Independent permutation-enumeration oracle (kept separate from ot.py)."""
    xa, xb = np.atleast_2d(xa), np.atleast_2d(xb)
    n = xa.shape[0]
    best = math.inf
    for perm in itertools.permutations(range(n)):
        cost = sum(float(np.sum((xa[i] - xb[j]) ** 2)) for i, j in enumerate(perm))
        best = min(best, cost)
    return best / n


def random_cloud(rng, n, d=2, offset=0.0):
    return EmpiricalMeasure(rng.normal(offset, 1.0, (n, d)))


class TestExactW2:
    def test_identical_clouds(self):
        m = EmpiricalMeasure([[0.0, 1.0], [2.0, 3.0]])
        assert ot.exact_w2_small(m, m) == pytest.approx(0.0)

    def test_singletons(self):
        a, b = EmpiricalMeasure([[0.0]]), EmpiricalMeasure([[3.0]])
        assert ot.exact_w2_small(a, b) == pytest.approx(9.0)

    def test_interleaved_points_prefer_monotone(self):
        a = EmpiricalMeasure([[0.0], [2.0]])
        b = EmpiricalMeasure([[1.0], [3.0]])
        assert ot.exact_w2_small(a, b) == pytest.approx(1.0)

    def test_size_limits(self):
        rng = np.random.default_rng(0)
        with pytest.raises(UnsupportedInstanceError):
            ot.exact_w2_small(random_cloud(rng, 11), random_cloud(rng, 11))
        with pytest.raises(UnsupportedInstanceError):
            ot.exact_w2_small(random_cloud(rng, 3), random_cloud(rng, 4))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.integers(2, 5))
    def test_matches_independent_enumeration(self, seed, n):
        rng = np.random.default_rng(seed)
        a, b = random_cloud(rng, n), random_cloud(rng, n)
        assert ot.exact_w2_small(a, b) == pytest.approx(
            brute_force_w2(a.points, b.points), rel=1e-12)


class TestEntropicOt:
    def test_forced_plan_singletons(self):
        a, b = EmpiricalMeasure([[0.0, 0.0]]), EmpiricalMeasure([[3.0, 4.0]])
        res = ot.entropic_ot(a, b, 0.5)
        assert res["value"] == pytest.approx(25.0, abs=1e-9)
        assert res["converged"]

    def test_self_coupling_value_vanishes_with_eps(self):
        rng = np.random.default_rng(1)
        m = random_cloud(rng, 4)
        hi = ot.entropic_ot(m, m, 1e-1)["value"]
        lo = ot.entropic_ot(m, m, 1e-3)["value"]
        assert lo < hi
        assert lo == pytest.approx(0.0, abs=1e-2)

    def test_two_point_instance_near_exact(self):
        a = EmpiricalMeasure([[0.0], [2.0]])
        b = EmpiricalMeasure([[1.0], [3.0]])
        res = ot.entropic_ot(a, b, 1e-3)
        assert res["value"] == pytest.approx(1.0, abs=1e-3)

    def test_plan_marginals(self):
        rng = np.random.default_rng(2)
        a, b = random_cloud(rng, 5), random_cloud(rng, 3, offset=1.0)
        # unequal sizes are fine for the solver (only the oracle needs equality)
        costs = ot.squared_distances(a.points, b.points)
        res = ot.entropic_ot(a, b, 1e-2, costs=costs)
        plan = res["plan"]
        assert plan.marginal_violation() < 1e-6
        assert res["converged"]

    def test_epsilon_must_be_positive(self):
        m = EmpiricalMeasure([[0.0]])
        with pytest.raises(ValidationError):
            ot.entropic_ot(m, m, 0.0)

    def test_violation_trace_decreases(self):
        rng = np.random.default_rng(3)
        a, b = random_cloud(rng, 6), random_cloud(rng, 6, offset=2.0)
        res = ot.entropic_ot(a, b, 1e-2)
        trace = res["violation_trace"]
        assert len(trace) >= 1
        diffs = np.diff(trace)
        assert np.all(diffs <= 1e-9)

    def test_log_domain_stability_small_eps(self):
        rng = np.random.default_rng(4)
        pts = rng.normal(0, 1, (6, 3))
        pts /= np.linalg.norm(pts, axis=1, keepdims=True)
        m1 = EmpiricalMeasure(pts, normalised=True)
        pts2 = rng.normal(0, 1, (6, 3))
        pts2 /= np.linalg.norm(pts2, axis=1, keepdims=True)
        m2 = EmpiricalMeasure(pts2, normalised=True)
        res = ot.entropic_ot(m1, m2, 1e-4)
        assert math.isfinite(res["value"])
        assert np.all(np.isfinite(res["plan"].plan))


class TestSinkhornDivergence:
    def test_self_divergence_zero(self):
        rng = np.random.default_rng(5)
        m = random_cloud(rng, 5)
        assert ot.sinkhorn_divergence(m, m, 1e-2)["value"] <= 1e-9

    def test_singleton_distance(self):
        a, b = EmpiricalMeasure([[0.0]]), EmpiricalMeasure([[2.0]])
        assert ot.sinkhorn_divergence(a, b, 1e-2)["value"] == pytest.approx(4.0, abs=1e-9)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.integers(2, 6))
    def test_symmetry(self, seed, n):
        rng = np.random.default_rng(seed)
        a, b = random_cloud(rng, n), random_cloud(rng, n, offset=1.0)
        sab = ot.sinkhorn_divergence(a, b, 1e-2)["value"]
        sba = ot.sinkhorn_divergence(b, a, 1e-2)["value"]
        assert abs(sab - sba) < 1e-9

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 10_000), st.integers(2, 6))
    def test_small_eps_matches_exact(self, seed, n):
        rng = np.random.default_rng(seed)
        a = random_cloud(rng, n)
        b = random_cloud(rng, n, offset=2.0)
        exact = ot.exact_w2_small(a, b)
        approx = ot.sinkhorn_divergence(a, b, 1e-3)["value"]
        assert approx == pytest.approx(exact, rel=5e-3)

    def test_position_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(6)
        a = random_cloud(rng, 4)
        b = random_cloud(rng, 4, offset=1.0)
        _, grad, _ = ot.sinkhorn_divergence_with_grad(a, b, 1e-2)
        h = 1e-5
        for i in range(a.size):
            for d in range(a.dim):
                pts = a.points.copy()
                pts[i, d] += h
                up = ot.sinkhorn_divergence(EmpiricalMeasure(pts), b, 1e-2)["value"]
                pts[i, d] -= 2 * h
                dn = ot.sinkhorn_divergence(EmpiricalMeasure(pts), b, 1e-2)["value"]
                fd = (up - dn) / (2 * h)
                assert grad[i, d] == pytest.approx(fd, rel=1e-3, abs=1e-6)


class TestRegulariser:
    def test_identical_measures(self):
        rng = np.random.default_rng(7)
        m = random_cloud(rng, 4)
        assert ot.ot_regulariser(m, m, 0.01, 0.12) == pytest.approx(0.0, abs=1e-11)

    def test_zero_weight_short_circuits(self):
        rng = np.random.default_rng(8)
        assert ot.ot_regulariser(random_cloud(rng, 3), random_cloud(rng, 3), 0.0, 0.12) == 0.0

    def test_empty_measure_warns_and_returns_zero(self):
        rng = np.random.default_rng(9)
        with pytest.warns(UserWarning):
            assert ot.ot_regulariser(None, random_cloud(rng, 3), 0.01, 0.12) == 0.0

    def test_orthogonal_unit_singletons(self):
        a = EmpiricalMeasure([[1.0, 0.0]], normalised=True)
        b = EmpiricalMeasure([[0.0, 1.0]], normalised=True)
        # Forced plan: S_eps = |x - y|^2 = 2, scaled by the weight.
        assert ot.ot_regulariser(a, b, 0.01, 0.12) == pytest.approx(0.02, abs=1e-9)

    def test_subsampling_deterministic(self):
        rng = np.random.default_rng(10)
        m = random_cloud(rng, 30)
        s1 = ot.subsample_indices(m.size, 10, 123)
        s2 = ot.subsample_indices(m.size, 10, 123)
        assert np.array_equal(s1, s2)
        assert len(np.unique(s1)) == 10


class TestOutputSpaceDiag:
    def test_identical_distributions(self):
        p = np.array([0.25, 0.25, 0.25, 0.25])
        assert ot.output_space_ot_diag(p, p, 4) == pytest.approx(0.0, abs=1e-6)

    def test_point_masses(self):
        p = np.zeros(10); p[3] = 1.0
        q = np.zeros(10); q[7] = 1.0
        assert ot.output_space_ot_diag(p, q, 4) == pytest.approx(16.0, abs=1e-9)

    def test_shift_by_two(self):
        p = np.array([0.5, 0.5, 0.0, 0.0])
        q = np.array([0.0, 0.0, 0.5, 0.5])
        assert ot.output_space_ot_diag(p, q, 4) == pytest.approx(4.0, abs=1e-2)

    def test_requires_positive_top_k(self):
        p = np.array([0.5, 0.5])
        with pytest.raises(ValidationError):
            ot.output_space_ot_diag(p, p, 0)


class TestPlanDump:
    def test_dense_dump(self, tmp_path):
        rng = np.random.default_rng(11)
        a, b = random_cloud(rng, 3), random_cloud(rng, 3)
        res = ot.entropic_ot(a, b, 1e-2)
        path = tmp_path / "plan.csv"
        ot.dump_plan_csv(res, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "format=dense"
        assert len(lines) == 1 + 3

    def test_summary_dump(self, tmp_path):
        rng = np.random.default_rng(12)
        a, b = random_cloud(rng, 110), random_cloud(rng, 110)
        res = ot.entropic_ot(a, b, 5e-2)
        path = tmp_path / "plan.csv"
        ot.dump_plan_csv(res, path)
        assert path.read_text().splitlines()[0] == "format=summary"
