"""Representation probes: Fréchet distance, spectrum measures, CKA, summaries."""
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geoloop.errors import DimensionMismatchError, ValidationError
from geoloop import rep_metrics as rm


def random_psd(rng, d, scale=1.0):
    a = rng.normal(0, scale, (d, d))
    return a @ a.T + 1e-9 * np.eye(d)


class TestFrechet:
    def test_identical_summaries(self):
        g = rm.GaussianSummary([1.0, 2.0], [[2.0, 0.5], [0.5, 1.0]])
        assert rm.frechet_distance(g, g) == pytest.approx(0.0, abs=1e-9)

    def test_point_masses(self):
        a = rm.GaussianSummary([0.0, 0.0], np.zeros((2, 2)))
        b = rm.GaussianSummary([3.0, 4.0], np.zeros((2, 2)))
        assert rm.frechet_distance(a, b) == pytest.approx(25.0)

    def test_commuting_diagonal_closed_form(self):
        # tr(S1 + S2 - 2 sqrt(S1 S2)) = (1+4) + (4+1) - 2*(2+2) = 2
        a = rm.GaussianSummary([0.0, 0.0], np.diag([1.0, 4.0]))
        b = rm.GaussianSummary([0.0, 0.0], np.diag([4.0, 1.0]))
        assert rm.frechet_distance(a, b) == pytest.approx(2.0, abs=1e-9)

    def test_dimension_mismatch(self):
        a = rm.GaussianSummary([0.0], [[1.0]])
        b = rm.GaussianSummary([0.0, 0.0], np.eye(2))
        with pytest.raises(DimensionMismatchError):
            rm.frechet_distance(a, b)

    def test_asymmetric_cov_rejected(self):
        with pytest.raises(ValidationError):
            rm.GaussianSummary([0.0, 0.0], [[1.0, 0.5], [0.1, 1.0]])

    def test_non_psd_rejected(self):
        with pytest.raises(ValidationError):
            rm.GaussianSummary([0.0, 0.0], [[1.0, 2.0], [2.0, 1.0]])

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 8))
    def test_symmetry_and_separation(self, seed, d):
        rng = np.random.default_rng(seed)
        a = rm.GaussianSummary(rng.normal(0, 1, d), random_psd(rng, d))
        b = rm.GaussianSummary(rng.normal(0, 1, d), random_psd(rng, d))
        dab = rm.frechet_distance(a, b)
        dba = rm.frechet_distance(b, a)
        assert dab == pytest.approx(dba, rel=1e-8, abs=1e-8)
        assert dab >= 0.0
        assert rm.frechet_distance(a, a) == pytest.approx(0.0, abs=1e-8)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000), st.integers(2, 64))
    def test_matrix_sqrt_reconstructs(self, seed, d):
        rng = np.random.default_rng(seed)
        mat = random_psd(rng, d)
        root = rm.psd_sqrt(mat)
        err = np.linalg.norm(root @ root - mat) / np.linalg.norm(mat)
        assert err < 1e-8


class TestEffectiveDims:
    def test_isotropic(self):
        dims = rm.effective_dims(rm.Spectrum([1.0, 1.0, 1.0, 1.0]))
        assert dims["effrank"] == pytest.approx(4.0)
        assert dims["participation_ratio"] == pytest.approx(4.0)

    def test_rank_one(self):
        dims = rm.effective_dims(rm.Spectrum([1.0, 0.0, 0.0]))
        assert dims["effrank"] == pytest.approx(1.0)
        assert dims["participation_ratio"] == pytest.approx(1.0)

    def test_two_to_one_spectrum(self):
        # Frozen from the scalar entropy oracle: exp(H(2/3, 1/3)), 9/5.
        dims = rm.effective_dims(rm.Spectrum([2.0, 1.0]))
        assert dims["effrank"] == pytest.approx(1.8898815748423097, abs=1e-12)
        assert dims["participation_ratio"] == pytest.approx(1.8)

    def test_all_zero_rejected(self):
        with pytest.raises(ValidationError):
            rm.effective_dims(rm.Spectrum([0.0, 0.0]))

    def test_unsorted_rejected(self):
        with pytest.raises(ValidationError):
            rm.Spectrum([1.0, 2.0])

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 10),
           st.floats(0.1, 100.0))
    def test_scale_invariance_and_range(self, seed, n, scale):
        rng = np.random.default_rng(seed)
        lam = np.sort(rng.random(n) + 1e-6)[::-1]
        dims = rm.effective_dims(rm.Spectrum(lam))
        scaled = rm.effective_dims(rm.Spectrum(lam * scale))
        assert dims["effrank"] == pytest.approx(scaled["effrank"], rel=1e-9)
        assert dims["participation_ratio"] == pytest.approx(
            scaled["participation_ratio"], rel=1e-9)
        for key in ("effrank", "participation_ratio"):
            assert 1.0 - 1e-9 <= dims[key] <= n + 1e-9


class TestLinearCka:
    def test_self_similarity(self):
        rng = np.random.default_rng(0)
        x = rng.normal(0, 1, (12, 5))
        assert rm.linear_cka(x, x) == pytest.approx(1.0, abs=1e-10)

    def test_isotropic_scaling(self):
        rng = np.random.default_rng(1)
        x = rng.normal(0, 1, (10, 4))
        assert rm.linear_cka(x, -2.5 * x) == pytest.approx(1.0, abs=1e-10)

    def test_orthogonal_invariance(self):
        rng = np.random.default_rng(2)
        x = rng.normal(0, 1, (15, 6))
        q, _ = np.linalg.qr(rng.normal(0, 1, (6, 6)))
        assert rm.linear_cka(x, x @ q) == pytest.approx(1.0, abs=1e-9)

    def test_orthogonal_column_spaces(self):
        x = np.array([[1.0, -1.0], [-1.0, 1.0], [1.0, 1.0], [-1.0, -1.0]])
        y = np.array([[1.0], [1.0], [-1.0], [-1.0]])
        # Centred columns are orthogonal by construction here.
        x = x - x.mean(axis=0)
        y = y - y.mean(axis=0)
        if abs(float((y.T @ x).sum())) < 1e-12:
            assert rm.linear_cka(x, y) == pytest.approx(0.0, abs=1e-12)

    def test_zero_matrix_rejected(self):
        with pytest.raises(ValidationError):
            rm.linear_cka(np.zeros((4, 3)), np.ones((4, 2)))


class TestSummariseHidden:
    def test_single_token_normalisation(self):
        states = np.array([[[3.0, 4.0]]])
        mask = np.array([[True]])
        measure, dropped = rm.summarise_hidden(states, mask)
        assert dropped == 0
        assert measure.points[0] == pytest.approx([0.6, 0.8])

    def test_mean_idempotence(self):
        states = np.array([[[3.0, 4.0], [3.0, 4.0]]])
        mask = np.array([[True, True]])
        measure, _ = rm.summarise_hidden(states, mask)
        assert measure.points[0] == pytest.approx([0.6, 0.8])

    def test_mean_then_normalise(self):
        states = np.array([[[1.0, 0.0], [0.0, 1.0]]])
        mask = np.array([[True, True]])
        measure, _ = rm.summarise_hidden(states, mask)
        assert measure.points[0] == pytest.approx([1 / math.sqrt(2)] * 2)

    def test_empty_mask_dropped_with_warning(self):
        states = np.ones((2, 3, 4))
        mask = np.array([[True, True, False], [False, False, False]])
        with pytest.warns(UserWarning):
            measure, dropped = rm.summarise_hidden(states, mask)
        assert dropped == 1
        assert measure.size == 1


class TestGaussianFit:
    def test_unbiased_covariance(self):
        pts = np.array([[0.0, 0.0], [2.0, 0.0]])
        fit = rm.fit_gaussian(rm.EmpiricalMeasure(pts))
        assert fit.mean == pytest.approx([1.0, 0.0])
        assert fit.cov[0, 0] == pytest.approx(2.0)  # divide by B-1 = 1

    def test_needs_two_points(self):
        with pytest.raises(ValidationError):
            rm.fit_gaussian(rm.EmpiricalMeasure([[1.0, 2.0]]))


class TestMeasureCsv:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(3)
        pts = rng.normal(0, 1, (5, 3))
        pts /= np.linalg.norm(pts, axis=1, keepdims=True)
        measure = rm.EmpiricalMeasure(pts, normalised=True)
        path = tmp_path / "measure.csv"
        rm.write_measure_csv(measure, path)
        assert path.read_text().splitlines()[0] == "dim=3,normalised=True"
        back = rm.read_measure_csv(path)
        assert back.normalised
        assert np.array_equal(back.points, measure.points)
