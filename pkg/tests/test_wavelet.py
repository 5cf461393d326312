"""
Tests for wavelet.py
====================
Transform correctness: reconstruction, orthonormality, vanishing moments,
indexing and surface projection.
"""

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from config import ValidationError, WaveletConfig
from wavelet import (
    WaveletSpec,
    build_operator,
    dwt_rows,
    idwt_rows,
    make_spec,
    max_levels,
    project_surface,
    project_surfaces,
)


def _levels_for(length: int, cap: int = 6) -> int:
    padded = 1 << (length - 1).bit_length()
    return max(1, min(cap, padded.bit_length() - 2))


# ============================================================================
# TEST: WaveletSpec and build_operator
# ============================================================================

class TestBuildOperator:
    """Spec validation and the decomposition-depth check"""

    def test_haar_matrix_is_orthonormal(self):
        """Test Haar on length 4 with one level gives a 4x4 orthonormal matrix"""
        op = build_operator(WaveletSpec(original_length=4, vanishing_moments=1, levels=1))
        assert op.matrix.shape == (4, 4)
        assert np.max(np.abs(op.matrix @ op.matrix.T - np.eye(4))) < 1e-12

    def test_default_grid_pads_to_128(self):
        """Test db4 with six levels on 90 points pads to 128"""
        op = build_operator(WaveletSpec(original_length=90, vanishing_moments=4, levels=6))
        assert op.padded_length == 128
        assert op.spec.coarse_length == 2

    def test_too_many_levels_rejected(self):
        """Test ten levels on 90 points leaves too short a coarse level"""
        with pytest.raises(ValidationError) as exc_info:
            build_operator(WaveletSpec(original_length=90, vanishing_moments=4, levels=10))
        assert "too deep" in str(exc_info.value)
        assert "at most 6 level(s) for 90 points" in str(exc_info.value)

    @pytest.mark.parametrize("length,deepest", [(8, 2), (16, 3), (90, 6), (128, 6)])
    def test_deepest_admissible_levels(self, length, deepest):
        """Test max_levels for db4 is accepted and one more level is not"""
        assert max_levels(length, 4) == deepest
        build_operator(WaveletSpec(original_length=length, vanishing_moments=4, levels=deepest))
        with pytest.raises(ValidationError):
            build_operator(WaveletSpec(original_length=length, vanishing_moments=4, levels=deepest + 1))

    def test_toy_grid_message_names_depth(self):
        """Test the default depth on a 16-point grid suggests 3 levels"""
        with pytest.raises(ValidationError) as exc_info:
            build_operator(WaveletSpec(original_length=16))
        assert "use at most 3 level(s) for 16 points" in str(exc_info.value)

    def test_filter_longer_than_any_grid(self):
        """Test db10 on 4 points suggests a shorter filter"""
        with pytest.raises(ValidationError) as exc_info:
            build_operator(WaveletSpec(original_length=4, vanishing_moments=10, levels=1))
        assert "fewer vanishing moments" in str(exc_info.value)

    def test_invalid_fields_rejected(self):
        """Test bad vanishing moments, levels and boundary"""
        with pytest.raises(ValidationError):
            WaveletSpec(original_length=10, vanishing_moments=0)
        with pytest.raises(ValidationError):
            WaveletSpec(original_length=10, levels=0)
        with pytest.raises(ValidationError):
            WaveletSpec(original_length=10, boundary="smooth")

    def test_make_spec_from_config(self):
        """Test config binding keeps every setting"""
        spec = make_spec(WaveletConfig(vanishing_moments=2, levels=3, boundary="periodic"), 50)
        assert (spec.original_length, spec.vanishing_moments, spec.levels, spec.boundary) == (50, 2, 3, "periodic")
        assert spec.padded_length == 64


# ============================================================================
# TEST: forward / inverse transforms
# ============================================================================

class TestTransforms:
    """Row-wise DWT and inverse"""

    def test_haar_constant_row(self):
        """Test a constant row has only a scaling coefficient"""
        op = build_operator(WaveletSpec(original_length=4, vanishing_moments=1, levels=2))
        coeffs = dwt_rows(np.ones((1, 4)), op)
        np.testing.assert_allclose(coeffs, [[2.0, 0.0, 0.0, 0.0]], atol=1e-12)
        np.testing.assert_allclose(idwt_rows(coeffs, op), np.ones((1, 4)), atol=1e-12)

    def test_zero_matrix_maps_to_zero(self):
        """Test linearity on the zero matrix"""
        op = build_operator(WaveletSpec(original_length=90))
        assert np.all(dwt_rows(np.zeros((3, 90)), op) == 0.0)

    def test_linearity(self):
        """Test dwt(aX + bY) = a dwt(X) + b dwt(Y)"""
        rng = np.random.default_rng(4)
        op = build_operator(WaveletSpec(original_length=90))
        X, Y = rng.standard_normal((2, 6, 90))
        combined = dwt_rows(2.5 * X - 0.75 * Y, op)
        np.testing.assert_allclose(combined, 2.5 * dwt_rows(X, op) - 0.75 * dwt_rows(Y, op), atol=1e-10)

    @pytest.mark.parametrize("length", [16, 90, 128, 333])
    def test_energy_preserved(self, length):
        """Test zero padding plus an orthonormal transform keeps each row's norm"""
        rng = np.random.default_rng(length)
        op = build_operator(WaveletSpec(original_length=length, vanishing_moments=2, levels=_levels_for(length)))
        x = rng.standard_normal((8, length))
        np.testing.assert_allclose(np.linalg.norm(dwt_rows(x, op), axis=1), np.linalg.norm(x, axis=1), rtol=1e-10)

    def test_round_trip_random_lengths(self):
        """Test perfect reconstruction of 1000 random rows with lengths between 4 and 1024"""
        rng = np.random.default_rng(1)
        for length in rng.integers(4, 1025, size=100):
            length = int(length)
            op = build_operator(WaveletSpec(original_length=length, vanishing_moments=2, levels=_levels_for(length)))
            x = rng.standard_normal((10, length))
            assert np.max(np.abs(idwt_rows(dwt_rows(x, op), op) - x)) < 1e-10

    def test_round_trip_large_matrix(self):
        """Test a 400 x 1024 matrix with db4"""
        rng = np.random.default_rng(2)
        op = build_operator(WaveletSpec(original_length=1024, vanishing_moments=4, levels=6))
        x = rng.standard_normal((400, 1024))
        assert np.max(np.abs(idwt_rows(dwt_rows(x, op), op) - x)) < 1e-10

    @pytest.mark.parametrize("boundary", ["zero_pad", "periodic", "reflect"])
    def test_boundary_modes_reconstruct(self, boundary):
        """Test every padding mode recovers the original samples"""
        rng = np.random.default_rng(3)
        op = build_operator(WaveletSpec(original_length=90, boundary=boundary))
        x = rng.standard_normal((4, 90))
        assert np.max(np.abs(idwt_rows(dwt_rows(x, op), op) - x)) < 1e-10

    def test_dimension_mismatch(self):
        """Test wrong row lengths are rejected"""
        op = build_operator(WaveletSpec(original_length=90))
        with pytest.raises(ValidationError):
            dwt_rows(np.zeros((2, 91)), op)
        with pytest.raises(ValidationError):
            idwt_rows(np.zeros((2, 90)), op)


# ============================================================================
# TEST: explicit matrices
# ============================================================================

class TestMatrixPath:
    """Materialized basis matrices"""

    @pytest.fixture
    def op(self):
        return build_operator(WaveletSpec(original_length=90, vanishing_moments=4, levels=6))

    def test_orthonormal(self, op):
        """Test M M' = I"""
        assert np.max(np.abs(op.matrix @ op.matrix.T - np.eye(op.padded_length))) < 1e-10

    def test_fast_and_matrix_paths_agree(self, op):
        """Test dwt_rows equals the zero-padded row times M'"""
        rng = np.random.default_rng(4)
        x = rng.standard_normal((6, 90))
        padded = np.hstack([x, np.zeros((6, op.padded_length - 90))])
        assert np.max(np.abs(dwt_rows(x, op) - padded @ op.matrix.T)) < 1e-10

    def test_one_hot_inverse_is_basis_row(self, op):
        """Test the inverse of a one-hot vector is the truncated basis function"""
        for i in (0, 5, 64, 127):
            coeffs = np.zeros((1, op.padded_length))
            coeffs[0, i] = 1.0
            np.testing.assert_allclose(idwt_rows(coeffs, op)[0], op.matrix[i, :90], atol=1e-12)

    def test_vanishing_moments_annihilate_cubics(self):
        """Test interior db4 detail rows are orthogonal to a cubic"""
        op = build_operator(WaveletSpec(original_length=128, vanishing_moments=4, levels=3))
        grid = np.linspace(-1.0, 1.0, 128)
        cubic = 0.5 - grid + 2.0 * grid ** 2 + 0.7 * grid ** 3
        levels = op.level_of()
        checked = 0
        for row, level in zip(op.matrix, levels):
            if level == 0:
                continue
            support = np.flatnonzero(np.abs(row) > 1e-14)
            if support.max() - support.min() >= op.padded_length // 2:
                continue  # wraps around the periodized boundary
            assert abs(row @ cubic) < 1e-8
            checked += 1
        assert checked > 50


# ============================================================================
# TEST: indexing
# ============================================================================

class TestIndexing:
    """(j, k) <-> flat bookkeeping"""

    def test_bijection_and_level_sizes(self):
        """Test every flat index appears once and detail level j holds N / 2^j coefficients"""
        op = build_operator(WaveletSpec(original_length=90))
        index = op.index()
        assert [entry.flat for entry in index] == list(range(op.padded_length))
        assert len({(e.j, e.k) for e in index}) == op.padded_length
        levels = op.level_of()
        for j in range(1, 7):
            assert np.sum(levels == j) == op.padded_length // 2 ** j
        assert np.sum(levels == 0) == op.spec.coarse_length

    def test_flat_index_round_trip(self):
        """Test flat_index inverts index()"""
        op = build_operator(WaveletSpec(original_length=40, vanishing_moments=2, levels=3))
        for entry in op.index():
            assert op.flat_index(entry.j, entry.k) == entry.flat
        with pytest.raises(ValidationError):
            op.flat_index(9, 0)


# ============================================================================
# TEST: surface projection
# ============================================================================

class TestProjection:
    """beta = Phi' beta* Omega"""

    def test_fast_projection_matches_matrices(self):
        """Test the two-inverse projection equals the explicit matrix product"""
        rng = np.random.default_rng(5)
        phi = build_operator(WaveletSpec(original_length=20, vanishing_moments=2, levels=2))
        omega = build_operator(WaveletSpec(original_length=12, vanishing_moments=2, levels=2))
        beta_star = rng.standard_normal((phi.padded_length, omega.padded_length))
        expected = (phi.matrix.T @ beta_star @ omega.matrix)[:20, :12]
        np.testing.assert_allclose(project_surface(beta_star, phi, omega), expected, atol=1e-10)
        stacked = project_surfaces(beta_star[None], phi, omega)
        np.testing.assert_allclose(stacked[0], expected, atol=1e-10)

    def test_projection_inverts_forward_transform(self):
        """Test projecting the two-sided transform of a surface recovers it"""
        rng = np.random.default_rng(6)
        phi = build_operator(WaveletSpec(original_length=20, vanishing_moments=2, levels=2))
        omega = build_operator(WaveletSpec(original_length=12, vanishing_moments=2, levels=2))
        beta = rng.standard_normal((20, 12))
        beta_star = dwt_rows(dwt_rows(beta, omega).T, phi).T
        np.testing.assert_allclose(project_surface(beta_star, phi, omega), beta, atol=1e-10)

    def test_shape_mismatch(self):
        """Test wrong coefficient shapes are rejected"""
        phi = build_operator(WaveletSpec(original_length=20, vanishing_moments=2, levels=2))
        with pytest.raises(ValidationError):
            project_surface(np.zeros((3, 3)), phi, phi)
