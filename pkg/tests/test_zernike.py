"""Zernike modes, Noll indexing and the inter-mode covariance."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from turbsim import zernike
from oracles import NOLL_TABLE, noll_entry


@pytest.fixture(scope="module")
def oracle_matrix():
    import oracles
    return oracles.noll_matrix()


@pytest.mark.parametrize("j, nm", list(NOLL_TABLE.items()))
def test_noll_to_nm_table(j, nm):
    assert zernike.noll_to_nm(j) == nm


@given(st.integers(1, 300))
def test_noll_roundtrip(j):
    assert zernike.nm_to_noll(*zernike.noll_to_nm(j)) == j


@pytest.mark.parametrize("bad", [0, -3])
def test_noll_index_rejects_nonpositive(bad):
    with pytest.raises(ValueError):
        zernike.noll_to_nm(bad)


def test_invalid_nm_rejected():
    with pytest.raises(ValueError):
        zernike.nm_to_noll(2, 1)


def _gram_error(resolution):
    grid = zernike.PupilGrid.build(resolution)
    z = zernike.mode_stack(range(2, 37), grid)
    return np.abs(z @ z.T / grid.n_inside - np.eye(35)).max()


def test_modes_orthonormal_on_grid():
    # residual comes from the staircase disk edge and shrinks with resolution
    e256, e512 = _gram_error(256), _gram_error(512)
    assert e256 < 5e-3
    assert e512 < 0.6 * e256


def test_known_mode_shapes():
    grid = zernike.PupilGrid.build(64)
    m = grid.mask
    tip = zernike.evaluate_mode(zernike.noll_to_nm(2), grid)
    np.testing.assert_allclose(tip[m], 2 * grid.x[m], atol=1e-12)
    defocus = zernike.evaluate_mode((2, 0), grid)
    np.testing.assert_allclose(defocus[m], np.sqrt(3) * (2 * grid.rho[m] ** 2 - 1), atol=1e-12)
    assert np.all(defocus[~m] == 0)


def test_tilt_variance_literature_value():
    # widely quoted 0.449 (D/r0)^{5/3} per tilt axis
    assert zernike.noll_pair_covariance(2, 2) == pytest.approx(0.4489, abs=5e-4)


def test_covariance_matches_quadrature_oracle(oracle_matrix):
    cov = zernike.noll_covariance(33, 1.0)
    rel = np.linalg.norm(cov.matrix - oracle_matrix) / np.linalg.norm(oracle_matrix)
    assert rel < 1e-6


@pytest.mark.parametrize("j1, j2", [(4, 11), (5, 13), (7, 17), (9, 19), (22, 11)])
def test_nonzero_cross_terms_match_oracle(j1, j2):
    assert zernike.noll_pair_covariance(j1, j2) == pytest.approx(noll_entry(j1, j2), rel=1e-6)


@pytest.mark.parametrize("j1, j2", [(4, 5), (5, 6), (7, 8), (4, 12), (12, 13)])
def test_structural_zeros(j1, j2):
    assert zernike.noll_pair_covariance(j1, j2) == 0.0


@given(st.floats(0.1, 5.0), st.floats(0.1, 5.0))
@settings(max_examples=20, deadline=None)
def test_covariance_scales_as_five_thirds(d1, d2):
    c1 = zernike.noll_covariance(33, d1).matrix
    c2 = zernike.noll_covariance(33, d2).matrix
    np.testing.assert_allclose(c2, c1 * (d2 / d1) ** (5 / 3), rtol=1e-12, atol=0)


def test_cholesky_reconstructs():
    cov = zernike.noll_covariance(33, 2.0)
    assert cov.jitter == 0.0
    np.testing.assert_allclose(cov.cholesky @ cov.cholesky.T, cov.matrix, rtol=0, atol=1e-14)
    assert np.all(np.linalg.eigvalsh(cov.matrix) > 0)


def test_cholesky_jitter_ladder_on_singular_psd():
    v = np.array([[1.0, 2.0, 3.0]])
    singular = v.T @ v
    factor, eps = zernike.cholesky_factor(singular)
    assert eps > 0
    np.testing.assert_allclose(factor @ factor.T, singular, atol=1e-7)


def test_cholesky_rejects_indefinite():
    with pytest.raises(zernike.FactorizationError, match="min eigenvalue"):
        zernike.cholesky_factor(np.diag([1.0, -1.0]))


def test_covariance_rejects_bad_strength():
    with pytest.raises(ValueError):
        zernike.noll_covariance(33, 0.0)


def test_dump_is_readable(tmp_path):
    cov = zernike.noll_covariance(33, 1.5)
    path = tmp_path / "cov.txt"
    cov.dump(path)
    text = path.read_text().split("# cholesky\n")
    m = np.loadtxt(text[0].splitlines()[2:])
    np.testing.assert_array_equal(m, cov.matrix)


def test_cholesky_hand_checked():
    f, eps = zernike.cholesky_factor(np.eye(4))
    np.testing.assert_array_equal(f, np.eye(4))
    f, eps = zernike.cholesky_factor(np.array([[4.0, 2.0], [2.0, 3.0]]))
    np.testing.assert_allclose(f, [[2.0, 0.0], [1.0, np.sqrt(2.0)]], atol=1e-15)
    assert eps == 0.0


def test_covariance_symmetric():
    m = zernike.noll_covariance(33, 1.0).matrix
    np.testing.assert_array_equal(m, m.T)
