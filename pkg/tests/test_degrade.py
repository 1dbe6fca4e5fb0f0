import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from turbsim import degrade, psf, randfield, zernike
from turbsim.degrade import WarpGrid
from oracles import dense_convolve


def field(h, w, tilt=(0.0, 0.0), high=None):
    zf = randfield.ZernikeField.zeros(h, w)
    zf.tilt[..., 0] = tilt[0]
    zf.tilt[..., 1] = tilt[1]
    if high is not None:
        zf.highorder[:] = high
    return zf


def test_tilt_to_warp_basics():
    assert not np.any(degrade.tilt_to_warp(field(4, 5), 2.0).dx)
    g = degrade.tilt_to_warp(field(4, 5, (0.3, -0.2)), 2.0)
    assert np.all(g.dx == 0.6) and np.all(g.dy == -0.4)
    g2 = degrade.tilt_to_warp(field(4, 5, (0.3, -0.2)), 4.0)
    np.testing.assert_array_equal(g2.dx, 2 * g.dx)
    with pytest.raises(ValueError):
        degrade.tilt_to_warp(field(4, 5), 0.0)


def test_warp_zero_is_bit_exact():
    img = np.random.default_rng(0).random((20, 30, 3))
    np.testing.assert_array_equal(degrade.warp_image(img, WarpGrid.zeros(20, 30)), img)


def test_warp_ramp_shift():
    ramp = np.tile(np.arange(16, dtype=float) * 0.05, (10, 1))
    out = degrade.warp_image(ramp, WarpGrid(np.ones((10, 16)), np.zeros((10, 16))))
    # dx = +1 samples one step to the right
    np.testing.assert_allclose(out[:, :-1], ramp[:, 1:], atol=1e-15)
    np.testing.assert_array_equal(out[:, -1], ramp[:, -1])  # edge clamp


def test_warp_fractional_bilinear_exact_on_linear():
    y, x = np.mgrid[0:12, 0:14].astype(float)
    plane = 0.3 * x + 0.2 * y
    g = WarpGrid(np.full((12, 14), 0.25), np.full((12, 14), 0.5))
    out = degrade.warp_image(plane, g)
    np.testing.assert_allclose(out[:-1, :-1], plane[:-1, :-1] + 0.3 * 0.25 + 0.2 * 0.5, atol=1e-14)


@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(0, 1))
@settings(max_examples=30, deadline=None)
def test_warp_constant_image(dx, dy, c):
    img = np.full((8, 9), c)
    out = degrade.warp_image(img, WarpGrid(np.full((8, 9), dx), np.full((8, 9), dy)))
    np.testing.assert_allclose(out, c, atol=1e-15)


def test_warp_shared_across_channels():
    rng = np.random.default_rng(1)
    gray = rng.random((16, 16))
    rgb = np.repeat(gray[..., None], 3, axis=-1)
    g = WarpGrid(rng.normal(0, 1.5, (16, 16)), rng.normal(0, 1.5, (16, 16)))
    out = degrade.warp_image(rgb, g)
    for c in range(3):
        np.testing.assert_array_equal(out[..., c], degrade.warp_image(gray, g))


def test_warp_dim_mismatch():
    with pytest.raises(ValueError):
        degrade.warp_image(np.zeros((5, 5)), WarpGrid.zeros(5, 6))


def test_convolve_reflect_matches_dense():
    rng = np.random.default_rng(2)
    img = rng.random((20, 23))
    k = rng.random((7, 7))
    np.testing.assert_allclose(degrade.convolve_reflect(img, k), dense_convolve(img, k), atol=1e-12)


def test_constant_weights_equal_single_kernel(small_basis):
    rng = np.random.default_rng(3)
    img = rng.random((32, 32))
    w = rng.normal(0, 0.01, small_basis.rank)
    weights = np.broadcast_to(w[:, None, None], (small_basis.rank, 32, 32))
    for size in (33, 15):
        out = degrade.spatially_varying_blur(img, small_basis, weights, size)
        mean, kernels = small_basis.resized(size)
        combined = mean + np.tensordot(w, kernels, 1)
        np.testing.assert_allclose(out, dense_convolve(img, combined), atol=1e-5)


def test_zero_weights_use_mean_kernel(small_basis):
    img = np.random.default_rng(4).random((24, 24, 3))
    out = degrade.spatially_varying_blur(img, small_basis, np.zeros((small_basis.rank, 24, 24)), 21)
    mean, _ = small_basis.resized(21)
    np.testing.assert_allclose(out, degrade.convolve_reflect(img, mean), atol=1e-13)


def test_constant_image_preserved(small_basis):
    rng = np.random.default_rng(5)
    weights = rng.normal(0, 0.02, (small_basis.rank, 40, 40))
    out = degrade.spatially_varying_blur(np.full((40, 40), 0.37), small_basis, weights, 33)
    # every basis kernel integrates to ~0, the mean kernel to 1
    assert np.abs(out - 0.37).max() < 1e-6


def test_weights_layout_and_rank_checks(small_basis):
    img = np.zeros((16, 16))
    hwk = np.zeros((16, 16, small_basis.rank))
    out = degrade.spatially_varying_blur(img, small_basis, hwk, 9)
    assert out.shape == (16, 16)
    with pytest.raises(ValueError):
        degrade.spatially_varying_blur(img, small_basis, np.zeros((3, 16, 16)), 9)


def test_basis_weights_match_direct_projection(small_basis):
    high = np.random.default_rng(6).normal(0, 0.3, (5, 7, 33))
    w = degrade.basis_weights(high, small_basis)
    np.testing.assert_allclose(w[:, 2, 3], psf.project_to_basis(high[2, 3], small_basis), atol=1e-14)


def test_spatially_varying_against_per_pixel_oracle(small_basis):
    """Per-pixel dense evaluation with the fast-path kernel of every pixel."""
    rng = np.random.default_rng(7)
    h = w = 18
    img = rng.random((h, w))
    cov = zernike.noll_covariance(33, 2.0)
    # slowly varying aberrations across the frame
    base = rng.standard_normal((2, 33)) @ cov.cholesky.T
    t = np.linspace(0, 1, h * w).reshape(h, w, 1)
    high = (1 - t) * base[0] + t * base[1]
    weights = degrade.basis_weights(high, small_basis)
    out = degrade.spatially_varying_blur(img, small_basis, weights, 9)
    mean, kernels = small_basis.resized(9)
    pad = np.pad(img, 4, mode="reflect")
    for y, x in [(0, 0), (5, 11), (17, 17), (9, 3)]:
        k = mean + np.tensordot(weights[:, y, x], kernels, 1)
        patch = pad[y:y + 9, x:x + 9][::-1, ::-1]
        assert out[y, x] == pytest.approx((patch * k).sum(), abs=1e-12)


def test_fast_blur_close_to_exact_kernels(basis_d2):
    rng = np.random.default_rng(8)
    img = rng.random((24, 24))
    cov = zernike.noll_covariance(33, 2.0)
    a = rng.standard_normal(33) @ cov.cholesky.T
    high = np.broadcast_to(a, (24, 24, 33))
    out = degrade.spatially_varying_blur(img, basis_d2, degrade.basis_weights(high, basis_d2), 33)
    exact = dense_convolve(img, psf.phase_to_psf(a).values)
    # bounded by the kernel error times the image range
    kernel_err = np.abs(basis_d2.reconstruct(psf.project_to_basis(a, basis_d2)) - psf.phase_to_psf(a).values).sum()
    assert np.abs(out - exact).max() <= kernel_err + 1e-5


def test_add_noise():
    img = np.full((512, 512), 0.5)
    same = degrade.add_noise(img, 0.0, np.random.default_rng(0))
    np.testing.assert_array_equal(same, img)
    noisy = degrade.add_noise(img, 4e-4, np.random.default_rng(1))
    assert (noisy - img).var() == pytest.approx(4e-4, rel=0.1)
    again = degrade.add_noise(img, 4e-4, np.random.default_rng(1))
    np.testing.assert_array_equal(noisy, again)
    assert noisy.min() >= 0 and noisy.max() <= 1
    with pytest.raises(ValueError):
        degrade.add_noise(img, -1e-3, np.random.default_rng(0))


@pytest.fixture
def sample_profile(profile_d2):
    return profile_d2.replace(noise_variance=0.0, kernel_size=15)


def random_field(h, w, seed):
    rng = np.random.default_rng(seed)
    zf = randfield.ZernikeField.zeros(h, w)
    zf.tilt[:] = rng.normal(0, 0.3, (h, w, 2))
    zf.highorder[:] = rng.normal(0, 0.1, (h, w, 33))
    return zf


def test_degrade_order_blur_then_warp(small_basis, sample_profile):
    clean = np.random.default_rng(9).random((24, 28, 3))
    zf = random_field(24, 28, 10)
    blur_only, degraded = degrade.degrade_frame(clean, zf, small_basis, sample_profile, np.random.default_rng(0))
    np.testing.assert_array_equal(degraded, degrade.warp_image(blur_only, degrade.tilt_to_warp(zf, sample_profile.tilt_gain)))
    _, swapped = degrade.degrade_frame(clean, zf, small_basis, sample_profile, np.random.default_rng(0), order="warp-blur")
    assert np.abs(swapped - degraded).max() > 1e-4


def test_degrade_zero_field_is_diffraction_blur(small_basis, sample_profile):
    clean = np.random.default_rng(11).random((20, 20))
    blur_only, degraded = degrade.degrade_frame(
        clean, field(20, 20), small_basis, sample_profile, np.random.default_rng(0)
    )
    p0 = psf.resize_kernel(psf.phase_to_psf(np.zeros(33)), 15).values
    np.testing.assert_allclose(blur_only, dense_convolve(clean, p0), atol=1e-12)
    np.testing.assert_array_equal(degraded, blur_only)


def test_degrade_deterministic(small_basis, sample_profile):
    prof = sample_profile.replace(noise_variance=1e-4)
    clean = np.random.default_rng(12).random((16, 16))
    zf = random_field(16, 16, 13)
    a = degrade.degrade_frame(clean, zf, small_basis, prof, np.random.default_rng(5))
    b = degrade.degrade_frame(clean, zf, small_basis, prof, np.random.default_rng(5))
    np.testing.assert_array_equal(a[1], b[1])


def test_gray_rgb_channels_identical(small_basis, sample_profile):
    gray = np.random.default_rng(14).random((16, 16))
    rgb = np.repeat(gray[..., None], 3, axis=-1)
    zf = random_field(16, 16, 15)
    _, out = degrade.degrade_frame(rgb, zf, small_basis, sample_profile, np.random.default_rng(0))
    np.testing.assert_array_equal(out[..., 0], out[..., 1])
    np.testing.assert_array_equal(out[..., 1], out[..., 2])


def test_degrade_rejects_size_mismatch(small_basis, sample_profile):
    with pytest.raises(ValueError):
        degrade.degrade_frame(np.zeros((10, 10)), field(10, 12), small_basis, sample_profile, np.random.default_rng(0))
    with pytest.raises(ValueError):
        degrade.degrade_frame(np.zeros((10, 10)), field(10, 10), small_basis, sample_profile,
                              np.random.default_rng(0), order="noise-first")
