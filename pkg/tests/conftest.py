import numpy as np
import pytest

from turbsim import correlation, params, psf

ACCEPTANCE_LINES = []


def record_acceptance(number, title, ok, detail):
    line = f"AC{number:02d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def cache_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("turbsim-cache")


@pytest.fixture(scope="session")
def lut(cache_dir):
    return correlation.load_or_build_lut(cache_dir)


@pytest.fixture(scope="session")
def profile_d2():
    return params.TurbulenceProfile(aperture_d=0.05, d_over_r0=2.0, distance=600.0, beta_highorder=0.1)


@pytest.fixture(scope="session")
def basis_d2(profile_d2):
    """Full-size fast-path basis: rank 100 from 2000 samples at D/r0 = 2."""
    return psf.build_psf_basis(profile_d2, 2000, 100, np.random.default_rng(20240))


@pytest.fixture(scope="session")
def small_basis(profile_d2):
    return psf.build_psf_basis(profile_d2, 300, 20, np.random.default_rng(7))
