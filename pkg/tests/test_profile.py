import math

import numpy as np
import pytest

from cfselfsim.coefficients import rho_star
from cfselfsim.grid import Spectrum, make_grid, moment, project
from cfselfsim.operators import identity_test
from cfselfsim.profile import (
    ProfileConfig, build_self_similar, epsilon_sweep, integral_residual, remapped_profile, solve_profile,
    weak_residual,
)

from conftest import EPS, RHO_SMALL

QUICK = ProfileConfig(n_cells=64, s_max=3.0)


def test_converged_profile(profiles):
    cert = profiles(256)
    assert cert.stationary and cert.stationarity_residual < 1e-6
    assert moment(cert.phi, 1.0) == pytest.approx(RHO_SMALL, abs=1e-6)
    assert cert.max_weak_residual < 1e-3
    assert cert.integral_residual < 1e-2
    assert cert.flags == [] and cert.small_size_ok


def test_identity_residual_vanishes(ex1, mollified0):
    f = project(lambda x: np.exp(-x) * (2 + np.sin(x)), make_grid(1e-6, 1e3, 64))
    assert weak_residual(f, ex1, mollified0, [identity_test()])["x"] == pytest.approx(0.0, abs=1e-13)


def test_exponential_is_not_a_profile(ex1, mollified0):
    f = project(lambda x: RHO_SMALL * np.exp(-x), make_grid(1e-6, 1e3, 256))
    assert max(weak_residual(f, ex1, mollified0, rho=RHO_SMALL).values()) > 1e-2
    assert integral_residual(f, ex1, mollified0, RHO_SMALL).sup > 1e-2


def test_perturbed_profile_is_rejected(profiles, ex1, mollified0):
    phi = profiles(256).phi
    x = phi.grid.centers
    bent = phi.with_values(phi.values * (1 + 0.1 * np.sin(np.log(x))))
    assert max(weak_residual(bent, ex1, mollified0).values()) > 1e-3
    assert integral_residual(bent, ex1, mollified0).sup > 1e-2


def test_integral_residual_of_zero(ex1, mollified0):
    ir = integral_residual(Spectrum.zeros(make_grid(1e-6, 1e3, 32)), ex1, mollified0)
    assert ir.sup == 0.0 and ir.small_size_ok


def test_restart_from_converged_profile(profiles, ex1, power0):
    cert = profiles(256)
    again = solve_profile(ex1, power0, EPS, RHO_SMALL, cert.config, initial=cert.phi)
    assert again.stationary and again.s_final <= cert.config.snapshot_every
    for k, v in cert.weak_residuals.items():
        assert again.weak_residuals[k] == pytest.approx(v, rel=1e-3, abs=1e-9)


def test_single_member_sweep_has_no_pairs(ex1, power0):
    rep = epsilon_sweep(ex1, power0, RHO_SMALL, [0.05], QUICK)
    assert rep.distances == [] and len(rep.certificates) == 1


def test_sweep_requires_decreasing_eps(ex1, power0):
    with pytest.raises(ValueError, match="decreasing"):
        epsilon_sweep(ex1, power0, RHO_SMALL, [0.05, 0.1], QUICK)


def test_mass_above_threshold_is_flagged(ex1, power0):
    cert = solve_profile(ex1, power0, EPS, 0.5, ProfileConfig(n_cells=48, s_max=1.0))
    assert "rho_above_threshold" in cert.flags
    assert "rho_above_threshold" in cert.manifest_entries()["flags"]


def test_small_mass_profile_is_bounded(ex1, power0):
    rho = 0.01 * rho_star(ex1, power0)
    cert = solve_profile(ex1, power0, EPS, rho, ProfileConfig(n_cells=96))
    ratio = moment(cert.phi, ex1.lam) / rho
    assert math.isfinite(ratio) and ratio < 10.0
    assert moment(cert.phi, 1.0) == pytest.approx(rho, rel=1e-8)


# self-similar family

def test_self_similar_family(profiles):
    phi = profiles(256).phi
    f0 = build_self_similar(phi, 2.0, 0.0)
    assert np.array_equal(f0.values, phi.values)
    f1 = build_self_similar(phi, 2.0, 1.0)
    assert np.allclose(f1.values, 4.0 * phi.values, rtol=1e-14)
    assert np.allclose(f1.grid.edges, phi.grid.edges / 2.0, rtol=1e-14)
    assert moment(f1, 1.0) == pytest.approx(moment(phi, 1.0), rel=1e-13)


@pytest.mark.parametrize("lam", [1.5, 2.0])
def test_remapped_profile_keeps_mass(lam):
    phi = project(lambda x: 0.2 * np.exp(-x), make_grid(1e-6, 1e3, 64))
    assert moment(remapped_profile(phi, lam), 1.0) == pytest.approx(moment(phi, 1.0), rel=1e-13)


def test_certificate_write(tmp_path, ex1, power0):
    cert = solve_profile(ex1, power0, 0.05, RHO_SMALL, QUICK)
    cert.write(tmp_path, {"scenario": "test"})
    assert (tmp_path / "profile.csv").exists() and (tmp_path / "trajectory.csv").exists()
    text = (tmp_path / "manifest.txt").read_text()
    for key in ("scenario", "rho", "stationarity_residual", "integral_residual", "grid_description"):
        assert key in text
