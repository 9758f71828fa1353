import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from cfselfsim.coefficients import (
    AdmissibilityError, CoefficientSet, DaughterSpec, DiagnosticParams, beta_eps_quadrature,
    daughter_log_moment, daughter_moment, frag_rate, kernel_eval, load_daughter_csv, mollify,
    require_admissible, rho_star, rho_star_eps, validate,
)

sizes = st.floats(min_value=1e-6, max_value=1e6)


# kernel and fragmentation rate

def test_kernel_values():
    assert kernel_eval(CoefficientSet(2.0, 1.0, 1.0, 1.0), 2.0, 3.0) == pytest.approx(12.0, rel=1e-14)
    assert kernel_eval(CoefficientSet(1.5, 0.75, 1.0, 1.0), 4.0, 1.0) == pytest.approx(5.65685, abs=1e-5)
    for c in (CoefficientSet(2.0, 1.0, 0.7, 1.0), CoefficientSet(1.5, 0.6, 3.0, 1.0)):
        assert kernel_eval(c, 1.0, 1.0) == pytest.approx(2.0 * c.K0, rel=1e-15)


def test_constant_kernel_is_constant():
    c = CoefficientSet.constant_kernel(2.0)
    x = np.array([1e-5, 0.3, 7.0, 1e4])
    assert np.allclose(c.kernel(x[:, None], x[None, :]), 2.0, rtol=1e-15)
    assert c.a0 == 0.0


@given(sizes, sizes, st.sampled_from([(2.0, 1.0), (1.5, 0.75), (1.8, 0.85)]))
def test_kernel_symmetric_and_homogeneous(x, y, la):
    c = CoefficientSet(la[0], la[1], 1.3, 1.0)
    k = kernel_eval(c, x, y)
    assert kernel_eval(c, y, x) == pytest.approx(k, rel=1e-14)
    for r in (0.5, 2.0, 10.0):
        assert kernel_eval(c, r * x, r * y) == pytest.approx(r**c.lam * k, rel=1e-12)


def test_frag_rate_values():
    assert frag_rate(CoefficientSet(2.0, 1.0, 1.0, 1.0), 5.0) == pytest.approx(5.0)
    assert frag_rate(CoefficientSet(1.5, 0.75, 1.0, 2.0), 4.0) == pytest.approx(4.0)
    for c in (CoefficientSet(2.0, 1.0, 1.0, 0.3), CoefficientSet(1.5, 0.7, 1.0, 2.5)):
        assert frag_rate(c, 1.0) == pytest.approx(c.a0)


# daughter moments

def test_daughter_moment_examples():
    assert daughter_moment(DaughterSpec(0.0), 1.0, 1.0) == pytest.approx(1.0, rel=1e-15)
    assert daughter_moment(DaughterSpec(0.0), 0.0, 1.0) == pytest.approx(2.0, rel=1e-15)
    assert daughter_moment(DaughterSpec(-1.0), 1.0, 1.0) == pytest.approx(1.0, rel=1e-15)


@pytest.mark.parametrize("m", [0.0, 0.5, 1.0, 2.0, 3.0])
def test_daughter_moment_matches_quadrature(m):
    ref, _ = integrate.quad(lambda z: z**m * 2.0, 0.0, 1.0, epsabs=1e-14)
    assert daughter_moment(DaughterSpec(0.0), m, 1.0) == pytest.approx(ref, rel=1e-10)


def test_daughter_moment_power_exponent():
    # int_0^1 z^m (nu+2)^p z^(p nu) dz, checked by quadrature
    d = DaughterSpec(-0.5)
    ref, _ = integrate.quad(lambda z: z**1.5 * (1.5 * z**-0.5) ** 2, 0.0, 1.0)
    assert d.moment(1.5, 2.0) == pytest.approx(ref, rel=1e-10)
    with pytest.raises(ValueError):
        d.moment(-0.9, 1.0)


@pytest.mark.parametrize("nu, expected", [(0.0, 0.5), (-1.0, 1.0), (-0.5, 1 / 1.5)])
def test_log_moment_matches_quadrature(nu, expected):
    ref, _ = integrate.quad(lambda z: (nu + 2) * z ** (nu + 1) * abs(math.log(z)), 0.0, 1.0, limit=200)
    assert ref == pytest.approx(expected, rel=1e-9)
    assert daughter_log_moment(DaughterSpec(nu)) == pytest.approx(ref, rel=1e-9)


def test_rho_star_values():
    c = CoefficientSet(2.0, 1.0, 1.0, 1.0)
    assert rho_star(c, DaughterSpec(0.0)) == pytest.approx(0.360674, abs=1e-6)
    assert rho_star(c, DaughterSpec(-1.0)) == pytest.approx(0.721348, abs=1e-6)


def test_mass_rule_integrates_log_moment():
    for nu in (0.0, -0.5):
        d = DaughterSpec(nu)
        z, w = d.mass_rule()
        assert np.sum(w) == pytest.approx(1.0, rel=1e-13)
        assert np.sum(w * -np.log(z)) == pytest.approx(d.log_moment(), rel=1e-7)


# admissibility

def test_validate_examples():
    ex1 = CoefficientSet(2.0, 1.0, 1.0, 1.0)
    assert validate(ex1, DaughterSpec(0.0)) == []
    assert validate(ex1, DaughterSpec(-1.0)) == []
    bad = validate(CoefficientSet(2.0, 0.4, 1.0, 1.0), DaughterSpec(0.0))
    assert len(bad) == 1 and "alpha" in bad[0] and "1/2" in bad[0]
    bad = validate(CoefficientSet(1.5, 0.8, 1.0, 1.0), DaughterSpec(0.0))
    assert len(bad) == 1 and "lambda/2" in bad[0]
    with pytest.raises(AdmissibilityError):
        require_admissible(CoefficientSet(2.0, 0.4, 1.0, 1.0))


def test_validate_lists_every_violation():
    bad = validate(CoefficientSet(3.0, 0.1, -1.0, 0.0), DaughterSpec(0.5))
    assert len(bad) == 5


def test_default_diagnostic_params():
    c = CoefficientSet(2.0, 1.0, 1.0, 1.0)
    p = DiagnosticParams.default(c, DaughterSpec(0.0))
    assert (p.m0, p.m1) == (0.5, 0.5)
    assert p.q1 == pytest.approx(1.95)
    assert p.mu1 == pytest.approx(1.5 / 1.95)
    assert p.violations(c, 0.0) == []
    assert DiagnosticParams(0.5, 0.5, 2.5, 0.6).violations(c, 0.0)


# tabulated daughters

def test_table_daughter_round_trip(tmp_path):
    path = tmp_path / "b.csv"
    z = np.linspace(0.01, 0.99, 99)
    path.write_text("z,B\n" + "\n".join(f"{float(a)!r},{2.0 * (1 + 1e-7)!r}" for a in z) + "\n")
    d = load_daughter_csv(path)
    assert d.normalization() == pytest.approx(1.0, abs=1e-14)
    assert d.moment(0.0, 1.0) == pytest.approx(2.0, rel=1e-6)
    assert d.log_moment() == pytest.approx(0.5, rel=1e-6)


def test_table_daughter_rejects_bad_input(tmp_path):
    path = tmp_path / "b.csv"
    path.write_text("0.1,2\n0.5,2\n0.9,2\n")
    load_daughter_csv(path)
    path.write_text("0.1,3\n0.5,3\n0.9,3\n")
    with pytest.raises(AdmissibilityError):
        load_daughter_csv(path)
    path.write_text("z,B\n")
    with pytest.raises(ValueError, match="no data rows"):
        load_daughter_csv(path)
    with pytest.raises(ValueError):
        DaughterSpec(0.0, np.array([0.5, 0.2]), np.array([1.0, 1.0]))
    with pytest.raises(ValueError):
        DaughterSpec(0.0, np.array([0.0, 0.2]), np.array([1.0, 1.0]))


# mollifier

@pytest.mark.parametrize("eps", [0.1, 0.05, 0.025, 0.0125])
def test_mollifier_support_and_normalization(eps):
    md = mollify(DaughterSpec(0.0), eps)
    assert md.normalization() == pytest.approx(1.0, abs=1e-12)
    z = np.linspace(0.0, eps - eps**2, 500)
    assert np.all(md.B(z) == 0.0)
    assert md.B(np.array([eps + eps**2]))[0] > 0.0


def test_beta_eps_matches_quadrature():
    # the tabulated value is the moment of the linear interpolant, so it
    # carries the interpolation error of the smoothing layers
    for eps in (0.2, 0.05, 0.01):
        md = mollify(DaughterSpec(0.0), eps)
        assert md.beta_eps == pytest.approx(beta_eps_quadrature(DaughterSpec(0.0), eps), rel=1e-6)
    assert abs(mollify(DaughterSpec(0.0), 1e-3).beta_eps - 1.0) < 1e-2


def test_mollifier_rejects_large_eps():
    with pytest.raises(ValueError, match="eps too large"):
        mollify(DaughterSpec(0.0), 0.8)


def test_mollified_moments_converge():
    d = DaughterSpec(0.0)
    eps = [0.1, 0.05, 0.025, 0.0125]
    for m in (0.5, 2.0):
        errs = [abs(mollify(d, e).moment(m, 1.0) - d.moment(m, 1.0)) for e in eps]
        assert all(b < a for a, b in zip(errs, errs[1:]))
    thresholds = [rho_star_eps(CoefficientSet(2.0, 1.0, 1.0, 1.0), mollify(d, e)) for e in eps]
    gaps = [abs(t - 1 / (4 * math.log(2))) for t in thresholds]
    assert all(b < a for a, b in zip(gaps, gaps[1:]))


@settings(max_examples=20, deadline=None)
@given(st.floats(min_value=0.003, max_value=0.3), st.floats(min_value=0.0, max_value=3.0),
       st.floats(min_value=1.0, max_value=3.0))
def test_mollified_moments_finite(eps, m, p):
    md = mollify(DaughterSpec(0.0), eps, n_table=512)
    assert np.isfinite(md.moment(m, p))
    # moment of order 1 + lambda - alpha = 2 stays below one
    assert md.moment(2.0, 1.0) < 1.0
