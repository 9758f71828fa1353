"""Homogeneous coagulation/fragmentation coefficients and daughter profiles.

The coagulation kernel is ``K(x, y) = K0 (x^a y^(l-a) + x^(l-a) y^a)`` and
the overall fragmentation rate is ``a(x) = a0 x^(l-1)``, with ``l`` the
homogeneity degree.  Fragments of a parent of size ``y`` are distributed as
``b(x, y) = B(x/y)/y``; ``B`` is either the power family
``(nu + 2) z^nu`` or a non-negative table on ``(0, 1)``.

Daughter objects (``DaughterSpec`` and ``MollifiedDaughter``) share a small
duck-typed surface used by the operators:

``B(z)``
    Profile values.
``cum_mass(z)``
    Mass fraction of fragments smaller than ``z`` times the parent size,
    i.e. the integral of ``t B(t)`` over ``(0, z)``.
``mass_rule()``
    Quadrature nodes/weights for integrals against ``z B(z) dz``.
``moment(m, p)`` / ``log_moment()``
    Daughter moments.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._quad import gauss_legendre, interval_rule, power_integral

LN2 = math.log(2.0)

# Normalised polynomial bump (1 - z^2)^4 on (-1, 1).
_BUMP_NORM = 315.0 / 256.0


class AdmissibilityError(ValueError):
    """Raised when coefficients or daughter data are outside the model class."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


@dataclass(frozen=True)
class CoefficientSet:
    """Kernel and fragmentation-rate parameters.

    ``lam`` is the homogeneity degree; the fragmentation exponent is always
    ``lam - 1``.  Instances outside the admissible class can be built (the
    analytic test kernels need that); :func:`validate` reports violations.
    """

    lam: float
    alpha: float
    K0: float
    a0: float

    @property
    def gamma(self) -> float:
        return self.lam - 1.0

    @classmethod
    def constant_kernel(cls, value: float = 2.0) -> "CoefficientSet":
        """Test kernel ``K == value`` with no fragmentation."""
        return cls(lam=0.0, alpha=0.0, K0=0.5 * value, a0=0.0)

    def kernel_terms(self) -> list[tuple[float, float, float]]:
        """Monomials ``(c, p, q)`` with ``K(x, y) = sum c x^p y^q``."""
        if self.K0 == 0.0:
            return []
        return [
            (self.K0, self.alpha, self.lam - self.alpha),
            (self.K0, self.lam - self.alpha, self.alpha),
        ]

    def kernel(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        a, l = self.alpha, self.lam
        return self.K0 * (x**a * y ** (l - a) + x ** (l - a) * y**a)

    def frag_rate(self, x):
        return self.a0 * np.asarray(x, dtype=float) ** (self.lam - 1.0)


def kernel_eval(coeffs: CoefficientSet, x, y):
    return coeffs.kernel(x, y)


def frag_rate(coeffs: CoefficientSet, x):
    return coeffs.frag_rate(x)


class _PiecewiseLinear:
    """Piecewise-linear profile on ``[0, 1]`` with exact moment formulas."""

    def __init__(self, z: np.ndarray, b: np.ndarray):
        self.z = np.asarray(z, dtype=float)
        self.b = np.asarray(b, dtype=float)
        za, zb = self.z[:-1], self.z[1:]
        ba, bb = self.b[:-1], self.b[1:]
        slope = (bb - ba) / (zb - za)
        self.c1 = slope
        self.c0 = ba - slope * za
        seg = self.c0 * (zb**2 - za**2) / 2.0 + self.c1 * (zb**3 - za**3) / 3.0
        self.cum = np.concatenate([[0.0], np.cumsum(seg)])

    def __call__(self, z):
        return np.interp(z, self.z, self.b, left=self.b[0], right=self.b[-1])

    def cum_mass(self, z):
        z = np.clip(np.asarray(z, dtype=float), 0.0, 1.0)
        k = np.clip(np.searchsorted(self.z, z, side="right") - 1, 0, len(self.z) - 2)
        za = self.z[k]
        part = self.c0[k] * (z**2 - za**2) / 2.0 + self.c1[k] * (z**3 - za**3) / 3.0
        return self.cum[k] + part

    def moment(self, m: float, p: float) -> float:
        za, zb = self.z[:-1], self.z[1:]
        if p == 1.0:
            vals = self.c0 * power_integral(za, zb, m) + self.c1 * power_integral(za, zb, m + 1.0)
            return float(np.sum(vals))
        nodes, w = interval_rule(za, zb, 8)
        bvals = np.maximum(self.c0[:, None] + self.c1[:, None] * nodes, 0.0)
        vals = np.sum(w * nodes**m * bvals**p, axis=1)
        # constant first piece touching 0 is integrated exactly
        if za[0] == 0.0 and self.c1[0] == 0.0:
            vals[0] = self.c0[0] ** p * zb[0] ** (m + 1.0) / (m + 1.0)
        return float(np.sum(vals))

    def log_moment(self) -> float:
        za, zb = self.z[:-1], self.z[1:]

        def anti(z, j):
            # antiderivative of z^j ln z, continuous at 0
            with np.errstate(divide="ignore", invalid="ignore"):
                out = z ** (j + 1) * (np.log(z) / (j + 1) - 1.0 / (j + 1) ** 2)
            return np.where(z > 0, out, 0.0)

        i1 = anti(zb, 1) - anti(za, 1)
        i2 = anti(zb, 2) - anti(za, 2)
        return float(-np.sum(self.c0 * i1 + self.c1 * i2))

    def total_variation(self) -> float:
        return float(np.sum(np.abs(np.diff(self.b))))


def _table_mass_rule(table: _PiecewiseLinear, order: int):
    # one Gauss rule per table segment: exact for z B(z) times low-order h
    za, zb = table.z[:-1], table.z[1:]
    live = (table.b[:-1] > 0) | (table.b[1:] > 0)
    nodes, w = interval_rule(za[live], zb[live], order)
    nodes, w = nodes.ravel(), w.ravel()
    return nodes, w * nodes * table(nodes)


@dataclass(frozen=True, eq=False)
class DaughterSpec:
    """Scaling daughter profile ``B`` on ``(0, 1)``.

    With ``z``/``values`` left as ``None`` this is the power family
    ``(nu + 2) z^nu``; otherwise a table that is linearly interpolated and
    extended by constants to ``0`` and ``1``.
    """

    nu: float = 0.0
    z: np.ndarray | None = None
    values: np.ndarray | None = None
    _table: _PiecewiseLinear | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if self.z is None:
            return
        z = np.asarray(self.z, dtype=float)
        b = np.asarray(self.values, dtype=float)
        if z.ndim != 1 or z.shape != b.shape or len(z) < 2:
            raise ValueError("daughter table needs matching 1-D z and B columns")
        if np.any(np.diff(z) <= 0) or z[0] <= 0.0 or z[-1] >= 1.0:
            raise ValueError("daughter table z must be strictly increasing inside (0, 1)")
        if np.any(b < 0):
            raise ValueError("daughter table values must be non-negative")
        zz = np.concatenate([[0.0], z, [1.0]])
        bb = np.concatenate([[b[0]], b, [b[-1]]])
        object.__setattr__(self, "_table", _PiecewiseLinear(zz, bb))

    @property
    def is_power(self) -> bool:
        return self._table is None

    def B(self, z):
        z = np.asarray(z, dtype=float)
        if self.is_power:
            with np.errstate(divide="ignore"):
                return (self.nu + 2.0) * z**self.nu
        return self._table(z)

    def cum_mass(self, z):
        z = np.clip(np.asarray(z, dtype=float), 0.0, 1.0)
        if self.is_power:
            return z ** (self.nu + 2.0)
        return self._table.cum_mass(z)

    def admissible(self, m: float, p: float) -> bool:
        return m > -1.0 and p >= 1.0 and m + p * self.nu > -1.0

    def moment(self, m: float, p: float = 1.0) -> float:
        if not self.admissible(m, p):
            raise ValueError(f"(m, p) = ({m}, {p}) is outside the admissible set for nu = {self.nu}")
        if self.is_power:
            return (self.nu + 2.0) ** p / (m + p * self.nu + 1.0)
        return self._table.moment(m, p)

    def log_moment(self) -> float:
        if self.is_power:
            return 1.0 / (self.nu + 2.0)
        return self._table.log_moment()

    def mass_rule(self, panels: int = 128, order: int = 4):
        """Nodes and weights for integrals against ``z B(z) dz`` on (0, 1)."""
        if self.is_power:
            # z = u^(1/(nu+2)) turns z B(z) dz into du; panels graded towards 0
            edges = np.linspace(0.0, 1.0, panels + 1) ** 3
            u, w = interval_rule(edges[:-1], edges[1:], order)
            return u.ravel() ** (1.0 / (self.nu + 2.0)), w.ravel()
        return _table_mass_rule(self._table, 3)

    def normalization(self) -> float:
        return self.moment(1.0, 1.0)

    def renormalized(self) -> "DaughterSpec":
        if self.is_power:
            return self
        return DaughterSpec(self.nu, self.z, np.asarray(self.values) / self.normalization())


def load_daughter_csv(path, nu: float = 0.0, tol: float = 1e-6) -> DaughterSpec:
    """Read a two-column ``z, B`` table, check and renormalize ``int z B = 1``."""
    rows = []
    with open(Path(path), newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].strip().startswith("#"):
                continue
            try:
                rows.append((float(row[0]), float(row[1])))
            except ValueError:
                if rows:
                    raise
                continue  # header line
    if not rows:
        raise ValueError(f"daughter table {path} has no data rows")
    arr = np.array(rows, dtype=float)
    d = DaughterSpec(nu, arr[:, 0], arr[:, 1])
    norm = d.normalization()
    if abs(norm - 1.0) > tol:
        raise AdmissibilityError([f"daughter table mass normalization is {norm:.8g}, expected 1 within {tol:g}"])
    return d.renormalized()


def daughter_moment(daughter, m: float, p: float = 1.0) -> float:
    return daughter.moment(m, p)


def daughter_log_moment(daughter) -> float:
    return daughter.log_moment()


def _bump(w):
    return _BUMP_NORM * np.clip(1.0 - w * w, 0.0, None) ** 4


@dataclass(frozen=True, eq=False)
class MollifiedDaughter:
    """Mollified, small-size-truncated daughter profile ``B_eps``.

    Tabulated on a uniform 4096-interval mesh of ``[0, 1]`` refined inside
    the two smoothing layers, and renormalized so that ``int z B_eps = 1``
    holds exactly for the interpolant.
    """

    eps: float
    beta_eps: float
    z: np.ndarray
    samples: np.ndarray
    parent: DaughterSpec
    _table: _PiecewiseLinear = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "_table", _PiecewiseLinear(self.z, self.samples))

    nu = 0.0

    @property
    def support_start(self) -> float:
        return self.eps - self.eps**2

    def B(self, z):
        return self._table(z)

    def cum_mass(self, z):
        return self._table.cum_mass(z)

    def admissible(self, m: float, p: float) -> bool:
        return p >= 1.0

    def moment(self, m: float, p: float = 1.0) -> float:
        if p < 1.0:
            raise ValueError("p must be >= 1")
        return self._table.moment(m, p)

    def log_moment(self) -> float:
        return self._table.log_moment()

    def mass_rule(self, order: int = 2):
        return _table_mass_rule(self._table, order)

    def normalization(self) -> float:
        return self._table.moment(1.0, 1.0)

    def total_variation(self) -> float:
        return self._table.total_variation()


def _raw_mollified(daughter: DaughterSpec, eps: float, z: np.ndarray) -> np.ndarray:
    e2 = eps * eps
    w_lo = np.maximum(-1.0, (z - 1.0) / e2)
    w_hi = np.minimum(1.0, (z - eps) / e2)
    ok = w_hi > w_lo
    out = np.zeros_like(z)
    if not np.any(ok):
        return out
    w, ww = interval_rule(w_lo[ok], w_hi[ok], 24)
    zs = z[ok, None] - e2 * w
    out[ok] = np.sum(ww * _bump(w) * daughter.B(zs), axis=1)
    return out


def mollify(daughter: DaughterSpec, eps: float, n_table: int = 4096) -> MollifiedDaughter:
    """Smooth ``B`` with a bump of width ``eps**2`` after cutting it below ``eps``."""
    if not 0.0 < eps < 1.0:
        raise ValueError("eps must lie in (0, 1)")
    e2 = eps * eps
    z = np.unique(
        np.concatenate(
            [
                np.linspace(0.0, 1.0, n_table + 1),
                np.linspace(eps - e2, eps + e2, 65),
                np.linspace(max(1.0 - e2, 0.0), 1.0, 33),
            ]
        )
    )
    raw = _raw_mollified(daughter, eps, z)
    raw[z <= eps - e2] = 0.0
    beta = _PiecewiseLinear(z, raw).moment(1.0, 1.0)
    if not beta > 0.5:
        raise ValueError(f"eps too large: beta_eps = {beta:.6g} (need > 1/2)")
    return MollifiedDaughter(eps=eps, beta_eps=beta, z=z, samples=raw / beta, parent=daughter)


def beta_eps_quadrature(daughter: DaughterSpec, eps: float) -> float:
    """Normalization constant of the mollified profile by direct double quadrature."""
    from scipy import integrate

    e2 = eps * eps

    def inner(zs):
        # int_0^1 z zeta_eps(z - zs) dz
        lo, hi = max(0.0, zs - e2), min(1.0, zs + e2)
        if hi <= lo:
            return 0.0
        t, w = gauss_legendre(32)
        zz = lo + (hi - lo) * t
        return float(np.sum((hi - lo) * w * zz * _bump((zz - zs) / e2) / e2))

    val, _ = integrate.quad(lambda zs: inner(zs) * float(daughter.B(zs)), eps, 1.0, limit=400,
                            points=[1.0 - e2] if 1.0 - e2 > eps else None)
    return val


def rho_star(coeffs: CoefficientSet, daughter) -> float:
    """Mass threshold ``a0 b_ln / (2 K0 ln 2)``."""
    return coeffs.a0 * daughter.log_moment() / (2.0 * coeffs.K0 * LN2)


rho_star_eps = rho_star


def validate(coeffs: CoefficientSet, daughter=None) -> list[str]:
    """Return every violated admissibility condition (empty when admissible)."""
    out = []
    lam, alpha = coeffs.lam, coeffs.alpha
    if not 1.0 < lam <= 2.0:
        out.append(f"lambda = {lam:g} must lie in (1, 2]")
    lo, hi = max(0.5, lam - 1.0), lam / 2.0
    if not lo <= alpha <= hi:
        out.append(f"alpha = {alpha:g} must lie in [max(1/2, lambda-1), lambda/2] = [{lo:g}, {hi:g}]")
    if not coeffs.K0 > 0:
        out.append(f"K0 = {coeffs.K0:g} must be positive")
    if not coeffs.a0 > 0:
        out.append(f"a0 = {coeffs.a0:g} must be positive")
    if daughter is not None:
        nu = daughter.nu
        if not -2.0 < nu <= 0.0:
            out.append(f"nu = {nu:g} must lie in (-2, 0]")
        if not alpha > -nu - 1.0:
            out.append(f"alpha = {alpha:g} must exceed -nu-1 = {-nu - 1.0:g}")
        if isinstance(daughter, DaughterSpec) and not daughter.is_power:
            norm = daughter.normalization()
            if abs(norm - 1.0) > 1e-6:
                out.append(f"daughter mass normalization {norm:.8g} differs from 1")
    return out


def require_admissible(coeffs: CoefficientSet, daughter=None) -> None:
    bad = validate(coeffs, daughter)
    if bad:
        raise AdmissibilityError(bad)


@dataclass(frozen=True)
class DiagnosticParams:
    """Auxiliary exponents for the moment and weighted-L^q estimates."""

    m0: float
    m1: float
    q1: float
    mu1: float

    @classmethod
    def default(cls, coeffs: CoefficientSet, daughter, margin: float = 0.05) -> "DiagnosticParams":
        nu, lam = daughter.nu, coeffs.lam
        m0 = 0.5 * (max(0.0, -nu - 1.0) + min(coeffs.alpha, 1.0))
        m1 = max(m0, 2.0 - lam)
        q_sup = 2.0
        if nu < 0:
            q_sup = min(q_sup, (m1 + 1.0) / -nu)
        if m0 + 2.0 - lam > 0:
            q_sup = min(q_sup, (m1 + 1.0) / (m0 + 2.0 - lam))
        q1 = 1.0 + (1.0 - margin) * (q_sup - 1.0)
        mu1 = (m1 + 1.0 + q1 * (lam - 2.0)) / q1
        return cls(m0=m0, m1=m1, q1=q1, mu1=mu1)

    def violations(self, coeffs: CoefficientSet, nu: float) -> list[str]:
        out = []
        lam = coeffs.lam
        if not (self.m0 > -nu - 1.0 and self.m0 < coeffs.alpha and 0.0 <= self.m0 < 1.0):
            out.append("m0 must lie in (-nu-1, alpha) and [0, 1)")
        if not math.isclose(self.m1, max(self.m0, 2.0 - lam)):
            out.append("m1 must equal max(m0, 2 - lambda)")
        if not (1.0 < self.q1 < 2.0 and self.m1 + self.q1 * nu > -1.0):
            out.append("q1 must lie in (1, 2) with m1 + q1 nu > -1")
        if not (self.m0 < self.mu1 < lam and self.mu1 < 1.0 + lam):
            out.append("mu1 must lie in (m0, lambda)")
        return out
