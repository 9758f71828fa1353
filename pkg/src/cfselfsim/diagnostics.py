"""Checkers for the functionals and inequalities behind the moment estimates."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ._quad import log_interval_rule
from .coefficients import LN2, CoefficientSet, DiagnosticParams, rho_star
from .grid import SizeGrid, Spectrum, log_moment, moment, total_variation, weighted_lq_norm

_EPS = np.finfo(float).eps


@dataclass(frozen=True)
class InequalityReport:
    name: str
    samples: int
    violations: int
    worst_margin: float
    context: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.violations == 0

    def as_dict(self) -> dict:
        out = {"name": self.name, "samples": self.samples, "violations": self.violations,
               "worst_margin": self.worst_margin}
        out.update({f"context.{k}": v for k, v in self.context.items()})
        return out


def lyapunov_U(spec: Spectrum, m: float) -> float:
    """``int x ln x f dx + 3/(e (1-m)) M_m``."""
    if not m < 1.0:
        raise ValueError("m must be < 1")
    return log_moment(spec) + 3.0 / (math.e * (1.0 - m)) * moment(spec, m)


def delta_rho(coeffs: CoefficientSet, daughter, rho: float) -> float:
    """``K0 ln 2 (rho_star - rho) / 2``; non-positive once ``rho >= rho_star``."""
    return coeffs.K0 * LN2 * (rho_star(coeffs, daughter) - rho) / 2.0


def delta_rho_m(coeffs: CoefficientSet, daughter, rho: float, m: float) -> float:
    """``a0 (1 - b_{1+lambda-alpha,1}) rho^((1-lambda)/(m-1)) / 8``."""
    b = daughter.moment(1.0 + coeffs.lam - coeffs.alpha, 1.0)
    return coeffs.a0 * (1.0 - b) * rho ** ((1.0 - coeffs.lam) / (m - 1.0)) / 8.0


def ail_sides(x, y):
    """Both sides of ``(x+y) ln(x+y) - x ln x - y ln y <= 2 ln 2 sqrt(x y)``.

    The left side is evaluated as ``x log1p(y/x) + y log1p(x/y)``, which
    avoids cancellation between the three ``t ln t`` terms.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    lhs = x * np.log1p(y / x) + y * np.log1p(x / y)
    rhs = 2.0 * LN2 * np.sqrt(x * y)
    return lhs, rhs


def check_ail(n: int = 100_000, lo: float = 1e-6, hi: float = 1e6, seed: int = 0) -> InequalityReport:
    """Sample ``(x, y)`` log-uniformly and count violations of the inequality.

    A sample counts as a violation only when it fails by more than four
    units of rounding relative to the right side.
    """
    rng = np.random.default_rng(seed)
    x, y = np.exp(rng.uniform(math.log(lo), math.log(hi), size=(2, n)))
    lhs, rhs = ail_sides(x, y)
    margin = (rhs - lhs) / rhs
    bad = int(np.sum(lhs - rhs > 4.0 * _EPS * rhs))
    return InequalityReport("AIL", n, bad, float(np.min(margin)),
                            {"lo": lo, "hi": hi, "seed": seed})


# --------------------------------------------------------------------------
# pair integrals against piecewise-constant spectra

def cell_nodes(grid: SizeGrid, order: int = 4):
    """Per-cell Gauss nodes in ``ln x``: arrays ``(n, order)``."""
    return log_interval_rule(grid.edges[:-1], grid.edges[1:], order)


def pair_matrix(grid: SizeGrid, coeffs: CoefficientSet, chi, order: int = 4) -> np.ndarray:
    """``A[i, j] = int_cell_i int_cell_j K(x, y) chi(x, y) dx dy``.

    Then ``0.5 * v @ A @ v`` is the coagulation pairing of the cell values
    ``v`` with the test function whose ``chi`` is given.
    """
    x, w = cell_nodes(grid, order)
    xf, wf = x.ravel(), w.ravel()
    vals = coeffs.kernel(xf[:, None], xf[None, :]) * chi(xf[:, None], xf[None, :])
    vals *= wf[:, None] * wf[None, :]
    n = grid.n_cells
    return vals.reshape(n, order, n, order).sum(axis=(1, 3))


def power_chi(m: float):
    def chi(x, y):
        return (x + y) ** m - x**m - y**m

    return chi


def weak_moment_rhs(spec: Spectrum, coeffs: CoefficientSet, daughter, m: float, mode: str,
                    pair: np.ndarray | None = None) -> float:
    """Right side of the ``x^m`` moment identity at one state.

    ``(m-1) M_m`` (rescaled mode only) ``+ 1/2 int int K chi_m f f
    - a0 (1 - b_{m,1}) M_{m+lambda-1}``.
    """
    if pair is None:
        pair = pair_matrix(spec.grid, coeffs, power_chi(m))
    v = spec.values
    out = 0.5 * float(v @ pair @ v)
    if coeffs.a0:
        out -= coeffs.a0 * (1.0 - daughter.moment(m, 1.0)) * moment(spec, m + coeffs.lam - 1.0)
    if mode == "rescaled":
        out += (m - 1.0) * moment(spec, m)
    return out


@dataclass(frozen=True)
class MomentBalance:
    m: float
    max_defect: float
    defects: np.ndarray
    coarse: bool


def moment_balance_check(record, mode: str, m: float, coeffs: CoefficientSet, daughter,
                         skip: float = 0.0) -> MomentBalance:
    """Compare finite-difference ``dM_m/dt`` with the weak-form right side.

    Centered differences inside the record, one-sided second-order stencils
    at the ends (uniform spacing assumed for those).  ``skip`` drops
    snapshots with ``time < skip``.  The relative defect is
    ``|FD - RHS| / M_m``.
    """
    t = np.asarray(record.times)
    states = record.states
    mm = np.array([moment(s, m) for s in states])
    dt = np.diff(t)
    if len(t) < 3:
        return MomentBalance(m, math.nan, np.array([]), True)
    fd = np.gradient(mm, t, edge_order=2)
    pair = pair_matrix(states[0].grid, coeffs, power_chi(m))
    rhs = np.array([weak_moment_rhs(s, coeffs, daughter, m, mode, pair) for s in states])
    scale = np.maximum(np.abs(mm), 1e-300)
    defects = np.abs(fd - rhs) / scale
    keep = t >= skip
    coarse = bool(np.max(dt) > 0.25)
    return MomentBalance(m, float(np.max(defects[keep])), defects, coarse)


# --------------------------------------------------------------------------
# invariant-set report

@dataclass
class InvariantReport:
    """Named quantities bounding the invariant set; values only, no thresholds."""

    entries: dict
    context: dict = field(default_factory=dict)

    def all_finite(self) -> bool:
        return all(np.isfinite(v) for v in self.entries.values())

    def compare(self, other: "InvariantReport", tol: float = 0.01) -> dict:
        """Relative change per entry and a ``tail-divergent`` flag above ``tol``."""
        out = {}
        for k, a in self.entries.items():
            b = other.entries.get(k)
            if b is None:
                continue
            rel = abs(b - a) / max(abs(a), 1e-300)
            out[k] = {"relative_change": rel, "tail_divergent": bool(rel > tol)}
        return out


def invariant_set_report(spec: Spectrum, coeffs: CoefficientSet, daughter, eps: float | None,
                         params: DiagnosticParams) -> InvariantReport:
    lam = coeffs.lam
    entries = {
        "M_1": moment(spec, 1.0),
        "U_m1": lyapunov_U(spec, params.m1),
        "M_m0": moment(spec, params.m0),
        "M_mu1": moment(spec, params.mu1),
        "M_1pl": moment(spec, 1.0 + lam),
        "M_2pl": moment(spec, 2.0 + lam),
        "Lq1": weighted_lq_norm(spec, params.m1, params.q1),
        # entries whose bounds depend on eps: raw values
        "M_lm2": moment(spec, lam - 2.0),
        "total_variation": total_variation(spec),
    }
    ctx = {"eps": eps, "m0": params.m0, "m1": params.m1, "q1": params.q1, "mu1": params.mu1}
    return InvariantReport(entries, ctx)
