"""Self-similar profiles as steady states of the rescaled flow, and their checks.

A profile ``phi`` is computed by integrating the rescaled equation from
``rho e^{-x}`` until the cell mass rate is negligible.  It is then checked
against two stationary characterizations that do not reuse the finite
volume fluxes:

* the weak form against saturating test functions ``x / (1 + x/xi)``,
  evaluated by tensor Gauss quadrature of the pair integrals;
* the integrated mass balance across each interior edge, where the
  transport flux ``y^2 phi(y)`` must equal the fragmentation inflow minus
  the coagulation outflow.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .coefficients import CoefficientSet, DiagnosticParams, mollify, rho_star
from .diagnostics import InvariantReport, cell_nodes, invariant_set_report
from .dynamics import EvolveConfig, TrajectoryRecord, evolve, s_lambda
from .grid import SizeGrid, Spectrum, dilate, make_grid, moment, project, remap, x1_distance
from .manifest import write_manifest
from .operators import TestFunction, chi_theta, identity_test, n_theta, saturating_ladder

logger = logging.getLogger(__name__)


@dataclass
class ProfileConfig:
    """Grid and solver settings of a profile computation."""

    xmin: float = 1e-6
    xmax: float = 1e3
    n_cells: int = 256
    s_max: float = 30.0
    steady_tol: float = 1e-8
    snapshot_every: float = 0.5
    rtol: float = 1e-4
    dt_max: float = 1.0
    stencil: str = "vanleer"

    def grid(self) -> SizeGrid:
        return make_grid(self.xmin, self.xmax, self.n_cells)

    def evolve_config(self) -> EvolveConfig:
        return EvolveConfig(mode="rescaled", t_end=self.s_max, snapshot_every=self.snapshot_every,
                            steady_tol=self.steady_tol, rtol=self.rtol, dt_max=self.dt_max,
                            stencil=self.stencil, record_steps=False)


@dataclass
class ProfileCertificate:
    phi: Spectrum
    rho: float
    eps: float | None
    stationarity_residual: float
    stationary: bool
    weak_residuals: dict
    integral_residual: float
    invariant_report: InvariantReport
    s_final: float
    record: TrajectoryRecord | None = None
    flags: list = field(default_factory=list)
    small_size_ok: bool = True
    config: ProfileConfig | None = None

    @property
    def max_weak_residual(self) -> float:
        return max(self.weak_residuals.values()) if self.weak_residuals else 0.0

    def manifest_entries(self) -> dict:
        g = self.phi.grid
        out = {
            "rho": self.rho,
            "eps": self.eps,
            "stationary": self.stationary,
            "stationarity_residual": self.stationarity_residual,
            "s_final": self.s_final,
            "integral_residual": self.integral_residual,
            "small_size_ok": self.small_size_ok,
            "flags": ";".join(self.flags) if self.flags else "none",
            "M_1": moment(self.phi, 1.0),
            "gel_mass": self.phi.gel_mass,
            "dust_mass": self.phi.dust_mass,
            "grid_description": g.describe(),
        }
        out["weak_residual"] = dict(self.weak_residuals)
        out["invariant"] = dict(self.invariant_report.entries)
        if self.config is not None:
            out["profile_solver"] = dict(self.config.__dict__)
        return out

    def write(self, outdir, extra: dict | None = None) -> None:
        from pathlib import Path

        outdir = Path(outdir)
        self.phi.write_csv(outdir / "profile.csv")
        if self.record is not None:
            self.record.write_csv(outdir / "trajectory.csv")
        entries = dict(extra or {})
        entries.update(self.manifest_entries())
        write_manifest(outdir / "manifest.txt", entries)


# --------------------------------------------------------------------------
# residuals

def weak_residual(phi: Spectrum, coeffs: CoefficientSet, daughter,
                  tests: list[TestFunction] | None = None, rho: float | None = None,
                  order: int = 4) -> dict[str, float]:
    """Normalized imbalance of the stationary weak form for each test function.

    ``|int (theta - x theta') phi - 1/2 int int K chi phi phi + int a N phi|``
    divided by ``rho * Lip(theta)``.
    """
    grid = phi.grid
    tests = saturating_ladder(grid) if tests is None else tests
    rho = moment(phi, 1.0) if rho is None else rho
    x, w = cell_nodes(grid, order)
    v = phi.values
    wv = w * v[:, None]
    xf, wvf = x.ravel(), wv.ravel()
    kern = coeffs.kernel(xf[:, None], xf[None, :])
    rate = coeffs.frag_rate(xf)
    out = {}
    for th in tests:
        t1 = float(np.sum(wvf * (th(xf) - xf * th.deriv(xf))))
        t2 = 0.5 * float(wvf @ (kern * chi_theta(th, xf[:, None], xf[None, :])) @ wvf)
        t3 = float(np.sum(wvf * rate * n_theta(th, daughter, xf))) if coeffs.a0 else 0.0
        scale = rho * th.lipschitz
        out[th.label] = abs(t1 - t2 + t3) / scale if scale > 0 else 0.0
    return out


@dataclass(frozen=True)
class IntegralResidual:
    sup: float
    edges: np.ndarray
    defect: np.ndarray
    small_size_ok: bool


def _edge_values(phi: Spectrum) -> np.ndarray:
    """``phi`` at interior edges: geometric mean of the neighbours when positive."""
    a, b = phi.values[:-1], phi.values[1:]
    with np.errstate(invalid="ignore"):
        geo = np.sqrt(a * b)
    return np.where((a > 0) & (b > 0), geo, 0.5 * (a + b))


def integral_residual(phi: Spectrum, coeffs: CoefficientSet, daughter, rho: float | None = None,
                      order: int = 8) -> IntegralResidual:
    """Sup over interior edges of the normalized integrated mass balance.

    At ``y``: ``y^2 phi(y) - int_y^inf a(x) phi(x) x Phi(y/x) dx
    + int_0^y int_{y-x}^inf x K(x, z) phi(x) phi(z) dz dx`` over ``rho``,
    with ``Phi`` the cumulative mass fraction of the daughter profile.
    """
    grid = phi.grid
    e = grid.edges
    n = grid.n_cells
    v = phi.values
    rho = moment(phi, 1.0) if rho is None else rho
    if rho == 0 or not np.any(v):
        return IntegralResidual(0.0, e[1:-1], np.zeros(n - 1), True)
    y = e[1:-1]
    transport = y * y * _edge_values(phi)
    x, w = cell_nodes(grid, order)

    frag = np.zeros(n - 1)
    if coeffs.a0:
        load = w * coeffs.frag_rate(x) * x * v[:, None]  # (n, q)
        phi_c = daughter.cum_mass(y[:, None, None] / x[None, :, :])  # (edges, n, q)
        upper = np.arange(n)[None, :] >= np.arange(1, n)[:, None]
        frag = np.einsum("jq,ejq->e", load, phi_c * upper[:, :, None])

    coag = np.zeros(n - 1)
    for c, p, q in coeffs.kernel_terms():
        vq = grid.power_weights(q) * v
        suffix = np.concatenate([np.cumsum(vq[::-1])[::-1], [0.0]])
        for idx, yy in enumerate(y):
            ncell = idx + 1  # cells entirely below yy
            xs, ws = x[:ncell].ravel(), (w[:ncell] * v[:ncell, None]).ravel()
            t = yy - xs
            l = np.clip(np.searchsorted(e, t, side="right") - 1, 0, n - 1)
            tt = np.maximum(t, e[0])
            part = v[l] * (e[l + 1] ** (q + 1.0) - tt ** (q + 1.0)) / (q + 1.0)
            tail = suffix[l + 1] + part
            coag[idx] += c * float(np.sum(ws * xs ** (1.0 + p) * tail))

    defect = (transport - frag + coag) / rho
    small_ok = bool(transport[0] <= 1e-3 * max(np.max(transport), 1e-300))
    return IntegralResidual(float(np.max(np.abs(defect))), y, defect, small_ok)


# --------------------------------------------------------------------------
# profile solve

def _regularized(daughter, eps):
    if eps is None or eps == 0:
        return daughter
    return mollify(daughter, eps)


def certify(phi: Spectrum, coeffs: CoefficientSet, daughter, rho: float, eps=None,
            tests=None, params: DiagnosticParams | None = None) -> dict:
    """Residuals and invariant report of a candidate profile."""
    params = params or DiagnosticParams.default(coeffs, daughter)
    weak = weak_residual(phi, coeffs, daughter, tests, rho)
    weak["x"] = weak_residual(phi, coeffs, daughter, [identity_test()], rho)["x"]
    integ = integral_residual(phi, coeffs, daughter, rho)
    report = invariant_set_report(phi, coeffs, daughter, eps, params)
    return {"weak": weak, "integral": integ, "report": report}


def solve_profile(coeffs: CoefficientSet, daughter, eps: float | None, rho: float,
                  config: ProfileConfig | None = None, initial: Spectrum | None = None,
                  mollified=None) -> ProfileCertificate:
    """Evolve the rescaled equation from ``rho e^{-x}`` to a steady state.

    ``daughter`` is the unregularized profile; it is mollified with ``eps``
    unless ``mollified`` is supplied.  Requests at or above the mass
    threshold run with a warning flag.
    """
    config = config or ProfileConfig()
    bd = mollified if mollified is not None else _regularized(daughter, eps)
    flags = []
    threshold = rho_star(coeffs, bd)
    if rho >= threshold:
        logger.warning("rho = %.6g is not below the threshold %.6g; proceeding", rho, threshold)
        flags.append("rho_above_threshold")
    grid = config.grid() if initial is None else initial.grid
    f0 = initial if initial is not None else project(lambda x: rho * np.exp(-x), grid)
    params = DiagnosticParams.default(coeffs, daughter)
    rec, phi = evolve(f0, config.evolve_config(), coeffs, bd, params)
    if not rec.stationary:
        flags.append("not_stationary")
    cert = certify(phi, coeffs, bd, rho, eps, params=params)
    ir = cert["integral"]
    if not ir.small_size_ok:
        flags.append("small_size_hypothesis")
    return ProfileCertificate(
        phi=phi, rho=rho, eps=eps, stationarity_residual=rec.residuals[-1], stationary=rec.stationary,
        weak_residuals=cert["weak"], integral_residual=ir.sup, invariant_report=cert["report"],
        s_final=rec.times[-1], record=rec, flags=flags, small_size_ok=ir.small_size_ok, config=config,
    )


# --------------------------------------------------------------------------
# sweeps

@dataclass
class SweepReport:
    eps: list
    certificates: list
    distances: list
    moments: dict
    cauchy: bool
    failures: dict


def _solve_member(args):
    coeffs, daughter, eps, rho, config = args
    try:
        return solve_profile(coeffs, daughter, eps, rho, config), None
    except Exception as exc:  # reported as a flagged row
        return None, f"{type(exc).__name__}: {exc}"


def epsilon_sweep(coeffs: CoefficientSet, daughter, rho: float, eps_list, config: ProfileConfig | None = None,
                  workers: int = 1) -> SweepReport:
    """Profiles for a decreasing list of ``eps`` and their consecutive X1 distances."""
    eps_list = list(eps_list)
    if any(b >= a for a, b in zip(eps_list, eps_list[1:])):
        raise ValueError("eps list must be strictly decreasing")
    config = config or ProfileConfig()
    jobs = [(coeffs, daughter, e, rho, config) for e in eps_list]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_solve_member, jobs))
    else:
        results = [_solve_member(j) for j in jobs]
    certs = [r[0] for r in results]
    failures = {eps_list[i]: r[1] for i, r in enumerate(results) if r[1] is not None}
    for i, c in enumerate(certs):
        if c is not None and not c.stationary:
            failures.setdefault(eps_list[i], "not stationary")
    dists = []
    for a, b in zip(certs, certs[1:]):
        dists.append(x1_distance(a.phi, b.phi) if a is not None and b is not None else math.nan)
    params = DiagnosticParams.default(coeffs, daughter)
    table = {}
    for label, m in (("M_m0", params.m0), ("M_m1", params.m1), ("M_1", 1.0), ("M_lambda", coeffs.lam),
                     ("M_1pl", 1.0 + coeffs.lam)):
        table[label] = [moment(c.phi, m) if c is not None else math.nan for c in certs]
    cauchy = len(dists) < 2 or all(b < a for a, b in zip(dists, dists[1:]))
    return SweepReport(eps_list, certs, dists, table, bool(cauchy) and not failures, failures)


def rho_sweep(coeffs: CoefficientSet, daughter, eps, rhos, config: ProfileConfig | None = None,
              workers: int = 1) -> list:
    """Profiles for several masses (failures returned as error strings)."""
    config = config or ProfileConfig()
    jobs = [(coeffs, daughter, eps, r, config) for r in rhos]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_solve_member, jobs))
    return [_solve_member(j) for j in jobs]


# --------------------------------------------------------------------------
# self-similar solutions

def build_self_similar(phi: Spectrum, lam: float, t: float, grid: SizeGrid | None = None) -> Spectrum:
    """``F_S(t, x) = s(t)^2 phi(x s(t))`` with ``s(t) = s_lambda(t)``.

    Exact relabeling onto the dilated grid, or conservative remap onto
    ``grid`` when given.
    """
    s = float(s_lambda(t, lam))
    out = dilate(phi, s, s * s)
    return remap(out, grid) if grid is not None else out


def remapped_profile(phi: Spectrum, lam: float) -> Spectrum:
    """``psi(y) = c^2 phi(c y)`` with ``c = (lam - 1)^(-1/(lam - 1))``."""
    c = (lam - 1.0) ** (-1.0 / (lam - 1.0))
    return dilate(phi, c, c * c)


def self_similarity_check(phi: Spectrum, coeffs: CoefficientSet, daughter, t: float = 1.0,
                          rtol: float = 1e-5) -> dict:
    """Evolve ``phi`` in physical variables to ``t`` and compare with ``F_S(t)``.

    Returns the X1 distance (and its ratio to the mass) on the grid of ``phi``.
    """
    cfg = EvolveConfig(mode="physical", t_end=t, snapshot_every=t, rtol=rtol, dt_max=0.05,
                       record_steps=False)
    rec, f = evolve(phi, cfg, coeffs, daughter)
    target = build_self_similar(phi, coeffs.lam, t, phi.grid)
    d = x1_distance(f, target)
    rho = moment(phi, 1.0)
    return {"distance": d, "relative": d / rho, "remap_loss": target.meta.get("remap_loss", 0.0),
            "evolved": f, "target": target}


def self_similar_weak_defect(phi: Spectrum, coeffs: CoefficientSet, daughter, tests, t_end: float = 1.0,
                             n_times: int = 9) -> dict[str, float]:
    """Time-integrated weak identity for ``F_S`` in physical variables.

    ``int theta F_S(t_end) - int theta phi`` versus the Simpson integral of
    ``1/2 int int K chi F_S F_S - int a N F_S`` over ``[0, t_end]``, each
    member ``F_S(t)`` living on its own dilated grid.  Normalized by
    ``rho * Lip(theta)``.
    """
    rho = moment(phi, 1.0)
    ts = np.linspace(0.0, t_end, n_times)
    rhs = {th.label: [] for th in tests}
    ends = {}
    for t in ts:
        F = build_self_similar(phi, coeffs.lam, float(t))
        x, w = cell_nodes(F.grid, 4)
        xf, wvf = x.ravel(), (w * F.values[:, None]).ravel()
        kern = coeffs.kernel(xf[:, None], xf[None, :])
        for th in tests:
            c = 0.5 * float(wvf @ (kern * chi_theta(th, xf[:, None], xf[None, :])) @ wvf)
            fr = float(np.sum(wvf * coeffs.frag_rate(xf) * n_theta(th, daughter, xf))) if coeffs.a0 else 0.0
            rhs[th.label].append(c - fr)
            if t in (ts[0], ts[-1]):
                ends[(th.label, float(t))] = float(np.sum(wvf * th(xf)))
    from scipy.integrate import simpson

    out = {}
    for th in tests:
        lhs = ends[(th.label, float(ts[-1]))] - ends[(th.label, float(ts[0]))]
        integral = float(simpson(rhs[th.label], x=ts))
        out[th.label] = abs(lhs - integral) / (rho * th.lipschitz)
    return out


def distance_to(phi: Spectrum, other: Spectrum) -> float:
    """X1 distance after remapping ``other`` onto the grid of ``phi``."""
    if other.grid is not phi.grid and not np.array_equal(other.grid.edges, phi.grid.edges):
        other = remap(other, phi.grid)
    return x1_distance(phi, other)


__all__ = [
    "ProfileConfig", "ProfileCertificate", "weak_residual", "integral_residual", "solve_profile",
    "epsilon_sweep", "rho_sweep", "build_self_similar", "remapped_profile", "self_similarity_check",
    "self_similar_weak_defect", "certify", "IntegralResidual", "SweepReport", "distance_to",
]
