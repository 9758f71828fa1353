"""Time integration in physical and self-similar variables, scale maps, gelation.

The state advanced by the integrators is the extended mass vector
``y = (m_0, ..., m_{n-1}, gel, dust)``; the right-hand side is
``Q(y) @ y`` with the transfer matrices of :mod:`cfselfsim.operators`.

Two integrators are available:

``heun``
    Explicit two-stage Runge-Kutta with a stability bound
    ``1 / max(outflow rate)``; negative cells are clipped and booked.
``mprk``
    Modified Patankar RK2 (second order, unconditionally positive and
    mass conservative) with an embedded first-order error estimate for step
    size control.  This is the default because the fragmentation sink
    ``a(xmax)`` makes explicit steps tiny on wide grids.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg

from .coefficients import CoefficientSet, DiagnosticParams
from .grid import SizeGrid, Spectrum, dilate, format_number, log_moment, moment, remap, weighted_lq_norm
from .operators import CoagulationOperator, FragmentationOperator, TransportOperator

logger = logging.getLogger(__name__)

MODES = ("physical", "rescaled")
INTEGRATORS = ("mprk", "heun")
TRAJECTORY_COLUMNS = ("time", "M_m0", "M_m1", "M_1", "M_lambda", "M_1pl", "logmom", "U_m1",
                      "Lq1", "gel", "dust", "clip")


class PositivityError(RuntimeError):
    pass


class StepTooLarge(ValueError):
    def __init__(self, dt: float, bound: float):
        self.dt = dt
        self.bound = bound
        super().__init__(f"dt = {dt:.6g} exceeds the stability bound {bound:.6g}")


class RateModel:
    """Right-hand side ``Q(y) y`` for one grid, coefficient set and mode."""

    def __init__(self, grid: SizeGrid, coeffs: CoefficientSet, daughter, mode: str = "physical",
                 stencil: str = "vanleer", reconstruction: str = "linear"):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        self.grid = grid
        self.coeffs = coeffs
        self.daughter = daughter
        self.mode = mode
        self.n = grid.n_cells
        self.coag = CoagulationOperator(grid, coeffs, reconstruction)
        self.frag = FragmentationOperator(grid, coeffs, daughter, reconstruction)
        self.transport = TransportOperator(grid, stencil) if mode == "rescaled" else None

    def transfer(self, y: np.ndarray) -> np.ndarray:
        m = y[: self.n]
        v = m / self.grid.mass_weights
        Q = self.frag.transfer(v)
        if self.coag.terms:
            Q += self.coag.transfer(v)
        if self.transport is not None:
            Q += self.transport.transfer(m)
        return Q

    def rate(self, y: np.ndarray) -> np.ndarray:
        return self.transfer(y) @ y

    def stability_bound(self, y: np.ndarray) -> float:
        out = -np.diag(self.transfer(y))[: self.n]
        top = float(np.max(out)) if out.size else 0.0
        return math.inf if top <= 0 else 1.0 / top

    def residual(self, y: np.ndarray) -> float:
        """X1 norm of the cell mass rate, ``sum |dm_i/dt|``."""
        return float(np.sum(np.abs(self.rate(y)[: self.n])))


def _extended(spec: Spectrum) -> np.ndarray:
    return np.concatenate([spec.masses, [spec.gel_mass, spec.dust_mass]])


def _to_spectrum(grid: SizeGrid, y: np.ndarray, clip_mass: float) -> Spectrum:
    n = grid.n_cells
    return Spectrum.from_masses(grid, y[:n], gel_mass=float(y[n]), dust_mass=float(y[n + 1]),
                                clip_mass=clip_mass)


def _clip(y: np.ndarray, n: int) -> tuple[np.ndarray, float]:
    neg = y[:n] < 0
    if not np.any(neg):
        return y, 0.0
    lost = -float(np.sum(y[:n][neg]))
    y = y.copy()
    y[:n][neg] = 0.0
    return y, lost


def heun_step(model: RateModel, y: np.ndarray, dt: float) -> np.ndarray:
    k1 = model.rate(y)
    k2 = model.rate(y + dt * k1)
    return y + 0.5 * dt * (k1 + k2)


def mprk_step(model: RateModel, y: np.ndarray, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """One MPRK22 step; returns the second-order update and the first-order stage."""
    size = len(y)
    eye = np.eye(size)
    Q1 = model.transfer(y)
    y2 = linalg.solve(eye - dt * Q1, y, check_finite=False)
    y2 = np.maximum(y2, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(y2 > 0, y / y2, 1.0)
    Q2 = model.transfer(y2)
    A = eye - 0.5 * dt * (Q1 * r[None, :] + Q2)
    y_new = linalg.solve(A, y, check_finite=False)
    return np.maximum(y_new, 0.0), y2


def step(spec: Spectrum, dt: float, mode: str, coeffs: CoefficientSet, daughter, *,
         model: RateModel | None = None, cfl: float = 1.0, integrator: str = "heun") -> Spectrum:
    """Advance ``spec`` by one step of size ``dt``.

    The explicit Heun step rejects ``dt > cfl * bound`` with
    :class:`StepTooLarge`; negative cells are clipped and the removed mass is
    added to ``clip_mass``.
    """
    model = model or RateModel(spec.grid, coeffs, daughter, mode)
    y = _extended(spec)
    if integrator == "heun":
        bound = model.stability_bound(y)
        if dt > cfl * bound:
            raise StepTooLarge(dt, cfl * bound)
        y_new, lost = _clip(heun_step(model, y, dt), model.n)
        if lost:
            logger.info("positivity clipping removed mass %.3e", lost)
        return _to_spectrum(spec.grid, y_new, spec.clip_mass + lost)
    y_new, _ = mprk_step(model, y, dt)
    return _to_spectrum(spec.grid, y_new, spec.clip_mass)


@dataclass
class EvolveConfig:
    """Integration settings.

    Attributes
    ----------
    mode : {"physical", "rescaled"}
    t_end : float
        Horizon in ``t`` (physical) or ``s`` (rescaled).
    cfl : float
        Fraction of the explicit stability bound used by Heun steps.
    snapshot_every : float
        Snapshot spacing in the time variable of the mode.
    steady_tol : float
        Rescaled mode stops once ``sum |dm_i/ds|`` falls below this value.
    max_clip_mass : float or None
        Abort threshold for clipped mass (default ``1e-8 * M_1``).
    integrator : {"mprk", "heun"}
    rtol, atol : float
        Error control of the adaptive MPRK step.
    dt_init, dt_max : float
    stencil : {"vanleer", "upwind"}
        Face values of the scaling transport.
    reconstruction : {"linear", "constant"}
        In-cell density shape used by coagulation and fragmentation.
    record_steps : bool
        Also keep the instantaneous gel flux after every accepted step.
    """

    mode: str = "rescaled"
    t_end: float = 30.0
    cfl: float = 0.5
    snapshot_every: float = 0.1
    steady_tol: float = 1e-8
    max_clip_mass: float | None = None
    integrator: str = "mprk"
    rtol: float = 1e-4
    atol: float = 1e-14
    dt_init: float = 1e-4
    dt_max: float = 0.1
    stencil: str = "vanleer"
    reconstruction: str = "linear"
    record_steps: bool = True
    max_steps: int = 10_000_000

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.integrator not in INTEGRATORS:
            raise ValueError(f"integrator must be one of {INTEGRATORS}")
        if not 0.0 < self.cfl < 1.0:
            raise ValueError("cfl must lie in (0, 1)")
        if not self.t_end > 0 or not self.snapshot_every > 0:
            raise ValueError("horizon and snapshot spacing must be positive")


@dataclass
class TrajectoryRecord:
    """Snapshot diagnostics of an evolution run."""

    mode: str
    params: DiagnosticParams
    lam: float
    times: list = field(default_factory=list)
    rows: list = field(default_factory=list)
    states: list = field(default_factory=list)
    gel_flux: list = field(default_factory=list)
    residuals: list = field(default_factory=list)
    step_times: list = field(default_factory=list)
    step_gel_flux: list = field(default_factory=list)
    stationary: bool = False
    steps: int = 0
    grid: SizeGrid | None = None

    def column(self, name: str) -> np.ndarray:
        idx = TRAJECTORY_COLUMNS.index(name)
        return np.array([row[idx] for row in self.rows])

    def append(self, t: float, spec: Spectrum, gel_flux: float, residual: float) -> None:
        p = self.params
        lm = log_moment(spec)
        m_m1 = moment(spec, p.m1)
        u = lm + 3.0 / (math.e * (1.0 - p.m1)) * m_m1 if p.m1 < 1 else math.nan
        self.times.append(t)
        self.rows.append((
            t, moment(spec, p.m0), m_m1, moment(spec, 1.0), moment(spec, self.lam),
            moment(spec, 1.0 + self.lam), lm, u, weighted_lq_norm(spec, p.m1, p.q1),
            spec.gel_mass, spec.dust_mass, spec.clip_mass,
        ))
        self.states.append(spec)
        self.gel_flux.append(gel_flux)
        self.residuals.append(residual)

    def write_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            fh.write(",".join(TRAJECTORY_COLUMNS) + "\n")
            for row in self.rows:
                fh.write(",".join(format_number(v) for v in row) + "\n")


def read_trajectory_csv(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {k: np.array([float(r[k]) for r in rows]) for k in TRAJECTORY_COLUMNS}


def evolve(f_in: Spectrum, config: EvolveConfig, coeffs: CoefficientSet, daughter,
           params: DiagnosticParams | None = None, model: RateModel | None = None,
           ) -> tuple[TrajectoryRecord, Spectrum]:
    """Integrate to ``config.t_end`` (or to stationarity in rescaled mode)."""
    grid = f_in.grid
    if not np.all(np.isfinite(f_in.values)):
        raise FloatingPointError("non-finite state at t = 0")
    if np.any(f_in.values < 0):
        raise ValueError("initial spectrum must be non-negative")
    model = model or RateModel(grid, coeffs, daughter, config.mode, config.stencil, config.reconstruction)
    if params is None:
        params = DiagnosticParams.default(coeffs, daughter) if coeffs.lam > 1 else \
            DiagnosticParams(m0=0.5, m1=0.5, q1=1.5, mu1=0.5)
    rec = TrajectoryRecord(config.mode, params, coeffs.lam, grid=grid)
    y = _extended(f_in)
    mass0 = float(np.sum(y))
    clip_budget = config.max_clip_mass if config.max_clip_mass is not None else 1e-8 * mass0
    clip = f_in.clip_mass
    t = 0.0
    n = grid.n_cells

    def record(t_now, y_now):
        rate = model.rate(y_now)
        res = float(np.sum(np.abs(rate[:n])))
        rec.append(t_now, _to_spectrum(grid, y_now, clip), float(rate[n]), res)
        return res

    res = record(t, y)
    if mass0 == 0.0 or (config.mode == "rescaled" and res < config.steady_tol):
        rec.stationary = mass0 == 0.0 or res < config.steady_tol
        return rec, _to_spectrum(grid, y, clip)

    next_snap = config.snapshot_every
    dt = config.dt_init
    if config.integrator == "heun":
        dt = config.cfl * model.stability_bound(y)
    while t < config.t_end * (1 - 1e-14):
        if rec.steps >= config.max_steps:
            logger.warning("step budget exhausted at t = %.6g", t)
            break
        target = min(next_snap, config.t_end)
        if config.integrator == "heun":
            dt = min(config.cfl * model.stability_bound(y), target - t)
            y_new, lost = _clip(heun_step(model, y, dt), n)
            if lost:
                clip += lost
                logger.info("t = %.6g: clipped mass %.3e (total %.3e)", t, lost, clip)
                if clip > clip_budget:
                    raise PositivityError(f"positivity failure: clipped mass {clip:.3e} exceeds {clip_budget:.3e}")
        else:
            h = min(dt, config.dt_max, target - t)
            y_new, y_low = mprk_step(model, y, h)
            cells = float(np.sum(y[:n]))
            err = float(np.sum(np.abs(y_new - y_low))) / (config.rtol * max(cells, 1e-300) + config.atol)
            if not np.all(np.isfinite(y_new)):
                raise FloatingPointError(f"non-finite state at t = {t:.6g}")
            factor = min(2.0, max(0.2, 0.9 / math.sqrt(max(err, 1e-10))))
            if err > 1.0:
                dt = h * factor
                continue
            # a step shortened only to land on a snapshot does not shrink the proposal
            dt = max(dt, h * factor) if h < dt else h * factor
            h_taken = h
        if config.integrator == "heun":
            h_taken = dt
        if not np.all(np.isfinite(y_new)):
            raise FloatingPointError(f"non-finite state at t = {t:.6g}")
        y = y_new
        t += h_taken
        rec.steps += 1
        if config.record_steps:
            rec.step_times.append(t)
            rec.step_gel_flux.append(float((model.transfer(y) @ y)[n]) if config.mode == "physical" else math.nan)
        if t >= target * (1 - 1e-12):
            res = record(t, y)
            next_snap = target + config.snapshot_every
            if config.mode == "rescaled" and res < config.steady_tol:
                rec.stationary = True
                break
    return rec, _to_spectrum(grid, y, clip)


# --------------------------------------------------------------------------
# scale maps

def s_lambda(t, lam: float):
    """Self-similar scale ``(1 + (lam-1) t)^(1/(lam-1))``."""
    return (1.0 + (lam - 1.0) * np.asarray(t, dtype=float)) ** (1.0 / (lam - 1.0))


def scale_to_rescaled(f: Spectrum, t: float, lam: float, grid: SizeGrid | None = None):
    """``g(s, y) = e^{-2s} f(t, y e^{-s})`` with ``e^s = s_lambda(t)``.

    Without ``grid`` the map is an exact relabeling (edges times ``e^s``);
    with ``grid`` the result is conservatively remapped onto it.
    """
    if t <= -1.0 / (lam - 1.0):
        raise ValueError("t must exceed -1/(lambda - 1)")
    s = float(np.log(s_lambda(t, lam)))
    g = dilate(f, math.exp(-s), math.exp(-2.0 * s))
    g = Spectrum(g.grid, g.values, f.gel_mass, f.dust_mass, f.clip_mass)
    return (remap(g, grid) if grid is not None else g), s


def scale_to_physical(g: Spectrum, s: float, lam: float, grid: SizeGrid | None = None):
    """Inverse of :func:`scale_to_rescaled`: ``f(t, x) = e^{2s} g(s, x e^{s})``."""
    t = (math.exp((lam - 1.0) * s) - 1.0) / (lam - 1.0)
    f = dilate(g, math.exp(s), math.exp(2.0 * s))
    f = Spectrum(f.grid, f.values, g.gel_mass, g.dust_mass, g.clip_mass)
    return (remap(f, grid) if grid is not None else f), t


# --------------------------------------------------------------------------
# gelation

@dataclass(frozen=True)
class GelationEvent:
    fired: bool
    time: float | None
    threshold: float
    times: np.ndarray
    cumulative_gel: np.ndarray


def gelation_monitor(record: TrajectoryRecord, threshold: float | None = None) -> GelationEvent:
    """Earliest time with instantaneous gel flux above ``threshold``.

    The default threshold is ``1e-6 * rho`` per unit time, ``rho`` being the
    initial mass.  Per-step fluxes are used when the record has them.
    """
    rho = record.rows[0][3] + record.rows[0][9] + record.rows[0][10]
    thr = 1e-6 * rho if threshold is None else threshold
    if record.step_times and not np.all(np.isnan(record.step_gel_flux)):
        times = np.concatenate([[record.times[0]], record.step_times])
        flux = np.concatenate([[record.gel_flux[0]], record.step_gel_flux])
    else:
        times = np.asarray(record.times)
        flux = np.asarray(record.gel_flux)
    hit = np.nonzero(flux > thr)[0]
    when = float(times[hit[0]]) if hit.size else None
    return GelationEvent(hit.size > 0, when, thr, np.asarray(record.times), record.column("gel"))
