"""Geometric size grids, cell-averaged spectra, moments and norms.

A spectrum stores one value per cell: the *mass-weighted* average of the
number density, ``v_i = int_cell x f dx / int_cell x dx``.  With that
convention the cell mass is ``w_i v_i`` with ``w_i = int_cell x dx`` and
the first moment of a projection is exact, which is what the conservative
operators work with.  Other moments use exact per-cell power integrals
``int_cell x^m dx`` times the stored value.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path

import numpy as np

from ._quad import log_interval_rule, power_integral

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class SizeGrid:
    """Geometric mesh with edges ``xmin * r**i``, ``i = 0..n_cells``."""

    xmin: float
    xmax: float
    n_cells: int

    def __post_init__(self):
        if not (0.0 < self.xmin < self.xmax) or not np.isfinite(self.xmax):
            raise ValueError(f"grid bounds must satisfy 0 < xmin < xmax (got {self.xmin}, {self.xmax})")
        if int(self.n_cells) != self.n_cells or self.n_cells < 8:
            raise ValueError(f"n_cells must be an integer >= 8 (got {self.n_cells})")

    @cached_property
    def edges(self) -> np.ndarray:
        return np.geomspace(self.xmin, self.xmax, self.n_cells + 1)

    @property
    def ratio(self) -> float:
        return (self.xmax / self.xmin) ** (1.0 / self.n_cells)

    @property
    def log_step(self) -> float:
        return float(np.log(self.xmax / self.xmin) / self.n_cells)

    @cached_property
    def centers(self) -> np.ndarray:
        e = self.edges
        return np.sqrt(e[:-1] * e[1:])

    @cached_property
    def mass_weights(self) -> np.ndarray:
        """``int_cell x dx`` per cell."""
        return self.power_weights(1.0)

    def power_weights(self, m: float) -> np.ndarray:
        """``int_cell x^m dx`` per cell (closed form)."""
        return power_integral(self.edges[:-1], self.edges[1:], m)

    @cached_property
    def xlogx_weights(self) -> np.ndarray:
        """``int_cell x ln x dx`` per cell."""
        a, b = self.edges[:-1], self.edges[1:]

        def anti(z):
            return z * z * (np.log(z) / 2.0 - 0.25)

        return anti(b) - anti(a)

    @cached_property
    def xabslogx_weights(self) -> np.ndarray:
        """``int_cell x |ln x| dx`` per cell."""
        a, b = self.edges[:-1], self.edges[1:]

        def anti(z):
            return z * z * (np.log(z) / 2.0 - 0.25)

        one = np.clip(1.0, a, b)
        return (anti(one) - anti(a)) * -1.0 + (anti(b) - anti(one))

    @cached_property
    def slope_shift(self) -> np.ndarray:
        """Offset making the in-cell slope basis carry no mass."""
        x, w = log_interval_rule(self.edges[:-1], self.edges[1:], 8)
        lc = np.log(self.centers)[:, None]
        return np.sum(w * x * (np.log(x) - lc), axis=1) / (self.log_step * self.mass_weights)

    def slope_basis(self, x, cell) -> np.ndarray:
        """In-cell slope basis ``(ln x - ln c_k)/h - shift_k`` (zero first moment)."""
        cell = np.asarray(cell)
        return (np.log(x) - np.log(self.centers[cell])) / self.log_step - self.slope_shift[cell]

    @cached_property
    def slope_basis_max(self) -> np.ndarray:
        return 0.5 + np.abs(self.slope_shift)

    def scaled(self, factor: float) -> "SizeGrid":
        """Same mesh with every edge multiplied by ``factor``."""
        return SizeGrid(self.xmin * factor, self.xmax * factor, self.n_cells)

    def describe(self) -> str:
        return f"geometric[{self.xmin:.6g}, {self.xmax:.6g}] x {self.n_cells}"


def make_grid(xmin: float, xmax: float, n_cells: int) -> SizeGrid:
    return SizeGrid(float(xmin), float(xmax), int(n_cells))


@dataclass(frozen=True, eq=False)
class Spectrum:
    """Cell values on a grid plus the mass booked to the gel and dust channels.

    Parameters
    ----------
    grid : SizeGrid
    values : ndarray
        Mass-weighted cell averages of the number density.
    gel_mass, dust_mass : float
        Cumulative mass that left through ``xmax`` / below ``xmin``.
    clip_mass : float
        Cumulative mass removed by positivity clipping.
    """

    grid: SizeGrid
    values: np.ndarray
    gel_mass: float = 0.0
    dust_mass: float = 0.0
    clip_mass: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.grid.n_cells,):
            raise ValueError(f"expected {self.grid.n_cells} values, got shape {v.shape}")
        object.__setattr__(self, "values", v)

    @classmethod
    def zeros(cls, grid: SizeGrid) -> "Spectrum":
        return cls(grid, np.zeros(grid.n_cells))

    @classmethod
    def from_masses(cls, grid: SizeGrid, masses: np.ndarray, **kw) -> "Spectrum":
        return cls(grid, np.asarray(masses) / grid.mass_weights, **kw)

    @property
    def masses(self) -> np.ndarray:
        return self.grid.mass_weights * self.values

    def with_values(self, values, **kw) -> "Spectrum":
        return replace(self, values=np.asarray(values, dtype=float), **kw)

    def scaled(self, c: float) -> "Spectrum":
        return replace(self, values=c * self.values, gel_mass=c * self.gel_mass,
                       dust_mass=c * self.dust_mass, clip_mass=c * self.clip_mass)

    def clipped(self) -> "Spectrum":
        """Zero out negative cells and book the removed mass."""
        neg = self.values < 0
        if not np.any(neg):
            return self
        lost = -float(np.sum(self.masses[neg]))
        logger.debug("clipped %d cells, mass %.3e", int(neg.sum()), lost)
        return replace(self, values=np.where(neg, 0.0, self.values), clip_mass=self.clip_mass + lost)

    def write_csv(self, path) -> None:
        write_snapshot(self, path)


def limited_slopes(grid: SizeGrid, values: np.ndarray) -> np.ndarray:
    """Van Leer limited in-cell slopes keeping the reconstruction non-negative.

    The reconstruction in cell ``k`` is ``v_k + d_k * slope_basis(x, k)``;
    end cells use zero-gradient ghosts.
    """
    v = np.asarray(values, dtype=float)
    dm_ = np.diff(v, prepend=v[:1])
    dp = np.diff(v, append=v[-1:])
    prod = dm_ * dp
    with np.errstate(divide="ignore", invalid="ignore"):
        d = np.where(prod > 0, 2.0 * prod / (dm_ + dp), 0.0)
    cap = np.maximum(v, 0.0) / grid.slope_basis_max
    return np.clip(d, -cap, cap)


def reconstruct(spec: "Spectrum", x, cell, linear: bool = True) -> np.ndarray:
    """Pointwise values of the in-cell reconstruction at ``x`` inside ``cell``."""
    cell = np.asarray(cell)
    v = spec.values[cell]
    if not linear:
        return np.broadcast_to(v, np.shape(x)).astype(float)
    d = limited_slopes(spec.grid, spec.values)[cell]
    return v + d * spec.grid.slope_basis(x, cell)


def project(fn, grid: SizeGrid, order: int = 8) -> Spectrum:
    """Mass-weighted cell averages of ``fn`` by Gauss-Legendre in ``ln x``."""
    x, w = log_interval_rule(grid.edges[:-1], grid.edges[1:], order)
    vals = np.asarray(fn(x), dtype=float)
    if vals.shape != x.shape:
        vals = np.broadcast_to(vals, x.shape)
    if not np.all(np.isfinite(vals)):
        raise ValueError("projection failed: function returned non-finite values")
    mass = np.sum(w * x * vals, axis=1)
    return Spectrum(grid, mass / grid.mass_weights)


def moment(spec: Spectrum, m: float) -> float:
    """``M_m = int x^m f dx`` with exact per-cell power weights."""
    if m == 1.0:
        return float(np.sum(spec.masses))
    return float(np.sum(spec.grid.power_weights(m) * spec.values))


def mass(spec: Spectrum) -> float:
    return moment(spec, 1.0)


def weighted_lq_norm(spec: Spectrum, m: float, q: float) -> float:
    """``int x^m |f|^q dx`` (the q-th power of the weighted L^q norm)."""
    return float(np.sum(spec.grid.power_weights(m) * np.abs(spec.values) ** q))


def log_moment(spec: Spectrum) -> float:
    """``int x ln x f dx``."""
    return float(np.sum(spec.grid.xlogx_weights * spec.values))


def abs_log_moment(spec: Spectrum) -> float:
    """``int x |ln x| f dx``."""
    return float(np.sum(spec.grid.xabslogx_weights * spec.values))


def total_variation(spec: Spectrum) -> float:
    return float(np.sum(np.abs(np.diff(spec.values))))


def x1_distance(a: Spectrum, b: Spectrum) -> float:
    """``int x |a - b| dx``; both spectra must share the grid."""
    if a.grid is not b.grid and not np.array_equal(a.grid.edges, b.grid.edges):
        raise ValueError("x1_distance needs spectra on the same grid (remap first)")
    return float(np.sum(a.grid.mass_weights * np.abs(a.values - b.values)))


def x1_norm(spec: Spectrum) -> float:
    return float(np.sum(spec.grid.mass_weights * np.abs(spec.values)))


def cumulative_mass(spec: Spectrum, x) -> np.ndarray:
    """Mass below ``x``, spreading each cell's mass uniformly in ``ln x``."""
    e = spec.grid.edges
    cum = np.concatenate([[0.0], np.cumsum(spec.masses)])
    lx = np.log(np.clip(np.asarray(x, dtype=float), e[0], e[-1]))
    return np.interp(lx, np.log(e), cum)


def remap(spec: Spectrum, grid: SizeGrid) -> Spectrum:
    """Conservative transfer onto ``grid`` (mass per overlap interval preserved).

    Mass outside the target grid is dropped; the loss is stored in
    ``meta['remap_loss']``.
    """
    cum = cumulative_mass(spec, grid.edges)
    masses = np.diff(cum)
    loss = float(np.sum(spec.masses) - np.sum(masses))
    out = Spectrum.from_masses(grid, masses, gel_mass=spec.gel_mass, dust_mass=spec.dust_mass,
                               clip_mass=spec.clip_mass)
    out.meta["remap_loss"] = loss
    return out


def dilate(spec: Spectrum, r: float, amplitude: float) -> Spectrum:
    """Represent ``h(x) = amplitude * f(r x)`` exactly on the grid scaled by ``1/r``."""
    return Spectrum(spec.grid.scaled(1.0 / r), amplitude * spec.values)


def format_number(v: float) -> str:
    return f"{v:.16e}"


def write_snapshot(spec: Spectrum, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write("x_center,value\n")
        for x, v in zip(spec.grid.centers, spec.values):
            fh.write(f"{format_number(x)},{format_number(v)}\n")


def read_snapshot(path, grid: SizeGrid | None = None) -> Spectrum:
    """Load a snapshot CSV; the geometric grid is rebuilt from the centers."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    x = np.array([float(r["x_center"]) for r in rows])
    v = np.array([float(r["value"]) for r in rows])
    if grid is None:
        r = x[1] / x[0]
        grid = make_grid(x[0] / np.sqrt(r), x[-1] * np.sqrt(r), len(x))
    return Spectrum(grid, v)
