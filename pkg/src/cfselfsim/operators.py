"""Conservative coagulation, fragmentation and scaling-transport operators.

All three operators act on cell masses ``m_i = w_i v_i`` and are expressed
as *transfer matrices*: ``Q[t, k]`` is the rate (per unit mass in cell
``k``) at which mass moves from cell ``k`` to cell ``t``.  Two extra
compartments collect mass leaving the grid, index ``n`` for the gel
(past ``xmax``) and ``n + 1`` for the dust (below ``xmin``).  Off-diagonal
entries are non-negative and each column sums to zero, so ``Q @ m``
conserves total mass to rounding and the production/destruction split
needed by positivity-preserving time steppers is available directly.

Coagulation uses the mass-flux form
``J(x) = int_0^x int_{x-u}^inf u K(u, v) f(u) f(v) dv du`` with ``f``
piecewise constant; the double integrals against the grid are exact for
the ``u``/``v`` power laws of the kernel (closed form for whole cells,
Gauss-Legendre on the partially covered cells).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import sparse

from ._quad import interval_rule, log_interval_rule, power_integral
from .coefficients import CoefficientSet
from .grid import SizeGrid, Spectrum, limited_slopes

logger = logging.getLogger(__name__)

STENCILS = ("upwind", "vanleer")
RECONSTRUCTIONS = ("linear", "constant")


# --------------------------------------------------------------------------
# coagulation

class CoagulationOperator:
    """Precomputed geometry for the flux-form coagulation operator.

    Inside each cell the density is ``v_k + d_k beta_k(x)`` with ``beta_k``
    the mass-neutral slope basis of the grid and ``d_k`` limited slopes
    (``reconstruction="linear"``), or just ``v_k`` (``"constant"``).  The
    flux is bilinear in ``(v, d)``, so all geometric integrals are tabulated
    once.
    """

    def __init__(self, grid: SizeGrid, coeffs: CoefficientSet, reconstruction: str = "linear",
                 gauss_order: int = 8):
        if reconstruction not in RECONSTRUCTIONS:
            raise ValueError(f"reconstruction must be one of {RECONSTRUCTIONS}")
        self.grid = grid
        self.coeffs = coeffs
        self.linear = reconstruction == "linear"
        self.terms = coeffs.kernel_terms()
        n = grid.n_cells
        e = grid.edges
        self.n = n
        self.order = gauss_order
        # lfull[i, k]: first partner cell lying entirely above e_i - u for all u in cell k
        diff = e[:, None] - e[None, :-1]
        self.lower = np.tril(np.ones((n + 1, n), dtype=bool), -1)
        lfull = np.searchsorted(e, np.where(self.lower, diff, 0.0), side="left")
        self.lfull = np.where(self.lower, np.minimum(lfull, n), n)
        x, w = log_interval_rule(e[:-1], e[1:], gauss_order)
        beta = grid.slope_basis(x, np.arange(n)[:, None])
        # cell integrals of u^(1+p) beta^a and v^q beta^b
        self.u_int = [[np.sum(w * x ** (1.0 + p) * beta**a, axis=1) for a in (0, 1)] for _, p, _ in self.terms]
        self.v_int = [[np.sum(w * x**q * beta**b, axis=1) for b in (0, 1)] for _, _, q in self.terms]
        self.partial = self._partial_tables() if self.terms else None

    def _beta(self, x, cell):
        return self.grid.slope_basis(x, cell)

    def _inner(self, q, l, t, b):
        """``int_t^{e_{l+1}} v^q beta_l(v)^b dv`` for ``t`` inside cell ``l``."""
        e = self.grid.edges
        top = e[l + 1]
        if b == 0:
            return (top ** (q + 1.0) - t ** (q + 1.0)) / (q + 1.0)
        h = self.grid.log_step

        def anti(v):
            vq = v ** (q + 1.0) / (q + 1.0)
            return vq * self._beta(v, l) - vq / ((q + 1.0) * h)

        return anti(top) - anti(t)

    def _partial_tables(self):
        e = self.grid.edges
        n = self.n
        order = self.order
        rows, cols, vals = [], [], {(a, b): [] for a in (0, 1) for b in (0, 1)}
        for i in range(1, n + 1):
            ks = np.arange(i)
            hi = self.lfull[i, ks] - 1
            lo = np.clip(np.searchsorted(e, e[i] - e[ks + 1], side="right") - 1, 0, None)
            cnt = np.maximum(hi - lo + 1, 0)
            total = int(cnt.sum())
            if total == 0:
                continue
            k = np.repeat(ks, cnt)
            l = np.repeat(lo, cnt) + np.arange(total) - np.repeat(np.cumsum(cnt) - cnt, cnt)
            ek, ek1 = e[k], e[k + 1]
            el, el1 = e[l], e[l + 1]
            u1 = np.clip(e[i] - el1, ek, ek1)
            u2 = np.clip(e[i] - el, ek, ek1)
            # cut piece: partner cell truncated at v = e_i - u
            uc, wc = interval_rule(u1, u2, order)
            # whole piece: partner cell entirely above e_i - u
            uf, wf = interval_rule(u2, ek1, order)
            bc = self._beta(uc, k[:, None])
            bf = self._beta(uf, k[:, None])
            for (c, p, q), vint in zip(self.terms, self.v_int):
                t = np.clip(e[i] - uc, el[:, None], el1[:, None])
                for b in (0, 1):
                    inner = self._inner(q, l[:, None], t, b)
                    for a in (0, 1):
                        cut = np.sum(wc * uc ** (1.0 + p) * bc**a * inner, axis=1)
                        whole = np.sum(wf * uf ** (1.0 + p) * bf**a, axis=1) * vint[b][l]
                        vals[(a, b)].append(c * (cut + whole))
            rows.append(i * n + k)
            cols.append(l)
        shape = ((n + 1) * n, n)
        out = {}
        nterms = len(self.terms)
        r = np.concatenate(rows) if rows else np.zeros(0, int)
        cc = np.concatenate(cols) if cols else np.zeros(0, int)
        for a in (0, 1):
            mats = []
            for b in (0, 1):
                if rows:
                    # entries were appended term by term within each edge i
                    chunks = vals[(a, b)]
                    per_edge = [sum(chunks[j * nterms + t] for t in range(nterms))
                                for j in range(len(rows))]
                    data = np.concatenate(per_edge)
                else:
                    data = np.zeros(0)
                mats.append(sparse.csr_matrix((data, (r, cc)), shape=shape))
            out[a] = sparse.hstack(mats, format="csr")
        return out

    def slopes(self, v: np.ndarray) -> np.ndarray:
        return limited_slopes(self.grid, v) if self.linear else np.zeros_like(v)

    def carrier_table(self, v: np.ndarray, d: np.ndarray | None = None) -> np.ndarray:
        """``H[i, k]``: flux through edge ``i`` carried by cell ``k``, per unit ``v_k``."""
        n = self.n
        if not self.terms:
            return np.zeros((n + 1, n))
        if d is None:
            d = self.slopes(v)
        vd = np.concatenate([v, d])
        G = [np.zeros((n + 1, n)), np.zeros((n + 1, n))]
        for (c, _, _), uint, vint in zip(self.terms, self.u_int, self.v_int):
            partner = v * vint[0] + d * vint[1]
            suffix = np.concatenate([np.cumsum(partner[::-1])[::-1], [0.0]])[self.lfull]
            for a in (0, 1):
                G[a] += c * uint[a][None, :] * suffix
        for a in (0, 1):
            G[a] += (self.partial[a] @ vd).reshape(n + 1, n)
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.where(v > 0, d / v, 0.0)
        return np.where(self.lower, G[0] + r[None, :] * G[1], 0.0)

    def carrier_flux(self, v: np.ndarray) -> np.ndarray:
        """``F[i, k]``: mass flux through edge ``i`` carried by particles of cell ``k``."""
        return self.carrier_table(v) * v[None, :]

    def edge_flux(self, v: np.ndarray) -> np.ndarray:
        """Mass flux ``J`` through every edge (``J[0] = 0``, ``J[n]`` is the gel flux)."""
        return self.carrier_flux(v).sum(axis=1)

    def transfer(self, v: np.ndarray) -> np.ndarray:
        """Transfer matrix (``(n+2) x (n+2)``) frozen at cell values ``v``."""
        n = self.n
        Q = np.zeros((n + 2, n + 2))
        if not self.terms:
            return Q
        H = self.carrier_table(v)
        w = self.grid.mass_weights
        # H[t] - H[t+1] for t > k: mass from cell k landing in cell t
        dH = np.where(self.lower[:-1], H[:-1] - H[1:], 0.0)
        Q[:n, :n] = np.maximum(dH, 0.0) / w[None, :]
        Q[n, :n] = np.maximum(H[n], 0.0) / w
        _set_diagonal(Q, n)
        return Q

    def rate(self, v: np.ndarray) -> tuple[np.ndarray, float]:
        """Cell mass rates and gel flux."""
        J = self.edge_flux(v)
        return J[:-1] - J[1:], float(J[-1])


def _set_diagonal(Q: np.ndarray, n: int) -> None:
    idx = np.arange(n)
    Q[idx, idx] = 0.0
    Q[idx, idx] = -Q[:, :n].sum(axis=0)


def coagulation_apply(spec: Spectrum, coeffs: CoefficientSet, op: CoagulationOperator | None = None):
    """Coagulation rate (as a spectrum of value rates) and gel mass flux."""
    op = op or CoagulationOperator(spec.grid, coeffs)
    dm, gel = op.rate(spec.values)
    return Spectrum(spec.grid, dm / spec.grid.mass_weights), gel


# --------------------------------------------------------------------------
# fragmentation

class FragmentationOperator:
    """Fragmentation transfer for one grid and daughter profile.

    The parent mass inside cell ``i`` is distributed as
    ``x (v_i + d_i beta_i(x))``; the transfer matrix is
    ``Q0 + Q1 diag(d/v)`` with both parts tabulated once.
    """

    def __init__(self, grid: SizeGrid, coeffs: CoefficientSet, daughter, reconstruction: str = "linear",
                 gauss_order: int = 8):
        if reconstruction not in RECONSTRUCTIONS:
            raise ValueError(f"reconstruction must be one of {RECONSTRUCTIONS}")
        self.grid = grid
        self.linear = reconstruction == "linear"
        n = grid.n_cells
        e = grid.edges
        self.Q0 = np.zeros((n + 2, n + 2))
        self.Q1 = np.zeros((n + 2, n + 2))
        self.active = coeffs.a0 != 0.0
        if not self.active:
            return
        y, wy = log_interval_rule(e[:-1], e[1:], gauss_order)  # (n, q)
        base = wy * coeffs.frag_rate(y) * y  # mass fragmenting per unit value
        beta = grid.slope_basis(y, np.arange(n)[:, None])
        phi = daughter.cum_mass(e[None, :, None] / y[:, None, :])  # (n, n+1, q)
        dphi = phi[:, 1:, :] - phi[:, :-1, :]
        w = grid.mass_weights
        for Q, load in ((self.Q0, base), (self.Q1, base * beta)):
            share = np.einsum("iq,ijq->ij", load, dphi)  # parent i -> cell j
            Q[:n, :n] = np.tril(share, -1).T / w[None, :]
            Q[n + 1, :n] = np.einsum("iq,iq->i", load, phi[:, 0, :]) / w
            _set_diagonal(Q, n)

    def transfer(self, v: np.ndarray) -> np.ndarray:
        if not self.active or not self.linear:
            return self.Q0.copy()
        d = limited_slopes(self.grid, v)
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.where(v > 0, d / v, 0.0)
        n = self.grid.n_cells
        Q = self.Q0.copy()
        Q[:, :n] += self.Q1[:, :n] * r[None, :]
        return Q

    @property
    def Q(self) -> np.ndarray:
        return self.Q0

    def rate(self, v: np.ndarray) -> tuple[np.ndarray, float]:
        n = self.grid.n_cells
        out = self.transfer(v)[:, :n] @ (self.grid.mass_weights * v)
        return out[:n], float(out[n + 1])


def fragmentation_apply(spec: Spectrum, coeffs: CoefficientSet, daughter,
                        op: FragmentationOperator | None = None):
    """Fragmentation rate (as a spectrum of value rates) and dust mass flux."""
    op = op or FragmentationOperator(spec.grid, coeffs, daughter)
    dm, dust = op.rate(spec.values)
    return Spectrum(spec.grid, dm / spec.grid.mass_weights), dust


# --------------------------------------------------------------------------
# scaling transport

class TransportOperator:
    """``-y dg/dy - 2 g`` as unit-speed advection of mass in ``ln y``.

    The mass per unit ``ln y`` is ``U_i = m_i / h``.  Faces take the upwind
    value (``"upwind"``) or a van Leer limited MUSCL reconstruction
    (``"vanleer"``); both give non-negative face values bounded by
    ``2 U_i``.  Mass leaving through ``xmax`` goes to the gel compartment;
    nothing enters through ``xmin``.
    """

    def __init__(self, grid: SizeGrid, stencil: str = "vanleer"):
        if stencil not in STENCILS:
            raise ValueError(f"unknown transport stencil {stencil!r} (choose from {STENCILS})")
        self.grid = grid
        self.stencil = stencil
        self.h = grid.log_step

    def face_values(self, m: np.ndarray) -> np.ndarray:
        """Upwind-side face values ``U`` at the ``n`` faces above each cell."""
        U = m / self.h
        if self.stencil == "upwind":
            return U.copy()
        dm_ = np.diff(U, prepend=0.0)  # U_i - U_{i-1}
        dp = np.append(np.diff(U), 0.0)  # U_{i+1} - U_i
        prod = dm_ * dp
        with np.errstate(divide="ignore", invalid="ignore"):
            slope = np.where(prod > 0, 2.0 * prod / (dm_ + dp), 0.0)
        # the bound holds in exact arithmetic; subnormal U can break it in floating point
        return np.clip(U + 0.5 * slope, 0.0, 2.0 * U)

    def transfer(self, m: np.ndarray) -> np.ndarray:
        n = self.grid.n_cells
        Q = np.zeros((n + 2, n + 2))
        F = self.face_values(m)
        with np.errstate(divide="ignore", invalid="ignore"):
            coef = np.where(m > 0, F / m, 0.0)
        idx = np.arange(n - 1)
        Q[idx + 1, idx] = coef[:-1]
        Q[n, n - 1] = coef[-1]
        _set_diagonal(Q, n)
        return Q

    def rate(self, m: np.ndarray) -> tuple[np.ndarray, float]:
        F = self.face_values(m)
        inflow = np.concatenate([[0.0], F[:-1]])
        return inflow - F, float(F[-1])


def transport_apply(spec: Spectrum, stencil: str = "vanleer") -> Spectrum:
    """Transport rate (value rates); the outflow is ``rate.meta['outflow']``."""
    op = TransportOperator(spec.grid, stencil)
    dm, out = op.rate(spec.masses)
    res = Spectrum(spec.grid, dm / spec.grid.mass_weights)
    res.meta["outflow"] = out
    return res


# --------------------------------------------------------------------------
# test functions and weak-form ingredients

@dataclass(frozen=True)
class TestFunction:
    """Lipschitz test function with ``theta(0) = 0``.

    ``chi`` optionally gives a cancellation-free closed form of
    ``theta(x+y) - theta(x) - theta(y)``.
    """

    eval: Callable
    deriv: Callable
    label: str
    lipschitz: float = 1.0
    chi: Callable | None = None
    ntheta: Callable | None = None

    __test__ = False  # not a pytest class

    def __call__(self, x):
        return self.eval(np.asarray(x, dtype=float))


def identity_test() -> TestFunction:
    return TestFunction(lambda x: x, lambda x: np.ones_like(x), "x", 1.0,
                        lambda x, y: np.zeros(np.broadcast(x, y).shape),
                        lambda y: np.zeros(np.shape(y)))


def xlogx_test() -> TestFunction:
    """``x ln x`` (not Lipschitz; used for the log-moment identity)."""
    return TestFunction(lambda x: x * np.log(x), lambda x: np.log(x) + 1.0, "xlogx", math.inf)


def power_test(m: float) -> TestFunction:
    return TestFunction(lambda x: x**m, lambda x: m * x ** (m - 1.0), f"x^{m:g}",
                        1.0 if m == 1 else math.inf)


def saturating_test(xi: float) -> TestFunction:
    """``x / (1 + x/xi)``: identity for ``x << xi``, saturates at ``xi``."""

    def chi(x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        return -xi * x * y * (2.0 * xi + x + y) / ((xi + x + y) * (xi + x) * (xi + y))

    return TestFunction(
        lambda x: xi * x / (xi + x),
        lambda x: xi * xi / (xi + x) ** 2,
        f"sat(xi={xi:.6g})",
        1.0,
        chi,
    )


def saturating_ladder(grid: SizeGrid, count: int = 8) -> list[TestFunction]:
    """Saturating test functions with ``xi`` log-spaced over the grid."""
    xis = np.geomspace(grid.xmin * grid.ratio**2, grid.xmax / grid.ratio**2, count)
    return [saturating_test(float(x)) for x in xis]


def chi_theta(theta: TestFunction, x, y):
    """``theta(x+y) - theta(x) - theta(y)``."""
    if theta.chi is not None:
        return theta.chi(x, y)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    return theta(x + y) - theta(x) - theta(y)


def n_theta(theta: TestFunction, daughter, y):
    """``theta(y) - int_0^1 theta(y z) B(z) dz`` via the daughter's mass rule."""
    y = np.asarray(y, dtype=float)
    if theta.ntheta is not None:
        return theta.ntheta(y)
    z, w = daughter.mass_rule()
    inner = theta(y[..., None] * z) / z  # integrand against z B(z) dz
    return theta(y) - np.sum(w * inner, axis=-1)
