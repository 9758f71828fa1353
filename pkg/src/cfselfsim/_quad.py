"""Small quadrature helpers shared by the operator and diagnostic modules."""
from __future__ import annotations

from functools import lru_cache

import numpy as np


@lru_cache(maxsize=None)
def gauss_legendre(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes and weights on [0, 1]."""
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def interval_rule(a, b, n: int):
    """Broadcast a Gauss-Legendre rule onto the intervals ``[a, b]``.

    Returns nodes and weights with a trailing axis of length ``n``.
    """
    t, w = gauss_legendre(n)
    a = np.asarray(a, dtype=float)[..., None]
    b = np.asarray(b, dtype=float)[..., None]
    return a + (b - a) * t, (b - a) * w


def log_interval_rule(a, b, n: int):
    """Gauss-Legendre rule in ``ln x`` on ``[a, b]`` (``a > 0``).

    Exact-to-rounding for smooth functions of ``ln x``; power laws are the
    typical integrand, which is why the size grid integrals use it.
    """
    la = np.log(np.asarray(a, dtype=float))
    lb = np.log(np.asarray(b, dtype=float))
    z, wz = interval_rule(la, lb, n)
    x = np.exp(z)
    return x, wz * x


def power_integral(a, b, m: float):
    """Closed form of the integral of ``x**m`` over ``[a, b]``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if m == -1.0:
        return np.log(b / a)
    return (b ** (m + 1.0) - a ** (m + 1.0)) / (m + 1.0)


def composite_breakpoints(breaks, panels: int) -> np.ndarray:
    """Split ``[min(breaks), max(breaks)]`` into about ``panels`` panels,
    always keeping every entry of ``breaks`` as a panel boundary."""
    breaks = np.unique(np.asarray(breaks, dtype=float))
    span = breaks[-1] - breaks[0]
    pieces = [breaks[:1]]
    for lo, hi in zip(breaks[:-1], breaks[1:]):
        k = max(1, int(np.ceil(panels * (hi - lo) / span)))
        pieces.append(np.linspace(lo, hi, k + 1)[1:])
    return np.concatenate(pieces)
