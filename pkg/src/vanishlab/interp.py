"""Periodic interpolation of cell-centred grid data at arbitrary points."""

from __future__ import annotations

import numpy as np

SNAP_TOL = 1e-9


def _split(x, n):
    u = np.asarray(x, dtype=float) * n - 0.5
    base = np.floor(u)
    frac = u - base
    # grid-aligned departure points must give pure index shifts
    up = frac > 1.0 - SNAP_TOL
    frac = np.where(up | (frac < SNAP_TOL), 0.0, frac)
    base = base + up
    return base.astype(np.int64) % n, frac


def bilinear(values: np.ndarray, x1, x2) -> np.ndarray:
    """Monotone periodic bilinear interpolation: every output is a convex
    combination of four neighbouring samples."""
    n = values.shape[0]
    i0, a = _split(x1, n)
    j0, b = _split(x2, n)
    i1 = (i0 + 1) % n
    j1 = (j0 + 1) % n
    # shear departures keep one coordinate on the grid
    if not np.any(b):
        return (1 - a) * values[i0, j0] + a * values[i1, j0]
    if not np.any(a):
        return (1 - b) * values[i0, j0] + b * values[i0, j1]
    return ((1 - a) * ((1 - b) * values[i0, j0] + b * values[i0, j1])
            + a * ((1 - b) * values[i1, j0] + b * values[i1, j1]))


def _lagrange4(a):
    return (
        -a * (a - 1) * (a - 2) / 6,
        (a + 1) * (a - 1) * (a - 2) / 2,
        -(a + 1) * a * (a - 2) / 2,
        (a + 1) * a * (a - 1) / 6,
    )


def cubic(values: np.ndarray, x1, x2) -> np.ndarray:
    """Tensor four-point Lagrange interpolation (third order, not monotone)."""
    n = values.shape[0]
    i0, a = _split(x1, n)
    j0, b = _split(x2, n)
    wa = _lagrange4(a)
    wb = _lagrange4(b)
    out = np.zeros(np.broadcast(i0, j0).shape)
    for p in range(4):
        ip = (i0 + p - 1) % n
        inner = np.zeros_like(out)
        for q in range(4):
            inner += wb[q] * values[ip, (j0 + q - 1) % n]
        out += wa[p] * inner
    return out


def interpolate(values: np.ndarray, x1, x2, mode: str = "monotone-bilinear") -> np.ndarray:
    if mode == "monotone-bilinear":
        return bilinear(values, x1, x2)
    if mode == "cubic":
        return cubic(values, x1, x2)
    raise ValueError(f"unknown interpolation mode {mode!r}")


def trig_eval(values: np.ndarray, x1, x2) -> np.ndarray:
    """Evaluate the trigonometric interpolant of cell-centred samples by direct
    summation; intended for a modest number of probe points."""
    n = values.shape[0]
    k = np.fft.fftfreq(n, d=1.0 / n)
    shift = np.exp(-1j * np.pi * k / n)
    c = np.fft.fft2(values) * np.outer(shift, shift) / n**2
    x1 = np.atleast_1d(np.asarray(x1, dtype=float))
    x2 = np.atleast_1d(np.asarray(x2, dtype=float))
    # the real part is taken at the end, so the Nyquist terms need no splitting
    e1 = np.exp(2j * np.pi * np.outer(x1, k))
    e2 = np.exp(2j * np.pi * np.outer(x2, k))
    return np.einsum("pi,ij,pj->p", e1, c, e2).real
