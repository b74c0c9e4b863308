"""Smooth step and bump functions shared by every cutoff in the package.

All cutoffs (Littlewood-Paley profile, annulus projections, spatial
mollifier, time cutoffs, oscillators, base-case time profile) are built from
the single C-infinity step below, so there is one audited implementation.
"""

from __future__ import annotations

import numpy as np


def _flat(y: np.ndarray) -> np.ndarray:
    """exp(-1/y) for y > 0, 0 otherwise."""
    y = np.asarray(y, dtype=float)
    out = np.zeros_like(y)
    pos = y > 0
    out[pos] = np.exp(-1.0 / y[pos])
    return out


def _flat_d(y: np.ndarray) -> np.ndarray:
    """Derivative of ``_flat``."""
    y = np.asarray(y, dtype=float)
    out = np.zeros_like(y)
    pos = y > 0
    yp = y[pos]
    out[pos] = np.exp(-1.0 / yp) / yp**2
    return out


def smooth_step(y) -> np.ndarray:
    """C-infinity step: 0 for y <= 0, 1 for y >= 1, monotone in between.

    Satisfies ``smooth_step(y) + smooth_step(1 - y) == 1`` exactly in exact
    arithmetic, which is what makes the squared time cutoffs a partition of
    unity.
    """
    y = np.asarray(y, dtype=float)
    a = _flat(y)
    b = _flat(1.0 - y)
    return a / (a + b)


def smooth_step_d(y) -> np.ndarray:
    """First derivative of :func:`smooth_step`."""
    y = np.asarray(y, dtype=float)
    a = _flat(y)
    b = _flat(1.0 - y)
    da = _flat_d(y)
    db = -_flat_d(1.0 - y)
    s = a + b
    return (da * b - a * db) / (s * s)


def bump(y) -> np.ndarray:
    """Unnormalized C-infinity bump exp(1 - 1/(1 - y^2)) supported on (-1, 1), peak 1."""
    y = np.asarray(y, dtype=float)
    out = np.zeros_like(y)
    inside = np.abs(y) < 1.0
    yi = y[inside]
    out[inside] = np.exp(1.0 - 1.0 / (1.0 - yi * yi))
    return out


def bump_d(y) -> np.ndarray:
    """Derivative of :func:`bump`."""
    y = np.asarray(y, dtype=float)
    out = np.zeros_like(y)
    inside = np.abs(y) < 1.0
    yi = y[inside]
    w = 1.0 - yi * yi
    out[inside] = np.exp(1.0 - 1.0 / w) * (-2.0 * yi / (w * w))
    return out


def plateau(r, inner: float, outer: float) -> np.ndarray:
    """Radial cutoff equal to 1 for r <= inner and 0 for r >= outer."""
    return 1.0 - smooth_step((np.asarray(r, dtype=float) - inner) / (outer - inner))


def band(r, zero_in: float, one_in: float, one_out: float, zero_out: float) -> np.ndarray:
    """Annular cutoff: 0 below ``zero_in``, 1 on [one_in, one_out], 0 above ``zero_out``."""
    r = np.asarray(r, dtype=float)
    rise = smooth_step((r - zero_in) / (one_in - zero_in))
    fall = 1.0 - smooth_step((r - one_out) / (zero_out - one_out))
    return rise * fall
