"""Dyadic (Littlewood-Paley) frequency decomposition and Holder-norm proxies."""

from __future__ import annotations

import logging
import os
import warnings
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from ._smooth import plateau
from .grid_spectral import ScalarField, apply_multiplier, ifft2

log = logging.getLogger(__name__)


class ResolutionWarning(UserWarning):
    """Raised when a requested quantity needs frequencies the grid cannot represent."""


@dataclass(frozen=True)
class LpProfile:
    """Radial low-pass profile psi: 1 on [0, inner], 0 on [outer, inf), C-infinity, monotone."""

    inner: float = 1.0
    outer: float = 1.5

    def __call__(self, r) -> np.ndarray:
        return plateau(r, self.inner, self.outer)


DEFAULT_PROFILE = LpProfile()


def block_multiplier(kabs: np.ndarray, j: int, psi: Callable = DEFAULT_PROFILE) -> np.ndarray:
    """chi_j(|k|) = psi(k / 2^j) - psi(k / 2^(j-1)) for j >= 0."""
    if j < -1:
        return np.zeros_like(kabs)
    if j == -1:
        return (kabs == 0).astype(float)
    return psi(kabs / 2.0**j) - psi(kabs / 2.0 ** (j - 1))


def lp_block(f: ScalarField, j: int, psi: Callable = DEFAULT_PROFILE) -> ScalarField:
    """Littlewood-Paley block Delta_j f.

    ``j = -1`` returns the mean as a constant field, ``j < -1`` returns zero.
    """
    return apply_multiplier(f, block_multiplier(f.grid.kabs, j, psi))


def low_pass(f: ScalarField, j: int, psi: Callable = DEFAULT_PROFILE) -> ScalarField:
    """S_j f with multiplier psi(k / 2^j)."""
    return apply_multiplier(f, psi(f.grid.kabs / 2.0**j))


def max_block(grid) -> int:
    """Largest j whose block can contain a grid wavenumber."""
    kmax = float(grid.kabs.max())
    j = 0
    while 2.0 ** (j - 1) < kmax:
        j += 1
    return j


def block_sup_norms(f: ScalarField, psi: Callable = DEFAULT_PROFILE) -> list[tuple[int, float]]:
    """(j, max|Delta_j f|) for every block from -1 up to the grid's largest."""
    g = f.grid
    out = [(-1, abs(f.mean()))]
    for j in range(0, max_block(g) + 1):
        vals = ifft2(f.hat * block_multiplier(g.kabs, j, psi), g.n)
        out.append((j, float(np.max(np.abs(vals)))))
    return out


def holder_norm(f: ScalarField, alpha: float, psi: Callable = DEFAULT_PROFILE) -> float:
    """Besov proxy sup_j 2^(j alpha) max|Delta_j f| for the C^alpha norm.

    Blocks with 2^(j+1) above the dealiasing cutoff are excluded; if such a
    block carries non-negligible content a :class:`ResolutionWarning` is issued.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    cutoff = f.grid.dealias_cutoff
    best = 0.0
    skipped = 0.0
    for j, s in block_sup_norms(f, psi):
        if 2.0 ** (j + 1) > cutoff:
            skipped = max(skipped, s)
            continue
        best = max(best, 2.0 ** (j * alpha) * s)
    if skipped > 1e-12 * max(best, 1e-300) and skipped > 1e-14:
        warnings.warn(
            f"holder_norm: unresolved dyadic blocks carry sup {skipped:.3e} and were skipped",
            ResolutionWarning,
            stacklevel=2,
        )
    return best


class CnNorm(NamedTuple):
    value: float
    under_resolved: bool


def c_n_norm(f: ScalarField, N: int) -> CnNorm:
    """max over the grid of |d^gamma f| for all multi-indices |gamma| <= N."""
    if N < 0:
        raise ValueError("N must be non-negative")
    g = f.grid
    best = 0.0
    hat = f.hat
    for order in range(N + 1):
        for a in range(order + 1):
            b = order - a
            vals = ifft2(hat * g.ik1**a * g.ik2**b, g.n)
            best = max(best, float(np.max(np.abs(vals))))
    under = 2.0**N > g.n / 2
    if under:
        warnings.warn(f"c_n_norm: 2^{N} exceeds grid resolution n/2 = {g.n // 2}", ResolutionWarning, stacklevel=2)
    return CnNorm(best, under)


def write_spectrum_csv(path: str | os.PathLike, f: ScalarField, psi: Callable = DEFAULT_PROFILE) -> None:
    """Export block sup norms with header ``j,block_sup_norm``."""
    rows = block_sup_norms(f, psi)
    with open(path, "w") as fh:
        fh.write("j,block_sup_norm\n")
        for j, s in rows:
            fh.write(f"{j},{s:.17g}\n")
