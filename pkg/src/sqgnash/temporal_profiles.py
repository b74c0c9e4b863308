"""Time cutoffs chi_k, enlarged cutoffs chi-tilde_k and 1-periodic oscillators.

Cutoffs live on the time lattice t_k = k tau.  ``chi_k`` squares to a partition
of unity with supp chi_k inside (t_k - 2tau/3, t_k + 2tau/3); ``chi_tilde_k`` is
identically 1 on that support and vanishes for |t - t_k| >= 0.97 tau.

Oscillators g are normalized C-infinity bumps in disjoint slots of [0, 1), one
slot per (direction, parity, Newton level).  With f = 1 - g^2 the primitive
f_prim(s) = int_0^s f is exactly 1-periodic.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.integrate import quad

from ._smooth import bump, bump_d, smooth_step, smooth_step_d

CHI_TILDE_OUTER = 0.97
BUMP_FILL = 0.8
GL_NODES = 64
GL_PANELS = 16

_GL_X, _GL_W = np.polynomial.legendre.leggauss(GL_NODES)


def chi(y) -> np.ndarray:
    """Unit-lattice cutoff chi(y), y = (t - t_k)/tau, with sum_k chi(y - k)^2 = 1."""
    y = np.abs(np.asarray(y, dtype=float))
    s = smooth_step(3.0 * y - 1.0)
    # cos(pi/2) is not exactly zero in floating point
    return np.where(s >= 1.0, 0.0, np.cos(0.5 * np.pi * s))


def chi_d(y) -> np.ndarray:
    """d chi / dy."""
    y = np.asarray(y, dtype=float)
    z = 3.0 * np.abs(y) - 1.0
    return -np.sin(0.5 * np.pi * smooth_step(z)) * 1.5 * np.pi * smooth_step_d(z) * np.sign(y)


def chi_tilde(y) -> np.ndarray:
    y = np.abs(np.asarray(y, dtype=float))
    w = CHI_TILDE_OUTER - 2.0 / 3.0
    return 1.0 - smooth_step((y - 2.0 / 3.0) / w)


def chi_tilde_d(y) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    w = CHI_TILDE_OUTER - 2.0 / 3.0
    return -smooth_step_d((np.abs(y) - 2.0 / 3.0) / w) / w * np.sign(y)


def _bump_sq(y):
    return bump(y) ** 2


class _BumpSquarePrimitive:
    """J(y) = int_{-1}^{y} bump(s)^2 ds by composite Gauss-Legendre."""

    def __init__(self, panels: int = GL_PANELS):
        self.edges = np.linspace(-1.0, 1.0, panels + 1)
        cum = [0.0]
        for a, b in zip(self.edges[:-1], self.edges[1:]):
            cum.append(cum[-1] + self._gl(a, b))
        self.cum = np.array(cum)
        self.total = self.cum[-1]

    @staticmethod
    def _gl(a, b):
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        half = 0.5 * (b - a)
        mid = 0.5 * (b + a)
        nodes = mid[..., None] + half[..., None] * _GL_X
        return half * np.sum(_GL_W * _bump_sq(nodes), axis=-1)

    def __call__(self, y) -> np.ndarray:
        y = np.clip(np.asarray(y, dtype=float), -1.0, 1.0)
        p = np.clip(np.searchsorted(self.edges, y, side="right") - 1, 0, len(self.edges) - 2)
        return self.cum[p] + self._gl(self.edges[p], y)


@dataclass(frozen=True)
class TemporalProfileSet:
    """Cutoffs on the lattice k * tau and the oscillator family g_{xi, parity, n}."""

    tau: float
    directions: tuple[tuple[int, int], ...]
    gamma: int

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if len(self.directions) * 2 * self.gamma < 1:
            raise ValueError("need at least one oscillator slot")

    # -- cutoffs -----------------------------------------------------------
    def t_k(self, k: int) -> float:
        return k * self.tau

    def chi_k(self, k: int, t) -> np.ndarray:
        return chi((np.asarray(t, dtype=float) - k * self.tau) / self.tau)

    def chi_k_dt(self, k: int, t) -> np.ndarray:
        return chi_d((np.asarray(t, dtype=float) - k * self.tau) / self.tau) / self.tau

    def chi_tilde_k(self, k: int, t) -> np.ndarray:
        return chi_tilde((np.asarray(t, dtype=float) - k * self.tau) / self.tau)

    def chi_tilde_k_dt(self, k: int, t) -> np.ndarray:
        return chi_tilde_d((np.asarray(t, dtype=float) - k * self.tau) / self.tau) / self.tau

    def active_k(self, t: float, enlarged: bool = False) -> list[int]:
        """Lattice indices whose (enlarged) cutoff is nonzero at time t."""
        r = CHI_TILDE_OUTER if enlarged else 2.0 / 3.0
        lo = int(np.floor(t / self.tau - r)) - 1
        hi = int(np.ceil(t / self.tau + r)) + 1
        return [k for k in range(lo, hi + 1) if abs(t - k * self.tau) < r * self.tau]

    # -- oscillators -------------------------------------------------------
    @property
    def n_slots(self) -> int:
        return len(self.directions) * 2 * self.gamma

    @property
    def slot_width(self) -> float:
        return 1.0 / self.n_slots

    @cached_property
    def _primitive(self) -> _BumpSquarePrimitive:
        return _BumpSquarePrimitive()

    @cached_property
    def bump_norm_sq(self) -> float:
        """int_{-1}^{1} bump^2, cross-checked against adaptive quadrature."""
        val = self._primitive.total
        ref, _ = quad(_bump_sq, -1.0, 1.0, epsabs=1e-14, epsrel=1e-12, limit=200)
        if abs(val - ref) > 1e-12:
            raise RuntimeError(f"bump quadrature mismatch {val} vs {ref}")
        return val

    @property
    def half_width(self) -> float:
        return 0.5 * BUMP_FILL * self.slot_width

    @cached_property
    def amplitude(self) -> float:
        return 1.0 / np.sqrt(self.half_width * self.bump_norm_sq)

    def keys(self) -> list[tuple[tuple[int, int], int, int]]:
        return [(xi, p, n) for n in range(1, self.gamma + 1) for p in (0, 1) for xi in self.directions]

    def slot(self, key) -> int:
        xi, parity, n = key
        xi = tuple(int(v) for v in xi)
        if xi not in self.directions or parity not in (0, 1) or not 1 <= n <= self.gamma:
            raise KeyError(f"unknown oscillator key {key!r}")
        return ((n - 1) * 2 + parity) * len(self.directions) + self.directions.index(xi)

    def slot_center(self, key) -> float:
        return (self.slot(key) + 0.5) * self.slot_width

    def _local(self, key, s):
        frac = np.mod(np.asarray(s, dtype=float), 1.0)
        return (frac - self.slot_center(key)) / self.half_width, frac

    def g(self, key, s) -> np.ndarray:
        """Oscillator g_key(s), 1-periodic in s."""
        y, _ = self._local(key, s)
        return self.amplitude * bump(y)

    def g_ds(self, key, s) -> np.ndarray:
        y, _ = self._local(key, s)
        return self.amplitude * bump_d(y) / self.half_width

    def f(self, key, s) -> np.ndarray:
        return 1.0 - self.g(key, s) ** 2

    def g_sq_primitive(self, key, s) -> np.ndarray:
        """int_0^{frac(s)} g^2 (without the integer-period part)."""
        y, _ = self._local(key, s)
        return self.amplitude**2 * self.half_width * self._primitive(y)

    def f_prim(self, key, s) -> np.ndarray:
        """int_0^s (1 - g^2), exactly 1-periodic."""
        _, frac = self._local(key, s)
        return frac - self.g_sq_primitive(key, s)

    def oscillator_key(self, xi, k: int, n: int):
        """Key of g_{xi, k, n}: the parity of k selects the even/odd family."""
        return (tuple(int(v) for v in xi), int(k) % 2, int(n))


def build_profiles(directions, gamma: int, tau: float) -> TemporalProfileSet:
    """Cutoffs with lattice spacing ``tau`` and |F| * 2 * Gamma oscillators."""
    return TemporalProfileSet(float(tau), tuple(tuple(int(v) for v in xi) for xi in directions), int(gamma))


def eval_f_prim(profiles: TemporalProfileSet, key, t) -> np.ndarray:
    return profiles.f_prim(key, t)


def write_profile_csv(path: str | os.PathLike, t, values) -> None:
    """Export a sampled profile with header ``t,value``."""
    data = np.column_stack([np.asarray(t, dtype=float), np.asarray(values, dtype=float)])
    np.savetxt(path, data, delimiter=",", header="t,value", comments="", fmt="%.17g")
