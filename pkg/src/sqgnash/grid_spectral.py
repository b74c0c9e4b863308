"""Periodic fields on the torus [0, 2*pi)^2 and Fourier-multiplier operators.

Fields are stored on an ``n x n`` collocation grid; array index ``[i, j]``
corresponds to the point ``(x1, x2) = (2*pi*i/n, 2*pi*j/n)`` so that x2 is the
fastest-varying axis.  Spectral coefficients use the real-to-complex layout of
``scipy.fft.rfft2`` with ``norm="forward"``, i.e. ``f(x) = sum_k fhat(k) e^{ik.x}``.
"""

from __future__ import annotations

import logging
import os
import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Callable, Union

import numpy as np
import scipy.fft as sfft

log = logging.getLogger(__name__)

_WORKERS = max(1, int(os.environ.get("SQG_THREADS", "1") or 1))


def set_threads(n: int) -> None:
    """Cap the number of FFT worker threads."""
    global _WORKERS
    _WORKERS = max(1, int(n))


def fft2(values: np.ndarray) -> np.ndarray:
    return sfft.rfft2(values, norm="forward", workers=_WORKERS)


def ifft2(coeffs: np.ndarray, n: int) -> np.ndarray:
    return sfft.irfft2(coeffs, s=(n, n), norm="forward", workers=_WORKERS)


@dataclass(frozen=True)
class Grid:
    """Uniform ``n x n`` grid of the periodic square with a dealiasing rule."""

    n: int
    dealias_fraction: float = 2.0 / 3.0

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 4 or self.n % 2:
            raise ValueError(f"grid size must be an even integer >= 4, got {self.n}")
        if not 0.0 < self.dealias_fraction <= 1.0:
            raise ValueError(f"dealias_fraction must lie in (0, 1], got {self.dealias_fraction}")

    @cached_property
    def x(self) -> np.ndarray:
        return 2.0 * np.pi * np.arange(self.n) / self.n

    @cached_property
    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        x1, x2 = np.meshgrid(self.x, self.x, indexing="ij")
        return x1, x2

    @cached_property
    def k1(self) -> np.ndarray:
        """Integer wavenumbers along x1, shape (n, 1), values in [-n/2, n/2)."""
        return np.fft.fftfreq(self.n, 1.0 / self.n).round().astype(np.int64)[:, None]

    @cached_property
    def k2(self) -> np.ndarray:
        """Integer wavenumbers along x2 (rfft half axis), shape (1, n/2 + 1)."""
        return np.arange(self.n // 2 + 1, dtype=np.int64)[None, :]

    @cached_property
    def shape_hat(self) -> tuple[int, int]:
        return (self.n, self.n // 2 + 1)

    @cached_property
    def ksq(self) -> np.ndarray:
        return (self.k1**2 + self.k2**2).astype(float)

    @cached_property
    def kabs(self) -> np.ndarray:
        return np.sqrt(self.ksq)

    @cached_property
    def inv_kabs(self) -> np.ndarray:
        """1/|k| with the zero mode mapped to 0."""
        with np.errstate(divide="ignore"):
            out = np.where(self.ksq > 0, 1.0 / self.kabs, 0.0)
        return out

    @cached_property
    def inv_ksq(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            out = np.where(self.ksq > 0, 1.0 / self.ksq, 0.0)
        return out

    @cached_property
    def ik1(self) -> np.ndarray:
        """Multiplier of d/dx1; the Nyquist row is zeroed to keep outputs real."""
        k = self.k1.astype(float).copy()
        k[k == -self.n // 2] = 0.0
        return 1j * np.broadcast_to(k, self.shape_hat)

    @cached_property
    def ik2(self) -> np.ndarray:
        k = self.k2.astype(float).copy()
        k[k == self.n // 2] = 0.0
        return 1j * np.broadcast_to(k, self.shape_hat)

    @cached_property
    def dealias_cutoff(self) -> float:
        return self.dealias_fraction * self.n / 2

    @cached_property
    def dealias_mask(self) -> np.ndarray:
        kmax = np.maximum(np.abs(self.k1), np.abs(self.k2))
        return kmax <= self.dealias_cutoff + 1e-12

    @cached_property
    def mode_weight(self) -> np.ndarray:
        """Multiplicity of each rfft coefficient in the full spectrum (for Parseval sums)."""
        w = np.full(self.shape_hat, 2.0)
        w[:, 0] = 1.0
        w[:, -1] = 1.0
        return w

    def multiplier(self, func: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
        """Evaluate a radial multiplier ``func(|k|)`` on the spectral layout."""
        return np.asarray(func(self.kabs), dtype=float)


FieldLike = Union["ScalarField", "VectorField", "SymTensorField"]


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


class ScalarField:
    """Real periodic scalar field; physical values and coefficients cached lazily."""

    __slots__ = ("grid", "_values", "_hat")
    rank = 1

    def __init__(self, grid: Grid, values: np.ndarray | None = None, *, hat: np.ndarray | None = None):
        if (values is None) == (hat is None):
            raise ValueError("give exactly one of values or hat")
        self.grid = grid
        if values is not None:
            values = np.array(values, dtype=float, copy=True)
            if values.shape != (grid.n, grid.n):
                raise ValueError(f"expected shape {(grid.n, grid.n)}, got {values.shape}")
            self._values = _readonly(values)
            self._hat = None
        else:
            hat = np.array(hat, dtype=complex, copy=True)
            if hat.shape != grid.shape_hat:
                raise ValueError(f"expected coefficient shape {grid.shape_hat}, got {hat.shape}")
            self._hat = _readonly(hat)
            self._values = None

    @classmethod
    def from_function(cls, grid: Grid, func: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> "ScalarField":
        x1, x2 = grid.mesh
        return cls(grid, np.broadcast_to(func(x1, x2), (grid.n, grid.n)))

    @classmethod
    def zeros(cls, grid: Grid) -> "ScalarField":
        return cls(grid, np.zeros((grid.n, grid.n)))

    @property
    def values(self) -> np.ndarray:
        if self._values is None:
            self._values = _readonly(ifft2(self._hat, self.grid.n))
        return self._values

    @property
    def hat(self) -> np.ndarray:
        if self._hat is None:
            self._hat = _readonly(fft2(self._values))
        return self._hat

    @property
    def components(self) -> tuple["ScalarField"]:
        return (self,)

    def mean(self) -> float:
        return float(self.hat[0, 0].real)

    def sup(self) -> float:
        return float(np.max(np.abs(self.values)))

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values if self._values is not None else self._hat)))

    def __add__(self, other: "ScalarField") -> "ScalarField":
        _same_grid(self, other)
        return ScalarField(self.grid, self.values + other.values)

    def __sub__(self, other: "ScalarField") -> "ScalarField":
        _same_grid(self, other)
        return ScalarField(self.grid, self.values - other.values)

    def __neg__(self) -> "ScalarField":
        return ScalarField(self.grid, -self.values)

    def __mul__(self, c: float) -> "ScalarField":
        return ScalarField(self.grid, float(c) * self.values)

    __rmul__ = __mul__

    def __repr__(self) -> str:
        return f"ScalarField(n={self.grid.n}, sup={self.sup():.3e})"


class _MultiField:
    """Shared behaviour of vector and symmetric tensor fields."""

    __slots__ = ("components",)
    rank = 0

    def __init__(self, *components: ScalarField):
        if len(components) != self.rank:
            raise ValueError(f"{type(self).__name__} needs {self.rank} components")
        for c in components[1:]:
            _same_grid(components[0], c)
        self.components = tuple(components)

    @property
    def grid(self) -> Grid:
        return self.components[0].grid

    @classmethod
    def from_arrays(cls, grid: Grid, *arrays: np.ndarray):
        return cls(*(ScalarField(grid, a) for a in arrays))

    @classmethod
    def zeros(cls, grid: Grid):
        return cls(*(ScalarField.zeros(grid) for _ in range(cls.rank)))

    def stack(self) -> np.ndarray:
        return np.stack([c.values for c in self.components])

    def sup(self) -> float:
        return max(c.sup() for c in self.components)

    def is_finite(self) -> bool:
        return all(c.is_finite() for c in self.components)

    def __add__(self, other):
        return type(self)(*(a + b for a, b in zip(self.components, other.components)))

    def __sub__(self, other):
        return type(self)(*(a - b for a, b in zip(self.components, other.components)))

    def __neg__(self):
        return type(self)(*(-a for a in self.components))

    def __mul__(self, c: float):
        return type(self)(*(a * c for a in self.components))

    __rmul__ = __mul__

    def __getitem__(self, i: int) -> ScalarField:
        return self.components[i]

    def __repr__(self) -> str:
        return f"{type(self).__name__}(n={self.grid.n}, sup={self.sup():.3e})"


class VectorField(_MultiField):
    """Two-component vector field (v1, v2)."""

    rank = 2


class SymTensorField(_MultiField):
    """Symmetric 2-tensor stored as (R11, R12, R22)."""

    rank = 3

    def trace(self) -> ScalarField:
        return self.components[0] + self.components[2]

    def matrix(self) -> np.ndarray:
        """Pointwise 2x2 matrices, shape (n, n, 2, 2)."""
        r11, r12, r22 = (c.values for c in self.components)
        return np.stack([np.stack([r11, r12], -1), np.stack([r12, r22], -1)], -2)


def _same_grid(a, b) -> None:
    if a.grid != b.grid:
        raise ValueError(f"grid mismatch: n={a.grid.n} vs n={b.grid.n}")


def _check_finite(f) -> None:
    if not f.is_finite():
        raise ValueError("field contains non-finite values")


def apply_multiplier(f: ScalarField, m: np.ndarray) -> ScalarField:
    """Multiply the coefficients of ``f`` by the array ``m`` (spectral layout)."""
    return ScalarField(f.grid, hat=f.hat * m)


def map_components(f, op):
    """Apply a scalar operator to every component of a scalar/vector/tensor field."""
    if isinstance(f, ScalarField):
        return op(f)
    return type(f)(*(op(c) for c in f.components))


def fractional_laplacian(f: ScalarField, s: float) -> ScalarField:
    """Lambda^s = (-Delta)^{s/2}.

    For ``s > 0`` the zero mode is multiplied by |0|^s = 0.  For ``s <= 0`` the
    mean is projected out first (and logged when it is not negligible).
    """
    _check_finite(f)
    g = f.grid
    if s > 0:
        m = g.kabs**s
    else:
        mean = f.mean()
        if abs(mean) > 1e-12 * max(1.0, f.sup()):
            log.info("fractional_laplacian(s=%g): projected out mean %.3e", s, mean)
        with np.errstate(divide="ignore"):
            m = np.where(g.ksq > 0, g.kabs ** float(s) if s != 0 else 1.0, 0.0)
    return apply_multiplier(f, m)


def gradient(f: ScalarField) -> VectorField:
    g = f.grid
    return VectorField(apply_multiplier(f, g.ik1), apply_multiplier(f, g.ik2))


def perp_gradient(f: ScalarField) -> VectorField:
    """grad-perp f = (-d2 f, d1 f)."""
    g = f.grid
    return VectorField(apply_multiplier(f, -g.ik2), apply_multiplier(f, g.ik1))


def divergence(v: VectorField) -> ScalarField:
    g = v.grid
    return ScalarField(g, hat=g.ik1 * v[0].hat + g.ik2 * v[1].hat)


def laplacian(f: ScalarField) -> ScalarField:
    return apply_multiplier(f, -f.grid.ksq)


def poisson_solve(f: ScalarField) -> ScalarField:
    """Zero-mean solution psi of Delta psi = f."""
    _check_finite(f)
    mean = f.mean()
    if abs(mean) > 1e-12 * max(1.0, f.sup()):
        raise ValueError(f"poisson_solve needs zero-mean input; mean = {mean:.6e}")
    return apply_multiplier(f, -f.grid.inv_ksq)


def riesz_velocity(theta: ScalarField) -> VectorField:
    """u = T[theta] = grad-perp Lambda^{-1} theta (mean projected out)."""
    _check_finite(theta)
    g = theta.grid
    h = theta.hat * g.inv_kabs
    return VectorField(ScalarField(g, hat=-g.ik2 * h), ScalarField(g, hat=g.ik1 * h))


def dealias(f):
    """Zero coefficients with max(|k1|, |k2|) above ``dealias_fraction * n / 2``."""
    return map_components(f, lambda c: apply_multiplier(c, c.grid.dealias_mask))


def product(f: ScalarField, g: ScalarField) -> ScalarField:
    """Dealiased product: both factors truncated, multiplied pointwise, result truncated."""
    _same_grid(f, g)
    grid = f.grid
    mask = grid.dealias_mask
    a = ifft2(f.hat * mask, grid.n)
    b = ifft2(g.hat * mask, grid.n)
    return ScalarField(grid, hat=fft2(a * b) * mask)


def dot(u: VectorField, v: VectorField) -> ScalarField:
    """Dealiased pointwise dot product u . v."""
    grid = u.grid
    mask = grid.dealias_mask
    acc = np.zeros((grid.n, grid.n))
    for a, b in zip(u.components, v.components):
        acc += ifft2(a.hat * mask, grid.n) * ifft2(b.hat * mask, grid.n)
    return ScalarField(grid, hat=fft2(acc) * mask)


def advect(u: VectorField, f: ScalarField) -> ScalarField:
    """Dealiased transport term u . grad f."""
    return dot(u, gradient(f))


def resample(f, n_new: int, dealias_fraction: float | None = None):
    """Band-limited interpolation (zero padding or truncation) onto another grid size."""

    def one(c: ScalarField) -> ScalarField:
        g_old = c.grid
        g_new = Grid(n_new, g_old.dealias_fraction if dealias_fraction is None else dealias_fraction)
        return ScalarField(g_new, hat=resample_hat(c.hat, g_old.n, n_new))

    return map_components(f, one)


def resample_hat(hat: np.ndarray, n_old: int, n_new: int) -> np.ndarray:
    """Map rfft coefficients between grid sizes; Nyquist modes are dropped."""
    out = np.zeros((n_new, n_new // 2 + 1), dtype=complex)
    m = min(n_old, n_new) // 2
    # keep |k1| < m and 0 <= k2 < m
    out[:m, :m] = hat[:m, :m]
    out[n_new - m + 1:, :m] = hat[n_old - m + 1:, :m]
    return out


# ---------------------------------------------------------------------------
# Snapshot I/O
# ---------------------------------------------------------------------------

SQGF_MAGIC = b"SQGF"
SQGF_VERSION = 1


def write_sqgf(path: str | os.PathLike, field: FieldLike) -> None:
    """Write a field in the SQGF binary format."""
    comps = field.components
    n = comps[0].grid.n
    header = SQGF_MAGIC + struct.pack("<IQB", SQGF_VERSION, n, len(comps))
    data = np.stack([c.values for c in comps]).astype("<f8", copy=False)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(data).tobytes())


def read_sqgf(path: str | os.PathLike, dealias_fraction: float = 2.0 / 3.0) -> FieldLike:
    """Read an SQGF snapshot back into a scalar, vector or tensor field."""
    raw = Path(path).read_bytes()
    if raw[:4] != SQGF_MAGIC:
        raise ValueError(f"{path}: not an SQGF file")
    version, n, rank = struct.unpack("<IQB", raw[4:17])
    if version != SQGF_VERSION:
        raise ValueError(f"{path}: unsupported SQGF version {version}")
    if rank not in (1, 2, 3):
        raise ValueError(f"{path}: invalid rank {rank}")
    expected = 17 + 8 * rank * n * n
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f8", offset=17).reshape(rank, n, n)
    grid = Grid(int(n), dealias_fraction)
    comps = [ScalarField(grid, data[i]) for i in range(rank)]
    if rank == 1:
        return comps[0]
    return VectorField(*comps) if rank == 2 else SymTensorField(*comps)


def write_csv(path: str | os.PathLike, field: FieldLike) -> None:
    """CSV export with header ``x1,x2,value[,value2,value3]``."""
    comps = field.components
    grid = comps[0].grid
    x1, x2 = grid.mesh
    names = ["value", "value2", "value3"][: len(comps)]
    cols = [x1.ravel(), x2.ravel()] + [c.values.ravel() for c in comps]
    np.savetxt(path, np.column_stack(cols), delimiter=",", header=",".join(["x1", "x2"] + names),
               comments="", fmt="%.17g")
