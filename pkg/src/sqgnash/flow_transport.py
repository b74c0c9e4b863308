"""Backward flow maps and transport-type solves on the periodic grid.

Conventions
-----------
The backward flow anchored at ``t_anchor`` solves

    d_s Phi + u . grad Phi = 0,     Phi(x, t_anchor) = x,

so ``Phi(x, s)`` is the position at time ``t_anchor`` of the particle found at
``x`` at time ``s``.  It is stored as the periodic displacement ``Phi - x``
together with the transported gradient ``G_ij = d_j Phi^i``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence, Union

import numpy as np

from .grid_spectral import (
    Grid,
    ScalarField,
    SymTensorField,
    VectorField,
    fft2,
    ifft2,
)

log = logging.getLogger(__name__)

Field = Union[ScalarField, VectorField, SymTensorField]
TimeFunction = Callable[[float], Field]


class SolverBlowUp(RuntimeError):
    """Raised when a time integration grows beyond the blow-up threshold."""


class CFLViolation(ValueError):
    """Raised when the requested time step exceeds the advective stability limit."""


# ---------------------------------------------------------------------------
# Time-sampled fields
# ---------------------------------------------------------------------------


def _rank(f: Field) -> int:
    return len(f.components)


def _build(grid: Grid, rank: int, arrays) -> Field:
    comps = [ScalarField(grid, a) for a in arrays]
    if rank == 1:
        return comps[0]
    return VectorField(*comps) if rank == 2 else SymTensorField(*comps)


def linear_combination(fields: Sequence[Field], weights: Sequence[float]) -> Field:
    """sum_i w_i f_i for fields of identical type and grid."""
    f0 = fields[0]
    rank = _rank(f0)
    arrays = []
    for c in range(rank):
        acc = np.zeros_like(f0.components[c].values)
        for f, w in zip(fields, weights):
            if w != 0.0:
                acc += w * f.components[c].values
        arrays.append(acc)
    return _build(f0.grid, rank, arrays)


def _lagrange_weights(x: float, nodes: np.ndarray) -> np.ndarray:
    w = np.ones(len(nodes))
    for i, xi in enumerate(nodes):
        for j, xj in enumerate(nodes):
            if i != j:
                w[i] *= (x - xj) / (xi - xj)
    return w


class TimeSampledField:
    """Field samples on a uniform time grid ``t0 + i * dt``, i = 0..count-1.

    Samples are either stored or produced on demand by ``sampler(i)``; produced
    samples are cached.  :meth:`at` interpolates with cubic Lagrange stencils.
    """

    def __init__(self, t0: float, dt: float, count: int, fields: Sequence[Field] | None = None,
                 sampler: Callable[[int], Field] | None = None, cache: bool = True):
        if count < 1:
            raise ValueError("need at least one sample")
        if count > 1 and not dt > 0:
            raise ValueError("time step must be positive")
        if (fields is None) == (sampler is None):
            raise ValueError("give exactly one of fields or sampler")
        if fields is not None and len(fields) != count:
            raise ValueError("number of fields does not match count")
        self.t0 = float(t0)
        self.dt = float(dt)
        self.count = int(count)
        self._fields = list(fields) if fields is not None else None
        self._sampler = sampler
        self._cache: dict[int, Field] = {}
        self._use_cache = cache

    @classmethod
    def from_function(cls, func: TimeFunction, t0: float, dt: float, count: int, cache: bool = True):
        return cls(t0, dt, count, sampler=lambda i: func(t0 + i * dt), cache=cache)

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.count)

    @property
    def t_end(self) -> float:
        return self.t0 + self.dt * (self.count - 1)

    def __len__(self) -> int:
        return self.count

    def __getitem__(self, i: int) -> Field:
        if i < 0:
            i += self.count
        if not 0 <= i < self.count:
            raise IndexError(f"sample index {i} outside 0..{self.count - 1}")
        if self._fields is not None:
            return self._fields[i]
        if i in self._cache:
            return self._cache[i]
        f = self._sampler(i)
        if self._use_cache:
            self._cache[i] = f
        return f

    def index_of(self, t: float, tol: float = 1e-9) -> int:
        """Index of the sample at time ``t`` (must lie on the grid)."""
        x = (t - self.t0) / self.dt if self.count > 1 else 0.0
        i = int(round(x))
        if abs(x - i) > tol or not 0 <= i < self.count:
            raise KeyError(f"time {t} is not a sample time")
        return i

    def covers(self, t: float) -> bool:
        return self.t0 - 1e-12 <= t <= self.t_end + 1e-12

    def at(self, t: float) -> Field:
        """Cubic Lagrange interpolation in time (exact at sample times)."""
        if not self.covers(t):
            raise ValueError(f"time {t} outside sampled range [{self.t0}, {self.t_end}]")
        if self.count == 1:
            return self[0]
        x = (t - self.t0) / self.dt
        i = int(round(x))
        if abs(x - i) < 1e-12:
            return self[i]
        i0 = int(np.floor(x)) - 1
        i0 = min(max(i0, 0), max(self.count - 4, 0))
        idx = list(range(i0, min(i0 + 4, self.count)))
        w = _lagrange_weights(x, np.array(idx, dtype=float))
        return linear_combination([self[j] for j in idx], w)

    def map(self, func: Callable[[Field], Field]) -> "TimeSampledField":
        return TimeSampledField(self.t0, self.dt, self.count, sampler=lambda i: func(self[i]))

    def materialize(self) -> "TimeSampledField":
        return TimeSampledField(self.t0, self.dt, self.count, fields=[self[i] for i in range(self.count)])


def as_time_function(src) -> TimeFunction:
    """Accept a TimeSampledField (interpolated) or a callable of time."""
    if isinstance(src, TimeSampledField):
        return src.at
    if callable(src):
        return src
    raise TypeError("expected a TimeSampledField or a callable t -> field")


# ---------------------------------------------------------------------------
# Generic explicit integrators on numpy arrays
# ---------------------------------------------------------------------------


def rk4_step(rhs: Callable[[np.ndarray, float], np.ndarray], y: np.ndarray, t: float, dt: float) -> np.ndarray:
    k1 = rhs(y, t)
    k2 = rhs(y + 0.5 * dt * k1, t + 0.5 * dt)
    k3 = rhs(y + 0.5 * dt * k2, t + 0.5 * dt)
    k4 = rhs(y + dt * k3, t + dt)
    return y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def leapfrog_start(rhs, y0: np.ndarray, t0: float, h: float) -> tuple[np.ndarray, np.ndarray]:
    """Symmetric start values y(t0 - h), y(t0 + h).

    The pair satisfies (y(t0+h) - y(t0-h)) / 2h = rhs(y0, t0) exactly, so the
    centered difference at t0 is consistent with the leapfrog relation.
    """
    f0 = rhs(y0, t0)
    fp = rhs(y0 + h * f0, t0 + h)
    fm = rhs(y0 - h * f0, t0 - h)
    curv = 0.25 * h * (fp - fm)
    return y0 - h * f0 + curv, y0 + h * f0 + curv


def _blowup_check(y: np.ndarray, ref: float, t: float, limit: float) -> None:
    nrm = float(np.max(np.abs(y)))
    if not np.isfinite(nrm) or nrm > limit * ref:
        raise SolverBlowUp(f"solution norm {nrm:.3e} exceeds {limit:.0e} x reference {ref:.3e} at t = {t:.6f}")


# ---------------------------------------------------------------------------
# Spectral helpers working on rfft coefficient arrays
# ---------------------------------------------------------------------------


def _phys_dealiased(grid: Grid, hat: np.ndarray) -> np.ndarray:
    return ifft2(hat * grid.dealias_mask, grid.n)


def _advect_hat(grid: Grid, u_phys: tuple[np.ndarray, np.ndarray], hat: np.ndarray) -> np.ndarray:
    """Spectral coefficients of D(u . grad f) given dealiased physical u and f-hat."""
    m = hat * grid.dealias_mask
    fx = ifft2(grid.ik1 * m, grid.n)
    fy = ifft2(grid.ik2 * m, grid.n)
    return fft2(u_phys[0] * fx + u_phys[1] * fy) * grid.dealias_mask


def _velocity_phys(grid: Grid, v: VectorField) -> tuple[np.ndarray, np.ndarray]:
    return _phys_dealiased(grid, v[0].hat), _phys_dealiased(grid, v[1].hat)


def _riesz_phys(grid: Grid, hat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    h = hat * grid.inv_kabs * grid.dealias_mask
    return ifft2(-grid.ik2 * h, grid.n), ifft2(grid.ik1 * h, grid.n)


def cfl_number(u: VectorField, dt: float) -> float:
    umax = max(float(np.max(np.abs(u[0].values))), float(np.max(np.abs(u[1].values))))
    return abs(dt) * umax * u.grid.n / (2.0 * np.pi)


# ---------------------------------------------------------------------------
# Flow maps
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FlowSnapshot:
    """Backward flow at one time: displacement Phi - x and gradient G_ij = d_j Phi^i."""

    time: float
    displacement: VectorField
    grad: np.ndarray  # shape (2, 2, n, n)

    def det(self) -> np.ndarray:
        g = self.grad
        return g[0, 0] * g[1, 1] - g[0, 1] * g[1, 0]

    def grad_from_displacement(self) -> np.ndarray:
        """Spectral gradient of the displacement plus the identity."""
        grid = self.displacement.grid
        out = np.empty_like(self.grad)
        for i in range(2):
            h = self.displacement[i].hat
            out[i, 0] = ifft2(grid.ik1 * h, grid.n) + (1.0 if i == 0 else 0.0)
            out[i, 1] = ifft2(grid.ik2 * h, grid.n) + (1.0 if i == 1 else 0.0)
        return out


class FlowMap:
    """Backward flow Phi anchored at ``anchor`` on uniformly spaced sample times."""

    def __init__(self, anchor: float, t0: float, dt: float, snapshots: list[FlowSnapshot], velocity_ref: str = ""):
        self.anchor = float(anchor)
        self.t0 = float(t0)
        self.dt = float(dt)
        self.snapshots = snapshots
        self.velocity_ref = velocity_ref

    @property
    def sample_times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(len(self.snapshots))

    @property
    def grid(self) -> Grid:
        return self.snapshots[0].displacement.grid

    def covers(self, t: float) -> bool:
        return self.t0 - 1e-12 <= t <= self.t0 + self.dt * (len(self.snapshots) - 1) + 1e-12

    def at(self, t: float) -> FlowSnapshot:
        """Snapshot at time ``t`` with cubic interpolation between samples."""
        if not self.covers(t):
            raise ValueError(f"time {t} outside flow window")
        x = (t - self.t0) / self.dt
        i = int(round(x))
        if abs(x - i) < 1e-12:
            return self.snapshots[i]
        n = len(self.snapshots)
        i0 = min(max(int(np.floor(x)) - 1, 0), max(n - 4, 0))
        idx = list(range(i0, min(i0 + 4, n)))
        w = _lagrange_weights(x, np.array(idx, dtype=float))
        disp = linear_combination([self.snapshots[j].displacement for j in idx], w)
        grad = sum(wj * self.snapshots[j].grad for j, wj in zip(idx, w))
        return FlowSnapshot(t, disp, grad)


def _flow_rhs(grid: Grid, vel: TimeFunction):
    """RHS for the stacked state (D1, D2, G11, G12, G21, G22) in coefficient space."""

    def rhs(y: np.ndarray, t: float) -> np.ndarray:
        u = vel(t)
        up = _velocity_phys(grid, u)
        out = np.empty_like(y)
        # displacement: d_s D = -u . grad D - u
        for i in range(2):
            out[i] = -_advect_hat(grid, up, y[i]) - u[i].hat * grid.dealias_mask
        # gradient: d_s G_ij = -u . grad G_ij - sum_l G_il d_j u^l
        du = [[ifft2(grid.ik1 * u[l].hat * grid.dealias_mask, grid.n),
               ifft2(grid.ik2 * u[l].hat * grid.dealias_mask, grid.n)] for l in range(2)]
        gphys = [_phys_dealiased(grid, y[2 + m]) + (1.0 if m in (0, 3) else 0.0) for m in range(4)]
        for i in range(2):
            for j in range(2):
                m = 2 * i + j
                src = gphys[2 * i] * du[0][j] + gphys[2 * i + 1] * du[1][j]
                out[2 + m] = -_advect_hat(grid, up, y[2 + m]) - fft2(src) * grid.dealias_mask
        return out

    return rhs


def solve_backward_flow(velocity, t_anchor: float, window: tuple[float, float], dt: float | None = None,
                        cfl: float = 0.5, velocity_ref: str = "") -> FlowMap:
    """Backward flow of ``velocity`` anchored at ``t_anchor`` on ``window``.

    Parameters
    ----------
    velocity : TimeSampledField or callable
        Velocity as a function of time (samples are interpolated cubically).
    t_anchor : float
        Time where Phi is the identity.
    window : (float, float)
        Time interval to cover; it must contain ``t_anchor``.
    dt : float, optional
        RK4 step; sample times are ``t_anchor + j * dt``.  Defaults to half the
        CFL limit at the anchor.
    """
    s0, s1 = window
    if not s0 <= t_anchor <= s1:
        raise ValueError("window must contain the anchor time")
    if isinstance(velocity, TimeSampledField) and not (velocity.covers(s0) and velocity.covers(s1)):
        raise ValueError(f"window [{s0}, {s1}] exceeds velocity data [{velocity.t0}, {velocity.t_end}]")
    vel = as_time_function(velocity)
    u0 = vel(t_anchor)
    grid = u0.grid
    if dt is None:
        umax = max(u0.sup(), 1e-300)
        dt = 0.5 * cfl * 2.0 * np.pi / (grid.n * umax)
        dt = min(dt, (s1 - s0) / 4 if s1 > s0 else dt)
    n_back = int(np.ceil((t_anchor - s0) / dt - 1e-9))
    n_fwd = int(np.ceil((s1 - t_anchor) / dt - 1e-9))
    rhs = _flow_rhs(grid, vel)
    y0 = np.zeros((6,) + grid.shape_hat, dtype=complex)

    def check_cfl(t):
        c = cfl_number(vel(t), dt)
        if c >= cfl:
            raise CFLViolation(f"CFL number {c:.3f} >= {cfl} at t = {t:.6f}; reduce dt below {dt * cfl / c:.3e}")

    states = {0: y0}
    for sign, steps in ((1.0, n_fwd), (-1.0, n_back)):
        y = y0
        t = t_anchor
        for j in range(1, steps + 1):
            check_cfl(t)
            y = rk4_step(rhs, y, t, sign * dt)
            t = t_anchor + sign * j * dt
            states[int(sign) * j] = y
    snaps = []
    for j in range(-n_back, n_fwd + 1):
        y = states[j]
        t = t_anchor + j * dt
        disp = VectorField(ScalarField(grid, hat=y[0]), ScalarField(grid, hat=y[1]))
        grad = np.empty((2, 2, grid.n, grid.n))
        for i in range(2):
            for k in range(2):
                grad[i, k] = ifft2(y[2 + 2 * i + k], grid.n) + (1.0 if i == k else 0.0)
        snaps.append(FlowSnapshot(t, disp, grad))
    return FlowMap(t_anchor, t_anchor - n_back * dt, dt, snaps, velocity_ref)


def evaluate_at_points(f: ScalarField, pts: np.ndarray) -> np.ndarray:
    """Exact trigonometric evaluation of a band-limited field at arbitrary points.

    ``pts`` has shape (2, m).  Cost O(m n^2); intended for oracles and tests.
    """
    g = f.grid
    hat = f.hat
    k1 = np.broadcast_to(g.k1, g.shape_hat).ravel().astype(float)
    k2 = np.broadcast_to(g.k2, g.shape_hat).ravel().astype(float)
    w = g.mode_weight.ravel()
    c = hat.ravel()
    keep = np.abs(c) > 0
    k1, k2, w, c = k1[keep], k2[keep], w[keep], c[keep]
    phase = np.outer(pts[0], k1) + np.outer(pts[1], k2)
    return (np.cos(phase) * (w * c.real) - np.sin(phase) * (w * c.imag)).sum(axis=1)


def lagrangian_trajectories(velocity, x0: np.ndarray, t_start: float, t_end: float, dt: float,
                            interpolate: str = "spectral") -> np.ndarray:
    """Integrate particle paths dX/dt = u(X, t) from ``t_start`` to ``t_end`` with RK4.

    Velocity values at particle positions use exact trigonometric evaluation
    (``interpolate="spectral"``) or periodic cubic splines (``"cubic"``).
    """
    vel = as_time_function(velocity)
    steps = max(1, int(np.ceil(abs(t_end - t_start) / dt - 1e-9)))
    h = (t_end - t_start) / steps
    sample = _point_sampler(interpolate)

    def rhs(x, t):
        u = vel(t)
        return np.stack([sample(u[0], x), sample(u[1], x)])

    x = np.array(x0, dtype=float)
    t = t_start
    for _ in range(steps):
        x = rk4_step(rhs, x, t, h)
        t += h
    return x


def _point_sampler(kind: str):
    if kind == "spectral":
        return evaluate_at_points
    if kind == "cubic":
        return periodic_cubic_sample
    raise ValueError(f"unknown interpolation {kind!r}")


def periodic_cubic_sample(f: ScalarField, pts: np.ndarray) -> np.ndarray:
    """Periodic cubic-spline interpolation of grid values at points (2, m)."""
    from scipy.ndimage import map_coordinates

    n = f.grid.n
    coords = np.asarray(pts, dtype=float) * (n / (2.0 * np.pi))
    return map_coordinates(f.values, coords, order=3, mode="grid-wrap")


# ---------------------------------------------------------------------------
# Linearized and full SQG evolutions
# ---------------------------------------------------------------------------


def linearized_rhs(grid: Grid, theta_bar: TimeFunction | None, u_bar: TimeFunction | None,
                   forcing: TimeFunction | None):
    """RHS of d_t theta = -u_bar . grad theta - T[theta] . grad theta_bar + forcing, on coefficients."""

    def rhs(hat: np.ndarray, t: float) -> np.ndarray:
        out = np.zeros_like(hat)
        if u_bar is not None:
            out -= _advect_hat(grid, _velocity_phys(grid, u_bar(t)), hat)
        if theta_bar is not None:
            tb = theta_bar(t).hat
            out -= _advect_hat(grid, _riesz_phys(grid, hat), tb)
        if forcing is not None:
            out += forcing(t).hat
        return out

    return rhs


def _integrate(rhs, y0: np.ndarray, t0: float, window: tuple[float, float], dt: float, method: str,
               blowup: float, ref: float) -> tuple[float, list[np.ndarray]]:
    s0, s1 = window
    if not s0 <= t0 <= s1:
        raise ValueError("window must contain the initial time")
    n_back = int(np.ceil((t0 - s0) / dt - 1e-9))
    n_fwd = int(np.ceil((s1 - t0) / dt - 1e-9))
    states = {0: y0}
    if method == "rk4":
        for sign, steps in ((1, n_fwd), (-1, n_back)):
            y = y0
            for j in range(1, steps + 1):
                t = t0 + sign * (j - 1) * dt
                y = rk4_step(rhs, y, t, sign * dt)
                _blowup_check(y, ref, t + sign * dt, blowup)
                states[sign * j] = y
    elif method == "leapfrog":
        ym, yp = leapfrog_start(rhs, y0, t0, dt)
        if n_fwd >= 1:
            states[1] = yp
        if n_back >= 1:
            states[-1] = ym
        for sign, steps in ((1, n_fwd), (-1, n_back)):
            prev, cur = y0, states.get(sign)
            for j in range(2, steps + 1):
                t = t0 + sign * (j - 1) * dt
                nxt = prev + 2.0 * sign * dt * rhs(cur, t)
                _blowup_check(nxt, ref, t + sign * dt, blowup)
                states[sign * j] = nxt
                prev, cur = cur, nxt
    else:
        raise ValueError(f"unknown method {method!r}")
    return t0 - n_back * dt, [states[j] for j in range(-n_back, n_fwd + 1)]


def solve_linearized_sqg(theta_bar, u_bar, forcing, initial: ScalarField, t0: float,
                         window: tuple[float, float], dt: float, method: str = "rk4",
                         blowup: float = 1e6, cfl: float = 0.5) -> TimeSampledField:
    """Solve d_t theta + u_bar . grad theta + T[theta] . grad theta_bar = forcing.

    Any of ``theta_bar``, ``u_bar``, ``forcing`` may be None (treated as zero).
    Samples are returned on ``t0 + j * dt`` covering ``window``.
    """
    grid = initial.grid
    tb = as_time_function(theta_bar) if theta_bar is not None else None
    ub = as_time_function(u_bar) if u_bar is not None else None
    fo = as_time_function(forcing) if forcing is not None else None
    if ub is not None:
        c = cfl_number(ub(t0), dt)
        if c >= cfl:
            raise CFLViolation(f"CFL number {c:.3f} >= {cfl}")
    for name, fn in (("initial", lambda: initial), ("forcing", lambda: fo(t0) if fo else None)):
        v = fn()
        if v is not None and abs(v.mean()) > 1e-12 * max(1.0, v.sup()):
            raise ValueError(f"{name} must be mean-zero; mean = {v.mean():.6e}")
    ref = max(initial.sup(), 1e-300)
    if fo is not None:
        ref = max(ref, fo(t0).sup() * (window[1] - window[0]), 1e-300)
    rhs = linearized_rhs(grid, tb, ub, fo)
    start, states = _integrate(rhs, initial.hat.copy(), t0, window, dt, method, blowup, ref)
    fields = [ScalarField(grid, hat=y) for y in states]
    return TimeSampledField(start, dt, len(fields), fields=fields)


def sqg_rhs(grid: Grid, stress: TimeFunction | None = None):
    """RHS of the relaxed SQG system d_t theta = -T[theta] . grad theta + grad-perp . div R."""

    def rhs(hat: np.ndarray, t: float) -> np.ndarray:
        out = -_advect_hat(grid, _riesz_phys(grid, hat), hat)
        if stress is not None:
            r = stress(t)
            r11, r12, r22 = (c.hat for c in r.components)
            out += grid.ik1 * grid.ik2 * (r22 - r11) + (grid.ik1**2 - grid.ik2**2) * r12
        return out

    return rhs


def sqg_step(theta: ScalarField, t0: float, window: tuple[float, float], dt: float, stress=None,
             blowup: float = 1e6) -> TimeSampledField:
    """Evolve the (relaxed) SQG equation with RK4 from ``theta`` at ``t0``."""
    grid = theta.grid
    st = as_time_function(stress) if stress is not None else None
    rhs = sqg_rhs(grid, st)
    start, states = _integrate(rhs, theta.hat.copy(), t0, window, dt, "rk4", blowup, max(theta.sup(), 1e-300))
    return TimeSampledField(start, dt, len(states), fields=[ScalarField(grid, hat=y) for y in states])
