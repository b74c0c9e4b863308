"""Spatial Fourier mollification, annulus projections and mollification along a flow."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import map_coordinates, spline_filter

from ._smooth import band, bump, plateau
from .grid_spectral import ScalarField, apply_multiplier, map_components

# Annulus A contains |2 xi| <= 2 sqrt 2 and |xi / 2| >= 1/2 for every direction of
# the geometric basis; chi equals 1 on A and is supported in A'.  The enlarged
# cutoff equals 1 on A'' = A' and vanishes outside A'''.
ANNULUS_A = (0.5, 2.0 * np.sqrt(2.0))
ANNULUS_A1 = (0.375, 3.2)
ANNULUS_A3 = (0.25, 3.6)


def mollifier_symbol(r) -> np.ndarray:
    """zeta-hat: 1 for |xi| <= 1, 0 for |xi| >= 2, smooth and radial."""
    return plateau(r, 1.0, 2.0)


def spatial_mollify(f, ell: float):
    """Apply the Fourier multiplier zeta-hat(k ell) to every component of ``f``."""
    if not ell > 0:
        raise ValueError(f"mollification length must be positive, got {ell}")

    def one(c: ScalarField) -> ScalarField:
        return apply_multiplier(c, mollifier_symbol(c.grid.kabs * ell))

    return map_components(f, one)


def annulus_symbol(r, enlarged: bool = False) -> np.ndarray:
    """Radial annulus cutoff chi (or the enlarged chi-tilde) evaluated at |k| / lambda."""
    if enlarged:
        return band(r, ANNULUS_A3[0], ANNULUS_A1[0], ANNULUS_A1[1], ANNULUS_A3[1])
    return band(r, ANNULUS_A1[0], ANNULUS_A[0], ANNULUS_A[1], ANNULUS_A1[1])


def annulus_project(f, lam: float, enlarged: bool = False):
    """Frequency projection P_{~lambda} (or its enlarged variant) onto |k| ~ lambda."""
    if lam < 1:
        raise ValueError(f"lambda must be >= 1, got {lam}")

    def one(c: ScalarField) -> ScalarField:
        return apply_multiplier(c, annulus_symbol(c.grid.kabs / lam, enlarged))

    return map_components(f, one)


# ---------------------------------------------------------------------------
# Mollification along the flow
# ---------------------------------------------------------------------------


def temporal_kernel(ell: float, nodes: int = 24) -> tuple[np.ndarray, np.ndarray]:
    """Offsets s_m in (-ell, ell) and weights w_m of the even unit-mass bump rho_ell.

    Gauss-Legendre nodes are symmetric, so odd moments vanish exactly; the
    weights are renormalized so that sum w_m = 1 to round-off.
    """
    if not ell > 0:
        raise ValueError(f"temporal mollification scale must be positive, got {ell}")
    x, w = np.polynomial.legendre.leggauss(nodes)
    rho = w * bump(x)
    rho = 0.5 * (rho + rho[::-1])
    return ell * x, rho / rho.sum()


def _spline_coeffs(values: np.ndarray) -> np.ndarray:
    return spline_filter(values, order=3, mode="grid-wrap")


def _sample(coeffs: np.ndarray, coords: np.ndarray) -> np.ndarray:
    return map_coordinates(coeffs, coords, order=3, mode="grid-wrap", prefilter=False)


def flow_mollify(R, flow_velocity, ell_t: float, nodes: int = 24, substeps: int = 2):
    """Mollify ``R`` in time along particle paths of ``flow_velocity``.

    Computes R-bar(x, t) = sum_m w_m R(X(x, t + s_m), t + s_m), where X(x, t + s)
    is the position at time t + s of the particle at x at time t, and (s_m, w_m)
    discretize the even unit-mass bump rho of half-width ``ell_t``.  Paths are
    integrated with RK4 using periodic bicubic interpolation of the velocity.

    Parameters
    ----------
    R : TimeSampledField
        Field samples (any rank).
    flow_velocity : TimeSampledField or callable
        Velocity as a function of time.
    ell_t : float
        Temporal mollification scale.

    Returns
    -------
    TimeSampledField
        Lazily evaluated on the samples of ``R`` at least ``ell_t`` away from
        both ends of the data.
    """
    from .flow_transport import TimeSampledField, as_time_function, rk4_step

    offsets, weights = temporal_kernel(ell_t, nodes)
    vel = as_time_function(flow_velocity)
    first = int(np.ceil(ell_t / R.dt - 1e-9)) if R.count > 1 else 1
    count = R.count - 2 * first
    if count < 1:
        span = R.t_end - R.t0
        raise ValueError(
            f"insufficient time margin: ell_t = {ell_t} needs data beyond each output time, "
            f"but the samples span only {span:.6g}"
        )
    if isinstance(flow_velocity, TimeSampledField):
        t_lo, t_hi = R.t0 + first * R.dt - ell_t, R.t0 + (first + count - 1) * R.dt + ell_t
        if not (flow_velocity.covers(t_lo) and flow_velocity.covers(t_hi)):
            raise ValueError(f"insufficient time margin: velocity data does not cover [{t_lo}, {t_hi}]")
    grid = R[0].grid
    n = grid.n
    scale = n / (2.0 * np.pi)
    x1, x2 = grid.mesh
    start = np.stack([x1, x2]) * scale
    pos_nodes = [m for m in range(nodes) if offsets[m] > 0]
    neg_nodes = [m for m in range(nodes) if offsets[m] < 0][::-1]
    mid_nodes = [m for m in range(nodes) if offsets[m] == 0]

    def velocity_rhs(cache):
        def rhs(pos, t):
            if t not in cache:
                u = vel(t)
                cache[t] = (_spline_coeffs(u[0].values), _spline_coeffs(u[1].values))
            c1, c2 = cache[t]
            return np.stack([_sample(c1, pos), _sample(c2, pos)]) * scale
        return rhs

    def evaluate(i: int):
        t = R.t0 + (first + i) * R.dt
        rank = len(R[0].components)
        acc = [np.zeros((n, n)) for _ in range(rank)]
        mean = np.zeros(rank)

        def deposit(m, pos):
            f = R.at(t + offsets[m])
            for c in range(rank):
                comp = f.components[c]
                acc[c] += weights[m] * _sample(_spline_coeffs(comp.values), pos)
                mean[c] += weights[m] * comp.mean()

        for m in mid_nodes:
            deposit(m, start)
        rhs = velocity_rhs({})
        for chain in (pos_nodes, neg_nodes):
            pos = start.copy()
            s_prev = 0.0
            for m in chain:
                h = (offsets[m] - s_prev) / substeps
                for j in range(substeps):
                    pos = rk4_step(rhs, pos, t + s_prev + j * h, h)
                s_prev = offsets[m]
                deposit(m, pos)
        out = []
        for c in range(rank):
            f = ScalarField(grid, acc[c])
            hat = f.hat.copy()
            hat[0, 0] = mean[c]
            out.append(ScalarField(grid, hat=hat))
        if rank == 1:
            return out[0]
        return type(R[0])(*out)

    return TimeSampledField(R.t0 + first * R.dt, R.dt, count, sampler=evaluate)

