"""Bilinear Fourier multipliers of the SQG nonlinearity and the microlocal expansion.

The microlocal tensor

    B[theta] = 1/4 sum_{j,k} m(j,k) theta^(j) theta^(k) e^{i(j+k).x},
    m(j,k)   = (j - k) (x) (j - k) / (|j| |k| (|j| + |k|)),

satisfies grad-perp . div B = T[theta] . grad theta exactly for every mean-zero
theta.  The only non-separable factor 1/(|j| + |k|) is replaced by an
exponential sum accurate to ~1e-15 relative on the occupied frequency range, so
B is assembled with O(n^2 log n) work per node instead of a double mode sum.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import NamedTuple

import numpy as np

from .grid_spectral import (
    ScalarField,
    SymTensorField,
    VectorField,
    advect,
    apply_multiplier,
    dealias,
    divergence,
    fft2,
    gradient,
    ifft2,
    laplacian,
    product,
    riesz_velocity,
)
from .littlewood_paley import lp_block, max_block
from .mollification import ANNULUS_A, annulus_project


def _lam(f: ScalarField, s: float) -> ScalarField:
    g = f.grid
    return apply_multiplier(f, g.kabs if s > 0 else g.inv_kabs)


def op_T(f: ScalarField, g: ScalarField) -> ScalarField:
    """T[f, g] = Lambda^{-1}((Lambda f) g - f (Lambda g)) with dealiased products."""
    s = product(_lam(f, 1), g) - product(f, _lam(g, 1))
    return _lam(s, -1)


class ParaproductSplit(NamedTuple):
    high_low: ScalarField
    high_high: ScalarField
    low_high: ScalarField

    @property
    def total(self) -> ScalarField:
        return self.high_low + self.high_high + self.low_high


def op_T_paraproduct(f: ScalarField, g: ScalarField, j0: int = 4) -> ParaproductSplit:
    """op_T assembled from the dyadic split sum_{j,k} T[Delta_j f, Delta_k g].

    high_low collects j >= k + j0, low_high collects k >= j + j0, and
    high_high the remaining near-diagonal pairs.
    """
    J = max_block(f.grid)
    idx = list(range(-1, J + 1))
    fb = {j: lp_block(f, j) for j in idx}
    gb = {k: lp_block(g, k) for k in idx}
    zero = ScalarField.zeros(f.grid)
    hl, hh, lh = zero, zero, zero
    for j in idx:
        low_g = [gb[k] for k in idx if j >= k + j0]
        if low_g:
            hl = hl + op_T(fb[j], _sum(low_g))
        low_f = [fb[i] for i in idx if j >= i + j0]
        if low_f:
            lh = lh + op_T(_sum(low_f), gb[j])
        near = [gb[k] for k in idx if abs(j - k) < j0]
        if near:
            hh = hh + op_T(fb[j], _sum(near))
    return ParaproductSplit(hl, hh, lh)


def _sum(fields: list[ScalarField]) -> ScalarField:
    out = fields[0]
    for f in fields[1:]:
        out = out + f
    return out


def op_S(f: ScalarField, g: ScalarField) -> ScalarField:
    """S[f, g] = Delta^{-1} div(T[Delta f] g + T[g] Delta f), dealiased products."""
    lf = laplacian(f)
    v1 = riesz_velocity(lf)
    v2 = riesz_velocity(g)
    w = VectorField(product(v1[0], g) + product(v2[0], lf), product(v1[1], g) + product(v2[1], lf))
    d = divergence(w)
    return apply_multiplier(d, -d.grid.inv_ksq)


def riesz_transform(f: ScalarField, i: int) -> ScalarField:
    """R_i f = d_i Lambda^{-1} f."""
    g = f.grid
    return apply_multiplier(f, (g.ik1 if i == 0 else g.ik2) * g.inv_kabs)


def op_S_riesz(f: ScalarField, g: ScalarField) -> ScalarField:
    """sum_i R_i T[Lambda f, R_i^perp g], an equivalent form of op_S."""
    lf = _lam(f, 1)
    tg = riesz_velocity(g)
    return riesz_transform(op_T(lf, tg[0]), 0) + riesz_transform(op_T(lf, tg[1]), 1)


def quadratic_interaction(theta: ScalarField) -> ScalarField:
    """T[theta] . grad theta with T[theta] = grad-perp Lambda^{-1} theta (dealiased)."""
    return advect(riesz_velocity(theta), theta)


# ---------------------------------------------------------------------------
# Microlocal tensor
# ---------------------------------------------------------------------------


@lru_cache(maxsize=64)
def _inverse_exp_sum(xmin: float, xmax: float, rtol: float = 1e-16) -> tuple[np.ndarray, np.ndarray]:
    """Nodes s_m and weights w_m with sum_m w_m exp(-s_m x) ~= 1/x on [xmin, xmax].

    Trapezoidal rule for 1/x = int exp(t - e^t x) dt.  The step controls the
    discretization error (~exp(-pi^2/step)); the end points bound the two
    truncation errors by ``rtol`` relative.
    """
    log_tol = np.log(1.0 / rtol)
    step = min(0.25, np.pi**2 / (log_tol + 2.0))
    t_lo = np.log(rtol / xmax)
    t_hi = np.log((log_tol + 4.0) / xmin)
    t = np.arange(t_lo, t_hi + step, step)
    s = np.exp(t)
    return s, step * s


def _occupied_range(theta: ScalarField) -> tuple[float, float]:
    g = theta.grid
    occ = (np.abs(theta.hat) > 0) & (g.ksq > 0)
    if not np.any(occ):
        return 1.0, 2.0
    r = g.kabs[occ]
    return 2.0 * float(r.min()), 2.0 * float(r.max())


def microlocal_tensor(theta: ScalarField, rtol: float = 1e-16) -> SymTensorField:
    """Symmetric B with grad-perp . div B = T[theta] . grad theta (dealiased).

    ``theta`` is truncated to the dealiasing box first; its mean is ignored.
    ``rtol`` is the relative accuracy of the exponential-sum kernel.
    """
    g = theta.grid
    n = g.n
    that = theta.hat * g.dealias_mask * g.inv_kabs
    xmin, xmax = _occupied_range(ScalarField(g, hat=that))
    nodes, weights = _inverse_exp_sum(round(xmin, 12), round(xmax, 12), float(rtol))
    b11 = np.zeros((n, n))
    b12 = np.zeros((n, n))
    b22 = np.zeros((n, n))
    ik1, ik2 = g.ik1, g.ik2
    for s, w in zip(nodes, weights):
        e = that * np.exp(-s * g.kabs)
        if not np.any(np.abs(e) > 1e-300):
            continue
        p0 = ifft2(e, n)
        d1 = ifft2(ik1 * e, n)
        d2 = ifft2(ik2 * e, n)
        d11 = ifft2(ik1 * ik1 * e, n)
        d12 = ifft2(ik1 * ik2 * e, n)
        d22 = ifft2(ik2 * ik2 * e, n)
        b11 += w * (d1 * d1 - d11 * p0)
        b12 += w * (d1 * d2 - d12 * p0)
        b22 += w * (d2 * d2 - d22 * p0)
    mask = g.dealias_mask
    comps = [ScalarField(g, hat=0.5 * fft2(b) * mask) for b in (b11, b12, b22)]
    return SymTensorField(*comps)


@dataclass(frozen=True)
class MicrolocalResult:
    b_total: SymTensorField
    b_leading: SymTensorField
    b_error: SymTensorField
    lam: int
    xi: tuple[int, int]
    theta_xi: ScalarField


def phase_gradient(displacement: VectorField | None, xi, grid) -> tuple[np.ndarray, np.ndarray]:
    """(xi . Phi, grad(xi . Phi)) for Phi = x + displacement, as arrays."""
    x1, x2 = grid.mesh
    xi = np.asarray(xi, dtype=float)
    phase = xi[0] * x1 + xi[1] * x2
    grad = np.broadcast_to(xi[:, None, None], (2, grid.n, grid.n)).copy()
    if displacement is not None:
        d = ScalarField(grid, xi[0] * displacement[0].values + xi[1] * displacement[1].values)
        phase = phase + d.values
        gd = gradient(d)
        grad[0] += gd[0].values
        grad[1] += gd[1].values
    return phase, grad


def check_annulus(grad: np.ndarray, grid) -> None:
    """Raise if |grad(xi . Phi)| leaves the annulus A anywhere on the grid."""
    mag = np.hypot(grad[0], grad[1])
    lo, hi = ANNULUS_A
    viol = np.maximum(lo - mag, mag - hi)
    worst = np.unravel_index(np.argmax(viol), mag.shape)
    if viol[worst] > 0:
        x1, x2 = grid.x[worst[0]], grid.x[worst[1]]
        raise ValueError(
            f"annulus hypothesis violated: |grad Phi^T xi| = {mag[worst]:.6f} outside [{lo}, {hi:.6f}] "
            f"at grid index {tuple(int(i) for i in worst)} (x1={x1:.6f}, x2={x2:.6f})"
        )


def oscillatory_field(a: ScalarField, displacement: VectorField | None, xi, lam: int) -> ScalarField:
    """theta_xi = dealias(P_{~lambda}[a cos(lambda Phi . xi)])."""
    phase, grad = phase_gradient(displacement, xi, a.grid)
    check_annulus(grad, a.grid)
    raw = ScalarField(a.grid, a.values * np.cos(lam * phase))
    return dealias(annulus_project(raw, lam))


def leading_tensor(a_values: np.ndarray, grad: np.ndarray, lam: float, grid) -> SymTensorField:
    """1/4 a^2 (v (x) v) / (lambda |v|^3) with v = grad Phi^T xi."""
    v1, v2 = grad
    mag3 = np.hypot(v1, v2) ** 3
    c = 0.25 * a_values**2 / (lam * mag3)
    return SymTensorField.from_arrays(grid, c * v1 * v1, c * v1 * v2, c * v2 * v2)


def microlocal_expand(a: ScalarField, phi, xi, lam: int) -> MicrolocalResult:
    """Microlocal decomposition of the self-interaction of a modulated plane wave.

    Parameters
    ----------
    a : ScalarField
        Amplitude.
    phi : VectorField, object with ``.displacement``, or None
        Periodic displacement Phi - x of the phase map (None means identity).
    xi : pair of int
        Wave direction.
    lam : int
        Frequency.
    """
    disp = getattr(phi, "displacement", phi)
    phase, grad = phase_gradient(disp, xi, a.grid)
    check_annulus(grad, a.grid)
    raw = ScalarField(a.grid, a.values * np.cos(lam * phase))
    theta = dealias(annulus_project(raw, lam))
    b = microlocal_tensor(theta)
    lead = leading_tensor(a.values, grad, lam, a.grid)
    return MicrolocalResult(b, lead, b - lead, int(lam), (int(xi[0]), int(xi[1])), theta)
