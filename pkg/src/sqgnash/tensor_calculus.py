"""Symmetric 2-tensor calculus: inverse divergence, the perp-div-div operator,
and the geometric decomposition of matrices near the identity."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid_spectral import ScalarField, SymTensorField, VectorField, perp_gradient

FROBENIUS_RADIUS = 0.5


def _check_mean_zero(*fields: ScalarField) -> None:
    means = [c.mean() for c in fields]
    scale = max(max(c.sup() for c in fields), 1.0)
    if any(abs(m) > 1e-12 * scale for m in means):
        raise ValueError("input must be mean-zero; component means = " + ", ".join(f"{m:.6e}" for m in means))


def inv_div(u: VectorField) -> SymTensorField:
    """Symmetric trace-free R with div R = u, for mean-zero u.

    R^{ij} = Delta^{-1}(d_i u^j + d_j u^i - delta_ij div u).
    """
    _check_mean_zero(*u.components)
    g = u.grid
    a, b = u[0].hat, u[1].hat
    inv = -g.inv_ksq
    r11 = inv * (g.ik1 * a - g.ik2 * b)
    r12 = inv * (g.ik1 * b + g.ik2 * a)
    return SymTensorField(ScalarField(g, hat=r11), ScalarField(g, hat=r12), ScalarField(g, hat=-r11))


def tensor_divergence(R: SymTensorField) -> VectorField:
    """(div R)^i = d_j R^{ij}."""
    g = R.grid
    r11, r12, r22 = (c.hat for c in R.components)
    return VectorField(ScalarField(g, hat=g.ik1 * r11 + g.ik2 * r12), ScalarField(g, hat=g.ik1 * r12 + g.ik2 * r22))


def perp_div_div(R: SymTensorField) -> ScalarField:
    """grad-perp . div R = d1 d2 (R22 - R11) + (d1^2 - d2^2) R12."""
    g = R.grid
    r11, r12, r22 = (c.hat for c in R.components)
    return ScalarField(g, hat=g.ik1 * g.ik2 * (r22 - r11) + (g.ik1**2 - g.ik2**2) * r12)


def stress_from_scalar(s: ScalarField) -> SymTensorField:
    """div^{-1} grad-perp Delta^{-1} s: the trace-free stress whose perp-div-div is s.

    The mean of ``s`` is discarded (it cannot be represented).
    """
    g = s.grid
    psi = ScalarField(g, hat=-g.inv_ksq * s.hat)
    return inv_div(perp_gradient(psi))


@dataclass(frozen=True)
class GeometricBasis:
    """Directions F = {(1,0), (0,1), (1,1), (1,-1)} with closed-form coefficients.

    For symmetric R with ``||R - Id||_F < 1/2`` the coefficients
    ``c = (R11 - 1/2, R22 - 1/2, 1/4 + R12/2, 1/4 - R12/2)`` are positive and
    ``sum_xi c_xi xi (x) xi = R`` exactly.
    """

    directions: tuple[tuple[int, int], ...] = field(default=((1, 0), (0, 1), (1, 1), (1, -1)))

    def coefficients(self, r11, r12, r22) -> np.ndarray:
        """Coefficient array of shape (4, ...) for arrays of matrix entries."""
        r11, r12, r22 = (np.asarray(v, dtype=float) for v in (r11, r12, r22))
        dist = np.sqrt((r11 - 1.0) ** 2 + 2.0 * r12**2 + (r22 - 1.0) ** 2)
        if np.any(~np.isfinite(dist)) or np.any(dist >= FROBENIUS_RADIUS):
            worst = np.unravel_index(np.nanargmax(np.where(np.isfinite(dist), dist, np.inf)), dist.shape) if dist.ndim else ()
            raise ValueError(
                f"matrix outside the Frobenius ball of radius 1/2 around Id: distance {float(dist[worst]):.6f}"
                + (f" at index {tuple(int(i) for i in worst)}" if dist.ndim else "")
            )
        return np.stack([r11 - 0.5, r22 - 0.5, 0.25 + 0.5 * r12, 0.25 - 0.5 * r12])

    def reconstruct(self, c: np.ndarray) -> np.ndarray:
        """sum_xi c_xi xi (x) xi as an array of shape (..., 2, 2)."""
        c = np.asarray(c, dtype=float)
        out = np.zeros(c.shape[1:] + (2, 2))
        for ci, xi in zip(c, self.directions):
            out += ci[..., None, None] * np.outer(xi, xi)
        return out


GEOMETRIC_BASIS = GeometricBasis()


def geometric_decompose(R) -> dict[tuple[int, int], float]:
    """Per-direction coefficients gamma_xi^2(R) for a single symmetric 2x2 matrix."""
    R = np.asarray(R, dtype=float)
    if R.shape != (2, 2) or abs(R[0, 1] - R[1, 0]) > 1e-14 * max(1.0, abs(R[0, 1])):
        raise ValueError("expected a symmetric 2x2 matrix")
    c = GEOMETRIC_BASIS.coefficients(R[0, 0], R[0, 1], R[1, 1])
    return {xi: float(ci) for xi, ci in zip(GEOMETRIC_BASIS.directions, c)}
