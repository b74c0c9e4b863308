"""Hamiltonian audits, inductive-estimate monitors and support reports.

Monitors compute left/right ratios of estimates whose constants are not
specified; they report and never raise.
"""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .grid_spectral import ScalarField, SymTensorField, advect, ifft2
from .littlewood_paley import c_n_norm, holder_norm

log = logging.getLogger(__name__)


def hamiltonian(theta: ScalarField) -> float:
    """H = 1/2 int |Lambda^{-1/2} theta|^2 = 1/2 (2 pi)^2 sum_k |theta_k|^2 / |k|."""
    g = theta.grid
    dens = g.mode_weight * np.abs(theta.hat) ** 2 * g.inv_kabs
    return 0.5 * (2.0 * np.pi) ** 2 * float(dens.sum())


def hamiltonian_quadrature(theta: ScalarField) -> float:
    """Physical-space quadrature of 1/2 |Lambda^{-1/2} theta|^2 (cross-check of :func:`hamiltonian`)."""
    g = theta.grid
    half = ifft2(theta.hat * np.sqrt(g.inv_kabs), g.n)
    return 0.5 * float(np.sum(half**2)) * (2.0 * np.pi / g.n) ** 2


def hamiltonian_series(theta) -> tuple[np.ndarray, np.ndarray]:
    """(t, H(t)) over the samples of a TimeSampledField."""
    return theta.times, np.array([hamiltonian(theta[i]) for i in range(len(theta))])


def write_hamiltonian_csv(path: str | os.PathLike, t, H) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "H"])
        for a, b in zip(t, H):
            w.writerow([repr(float(a)), repr(float(b))])


# ---------------------------------------------------------------------------
# Report rows
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ReportRow:
    quantity: str
    N: int
    value: float
    bound: float

    @property
    def ratio(self) -> float:
        if self.bound == 0:
            return 0.0 if self.value == 0 else float("inf")
        return self.value / self.bound


@dataclass
class InductiveReport:
    rows: list[ReportRow] = field(default_factory=list)
    support_ok: bool = True
    support_detail: str = ""
    under_resolved: list[str] = field(default_factory=list)

    def max_ratio(self, prefix: str = "") -> float:
        r = [row.ratio for row in self.rows if row.quantity.startswith(prefix)]
        return max(r) if r else 0.0

    def ratios(self, quantity: str) -> dict[int, float]:
        return {row.N: row.ratio for row in self.rows if row.quantity == quantity}

    @property
    def passed(self) -> bool:
        return self.support_ok and self.max_ratio() <= 1.0


def write_report_csv(path: str | os.PathLike, rows: Iterable[ReportRow]) -> None:
    """Write rows with header ``quantity,N,value,bound,ratio``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["quantity", "N", "value", "bound", "ratio"])
        for r in rows:
            w.writerow([r.quantity, r.N, repr(float(r.value)), repr(float(r.bound)), repr(float(r.ratio))])


# ---------------------------------------------------------------------------
# Inductive estimates
# ---------------------------------------------------------------------------


def _max_cn(fields: Sequence, N: int) -> tuple[float, bool]:
    best, under = 0.0, False
    for f in fields:
        for c in f.components:
            res = c_n_norm(c, N)
            best = max(best, res.value)
            under = under or res.under_resolved
    return best, under


def time_derivative(series, i: int):
    """d/dt at sample i: 4th-order centered stencil, lower order near the ends."""
    n = len(series)
    dt = series.dt
    if 2 <= i <= n - 3:
        w = {-2: 1 / 12, -1: -2 / 3, 1: 2 / 3, 2: -1 / 12}
    elif 1 <= i <= n - 2:
        w = {-1: -0.5, 1: 0.5}
    elif i == 0:
        w = {0: -1.0, 1: 1.0}
    else:
        w = {-1: -1.0, 0: 1.0}
    from .flow_transport import linear_combination

    return linear_combination([series[i + o] for o in w], [c / dt for c in w.values()])


def material_derivative(R, u, i: int) -> SymTensorField:
    """D_t R = d_t R + u . grad R at sample i (componentwise, dealiased products)."""
    dR = time_derivative(R, i)
    ui = u[i] if not callable(u) else u(R.times[i])
    return SymTensorField(*[d + advect(ui, c) for d, c in zip(dR.components, R[i].components)])


def _resolvable_order(grid, lam: float, cap: int) -> int:
    """Largest N with 2^N below the Nyquist number, capped at ``cap``."""
    return int(max(0, min(cap, np.floor(np.log2(grid.n / 2)))))


def support_window(delta_q: float, lam_q: float) -> list[tuple[float, float]]:
    """Allowed temporal support of R_q: two intervals shrunk by (delta^{1/2} lambda^{3/2})^{-1}."""
    e = 1.0 / (np.sqrt(delta_q) * lam_q**1.5)
    return [(-2.0 + e, -1.0 - e), (1.0 + e, 2.0 - e)]


def check_inductive(triple, n_max: int | None = None, stride: int = 1) -> InductiveReport:
    """Norms against the inductive bounds for theta, u, R and D_t R, plus the support check.

    ``triple`` needs ``theta``, ``u``, ``R`` (TimeSampledField) and ``params``
    with ``lambda_q``, ``delta_q``, ``delta_q1``, ``alpha``, ``M``, ``L_theta``,
    ``L_R`` and ``L_t`` attributes.  Norms are maxima over every ``stride``-th
    sample.  Orders are truncated to what the grid resolves.
    """
    p = triple.params
    theta, u, R = triple.theta, triple.u, triple.R
    grid = theta[0].grid
    lam, dq, dq1, al = p.lambda_q, p.delta_q, p.delta_q1, p.alpha
    cap = _resolvable_order(grid, lam, n_max if n_max is not None else 10**9)
    rep = InductiveReport()
    idx = range(0, len(theta), stride)
    for N in range(min(cap, p.L_theta) + 1):
        best, under = 0.0, False
        for i in idx:
            a, ua = _max_cn([theta[i]], N)
            b, ub = _max_cn([u[i]], N)
            best = max(best, a + b)
            under = under or ua or ub
        rep.rows.append(ReportRow("theta+u", N, best, p.M * np.sqrt(dq) * lam ** (N + 0.5)))
        if under:
            rep.under_resolved.append(f"theta+u N={N}")
    ridx = range(0, len(R), stride)
    for N in range(min(cap, p.L_R) + 1):
        best = max((_max_cn([R[i]], N)[0] for i in ridx), default=0.0)
        rep.rows.append(ReportRow("R", N, best, dq1 * lam ** (N - 2 * al)))
    # material derivative: evaluate only where R is nonzero to save work
    active = [i for i in ridx if R[i].sup() > 0 or (0 < i < len(R) - 1 and (R[i - 1].sup() > 0 or R[i + 1].sup() > 0))]
    dts = [material_derivative(R, u, i) for i in active]
    for N in range(min(cap, p.L_t) + 1):
        best = max((_max_cn([d], N)[0] for d in dts), default=0.0)
        rep.rows.append(ReportRow("DtR", N, best, dq1 * np.sqrt(dq) * lam ** (N - 2 * al + 1.5)))
    windows = support_window(dq, lam)
    thr = 1e-12 * max((R[i].sup() for i in ridx), default=0.0)
    bad = [float(R.times[i]) for i in ridx if R[i].sup() > thr and not _inside(R.times[i], windows)]
    rep.support_ok = not bad
    rep.support_detail = "" if not bad else f"R nonzero at t = {bad[0]:.6f} outside {windows}"
    return rep


def _inside(t: float, windows) -> bool:
    return any(a - 1e-12 <= t <= b + 1e-12 for a, b in windows)


# ---------------------------------------------------------------------------
# Support reports
# ---------------------------------------------------------------------------


def support_report(series, threshold: float | None = None, rel: float = 1e-12) -> list[tuple[float, float]]:
    """Maximal sample intervals [t_a, t_b] on which the sup-norm exceeds ``threshold``.

    The default threshold is ``rel`` times the global maximum.
    """
    norms = np.array([series[i].sup() for i in range(len(series))])
    top = float(norms.max()) if len(norms) else 0.0
    if top == 0.0:
        return []
    thr = rel * top if threshold is None else threshold
    on = norms > thr
    times = series.times
    out = []
    i = 0
    while i < len(on):
        if on[i]:
            j = i
            while j + 1 < len(on) and on[j + 1]:
                j += 1
            out.append((float(times[i]), float(times[j])))
            i = j + 1
        else:
            i += 1
    return out


# ---------------------------------------------------------------------------
# Estimate monitors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MonitorReport:
    name: str
    ratios: tuple[float, ...]
    detail: dict = field(default_factory=dict)

    @property
    def max_ratio(self) -> float:
        return max(self.ratios) if self.ratios else 0.0

    @property
    def all_finite(self) -> bool:
        return all(np.isfinite(r) for r in self.ratios)


def _holder(f: ScalarField, N: int, alpha: float) -> float:
    """Proxy for ||f||_{N+alpha}: C^N norm plus the Besov proxy of the N-th derivatives."""
    g = f.grid
    base = c_n_norm(f, N).value
    top = 0.0
    import warnings

    from .littlewood_paley import ResolutionWarning

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ResolutionWarning)
        for a in range(N + 1):
            d = ScalarField(g, hat=f.hat * g.ik1**a * g.ik2 ** (N - a))
            top = max(top, holder_norm(d, alpha))
    return base + top


def estimate_monitor(name: str, inputs, N: int = 1, alpha: float = 0.5) -> MonitorReport:
    """Ratio census of an estimate.  Never raises on large ratios.

    Parameters
    ----------
    name : {"T", "S", "mollification", "transport"}
    inputs :
        "T"/"S": iterable of (f, g) pairs.
        "mollification": iterable of (f, ell) pairs; ratio ||f - f_ell||_0 / (ell^2 ||f||_2).
        "transport": (solution TimeSampledField, forcing TimeSampledField or None);
        ratio sup_t ||f(t)||_0 / (||f(t0)||_0 + int ||g||_0).
    """
    from .bilinear_ops import op_S, op_T
    from .mollification import spatial_mollify

    ratios = []
    detail: dict = {}
    if name == "T":
        for f, g in inputs:
            lhs = _holder(op_T(f, g), N, alpha)
            rhs = _holder(f, N, alpha) * _holder(g, 0, alpha) + _holder(f, 0, alpha) * _holder(g, N, alpha)
            ratios.append(lhs / rhs if rhs > 0 else 0.0)
    elif name == "S":
        for f, g in inputs:
            lhs = _holder(op_S(f, g), N, alpha)
            rhs = _holder(f, N + 1, alpha) * _holder(g, 0, alpha) + _holder(f, 1, alpha) * _holder(g, N, alpha)
            ratios.append(lhs / rhs if rhs > 0 else 0.0)
    elif name == "mollification":
        ells = []
        for f, ell in inputs:
            err = (f - spatial_mollify(f, ell)).sup()
            rhs = ell**2 * c_n_norm(f, 2).value
            ratios.append(err / rhs if rhs > 0 else 0.0)
            ells.append(ell)
        detail["ell"] = tuple(ells)
    elif name == "transport":
        sol, forcing = inputs
        t = sol.times
        i0 = int(np.argmin(np.abs(t - getattr(sol, "anchor", t[0]))))
        f0 = sol[i0].sup()
        gnorm = np.array([forcing[i].sup() for i in range(len(forcing))]) if forcing is not None else np.zeros(len(t))
        cum = np.concatenate([[0.0], np.cumsum(0.5 * (gnorm[1:] + gnorm[:-1]) * np.diff(t))])
        for i in range(len(t)):
            bound = f0 + abs(cum[i] - cum[i0])
            ratios.append(sol[i].sup() / bound if bound > 0 else 0.0)
    else:
        raise ValueError(f"unknown monitor {name!r}")
    rep = MonitorReport(name, tuple(float(r) for r in ratios), detail)
    log.info("monitor %s: max ratio %.3e over %d samples", name, rep.max_ratio, len(ratios))
    return rep
