"""Newton-Nash stage q -> q+1: parameter ladder, base case, Newton substeps, Nash step.

Time discretization
-------------------
Stage quantities live on the lattice t_i = i * dt with dt = tau_q / dt_factor,
so every cutoff centre t_k = k tau_q is a lattice point.  Time derivatives are
centered differences with the fine step h = dt / fine_substeps.  The Newton
systems are advanced by leapfrog with step h, for which

    (theta(t_i + h) - theta(t_i - h)) / 2h = rhs(theta(t_i), t_i)

holds exactly.  Every identity of the construction is therefore exact up to
round-off at the lattice points, and the output triple is sampled there with
the stencil offsets (-h, 0, +h).

Newton systems are solved on a coarser working grid (``newton_n``); the
difference between the working-grid and full-grid operators is evaluated at
every lattice point and carried in the small-stress term P, which keeps the
relaxed system exact on the full grid.
"""

from __future__ import annotations

import logging
import math
import os
import shutil
import tempfile
import time
import warnings
from collections import OrderedDict
from dataclasses import dataclass, field, fields, replace
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.ndimage import map_coordinates, spline_filter

from ._smooth import smooth_step, smooth_step_d
from .bilinear_ops import leading_tensor, microlocal_tensor, oscillatory_field, phase_gradient
from .diagnostics import check_inductive, hamiltonian
from .flow_transport import (
    SolverBlowUp,
    TimeSampledField,
    _lagrange_weights,
    leapfrog_start,
    rk4_step,
    solve_backward_flow,
)
from .grid_spectral import (
    Grid,
    ScalarField,
    SymTensorField,
    VectorField,
    advect,
    fft2,
    ifft2,
    resample,
    resample_hat,
    riesz_velocity,
)
from .mollification import mollifier_symbol, spatial_mollify, temporal_kernel
from .temporal_profiles import CHI_TILDE_OUTER, TemporalProfileSet, build_profiles
from .tensor_calculus import FROBENIUS_RADIUS, GEOMETRIC_BASIS, perp_div_div, stress_from_scalar

log = logging.getLogger(__name__)

DIRECTIONS = GEOMETRIC_BASIS.directions
SUPPORT_THRESHOLD = 1e-13


class GeometricBallError(ValueError):
    """A rescaled stress left the ball where the geometric decomposition is valid."""


class ResolutionError(ValueError):
    """The grid cannot represent the requested frequencies."""


class InductiveCheckError(ValueError):
    """The input triple of a stage violates the inductive estimates."""


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IterationParams:
    """Parameter ladder of one stage plus the numerical knobs of the engine.

    ``override_lambdas`` replaces (lambda_q, lambda_{q+1}) by explicit values;
    lambda_{q+2} is then taken as ceil(lambda_{q+1}^b).  ``base_delta`` is the
    amplitude parameter of the base-case triple.
    """

    a: float = 4.0
    b: float = 1.25
    beta: float = 0.3
    alpha: float = 0.01
    M: float = 1.0
    L_theta: int = 30
    L_R: int = 20
    L_t: int = 10
    q: int = 0
    override_lambdas: Optional[tuple[int, int]] = None
    n: int = 256
    base_delta: float = 1e-6
    dt_factor: int = 16
    fine_substeps: int = 64
    newton_n: int = 128
    mollify_n: int = 128
    mollify_nodes: int = 12
    microlocal_rtol: float = 1e-11
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.beta < 0.5:
            raise ValueError(f"beta must lie in (0, 1/2), got {self.beta}")
        if not self.a > 1.0:
            raise ValueError(f"a must exceed 1, got {self.a}")
        b_max = (1.0 + 2.0 * self.beta) / (4.0 * self.beta)
        if not 1.0 < self.b < b_max:
            raise ValueError(f"b must lie in (1, {b_max:.6g}), got {self.b}")
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if not self.base_delta > 0:
            raise ValueError("base_delta must be positive")
        if self.override_lambdas is not None:
            lq, lq1 = self.override_lambdas
            if not 1 <= lq < lq1:
                raise ValueError(f"override lambdas must satisfy 1 <= lambda_q < lambda_q+1, got {self.override_lambdas}")
        if self.n < 4 or self.n % 2 or self.newton_n % 2 or self.mollify_n % 2:
            raise ValueError("grid sizes must be even integers >= 4")
        if self.dt_factor < 4 or self.fine_substeps < 2:
            raise ValueError("dt_factor must be >= 4 and fine_substeps >= 2")

    # -- ladder --------------------------------------------------------------
    def lambda_at(self, j: int) -> int:
        if self.override_lambdas is not None:
            lq, lq1 = self.override_lambdas
            if j == self.q:
                return int(lq)
            if j == self.q + 1:
                return int(lq1)
            if j == self.q + 2:
                return int(math.ceil(lq1**self.b))
        return int(math.ceil(self.a ** (self.b**j)))

    @property
    def lambda_q(self) -> int:
        return self.lambda_at(self.q)

    @property
    def lambda_q1(self) -> int:
        return self.lambda_at(self.q + 1)

    @property
    def lambda_q2(self) -> int:
        return self.lambda_at(self.q + 2)

    def delta_at(self, j: int) -> float:
        return float(self.lambda_at(j)) ** (-2.0 * self.beta)

    @property
    def delta_q(self) -> float:
        return self.delta_at(self.q)

    @property
    def delta_q1(self) -> float:
        return self.delta_at(self.q + 1)

    @property
    def delta_q2(self) -> float:
        return self.delta_at(self.q + 2)

    @property
    def tau_q(self) -> float:
        return self.delta_q**-0.5 * self.lambda_q**-1.5 * self.lambda_q1 ** (-self.alpha)

    @property
    def mu_q1(self) -> float:
        return self.delta_q1**0.5 * self.lambda_q * self.lambda_q1**0.5 * self.lambda_q1 ** (4 * self.alpha)

    @property
    def ell_q(self) -> float:
        return (self.lambda_q * self.lambda_q1) ** -0.5

    @property
    def ell_tq(self) -> float:
        return self.delta_q**-0.5 * self.lambda_q**-0.5 / self.lambda_q1

    @property
    def Gamma(self) -> int:
        return int(math.ceil(1.0 / (0.5 - self.beta) - 1e-12))

    def delta_level(self, n: int) -> float:
        """delta_{q+1,n} = delta_{q+1} (lambda_q / lambda_{q+1})^{n (1/2 - beta)}."""
        return self.delta_q1 * (self.lambda_q / self.lambda_q1) ** (n * (0.5 - self.beta))

    @property
    def lattice_dt(self) -> float:
        return self.tau_q / self.dt_factor

    @property
    def fine_dt(self) -> float:
        return self.lattice_dt / self.fine_substeps

    def ordering_warnings(self) -> list[str]:
        """Asymptotic orderings of the time scales that fail for these values."""
        out = []
        inv = 1.0 / self.ell_tq
        lo = self.delta_q**0.5 * self.lambda_q**1.5
        hi = self.delta_q1**0.5 * self.lambda_q1**1.5
        if not lo < inv:
            out.append(f"delta_q^1/2 lambda_q^3/2 = {lo:.4g} is not below 1/ell_t = {inv:.4g}")
        if not inv < hi:
            out.append(f"1/ell_t = {inv:.4g} is not below delta_q+1^1/2 lambda_q+1^3/2 = {hi:.4g}")
        mid = self.delta_q1**0.5 * self.lambda_q**1.5
        if not mid < inv:
            out.append(f"delta_q+1^1/2 lambda_q^3/2 = {mid:.4g} is not below 1/ell_t = {inv:.4g}")
        return out

    def warn_orderings(self) -> None:
        for msg in self.ordering_warnings():
            warnings.warn(msg, stacklevel=2)

    # -- text format ---------------------------------------------------------
    @classmethod
    def from_mapping(cls, data: dict) -> "IterationParams":
        known = {f.name: f for f in fields(cls)}
        kw = {}
        for key, raw in data.items():
            key = key.strip()
            if key in ("dt", "seeds"):
                key = {"dt": "dt_factor", "seeds": "seed"}[key]
            if key == "override_lambdas" or key == "override_lambda":
                if raw in (None, "", "none", "None"):
                    kw["override_lambdas"] = None
                else:
                    vals = raw if isinstance(raw, (tuple, list)) else str(raw).replace(",", " ").split()
                    kw["override_lambdas"] = (int(vals[0]), int(vals[1]))
                continue
            if key not in known:
                raise ValueError(f"unknown parameter {key!r}")
            typ = known[key].type
            if typ in ("int", int):
                kw[key] = int(float(raw))
            else:
                kw[key] = float(raw)
        return cls(**kw)

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "IterationParams":
        """Read a flat ``key = value`` file; ``#`` starts a comment."""
        data = {}
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ValueError(f"{path}:{lineno}: expected 'key = value'")
                k, v = line.split("=", 1)
                data[k.strip()] = v.strip()
        return cls.from_mapping(data)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "override_lambdas":
                lines.append(f"override_lambdas = {'none' if v is None else f'{v[0]} {v[1]}'}")
            else:
                lines.append(f"{f.name} = {v!r}")
        return "\n".join(lines) + "\n"

    def with_changes(self, **kw) -> "IterationParams":
        return replace(self, **kw)


# ---------------------------------------------------------------------------
# Triples
# ---------------------------------------------------------------------------


class StencilSeries:
    """Scalar samples at t_i + o * h for lattice index i and stencil offsets o.

    ``sampler(i, o)`` returns the field at t0 + i * dt + o * h.
    """

    def __init__(self, t0: float, dt: float, count: int, h: float, offsets: Sequence[int],
                 sampler: Callable[[int, int], ScalarField]):
        self.t0 = float(t0)
        self.dt = float(dt)
        self.count = int(count)
        self.h = float(h)
        self.offsets = tuple(sorted(int(o) for o in offsets))
        if 0 not in self.offsets or not {-1, 1} <= set(self.offsets):
            raise ValueError("stencil offsets must contain -1, 0 and 1")
        self._sampler = sampler
        self.center = TimeSampledField(self.t0, self.dt, self.count, sampler=lambda i: sampler(i, 0), cache=False)

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.count)

    def __len__(self) -> int:
        return self.count

    def sample(self, i: int, o: int = 0) -> ScalarField:
        if o not in self.offsets:
            raise KeyError(f"offset {o} not in stencil {self.offsets}")
        return self._sampler(i, o)

    def derivative(self, i: int) -> ScalarField:
        """Centered time derivative at sample i (fourth order when offsets +-2 exist)."""
        if {-2, 2} <= set(self.offsets):
            w = {-2: 1 / 12, -1: -2 / 3, 1: 2 / 3, 2: -1 / 12}
        else:
            w = {-1: -0.5, 1: 0.5}
        acc = None
        for o, c in w.items():
            term = self.sample(i, o).hat * (c / self.h)
            acc = term if acc is None else acc + term
        return ScalarField(self.sample(i, 0).grid, hat=acc)


class BaseCaseEvaluator:
    """Closed-form base-case fields at arbitrary times.

    theta_0 = f(t) A cos(lambda_0 x1) with A = delta^{1/2} lambda_0^{1/2}, and
    R_0 = -f'(t) (delta^{1/2} / lambda_0^{3/2}) offdiag(cos lambda_0 x1).
    """

    def __init__(self, grid: Grid, lam0: int, delta: float):
        self.grid = grid
        self.lam0 = int(lam0)
        self.delta = float(delta)
        self.amp = math.sqrt(delta) * math.sqrt(lam0)
        x1, _ = grid.mesh
        self._cos = ScalarField(grid, self.amp * np.cos(self.lam0 * x1))
        c = -math.sqrt(delta) / lam0**1.5 * np.cos(self.lam0 * x1)
        z = np.zeros_like(c)
        self._off = SymTensorField.from_arrays(grid, z, c, z)

    @property
    def theta_modes(self):
        return [(time_profile, self._cos)]

    @property
    def R_modes(self):
        return [(time_profile_d, self._off)]

    def theta_at(self, t: float) -> ScalarField:
        return self._cos * float(time_profile(t))

    def R_at(self, t: float) -> SymTensorField:
        return self._off * float(time_profile_d(t))


def time_profile(t) -> np.ndarray:
    """Smooth f with f = 1 on [-5/4, 5/4] and supp f = [-7/4, 7/4]."""
    return smooth_step((1.75 - np.abs(np.asarray(t, dtype=float))) / 0.5)


def time_profile_d(t) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    return -np.sign(t) * smooth_step_d((1.75 - np.abs(t)) / 0.5) / 0.5


@dataclass
class ReynoldsTriple:
    """Time-sampled (theta, u, R) solving the relaxed system on a lattice.

    ``theta_stencil`` carries the off-lattice samples needed for centered time
    derivatives; ``theta`` and ``u`` are its lattice samples and the matching
    velocities.  ``evaluator`` optionally provides the fields at arbitrary
    times (required to run a stage from this triple).
    """

    theta_stencil: StencilSeries
    R: TimeSampledField
    params: IterationParams
    meta: dict = field(default_factory=dict)
    evaluator: Optional[object] = None

    def __post_init__(self):
        st = self.theta_stencil
        if st.count != self.R.count or abs(st.t0 - self.R.t0) > 1e-12 or abs(st.dt - self.R.dt) > 1e-15:
            raise ValueError("theta and R must share the time lattice")
        self.theta = st.center
        self.u = TimeSampledField(st.t0, st.dt, st.count, sampler=lambda i: riesz_velocity(st.sample(i, 0)), cache=False)

    @property
    def times(self) -> np.ndarray:
        return self.theta_stencil.times

    @property
    def grid(self) -> Grid:
        return self.theta[0].grid

    def __len__(self) -> int:
        return self.theta_stencil.count

    def residual(self, i: int) -> ScalarField:
        """d_t theta + u . grad theta - grad-perp . div R at sample i."""
        th = self.theta_stencil.sample(i, 0)
        r = self.theta_stencil.derivative(i) + advect(riesz_velocity(th), th) - perp_div_div(self.R[i])
        return r

    def residual_norms(self, indices: Optional[Sequence[int]] = None) -> np.ndarray:
        idx = range(len(self)) if indices is None else indices
        return np.array([self.residual(i).sup() for i in idx])


# ---------------------------------------------------------------------------
# Base case
# ---------------------------------------------------------------------------


def base_case(params: IterationParams, grid: Optional[Grid] = None, window: tuple[float, float] = (-2.0, 2.0),
              dt: float = 1.0 / 64, h: float = 1.25e-4) -> ReynoldsTriple:
    """Base-case triple at frequency lambda_q and amplitude ``params.base_delta``.

    Samples lie on ``window`` with step ``dt``; time derivatives use a fourth
    order stencil of step ``h``.
    """
    grid = grid or Grid(params.n)
    lam0 = params.lambda_q
    if 2 * lam0 > grid.dealias_cutoff:
        raise ResolutionError(f"grid n = {grid.n} does not resolve lambda_0 = {lam0} (need 2 lambda_0 <= {grid.dealias_cutoff:.1f})")
    ev = BaseCaseEvaluator(grid, lam0, params.base_delta)
    count = int(round((window[1] - window[0]) / dt)) + 1
    t0 = float(window[0])
    stencil = StencilSeries(t0, dt, count, h, (-2, -1, 0, 1, 2), lambda i, o: ev.theta_at(t0 + i * dt + o * h))
    R = TimeSampledField.from_function(ev.R_at, t0, dt, count, cache=False)
    meta = {"kind": "base", "lambda0": lam0, "delta": params.base_delta}
    return ReynoldsTriple(stencil, R, params, meta, ev)


# ---------------------------------------------------------------------------
# Amplitudes and stress tensors
# ---------------------------------------------------------------------------


def _inverse(grad: np.ndarray) -> tuple[np.ndarray, ...]:
    g11, g12, g21, g22 = grad[0, 0], grad[0, 1], grad[1, 0], grad[1, 1]
    det = g11 * g22 - g12 * g21
    return g22 / det, -g12 / det, -g21 / det, g11 / det


def rescaled_stress(grad: np.ndarray, R: SymTensorField, delta: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Entries of G^{-T} (Id - R / delta) G^{-1}, G = grad Phi."""
    i11, i12, i21, i22 = _inverse(grad)
    r11, r12, r22 = (c.values for c in R.components)
    n11 = 1.0 - r11 / delta
    n12 = -r12 / delta
    n22 = 1.0 - r22 / delta
    # N G^{-1}
    a11 = n11 * i11 + n12 * i21
    a12 = n11 * i12 + n12 * i22
    a21 = n12 * i11 + n22 * i21
    a22 = n12 * i12 + n22 * i22
    # G^{-T} (N G^{-1}); (G^{-T})_{ij} = (G^{-1})_{ji}
    m11 = i11 * a11 + i21 * a21
    m12 = i11 * a12 + i21 * a22
    m22 = i12 * a12 + i22 * a22
    return m11, m12, m22


def decomposition_coefficients(grad: np.ndarray, R: SymTensorField, delta: float, where: str = "") -> np.ndarray:
    """gamma_xi^2 of the rescaled stress, shape (4, n, n).

    Raises GeometricBallError with the worst grid point when the rescaled
    stress leaves the ball of radius 1/2 around the identity.
    """
    m11, m12, m22 = rescaled_stress(grad, R, delta)
    dist = np.sqrt((m11 - 1.0) ** 2 + 2.0 * m12**2 + (m22 - 1.0) ** 2)
    worst = np.unravel_index(np.argmax(dist), dist.shape)
    if not dist[worst] < FROBENIUS_RADIUS:
        x = R.grid.x
        raise GeometricBallError(
            f"rescaled stress at distance {dist[worst]:.4f} >= {FROBENIUS_RADIUS} from Id{where} "
            f"at grid index {tuple(int(v) for v in worst)} (x1={x[worst[0]]:.4f}, x2={x[worst[1]]:.4f}); "
            "use a smaller base amplitude (base_delta) or a larger frequency parameter a"
        )
    return GEOMETRIC_BASIS.coefficients(m11, m12, m22)


def _transported_directions(grad: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """v_xi = G^T xi for every direction of the basis."""
    out = []
    for xi in DIRECTIONS:
        v1 = grad[0, 0] * xi[0] + grad[1, 0] * xi[1]
        v2 = grad[0, 1] * xi[0] + grad[1, 1] * xi[1]
        out.append((v1, v2))
    return out


def stress_tensors(grad: np.ndarray, R: SymTensorField, delta: float, chi: float, where: str = "") -> list[SymTensorField]:
    """A_xi = delta chi^2 gamma_xi^2 (G^T xi (x) G^T xi); their sum is chi^2 (delta Id - R)."""
    c = decomposition_coefficients(grad, R, delta, where)
    out = []
    for ci, (v1, v2) in zip(c, _transported_directions(grad)):
        s = delta * chi**2 * ci
        out.append(SymTensorField.from_arrays(R.grid, s * v1 * v1, s * v1 * v2, s * v2 * v2))
    return out


def amplitudes(grad: np.ndarray, R: SymTensorField, delta: float, chi: float, lam: float, where: str = "") -> list[np.ndarray]:
    """a_xi = 2 lambda^{1/2} delta^{1/2} |G^T xi|^{3/2} chi gamma_xi.

    With these, a^2 (v (x) v) / (4 lambda |v|^3) equals the stress tensor A_xi.
    """
    c = decomposition_coefficients(grad, R, delta, where)
    out = []
    for ci, (v1, v2) in zip(c, _transported_directions(grad)):
        mag = np.hypot(v1, v2)
        out.append(2.0 * math.sqrt(lam * delta) * mag**1.5 * chi * np.sqrt(ci))
    return out


# ---------------------------------------------------------------------------
# Disk-backed per-lattice storage
# ---------------------------------------------------------------------------


class _Store:
    """Zero-initialized memory-mapped arrays indexed by lattice index."""

    def __init__(self, root: str, i_min: int, count: int):
        self.root = root
        self.i_min = i_min
        self.count = count
        self._arrays: dict[str, np.memmap] = {}
        self.touched: dict[str, np.ndarray] = {}

    def array(self, name: str, tail: tuple[int, ...], dtype=complex) -> np.memmap:
        if name not in self._arrays:
            path = os.path.join(self.root, name + ".bin")
            self._arrays[name] = np.memmap(path, dtype=dtype, mode="w+", shape=(self.count,) + tail)
            self.touched[name] = np.zeros(self.count, dtype=bool)
        return self._arrays[name]

    def add(self, name: str, i: int, value: np.ndarray) -> None:
        arr = self._arrays[name]
        j = i - self.i_min
        arr[j] += value
        self.touched[name][j] = True

    def put(self, name: str, i: int, value: np.ndarray) -> None:
        arr = self._arrays[name]
        j = i - self.i_min
        arr[j] = value
        self.touched[name][j] = True

    def get(self, name: str, i: int) -> Optional[np.ndarray]:
        j = i - self.i_min
        if not 0 <= j < self.count or not self.touched[name][j]:
            return None
        return np.array(self._arrays[name][j])

    def indices(self, name: str) -> np.ndarray:
        return np.nonzero(self.touched[name])[0] + self.i_min

    def reset(self, name: str) -> None:
        arr = self._arrays[name]
        for j in np.nonzero(self.touched[name])[0]:
            arr[j] = 0
        self.touched[name][:] = False

    def swap(self, a: str, b: str) -> None:
        self._arrays[a], self._arrays[b] = self._arrays[b], self._arrays[a]
        self.touched[a], self.touched[b] = self.touched[b], self.touched[a]


class _LRU(OrderedDict):
    def __init__(self, size: int, make: Callable):
        super().__init__()
        self.size = size
        self.make = make

    def __call__(self, key):
        if key in self:
            self.move_to_end(key)
            return self[key]
        val = self.make(key)
        self[key] = val
        if len(self) > self.size:
            self.popitem(last=False)
        return val


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class LevelInfo:
    n: int
    delta: float
    ks: list[int]
    stress_sup: float
    support: tuple[float, float]
    max_ball_distance: float = 0.0


@dataclass
class StageReport:
    """Component norms of the new stress and the checks of the stage.

    ``norms`` maps component names (R_L transport/Nash, R_O flow/oscillation,
    R_R constituents, R1 total, theta_p) to sup norms over the lattice.
    """

    norms: dict = field(default_factory=dict)
    levels: list[LevelInfo] = field(default_factory=list)
    residual_max: float = float("nan")
    residual_tol: float = float("nan")
    residual_time: float = float("nan")
    R0_norm: float = float("nan")
    R1_norm: float = float("nan")
    increment: float = 0.0
    increment_bound: float = float("nan")
    spectral_fraction: float = float("nan")
    support_intervals: list = field(default_factory=list)
    support_windows: list = field(default_factory=list)
    support_ok: bool = True
    hamiltonian: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)
    inductive_input: Optional[object] = None
    ordering_warnings: list = field(default_factory=list)

    @property
    def residual_ok(self) -> bool:
        return bool(self.residual_max < self.residual_tol)

    @property
    def stress_reduced(self) -> bool:
        return bool(self.R1_norm < self.R0_norm)

    @property
    def increment_ok(self) -> bool:
        return bool(self.increment <= self.increment_bound)

    @property
    def hamiltonian_ok(self) -> bool:
        h = self.hamiltonian
        return bool(h) and abs(h["H1"] - h["H0"]) > 10.0 * h["drift_bound"]

    def rows(self) -> list[tuple[str, float]]:
        out = [(f"norm:{k}", v) for k, v in self.norms.items()]
        for lv in self.levels:
            out.append((f"level{lv.n}:delta", lv.delta))
            out.append((f"level{lv.n}:num_k", float(len(lv.ks))))
            out.append((f"level{lv.n}:stress_sup", lv.stress_sup))
            out.append((f"level{lv.n}:max_ball_distance", lv.max_ball_distance))
        out += [
            ("residual_max", self.residual_max),
            ("residual_tol", self.residual_tol),
            ("R0_norm", self.R0_norm),
            ("R1_norm", self.R1_norm),
            ("increment", self.increment),
            ("increment_bound", self.increment_bound),
            ("spectral_fraction", self.spectral_fraction),
            ("support_ok", float(self.support_ok)),
        ]
        out += [(f"hamiltonian:{k}", v) for k, v in self.hamiltonian.items()]
        out += [(f"time:{k}", v) for k, v in self.timing.items()]
        return out

    def write_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w") as fh:
            fh.write("quantity,value\n")
            for k, v in self.rows():
                fh.write(f"{k},{float(v)!r}\n")

    def summary(self) -> str:
        lines = [f"{k:40s} {float(v):.6e}" for k, v in self.rows()]
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# Stage state
# ---------------------------------------------------------------------------


class StageState:
    """All intermediate data of one stage between the Newton substeps and the Nash step.

    Lattice-indexed quantities live in memory-mapped stores under ``workdir``:
    ``W`` (sum of finished Newton perturbations at t_i) and ``Wm``/``Wp`` at
    t_i -+ h, ``cur`` (the perturbation of the running substep), ``e``/``e_next``
    (scalar sources of R_{q,n} and R_{q,n+1}), ``p`` (scalar source of the
    small stress) and ``S`` (the accumulated Newton-Nash stress).
    """

    def __init__(self, triple: ReynoldsTriple, workdir: Optional[str] = None, progress: bool = False):
        if triple.evaluator is None:
            raise ValueError("run_stage needs a triple with a continuous-time evaluator (e.g. the base case)")
        self.triple = triple
        self.ev = triple.evaluator
        p = self.p = triple.params
        self.grid = triple.grid
        if self.grid.n != p.n:
            self.grid = Grid(p.n)
        if p.n < 4 * p.lambda_q1:
            raise ResolutionError(f"grid n = {p.n} is below 4 lambda_q+1 = {4 * p.lambda_q1}")
        self.ngrid = Grid(p.newton_n)
        self.mgrid = Grid(p.mollify_n)
        self.progress = progress
        self.tau = p.tau_q
        self.c = p.dt_factor
        self.dt = p.lattice_dt
        self.s = p.fine_substeps
        self.h = p.fine_dt
        self.mu = p.mu_q1
        self.Gamma = p.Gamma
        self.profiles: TemporalProfileSet = build_profiles(DIRECTIONS, self.Gamma, self.tau)
        margin = (2 * self.Gamma + 3) * self.tau
        t_a, t_b = triple.times[0], triple.times[-1]
        self.i_min = int(math.floor((t_a - margin) / self.dt))
        self.i_max = int(math.ceil((t_b + margin) / self.dt))
        self.count = self.i_max - self.i_min + 1
        self._own_dir = workdir is None
        self.workdir = workdir or tempfile.mkdtemp(prefix="sqgnash-stage-")
        os.makedirs(self.workdir, exist_ok=True)
        self.store = _Store(self.workdir, self.i_min, self.count)
        n, nh = self.grid.n, self.grid.shape_hat[1]
        for name in ("W", "Wm", "Wp", "cur", "e", "e_next", "p"):
            self.store.array(name, (n, nh))
        self.store.array("S", (3, n, nh))
        mh = self.mgrid.shape_hat
        self.e_hist: dict[int, np.memmap] = {}
        self.level_sups: dict[int, np.ndarray] = {}
        self.levels: list[LevelInfo] = []
        self.zsets: dict[int, list[int]] = {}
        self.timing: dict[str, float] = {}
        self._mshape = mh
        self._grad_cache: dict[int, dict[int, np.ndarray]] = {}
        self.n_done = 0
        self._prepare_background()

    # -- lattice helpers -------------------------------------------------------
    def t(self, i: int) -> float:
        return i * self.dt

    def close(self) -> None:
        if self._own_dir and os.path.isdir(self.workdir):
            shutil.rmtree(self.workdir, ignore_errors=True)

    # -- background fields -------------------------------------------------------
    def _prepare_background(self) -> None:
        p = self.p
        g, ng = self.grid, self.ngrid
        self._moll = mollifier_symbol(g.kabs * p.ell_q)
        modes = getattr(self.ev, "theta_modes", None)
        self._bg_modes = None
        if modes is not None:
            self._bg_modes = []
            for coef, fld in modes:
                fh = resample(fld, g.n).hat if fld.grid.n != g.n else fld.hat
                bar = fh * self._moll
                self._bg_modes.append((coef, self._bg_phys(g, bar), self._bg_phys(ng, resample_hat(bar, g.n, ng.n)), fh, bar))

    @staticmethod
    def _bg_phys(grid: Grid, bar_hat: np.ndarray) -> np.ndarray:
        """Dealiased physical (u1, u2, d1 theta, d2 theta) of a background scalar."""
        m = bar_hat * grid.dealias_mask
        h = m * grid.inv_kabs
        return np.stack([ifft2(-grid.ik2 * h, grid.n), ifft2(grid.ik1 * h, grid.n),
                         ifft2(grid.ik1 * m, grid.n), ifft2(grid.ik2 * m, grid.n)])

    def theta_q_hat(self, t: float) -> np.ndarray:
        th = self.ev.theta_at(t)
        return th.hat if th.grid.n == self.grid.n else resample(th, self.grid.n).hat

    def theta_bar_hat(self, t: float) -> np.ndarray:
        return self.theta_q_hat(t) * self._moll

    def _bg(self, t: float, newton: bool) -> np.ndarray:
        if self._bg_modes is not None:
            acc = None
            for coef, full, work, _, _ in self._bg_modes:
                c = float(coef(t))
                term = c * (work if newton else full)
                acc = term if acc is None else acc + term
            return acc
        grid = self.ngrid if newton else self.grid
        bar = self.theta_bar_hat(t)
        if newton:
            bar = resample_hat(bar, self.grid.n, grid.n)
        return self._bg_phys(grid, bar)

    def _linear(self, grid: Grid, bg: np.ndarray, hat: np.ndarray) -> np.ndarray:
        """Coefficients of u_bar . grad theta + T[theta] . grad theta_bar (dealiased)."""
        m = hat * grid.dealias_mask
        hk = m * grid.inv_kabs
        fx = ifft2(grid.ik1 * m, grid.n)
        fy = ifft2(grid.ik2 * m, grid.n)
        v1 = ifft2(-grid.ik2 * hk, grid.n)
        v2 = ifft2(grid.ik1 * hk, grid.n)
        return fft2(bg[0] * fx + bg[1] * fy + v1 * bg[2] + v2 * bg[3]) * grid.dealias_mask

    def R_q(self, t: float) -> SymTensorField:
        r = self.ev.R_at(t)
        return r if r.grid.n == self.grid.n else resample(r, self.grid.n)

    def R_q0(self, t: float) -> SymTensorField:
        return spatial_mollify(self.R_q(t), self.p.ell_q)

    def R_level(self, n: int, i: int) -> SymTensorField:
        """R_{q,n}(t_i) on the full grid."""
        if n == 0:
            return self.R_q0(self.t(i))
        e = self.store.get("e", i)
        if e is None:
            return SymTensorField.zeros(self.grid)
        return stress_from_scalar(ScalarField(self.grid, hat=e))

    # -- flows of the mollified velocity ---------------------------------------
    def _u_bar(self, t: float) -> VectorField:
        return riesz_velocity(ScalarField(self.grid, hat=self.theta_bar_hat(t)))

    def _flow_grads(self, k: int) -> dict[int, np.ndarray]:
        """grad Phi_k at the lattice points where chi_k is nonzero (cached per k)."""
        if k in self._grad_cache:
            return self._grad_cache[k]
        r = int(math.ceil(2 * self.c / 3))
        ic = k * self.c
        vel = TimeSampledField(self.t(ic - r - 2), self.dt, 2 * r + 5,
                               sampler=lambda j: self._u_bar(self.t(ic - r - 2 + j)))
        flow = solve_backward_flow(vel, self.t(ic), (self.t(ic - r), self.t(ic + r)), dt=self.dt,
                                   velocity_ref=f"u_bar k={k}")
        path = os.path.join(self.workdir, f"grad_{k}.bin")
        arr = np.memmap(path, dtype=float, mode="w+", shape=(2 * r + 1, 2, 2, self.grid.n, self.grid.n))
        for j, snap in enumerate(flow.snapshots):
            arr[j] = snap.grad
        out = {off: arr[off + r] for off in range(-r, r + 1)}
        self._grad_cache[k] = out
        return out

    # -- Newton substep ------------------------------------------------------------
    def _level_support(self, n: int) -> tuple[np.ndarray, float]:
        if n not in self.level_sups:
            sups = np.zeros(self.count)
            if n == 0:
                for j in range(self.count):
                    sups[j] = self.R_q0(self.t(self.i_min + j)).sup()
            self.level_sups[n] = sups
        sups = self.level_sups[n]
        top = float(sups.max())
        if top == 0.0:
            return np.array([], dtype=int), 0.0
        return np.nonzero(sups > SUPPORT_THRESHOLD * top)[0] + self.i_min, top

    def index_set(self, n: int) -> list[int]:
        """Z_{q,n}: lattice cutoffs k with k tau within tau of the numerical support of R_{q,n}."""
        supp, _ = self._level_support(n)
        if len(supp) == 0:
            return []
        kmin = int(math.floor(supp.min() / self.c)) - 1
        kmax = int(math.ceil(supp.max() / self.c)) + 1
        out = []
        for k in range(kmin, kmax + 1):
            if np.min(np.abs(k * self.c - supp)) < self.c:
                out.append(k)
        return out

    def newton_substep(self, n: int) -> None:
        if n != self.n_done:
            raise ValueError(f"Newton substep {n} requested after {self.n_done} substeps")
        t_start = time.perf_counter()
        supp, top = self._level_support(n)
        delta = self.p.delta_level(n)
        ks = self.index_set(n)
        self.zsets[n] = ks
        info = LevelInfo(n, delta, ks, top, (self.t(int(supp.min())), self.t(int(supp.max()))) if len(supp) else (0.0, 0.0))
        self.levels.append(info)
        log.info("Newton substep %d: delta=%.4g, |Z|=%d, sup R=%.3e", n, delta, len(ks), top)
        for k in ks:
            self._solve_k(k, n, delta, info)
            if self.progress:
                log.info("  k=%d done (%.1fs)", k, time.perf_counter() - t_start)
        self._finish_level(n)
        self.n_done = n + 1
        self.timing[f"newton_{n}"] = time.perf_counter() - t_start

    def _solve_k(self, k: int, n: int, delta: float, info: LevelInfo) -> None:
        g, ng = self.grid, self.ngrid
        prof = self.profiles
        c, s, h, mu = self.c, self.s, self.h, self.mu
        ic = k * c
        r = int(math.ceil(2 * c / 3))
        Mc = int(math.ceil(CHI_TILDE_OUTER * c))
        pad = Mc + 2
        keys = [prof.oscillator_key(xi, k, n + 1) for xi in DIRECTIONS]
        grads = self._flow_grads(k)
        nmask = ng.dealias_mask
        G = np.zeros((len(DIRECTIONS), 2 * pad + 1) + ng.shape_hat, dtype=complex)
        F_full: dict[int, np.ndarray] = {}
        for off in range(-r, r + 1):
            i = ic + off
            t = self.t(i)
            chi = float(prof.chi_k(k, t))
            if chi == 0.0:
                continue
            R = self.R_level(n, i)
            m11, m12, m22 = rescaled_stress(grads[off], R, delta)
            dist = float(np.max(np.sqrt((m11 - 1) ** 2 + 2 * m12**2 + (m22 - 1) ** 2)))
            info.max_ball_distance = max(info.max_ball_distance, dist)
            A = stress_tensors(grads[off], R, delta, chi, where=f" (level {n}, k = {k}, t = {t:.5f})")
            gx = [perp_div_div(a).hat for a in A]
            gvals = [float(prof.g(key, mu * t)) for key in keys]
            full = sum(gx)
            for gv, a, gh in zip(gvals, A, gx):
                if gv != 0.0:
                    self.store.add("S", i, -gv**2 * np.stack([comp.hat for comp in a.components]))
                    full = full - gv**2 * gh
            F_full[off] = full
            for x in range(len(DIRECTIONS)):
                G[x, off + pad] = resample_hat(gx[x], g.n, ng.n) * nmask
        Gtot = G.sum(axis=0)

        def forcing(tt: float) -> np.ndarray:
            xloc = (tt - self.t(ic)) / self.dt + pad
            j = int(round(xloc))
            if abs(xloc - j) < 1e-9:
                idx, w = [j], [1.0]
            else:
                j0 = int(math.floor(xloc)) - 1
                idx = list(range(j0, j0 + 4))
                w = _lagrange_weights(xloc, np.array(idx, dtype=float))
            out = sum(wj * Gtot[jj] for jj, wj in zip(idx, w))
            for x, key in enumerate(keys):
                gv = float(prof.g(key, mu * tt))
                if gv != 0.0:
                    out = out - gv**2 * sum(wj * G[x, jj] for jj, wj in zip(idx, w))
            return out

        def rhs(y: np.ndarray, tt: float) -> np.ndarray:
            return forcing(tt) - self._linear(ng, self._bg(tt, True), y)

        tk = self.t(ic)
        y0 = sum(float(prof.f_prim(key, mu * tk)) * G[x, pad] for x, key in enumerate(keys)) / mu
        ym, yp = leapfrog_start(rhs, y0, tk, h)
        amp2 = float(prof.amplitude) ** 2
        ref = max(float(np.max(np.abs(y0))), float(np.max(np.abs(G))) * self.tau * (1.0 + amp2), 1e-300)
        pending: dict[int, dict[int, np.ndarray]] = {}

        def record(m: int, y: np.ndarray) -> None:
            lo = int(round(m / s))
            rem = m - lo * s
            if rem not in (-1, 0, 1):
                return
            slot = pending.setdefault(lo, {})
            slot[rem] = y
            if len(slot) == 3:
                self._deposit(k, ic + lo, slot, F_full.get(lo))
                del pending[lo]

        record(0, y0)
        record(1, yp)
        record(-1, ym)
        steps = Mc * s + 1
        for sign, first in ((1, yp), (-1, ym)):
            prev, cur = y0, first
            for j in range(1, steps):
                tt = tk + sign * j * h
                nxt = prev + 2.0 * sign * h * rhs(cur, tt)
                m = sign * (j + 1)
                record(m, nxt)
                if j % s == 0:
                    nrm = float(np.max(np.abs(nxt)))
                    if not np.isfinite(nrm) or nrm > 1e6 * ref:
                        raise SolverBlowUp(f"Newton system (level {n}, k = {k}) blew up at t = {tt:.5f}: {nrm:.3e}")
                prev, cur = cur, nxt

    def _deposit(self, k: int, i: int, vals: dict[int, np.ndarray], F_full: Optional[np.ndarray]) -> None:
        """Add chi-tilde_k theta_k around t_i to the stores and the commutator to e_next."""
        prof = self.profiles
        g, ng = self.grid, self.ngrid
        t = self.t(i)
        h = self.h
        cm, c0, cp = (float(prof.chi_tilde_k(k, t + o * h)) for o in (-1, 0, 1))
        if cm == 0.0 and c0 == 0.0 and cp == 0.0:
            return
        up = {o: resample_hat(vals[o], ng.n, g.n) for o in (-1, 0, 1)}
        self.store.add("cur", i, c0 * up[0])
        self.store.add("Wp", i, cp * up[1])
        self.store.add("Wm", i, cm * up[-1])
        comm = ((cp * up[1] - cm * up[-1]) - c0 * (up[1] - up[-1])) / (2.0 * h)
        self.store.add("e_next", i, comm)
        if c0 != 0.0:
            # working-grid discrepancy at t_i, carried by the small stress
            lin_full = self._linear(g, self._bg(t, False), up[0])
            lin_work = resample_hat(self._linear(ng, self._bg(t, True), vals[0]), ng.n, g.n)
            f_full = F_full if F_full is not None else np.zeros(g.shape_hat, dtype=complex)
            f_work = resample_hat(resample_hat(f_full, g.n, ng.n) * ng.dealias_mask, ng.n, g.n)
            self.store.add("p", i, c0 * ((lin_full - lin_work) - (f_full - f_work)))

    def _finish_level(self, n: int) -> None:
        g = self.grid
        st = self.store
        for i in st.indices("cur"):
            cur = ScalarField(g, hat=st.get("cur", i))
            prev = st.get("W", i)
            t = self.t(i)
            other = self.theta_q_hat(t) - self.theta_bar_hat(t)
            if prev is not None:
                other = other + prev
            oth = ScalarField(g, hat=other)
            tc = riesz_velocity(cur)
            src = advect(tc, cur + oth) + advect(riesz_velocity(oth), cur)
            st.add("p", i, src.hat)
            st.add("W", i, cur.hat)
        st.reset("cur")
        st.reset("e")
        st.swap("e", "e_next")
        sups = np.zeros(self.count)
        keep = n + 1 <= self.Gamma - 1
        if keep:
            self.e_hist[n + 1] = np.memmap(os.path.join(self.workdir, f"ehist_{n + 1}.bin"), dtype=complex,
                                           mode="w+", shape=(self.count,) + self._mshape)
        for i in st.indices("e"):
            e = st.get("e", i)
            sups[i - self.i_min] = stress_from_scalar(ScalarField(g, hat=e)).sup()
            if keep:
                self.e_hist[n + 1][i - self.i_min] = resample_hat(e, g.n, self.mgrid.n)
        self.level_sups[n + 1] = sups

    # -- Nash step -------------------------------------------------------------------
    def _theta_gamma_hat(self, i: int, o: int = 0) -> np.ndarray:
        name = {-1: "Wm", 0: "W", 1: "Wp"}[o]
        w = self.store.get(name, i)
        th = self.theta_q_hat(self.t(i) + o * self.h)
        return th if w is None else th + w

    def _theta_tilde_hat(self, i: int) -> np.ndarray:
        return self._theta_gamma_hat(i) * self._moll

    def _prepare_nash(self) -> None:
        g = self.grid
        self._ut = _LRU(48, lambda i: riesz_velocity(ScalarField(g, hat=self._theta_tilde_hat(i))))
        self._ut_coeffs = _LRU(64, self._make_ut_coeffs)
        self._flows = _LRU(3, self._make_perturbed_flow)
        self._traj = _LRU(4, self._make_trajectories)
        self._rbar = _LRU(48, self._make_rbar)
        self._level_coeffs = _LRU(96, self._make_level_coeffs)
        self._koff, self._kw = temporal_kernel(self.p.ell_tq, self.p.mollify_nodes)

    def _make_perturbed_flow(self, k: int):
        r = int(math.ceil(2 * self.c / 3)) + 2
        ic = k * self.c
        vel = TimeSampledField(self.t(ic - r - 2), self.dt, 2 * r + 5,
                               sampler=lambda j: self._ut(ic - r - 2 + j), cache=False)
        return solve_backward_flow(vel, self.t(ic), (self.t(ic - r), self.t(ic + r)), dt=self.dt,
                                   velocity_ref=f"u_tilde k={k}")

    def _make_ut_coeffs(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        u = resample(self._ut(i), self.mgrid.n)
        return (spline_filter(u[0].values, order=3, mode="grid-wrap"),
                spline_filter(u[1].values, order=3, mode="grid-wrap"))

    def _interp(self, t: float, make: Callable[[int], tuple]):
        """Cubic Lagrange combination of lattice items around time t."""
        x = t / self.dt
        j = int(round(x))
        if abs(x - j) < 1e-9:
            return make(j)
        j0 = int(math.floor(x)) - 1
        idx = list(range(j0, j0 + 4))
        w = _lagrange_weights(x, np.array(idx, dtype=float))
        items = [make(jj) for jj in idx]
        return tuple(sum(wj * it[c] for wj, it in zip(w, items)) for c in range(len(items[0])))

    def _make_trajectories(self, i: int) -> dict[int, np.ndarray]:
        """Grid-unit positions at t_i + s_m of the particles at the mollifier grid points at t_i."""
        mg = self.mgrid
        scale = mg.n / (2.0 * np.pi)
        x1, x2 = mg.mesh
        start = np.stack([x1, x2]) * scale
        t0 = self.t(i)

        def rhs(pos, tt):
            c1, c2 = self._interp(tt, self._ut_coeffs)
            return np.stack([map_coordinates(c1, pos, order=3, mode="grid-wrap", prefilter=False),
                             map_coordinates(c2, pos, order=3, mode="grid-wrap", prefilter=False)]) * scale

        out = {}
        offs = self._koff
        for chain in ([m for m in range(len(offs)) if offs[m] > 0], [m for m in range(len(offs)) if offs[m] < 0][::-1]):
            pos = start.copy()
            s_prev = 0.0
            for m in chain:
                pos = rk4_step(rhs, pos, t0 + s_prev, offs[m] - s_prev)
                s_prev = offs[m]
                out[m] = pos
        for m in range(len(offs)):
            if offs[m] == 0:
                out[m] = start
        return out

    def _make_level_coeffs(self, key: tuple[int, int]) -> tuple[np.ndarray, ...]:
        """Spline coefficients of R_{q,n}(t_j) on the mollifier grid, with the component means."""
        n, j = key
        mg = self.mgrid
        if n == 0:
            R = resample(self.R_q0(self.t(j)), mg.n)
        else:
            jj = j - self.i_min
            if not 0 <= jj < self.count:
                R = SymTensorField.zeros(mg)
            else:
                R = stress_from_scalar(ScalarField(mg, hat=np.array(self.e_hist[n][jj])))
        coeffs = tuple(spline_filter(comp.values, order=3, mode="grid-wrap") for comp in R.components)
        return coeffs + tuple(np.array(comp.mean()) for comp in R.components)

    def _level_active_near(self, n: int, i: int) -> bool:
        sups = self.level_sups.get(n)
        if sups is None:
            return False
        w = int(math.ceil(self.p.ell_tq / self.dt)) + 3
        lo, hi = max(i - w - self.i_min, 0), min(i + w - self.i_min + 1, self.count)
        return bool(np.any(sups[lo:hi] > 0))

    def _make_rbar(self, key: tuple[int, int]) -> SymTensorField:
        """Flow-mollified R_{q,n} at t_i, computed on the mollifier grid and padded."""
        n, i = key
        mg = self.mgrid
        if not self._level_active_near(n, i):
            return SymTensorField.zeros(self.grid)
        traj = self._traj(i)
        t0 = self.t(i)
        acc = [np.zeros((mg.n, mg.n)) for _ in range(3)]
        mean = np.zeros(3)
        for m, (sm, wm) in enumerate(zip(self._koff, self._kw)):
            co = self._interp(t0 + sm, lambda j: self._level_coeffs((n, j)))
            for cpt in range(3):
                acc[cpt] += wm * map_coordinates(co[cpt], traj[m], order=3, mode="grid-wrap", prefilter=False)
                mean[cpt] += wm * float(co[3 + cpt])
        comps = []
        for cpt in range(3):
            hat = fft2(acc[cpt])
            hat[0, 0] = mean[cpt]
            comps.append(ScalarField(mg, hat=hat))
        return resample(SymTensorField(*comps), self.grid.n)

    def _rbar_at(self, n: int, tt: float) -> SymTensorField:
        x = tt / self.dt
        j = int(round(x))
        if abs(x - j) < 1e-9:
            return self._rbar((n, j))
        j0 = int(math.floor(x)) - 1
        idx = list(range(j0, j0 + 4))
        w = _lagrange_weights(x, np.array(idx, dtype=float))
        acc = None
        for jj, wj in zip(idx, w):
            term = self._rbar((n, jj)) * float(wj)
            acc = term if acc is None else acc + term
        return acc

    def active_terms(self, tt: float) -> list[tuple[tuple[int, int], int, int, float]]:
        """(xi, k, n, g) with k in Z_{q,n}, chi_k(t) != 0 and g_{xi,k,n+1}(mu t) != 0."""
        prof = self.profiles
        out = []
        for k in prof.active_k(tt):
            for n in range(self.Gamma):
                if k not in self.zsets.get(n, ()):
                    continue
                for xi in DIRECTIONS:
                    gv = float(prof.g(prof.oscillator_key(xi, k, n + 1), self.mu * tt))
                    if gv != 0.0:
                        out.append((xi, k, n, gv))
        return out

    def nash_wave(self, xi, k: int, n: int, tt: float, leading: bool = False):
        """theta_{xi,k,n}(t) and, if ``leading``, the pair (B, A-bar) for the microlocal split."""
        lam = self.p.lambda_q1
        flow = self._flows(k)
        snap = flow.at(tt)
        chi = float(self.profiles.chi_k(k, tt))
        Rb = self._rbar_at(n, tt)
        delta = self.p.delta_level(n)
        amps = amplitudes(snap.grad, Rb, delta, chi, lam, where=f" (Nash, level {n}, k = {k}, t = {tt:.5f})")
        a = ScalarField(self.grid, amps[DIRECTIONS.index(tuple(xi))])
        theta = oscillatory_field(a, snap.displacement, xi, lam)
        if not leading:
            return theta, None
        _, grad = phase_gradient(snap.displacement, xi, self.grid)
        Abar = leading_tensor(a.values, grad, lam, self.grid)
        B = microlocal_tensor(theta, rtol=self.p.microlocal_rtol)
        return theta, (B, Abar)

    def output_indices(self) -> list[int]:
        st = self.store
        touched = set()
        for name in ("W", "Wm", "Wp", "e", "p", "S"):
            touched.update(int(i) for i in st.indices(name))
        for n, sups in self.level_sups.items():
            touched.update(int(j) + self.i_min for j in np.nonzero(sups > 0)[0])
        return sorted(touched)

    def nash_step(self) -> tuple[ReynoldsTriple, StageReport]:
        if self.n_done != self.Gamma:
            raise ValueError(f"Nash step needs {self.Gamma} Newton substeps, {self.n_done} done")
        t_start = time.perf_counter()
        self._prepare_nash()
        g = self.grid
        p = self.p
        st = self.store
        h = self.h
        st.array("out_theta", (3,) + (g.n, g.shape_hat[1]))
        st.array("out_R", (3, g.n, g.shape_hat[1]))
        norms = {k: 0.0 for k in ("R_L_transport", "R_L_nash", "R_O_flow", "R_O_oscillation", "R_R_stress",
                                  "R_R_small", "R_R_mollification", "R_L", "R_O", "R_R", "R1", "theta_p")}
        inc_max = 0.0
        mass_in, mass_all = 0.0, 0.0
        kabs = g.kabs
        band = (kabs >= p.lambda_q1 / 4) & (kabs <= 4 * p.lambda_q1)
        indices = self.output_indices()
        self.computed = set(indices)
        for count_i, i in enumerate(indices):
            t = self.t(i)
            tg = {o: self._theta_gamma_hat(i, o) for o in (-1, 0, 1)}
            tp = {o: np.zeros(g.shape_hat, dtype=complex) for o in (-1, 0, 1)}
            osc_B = [np.zeros(g.shape_hat, dtype=complex) for _ in range(3)]
            osc_A = [np.zeros(g.shape_hat, dtype=complex) for _ in range(3)]
            for o in (-1, 0, 1):
                for xi, k, n, gv in self.active_terms(t + o * h):
                    theta, lead = self.nash_wave(xi, k, n, t + o * h, leading=(o == 0))
                    tp[o] = tp[o] + gv * theta.hat
                    if lead is not None:
                        B, Abar = lead
                        for cpt in range(3):
                            osc_B[cpt] += gv**2 * B.components[cpt].hat
                            osc_A[cpt] += gv**2 * Abar.components[cpt].hat
            for o in (-1, 0, 1):
                arr = st._arrays["out_theta"]
                arr[i - self.i_min, o + 1] = tg[o] + tp[o]
            st.touched["out_theta"][i - self.i_min] = True
            theta_p = ScalarField(g, hat=tp[0])
            theta_t = ScalarField(g, hat=self._theta_tilde_hat(i))
            u_t = self._ut(i)
            dtp = ScalarField(g, hat=(tp[1] - tp[-1]) / (2.0 * h))
            up = riesz_velocity(theta_p)
            R_Lt = stress_from_scalar(dtp + advect(u_t, theta_p))
            R_Ln = stress_from_scalar(advect(up, theta_t))
            S = st.get("S", i)
            S_f = SymTensorField(*[ScalarField(g, hat=(S[c] if S is not None else 0.0) + osc_A[c]) for c in range(3)])
            O_m = SymTensorField(*[ScalarField(g, hat=osc_B[c] - osc_A[c]) for c in range(3)])
            e = st.get("e", i)
            R_st = stress_from_scalar(ScalarField(g, hat=e)) if e is not None else SymTensorField.zeros(g)
            pp = st.get("p", i)
            R_small = self.R_q(t) - self.R_q0(t)
            if pp is not None:
                R_small = R_small + stress_from_scalar(ScalarField(g, hat=pp))
            tgam = ScalarField(g, hat=tg[0])
            R_mol = stress_from_scalar(advect(up, tgam - theta_t) + advect(riesz_velocity(tgam) - u_t, theta_p))
            R_L = R_Lt + R_Ln
            R_O = S_f + O_m
            R_R = R_st + R_small + R_mol
            R1 = R_L + R_O + R_R
            out = st._arrays["out_R"]
            out[i - self.i_min] = np.stack([c.hat for c in R1.components])
            st.touched["out_R"][i - self.i_min] = True
            for name, val in (("R_L_transport", R_Lt), ("R_L_nash", R_Ln), ("R_O_flow", S_f), ("R_O_oscillation", O_m),
                              ("R_R_stress", R_st), ("R_R_small", R_small), ("R_R_mollification", R_mol),
                              ("R_L", R_L), ("R_O", R_O), ("R_R", R_R), ("R1", R1), ("theta_p", theta_p)):
                norms[name] = max(norms[name], val.sup())
            incr = ScalarField(g, hat=tg[0] + tp[0] - self.theta_q_hat(t))
            lam1 = p.lambda_q1
            inc_max = max(inc_max, lam1 * ScalarField(g, hat=incr.hat * g.inv_kabs).sup() + incr.sup())
            w2 = g.mode_weight * np.abs(tp[0]) ** 2
            mass_all += float(w2.sum())
            mass_in += float(w2[band].sum())
            if self.progress and count_i % 50 == 0:
                log.info("  Nash assembly %d/%d (%.1fs)", count_i, len(indices), time.perf_counter() - t_start)
        self.timing["nash"] = time.perf_counter() - t_start
        report = StageReport(norms=norms, levels=list(self.levels))
        report.increment = inc_max
        report.increment_bound = 2.0 * p.M * math.sqrt(p.delta_q1) * math.sqrt(p.lambda_q1)
        report.spectral_fraction = mass_in / mass_all if mass_all > 0 else 1.0
        triple = self._output_triple()
        return triple, report

    def _output_triple(self) -> ReynoldsTriple:
        g = self.grid
        st = self.store
        base_t = self.triple.times
        i_a = min(min(self.computed, default=0), int(math.floor(base_t[0] / self.dt)))
        i_b = max(max(self.computed, default=0), int(math.ceil(base_t[-1] / self.dt)))
        i_a = max(i_a, self.i_min)
        i_b = min(i_b, self.i_max)
        ev = self.ev
        h = self.h
        theta_arr = st._arrays["out_theta"]
        R_arr = st._arrays["out_R"]
        touched_t = st.touched["out_theta"]
        touched_R = st.touched["out_R"]
        i_min = self.i_min
        dt = self.dt
        grid_n = g.n

        def theta_sampler(j: int, o: int) -> ScalarField:
            i = i_a + j
            if touched_t[i - i_min]:
                return ScalarField(g, hat=np.array(theta_arr[i - i_min, o + 1]))
            th = ev.theta_at(i * dt + o * h)
            return th if th.grid.n == grid_n else resample(th, grid_n)

        def R_sampler(j: int) -> SymTensorField:
            i = i_a + j
            if touched_R[i - i_min]:
                a = np.array(R_arr[i - i_min])
                return SymTensorField(*[ScalarField(g, hat=a[c]) for c in range(3)])
            r = ev.R_at(i * dt)
            return r if r.grid.n == grid_n else resample(r, grid_n)

        count = i_b - i_a + 1
        stencil = StencilSeries(i_a * dt, dt, count, h, (-1, 0, 1), theta_sampler)
        R = TimeSampledField(i_a * dt, dt, count, sampler=R_sampler, cache=False)
        params = self.p.with_changes(q=self.p.q + 1, override_lambdas=None if self.p.override_lambdas is None
                                     else (self.p.lambda_q1, self.p.lambda_q2))
        meta = {"kind": "stage", "from_q": self.p.q, "workdir": self.workdir}
        out = ReynoldsTriple(stencil, R, params, meta, None)
        out._state = self  # keeps the backing store alive
        return out


# ---------------------------------------------------------------------------
# Public stage API
# ---------------------------------------------------------------------------


def prepare_stage(triple: ReynoldsTriple, workdir: Optional[str] = None, progress: bool = False) -> StageState:
    """Mollified background and empty stores for the stage starting at ``triple``."""
    return StageState(triple, workdir=workdir, progress=progress)


def newton_substep(state: StageState, n: int) -> StageState:
    """Run Newton substep n: amplitudes, forced linearized solves, new stresses."""
    state.newton_substep(n)
    return state


def nash_step(state: StageState) -> tuple[ReynoldsTriple, StageReport]:
    """Nash perturbation on top of the Gamma Newton substeps and assembly of R_{q+1}."""
    return state.nash_step()


def residual_audit(triple: ReynoldsTriple, indices: Optional[Sequence[int]] = None) -> tuple[float, float, np.ndarray]:
    """(max residual, time of the max, per-sample L2 norms) of the relaxed system."""
    idx = list(range(len(triple))) if indices is None else list(indices)
    sup = np.zeros(len(idx))
    l2 = np.zeros(len(idx))
    for j, i in enumerate(idx):
        r = triple.residual(i)
        sup[j] = r.sup()
        l2[j] = math.sqrt(float(np.mean(r.values**2))) * 2.0 * math.pi
    jmax = int(np.argmax(sup)) if len(sup) else 0
    return float(sup.max()) if len(sup) else 0.0, float(triple.times[idx[jmax]]) if idx else float("nan"), l2


def _drift_bound(triple: ReynoldsTriple, l2: np.ndarray, t_stop: float) -> float:
    """sum_i dt ||Lambda^{-1} theta(t_i)||_2 ||r(t_i)||_2 over samples up to t_stop."""
    total = 0.0
    for i, t in enumerate(triple.times):
        if t > t_stop + 1e-12:
            break
        th = triple.theta[i]
        g = th.grid
        lam_inv = ScalarField(g, hat=th.hat * g.inv_kabs)
        nrm = math.sqrt(float(np.mean(lam_inv.values**2))) * 2.0 * math.pi
        total += triple.theta.dt * nrm * l2[i]
    return total


def run_stage(triple: ReynoldsTriple, override: bool = False, workdir: Optional[str] = None,
              progress: bool = False, hamiltonian_time: float = 1.5) -> tuple[ReynoldsTriple, StageReport]:
    """Mollification, Gamma Newton substeps and the Nash step, followed by the stage audit.

    Unless ``override`` is set, the input triple must pass the inductive checks.
    """
    t0 = time.perf_counter()
    p = triple.params
    rep_in = None
    if not override:
        rep_in = check_inductive(triple, stride=8)
        if not rep_in.passed:
            bad = [r for r in rep_in.rows if r.ratio > 1.0]
            raise InductiveCheckError(f"input triple fails the inductive estimates ({rep_in.support_detail or bad[:3]}); "
                             "pass override=True to run anyway")
    state = prepare_stage(triple, workdir=workdir, progress=progress)
    for n in range(state.Gamma):
        newton_substep(state, n)
    new, report = nash_step(state)
    report.inductive_input = rep_in
    report.ordering_warnings = p.ordering_warnings()
    report.timing.update(state.timing)
    # audit
    ta = time.perf_counter()
    rmax, rtime, l2_new = residual_audit(new)
    report.residual_max = rmax
    report.residual_time = rtime
    report.residual_tol = 1e-5 * math.sqrt(p.delta_q1) * p.lambda_q1**1.5
    report.R0_norm = max(triple.R[i].sup() for i in range(len(triple)))
    report.R1_norm = max(new.R[i].sup() for i in range(len(new)))
    from .diagnostics import support_report

    diff = TimeSampledField(new.theta.t0, new.theta.dt, len(new),
                            sampler=lambda i: new.theta[i] - state.ev.theta_at(new.times[i]), cache=False)
    report.support_intervals = support_report(diff)
    lam, dq = p.lambda_q, p.delta_q
    e = 1.0 / (math.sqrt(dq) * lam**1.5)
    wid = 2 * state.Gamma * state.tau
    report.support_windows = [(-2.0 + e - wid, -1.0 - e + wid), (1.0 + e - wid, 2.0 - e + wid)]
    report.support_ok = all(any(a - 1e-12 <= lo and hi <= b + 1e-12 for a, b in report.support_windows)
                            for lo, hi in report.support_intervals)
    # Hamiltonian at the lattice time nearest to hamiltonian_time
    j = int(np.argmin(np.abs(new.times - hamiltonian_time)))
    th_t = float(new.times[j])
    H1 = hamiltonian(new.theta[j])
    H0 = hamiltonian(state.ev.theta_at(th_t))
    _, _, l2_old = residual_audit(triple)
    drift = _drift_bound(new, l2_new, th_t) + _drift_bound(triple, l2_old, th_t)
    report.hamiltonian = {"t": th_t, "H0": H0, "H1": H1, "drift_bound": drift}
    report.timing["audit"] = time.perf_counter() - ta
    report.timing["total"] = time.perf_counter() - t0
    return new, report
