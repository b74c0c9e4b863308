import math

import numpy as np
import pytest

from oracles import random_band_limited, shear_backward_gradient
from sqgnash.bilinear_ops import leading_tensor
from sqgnash.grid_spectral import Grid, ScalarField, SymTensorField, read_sqgf, riesz_velocity, write_sqgf
from sqgnash.iteration_engine import (
    DIRECTIONS,
    GeometricBallError,
    InductiveCheckError,
    IterationParams,
    ResolutionError,
    amplitudes,
    base_case,
    run_stage,
    stress_tensors,
    time_profile,
)
from sqgnash.temporal_profiles import build_profiles
from sqgnash.tensor_calculus import GEOMETRIC_BASIS, perp_div_div

TOY = IterationParams(override_lambdas=(2, 8), n=64, newton_n=32, mollify_n=32, base_delta=1e-9,
                      dt_factor=8, fine_substeps=16)


# -- parameters ---------------------------------------------------------------


def test_desk_ladder_values():
    p = IterationParams(override_lambdas=(4, 32))
    d0, d1 = 4**-0.6, 32**-0.6
    assert p.lambda_q == 4 and p.lambda_q1 == 32 and p.lambda_q2 == math.ceil(32**1.25)
    assert abs(p.delta_q - d0) < 1e-15 and abs(p.delta_q1 - d1) < 1e-15
    assert abs(p.delta_q - 0.4353) < 1e-4 and abs(p.delta_q1 - 0.125) < 1e-12
    tau = d0**-0.5 * 4**-1.5 * 32**-0.01
    assert abs(p.tau_q - tau) < 1e-15 and abs(p.tau_q - 0.1830) < 1e-4
    assert abs(p.mu_q1 - d1**0.5 * 4 * 32**0.5 * 32**0.04) < 1e-12 and abs(p.mu_q1 - 9.19) < 0.01
    assert abs(p.ell_q - (4 * 32) ** -0.5) < 1e-15
    assert abs(p.ell_tq - d0**-0.5 * 4**-0.5 / 32) < 1e-15
    assert p.Gamma == 5
    assert abs(p.delta_level(2) - d1 * (4 / 32) ** 0.4) < 1e-15


def test_unforced_ladder():
    p = IterationParams()
    assert [p.lambda_at(j) for j in range(4)] == [math.ceil(4 ** (1.25**j)) for j in range(4)]
    assert p.lambda_q == 4 and p.lambda_q1 == 6


def test_param_validation():
    for kw in ({"beta": 0.5}, {"beta": 0.0}, {"b": 1.0}, {"b": 1.5}, {"a": 1.0}, {"n": 7},
               {"override_lambdas": (8, 4)}):
        with pytest.raises(ValueError):
            IterationParams(**kw)


def test_param_file_roundtrip(tmp_path):
    p = IterationParams(override_lambdas=(4, 32), beta=0.25, b=1.3, n=128, seed=7)
    path = tmp_path / "p.txt"
    path.write_text(p.to_text())
    assert IterationParams.from_file(path) == p
    path.write_text("# desk\na = 5\nbeta = 0.2  # comment\ndt = 12\nseeds = 3\n")
    q = IterationParams.from_file(path)
    assert (q.a, q.beta, q.dt_factor, q.seed) == (5.0, 0.2, 12, 3)
    path.write_text("gamma = 3\n")
    with pytest.raises(ValueError, match="unknown"):
        IterationParams.from_file(path)


def test_ordering_warnings_are_reported():
    p = IterationParams(override_lambdas=(4, 32))
    assert isinstance(p.ordering_warnings(), list)
    for msg in p.ordering_warnings():
        assert "not below" in msg


# -- base case ----------------------------------------------------------------


@pytest.fixture(scope="module")
def base():
    return base_case(IterationParams(override_lambdas=(4, 32), n=128, base_delta=1e-2), Grid(128))


def test_base_case_residual(base):
    interior = range(2, len(base) - 2)
    assert base.residual_norms(interior).max() < 1e-8


def test_base_case_trace_and_symmetry(base):
    for i in range(0, len(base), 8):
        R = base.R[i]
        assert np.array_equal(R[0].values, -R[2].values)
        assert np.all(R[0].values == 0.0)


def test_base_case_supports(base):
    for i, t in enumerate(base.times):
        if abs(t) <= 1.25:
            assert base.R[i].sup() == 0.0
        if abs(t) >= 1.75:
            assert base.theta[i].sup() == 0.0 and base.R[i].sup() == 0.0
    assert time_profile(0.3) == 1.0 and time_profile(1.25) == 1.0 and time_profile(1.75) == 0.0


def test_base_case_velocity_coupling(base):
    for i in (0, 40, 100, 200):
        assert (base.u[i] - riesz_velocity(base.theta[i])).sup() < 1e-10


def test_base_case_resolution():
    with pytest.raises(ResolutionError):
        base_case(IterationParams(override_lambdas=(8, 32), n=16), Grid(16))


# -- amplitude identities -----------------------------------------------------


G = Grid(64)
X1, X2 = G.mesh


def _small_stress(rng, scale):
    comps = [ScalarField(G, scale * random_band_limited(64, 3, rng)) for _ in range(3)]
    return SymTensorField(*comps)


def _sum_tensor(tensors, weights=None):
    weights = weights or [1.0] * len(tensors)
    acc = tensors[0] * weights[0]
    for t, w in zip(tensors[1:], weights[1:]):
        acc = acc + t * w
    return acc


def test_zero_stress_amplitudes():
    grad = shear_backward_gradient(X1, 0.1)
    lam, delta, chi = 32, 0.05, 0.7
    zero = SymTensorField.zeros(G)
    amps = amplitudes(grad, zero, delta, chi, lam)
    # gamma from G^{-T} G^{-1}, computed directly
    inv = np.linalg.inv(np.moveaxis(grad, (0, 1), (-2, -1)))
    M = np.swapaxes(inv, -1, -2) @ inv
    c = GEOMETRIC_BASIS.coefficients(M[..., 0, 0], M[..., 0, 1], M[..., 1, 1])
    for a, ci, xi in zip(amps, c, DIRECTIONS):
        v = np.array([grad[0, 0] * xi[0] + grad[1, 0] * xi[1], grad[0, 1] * xi[0] + grad[1, 1] * xi[1]])
        expected = 2 * math.sqrt(delta * lam) * np.hypot(*v) ** 1.5 * chi * np.sqrt(ci)
        assert np.max(np.abs(a - expected)) < 1e-12
    total = _sum_tensor(stress_tensors(grad, zero, delta, chi))
    assert perp_div_div(total).sup() < 1e-8


def test_static_decomposition_identity(rng):
    grad = np.broadcast_to(np.eye(2)[:, :, None, None], (2, 2, 64, 64)).copy()
    lam, delta, chi = 16, 0.1, 0.9
    R = _small_stress(rng, 0.01)
    amps = amplitudes(grad, R, delta, chi, lam)
    tensors = [leading_tensor(a, np.broadcast_to(np.array(xi, float)[:, None, None], (2, 64, 64)), lam, G)
               for a, xi in zip(amps, DIRECTIONS)]
    lhs = perp_div_div(_sum_tensor(tensors))
    rhs = perp_div_div(R) * (-(chi**2))
    assert (lhs - rhs).sup() < 1e-6 * rhs.sup()


def test_decoupled_forcing_identity(rng):
    grad = shear_backward_gradient(X1, 0.05)
    delta = 0.1
    R = _small_stress(rng, 0.01)
    A = stress_tensors(grad, R, delta, 1.0)
    dA = [perp_div_div(a) for a in A]
    prof = build_profiles(DIRECTIONS, 5, 0.2)
    k, n = 3, 2
    keys = [prof.oscillator_key(xi, k, n) for xi in DIRECTIONS]
    target = perp_div_div(R) * -1.0
    for s in np.linspace(0.0, 1.0, 41):
        lhs = dA[0] * float(prof.f(keys[0], s))
        g2 = dA[0] * float(prof.g(keys[0], s) ** 2)
        for d, key in zip(dA[1:], keys[1:]):
            lhs = lhs + d * float(prof.f(key, s))
            g2 = g2 + d * float(prof.g(key, s) ** 2)
        assert (lhs - (target - g2)).sup() < 1e-9


def test_geometric_ball_error_names_point(rng):
    grad = np.broadcast_to(np.eye(2)[:, :, None, None], (2, 2, 64, 64)).copy()
    R = _small_stress(rng, 1.0)
    with pytest.raises(GeometricBallError, match="grid index"):
        amplitudes(grad, R, 0.1, 1.0, 16)


# -- toy stage ----------------------------------------------------------------


@pytest.fixture(scope="module")
def toy_stage(tmp_path_factory):
    triple = base_case(TOY, Grid(TOY.n))
    new, report = run_stage(triple, override=True, workdir=str(tmp_path_factory.mktemp("toy")))
    return triple, new, report


def test_toy_stage_requires_inductive_input():
    triple = base_case(TOY, Grid(TOY.n))
    with pytest.raises(InductiveCheckError):
        run_stage(triple, override=False)


def test_toy_stage_residual(toy_stage):
    _, new, report = toy_stage
    assert report.residual_ok
    assert report.residual_max < 1e-5 * math.sqrt(TOY.delta_q1) * TOY.lambda_q1**1.5


def test_toy_stage_output_params(toy_stage):
    _, new, _ = toy_stage
    assert new.params.q == 1
    assert new.params.override_lambdas == (8, TOY.lambda_q2)


def test_toy_stage_coupling_and_symmetry(toy_stage):
    _, new, _ = toy_stage
    for i in range(0, len(new), max(1, len(new) // 12)):
        assert (new.u[i] - riesz_velocity(new.theta[i])).sup() < 1e-10
        assert len(new.R[i].components) == 3


def test_toy_stage_supports(toy_stage):
    _, _, report = toy_stage
    assert report.support_ok
    tau = TOY.tau_q
    levels = report.levels
    assert len(levels) == TOY.Gamma
    for lo, hi in zip(levels, levels[1:]):
        if hi.stress_sup == 0.0:
            continue
        assert lo.support[0] - 2 * tau - 1e-12 <= hi.support[0]
        assert hi.support[1] <= lo.support[1] + 2 * tau + 1e-12


def test_toy_stage_nash_waves_disjoint_in_time(toy_stage):
    _, new, _ = toy_stage
    state = new._state
    for t in np.linspace(-2.0, 2.0, 4001):
        assert len(state.active_terms(float(t))) <= 1


def test_toy_stage_spectral_mass(toy_stage):
    _, _, report = toy_stage
    assert report.spectral_fraction >= 0.99


def test_toy_stage_report_csv(toy_stage, tmp_path):
    _, _, report = toy_stage
    report.write_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "quantity,value"
    names = {ln.split(",")[0] for ln in lines[1:]}
    for key in ("norm:R_L", "norm:R_O", "norm:R_R", "norm:R1", "residual_max", "hamiltonian:H1"):
        assert key in names


def test_toy_stage_deterministic(toy_stage, tmp_path):
    _, new, _ = toy_stage
    triple = base_case(TOY, Grid(TOY.n))
    again, _ = run_stage(triple, override=True, workdir=str(tmp_path / "w"))
    assert len(again) == len(new)
    for i in range(0, len(new), max(1, len(new) // 10)):
        for name, a, b in (("t", new.theta[i], again.theta[i]), ("r", new.R[i], again.R[i])):
            write_sqgf(tmp_path / f"a{name}.sqgf", a)
            write_sqgf(tmp_path / f"b{name}.sqgf", b)
            assert (tmp_path / f"a{name}.sqgf").read_bytes() == (tmp_path / f"b{name}.sqgf").read_bytes()
    assert read_sqgf(tmp_path / "at.sqgf").grid.n == TOY.n
