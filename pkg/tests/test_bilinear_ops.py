import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import modes, op_S_oracle, op_T_oracle, quadratic_interaction_oracle, random_band_limited, synth
from sqgnash.bilinear_ops import (
    microlocal_expand,
    microlocal_tensor,
    op_S,
    op_S_riesz,
    op_T,
    op_T_paraproduct,
    oscillatory_field,
    quadratic_interaction,
)
from sqgnash.grid_spectral import Grid, ScalarField, VectorField
from sqgnash.tensor_calculus import perp_div_div

G = Grid(64)
X1, X2 = G.mesh
DIRECTIONS = ((1, 0), (0, 1), (1, 1), (1, -1))


def field(v, grid=G):
    return ScalarField(grid, v)


def test_op_T_equal_frequencies_vanish():
    assert op_T(field(np.cos(X1)), field(np.cos(X2))).sup() < 1e-11


def test_op_T_two_mode_example():
    got = op_T(field(np.cos(2 * X1)), field(np.cos(X1)))
    expected = np.cos(3 * X1) / 6 + np.cos(X1) / 2
    assert np.max(np.abs(got.values - expected)) < 1e-13


def test_op_T_matches_convolution_oracle(rng):
    f = random_band_limited(64, 6, rng)
    g = random_band_limited(64, 6, rng)
    ref = synth(op_T_oracle(modes(f), modes(g)), 64)
    assert np.max(np.abs(op_T(field(f), field(g)).values - ref)) < 1e-10


@given(st.integers(0, 10**6))
def test_op_T_antisymmetry(seed):
    r = np.random.default_rng(seed)
    f = field(random_band_limited(64, 10, r))
    g = field(random_band_limited(64, 10, r))
    assert (op_T(f, g) + op_T(g, f)).sup() < 1e-11


@given(st.integers(0, 10**6))
def test_paraproduct_consistency(seed):
    r = np.random.default_rng(seed)
    f = field(random_band_limited(64, 10, r))
    g = field(random_band_limited(64, 10, r))
    split = op_T_paraproduct(f, g, j0=4)
    assert (split.total - op_T(f, g)).sup() < 1e-9


def test_op_S_zero_argument():
    assert op_S(field(np.cos(X1)), ScalarField.zeros(G)).sup() == 0.0


def test_op_S_single_mode_oracle():
    f, g = np.cos(X1), np.cos(2 * X2)
    md = op_S_oracle(modes(f), modes(g))
    assert len(md) <= 9
    assert np.max(np.abs(op_S(field(f), field(g)).values - synth(md, 64))) < 1e-10


def test_op_S_random_oracle(rng):
    f = random_band_limited(64, 5, rng)
    g = random_band_limited(64, 5, rng)
    ref = synth(op_S_oracle(modes(f), modes(g)), 64)
    assert np.max(np.abs(op_S(field(f), field(g)).values - ref)) < 1e-9 * max(1.0, np.abs(ref).max())


@given(st.integers(0, 10**6))
def test_op_S_riesz_form(seed):
    r = np.random.default_rng(seed)
    f = field(random_band_limited(64, 8, r))
    g = field(random_band_limited(64, 8, r))
    assert (op_S(f, g) - op_S_riesz(f, g)).sup() < 1e-8


def test_quadratic_interaction_examples():
    assert quadratic_interaction(field(np.cos(5 * X1))).sup() < 1e-12
    v = np.cos(X1) + np.cos(X2)
    ref = synth(quadratic_interaction_oracle(modes(v)), 64)
    out = quadratic_interaction(field(v))
    assert np.max(np.abs(out.values - ref)) < 1e-10
    assert abs(out.mean()) < 1e-12


@given(st.integers(0, 10**6))
def test_quadratic_interaction_mean_zero(seed):
    f = field(random_band_limited(64, 12, np.random.default_rng(seed)))
    assert abs(quadratic_interaction(f).mean()) < 1e-12


def test_microlocal_plane_wave():
    g = Grid(128)
    lam = 16
    res = microlocal_expand(ScalarField(g, np.ones((128, 128))), None, (1, 0), lam)
    assert quadratic_interaction(res.theta_xi).sup() < 1e-9
    assert perp_div_div(res.b_total).sup() < 1e-9
    lead = res.b_leading
    assert np.max(np.abs(lead[0].values - 0.25 / lam)) < 1e-15
    assert lead[1].sup() < 1e-15 and lead[2].sup() < 1e-15


def test_microlocal_decomposition_is_exact():
    g = Grid(64)
    x1, x2 = g.mesh
    a = ScalarField(g, 1 + 0.2 * np.cos(x1 - x2))
    res = microlocal_expand(a, None, (1, 1), 8)
    for t, l, e in zip(res.b_total.components, res.b_leading.components, res.b_error.components):
        assert (l + e - t).sup() < 1e-15


def _random_configuration(rng, g, lam):
    x1, x2 = g.mesh
    a = ScalarField(g, 1.0 + 0.5 * random_band_limited(g.n, 2, rng))
    eps = 0.05
    disp = VectorField(
        ScalarField(g, eps * random_band_limited(g.n, 2, rng)),
        ScalarField(g, eps * random_band_limited(g.n, 2, rng)),
    )
    xi = DIRECTIONS[rng.integers(len(DIRECTIONS))]
    return a, disp, xi


def test_microlocal_identity_random_configurations():
    g = Grid(128)
    rng = np.random.default_rng(2024)
    lam = 12
    for _ in range(20):
        a, disp, xi = _random_configuration(rng, g, lam)
        res = microlocal_expand(a, disp, xi, lam)
        lhs = perp_div_div(res.b_total)
        rhs = quadratic_interaction(res.theta_xi)
        assert (lhs - rhs).sup() / rhs.sup() < 1e-6


def test_microlocal_general_amplitude_bound():
    g = Grid(128)
    x1, x2 = g.mesh
    a = ScalarField(g, 1 + 0.3 * np.cos(x1) + 0.2 * np.sin(x1 + x2))
    lam = 12
    res = microlocal_expand(a, None, (0, 1), lam)
    err = (perp_div_div(res.b_total) - quadratic_interaction(res.theta_xi)).sup()
    assert err < 1e-7 * lam * a.sup() ** 2


def test_microlocal_tensor_direct(rng):
    g = Grid(64)
    f = ScalarField(g, random_band_limited(64, 12, rng))
    B = microlocal_tensor(f)
    rhs = quadratic_interaction(f)
    assert (perp_div_div(B) - rhs).sup() < 1e-9 * rhs.sup()


def test_error_relative_to_leading_term_decays_like_one_over_lambda():
    # |dB| / |b_leading| ~ lambda^-1 for a curved phase; each doubling halves it
    g = Grid(256)
    x1, x2 = g.mesh
    a = ScalarField(g, 1 + 0.3 * np.cos(x1) + 0.2 * np.sin(x2 + x1))
    disp = VectorField(ScalarField(g, 0.1 * np.sin(x2)), ScalarField(g, 0.1 * np.cos(x1 + x2)))
    rel = []
    for lam in (8, 16, 32):
        r = microlocal_expand(a, disp, (1, 0), lam)
        rel.append(r.b_error.sup() / r.b_leading.sup())
    for lo, hi in zip(rel[1:], rel):
        assert 1.33 <= hi / lo <= 3.0


def test_annulus_violation_names_point():
    g = Grid(64)
    x1, _ = g.mesh
    disp = VectorField(ScalarField(g, 0.9 * np.sin(x1)), ScalarField.zeros(g))
    with pytest.raises(ValueError, match="grid index"):
        oscillatory_field(ScalarField(g, np.ones((64, 64))), disp, (1, 0), 4)
