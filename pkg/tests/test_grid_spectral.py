import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import modes, random_band_limited
from sqgnash.grid_spectral import (
    Grid,
    ScalarField,
    SymTensorField,
    VectorField,
    dealias,
    divergence,
    fractional_laplacian,
    gradient,
    laplacian,
    perp_gradient,
    poisson_solve,
    read_sqgf,
    resample,
    riesz_velocity,
    write_csv,
    write_sqgf,
)

G64 = Grid(64)
X1, X2 = G64.mesh


def field(values, grid=G64):
    return ScalarField(grid, values)


def test_grid_validation():
    for bad in (3, 2, 7, 0):
        with pytest.raises(ValueError):
            Grid(bad)
    with pytest.raises(ValueError):
        Grid(16, 0.0)


def test_wavenumbers_are_integers_in_range():
    g = Grid(16)
    assert g.k1.min() == -8 and g.k1.max() == 7
    assert g.k2.min() == 0 and g.k2.max() == 8


def test_roundtrip(rng):
    v = rng.standard_normal((64, 64))
    f = field(v)
    back = ScalarField(G64, hat=f.hat).values
    assert np.max(np.abs(back - v)) / np.max(np.abs(v)) < 1e-12


def test_non_finite_rejected():
    v = np.ones((16, 16))
    v[3, 4] = np.nan
    with pytest.raises(ValueError):
        fractional_laplacian(ScalarField(Grid(16), v), 1.0)


def test_fractional_laplacian_examples():
    f = field(np.cos(X1))
    assert (fractional_laplacian(f, 1.0) - f).sup() < 1e-13
    g = fractional_laplacian(field(np.cos(2 * X1)), -1.0)
    assert np.max(np.abs(g.values - 0.5 * np.cos(2 * X1))) < 1e-13


def test_fractional_laplacian_zero_mode():
    f = field(np.cos(X1) + 3.0)
    assert abs(fractional_laplacian(f, 0.5).mean()) < 1e-14
    assert abs(fractional_laplacian(f, -0.5).mean()) < 1e-14


@given(st.integers(0, 10**6), st.floats(-1.5, 1.5), st.floats(-1.5, 1.5))
def test_fractional_laplacian_composition(seed, s1, s2):
    f = field(random_band_limited(64, 12, np.random.default_rng(seed)))
    lhs = fractional_laplacian(fractional_laplacian(f, s1), s2)
    rhs = fractional_laplacian(f, s1 + s2)
    assert (lhs - rhs).sup() < 1e-11 * max(1.0, rhs.sup())


def test_riesz_velocity_single_modes():
    # grad-perp = (-d2, d1) applied to Lambda^{-1} cos x1 = cos x1
    u = riesz_velocity(field(np.cos(X1)))
    assert np.max(np.abs(u[0].values)) < 1e-14
    assert np.max(np.abs(u[1].values + np.sin(X1))) < 1e-13
    # symbol i(-k2, k1)/|k| on cos(2 x2) gives u = (sin 2x2, 0)
    u = riesz_velocity(field(np.cos(2 * X2)))
    assert np.max(np.abs(u[0].values - np.sin(2 * X2))) < 1e-13
    assert np.max(np.abs(u[1].values)) < 1e-14
    assert riesz_velocity(ScalarField.zeros(G64)).sup() == 0.0


def test_riesz_velocity_matches_mode_oracle(rng):
    v = random_band_limited(32, 5, rng)
    u = riesz_velocity(ScalarField(Grid(32), v))
    md = modes(v)
    for (a, b), c in md.items():
        r = np.hypot(a, b)
        got1 = modes(u[0].values).get((a, b), 0.0)
        got2 = modes(u[1].values).get((a, b), 0.0)
        assert abs(got1 - (-1j * b / r) * c) < 1e-12
        assert abs(got2 - (1j * a / r) * c) < 1e-12


@given(st.integers(0, 10**6))
def test_riesz_velocity_divergence_free(seed):
    f = field(random_band_limited(64, 20, np.random.default_rng(seed)))
    assert divergence(riesz_velocity(f)).sup() < 1e-11


def test_differential_operators():
    g = gradient(field(np.cos(X1)))
    assert np.max(np.abs(g[0].values + np.sin(X1))) < 1e-13
    assert g[1].sup() < 1e-14
    assert np.max(np.abs(poisson_solve(field(np.cos(X1))).values + np.cos(X1))) < 1e-13
    with pytest.raises(ValueError, match="mean"):
        poisson_solve(field(np.cos(X1) + 0.5))
    assert np.max(np.abs(laplacian(field(np.sin(3 * X2))).values + 9 * np.sin(3 * X2))) < 1e-12


def test_divergence_of_perp_gradient(rng):
    f = field(rng.standard_normal((64, 64)))
    assert divergence(perp_gradient(f)).sup() < 1e-12 * max(1.0, f.sup()) * 64


def test_dealias():
    f = field(np.cos(31 * X1))
    assert dealias(f).sup() < 1e-13
    assert np.max(np.abs(dealias(f).hat)) < 1e-14
    h = field(np.cos(5 * X1) * np.sin(7 * X2))
    assert np.max(np.abs(dealias(h).hat - h.hat)) < 1e-15
    r = field(np.random.default_rng(1).standard_normal((64, 64)))
    assert np.array_equal(dealias(dealias(r)).hat, dealias(r).hat)


def test_parseval(rng):
    v = rng.standard_normal((64, 64))
    f = field(v)
    phys = np.mean(v**2)
    spec = float(np.sum(G64.mode_weight * np.abs(f.hat) ** 2))
    assert abs(phys - spec) < 1e-12 * phys


@given(st.integers(0, 10**6), st.floats(-3, 3), st.floats(-3, 3))
def test_linearity(seed, a, b):
    r = np.random.default_rng(seed)
    f = field(random_band_limited(64, 15, r))
    g = field(random_band_limited(64, 15, r))
    combo = f * a + g * b
    for op in (lambda h: fractional_laplacian(h, 0.7), lambda h: riesz_velocity(h)[0], laplacian, poisson_solve):
        lhs = op(combo)
        rhs = op(f) * a + op(g) * b
        assert (lhs - rhs).sup() < 1e-11 * max(1.0, lhs.sup())


def test_resample_roundtrip(rng):
    f = field(random_band_limited(64, 20, rng))
    assert (resample(resample(f, 128), 64) - f).sup() < 1e-13


def test_sqgf_roundtrip(tmp_path, rng):
    g = Grid(16)
    s = ScalarField(g, rng.standard_normal((16, 16)))
    t = SymTensorField(s, s * 2.0, s * -1.0)
    v = VectorField(s, s * 3.0)
    for obj in (s, v, t):
        p = tmp_path / "f.sqgf"
        write_sqgf(p, obj)
        raw = p.read_bytes()
        assert raw[:4] == b"SQGF"
        back = read_sqgf(p)
        for a, b in zip(obj.components, back.components):
            assert np.array_equal(a.values, b.values)
    (tmp_path / "bad.sqgf").write_bytes(b"XXXX1234")
    with pytest.raises(ValueError):
        read_sqgf(tmp_path / "bad.sqgf")


def test_csv_export(tmp_path):
    g = Grid(8)
    s = ScalarField(g, np.arange(64.0).reshape(8, 8))
    write_csv(tmp_path / "f.csv", VectorField(s, s))
    lines = (tmp_path / "f.csv").read_text().splitlines()
    assert lines[0] == "x1,x2,value,value2"
    assert len(lines) == 65
