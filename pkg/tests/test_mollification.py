import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import random_band_limited
from sqgnash.flow_transport import TimeSampledField
from sqgnash.grid_spectral import Grid, ScalarField, SymTensorField, VectorField, fractional_laplacian, riesz_velocity
from sqgnash.littlewood_paley import c_n_norm
from sqgnash.mollification import annulus_project, flow_mollify, spatial_mollify, temporal_kernel

G = Grid(64)
X1, X2 = G.mesh


def field(v, grid=G):
    return ScalarField(grid, v)


def test_spatial_pass_and_stop_band(rng):
    ell = 1 / 8
    f = field(random_band_limited(64, 5, rng))  # |k| <= 5 sqrt 2 < 8
    assert (spatial_mollify(f, ell) - f).sup() < 1e-14
    assert spatial_mollify(field(np.cos(16 * X1)), ell).sup() < 1e-14
    with pytest.raises(ValueError):
        spatial_mollify(f, 0.0)


def test_spatial_mollification_error_ratio():
    rng = np.random.default_rng(3)
    for _ in range(20):
        f = field(random_band_limited(64, 14, rng))
        for ell in (1 / 8, 1 / 16):
            err = (f - spatial_mollify(f, ell)).sup()
            ratio = err / (ell**2 * c_n_norm(f, 2).value)
            assert ratio <= 10.0


@given(st.integers(0, 10**6), st.floats(0.02, 0.5))
def test_spatial_mollify_commutes_with_multipliers(seed, ell):
    f = field(random_band_limited(64, 20, np.random.default_rng(seed)))
    a = spatial_mollify(fractional_laplacian(f, 0.5), ell)
    b = fractional_laplacian(spatial_mollify(f, ell), 0.5)
    assert (a - b).sup() < 1e-12
    u = spatial_mollify(riesz_velocity(f), ell)
    v = riesz_velocity(spatial_mollify(f, ell))
    assert (u - v).sup() < 1e-12


def test_annulus_examples():
    lam = 8
    f = field(np.cos(lam * X1))
    assert (annulus_project(f, lam) - f).sup() < 1e-14
    g = Grid(256)
    assert annulus_project(ScalarField(g, np.cos(g.mesh[0])), 64).sup() < 1e-14
    with pytest.raises(ValueError):
        annulus_project(f, 0.5)


@given(st.integers(0, 10**6), st.integers(2, 10))
def test_annulus_projection_identities(seed, lam):
    f = field(np.random.default_rng(seed).standard_normal((64, 64)))
    p = annulus_project(f, lam)
    assert (annulus_project(p, lam, enlarged=True) - p).sup() < 1e-12


def test_annulus_projection_idempotent_on_pass_band(rng):
    # chi is a smooth cutoff, so P(Pf) = Pf needs the spectrum where chi = 1
    lam = 8
    g = Grid(128)
    x1, x2 = g.mesh
    f = ScalarField(g, np.cos(8 * x1) + np.sin(10 * x1 + 6 * x2) - np.cos(12 * x2 + 3 * x1))
    p = annulus_project(f, lam)
    assert (annulus_project(p, lam) - p).sup() < 1e-12


def test_temporal_kernel_moments():
    s, w = temporal_kernel(0.1, 24)
    assert abs(w.sum() - 1.0) < 1e-15
    assert abs(np.dot(w, s)) < 1e-17
    assert np.all(np.abs(s) < 0.1)
    with pytest.raises(ValueError):
        temporal_kernel(0.0)


def _zero_velocity(t):
    z = ScalarField.zeros(G)
    return VectorField(z, z)


def _tensor(a, b, c):
    return SymTensorField(field(a), field(b), field(c))


def test_flow_mollify_constant_in_time():
    R0 = _tensor(np.cos(X1), np.sin(X2), 0.3 + np.cos(X1 + X2))
    R = TimeSampledField(0.0, 0.05, 11, fields=[R0] * 11)
    out = flow_mollify(R, _zero_velocity, 0.1)
    for i in range(out.count):
        assert (out[i] - R0).sup() < 1e-10
        assert np.array_equal(out[i][1].values, out[i].components[1].values)


def test_flow_mollify_kills_linear_drift():
    base = _tensor(np.cos(X1), np.sin(2 * X2), np.cos(X1 - X2))
    R = TimeSampledField.from_function(lambda t: base * t, 0.0, 0.05, 13)
    out = flow_mollify(R, _zero_velocity, 0.1)
    for i in range(out.count):
        t = out.t0 + i * out.dt
        assert (out[i] - base * t).sup() < 1e-8


def test_flow_mollify_transported_tensor_invariant():
    # steady shear u = (0, sin x1) carries labels a = (x1, x2 - t sin x1)
    u = VectorField(ScalarField.zeros(G), field(np.sin(X1)))

    def transported(t):
        s = np.cos(X2 - t * np.sin(X1))
        return _tensor(s, 0.5 * s, -s)

    R = TimeSampledField.from_function(transported, -0.2, 0.01, 41)
    out = flow_mollify(R, lambda t: u, 0.05, substeps=4)
    for i in range(0, out.count, 5):
        t = out.t0 + i * out.dt
        assert (out[i] - transported(t)).sup() < 1e-5


def test_flow_mollify_preserves_means():
    rng = np.random.default_rng(4)
    comps = [random_band_limited(64, 6, rng, mean_zero=False) for _ in range(3)]
    R0 = _tensor(*comps)
    u = riesz_velocity(field(random_band_limited(64, 3, rng)))
    R = TimeSampledField(0.0, 0.05, 9, fields=[R0] * 9)
    out = flow_mollify(R, lambda t: u * 0.2, 0.1)
    for c_in, c_out in zip(R0.components, out[2].components):
        assert abs(c_in.mean() - c_out.mean()) < 1e-10


def test_flow_mollify_margin_error():
    R0 = _tensor(np.cos(X1), np.cos(X1), np.cos(X1))
    R = TimeSampledField(0.0, 0.05, 3, fields=[R0] * 3)
    with pytest.raises(ValueError, match="margin"):
        flow_mollify(R, _zero_velocity, 0.2)
