import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import random_band_limited
from sqgnash.grid_spectral import Grid, ScalarField, fractional_laplacian
from sqgnash.littlewood_paley import (
    DEFAULT_PROFILE,
    LpProfile,
    ResolutionWarning,
    c_n_norm,
    holder_norm,
    low_pass,
    lp_block,
    max_block,
    write_spectrum_csv,
)

G = Grid(64)
X1, X2 = G.mesh


def field(v, grid=G):
    return ScalarField(grid, v)


def test_profile_shape():
    r = np.linspace(0, 3, 3001)
    p = DEFAULT_PROFILE(r)
    assert np.all(p[r <= 1.0] == 1.0)
    assert np.all(p[r >= 1.5] == 0.0)
    assert np.all(np.diff(p) <= 0.0)


def test_lp_block_single_mode():
    f = field(np.cos(4 * X1))
    assert (lp_block(f, 2) - f).sup() < 1e-14
    for j in (1, 3):
        assert lp_block(f, j).sup() < 1e-14


def test_lp_block_constant_and_negative():
    c = field(np.full((64, 64), 2.5))
    assert (lp_block(c, -1) - c).sup() < 1e-14
    assert lp_block(field(np.cos(X1)), -2).sup() == 0.0


def test_partition_of_unity():
    rng = np.random.default_rng(7)
    J = max_block(G)
    for _ in range(100):
        f = field(random_band_limited(64, 31, rng, mean_zero=False))
        total = ScalarField.zeros(G)
        for j in range(-1, J + 1):
            total = total + lp_block(f, j)
        assert (total - f).sup() < 1e-10


@given(st.integers(0, 10**6))
def test_almost_orthogonality(seed):
    f = field(random_band_limited(64, 31, np.random.default_rng(seed)))
    J = max_block(G)
    for j in range(-1, J + 1):
        for k in range(-1, J + 1):
            if abs(j - k) > 1:
                assert np.all(lp_block(lp_block(f, k), j).hat == 0.0)


def test_low_pass_examples(rng):
    assert (low_pass(field(np.cos(X1)), 5) - field(np.cos(X1))).sup() < 1e-14
    assert low_pass(field(np.cos(8 * X1)), 1).sup() < 1e-14
    f = field(random_band_limited(64, 25, rng))
    for j in range(0, 6):
        tele = ScalarField.zeros(G)
        for i in range(-1, j + 1):
            tele = tele + lp_block(f, i)
        assert (tele - low_pass(f, j)).sup() < 1e-11


def test_holder_norm_examples():
    assert holder_norm(ScalarField.zeros(G), 0.5) == 0.0
    alpha = 0.4
    vals = [holder_norm(field(np.cos(2**m * X1)), alpha) for m in (1, 2, 3)]
    for lo, hi in zip(vals, vals[1:]):
        ratio = hi / lo
        assert 2**alpha / 1.2 <= ratio <= 1.2 * 2**alpha
    with pytest.raises(ValueError):
        holder_norm(field(np.cos(X1)), 1.0)


@given(st.integers(0, 10**6), st.floats(0.05, 0.95))
def test_holder_norm_subadditive(seed, alpha):
    r = np.random.default_rng(seed)
    f = field(random_band_limited(64, 5, r))
    g = field(random_band_limited(64, 5, r))
    assert holder_norm(f + g, alpha) <= holder_norm(f, alpha) + holder_norm(g, alpha) + 1e-10


def test_holder_norm_translation_invariant(rng):
    v = random_band_limited(64, 5, rng)
    h0 = holder_norm(field(v), 0.3)
    for shift in ((3, 0), (0, 7), (11, 5)):
        h = holder_norm(field(np.roll(v, shift, axis=(0, 1))), 0.3)
        assert abs(h - h0) < 1e-10


def test_holder_norm_warns_on_unresolved_content():
    with pytest.warns(ResolutionWarning):
        holder_norm(field(np.cos(20 * X1)), 0.5)


def test_bernstein_ratio():
    for j in range(1, 4):
        f = lp_block(field(np.cos(3 * 2 ** (j - 1) * X1 + 0.3) + np.sin(3 * 2 ** (j - 1) * X2)), j)
        ratio = fractional_laplacian(f, 1.0).sup() / (2**j * f.sup())
        assert 0.25 <= ratio <= 4.0


def test_c_n_norm_examples():
    assert abs(c_n_norm(field(np.cos(X1)), 0).value - 1.0) < 1e-10
    lam = 7
    assert abs(c_n_norm(field(np.cos(lam * X1)), 1).value - lam) < lam * 1e-8
    assert c_n_norm(ScalarField.zeros(G), 3).value == 0.0


def test_c_n_norm_resolution_flag():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ResolutionWarning)
        res = c_n_norm(ScalarField.zeros(Grid(16)), 4)
    assert res.under_resolved
    assert not c_n_norm(ScalarField.zeros(Grid(16)), 3).under_resolved


def test_custom_profile_changes_blocks():
    psi = LpProfile(1.0, 2.5)
    f = field(np.cos(5 * X1))
    assert lp_block(f, 2, psi).sup() > 0.0


def test_spectrum_csv(tmp_path):
    write_spectrum_csv(tmp_path / "s.csv", field(np.cos(4 * X1)))
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "j,block_sup_norm"
    assert len(lines) == max_block(G) + 3
