import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oscidiff.errors import ConfigError, EllipticityViolation
from oscidiff.fields import (CellGrid, MacroGrid, load_gridded, make_field,
                             mean_ys, sample_oscillating, save_gridded,
                             validate_ellipticity)

FIELD_NAMES = ["constant", "trig1d", "trig1d_st", "laminate2d", "trig2d_st",
               "checkerboard2d"]


@pytest.mark.parametrize("name", FIELD_NAMES)
def test_builtin_fields_pass_ellipticity(name):
    field = make_field(name)
    validate_ellipticity(field, n_samples=128, seed=1)


@pytest.mark.parametrize("name", FIELD_NAMES)
def test_builtin_fields_symmetric(name):
    field = make_field(name)
    rng = np.random.default_rng(2)
    y = rng.random((40, field.dim))
    s = rng.random(40)
    a = field.sample(y, s)
    assert np.max(np.abs(a - np.swapaxes(a, -1, -2))) == 0.0


def test_mean_ys_constant_is_exact():
    field = make_field("constant", matrix=np.array([[0.7]]))
    grid = CellGrid(M_y=8, M_s=8)
    assert mean_ys(field, grid)[0, 0] == pytest.approx(0.7, abs=1e-15)


def test_mean_ys_trig_fields():
    # sin and cos integrate to zero over full periods, so the mean is 1/2
    grid = CellGrid(M_y=64, M_s=64)
    m_st = mean_ys(make_field("trig1d_st"), grid)
    m_s = mean_ys(make_field("trig1d"), grid)
    assert abs(m_st[0, 0] - 0.5) < 1e-12
    assert abs(m_s[0, 0] - 0.5) < 1e-12


def test_mean_ys_symmetric_2d():
    grid = CellGrid(M_y=32, M_s=16)
    m = mean_ys(make_field("trig2d_st"), grid)
    assert np.allclose(m, m.T, atol=0)


def test_oscillating_periodicity_space_and_time():
    field = make_field("trig1d_st")
    eps, r = 1 / 8, 2.0
    x = np.array([[0.3]])
    t = 0.1
    a0 = sample_oscillating(field, x, t, eps, r)
    for k in (1, -2, 5):
        assert np.allclose(sample_oscillating(field, x + k * eps, t, eps, r),
                           a0, atol=1e-14)
    assert np.allclose(sample_oscillating(field, x, t + 3 * eps**r, eps, r),
                       a0, atol=1e-12)


def test_validate_ellipticity_rejects_bad_constants():
    field = make_field("trig1d_st")
    bad = type(field)(dim=field.dim, entries=field.entries, lam=0.5,
                      Lam=field.Lam, s_independent=False,
                      smoothness=field.smoothness, name="bad")
    with pytest.raises(EllipticityViolation):
        validate_ellipticity(bad, n_samples=256, seed=0)


def test_unknown_builtin_raises():
    with pytest.raises(ConfigError):
        make_field("does_not_exist")


@given(y=st.floats(0, 1, allow_nan=False), s=st.floats(0, 1, allow_nan=False),
       ky=st.integers(-3, 3), ks=st.integers(-3, 3))
@settings(max_examples=50, deadline=None)
def test_field_evaluator_periodic_wrap(y, s, ky, ks):
    field = make_field("trig1d_st")
    a0 = field.sample(np.array([[y]]), np.array([s]))
    a1 = field.sample(np.array([[y + ky]]), np.array([s + ks]))
    assert np.allclose(a0, a1, atol=1e-12)


@given(st.sampled_from(FIELD_NAMES), st.integers(0, 10**6))
@settings(max_examples=30, deadline=None)
def test_rayleigh_quotient_within_bounds(name, seed):
    field = make_field(name)
    rng = np.random.default_rng(seed)
    y = rng.random((20, field.dim))
    s = rng.random(20)
    xi = rng.standard_normal((20, field.dim))
    xi /= np.linalg.norm(xi, axis=1, keepdims=True)
    a = field.sample(y, s)
    q = np.einsum("ni,nij,nj->n", xi, a, xi)
    assert np.all(q >= field.lam - 1e-12)
    assert np.all(q <= field.Lam + 1e-12)


def test_gridded_roundtrip_1d(tmp_path):
    field = make_field("trig1d_st")
    path = tmp_path / "field.txt"
    save_gridded(path, field, CellGrid(M_y=64, M_s=64))
    loaded = load_gridded(path)
    rng = np.random.default_rng(3)
    y = rng.random((30, 1))
    s = rng.random(30)
    # linear interpolation of a smooth field on a 64-point grid
    assert np.max(np.abs(loaded.sample(y, s) - field.sample(y, s))) < 5e-3
    assert loaded.dim == 1


def test_gridded_roundtrip_2d_exact_at_nodes(tmp_path):
    field = make_field("laminate2d")
    grid = CellGrid(M_y=16, M_s=8)
    path = tmp_path / "field2d.txt"
    save_gridded(path, field, grid)
    loaded = load_gridded(path)
    y = np.stack(np.meshgrid(np.arange(16) / 16, np.arange(16) / 16),
                 axis=-1).reshape(-1, 2)
    s = np.zeros(len(y))
    assert np.max(np.abs(loaded.sample(y, s) - field.sample(y, s))) < 1e-12


def test_macro_grid_spacing():
    g = MacroGrid(dim=1, n_x=9, n_t=4, T=1.0)
    assert g.h == pytest.approx(0.1)
    assert g.dt == pytest.approx(0.25)
    assert g.interior_nodes().shape == (9, 1)
    assert len(g.times()) == 5


def test_cell_grid_rejects_bad_face_average():
    with pytest.raises(ConfigError):
        CellGrid(M_y=8, M_s=8, face_avg="median")
