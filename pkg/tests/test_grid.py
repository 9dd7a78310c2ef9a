import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from diffocean import grid as g
from diffocean.data import synthetic_mask
from diffocean.errors import ConfigError, ShapeError


def _random_grid(rng, h, w, land):
    mask = rng.random((h, w)) > land
    mask[rng.integers(h), rng.integers(w)] = True
    return g.build_grid(h, w, (-70.0, 75.0), mask)


@settings(max_examples=40, deadline=None)
@given(h=st.integers(3, 16), w=st.integers(4, 16), land=st.sampled_from([0.0, 0.2, 0.5]),
       seed=st.integers(0, 2**20))
def test_operators_match_loop_oracle_bitwise(h, w, land, seed):
    rng = np.random.default_rng(seed)
    grid = _random_grid(rng, h, w, land)
    f = np.where(grid.mask, rng.normal(size=(h, w)), 0.0)
    np.testing.assert_array_equal(g.ddx(grid, f), oracles.ddx(grid, f))
    np.testing.assert_array_equal(g.ddy(grid, f), oracles.ddy(grid, f))
    np.testing.assert_array_equal(g.laplacian(grid, f), oracles.laplacian(grid, f))


def test_oracle_on_16x16_continents_and_wrap():
    rng = np.random.default_rng(3)
    grid = g.build_grid(16, 16, mask=synthetic_mask(16, 16, rng))
    assert (~grid.mask).any()
    lon = np.arange(16) * grid.d_lon
    f = np.sin(lon)[None, :] * np.cos(grid.lat_centers)[:, None] + 0.1 * rng.normal(size=(16, 16))
    f = np.where(grid.mask, f, 0.0)
    for op in ("ddx", "ddy", "laplacian"):
        np.testing.assert_array_equal(getattr(g, op)(grid, f), getattr(oracles, op)(grid, f))


def test_batched_fields_are_independent(rng):
    grid = _random_grid(rng, 8, 12, 0.2)
    f = rng.normal(size=(2, 3, 8, 12))
    out = g.laplacian(grid, f)
    np.testing.assert_array_equal(out[1, 2], g.laplacian(grid, f[1, 2]))


def test_ddx_of_zonal_wave_converges():
    errs = []
    for w in (32, 64, 128):
        grid = g.build_grid(9, w, (-60, 60))
        lon = np.arange(w) * grid.d_lon
        f = np.broadcast_to(np.sin(2 * lon), grid.shape)
        exact = 2 * np.cos(2 * lon)[None, :] / (grid.radius * grid.cos_lat[:, None])
        errs.append(np.abs(g.ddx(grid, f) - exact).max())
    assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.05)
    assert errs[1] / errs[2] == pytest.approx(4.0, rel=0.05)


def test_constant_field_has_zero_derivatives(rng):
    grid = _random_grid(rng, 10, 12, 0.3)
    f = np.where(grid.mask, 3.7, 0.0)
    assert np.abs(g.ddx(grid, f)).max() == 0.0
    assert np.abs(g.ddy(grid, f)).max() == 0.0
    assert np.abs(g.laplacian(grid, f)).max() == 0.0


def test_land_values_do_not_leak(rng):
    grid = _random_grid(rng, 10, 12, 0.3)
    f = rng.normal(size=grid.shape)
    f2 = np.where(grid.mask, f, 1e6)
    for op in (g.ddx, g.ddy, g.laplacian):
        np.testing.assert_array_equal(op(grid, f), op(grid, f2))
        assert np.all(op(grid, f2)[~grid.mask] == 0.0)


def test_laplacian_area_integral_vanishes_all_ocean(rng):
    grid = g.build_grid(16, 32)
    f = rng.normal(size=grid.shape)
    lap = g.laplacian(grid, f)
    total = g.area_integral(grid, lap)
    assert abs(total) <= 1e-12 * g.area_integral(grid, np.abs(lap))


def test_build_grid_rejects_bad_input():
    with pytest.raises(ConfigError):
        g.build_grid(2, 8)
    with pytest.raises(ConfigError):
        g.build_grid(8, 8, (-90, 80))
    with pytest.raises(ConfigError):
        g.build_grid(8, 8, mask=np.ones((4, 4), bool))
    with pytest.raises(ShapeError):
        g.ddx(g.build_grid(8, 8), np.zeros((7, 8)))


def test_min_cell_area_scale_uses_ocean_rows():
    grid = g.build_grid(8, 16, (-80, 80))
    mask = np.ones(grid.shape, bool)
    mask[[0, -1]] = False
    dx_edge = grid.radius * grid.cos_lat[0] * grid.d_lon
    dx_next = grid.radius * grid.cos_lat[1] * grid.d_lon
    assert grid.min_cell_area_scale() == pytest.approx(dx_edge ** 2)
    assert grid.with_mask(mask).min_cell_area_scale() == pytest.approx(dx_next ** 2)
