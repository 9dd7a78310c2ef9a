"""Small shared builders for tests."""
import numpy as np

from diffocean import data, physics
from diffocean import grid as gridops


def smooth_state(grid, layout, seed=0, velocity=0.3):
    """Band-limited physical state with non-divergent velocities, shape (1, C, H, W)."""
    rng = np.random.default_rng(seed)
    x = np.zeros((1, layout.n_channels) + grid.shape)
    cos2 = (grid.cos_lat ** 2)[:, None]
    for l in range(layout.levels):
        x[0, layout.index("S", l)] = 35.0 + 0.5 * data.smooth_modes(grid, rng, 3)
        x[0, layout.index("T", l)] = 20.0 * cos2 + 1.5 * data.smooth_modes(grid, rng, 3)
        u, v = data.nondivergent_velocity(grid, data.smooth_modes(grid, rng, 3, taper_edges=True))
        s = velocity / np.sqrt(np.mean(u ** 2 + v ** 2))
        x[0, layout.index("U", l)] = u * s
        x[0, layout.index("V", l)] = v * s
    x[0, layout.index("SSH")] = 0.3 * data.smooth_modes(grid, rng, 3)
    return np.where(grid.mask, x, 0.0)


def small_grid(h=8, w=16, land=False, seed=0):
    mask = data.synthetic_mask(h, w, np.random.default_rng(seed)) if land else None
    return gridops.build_grid(h, w, (-70.0, 70.0), mask)


def params(nu_m=1000.0, nu_t=500.0, n=4, dt=3600.0):
    return physics.PhysicsParams.from_nu(nu_m, nu_t, n_substeps=n, dt_total=dt)
