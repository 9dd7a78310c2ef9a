"""Datasets, normalisation statistics, chronological splits and synthetic data."""
from __future__ import annotations

import datetime as _dt
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import grid as gridops
from . import physics
from .errors import CFLError, DataError, NumericalError

log = logging.getLogger(__name__)

FORCING_VARIABLES = ("U10M", "V10M", "T2M", "MSLP")
CLIM_DAYS = 365
MIN_STD = 1e-8

RHO_WATER = 1025.0
GRAVITY = 9.81
P_REF = 101325.0


@dataclass(frozen=True)
class ChannelInfo:
    name: str
    variable: str
    level: int = 0
    periodic: bool = False


def ocean_channels(layout: physics.StateChannels) -> list[ChannelInfo]:
    return [ChannelInfo(name, var, lev, bool(p))
            for name, (var, lev), p in zip(layout.names, layout.channels, layout.periodic)]


def forcing_channels() -> list[ChannelInfo]:
    return [ChannelInfo(v, v) for v in FORCING_VARIABLES]


@dataclass
class Dataset:
    """Ocean states and atmospheric forcing on a shared grid.

    ``times`` are days since ``start_date``; land points hold zeros.
    """

    times: np.ndarray
    ocean: np.ndarray  # (T, C_o, H, W)
    forcing: np.ndarray  # (T, C_a, H, W)
    mask: np.ndarray  # (H, W) bool
    ocean_info: list[ChannelInfo]
    forcing_info: list[ChannelInfo]
    start_date: str = "1993-01-01"
    attrs: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.ocean = np.asarray(self.ocean, dtype=np.float64)
        self.forcing = np.asarray(self.forcing, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        t = len(self.times)
        if self.ocean.ndim != 4 or self.forcing.ndim != 4:
            raise DataError("ocean and forcing arrays must be (T, C, H, W)")
        if self.ocean.shape[0] != t or self.forcing.shape[0] != t:
            raise DataError(f"time axis mismatch: {t} times, ocean {self.ocean.shape}, "
                            f"forcing {self.forcing.shape}")
        if self.ocean.shape[2:] != self.mask.shape or self.forcing.shape[2:] != self.mask.shape:
            raise DataError("spatial dims do not match the mask")
        if len(self.ocean_info) != self.ocean.shape[1] or len(self.forcing_info) != self.forcing.shape[1]:
            raise DataError("channel metadata does not match channel counts")
        if t > 1 and np.any(np.diff(self.times) <= 0):
            raise DataError("times must be strictly increasing")

    def __len__(self):
        return len(self.times)

    @property
    def periodic(self) -> np.ndarray:
        return np.array([c.periodic for c in self.ocean_info])

    @property
    def dt_seconds(self) -> float:
        if "dt" in self.attrs:
            return float(self.attrs["dt"])
        if len(self.times) < 2:
            raise DataError("cannot infer time step from fewer than two samples")
        return float(np.round((self.times[1] - self.times[0]) * 86400.0, 6))

    def dates(self) -> list[_dt.date]:
        start = _dt.date.fromisoformat(self.start_date)
        return [start + _dt.timedelta(days=int(np.floor(t))) for t in self.times]

    def day_of_year(self) -> np.ndarray:
        return np.array([d.timetuple().tm_yday for d in self.dates()], dtype=np.int64)

    def subset(self, sl: slice) -> "Dataset":
        return replace(self, times=self.times[sl].copy(), ocean=self.ocean[sl].copy(),
                       forcing=self.forcing[sl].copy(), attrs=dict(self.attrs))


def clim_index(day_of_year) -> np.ndarray:
    """Zero-based climatology row; day 366 reuses day 365."""
    d = np.asarray(day_of_year, dtype=np.int64)
    if np.any(d < 1) or np.any(d > 366):
        raise DataError("day_of_year must lie in 1..366")
    return np.minimum(d, CLIM_DAYS) - 1


@dataclass
class NormStats:
    ocean_mean: np.ndarray  # (C_o,)
    ocean_std: np.ndarray
    forcing_mean: np.ndarray  # (C_a,)
    forcing_std: np.ndarray
    periodic: np.ndarray  # (C_o,) bool
    climatology: np.ndarray  # (365, P, H, W)

    def clim_full(self, day_of_year) -> np.ndarray:
        """(B, C_o, H, W) climatology with zeros for non-periodic channels."""
        idx = clim_index(np.atleast_1d(day_of_year))
        h, w = self.climatology.shape[2:]
        out = np.zeros((len(idx), len(self.ocean_mean), h, w))
        out[:, self.periodic] = self.climatology[idx]
        return out

    def arrays(self) -> dict[str, np.ndarray]:
        return {"ocean_mean": self.ocean_mean, "ocean_std": self.ocean_std,
                "forcing_mean": self.forcing_mean, "forcing_std": self.forcing_std,
                "periodic": self.periodic.astype(np.float64), "climatology": self.climatology}

    @classmethod
    def from_arrays(cls, arrs) -> "NormStats":
        return cls(np.asarray(arrs["ocean_mean"]), np.asarray(arrs["ocean_std"]),
                   np.asarray(arrs["forcing_mean"]), np.asarray(arrs["forcing_std"]),
                   np.asarray(arrs["periodic"]) > 0.5, np.asarray(arrs["climatology"]))


def _masked_mean_std(x, mask, name):
    """Per-channel mean/std over (time, ocean points) of a (T, C, H, W) array."""
    vals = x[:, :, mask]  # (T, C, n_ocean)
    mean = vals.mean(axis=(0, 2))
    std = vals.std(axis=(0, 2))
    bad = np.nonzero(std < MIN_STD)[0]
    if len(bad):
        raise DataError(f"degenerate {name} channel(s) {bad.tolist()}: std < {MIN_STD}")
    return mean, std


def compute_norm_stats(train: Dataset) -> NormStats:
    """Day-of-year climatology for periodic channels, then per-channel mean/std.

    Days of year absent from the training split fall back to the mean over
    all training samples.
    """
    periodic = train.periodic
    mask = train.mask
    idx = clim_index(train.day_of_year())
    raw = train.ocean[:, periodic]  # (T, P, H, W)
    fallback = raw.mean(axis=0)
    clim = np.broadcast_to(fallback, (CLIM_DAYS,) + fallback.shape).copy()
    for d in np.unique(idx):
        clim[d] = raw[idx == d].mean(axis=0)
    clim[:, :, ~mask] = 0.0
    anomalies = train.ocean.copy()
    anomalies[:, periodic] -= clim[idx]
    o_mean, o_std = _masked_mean_std(anomalies, mask, "ocean")
    f_mean, f_std = _masked_mean_std(train.forcing, mask, "forcing")
    return NormStats(o_mean, o_std, f_mean, f_std, periodic.copy(), clim)


def _cvec(v):
    return np.asarray(v)[:, None, None]


def normalize(x, stats: NormStats, day_of_year, mask=None):
    """((x - clim(day)) - mean) / std for ocean states of shape (B, C, H, W)."""
    clim = stats.clim_full(day_of_year)
    xv = np.asarray(ad.value(x))
    if xv.shape[1] != len(stats.ocean_mean):
        raise DataError(f"unknown channel layout: {xv.shape[1]} channels, "
                        f"stats have {len(stats.ocean_mean)}")
    out = ad.mul(ad.sub(ad.sub(x, clim), _cvec(stats.ocean_mean)), 1.0 / _cvec(stats.ocean_std))
    return out if mask is None else ad.where(mask, out, 0.0)


def denormalize(y, stats: NormStats, day_of_year, mask=None):
    """Inverse of :func:`normalize`; accepts autodiff nodes."""
    clim = stats.clim_full(day_of_year)
    yv = np.asarray(ad.value(y))
    if yv.shape[1] != len(stats.ocean_mean):
        raise DataError(f"unknown channel layout: {yv.shape[1]} channels, "
                        f"stats have {len(stats.ocean_mean)}")
    out = ad.add(ad.add(ad.mul(y, _cvec(stats.ocean_std)), _cvec(stats.ocean_mean)), clim)
    return out if mask is None else ad.where(mask, out, 0.0)


def normalize_forcing(f, stats: NormStats, mask=None):
    out = (np.asarray(f) - _cvec(stats.forcing_mean)) / _cvec(stats.forcing_std)
    return out if mask is None else np.where(mask, out, 0.0)


def chronological_split(ds: Dataset, fractions=None, year_ranges=None):
    """Split into (train, val, test) contiguous blocks without shuffling.

    Either ``fractions`` (relative weights such as (25, 2, 1)) or inclusive
    calendar ``year_ranges`` such as ((1993, 2017), (2018, 2019), (2020, 2020)).
    """
    n = len(ds)
    if (fractions is None) == (year_ranges is None):
        raise DataError("give exactly one of fractions or year_ranges")
    if fractions is not None:
        w = np.asarray(fractions, dtype=np.float64)
        if w.shape != (3,) or np.any(w <= 0):
            raise DataError("fractions must be three positive weights")
        cum = np.cumsum(w) / w.sum()
        b1, b2 = int(np.floor(n * cum[0] + 1e-9)), int(np.floor(n * cum[1] + 1e-9))
        bounds = [(0, b1), (b1, b2), (b2, n)]
    else:
        years = np.array([d.year for d in ds.dates()])
        ranges = [tuple(int(v) for v in r) for r in year_ranges]
        if len(ranges) != 3 or any(lo > hi for lo, hi in ranges):
            raise DataError("year_ranges must be three (first, last) pairs")
        for (_, hi), (lo, _) in zip(ranges, ranges[1:]):
            if lo <= hi:
                raise DataError(f"year ranges overlap or are out of order: {ranges}")
        bounds = []
        for lo, hi in ranges:
            sel = np.nonzero((years >= lo) & (years <= hi))[0]
            bounds.append((int(sel[0]), int(sel[-1]) + 1) if len(sel) else (0, 0))
    names = ("train", "validation", "test")
    for name, (lo, hi) in zip(names, bounds):
        if hi <= lo:
            raise DataError(f"empty {name} split")
    return tuple(ds.subset(slice(lo, hi)) for lo, hi in bounds)


# -- synthetic data ------------------------------------------------------------

@dataclass
class SynthConfig:
    n_lat: int = 16
    n_lon: int = 32
    lat_span: tuple = (-80.0, 80.0)
    levels: int = 1
    n_steps: int = 600
    dt: float = 3600.0
    n_substeps: int = 4
    nu_momentum: float = 1000.0
    nu_tracer: float = 500.0
    land: str = "none"  # "none" or "continents"
    max_wavenumber: int = 3
    velocity_scale: float = 0.3  # m/s
    forcing_period_days: float = 10.0
    start_date: str = "1993-01-01"
    subgrid: bool = False
    drag_timescale: float = 43200.0  # s
    wind_coupling: float = 2.0e-6  # (m/s)/s per (m/s) of wind
    heat_timescale: float = 5 * 86400.0
    ssh_timescale: float = 2 * 86400.0
    omega: float = gridops.EARTH_OMEGA
    flow: str = "streamfunction"  # or "zonal": v = 0, u depends on latitude only


def synthetic_mask(n_lat, n_lon, rng, n_blobs=2, land_fraction=0.15) -> np.ndarray:
    """Ocean mask with a few elliptical continents, never touching the edge rows."""
    i, j = np.meshgrid(np.arange(n_lat), np.arange(n_lon), indexing="ij")
    land = np.zeros((n_lat, n_lon), dtype=bool)
    for _ in range(n_blobs):
        ci = rng.uniform(0.3, 0.7) * (n_lat - 1)
        cj = rng.uniform(0, n_lon)
        ri = max(1.0, rng.uniform(0.12, 0.22) * n_lat)
        rj = max(1.0, np.sqrt(land_fraction / n_blobs) * n_lon * rng.uniform(0.7, 1.0) / 1.5)
        dj = np.minimum(np.abs(j - cj), n_lon - np.abs(j - cj))
        land |= ((i - ci) / ri) ** 2 + (dj / rj) ** 2 <= 1.0
    land[0] = land[-1] = False
    return ~land


def smooth_modes(grid, rng, kmax, taper_edges=False):
    """Unit-RMS sum of low-wavenumber zonal and meridional modes."""
    lon = np.arange(grid.n_lon) * grid.d_lon
    lat = grid.lat_centers
    theta = (lat - lat[0]) / (lat[-1] - lat[0]) * np.pi  # 0..pi across the rows
    out = np.zeros(grid.shape)
    for k in range(kmax + 1):
        for m in range(1, kmax + 1):
            amp = rng.normal() / (1.0 + k * k + m * m)
            phase = rng.uniform(0, 2 * np.pi)
            mer = np.sin(m * theta) if taper_edges else np.cos(m * theta + rng.uniform(0, np.pi))
            out += amp * mer[:, None] * np.cos(k * lon + phase)[None, :]
    if taper_edges:
        out *= np.sin(theta)[:, None] ** 2
    return out / np.sqrt(np.mean(out ** 2))


def nondivergent_velocity(grid, psi):
    """(u, v) = (-dpsi/dy, dpsi/dx) with the grid's centred stencils."""
    return -np.asarray(gridops.ddy(grid, psi)), np.asarray(gridops.ddx(grid, psi))


def subgrid_tendency(cfg: SynthConfig, layout, x, forcing):
    """Known forcing-driven closure: wind stress, linear drag, air-sea relaxation."""
    out = np.zeros_like(x)
    u10, v10, t2m, mslp = (forcing[:, i] for i in range(4))
    for l in range(layout.levels):
        iu, iv = layout.index("U", l), layout.index("V", l)
        wind = cfg.wind_coupling * 0.5 ** l
        out[:, iu] = wind * u10 - x[:, iu] / cfg.drag_timescale
        out[:, iv] = wind * v10 - x[:, iv] / cfg.drag_timescale
    it = layout.index("T", 0)
    out[:, it] = -(x[:, it] - t2m) / cfg.heat_timescale
    issh = layout.index("SSH")
    ssh_ib = -(mslp - P_REF) / (RHO_WATER * GRAVITY)
    out[:, issh] = -(x[:, issh] - ssh_ib) / cfg.ssh_timescale
    return out


def _forcing_at(grid, modes, t_days, period):
    ph = 2 * np.pi * t_days / period
    base, c1, s1, t2m_base = modes
    u10 = 6.0 * (base[0] + np.cos(ph) * c1[0] + np.sin(ph) * s1[0])
    v10 = 4.0 * (base[1] + np.cos(ph) * c1[1] + np.sin(ph) * s1[1])
    t2m = t2m_base + 1.5 * (np.cos(ph) * c1[2] + np.sin(ph) * s1[2])
    mslp = P_REF + 800.0 * (base[3] + np.cos(ph) * c1[3] + np.sin(ph) * s1[3])
    return np.stack([u10, v10, t2m, mslp])


def generate_synthetic(cfg: SynthConfig, seed: int) -> Dataset:
    """Deterministic trajectory of the physics core with known diffusivities.

    Initial states are band-limited smooth fields with non-divergent
    velocities; forcing oscillates smoothly in time. With ``cfg.subgrid`` a
    known closure (:func:`subgrid_tendency`) is added inside every sub-step.
    """
    rng = np.random.default_rng(seed)
    layout = physics.StateChannels(cfg.levels)
    mask = None
    if cfg.land == "continents":
        mask = synthetic_mask(cfg.n_lat, cfg.n_lon, rng)
    elif cfg.land != "none":
        raise DataError(f"unknown land option {cfg.land!r}")
    if cfg.flow not in ("streamfunction", "zonal"):
        raise DataError(f"unknown flow option {cfg.flow!r}")
    grid = gridops.build_grid(cfg.n_lat, cfg.n_lon, cfg.lat_span, mask, omega=cfg.omega)
    params = physics.PhysicsParams(_raw(cfg.nu_momentum), _raw(cfg.nu_tracer),
                                   cfg.n_substeps, cfg.dt)
    try:
        physics.check_cfl(grid, params, mode="generate")
    except CFLError as exc:
        raise CFLError(f"requested diffusivities are unstable: {exc}", where="generate") from None

    kmax = cfg.max_wavenumber
    cos2 = (grid.cos_lat ** 2)[:, None]
    x0 = np.zeros((1, layout.n_channels) + grid.shape)
    for l in range(cfg.levels):
        x0[0, layout.index("S", l)] = 35.0 - 0.2 * l + 0.5 * smooth_modes(grid, rng, kmax)
        x0[0, layout.index("T", l)] = 28.0 * cos2 - 2.0 * l + 1.5 * smooth_modes(grid, rng, kmax)
        psi = smooth_modes(grid, rng, kmax, taper_edges=True)
        u, v = nondivergent_velocity(grid, psi)
        if cfg.flow == "zonal":
            u, v = np.broadcast_to(u.mean(axis=1, keepdims=True), grid.shape), np.zeros(grid.shape)
        scale = cfg.velocity_scale * 0.7 ** l / max(np.sqrt(np.mean(u ** 2 + v ** 2)), 1e-30)
        x0[0, layout.index("U", l)] = u * scale
        x0[0, layout.index("V", l)] = v * scale
    x0[0, layout.index("SSH")] = 0.3 * smooth_modes(grid, rng, kmax)
    x0 = np.where(grid.mask, x0, 0.0)

    fmodes = (
        np.stack([smooth_modes(grid, rng, 2) for _ in range(4)]),
        np.stack([smooth_modes(grid, rng, 2) for _ in range(4)]),
        np.stack([smooth_modes(grid, rng, 2) for _ in range(4)]),
        np.broadcast_to(25.0 * cos2 - 3.0, grid.shape),
    )

    days = np.arange(cfg.n_steps) * cfg.dt / 86400.0
    ocean = np.empty((cfg.n_steps, layout.n_channels) + grid.shape)
    forcing = np.empty((cfg.n_steps, len(FORCING_VARIABLES)) + grid.shape)
    x = x0
    dt_sub = params.dt_sub
    for t in range(cfg.n_steps):
        f_t = _forcing_at(grid, fmodes, days[t], cfg.forcing_period_days)[None]
        ocean[t] = x[0]
        forcing[t] = f_t[0]
        for k in range(cfg.n_substeps):
            tend = physics.total_tendency(grid, x, params, layout)
            if cfg.subgrid:
                tend = tend + subgrid_tendency(cfg, layout, x, f_t)
            x = np.where(grid.mask, x + dt_sub * tend, 0.0)
        if not np.all(np.isfinite(x)):
            raise NumericalError(f"synthetic trajectory blew up at step {t}", where="generate", substep=t)
    forcing = np.where(grid.mask, forcing, 0.0)
    attrs = {
        "dt": float(cfg.dt), "lat_span": [float(v) for v in cfg.lat_span], "levels": cfg.levels,
        "generator_seed": int(seed), "nu_momentum": float(cfg.nu_momentum),
        "nu_tracer": float(cfg.nu_tracer), "n_substeps": int(cfg.n_substeps),
        "subgrid": bool(cfg.subgrid), "omega": float(cfg.omega),
    }
    return Dataset(days, ocean, forcing, grid.mask, ocean_channels(layout), forcing_channels(),
                   cfg.start_date, attrs)


def _raw(nu):
    return -np.inf if nu == 0 else float(ad.inverse_softplus(nu))


def grid_for(ds: Dataset) -> gridops.GridSpec:
    span = ds.attrs.get("lat_span", (-80.0, 80.0))
    omega = float(ds.attrs.get("omega", gridops.EARTH_OMEGA))
    return gridops.build_grid(ds.mask.shape[0], ds.mask.shape[1], span, ds.mask, omega=omega)


def layout_for(ds: Dataset) -> physics.StateChannels:
    levels = int(ds.attrs.get("levels", (len(ds.ocean_info) - 1) // 4))
    layout = physics.StateChannels(levels)
    if layout.n_channels != len(ds.ocean_info):
        raise DataError(f"{len(ds.ocean_info)} ocean channels do not form a "
                        f"{levels}-level S/U/V/T/SSH layout")
    return layout


def fill_nans(ds: Dataset) -> Dataset:
    """Zero NaNs and mark any point that was NaN in an ocean channel as land."""
    n_ocean_nan = int(np.isnan(ds.ocean).sum())
    n_forcing_nan = int(np.isnan(ds.forcing).sum())
    if n_ocean_nan == 0 and n_forcing_nan == 0:
        return ds
    land = np.isnan(ds.ocean).any(axis=(0, 1))
    mask = ds.mask & ~land
    ocean = np.where(mask, np.nan_to_num(ds.ocean, nan=0.0), 0.0)
    forcing = np.where(mask, np.nan_to_num(ds.forcing, nan=0.0), 0.0)
    log.warning("filled %d ocean and %d forcing NaNs with zero; %d points newly masked as land",
                n_ocean_nan, n_forcing_nan, int((ds.mask & land).sum()))
    return replace(ds, ocean=ocean, forcing=forcing, mask=mask)
