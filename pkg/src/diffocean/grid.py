"""Spherical latitude-longitude grid and its finite-difference operators.

Fields are arrays (or autodiff nodes) whose last two axes are
(latitude, longitude). Rows are cell centres; longitude is periodic.

Coastal policy: when a stencil neighbour is land its value is replaced by
the centre value, so no gradient or flux crosses a coastline. The outermost
latitude rows see their own value beyond the edge, which gives one-sided
meridional differences and zero meridional flux there.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ShapeError

EARTH_RADIUS = 6.371e6  # m
EARTH_OMEGA = 7.2921e-5  # rad/s

# forward and backward differences on a 3-wide padded axis
_FWD_LON = np.array([[0.0, -1.0, 1.0]])
_BWD_LON = np.array([[-1.0, 1.0, 0.0]])
_FWD_LAT = _FWD_LON.T
_BWD_LAT = _BWD_LON.T


@dataclass(frozen=True, eq=False)
class GridSpec:
    n_lat: int
    n_lon: int
    lat_centers: np.ndarray  # radians, strictly increasing
    d_lat: float
    d_lon: float
    mask: np.ndarray  # (H, W) bool, True = ocean
    radius: float = EARTH_RADIUS
    omega: float = EARTH_OMEGA
    cos_lat: np.ndarray = field(init=False)
    coriolis_f: np.ndarray = field(init=False)

    def __post_init__(self):
        lat = np.asarray(self.lat_centers, dtype=np.float64)
        mask = np.asarray(self.mask, dtype=bool)
        if lat.shape != (self.n_lat,):
            raise ConfigError(f"expected {self.n_lat} latitude centres, got {lat.shape}")
        if mask.shape != (self.n_lat, self.n_lon):
            raise ConfigError(f"mask shape {mask.shape} != ({self.n_lat}, {self.n_lon})")
        if np.any(np.abs(lat) >= np.pi / 2):
            raise ConfigError("latitude centres must lie strictly inside (-90, 90) degrees")
        if np.any(np.diff(lat) <= 0):
            raise ConfigError("latitude centres must be strictly increasing")
        object.__setattr__(self, "lat_centers", lat)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "cos_lat", np.cos(lat))
        object.__setattr__(self, "coriolis_f", 2.0 * self.omega * np.sin(lat))
        self._precompute()

    def _precompute(self):
        r, dlat, dlon = self.radius, self.d_lat, self.d_lon
        cos = self.cos_lat
        m = self.mask

        def nb(arr, axis, shift):
            if axis == 1:
                return np.roll(arr, -shift, axis=1)
            padded = np.concatenate([arr[:1], arr, arr[-1:]], axis=0)
            return padded[1 + shift:1 + shift + self.n_lat]

        ocean_e, ocean_w = nb(m, 1, 1), nb(m, 1, -1)
        ocean_n, ocean_s = nb(m, 0, 1), nb(m, 0, -1)
        cos_n = np.cos(self.lat_centers + 0.5 * dlat)
        cos_s = np.cos(self.lat_centers - 0.5 * dlat)
        ddy_coef = np.full(self.n_lat, 1.0 / (2.0 * r * dlat))
        ddy_coef[0] = ddy_coef[-1] = 1.0 / (r * dlat)
        ops = {
            "ocean_e": ocean_e.astype(np.float64),
            "ocean_w": ocean_w.astype(np.float64),
            "ocean_n": ocean_n.astype(np.float64),
            "ocean_s": ocean_s.astype(np.float64),
            "ddx_coef": (1.0 / (2.0 * r * cos * dlon))[:, None],
            "ddy_coef": ddy_coef[:, None],
            "lap_lon_coef": (1.0 / (r * r * cos * cos * dlon * dlon))[:, None],
            "lap_lat_coef": (1.0 / (r * r * cos * dlat * dlat))[:, None],
            # face cosines folded with the neighbour mask: closed faces carry 0
            "face_n": cos_n[:, None] * ocean_n,
            "face_s": cos_s[:, None] * ocean_s,
        }
        object.__setattr__(self, "ops", ops)

    @property
    def shape(self):
        return (self.n_lat, self.n_lon)

    @property
    def cell_area(self) -> np.ndarray:
        """(H, 1) area weights R^2 cos(lat) dlat dlon."""
        return (self.radius ** 2 * self.cos_lat * self.d_lat * self.d_lon)[:, None]

    @property
    def n_ocean(self) -> int:
        return int(self.mask.sum())

    def min_cell_area_scale(self) -> float:
        """Smallest squared cell edge over ocean rows, used by the CFL guard."""
        rows = self.mask.any(axis=1)
        if not rows.any():
            raise ConfigError("grid has no ocean points")
        dx = self.radius * self.cos_lat[rows] * self.d_lon
        dy = self.radius * self.d_lat
        return float(min(np.min(dx) ** 2, dy ** 2))

    def with_mask(self, mask) -> "GridSpec":
        return GridSpec(self.n_lat, self.n_lon, self.lat_centers, self.d_lat, self.d_lon,
                        mask, self.radius, self.omega)


def build_grid(n_lat, n_lon, lat_span=(-80.0, 80.0), mask=None,
               radius=EARTH_RADIUS, omega=EARTH_OMEGA) -> GridSpec:
    """Regular grid with ``n_lat`` rows whose centres span ``lat_span`` degrees.

    The first and last row centres sit exactly at the span endpoints;
    longitude covers the full circle with ``n_lon`` cells.
    """
    if n_lat < 3 or n_lon < 4:
        raise ConfigError(f"grid needs n_lat >= 3 and n_lon >= 4, got {n_lat}x{n_lon}")
    lo, hi = float(lat_span[0]), float(lat_span[1])
    if not -90.0 < lo < hi < 90.0:
        raise ConfigError(f"latitude span {lat_span} must lie strictly inside (-90, 90)")
    lat = np.deg2rad(np.linspace(lo, hi, n_lat))
    d_lat = np.deg2rad((hi - lo) / (n_lat - 1))
    if mask is None:
        mask = np.ones((n_lat, n_lon), dtype=bool)
    return GridSpec(n_lat, n_lon, lat, float(d_lat), 2.0 * np.pi / n_lon, mask, radius, omega)


def _check(grid, f):
    shape = np.shape(ad.value(f))
    if len(shape) < 2 or tuple(shape[-2:]) != grid.shape:
        raise ShapeError("grid operator", shape, grid.shape)


def _lon_diffs(f):
    padded = ad.pad_periodic(f, axis=-1)
    return ad.correlate(padded, _FWD_LON), ad.correlate(padded, _BWD_LON)


def _lat_diffs(f):
    padded = ad.pad_replicate(f, axis=-2)
    return ad.correlate(padded, _FWD_LAT), ad.correlate(padded, _BWD_LAT)


def apply_mask(grid: GridSpec, f):
    """Zero land points."""
    _check(grid, f)
    return ad.where(grid.mask, f, 0.0)


def ddx(grid: GridSpec, f):
    """Zonal derivative (1/(R cos lat)) d/dlon, centred and periodic."""
    _check(grid, f)
    ops = grid.ops
    fwd, bwd = _lon_diffs(f)
    diff = ad.add(ad.mul(fwd, ops["ocean_e"]), ad.mul(bwd, ops["ocean_w"]))
    return apply_mask(grid, ad.mul(diff, ops["ddx_coef"]))


def ddy(grid: GridSpec, f):
    """Meridional derivative (1/R) d/dlat; one-sided on the outermost rows."""
    _check(grid, f)
    ops = grid.ops
    fwd, bwd = _lat_diffs(f)
    diff = ad.add(ad.mul(fwd, ops["ocean_n"]), ad.mul(bwd, ops["ocean_s"]))
    return apply_mask(grid, ad.mul(diff, ops["ddy_coef"]))


def laplacian(grid: GridSpec, f):
    """Spherical Laplacian in flux form, zero flux through coasts and edges."""
    _check(grid, f)
    ops = grid.ops
    fwd, bwd = _lon_diffs(f)
    lon = ad.mul(ad.sub(ad.mul(fwd, ops["ocean_e"]), ad.mul(bwd, ops["ocean_w"])), ops["lap_lon_coef"])
    fwd, bwd = _lat_diffs(f)
    lat = ad.mul(ad.sub(ad.mul(fwd, ops["face_n"]), ad.mul(bwd, ops["face_s"])), ops["lap_lat_coef"])
    return apply_mask(grid, ad.add(lon, lat))


def area_integral(grid: GridSpec, f) -> np.ndarray:
    """Area-weighted sum over ocean points of the last two axes (numpy)."""
    f = np.asarray(ad.value(f))
    return np.sum(np.where(grid.mask, f, 0.0) * grid.cell_area, axis=(-2, -1))
