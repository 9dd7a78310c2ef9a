"""Differentiable physics core: advection, Coriolis force and horizontal diffusion.

States are stacked as (B, C, H, W) in physical units. The two diffusivities
are stored unconstrained and mapped through softplus before use, so they are
strictly positive for any finite raw value.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from . import autodiff as ad
from . import grid as gridops
from .errors import CFLError, ConfigError, NumericalError, ShapeError

VARIABLES = ("S", "U", "V", "T", "SSH")
PERIODIC_VARIABLES = ("S", "T", "SSH")
CFL_LIMIT = 0.25

DEFAULT_NU_MOMENTUM = 1.0e3  # m^2/s
DEFAULT_NU_TRACER = 5.0e2  # m^2/s


@dataclass(frozen=True)
class StateChannels:
    """Channel layout S_0..S_{L-1}, U_0.., V_0.., T_0.., SSH."""

    levels: int = 1

    def __post_init__(self):
        if self.levels < 1:
            raise ConfigError("need at least one vertical level")

    @property
    def n_channels(self) -> int:
        return 4 * self.levels + 1

    def index(self, variable: str, level: int = 0) -> int:
        if variable == "SSH":
            return 4 * self.levels
        if variable not in VARIABLES or not 0 <= level < self.levels:
            raise KeyError(f"no channel {variable} at level {level}")
        return VARIABLES.index(variable) * self.levels + level

    @cached_property
    def channels(self) -> tuple[tuple[str, int], ...]:
        out = [(v, l) for v in VARIABLES[:4] for l in range(self.levels)]
        out.append(("SSH", 0))
        return tuple(out)

    @property
    def names(self) -> list[str]:
        return [v if v == "SSH" else f"{v}{l}" for v, l in self.channels]

    @cached_property
    def periodic(self) -> np.ndarray:
        return np.array([v in PERIODIC_VARIABLES for v, _ in self.channels])

    @cached_property
    def u_source(self) -> np.ndarray:
        """For every channel, the index of the zonal velocity that advects it."""
        return np.array([self.index("U", l) for _, l in self.channels])

    @cached_property
    def v_source(self) -> np.ndarray:
        return np.array([self.index("V", l) for _, l in self.channels])

    @cached_property
    def momentum(self) -> np.ndarray:
        return np.array([v in ("U", "V") for v, _ in self.channels])

    @cached_property
    def coriolis_source(self) -> np.ndarray:
        """U channels read V, V channels read U, everything else itself."""
        src = np.arange(self.n_channels)
        for l in range(self.levels):
            src[self.index("U", l)] = self.index("V", l)
            src[self.index("V", l)] = self.index("U", l)
        return src

    def coriolis_sign(self) -> np.ndarray:
        sign = np.zeros(self.n_channels)
        for l in range(self.levels):
            sign[self.index("U", l)] = 1.0
            sign[self.index("V", l)] = -1.0
        return sign


@dataclass
class PhysicsParams:
    """Raw (pre-softplus) diffusivities plus time stepping.

    ``raw_nu_*`` may be floats or autodiff nodes registered as trainable
    leaves; the effective diffusivity in m^2/s is ``softplus(raw)``.
    """

    raw_nu_momentum: object = float(ad.inverse_softplus(DEFAULT_NU_MOMENTUM))
    raw_nu_tracer: object = float(ad.inverse_softplus(DEFAULT_NU_TRACER))
    n_substeps: int = 4
    dt_total: float = 86400.0

    def __post_init__(self):
        if int(self.n_substeps) < 1:
            raise ConfigError("n_substeps must be a positive integer")
        if self.dt_total <= 0:
            raise ConfigError("dt_total must be positive")

    @classmethod
    def from_nu(cls, nu_momentum, nu_tracer, **kw) -> "PhysicsParams":
        return cls(float(ad.inverse_softplus(nu_momentum)), float(ad.inverse_softplus(nu_tracer)), **kw)

    @property
    def dt_sub(self) -> float:
        return self.dt_total / self.n_substeps

    def nu(self) -> tuple[float, float]:
        """Effective (momentum, tracer) diffusivities as floats."""
        return (float(ad.softplus(ad.value(self.raw_nu_momentum))),
                float(ad.softplus(ad.value(self.raw_nu_tracer))))


def cfl_number(grid, params: PhysicsParams) -> float:
    return max(params.nu()) * params.dt_sub / grid.min_cell_area_scale()


def check_cfl(grid, params: PhysicsParams, mode="train") -> float:
    """Diffusive CFL number; warns in training mode, raises otherwise."""
    c = cfl_number(grid, params)
    if c > CFL_LIMIT:
        msg = (f"diffusive CFL number {c:.4g} exceeds {CFL_LIMIT} "
               f"(nu={params.nu()}, dt_sub={params.dt_sub:g}s)")
        if mode == "train":
            warnings.warn(msg, RuntimeWarning, stacklevel=2)
        else:
            raise CFLError(msg, where="physics")
    return c


def _check_state(state, layout):
    shape = np.shape(ad.value(state))
    if len(shape) != 4 or shape[1] != layout.n_channels:
        raise ShapeError("physics state", shape, detail=f"expected (B, {layout.n_channels}, H, W)")


def advection_tendency(grid, state, layout: StateChannels):
    """-(u dc/dx + v dc/dy) per channel, using the same-level velocities."""
    _check_state(state, layout)
    u = ad.take(state, layout.u_source, axis=1)
    v = ad.take(state, layout.v_source, axis=1)
    flux = ad.add(ad.mul(u, gridops.ddx(grid, state)), ad.mul(v, gridops.ddy(grid, state)))
    return gridops.apply_mask(grid, ad.scale(flux, -1.0))


def coriolis_tendency(grid, state, layout: StateChannels):
    """du/dt = f v, dv/dt = -f u; zero for tracers and SSH."""
    _check_state(state, layout)
    coef = layout.coriolis_sign()[:, None, None] * grid.coriolis_f[None, :, None]
    swapped = ad.take(state, layout.coriolis_source, axis=1)
    return gridops.apply_mask(grid, ad.mul(swapped, coef))


def diffusivity_field(params: PhysicsParams, layout: StateChannels):
    """(C, 1, 1) effective diffusivity per channel."""
    sel_m = layout.momentum.astype(np.float64)[:, None, None]
    sel_t = 1.0 - sel_m
    nu_m = ad.softplus(params.raw_nu_momentum)
    nu_t = ad.softplus(params.raw_nu_tracer)
    return ad.add(ad.mul(nu_m, sel_m), ad.mul(nu_t, sel_t))


def diffusion_tendency(grid, state, params: PhysicsParams, layout: StateChannels):
    _check_state(state, layout)
    nu = diffusivity_field(params, layout)
    return gridops.apply_mask(grid, ad.mul(gridops.laplacian(grid, state), nu))


def total_tendency(grid, state, params, layout):
    adv = advection_tendency(grid, state, layout)
    cor = coriolis_tendency(grid, state, layout)
    dif = diffusion_tendency(grid, state, params, layout)
    return ad.add(ad.add(adv, cor), dif)


def _first_bad_channel(arr, layout):
    bad = ~np.isfinite(arr)
    chans = np.nonzero(bad.any(axis=(0, 2, 3)))[0]
    return layout.names[int(chans[0])] if len(chans) else None


def physics_step(grid, state, params: PhysicsParams, layout: StateChannels, mode="train"):
    """Effective tendency (units per second) over ``dt_total``.

    Runs ``n_substeps`` forward-Euler sub-steps of the full tendency and
    returns the mean sub-step tendency, i.e. (y_final - y_initial) / dt_total.
    """
    _check_state(state, layout)
    check_cfl(grid, params, mode)
    n = int(params.n_substeps)
    dt_sub = params.dt_sub
    x = gridops.apply_mask(grid, state)
    total = None
    for k in range(n):
        tend = total_tendency(grid, x, params, layout)
        tv = ad.value(tend)
        if not np.all(np.isfinite(tv)):
            ch = _first_bad_channel(tv, layout)
            raise NumericalError(f"non-finite physics tendency at substep {k} in channel {ch}",
                                 where="physics", substep=k, channel=ch)
        total = tend if total is None else ad.add(total, tend)
        if k < n - 1:
            x = gridops.apply_mask(grid, ad.add(x, ad.scale(tend, dt_sub)))
            xv = ad.value(x)
            if not np.all(np.isfinite(xv)):
                ch = _first_bad_channel(xv, layout)
                raise NumericalError(f"non-finite physics state after substep {k} in channel {ch}",
                                     where="physics", substep=k, channel=ch)
    return total if n == 1 else ad.scale(total, 1.0 / n)
