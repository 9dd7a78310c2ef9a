"""Hybrid one-step operator: physics core plus neural correction, forward Euler.

All trainable parameters live in one flat mapping::

    "phys.raw_nu_momentum", "phys.raw_nu_tracer"   (0-d arrays)
    "corr.<weight name>"                           (corrector kernels)

so optimisers and checkpoints never need to know the architecture.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import data
from . import physics
from .corrector import Corrector, CorrectorConfig
from .errors import NumericalError

PHYS_KEYS = ("phys.raw_nu_momentum", "phys.raw_nu_tracer")


@dataclass
class HybridModel:
    grid: object
    layout: physics.StateChannels
    stats: data.NormStats
    params: dict  # name -> np.ndarray
    dt: float = 86400.0
    n_substeps: int = 4
    corrector: Corrector | None = None
    use_physics: bool = True
    use_corrector: bool = True
    mode: str = "train"  # CFL policy: "train" warns, anything else raises
    meta: dict = field(default_factory=dict)

    @classmethod
    def create(cls, grid, layout, stats, *, dt, n_substeps=4, nu_momentum=physics.DEFAULT_NU_MOMENTUM,
               nu_tracer=physics.DEFAULT_NU_TRACER, corrector_config: CorrectorConfig | None = None,
               n_forcing=4, use_physics=True, use_corrector=True, seed=0,
               zero_output=False) -> "HybridModel":
        params = {
            "phys.raw_nu_momentum": np.array(float(ad.inverse_softplus(nu_momentum))),
            "phys.raw_nu_tracer": np.array(float(ad.inverse_softplus(nu_tracer))),
        }
        corrector = None
        if use_corrector:
            corrector = Corrector(corrector_config or CorrectorConfig(), layout.n_channels, n_forcing,
                                  grid.shape)
            weights = corrector.init_weights(np.random.default_rng(seed), zero_output)
            params.update({f"corr.{k}": v for k, v in weights.items()})
        return cls(grid, layout, stats, params, dt, n_substeps, corrector, use_physics, use_corrector)

    def variant(self, use_physics=None, use_corrector=None) -> "HybridModel":
        """Same parameters with a branch switched off (ablation)."""
        return replace(self,
                       use_physics=self.use_physics if use_physics is None else use_physics,
                       use_corrector=self.use_corrector if use_corrector is None else use_corrector)

    def active_keys(self) -> list[str]:
        keys = []
        if self.use_physics:
            keys += list(PHYS_KEYS)
        if self.use_corrector and self.corrector is not None:
            keys += sorted(k for k in self.params if k.startswith("corr."))
        return keys

    def physics_params(self, theta=None) -> physics.PhysicsParams:
        theta = self.params if theta is None else theta
        return physics.PhysicsParams(theta["phys.raw_nu_momentum"], theta["phys.raw_nu_tracer"],
                                     self.n_substeps, self.dt)

    def nu(self) -> tuple[float, float]:
        return self.physics_params().nu()

    def step(self, y_norm, f_norm, day, day_next=None, theta=None):
        return hybrid_step(self, y_norm, f_norm, day, day_next, theta)


def clim_shift(stats: data.NormStats, day, day_next) -> np.ndarray | None:
    """Change of the normalised climatology offset between two days."""
    if day_next is None:
        return None
    day, day_next = np.atleast_1d(day), np.atleast_1d(day_next)
    if np.array_equal(data.clim_index(day), data.clim_index(day_next)):
        return None
    diff = stats.clim_full(day_next) - stats.clim_full(day)
    return diff / stats.ocean_std[:, None, None]


def hybrid_step(model: HybridModel, y_norm, f_norm, day, day_next=None, theta=None):
    """Advance a normalised (B, C, H, W) state by one outer step.

    ``theta`` overrides ``model.params`` (e.g. with tape leaves). ``day`` and
    ``day_next`` are day-of-year values per batch element; when they differ,
    the shift of the climatological offset is subtracted so that a zero
    tendency keeps the physical state unchanged.
    """
    theta = model.params if theta is None else {**model.params, **theta}
    mask = model.grid.mask
    y = ad.where(mask, y_norm, 0.0)
    out = y
    if model.use_physics:
        x_phys = data.denormalize(y, model.stats, day, mask)
        g_phys = physics.physics_step(model.grid, x_phys, model.physics_params(theta), model.layout,
                                      mode=model.mode)
        inc = ad.mul(g_phys, (model.dt / model.stats.ocean_std)[:, None, None])
        if not ad.is_finite(inc):
            raise NumericalError("physics branch produced non-finite tendency", where="physics")
        out = ad.add(out, inc)
    shift = clim_shift(model.stats, day, day_next)
    if shift is not None:
        out = ad.sub(out, shift)
    if model.use_corrector and model.corrector is not None:
        weights = {k[5:]: v for k, v in theta.items() if k.startswith("corr.")}
        g_neural = model.corrector.forward(y, f_norm, weights, mask)
        if not ad.is_finite(g_neural):
            raise NumericalError("neural branch produced non-finite tendency", where="neural")
        out = ad.add(out, g_neural)
    return ad.where(mask, out, 0.0)
