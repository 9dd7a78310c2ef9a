import numpy as np
import pytest

from diffocean import autodiff as ad
from diffocean import data, integrator, physics
from diffocean.corrector import CorrectorConfig
from diffocean.errors import NumericalError
from diffocean.integrator import HybridModel

from helpers import small_grid

SMALL = CorrectorConfig(base_channels=4, n_down=1, n_heads=1, d_model=8)


def flat_stats(layout, h, w, mean=None, std=None, clim=None):
    c = layout.n_channels
    mean = np.zeros(c) if mean is None else mean
    std = np.ones(c) if std is None else std
    n_per = int(layout.periodic.sum())
    clim = np.zeros((365, n_per, h, w)) if clim is None else clim
    return data.NormStats(mean, std, np.zeros(4), np.ones(4), layout.periodic, clim)


@pytest.fixture(scope="module")
def synth():
    ds = data.generate_synthetic(data.SynthConfig(n_lat=8, n_lon=16, n_steps=12, dt=600.0,
                                                  land="continents", subgrid=True), 5)
    stats = data.compute_norm_stats(ds)
    return ds, stats


def synth_model(synth, **kw):
    ds, stats = synth
    return HybridModel.create(data.grid_for(ds), data.layout_for(ds), stats, dt=600.0,
                              corrector_config=SMALL, **kw)


def synth_batch(synth, i=0):
    from diffocean.train import PreparedSplit
    return PreparedSplit(*synth).batch([i])


def test_identity_when_both_branches_vanish():
    grid = small_grid()
    lay = physics.StateChannels(1)
    mean = np.zeros(lay.n_channels)
    mean[lay.index("S")], mean[lay.index("T")] = 35.0, 15.0
    stats = flat_stats(lay, *grid.shape, mean=mean, std=np.full(lay.n_channels, 2.0))
    model = HybridModel.create(grid, lay, stats, dt=3600.0, corrector_config=SMALL, zero_output=True)
    y = np.zeros((1, lay.n_channels) + grid.shape)
    np.testing.assert_array_equal(model.step(y, np.zeros((1, 4) + grid.shape), [10], [10]), y)


def test_constant_physics_tendency_scales_by_dt_over_sigma(monkeypatch):
    grid = small_grid(land=True)
    lay = physics.StateChannels(1)
    std = np.array([0.5, 2.0, 3.0, 4.0, 0.1])
    stats = flat_stats(lay, *grid.shape, std=std)
    model = HybridModel.create(grid, lay, stats, dt=900.0, use_corrector=False)
    c = np.arange(1.0, lay.n_channels + 1) * 1e-4
    monkeypatch.setattr(physics, "physics_step",
                        lambda g, x, p, l, mode="train": np.broadcast_to(c[:, None, None], x.shape))
    y = np.where(grid.mask, np.random.default_rng(0).normal(size=(2, lay.n_channels) + grid.shape), 0.0)
    out = model.step(y, None, [3, 3], [3, 3])
    want = np.where(grid.mask, y + 900.0 * c[:, None, None] / std[:, None, None], 0.0)
    np.testing.assert_allclose(out, want, rtol=0, atol=1e-15)


def test_update_is_linear_in_physics_tendency(monkeypatch, synth):
    model = synth_model(synth)
    y, f, d0, d1, _ = synth_batch(synth)
    base = model.step(y, f, d0, d1)
    delta = np.random.default_rng(1).normal(size=y.shape[1:]) * 1e-6
    real = physics.physics_step
    monkeypatch.setattr(physics, "physics_step",
                        lambda g, x, p, l, mode="train": ad.add(real(g, x, p, l, mode=mode), delta))
    shifted = model.step(y, f, d0, d1)
    want = np.where(model.grid.mask, delta[None] * (600.0 / synth[1].ocean_std)[:, None, None], 0.0)
    np.testing.assert_allclose(shifted - base, want, rtol=0, atol=1e-12)


def test_gradient_of_output_sum_wrt_raw_nu_tracer(synth):
    model = synth_model(synth, nu_tracer=700.0)
    y, f, d0, d1, _ = synth_batch(synth)

    def total(raw):
        return float(np.sum(model.step(y, f, d0, d1, theta={"phys.raw_nu_tracer": np.array(raw)})))

    tape = ad.Tape()
    leaf = tape.leaf(model.params["phys.raw_nu_tracer"])
    grads = tape.backward(ad.sum(model.step(y, f, d0, d1, theta={"phys.raw_nu_tracer": leaf})))
    analytic = float(grads[leaf.id])
    raw = float(model.params["phys.raw_nu_tracer"])
    h = 1e-5 * max(1.0, abs(raw))
    numeric = (total(raw + h) - total(raw - h)) / (2 * h)
    assert abs(analytic - numeric) <= 1e-5 * abs(numeric)


def test_gradients_reach_every_input(synth):
    model = synth_model(synth)
    y, f, d0, d1, _ = synth_batch(synth)
    tape = ad.Tape()
    theta = {k: tape.leaf(model.params[k]) for k in model.active_keys()}
    y_leaf = tape.leaf(y)
    out = model.step(y_leaf, f, d0, d1, theta=theta)
    grads = tape.backward(ad.sum(ad.square(out)))
    assert np.any(grads[y_leaf.id] != 0)
    for k in integrator.PHYS_KEYS:
        assert grads[theta[k].id] != 0
    assert any(np.any(grads[n.id] != 0) for k, n in theta.items() if k.startswith("corr."))


def test_physics_nonfinite_names_branch(monkeypatch, synth):
    model = synth_model(synth)
    y, f, d0, d1, _ = synth_batch(synth)
    monkeypatch.setattr(physics, "physics_step",
                        lambda g, x, p, l, mode="train": np.full(np.shape(x), np.nan))
    with pytest.raises(NumericalError, match="physics") as info:
        model.step(y, f, d0, d1)
    assert info.value.where == "physics"


def test_neural_nonfinite_names_branch(synth):
    model = synth_model(synth)
    y, f, d0, d1, _ = synth_batch(synth)
    model.params["corr.out.b"] = np.full_like(model.params["corr.out.b"], np.inf)
    with pytest.raises(NumericalError, match="neural") as info:
        model.step(y, f, d0, d1)
    assert info.value.where == "neural"


def test_climatology_change_keeps_physical_state_at_zero_tendency():
    grid = small_grid()
    lay = physics.StateChannels(1)
    rng = np.random.default_rng(3)
    n_per = int(lay.periodic.sum())
    clim = rng.normal(size=(365, n_per) + grid.shape)
    std = np.linspace(0.5, 2.0, lay.n_channels)
    stats = flat_stats(lay, *grid.shape, std=std, clim=clim)
    model = HybridModel.create(grid, lay, stats, dt=600.0, use_physics=False,
                               corrector_config=SMALL, zero_output=True)
    x = rng.normal(size=(1, lay.n_channels) + grid.shape)
    y0 = data.normalize(x, stats, [40])
    y1 = model.step(y0, np.zeros((1, 4) + grid.shape), [40], [41])
    np.testing.assert_allclose(data.denormalize(y1, stats, [41]), x, rtol=1e-12, atol=1e-12)
    assert integrator.clim_shift(stats, [40], [40]) is None


def test_variant_switches_branches_and_keys(synth):
    model = synth_model(synth)
    phys = model.variant(use_corrector=False)
    assert phys.active_keys() == list(integrator.PHYS_KEYS)
    neural = model.variant(use_physics=False)
    assert all(k.startswith("corr.") for k in neural.active_keys())
    assert phys.params is model.params
