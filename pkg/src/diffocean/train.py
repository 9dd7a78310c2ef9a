"""Single-step training in normalised space: masked MSE, AdamW, checkpoints, gradcheck."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import data
from .corrector import Corrector, CorrectorConfig
from .errors import DataError, NumericalError
from .integrator import PHYS_KEYS, HybridModel
from .physics import StateChannels

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


def mse_loss(pred, target, mask):
    """Mean squared error over ocean points, channels and batch; land ignored."""
    mask = np.asarray(mask, dtype=bool)
    n_ocean = int(mask.sum())
    if n_ocean == 0:
        raise DataError("mse_loss: mask has no ocean points")
    pv, tv = np.shape(ad.value(pred)), np.shape(ad.value(target))
    if pv != tv:
        raise DataError(f"mse_loss: shape mismatch {pv} vs {tv}")
    sq = ad.where(mask, ad.square(ad.sub(pred, target)), 0.0)
    count = n_ocean * int(np.prod(pv[:-2]))
    return ad.scale(ad.sum(sq), 1.0 / count)


@dataclass
class AdamW:
    """Adam with decoupled weight decay: theta -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)."""

    lr: float = 1e-4
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def update(self, params: dict, grads: dict) -> bool:
        """In-place update of ``params`` for every key in ``grads``.

        Returns False (and leaves everything untouched) if any gradient is
        non-finite.
        """
        keys = sorted(grads)
        if not all(np.all(np.isfinite(grads[k])) for k in keys):
            return False
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k in keys:
            g = grads[k]
            m = self.m.get(k)
            v = self.v.get(k)
            m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
            v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
            self.m[k], self.v[k] = m, v
            m_hat = m / c1
            v_hat = v / c2
            p = params[k]
            params[k] = p - self.lr * (m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * p)
        return True


def clip_by_global_norm(grads: dict, max_norm: float | None):
    if not max_norm:
        return grads, None
    total = float(np.sqrt(sum(float(np.sum(grads[k] ** 2)) for k in sorted(grads))))
    if total > max_norm:
        s = max_norm / (total + 1e-12)
        grads = {k: g * s for k, g in grads.items()}
    return grads, total


class PreparedSplit:
    """A split normalised once up front, yielding consecutive (t, t+1) pairs."""

    def __init__(self, ds: data.Dataset, stats: data.NormStats):
        if len(ds) < 2:
            raise DataError("a split needs at least two samples")
        self.days = ds.day_of_year()
        self.y = data.normalize(ds.ocean, stats, self.days, ds.mask)
        self.f = data.normalize_forcing(ds.forcing, stats, ds.mask)
        self.mask = ds.mask

    def __len__(self):
        return len(self.days)

    @property
    def n_pairs(self):
        return len(self.days) - 1

    def batch(self, idx):
        idx = np.asarray(idx)
        return self.y[idx], self.f[idx], self.days[idx], self.days[idx + 1], self.y[idx + 1]


def loss_and_grads(model: HybridModel, batch, trainable):
    y, f, d0, d1, target = batch
    tape = ad.Tape()
    leaves = {k: tape.leaf(model.params[k], name=k) for k in trainable}
    pred = model.step(y, f, d0, d1, theta=leaves)
    loss = mse_loss(pred, target, model.grid.mask)
    grads = tape.backward(loss)
    return float(loss.value), {k: grads[n.id] for k, n in leaves.items()}


def batch_indices(n_pairs, batch_size, seed, step):
    """Deterministic minibatch for a global step: epoch-wise permutations."""
    per_epoch = n_pairs // batch_size
    if per_epoch == 0:
        raise DataError(f"batch size {batch_size} exceeds {n_pairs} training pairs")
    epoch, pos = divmod(step, per_epoch)
    perm = np.random.default_rng([seed, epoch]).permutation(n_pairs)
    return perm[pos * batch_size:(pos + 1) * batch_size]


@dataclass
class Trainer:
    model: HybridModel
    split: PreparedSplit
    opt: AdamW
    batch_size: int = 2
    seed: int = 0
    clip: float | None = 1.0
    trainable: list | None = None
    step: int = 0

    def __post_init__(self):
        if self.trainable is None:
            self.trainable = self.model.active_keys()

    def train_step(self) -> dict:
        idx = batch_indices(self.split.n_pairs, self.batch_size, self.seed, self.step)
        loss, grads = loss_and_grads(self.model, self.split.batch(idx), self.trainable)
        if not np.isfinite(loss):
            raise NumericalError(f"non-finite loss at step {self.step} (batch {idx.tolist()})",
                                 where="loss", substep=self.step)
        grads, gnorm = clip_by_global_norm(grads, self.clip)
        applied = self.opt.update(self.model.params, grads)
        if not applied:
            log.warning("step %d: non-finite gradient, update skipped", self.step)
        self.step += 1
        nu_m, nu_t = self.model.nu()
        rec = {"step": self.step, "loss": loss, "nu_momentum": nu_m, "nu_tracer": nu_t,
               "grad_norm": gnorm, "skipped": not applied}
        return rec

    def run(self, n_steps, log_path=None, callback=None) -> list[dict]:
        records = []
        fh = open(log_path, "a") if log_path else None
        t0 = time.perf_counter()
        try:
            for _ in range(n_steps):
                rec = self.train_step()
                rec["wall_time"] = time.perf_counter() - t0
                records.append(rec)
                if fh:
                    fh.write(json.dumps(rec) + "\n")
                if callback:
                    callback(rec)
        finally:
            if fh:
                fh.close()
        return records


def train_epoch(model, split: PreparedSplit, opt: AdamW, batch_size=2, seed=0, epoch=0,
                clip=1.0, trainable=None) -> dict:
    """One pass over the training pairs; returns the mean training loss."""
    per_epoch = split.n_pairs // batch_size
    tr = Trainer(model, split, opt, batch_size, seed, clip, trainable, step=epoch * per_epoch)
    recs = tr.run(per_epoch)
    return {"epoch": epoch, "steps": per_epoch, "mean_loss": float(np.mean([r["loss"] for r in recs]))}


# -- checkpoints -----------------------------------------------------------

def save_checkpoint(path, model: HybridModel, opt: AdamW | None = None, step=0, seed=0,
                    config_hash="", extra=None) -> Path:
    path = Path(path)
    header = {
        "format_version": CHECKPOINT_VERSION, "step": int(step), "seed": int(seed),
        "config_hash": config_hash, "dt": model.dt, "n_substeps": model.n_substeps,
        "levels": model.layout.levels, "use_physics": model.use_physics,
        "use_corrector": model.use_corrector,
        "corrector": model.corrector.config.to_dict() if model.corrector else None,
        "n_forcing": model.corrector.n_forcing if model.corrector else 4,
        "lat_span": model.meta.get("lat_span"), "omega": float(model.grid.omega),
        "opt": None if opt is None else {"lr": opt.lr, "weight_decay": opt.weight_decay,
                                          "beta1": opt.beta1, "beta2": opt.beta2,
                                          "eps": opt.eps, "t": opt.t},
        "extra": extra or {},
    }
    arrays = {"header": np.frombuffer(json.dumps(header).encode(), dtype=np.uint8),
              "mask": model.grid.mask.astype(np.uint8)}
    arrays.update({f"param/{k}": v for k, v in model.params.items()})
    arrays.update({f"stats/{k}": v for k, v in model.stats.arrays().items()})
    if opt is not None:
        arrays.update({f"opt_m/{k}": v for k, v in opt.m.items()})
        arrays.update({f"opt_v/{k}": v for k, v in opt.v.items()})
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path):
    """Returns (model, opt or None, header)."""
    from .grid import EARTH_OMEGA, build_grid

    with np.load(path) as z:
        header = json.loads(bytes(z["header"]).decode())
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
        files = {k: z[k] for k in z.files}
    mask = files["mask"].astype(bool)
    span = header.get("lat_span") or (-80.0, 80.0)
    grid = build_grid(mask.shape[0], mask.shape[1], span, mask,
                      omega=header.get("omega", EARTH_OMEGA))
    layout = StateChannels(header["levels"])
    stats = data.NormStats.from_arrays({k[6:]: v for k, v in files.items() if k.startswith("stats/")})
    params = {k[6:]: v for k, v in files.items() if k.startswith("param/")}
    corrector = None
    if header["corrector"] is not None:
        corrector = Corrector(CorrectorConfig(**header["corrector"]), layout.n_channels,
                              header["n_forcing"], grid.shape)
    model = HybridModel(grid, layout, stats, params, header["dt"], header["n_substeps"], corrector,
                        header["use_physics"], header["use_corrector"], meta={"lat_span": span})
    opt = None
    if header["opt"] is not None:
        o = header["opt"]
        opt = AdamW(o["lr"], o["weight_decay"], o["beta1"], o["beta2"], o["eps"], o["t"],
                    {k[6:]: v for k, v in files.items() if k.startswith("opt_m/")},
                    {k[6:]: v for k, v in files.items() if k.startswith("opt_v/")})
    return model, opt, header


# -- gradient verification -------------------------------------------------

GRADCHECK_TOL = {"physics": 1e-5, "corrector": 1e-5, "hybrid": 1e-4}
# Gradients far below the loss scale are dominated by difference roundoff
# (about eps * loss / step); the denominator never drops below this * loss.
GRADCHECK_FLOOR = 1e-4


def relative_error(analytic, numeric, floor=1e-12):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def gradcheck(model: HybridModel, batch, n_weights=64, step=1e-5, seed=0, tol=None) -> dict:
    """Analytic vs central-difference gradients of the one-step loss.

    Checks both diffusivities (if physics is active) and ``n_weights``
    randomly sampled corrector weights (if the corrector is active). The
    difference step is ``step * max(1, |theta_i|)``. Relative errors use
    ``max(|analytic|, |numeric|, GRADCHECK_FLOOR * loss)`` as denominator.
    """
    kind = ("hybrid" if model.use_physics and model.use_corrector
            else "physics" if model.use_physics else "corrector")
    tol = GRADCHECK_TOL[kind] if tol is None else tol
    keys = model.active_keys()
    loss, grads = loss_and_grads(model, batch, keys)
    y, f, d0, d1, target = batch

    def loss_at(theta):
        return float(mse_loss(model.step(y, f, d0, d1, theta=theta), target, model.grid.mask))

    floor = GRADCHECK_FLOOR * max(abs(loss), 1e-300)
    picks = [(k, ()) for k in PHYS_KEYS if k in keys]
    corr_keys = [k for k in keys if k.startswith("corr.")]
    if corr_keys:
        rng = np.random.default_rng(seed)
        sizes = np.array([model.params[k].size for k in corr_keys])
        flat = rng.choice(int(sizes.sum()), size=min(n_weights, int(sizes.sum())), replace=False)
        bounds = np.cumsum(sizes)
        for fi in np.sort(flat):
            ki = int(np.searchsorted(bounds, fi, side="right"))
            local = int(fi - (bounds[ki - 1] if ki else 0))
            picks.append((corr_keys[ki], np.unravel_index(local, model.params[corr_keys[ki]].shape)))

    groups: dict[str, list] = {}
    for key, idx in picks:
        base = model.params[key]
        h = step * max(1.0, abs(float(base[idx])))
        plus, minus = base.copy(), base.copy()
        plus[idx] += h
        minus[idx] -= h
        numeric = (loss_at({key: plus}) - loss_at({key: minus})) / (2.0 * h)
        analytic = float(grads[key][idx])
        group = key if key in PHYS_KEYS else "corrector_weights"
        groups.setdefault(group, []).append(
            {"param": key, "index": [int(i) for i in idx], "analytic": analytic,
             "numeric": numeric, "rel_err": relative_error(analytic, numeric, floor)})
    report = {"kind": kind, "loss": loss, "tol": tol, "groups": {}}
    for name, rows in groups.items():
        worst = max(r["rel_err"] for r in rows)
        report["groups"][name] = {"n": len(rows), "max_rel_err": worst, "passed": worst <= tol,
                                  "checks": rows}
    report["passed"] = all(g["passed"] for g in report["groups"].values())
    return report
