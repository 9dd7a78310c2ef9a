"""Autoregressive rollouts and RMSE-by-lead evaluation in normalised space."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, NumericalError
from .integrator import HybridModel
from .train import PreparedSplit


@dataclass
class RolloutResult:
    trajectory: np.ndarray  # (n_frames, B, C, H, W); frame 0 is the initial condition
    rmse: np.ndarray | None  # (n_frames, B) when a truth was supplied
    blowup_step: np.ndarray  # (B,) first non-finite lead, -1 if none

    @property
    def finite(self) -> bool:
        return bool(np.all(self.blowup_step < 0))


def rmse(pred, truth, mask) -> np.ndarray:
    """RMSE over ocean points and channels; leading axes beyond (C, H, W) are kept."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != truth.shape:
        raise DataError(f"rmse: shape mismatch {pred.shape} vs {truth.shape}")
    n = int(mask.sum())
    if n == 0:
        raise DataError("rmse: mask has no ocean points")
    sq = np.where(mask, (pred - truth) ** 2, 0.0)
    return np.sqrt(sq.sum(axis=(-3, -2, -1)) / (n * pred.shape[-3]))


def rollout(model: HybridModel, y0, forcings, T_lead: int, days=None, truth=None,
            keep_trajectory=True) -> RolloutResult:
    """Feed the model its own state for ``T_lead`` steps with prescribed forcing.

    ``y0`` is (B, C, H, W) or (C, H, W); ``forcings`` (T_lead, B, C_a, H, W)
    or (T_lead, C_a, H, W); ``days`` (T_lead + 1, B) day-of-year or None.
    A member whose state turns non-finite is frozen from that lead on and its
    first bad lead stored; the rollout itself never raises.
    """
    y = np.asarray(y0, dtype=np.float64)
    single = y.ndim == 3
    if single:
        y = y[None]
    forcings = np.asarray(forcings, dtype=np.float64)
    if forcings.ndim == 4:
        forcings = forcings[:, None]
    if len(forcings) < T_lead:
        raise DataError(f"rollout needs {T_lead} forcing frames, got {len(forcings)}")
    b = y.shape[0]
    if days is None:
        days = np.ones((T_lead + 1, b))
    days = np.asarray(days, dtype=np.float64).reshape(T_lead + 1, -1) * np.ones((1, b))
    if truth is not None:
        truth = np.asarray(truth, dtype=np.float64)
        if single and truth.ndim == 4:
            truth = truth[:, None]
    mask = model.grid.mask

    frames = [y.copy()] if keep_trajectory else None
    errs = [rmse(y, truth[0], mask)] if truth is not None else None
    blowup = np.full(b, -1)
    alive = np.ones(b, dtype=bool)
    for t in range(T_lead):
        if alive.any():
            try:
                nxt = model.step(y[alive], forcings[t][alive], days[t][alive], days[t + 1][alive])
                nxt = np.asarray(nxt)
            except (NumericalError, FloatingPointError):
                nxt = np.full_like(y[alive], np.nan)
            bad = ~np.all(np.isfinite(nxt), axis=(1, 2, 3))
            idx = np.nonzero(alive)[0]
            blowup[idx[bad]] = t + 1
            y = y.copy()
            y[idx[~bad]] = nxt[~bad]
            y[idx[bad]] = np.nan
            alive[idx[bad]] = False
        if keep_trajectory:
            frames.append(y.copy())
        if truth is not None:
            errs.append(rmse(np.where(np.isfinite(y), y, np.inf), truth[t + 1], mask))
    traj = np.stack(frames) if keep_trajectory else y[None]
    err = np.stack(errs) if truth is not None else None
    if single:
        traj = traj[:, 0]
        err = None if err is None else err[:, 0]
    return RolloutResult(traj, err, blowup[0:1] if single else blowup)


def evaluate_leads(model: HybridModel, split: PreparedSplit, leads, starts=None,
                   batch_size=64) -> list[dict]:
    """Mean and std of RMSE across start indices for each requested lead.

    Every start ``s`` with ``s + max(leads)`` inside the split is used unless
    ``starts`` narrows the choice. Blown-up members score ``inf``.
    """
    leads = sorted({int(l) for l in leads})
    if not leads or leads[0] < 0:
        raise DataError("leads must be non-negative integers")
    horizon = leads[-1]
    n_valid = len(split) - horizon
    if n_valid < 1:
        raise DataError(f"test split has {len(split)} frames; leads up to {horizon} "
                        f"need at least {horizon + 1}")
    starts = np.arange(n_valid) if starts is None else np.asarray(starts, dtype=int)
    if starts.size == 0 or starts.min() < 0 or starts.max() >= n_valid:
        raise DataError(f"start indices must lie in [0, {n_valid - 1}]")
    scores = np.empty((len(starts), len(leads)))
    for lo in range(0, len(starts), batch_size):
        chunk = starts[lo:lo + batch_size]
        win = chunk[None, :] + np.arange(horizon + 1)[:, None]  # (T+1, B)
        res = rollout(model, split.y[chunk], split.f[win[:-1]], horizon, days=split.days[win],
                      truth=split.y[win], keep_trajectory=False)
        scores[lo:lo + len(chunk)] = res.rmse[leads].T
    return [{"lead": lead, "rmse_mean": float(np.mean(scores[:, i])),
             "rmse_std": float(np.std(scores[:, i])), "n_starts": int(len(starts))}
            for i, lead in enumerate(leads)]


def format_table(rows, variant=None, sep="\t") -> str:
    head = (["variant"] if variant else []) + ["lead", "rmse_mean", "rmse_std", "n_starts"]
    lines = [sep.join(head)]
    for r in rows:
        cells = ([variant] if variant else []) + [str(r["lead"]), repr(r["rmse_mean"]),
                                                 repr(r["rmse_std"]), str(r["n_starts"])]
        lines.append(sep.join(cells))
    return "\n".join(lines) + "\n"
