"""``diffocean`` command line: synth, ingest-inspect, train, gradcheck, eval.

Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 I/O error.
Relative output paths resolve against ``$DIFFOCEAN_OUT`` when it is set.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import container, data, train
from . import eval as evalmod
from .corrector import CorrectorConfig
from .errors import ConfigError, DataError, NumericalError
from .integrator import HybridModel

log = logging.getLogger("diffocean")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
OUT_ENV = "DIFFOCEAN_OUT"


def out_path(p) -> Path:
    p = Path(p)
    root = os.environ.get(OUT_ENV)
    return p if p.is_absolute() or not root else Path(root) / p


# -- wiring ----------------------------------------------------------------

def synth_config(cfg) -> data.SynthConfig:
    s = cfg["data"]["synthetic"]
    g, p = cfg["grid"], cfg["physics"]
    return data.SynthConfig(
        n_lat=g["n_lat"], n_lon=g["n_lon"], lat_span=tuple(g["lat_span"]),
        levels=cfg["channels"]["levels"], n_steps=s["n_steps"], dt=p["dt"],
        n_substeps=p["n_substeps"], nu_momentum=s["nu_momentum"], nu_tracer=s["nu_tracer"],
        land=s["land"], max_wavenumber=s["max_wavenumber"], velocity_scale=s["velocity_scale"],
        forcing_period_days=s["forcing_period_days"], start_date=s["start_date"],
        subgrid=s["subgrid"])


def load_data(cfg) -> data.Dataset:
    path = cfg["data"]["path"]
    ds = container.load_any(path) if path else data.generate_synthetic(
        synth_config(cfg), cfg["data"]["synthetic"]["seed"])
    g = cfg["grid"]
    if ds.mask.shape != (g["n_lat"], g["n_lon"]):
        raise ConfigError(f"dataset grid {ds.mask.shape} does not match config "
                          f"{g['n_lat']}x{g['n_lon']}")
    if len(ds) > 1 and abs(ds.dt_seconds - cfg["physics"]["dt"]) > 1e-6:
        raise ConfigError(f"dataset step {ds.dt_seconds} s differs from physics.dt "
                          f"{cfg['physics']['dt']} s")
    if data.layout_for(ds).levels != cfg["channels"]["levels"]:
        raise ConfigError("dataset level count differs from channels.levels")
    if g["mask"] == "none":
        from dataclasses import replace
        ds = replace(ds, mask=np.ones_like(ds.mask))
    ds.attrs.setdefault("lat_span", list(g["lat_span"]))
    return ds


def splits(cfg, ds):
    tr, va, te = data.chronological_split(ds, fractions=cfg["data"]["split"])
    stats = data.compute_norm_stats(tr)
    return stats, tr, va, te


def build_model(cfg, ds, stats, variant=None) -> HybridModel:
    variant = variant or cfg["train"]["variant"]
    grid = data.grid_for(ds)
    layout = data.layout_for(ds)
    p = cfg["physics"]
    corr = dict(cfg["corrector"])
    zero_out = corr.pop("zero_init_output", False)
    model = HybridModel.create(
        grid, layout, stats, dt=p["dt"], n_substeps=p["n_substeps"], nu_momentum=p["nu_momentum"],
        nu_tracer=p["nu_tracer"], corrector_config=CorrectorConfig(**corr),
        n_forcing=ds.forcing.shape[1], use_physics=variant != "corrector",
        use_corrector=variant != "physics", seed=cfg["train"]["seed"], zero_output=zero_out)
    model.meta["lat_span"] = list(cfg["grid"]["lat_span"])
    return model


def _echo_config(cfg, out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.yaml").write_text(cfgmod.dump_config(cfg))


# -- commands --------------------------------------------------------------

def cmd_synth(cfg, args) -> int:
    out = out_path(args.out)
    if not out.parent.exists():
        raise FileNotFoundError(f"output directory {out.parent} does not exist")
    ds = data.generate_synthetic(synth_config(cfg), cfg["data"]["synthetic"]["seed"])
    container.save_any(out, ds)
    print(f"wrote {out}")
    _print_summary(ds)
    return EXIT_OK


def _print_summary(ds: data.Dataset):
    t, co, h, w = ds.ocean.shape
    days = ds.times
    print(f"frames\t{t}\ngrid\t{h}x{w}\nocean_points\t{int(ds.mask.sum())}")
    print(f"start_date\t{ds.start_date}\ntime_span_days\t{days[0]!r}..{days[-1]!r}")
    print("channel\tkind\tmin\tmax\tmean")
    sets = ((ds.ocean_info, ds.ocean, "ocean"), (ds.forcing_info, ds.forcing, "forcing"))
    for infos, arr, kind in sets:
        for i, info in enumerate(infos):
            vals = arr[:, i][:, ds.mask]
            print(f"{info.name}\t{kind}\t{vals.min():.6g}\t{vals.max():.6g}\t{vals.mean():.6g}")


def cmd_ingest(cfg, args) -> int:
    ds = container.load_any(args.path)
    _print_summary(ds)
    if args.header:
        print(json.dumps(container.header_dict(ds), indent=2, sort_keys=True))
    if args.to:
        out = out_path(args.to)
        container.save_any(out, ds)
        print(f"wrote {out}")
    return EXIT_OK


def cmd_train(cfg, args) -> int:
    out_dir = out_path(args.out_dir)
    ds = load_data(cfg)
    stats, tr, _, _ = splits(cfg, ds)
    t_cfg = cfg["train"]
    chash = cfgmod.config_hash(cfg)
    log_path = out_dir / "train_log.jsonl"
    if args.resume:
        model, opt, header = train.load_checkpoint(args.resume)
        _check_hash(header, chash)
        start = header["step"]
        _truncate_log(log_path, start)
    else:
        model = build_model(cfg, ds, stats)
        opt = train.AdamW(lr=t_cfg["lr"], weight_decay=t_cfg["weight_decay"])
        start = 0
        _echo_config(cfg, out_dir)
        log_path.write_text("")
    out_dir.mkdir(parents=True, exist_ok=True)
    trainer = train.Trainer(model, train.PreparedSplit(tr, stats), opt, t_cfg["batch_size"],
                            t_cfg["seed"], t_cfg["clip"], step=start)
    every = t_cfg["checkpoint_every"]

    def on_step(rec):
        if rec["step"] % max(1, t_cfg["log_every"]) == 0:
            log.info("step %d loss %.6g nu_m %.6g nu_t %.6g", rec["step"], rec["loss"],
                     rec["nu_momentum"], rec["nu_tracer"])
        if every and rec["step"] % every == 0:
            train.save_checkpoint(out_dir / f"ckpt_step{rec['step']:06d}.npz", model, opt,
                                  rec["step"], t_cfg["seed"], chash)

    recs = trainer.run(max(0, t_cfg["steps"] - start), log_path=log_path, callback=on_step)
    ckpt = train.save_checkpoint(out_dir / "checkpoint.npz", model, opt, trainer.step,
                                 t_cfg["seed"], chash)
    nu_m, nu_t = model.nu()
    last = recs[-1]["loss"] if recs else float("nan")
    print(f"steps\t{trainer.step}\nfinal_loss\t{last!r}\nnu_momentum\t{nu_m!r}\n"
          f"nu_tracer\t{nu_t!r}\ncheckpoint\t{ckpt}")
    return EXIT_OK


def _truncate_log(path: Path, n_lines: int):
    if not path.exists():
        return
    lines = path.read_text().splitlines(keepends=True)[:n_lines]
    path.write_text("".join(lines))


def _check_hash(header, chash):
    if header.get("config_hash") != chash:
        msg = (f"config hash {chash} differs from checkpoint hash "
               f"{header.get('config_hash')}; model/data settings may not match")
        log.warning(msg)
        print(f"warning: {msg}", file=sys.stderr)


def cmd_gradcheck(cfg, args) -> int:
    ds = load_data(cfg)
    stats, tr, _, _ = splits(cfg, ds)
    g = cfg["gradcheck"]
    sp = train.PreparedSplit(tr, stats)
    idx = np.arange(g["sample"], g["sample"] + cfg["train"]["batch_size"])
    if idx[-1] >= sp.n_pairs:
        raise ConfigError(f"gradcheck.sample {g['sample']} leaves no full batch")
    variants = [args.variant] if args.variant else list(cfgmod.VARIANTS)
    ok = True
    print("variant\tgroup\tn\tmax_rel_err\ttol\tresult")
    for v in variants:
        model = build_model(cfg, ds, stats, v)
        rep = train.gradcheck(model, sp.batch(idx), g["n_weights"], g["step"], g["seed"])
        for name, grp in rep["groups"].items():
            print(f"{v}\t{name}\t{grp['n']}\t{grp['max_rel_err']:.3e}\t{rep['tol']:.0e}\t"
                  f"{'PASS' if grp['passed'] else 'FAIL'}")
        ok &= rep["passed"]
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_eval(cfg, args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint {ckpt} does not exist")
    model, _, header = train.load_checkpoint(ckpt)
    _check_hash(header, cfgmod.config_hash(cfg))
    ds = load_data(cfg)
    stats, _, _, te = splits(cfg, ds)
    split = train.PreparedSplit(te, model.stats)
    e = cfg["eval"]
    variants = {"hybrid" if model.use_physics and model.use_corrector
                else "physics" if model.use_physics else "corrector": model}
    if args.ablations or e["ablations"]:
        if model.corrector is not None and model.use_physics:
            variants = {"hybrid": model.variant(True, True),
                        "physics": model.variant(True, False),
                        "corrector": model.variant(False, True)}
        else:
            log.warning("ablations need a hybrid checkpoint; evaluating the stored variant only")
    out_dir = out_path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _echo_config(cfg, out_dir)
    tables, text = {}, []
    for name, m in variants.items():
        rows = evalmod.evaluate_leads(m, split, e["leads"], e["starts"])
        tables[name] = rows
        text.append(evalmod.format_table(rows, variant=name))
    body = text[0] + "".join(t.split("\n", 1)[1] for t in text[1:])
    (out_dir / "rmse.tsv").write_text(body)
    sys.stdout.write(body)
    if not args.no_figure:
        from .report import plot_rmse_vs_lead
        plot_rmse_vs_lead(tables, out_dir / "rmse_vs_lead.png")
    if args.dump_frames or e["dump_frames"]:
        _dump_frames(model, split, max(e["leads"]), te, out_dir)
    return EXIT_OK


def _dump_frames(model, split, horizon, te, out_dir):
    """Rollout from the first test start, written back in physical units."""
    win = np.arange(horizon + 1)
    res = evalmod.rollout(model, split.y[0], split.f[win[:-1]], horizon, days=split.days[win])
    phys = data.denormalize(res.trajectory, model.stats, split.days[win], split.mask)
    sub = te.subset(slice(0, horizon + 1))
    from dataclasses import replace
    dump = replace(sub, ocean=np.nan_to_num(phys), attrs={**sub.attrs, "kind": "rollout"})
    container.write_dataset(out_dir / "rollout.nogc", dump)


# -- entry point -----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="diffocean", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("-c", "--config", help="YAML run configuration")
            p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                           help="override one config key, e.g. train.steps=50")
        return p

    p = common(sub.add_parser("synth", help="generate a synthetic dataset"))
    p.add_argument("--out", required=True, help=".nogc or .npz output path")
    p = common(sub.add_parser("ingest-inspect", help="summarise or convert a dataset file"), False)
    p.add_argument("path")
    p.add_argument("--to", help="convert to this path (.nogc or .npz)")
    p.add_argument("--header", action="store_true", help="print the full JSON header")
    p = common(sub.add_parser("train", help="train and write checkpoint plus log"))
    p.add_argument("--out-dir", default="run")
    p.add_argument("--resume", help="checkpoint to continue from")
    p = common(sub.add_parser("gradcheck", help="finite-difference gradient verification"))
    p.add_argument("--variant", choices=cfgmod.VARIANTS)
    p = common(sub.add_parser("eval", help="RMSE against lead time on the test split"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-dir", default="eval")
    p.add_argument("--ablations", action="store_true")
    p.add_argument("--dump-frames", action="store_true")
    p.add_argument("--no-figure", action="store_true")
    return ap


COMMANDS = {"synth": cmd_synth, "ingest-inspect": cmd_ingest, "train": cmd_train,
            "gradcheck": cmd_gradcheck, "eval": cmd_eval}


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = None
        if hasattr(args, "config"):
            cfg = cfgmod.load_config(args.config, args.set)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FloatingPointError as exc:  # NumericalError and CFLError included
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, DataError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
