"""
tunnelwave: command line for the tunnel RSS pipeline.

    python scripts/tunnelwave.py simulate --preset massif --frequency 0.9e9 --out data/massif
    python scripts/tunnelwave.py dataset  --preset tableI --split train --workers 4 --limit 8
    python scripts/tunnelwave.py train    --manifest data/dataset/manifest.json --seed 0 --deterministic
    python scripts/tunnelwave.py eval     --checkpoint models/train/checkpoint.prbw --manifest data/test/manifest.json
    python scripts/tunnelwave.py infer    --checkpoint models/train/model.prbw --volume data/massif/coarse.rssv --t 10
    python scripts/tunnelwave.py plot     --volume data/massif/fine.rssv --kind heatmap --t 10 --png
    python scripts/tunnelwave.py selfcheck

Exit codes: 0 success, 1 check failure or numerical breakdown, 2 usage or
configuration error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import warnings
from dataclasses import replace

import numpy as np

from binfmt import FormatError
from prbpn import Prbpn, load_model, save_model
from pwe_solver import NormStats, RssVolume
from rss_dataset import (
    SPLITS,
    TunnelDatasetPrepper,
    generate_pair_cached,
    load_training_set,
    normalize,
    read_manifest,
)
from rss_metrics import (
    POINT_SETS,
    evaluate_pairs,
    format_table,
    group_metrics,
    predict_volume_slices,
    write_json,
)
from rss_plots import axial_png, heatmap_png, write_axial_csv, write_heatmap
from run_config import ConfigError, load_run_config
from selfcheck import run_selfcheck
from train_prbpn import load_checkpoint, train
from tunnel_geometry import FINE_MESH_FACTOR, refined_grid
from volume_io import load_volume, save_volume

# --- CONFIGURATION ---
EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2


# ==========================================
# COMMANDS
# ==========================================
def _out_dir(args, run, default_root, name):
    out = args.out or os.path.join(default_root, name)
    os.makedirs(out, exist_ok=True)
    return out


def cmd_simulate(args, run):
    config = run.simulate_config(shape=args.shape, frequency=args.frequency, length=args.length)
    out = _out_dir(args, run, run.data_dir, "simulate")
    _say(args, f"⚙️ Simulating {config.section.kind} @ {config.frequency / 1e9:.2f} GHz, "
               f"TX {config.tx}, {config.length:.0f} m ({config.n_slices} slices of {config.delta_z:.4f} m)")
    coarse, fine = generate_pair_cached(config)
    save_volume(coarse, os.path.join(out, "coarse.rssv"))
    save_volume(fine, os.path.join(out, "fine.rssv"))
    with open(os.path.join(out, "simulate.json"), "w") as f:
        json.dump(config.to_dict(), f, indent=2, sort_keys=True)
    _say(args, f"✅ Coarse {coarse.slices.shape} and fine {fine.slices.shape} volumes saved to: {out}")
    return EXIT_OK


def cmd_dataset(args, run):
    grid = run.grid if args.length is None else replace(run.grid, length=float(args.length))
    stats = None
    if args.stats_from:
        stats = NormStats(**read_manifest(args.stats_from)["stats"])
    split = args.split or run.dataset.split
    prepper = TunnelDatasetPrepper(
        grid,
        split=split,
        out_dir=_out_dir(args, run, run.data_dir, split),
        workers=args.workers or run.dataset.workers,
        limit=args.limit if args.limit is not None else run.dataset.limit,
        crop=tuple(args.crop) if args.crop else run.dataset.crop,
        stats=stats,
        verbose=not args.quiet,
    )
    prepper.run()
    return EXIT_OK


def cmd_train(args, run):
    pairs = load_training_set(args.manifest)
    eval_pairs = load_training_set(args.eval_manifest) if args.eval_manifest else None
    out = _out_dir(args, run, run.models_dir, "train")

    if args.resume:
        state, cfg = load_checkpoint(args.resume)
        model = state.model
        _say(args, f"📂 Resuming from {args.resume} at iteration {state.iteration}")
    else:
        cfg = run.train
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        state, model = None, Prbpn(run.model, seed=cfg.seed)
    if args.max_iters is not None:
        cfg = replace(cfg, max_iters=args.max_iters)
    if args.deterministic:
        cfg = replace(cfg, deterministic=True)

    _say(args, f"⚙️ PRBPN with {model.n_parameters()} parameters on {len(pairs)} pairs")
    state = train(model, pairs, cfg, state=state, eval_pairs=eval_pairs, out_dir=out, verbose=not args.quiet)
    save_model(state.model, os.path.join(out, "model.prbw"), extra={"iteration": state.iteration})
    return EXIT_OK


def cmd_eval(args, run):
    model = load_model(args.checkpoint)
    pairs = load_training_set(args.manifest, split=args.split)
    per_pair = evaluate_pairs(model, pairs, verbose=not args.quiet, points=args.points)
    grouped = group_metrics(per_pair)
    out = _out_dir(args, run, run.data_dir, "eval")
    write_json(per_pair, os.path.join(out, "eval_pairs.json"))
    write_json(grouped, os.path.join(out, "eval.json"))
    if not grouped.empty:
        print(format_table(grouped))
    _say(args, f"✅ Metrics saved to: {out}")
    return EXIT_OK


def prediction_volume(model, coarse01, t):
    """One-slice fine-grid RSSV1 volume holding the SR prediction of coarse slice t."""
    sr = predict_volume_slices(model, coarse01, [t])
    config = coarse01.config.with_mesh(FINE_MESH_FACTOR) if coarse01.config is not None else None
    return RssVolume(
        slices=sr.astype(np.float32),
        z=np.asarray([coarse01.z[t]], dtype=np.float64),
        grid=refined_grid(coarse01.grid, model.config.scale),
        config=config,
        stats=coarse01.stats,
        normalized=True,
    )


def cmd_infer(args, run):
    model = load_model(args.checkpoint)
    coarse = load_volume(args.volume)
    if not 0 <= args.t < coarse.nz:
        raise ValueError(f"Slice index {args.t} out of range for a volume of {coarse.nz} slices")
    if not coarse.normalized:
        stats = NormStats(**read_manifest(args.stats_from)["stats"]) if args.stats_from else None
        if stats is None:
            warnings.warn(f"'{args.volume}' is not normalized; using its own dB range")
        coarse, _ = normalize(coarse, stats)
    pred = prediction_volume(model, coarse, args.t)
    out = _out_dir(args, run, run.data_dir, "infer")
    path = os.path.join(out, f"prediction_t{args.t:05d}.rssv")
    save_volume(pred, path)
    _say(args, f"✅ {pred.grid.nx}x{pred.grid.ny} prediction of slice {args.t} (z = {pred.z[0]:.2f} m) saved to: {path}")
    return EXIT_OK


def cmd_plot(args, run):
    volume = load_volume(args.volume)
    out = _out_dir(args, run, run.data_dir, "plots")
    stem = os.path.splitext(os.path.basename(args.volume))[0]
    if args.kind == "heatmap":
        path = os.path.join(out, f"{stem}_t{args.t:05d}.pgm")
        sidecar = write_heatmap(volume, args.t, path)
        if args.png:
            heatmap_png(volume, args.t, path[:-4] + ".png")
        _say(args, f"✅ Heatmap [{sidecar['min_db']:.2f}, {sidecar['max_db']:.2f}] dB saved to: {path}")
    else:
        if args.rx is None:
            raise ValueError("Axial plots need a receiver position (--rx X Y)")
        path = os.path.join(out, f"{stem}_axial.csv")
        curve = write_axial_csv(volume, tuple(args.rx), path)
        if args.png:
            axial_png(curve, path[:-4] + ".png", label=f"RX ({args.rx[0]}, {args.rx[1]})")
        _say(args, f"✅ Axial curve ({len(curve)} points) saved to: {path}")
    return EXIT_OK


def cmd_selfcheck(args, run):
    results = run_selfcheck(verbose=not args.quiet)
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"❌ Self-check failed: {', '.join(failed)}")
        return EXIT_CHECK_FAILED
    _say(args, f"✅ All {len(results)} checks passed")
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "dataset": cmd_dataset,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "plot": cmd_plot,
    "selfcheck": cmd_selfcheck,
}


# ==========================================
# PARSER
# ==========================================
def _say(args, msg):
    if not args.quiet:
        print(msg)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="RunConfig JSON file")
    common.add_argument("--preset", help="Parameter preset (tableI, figures, massif)")
    common.add_argument("--seed", type=int, default=None, help="Training and initialization seed")
    common.add_argument("--deterministic", action="store_true", help="Single-threaded BLAS for bit-exact runs")
    common.add_argument("--workers", type=int, default=None, help="Simulation worker processes")
    common.add_argument("--out", default=None, help="Output directory")
    common.add_argument("-q", "--quiet", action="store_true", help="No progress output")

    parser = argparse.ArgumentParser(prog="tunnelwave", description="Tunnel RSS simulation and super-resolution")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="Run one coarse/fine pair")
    p.add_argument("--shape", default=None, help="Section kind or its 1-based index")
    p.add_argument("--frequency", type=float, default=None, help="Carrier frequency [Hz]")
    p.add_argument("--length", type=float, default=None, help="Tunnel length [m]")

    p = sub.add_parser("dataset", parents=[common], help="Enumerate, simulate and write a manifest")
    p.add_argument("--split", choices=SPLITS, default=None)
    p.add_argument("--length", type=float, default=None, help="Override the preset tunnel length [m]")
    p.add_argument("--limit", type=int, default=None, help="Keep only the first N configurations")
    p.add_argument("--crop", type=int, nargs=2, metavar=("CX", "CY"), default=None, help="Centre crop in coarse cells")
    p.add_argument("--stats-from", default=None, help="Reuse the NormStats of another manifest")

    p = sub.add_parser("train", parents=[common], help="Train PRBPN on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--eval-manifest", default=None)
    p.add_argument("--resume", default=None, help="Checkpoint to resume from")
    p.add_argument("--max-iters", type=int, default=None)

    p = sub.add_parser("eval", parents=[common], help="Per-group metrics of a model on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", choices=SPLITS, default=None)
    p.add_argument("--points", choices=POINT_SETS, default="interior",
                   help="Score every interior cell or only the receiver grid")

    p = sub.add_parser("infer", parents=[common], help="Super-resolve one slice of a coarse volume")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--volume", required=True)
    p.add_argument("--t", type=int, default=0)
    p.add_argument("--stats-from", default=None, help="Manifest whose NormStats normalize a raw volume")

    p = sub.add_parser("plot", parents=[common], help="Heatmap (PGM) or axial curve (CSV) of a volume")
    p.add_argument("--volume", required=True)
    p.add_argument("--kind", choices=("heatmap", "axial"), default="heatmap")
    p.add_argument("--t", type=int, default=0)
    p.add_argument("--rx", type=float, nargs=2, metavar=("X", "Y"), default=None)
    p.add_argument("--png", action="store_true", help="Also write a matplotlib preview")

    sub.add_parser("selfcheck", parents=[common], help="Run the oracle suites")
    return parser


def _shape_arg(value):
    return int(value) if value is not None and value.isdigit() else value


def main(argv=None):
    args = build_parser().parse_args(argv)
    if getattr(args, "shape", None) is not None:
        args.shape = _shape_arg(args.shape)
    try:
        run = load_run_config(args.config, args.preset)
        return COMMANDS[args.command](args, run)
    except FloatingPointError as exc:
        print(f"❌ Numerical breakdown: {exc}", file=sys.stderr)
        return EXIT_CHECK_FAILED
    except ConfigError as exc:
        print(f"❌ Invalid configuration: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FormatError as exc:
        print(f"❌ Bad file: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, FileNotFoundError) as exc:
        print(f"❌ {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
