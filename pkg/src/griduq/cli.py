"""Command line entry point.

Subcommands: gen, train, eval, rank, series, extrapolate. The
GRIDUQ_THREADS environment variable caps seed-level parallelism during
training; --deterministic forces a single worker for bitwise-identical
reruns. Everything downstream of training is single-threaded and
deterministic by construction.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import data, export, metrics, train
from .errors import GridUQError


def _parse_int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="griduq",
        description="Uncertainty-aware emulation of gridded surface-ozone bias")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a synthetic dataset directory")
    gen.add_argument("--region", choices=("na", "eu", "synth"), required=True)
    gen.add_argument("--days", type=int, required=True)
    gen.add_argument("--channels", type=int, choices=(28, 51), default=28)
    gen.add_argument("--noise", default="homo:3.0", help="homo:SIGMA or hetero")
    gen.add_argument("--density", type=float, default=0.05)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)
    gen.add_argument("--height", type=int, default=None, help="synth region rows")
    gen.add_argument("--width", type=int, default=None, help="synth region cols")

    tr = sub.add_parser("train", help="train one model per seed")
    tr.add_argument("--data", required=True)
    tr.add_argument("--uq", choices=(train.UQ_MCD, train.UQ_CQR), required=True)
    tr.add_argument("--epochs", type=int, default=200)
    tr.add_argument("--lr", type=float, default=1e-3)
    tr.add_argument("--dropout", type=float, default=0.1)
    tr.add_argument("--batch", type=int, default=8)
    tr.add_argument("--seeds", type=_parse_int_list, default=(0, 1, 2, 3, 4))
    tr.add_argument("--alpha", type=float, default=0.1)
    tr.add_argument("--out", required=True)
    tr.add_argument("--base-width", type=int, default=32)
    tr.add_argument("--depth", type=int, default=3)
    tr.add_argument("--t-passes", type=int, default=30)
    tr.add_argument("--deterministic", action="store_true",
                    help="single-threaded, bitwise-reproducible run")

    ev = sub.add_parser("eval", help="score runs on their held-out days")
    ev.add_argument("--data", required=True)
    ev.add_argument("--runs", required=True)
    ev.add_argument("--out", required=True)

    rk = sub.add_parser("rank", help="rank station cells by mean UQ score")
    rk.add_argument("--data", required=True)
    rk.add_argument("--runs", required=True)
    rk.add_argument("--top", type=int, required=True)
    rk.add_argument("--out", required=True)

    se = sub.add_parser("series", help="observed vs predicted band at a station")
    se.add_argument("--data", required=True)
    se.add_argument("--runs", required=True)
    se.add_argument("--lat", type=float, required=True)
    se.add_argument("--lon", type=float, required=True)
    se.add_argument("--out", required=True)

    ex = sub.add_parser("extrapolate", help="full-grid UQ maps for selected days")
    ex.add_argument("--data", required=True)
    ex.add_argument("--runs", required=True)
    ex.add_argument("--days", type=_parse_int_list, required=True,
                    help="1-based indices into the held-out days, e.g. 1,7,15,21,30")
    ex.add_argument("--out", required=True)
    return parser


def _cmd_gen(args) -> int:
    if args.region == "na":
        spec = data.region_north_america()
    elif args.region == "eu":
        spec = data.region_europe()
    else:
        spec = data.region_synthetic(args.height or 31, args.width or 49)
    if args.region != "synth" and (args.height or args.width):
        raise GridUQError("--height/--width only apply to --region synth")
    noise = data.NoiseProfile.parse(args.noise)
    samples, _ = data.generate_synthetic(spec, args.days, args.channels, noise,
                                         args.density, args.seed)
    data.write_dataset(samples, spec, args.out)
    n_stations = int(samples[0].mask.sum())
    print(f"wrote {len(samples)} days of {spec.h}x{spec.w}x{args.channels} "
          f"({n_stations} stations) to {args.out}")
    return 0


def _cmd_train(args) -> int:
    samples, _ = data.read_dataset(args.data)
    config = train.TrainConfig(
        uq_method=args.uq, epochs=args.epochs, lr=args.lr, dropout_rate=args.dropout,
        batch_size=args.batch, seeds=args.seeds, alpha=args.alpha,
        base_width=args.base_width, depth=args.depth, t_passes=args.t_passes)
    records, aggregate, failures = train.train_all_seeds(
        config, samples, args.out, deterministic=args.deterministic)
    for rec in records:
        print(f"seed {rec.seed}: best_val_loss={rec.best_val_loss:.6g} "
              f"(epoch {rec.best_epoch}), {rec.wall_time_s:.1f}s")
    if records:
        print(f"val loss mean={aggregate['val_loss_mean']:.6g} "
              f"variance={aggregate['val_loss_variance']:.6g} over {aggregate['n_seeds']} seeds")
    for seed, msg in failures:
        print(f"seed {seed} FAILED: {msg}", file=sys.stderr)
    return 1 if failures else 0


def _cmd_eval(args) -> int:
    samples, spec = data.read_dataset(args.data)
    report = metrics.evaluate_runs(samples, spec, args.runs)
    export.write_report(report, args.out)
    print(f"wrote report to {args.out} (rmse_mean={report.rmse_mean:.6g})")
    return 0


def _cmd_rank(args) -> int:
    if args.top < 1:
        raise GridUQError("--top must be >= 1")
    samples, spec = data.read_dataset(args.data)
    rows = metrics.rank_for_runs(samples, spec, args.runs)[:args.top]
    export.write_ranks_csv(rows, args.out)
    print(f"wrote top {len(rows)} stations to {args.out}")
    return 0


def _cmd_series(args) -> int:
    samples, spec = data.read_dataset(args.data)
    (row, col), rows = metrics.series_for_runs(samples, spec, args.runs, args.lat, args.lon)
    export.write_series_csv(rows, args.out)
    print(f"wrote {len(rows)} rows for cell ({row}, {col}) to {args.out}")
    return 0


def _cmd_extrapolate(args) -> int:
    samples, spec = data.read_dataset(args.data)
    maps = metrics.extrapolate_for_runs(samples, spec, args.runs, args.days)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for day, date, grid in maps:
        stem = out / f"uq_day{day:02d}"
        export.write_heatmap(grid, stem.with_suffix(".ppm"))
        export.write_grid_csv(grid, spec, stem.with_suffix(".csv"))
        print(f"day {day} ({date.isoformat()}): {stem}.ppm, {stem}.csv")
    return 0


_HANDLERS = {
    "gen": _cmd_gen,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "rank": _cmd_rank,
    "series": _cmd_series,
    "extrapolate": _cmd_extrapolate,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except GridUQError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
