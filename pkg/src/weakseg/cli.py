"""Command-line entry point: ``weakseg <command> ...`` or ``python -m weakseg``.

Every command exits 0 on success. On failure it prints a single line
``error: <kind>: <message>`` to stderr and exits with status 2.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data, experiments, segnet, trainer, weak_labels
from .trainer import TrainConfig


class CommandError(Exception):
    pass


def _config(path: str | None) -> TrainConfig:
    return TrainConfig() if path is None else TrainConfig.from_json(path)


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise CommandError(f"output directory {out} is not empty (use --force to overwrite)")
    params = data.GeneratorParams(
        train_n=args.train_n,
        val_n=args.val_n,
        size=args.size,
        absent_frac=args.absent_frac,
        slices_per_volume=args.slices_per_volume,
    )
    ds = data.generate_dataset(params, args.seed)
    print(data.save_dataset(ds, out))
    return 0


def cmd_weaken(args) -> int:
    ds = data.load_dataset(args.data)
    warnings = data.weaken(ds, args.strategy, args.seed)
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    data.save_dataset(ds, args.data)
    weak = [s.weak for s in ds.samples]
    labeled = [int((w > 0).sum()) for w, s in zip(weak, ds.samples) if s.present]
    frac = weak_labels.labeled_fraction(weak)
    print(f"strategy={args.strategy} seed={args.seed} samples={len(ds.samples)} tag_only={len(warnings)}")
    print(f"labeled_fraction={frac:.6f} ({100 * frac:.4f}% of all pixels)")
    print(f"labeled_pixels_per_present_image min={min(labeled)} median={np.median(labeled):g} max={max(labeled)}")
    return 0


def _log_epoch(rec: trainer.MetricsRecord) -> None:
    print(
        f"epoch {rec.epoch:4d} ce {rec.loss_ce:.4f} pen {rec.loss_penalty:.4f} "
        f"val_dice {rec.val_dice:.4f} viol {rec.violation_rate:.3f} "
        f"{rec.ms_per_batch:.1f} ms/batch lr {rec.lr:.3g}",
        flush=True,
    )


def cmd_train(args) -> int:
    config = _config(args.config)
    if args.epochs is not None:
        config = replace(config, epochs=args.epochs)
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    ds = data.load_dataset(args.data)
    res = trainer.train(config, ds, args.out, log=None if args.quiet else _log_epoch)
    last = res.records[-1].val_dice if res.records else float("nan")
    print(f"best_val_dice={res.best_dice!r} best_epoch={res.best_epoch} last_val_dice={last!r} out={args.out}")
    return 0


def cmd_eval(args) -> int:
    params = segnet.load_checkpoint(args.ckpt)
    ds = data.load_dataset(args.data)
    ev = trainer.evaluate(params, ds, args.split)
    print(f"split={args.split} n={len(ev.per_sample)} mean_dice={ev.mean_dice!r} mean_dice_3d={ev.mean_dice_3d!r}")
    if args.per_sample:
        for s, d in zip(ds.split(args.split), ev.per_sample):
            print(f"{s.id},{d!r}")
    return 0


_BENCH_LABELS = {
    "partial_ce": "Partial CE",
    "penalty": "Direct loss (1 bound)",
    "lagrangian": "Lagrangian proposals w/ early stop",
    "lagrangian_noes": "Lagrangian proposals w/o early stop",
    "full": "Full supervision",
}


def bench_config(mode: str, base: TrainConfig) -> tuple[str, TrainConfig]:
    if mode == "lagrangian_noes":
        return "lagrangian", replace(base, lagrangian=replace(base.lagrangian, early_stop=False))
    if mode not in trainer.MODES:
        raise CommandError(f"unknown benchmark mode {mode!r}")
    return mode, base


def cmd_bench(args) -> int:
    base = _config(args.config)
    if args.batch_size is not None:
        base = replace(base, batch_size=args.batch_size)
    ds = data.load_dataset(args.data)
    print(f"{'Method':40s} {'ms/batch':>10s}")
    for mode in args.modes.split(","):
        real, cfg = bench_config(mode.strip(), base)
        ms = trainer.benchmark_step_time(real, cfg, ds, args.batches, args.warmup)
        print(f"{_BENCH_LABELS.get(mode.strip(), mode):40s} {ms:10.1f}", flush=True)
    return 0


def cmd_sweep_bounds(args) -> int:
    ds = data.load_dataset(args.data)
    base = _config(args.config)
    if args.epochs is not None:
        base = replace(base, epochs=args.epochs)
    seeds = [int(s) for s in args.seeds.split(",")]
    runs = experiments.sweep_configs(ds, args.lowers.split(","), args.uppers.split(","), base)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    print(f"{'lower':>10s} {'upper':>10s} {'a':>10s} {'b':>10s} {'mean_dice':>10s}")
    for lo, up, cfg in runs:
        dices = []
        for seed in seeds:
            res = trainer.train(replace(cfg, seed=seed), ds)
            dices.append(res.best_dice)
        m = float(np.mean(dices))
        rows.append((lo, up, cfg.bounds.lower, cfg.bounds.upper, m, *dices))
        print(f"{lo:>10s} {up:>10s} {cfg.bounds.lower:10.1f} {cfg.bounds.upper:10.1f} {m:10.4f}", flush=True)
    header = ["lower", "upper", "a", "b", "mean_dice"] + [f"seed{s}" for s in seeds]
    experiments.write_table(out / "sweep.csv", header, rows)
    (out / "sweep.gp").write_text(
        "set datafile separator ','\n"
        "set style data histogram\nset style fill solid\n"
        "set ylabel 'mean Dice'\nset yrange [0:1]\n"
        "set terminal pngcairo size 800,500\nset output 'sweep.png'\n"
        "plot 'sweep.csv' using 5:xtic(stringcolumn(1).'/'.stringcolumn(2)) title 'mean Dice'\n"
    )
    print(out / "sweep.csv")
    return 0


def _sweep_runs(corpus: experiments.CorpusSpec, sweep: dict) -> list[tuple[str, TrainConfig]]:
    base = TrainConfig.from_dict(sweep.get("config", {}))
    ds = experiments.corpus(corpus)
    runs = experiments.sweep_configs(ds, sweep.get("lowers", ["tight"]), sweep.get("uppers", ["tight"]), base)
    return [(f"lower_{lo}_upper_{up}", cfg) for lo, up, cfg in runs]


def _run_bench(corpus: experiments.CorpusSpec, bench: dict, out: Path) -> None:
    ds = experiments.corpus(corpus)
    base = TrainConfig.from_dict(bench.get("config", {}))
    rows = []
    print(f"{'Method':40s} {'ms/batch':>10s}")
    for mode in bench.get("modes", list(_BENCH_LABELS)):
        real, cfg = bench_config(mode, base)
        ms = trainer.benchmark_step_time(real, cfg, ds, bench.get("batches", 100), bench.get("warmup", 5))
        rows.append((_BENCH_LABELS.get(mode, mode), ms))
        print(f"{rows[-1][0]:40s} {ms:10.1f}", flush=True)
    experiments.write_table(out / "bench.csv", ["method", "ms_per_batch"], rows)


def cmd_run(args) -> int:
    spec = json.loads(Path(args.spec).read_text())
    corpus = experiments.CorpusSpec.from_dict(spec.get("corpus", {}))
    out = Path(args.out or spec.get("output", "results"))
    out.mkdir(parents=True, exist_ok=True)
    named = [(r.get("name"), r.get("config", {})) for r in spec.get("runs", [])]
    runs = [(name, TrainConfig.from_dict(cfg)) for name, cfg in named]
    if "sweep" in spec:
        runs += _sweep_runs(corpus, spec["sweep"])
    if not runs and "bench" not in spec:
        raise CommandError("runs: spec needs at least one of runs, sweep or bench")
    names = [name for name, _ in runs]
    if len(set(names)) != len(names) or None in names:
        raise CommandError("runs: every run needs a unique name")
    if "bench" in spec:
        _run_bench(corpus, spec["bench"], out)
    if not runs:
        return 0
    seeds = spec.get("seeds", [0])
    results = []
    rows = []
    for name, base in runs:
        if args.epochs is not None:
            base = replace(base, epochs=args.epochs)
        per_seed = []
        for seed in seeds:
            res = experiments.run(f"{name}_s{seed}", replace(base, seed=seed), corpus, args.cache)
            per_seed.append(res)
            results.append(res)
        m = float(np.mean([x.best_dice for x in per_seed]))
        rows.append((name, m, *[x.best_dice for x in per_seed]))
        print(f"{name:24s} mean_best_dice {m:.4f}", flush=True)
    experiments.write_table(out / "table.csv", ["run", "mean_dice"] + [f"seed{s}" for s in seeds], rows)
    experiments.write_curves(out, results, spec.get("title", "validation Dice"))
    print(out / "table.csv")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="weakseg", description="Size-constrained weakly supervised segmentation.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--train-n", type=int, default=200)
    g.add_argument("--val-n", type=int, default=50)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--absent-frac", type=float, default=0.2)
    g.add_argument("--slices-per-volume", type=int, default=5)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    w = sub.add_parser("weaken", help="derive weak labels from the full masks")
    w.add_argument("--data", required=True)
    w.add_argument("--strategy", choices=["erosion", "point"], default="erosion")
    w.add_argument("--seed", type=int, default=0)
    w.set_defaults(func=cmd_weaken)

    t = sub.add_parser("train", help="train one model")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="val", choices=["train", "val"])
    e.add_argument("--per-sample", action="store_true")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="time training steps per mode")
    b.add_argument("--data", required=True)
    b.add_argument("--modes", default="partial_ce,penalty,lagrangian,lagrangian_noes")
    b.add_argument("--config")
    b.add_argument("--batches", type=int, default=100)
    b.add_argument("--warmup", type=int, default=5)
    b.add_argument("--batch-size", type=int)
    b.set_defaults(func=cmd_bench)

    s = sub.add_parser("sweep-bounds", help="penalty training over (lower, upper) pairs")
    s.add_argument("--data", required=True)
    s.add_argument("--lowers", default="tight")
    s.add_argument("--uppers", default="tight,5x,10x")
    s.add_argument("--seeds", default="0,1,2")
    s.add_argument("--config")
    s.add_argument("--epochs", type=int)
    s.add_argument("--out", default="sweep")
    s.set_defaults(func=cmd_sweep_bounds)

    r = sub.add_parser("run", help="run an experiment spec (see experiments/paper-tables)")
    r.add_argument("--spec", required=True)
    r.add_argument("--out")
    r.add_argument("--epochs", type=int)
    r.add_argument("--cache")
    r.set_defaults(func=cmd_run)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # one machine-parseable line, no traceback
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
