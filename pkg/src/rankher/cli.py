"""``rankher`` command line: run, compare, plot, datagen, train-ranker, describe."""

import argparse
import json
import logging
import os
import sys

from .bench import (ExperimentConfig, LearningCurve, compare_variants, emit_report, read_curves_csv,
                    run_training, speedup_report)
from .datagen import DatasetError, DatasetManifest, RankerTraining, generate_dataset, train_ranker
from .ddpg import TrainingAbort
from .envs import make_env
from .nn import ConfigError, load_checkpoint, save_checkpoint

EXIT_OK, EXIT_CONFIG, EXIT_ABORT = 0, 2, 3


def _load_config(path):
    try:
        return ExperimentConfig.from_json(path)
    except (OSError, json.JSONDecodeError, TypeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None


def _write_config(cfg, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _print_report(report):
    for name, row in report.items():
        if row["failed"]:
            print(f"{name}: FAILED ({row['failed']})")
            continue
        e = row["epochs_to_threshold"]
        print(f"{name}: epochs_to_threshold={e if e is not None else 'never'} "
              f"speedup_vs_{row['baseline']}={row['speedup']:.3f}")


def _parse_seeds(text, cfg):
    if text is None:
        return list(cfg.seeds)
    if "," in text:
        return [int(s) for s in text.split(",") if s]
    n = int(text)
    if n < 1:
        raise ConfigError("--seeds must be >= 1")
    return list(range(n))


def cmd_run(args):
    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg.seeds = [args.seed]
    _write_config(cfg, args.out)
    if cfg.epochs == 0:
        print("epochs=0: nothing to run")
        return EXIT_OK
    raw = [run_training(cfg, s, os.path.join(args.out, cfg.variant)).success_rates for s in cfg.seeds]
    curves = {cfg.variant: LearningCurve(cfg.variant, list(cfg.seeds), raw)}
    paths = emit_report(curves, args.out, figure=not args.no_figure)
    _print_report(speedup_report(curves, cfg.success_threshold, cfg.hold_epochs))
    for key, path in paths.items():
        print(f"wrote {key}: {path}")
    return EXIT_OK


def cmd_compare(args):
    cfg = _load_config(args.config)
    seeds = _parse_seeds(args.seeds, cfg)
    variants = [v for v in args.variants.split(",") if v]
    cfg.seeds = seeds
    _write_config(cfg, args.out)
    curves, report = compare_variants(cfg, variants, seeds, args.out)
    if all(c.failed for c in curves.values()):
        _print_report(report or {k: {"failed": c.failed} for k, c in curves.items()})
        return EXIT_ABORT
    paths = emit_report({k: c for k, c in curves.items() if c.failed is None}, args.out,
                        figure=not args.no_figure)
    with open(os.path.join(args.out, "report.json"), "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _print_report(report)
    for key, path in paths.items():
        print(f"wrote {key}: {path}")
    return EXIT_OK


def cmd_plot(args):
    from .plotting import curves_svg, plot_curves

    curves = read_curves_csv(args.inp)
    if not curves:
        raise ConfigError(f"{args.inp} holds no curves")
    out = args.out
    if out.endswith(".svg"):
        with open(out, "w") as fh:
            fh.write(curves_svg(curves))
    else:
        plot_curves(curves, out)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_datagen(args):
    env = make_env(args.env)
    manifest = generate_dataset(args.log, env, args.out, seed=args.seed, size=args.size)
    print(f"wrote {len(manifest.images)} images to {args.out}; group counts {manifest.counts}")
    return EXIT_OK


def cmd_train_ranker(args):
    manifest = DatasetManifest.load(args.manifest)
    hyper = RankerTraining(batch_size=args.batch, epochs=args.epochs, lr=args.lr, seed=args.seed,
                           samples_per_epoch=args.samples_per_epoch)
    net, report = train_ranker(manifest, args.preset, hyper)
    out = args.out or os.path.join(manifest.root, f"ranker_{args.preset}.rkhn")
    save_checkpoint(net, out)
    report.write_csv(os.path.splitext(out)[0] + "_training.csv")
    print(f"best epoch {report.best_epoch}: val_acc={report.val_accuracy:.4f} "
          f"test_acc={report.test_accuracy:.4f}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_describe(args):
    print(load_checkpoint(args.checkpoint).describe())
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="rankher", description="Ranked hindsight experience replay toolkit")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("run", help="train one variant over the config's seeds")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, help="override the config's seed list with one seed")
    s.add_argument("--no-figure", action="store_true", help="skip the PNG figure")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("compare", help="run several variants on paired seeds")
    s.add_argument("--config", required=True)
    s.add_argument("--variants", default="her,er-oracle")
    s.add_argument("--seeds", help="seed count N (seeds 0..N-1) or a comma list")
    s.add_argument("--out", required=True)
    s.add_argument("--no-figure", action="store_true")
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("plot", help="render curves.csv as SVG (or PNG by extension)")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_plot)

    s = sub.add_parser("datagen", help="render labeled terminal images from episode logs")
    s.add_argument("--log", required=True, nargs="+")
    s.add_argument("--env", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--size", type=int, default=32)
    s.set_defaults(func=cmd_datagen)

    s = sub.add_parser("train-ranker", help="train the ranking CNN on a generated dataset")
    s.add_argument("--manifest", required=True)
    s.add_argument("--preset", choices=("desk", "paper"), default="desk")
    s.add_argument("--epochs", type=int, default=500)
    s.add_argument("--lr", type=float, default=0.001)
    s.add_argument("--batch", type=int, default=16)
    s.add_argument("--samples-per-epoch", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", help="checkpoint path (default: next to the manifest)")
    s.set_defaults(func=cmd_train_ranker)

    s = sub.add_parser("describe", help="print the layer table of a checkpoint")
    s.add_argument("checkpoint")
    s.set_defaults(func=cmd_describe)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except TrainingAbort as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except (ConfigError, DatasetError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
