"""Command-line entry point: ``bislot <subcommand> [options]``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from ..encoder import ConfigError
from ..synthdata import CLASS_NAMES, SPLITS, save_dataset
from . import experiments as ex
from .config import PRESETS, dump_config, load_config, parse_assignments, preset
from .train import DivergenceError, load_splits

log = logging.getLogger("bislot")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4

SUBCOMMANDS = ("gen-data", "train", "ablate", "sweep-k", "disrupt", "stress", "ground",
               "correspond", "report")

# report order: (csv stem, title)
REPORT_FILES = (("train", "Training runs"), ("ablation", "Ablation matrix"),
                ("k_sweep", "AUC vs number of slots"), ("disruption", "Pairing disruption"),
                ("stress", "Noise stress"), ("grounding", "Optic disc grounding"),
                ("correspondence", "Slot correspondence"))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--preset", choices=sorted(PRESETS), default="desk",
                        help="base hyperparameter set (default: desk)")
    common.add_argument("--config", type=Path, help="key=value file applied over the preset")
    common.add_argument("--set", dest="assignments", action="append", default=[],
                        metavar="KEY=VALUE", help="override one config field (repeatable)")
    common.add_argument("--seed-list", help="comma-separated training seeds, e.g. 0,1,2")
    common.add_argument("--out-dir", type=Path, default=Path("results"))
    common.add_argument("--workers", type=int, help="parallel training jobs")
    common.add_argument("--pretrain-epochs", type=int,
                        help="reconstruction-only slot pretraining epochs before training")
    common.add_argument("--no-plots", action="store_true", help="skip SVG figures")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="bislot", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    helps = {"gen-data": "generate and save the synthetic dataset",
             "train": "train the configured variant on every seed",
             "ablate": "train all ablation variants and compare to the full model",
             "sweep-k": "AUC as a function of the number of slots",
             "disrupt": "pairing disruption (eval-time and train-time shuffles)",
             "stress": "AUC under additive Gaussian pixel noise",
             "ground": "zero-shot optic disc grounding of slot masks",
             "correspond": "cross-eye slot correspondence structure",
             "report": "collect existing CSVs in --out-dir into one text report"}
    for name in SUBCOMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return p


def resolve_config(args):
    cfg = preset(args.preset)
    if args.config is not None:
        cfg = load_config(args.config, cfg)
    if args.assignments:
        cfg = parse_assignments(args.assignments, cfg)
    changes = {}
    if args.seed_list:
        try:
            changes["seeds"] = [int(s) for s in args.seed_list.split(",") if s.strip()]
        except ValueError as exc:
            raise ConfigError(f"bad --seed-list {args.seed_list!r}") from exc
    if args.workers is not None:
        changes["workers"] = args.workers
    if args.pretrain_epochs is not None:
        changes["pretrain_epochs"] = args.pretrain_epochs
    cfg = cfg.replace(**changes) if changes else cfg
    if cfg.workers < 1:
        raise ConfigError("workers must be >= 1")
    return cfg


def _emit(out: Path, stem: str, title: str, rows, columns=None, extra=None) -> None:
    ex.write_csv(out / f"{stem}.csv", rows, columns)
    text = f"{title}\n\n" + ex.format_table(rows, columns)
    if extra:
        ex.write_csv(out / f"{stem}_{extra[0]}.csv", extra[1], extra[2] if len(extra) > 2 else None)
    (out / f"{stem}.txt").write_text(text)
    print(text)


def _plot(args, fn, *a) -> None:
    if args.no_plots:
        return
    try:
        fn(*a)
    except ImportError:
        log.warning("matplotlib not installed; skipping figure")


def cmd_gen_data(cfg, args, out: Path) -> None:
    spec = cfg.dataset_spec()
    splits = load_splits(cfg)
    save_dataset(out / "dataset.bslt", spec, splits)
    rows = []
    for split in SPLITS:
        d = splits[split]
        row = {"split": split, "n": len(d)}
        for c, name in enumerate(CLASS_NAMES):
            row[f"prevalence_{name}"] = float(np.mean(d.labels[:, c]))
        rows.append(row)
    _emit(out, "dataset", f"Synthetic dataset (hash {cfg.dataset_hash()})", rows)


def cmd_train(cfg, args, out: Path, runner: ex.Runner) -> None:
    runs = runner.run_many([(cfg.variant, s) for s in sorted(cfg.seeds)])
    curves = [{"variant": r.variant, "seed": r.seed, **rec} for r in runs for rec in r.curve]
    _emit(out, "train", f"Training runs ({cfg.variant})", [r.row() for r in runs],
          extra=("curves", curves, ["variant", "seed", "epoch", "loss", "cls", "recon",
                                    "val_auc"]))


def cmd_ablate(cfg, args, out, runner) -> None:
    summary, per_seed = ex.ablation(runner)
    _emit(out, "ablation", "Ablation matrix (test macro AUC over seeds)", summary,
          ex.ABLATION_COLUMNS, extra=("seeds", per_seed, ex.SEED_COLUMNS))


def cmd_sweep_k(cfg, args, out, runner) -> None:
    curve, per_seed = ex.k_sweep(runner)
    _emit(out, "k_sweep", "Test macro AUC vs K", curve, ["K", "mean", "std", "n"],
          extra=("seeds", per_seed))
    from .plots import plot_k_sweep
    _plot(args, plot_k_sweep, curve, out / "k_sweep.svg")


def cmd_disrupt(cfg, args, out, runner) -> None:
    summary, per_seed = ex.disruption(runner)
    _emit(out, "disruption", "Pairing disruption (AUC drops)", summary,
          extra=("seeds", per_seed))


def cmd_stress(cfg, args, out, runner) -> None:
    summary, per_seed = ex.stress(runner)
    _emit(out, "stress", "Gaussian noise stress", summary, extra=("seeds", per_seed))
    from .plots import plot_stress
    _plot(args, plot_stress, summary, out / "stress.svg")


def cmd_ground(cfg, args, out, runner) -> None:
    rows = ex.grounding(runner)
    _emit(out, "grounding", "Optic disc grounding (best slot chosen post hoc)", rows,
          ex.GROUNDING_COLUMNS)


def cmd_correspond(cfg, args, out, runner) -> None:
    rows, slot_rows, mats = ex.correspondence(runner)
    _emit(out, "correspondence", "Cross-eye slot correspondence", rows,
          ex.CORRESPONDENCE_COLUMNS, extra=("slots", slot_rows))
    from .plots import plot_correspondence
    first = min(mats)
    _plot(args, plot_correspondence, mats[first], out / f"correspondence_seed{first}.svg")


def cmd_report(cfg, args, out: Path) -> None:
    parts = []
    for stem, _title in REPORT_FILES:
        p = out / f"{stem}.txt"
        if p.exists():
            parts.append(p.read_text())
    if not parts:
        raise FileNotFoundError(f"no experiment outputs found in {out}")
    text = "\n".join(parts)
    (out / "report.txt").write_text(text)
    print(text)


HANDLERS = {"train": cmd_train, "ablate": cmd_ablate, "sweep-k": cmd_sweep_k,
            "disrupt": cmd_disrupt, "stress": cmd_stress, "ground": cmd_ground,
            "correspond": cmd_correspond}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = resolve_config(args)
        out = args.out_dir
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "report":
            cmd_report(cfg, args, out)
            return EXIT_OK
        (out / "config.txt").write_text(dump_config(cfg))
        if args.command == "gen-data":
            cmd_gen_data(cfg, args, out)
        else:
            runner = ex.Runner(cfg, cache_dir=out / "runs")
            HANDLERS[args.command](cfg, args, out, runner)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"training diverged: {exc} {exc.record}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
