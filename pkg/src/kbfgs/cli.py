"""Command-line entry point: ``kbfgs run|grid|verify|export-mnist``."""

import argparse
import logging
import sys
from pathlib import Path

from . import bench, verification
from .data import export_mnist_subset
from .errors import KbfgsError


def _load(args):
    cfg = bench.parse_config(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["out_dir"] = args.out
    if args.epochs is not None:
        changes["epochs"] = args.epochs
    return cfg.replace(**changes) if changes else cfg


def cmd_run(args):
    cfg = _load(args)
    seeds = args.seeds if args.seeds else [cfg.seed]
    status = 0
    for seed in seeds:
        run_cfg = cfg.replace(seed=seed)
        name = "metrics.csv" if len(seeds) == 1 else f"metrics_seed{seed}.csv"
        res = bench.run_experiment(run_cfg, csv_name=name)
        final = res.final_loss
        print(f"seed {seed}: initial loss {res.initial_loss:.6g}, final loss {final:.6g} -> {res.csv_path}")
        if res.diverged:
            print(f"seed {seed}: diverged: {res.error}", file=sys.stderr)
            status = 1
    return status


def cmd_grid(args):
    cfg = _load(args)
    rows, path = bench.run_grid(cfg, workers=args.workers)
    for r in rows:
        flag = "  <- best" if r["best"] else ""
        print(f"alpha={r['alpha']:g} damping={r['damping']} min_loss={r['min_train_loss']:.6g}{flag}")
    print(f"summary -> {path}")
    return 0


def cmd_verify(args):
    out = Path(args.out or "verify") / "verify_summary.csv"
    reports = verification.run_all(out, names=args.suite)
    ok = True
    for rep in reports.values():
        ok &= rep.passed
        print(f"{'PASS' if rep.passed else 'FAIL'} {rep.name}: trials={rep.trials} "
              f"failures={rep.failures} max_rel_err={rep.max_rel_err:.3g} ({rep.seconds:.2f}s)")
    print(f"summary -> {out}")
    return 0 if ok else 1


def cmd_export(args):
    images, labels = export_mnist_subset(args.out or ".")
    print(images)
    print(labels)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="kbfgs", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="INI experiment config")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--epochs", type=int)

    p = sub.add_parser("run", help="train one configuration")
    common(p)
    p.add_argument("--seeds", type=int, nargs="+", help="repeat the run for each seed")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("grid", help="grid search over (alpha, damping)")
    common(p)
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("verify", help="run the oracle suites")
    p.add_argument("--out", help="output directory")
    p.add_argument("--suite", action="append", choices=sorted(verification.SUITES))
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("export-mnist", help="write the bundled 5,000-image MNIST sample as IDX")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except KbfgsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
