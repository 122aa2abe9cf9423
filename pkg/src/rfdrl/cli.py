"""Command line: synth, train, eval, classify, swap, resample, export-repr.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from ._io import ConfigError, DataError
from .autodiff import ContractError, NumericError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

FACTOR_ALIASES = {"snr": 0, "mod": 1, "tx": 2, "rff": 2}


def _factor_index(name: str) -> int:
    key = name.strip().lower()
    if key not in FACTOR_ALIASES:
        raise ConfigError(f"unknown factor {name!r}; expected one of snr, mod, tx (rff)")
    return FACTOR_ALIASES[key]


def _train_config(args):
    from .trainer import TrainConfig, resolve_seed

    cfg = TrainConfig.from_file(args.config) if getattr(args, "config", None) else TrainConfig()
    cfg = replace(cfg, seed=resolve_seed(cfg.seed, args.seed))
    if getattr(args, "epochs", None) is not None:
        cfg = replace(cfg, epochs=args.epochs)
    return cfg.validate()


# ---------------------------------------------------------------- subcommands

def cmd_synth(args) -> str:
    from .synthrf import SynthConfig, synth_dataset, write_rfds
    from .trainer import resolve_seed

    cfg = SynthConfig.from_file(args.config) if args.config else SynthConfig()
    cfg = replace(cfg, seed=resolve_seed(cfg.seed, args.seed))
    cfg.validate()
    ds = synth_dataset(cfg)
    write_rfds(args.out, ds)
    return f"synth: {len(ds)} signals, cards {ds.cards}, L={ds.length} -> {args.out}"


def cmd_train(args) -> str:
    from .synthrf import read_rfds
    from .trainer import train

    cfg = _train_config(args)
    for key in ("dataset", "checkpoint", "trace"):
        if getattr(args, key):
            cfg = replace(cfg, **{key: getattr(args, key)})
    if not cfg.dataset:
        raise ConfigError("train needs a dataset (config key 'dataset' or --dataset)")
    if not cfg.checkpoint:
        raise ConfigError("train needs a checkpoint path (config key 'checkpoint' or --checkpoint)")
    res = train(cfg, read_rfds(cfg.dataset))
    first, last = res.trace[0].l_total, res.trace[-1].l_total
    return f"train: {cfg.epochs} epochs, loss {first:.4f} -> {last:.4f}, checkpoint {cfg.checkpoint}"


def cmd_eval(args) -> str:
    from .metrics import evaluate, read_repr, write_report
    from .synthrf import read_rfds
    from .trainer import export_representations, load_trained, resolve_seed

    if args.repr:
        r = read_repr(args.repr)
    elif args.ckpt and args.dataset:
        model, _ = load_trained(args.ckpt)
        r = export_representations(model, read_rfds(args.dataset))
    else:
        raise ConfigError("eval needs --repr, or --ckpt together with --dataset")
    report = evaluate(r, seed=resolve_seed(0, args.seed))
    write_report(args.out, report)
    return f"eval: dcimig {report.dcimig:.4f}, apa {report.apa_mean:.4f} -> {args.out}"


def cmd_export(args) -> str:
    from .metrics import write_repr
    from .synthrf import read_rfds
    from .trainer import export_representations, load_trained

    model, _ = load_trained(args.ckpt)
    r = export_representations(model, read_rfds(args.dataset))
    write_repr(args.out, r)
    return f"export-repr: {r.codes.shape[0]} x {r.codes.shape[1]} codes -> {args.out}"


def cmd_classify(args) -> str:
    from .compare import classify_compare, write_compare
    from .synthrf import read_rfds

    cfg = _train_config(args)
    path = args.dataset or cfg.dataset
    if not path:
        raise ConfigError("classify needs a dataset")
    rows = classify_compare(read_rfds(path), cfg)
    write_compare(args.out, rows)
    return "classify: " + ", ".join(f"{r.variant} {r.average:.4f}" for r in rows) + f" -> {args.out}"


def cmd_swap(args) -> str:
    from . import generate as G
    from .synthrf import read_rfds
    from .trainer import load_trained, resolve_seed

    model, _ = load_trained(args.ckpt)
    ds = read_rfds(args.dataset)
    swapped = {_factor_index(f) for f in args.factors.split(",") if f.strip()}
    if not swapped:
        raise ConfigError("--factors names no factor")
    n = model.config.n_factors
    origin = tuple(G.SOURCE if i in swapped else G.TARGET for i in range(n))
    t_start = args.t_start if args.t_start is not None else G.default_swap_start(model)
    plan = G.SwapPlan(args.src, args.dst, origin, t_start)
    try:
        plan.validate(n, model.schedule.T, len(ds))
    except ContractError as e:
        raise ConfigError(str(e)) from None
    out = G.swap_factors(model, ds.as_real(), [plan], seed=resolve_seed(0, args.seed))
    rfds, manifest = G.write_generated(args.out, out, G.plan_labels(ds.labels, [plan]), ds.cards,
                                       [plan], name="swap")
    return f"swap: 1 signal ({'|'.join(origin)}, t_start={t_start}) -> {rfds}, {manifest}"


def cmd_resample(args) -> str:
    from . import generate as G
    from .synthrf import read_rfds
    from .trainer import load_trained, resolve_seed

    model, _ = load_trained(args.ckpt)
    ds = read_rfds(args.dataset)
    factor = _factor_index(args.factor)
    if not 0 <= args.klass < ds.cards[factor]:
        raise ConfigError(f"--class must be in [0, {ds.cards[factor]})")
    ids = [int(v) for v in args.ids.split(",")]
    if any(not 0 <= i < len(ds) for i in ids):
        raise ConfigError("signal id out of range")
    pool = G.build_code_pool(model, ds)
    out = G.resample_factor(model, ds.as_real()[ids], factor, args.klass, pool,
                            seed=resolve_seed(0, args.seed), t_start=args.t_start)
    labels = ds.labels[ids].copy()
    labels[:, factor] = args.klass
    rfds, manifest = G.write_generated(args.out, out, labels, ds.cards, name="resample")
    return f"resample: {len(ids)} signals, factor {args.factor} -> class {args.klass} -> {rfds}"


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rfdrl", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="store_true", help="print version and build info")
    sub = p.add_subparsers(dest="command")

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train the disentangling model")
    s.add_argument("--config")
    s.add_argument("--dataset")
    s.add_argument("--checkpoint")
    s.add_argument("--trace")
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="compute the metric report")
    s.add_argument("--repr", help="representation CSV from export-repr")
    s.add_argument("--ckpt")
    s.add_argument("--dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("export-repr", help="write factor codes with labels as CSV")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_export)

    s = sub.add_parser("classify", help="compare full, classification-only and separate models")
    s.add_argument("--config")
    s.add_argument("--dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_classify)

    s = sub.add_parser("swap", help="swap factor codes between two signals")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--src", type=int, required=True)
    s.add_argument("--dst", type=int, required=True)
    s.add_argument("--factors", required=True, help="comma list of snr, mod, tx/rff")
    s.add_argument("--t-start", dest="t_start", type=int)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_swap)

    s = sub.add_parser("resample", help="resample one factor code from a class pool")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--factor", required=True)
    s.add_argument("--class", dest="klass", type=int, required=True)
    s.add_argument("--ids", default="0", help="comma list of signal ids")
    s.add_argument("--t-start", dest="t_start", type=int)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_resample)
    return p


def version_string() -> str:
    return f"rfdrl {__version__} (numpy {np.__version__}, float64, python {sys.version.split()[0]})"


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_CONFIG
    if args.version:
        print(version_string())
        return EXIT_OK
    if not args.command:
        parser.print_usage(sys.stderr)
        return EXIT_CONFIG
    try:
        print(args.func(args))
        return EXIT_OK
    except (ConfigError, ContractError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
