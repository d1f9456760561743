"""Command line entry point: ``neuralmaps <stage> [--config FILE] [--key value ...]``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import fields

from . import pipeline
from .config import ConfigError, RunConfig, coerce, load_config
from .gradcheck import TOLERANCE, run_all

log = logging.getLogger("neuralmaps")

STAGES = {
    "pretrain-ae": "greedy layer-wise pretraining plus fine-tuning of the autoencoder",
    "pretrain-som": "initialize the map from embeddings and train it with the encoder frozen",
    "train": "joint training of autoencoder and map; writes metrics.csv",
    "project": "map a dataset onto the lattice; writes projection.csv and projection.svg",
    "backproject": "decode every neuron; writes backprojection.pgm",
    "all": "run pretrain-ae, pretrain-som, train, project and backproject in order",
    "show-config": "print the effective configuration",
    "gradcheck": "finite-difference check of every differentiable op",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="neuralmaps", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name, help_text in STAGES.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        if name == "gradcheck":
            p.add_argument("--seed", type=int, default=0)
            continue
        p.add_argument("--config", help="flat 'key = value' file; flags override it")
        if name in ("pretrain-som", "train", "project", "backproject"):
            p.add_argument("--model", help="input model file (default: the previous stage's output in --out)")
        for f in fields(RunConfig):
            p.add_argument(f"--{f.name.replace('_', '-')}", dest=f"cfg_{f.name}", metavar=f.type.upper())
    return parser


def _config(args) -> RunConfig:
    overrides = {}
    for f in fields(RunConfig):
        raw = getattr(args, f"cfg_{f.name}", None)
        if raw is not None:
            overrides[f.name] = coerce(f.name, raw)
    return load_config(args.config, overrides)


def _gradcheck(seed: int) -> int:
    failed = 0
    for name, err in run_all(seed=seed):
        ok = err <= TOLERANCE
        failed += not ok
        print(f"{'PASS' if ok else 'FAIL'} {name:<20} max rel err {err:.3e} (tol {TOLERANCE:.0e})")
    return 1 if failed else 0


def _limit_threads():
    cap = os.environ.get("DNM_THREADS")
    if not cap:
        return None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=int(cap))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    limiter = _limit_threads()
    try:
        if args.command == "gradcheck":
            return _gradcheck(args.seed)
        cfg = _config(args)
        if args.command == "show-config":
            sys.stdout.write(cfg.echo())
            return 0
        model = getattr(args, "model", None)
        if args.command in ("pretrain-ae", "all"):
            print(pipeline.run_pretrain_ae(cfg))
        if args.command in ("pretrain-som", "all"):
            print(pipeline.run_pretrain_som(cfg, model if args.command != "all" else None))
        if args.command in ("train", "all"):
            print(pipeline.run_train(cfg, model if args.command != "all" else None))
        if args.command in ("project", "all"):
            for path in pipeline.run_project(cfg, model if args.command != "all" else None):
                print(path)
        if args.command in ("backproject", "all"):
            print(pipeline.run_backproject(cfg, model if args.command != "all" else None))
        return 0
    except (ConfigError, pipeline.StageOrderError, FileNotFoundError, ValueError, OSError) as exc:
        print(f"neuralmaps {args.command}: error: {exc}", file=sys.stderr)
        return 2
    finally:
        if limiter is not None:
            limiter.restore_original_limits()


if __name__ == "__main__":
    sys.exit(main())
