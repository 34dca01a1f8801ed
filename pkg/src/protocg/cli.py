"""Command-line front door: synth | train | eval | export | gradcheck.

Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from .data import generate_synthetic, load_dataset, write_synthetic
from .errors import (CheckpointError, ConfigError, DataFormatError,
                     ParameterError, ProtocgError, TrainingDiverged)
from .evaluate import build_index, evaluate_model, export_embeddings
from .gradcheck import run_all
from .training import (config_hash, load_checkpoint, load_config, stream_rng,
                       train)

log = logging.getLogger("protocg")

USAGE_ERROR = 2
RUNTIME_ERROR = 1


def _parse_tiers(text: str):
    tiers = []
    for part in text.split(","):
        name, _, count = part.partition(":")
        if not name.strip() or not count.strip():
            raise ParameterError(
                f"tier spec {part!r} must look like name:count")
        try:
            tiers.append((name.strip(), int(count)))
        except ValueError:
            raise ParameterError(f"tier count {count!r} is not an integer") \
                from None
    return tiers


def cmd_synth(args) -> int:
    tiers = _parse_tiers(args.tiers)
    rng = stream_rng(args.seed, "data")
    interactions, item_cats, user_truth = generate_synthetic(
        args.users, args.items, args.categories, tiers, rng)
    try:
        paths = write_synthetic(args.out, interactions, item_cats, user_truth,
                                overwrite=args.overwrite)
    except FileExistsError as exc:
        print(f"error: {exc} (use --overwrite)", file=sys.stderr)
        return RUNTIME_ERROR
    print(f"{'dataset':<14}{args.out}")
    print(f"{'# users':<14}{args.users}")
    print(f"{'# items':<14}{args.items}")
    print(f"{'# interactions':<14}{len(interactions)}")
    for key, path in paths.items():
        print(f"{key:<14}{path}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    _, vocab, split = load_dataset(args.data, cfg.n_max)
    resume = None
    if args.resume:
        resume = load_checkpoint(args.resume)
        if config_hash(resume.config) != config_hash(cfg):
            if not args.force:
                print("warning: checkpoint config hash differs from --config; "
                      "refusing to resume without --force", file=sys.stderr)
                return USAGE_ERROR
            log.warning("resuming across a config hash mismatch (--force)")
            resume.config = cfg
    state, _ = train(cfg, split, vocab, out_dir=args.out, resume=resume)
    print(f"trained {state.epoch} epoch(s); checkpoint in {args.out}")
    return 0


def cmd_eval(args) -> int:
    state = load_checkpoint(args.checkpoint)
    _, vocab, split = load_dataset(args.data, state.config.n_max)
    if vocab.n_items != state.params.n_items:
        print(f"error: checkpoint was trained on {state.params.n_items} items "
              f"but --data has {vocab.n_items}", file=sys.stderr)
        return RUNTIME_ERROR
    ns = tuple(int(n) for n in args.n.split(","))
    report = evaluate_model(state.params, state.config, split, args.seed,
                            ns=ns, ainpu_all_users=args.ainpu_all_users)
    text = report.to_json()
    print(text)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    return 0


def cmd_export(args) -> int:
    state = load_checkpoint(args.checkpoint)
    _, vocab, _ = load_dataset(args.data, state.config.n_max)
    if vocab.n_items != state.params.n_items:
        print(f"error: checkpoint was trained on {state.params.n_items} items "
              f"but --data has {vocab.n_items}", file=sys.stderr)
        return RUNTIME_ERROR
    export_embeddings(build_index(state.params), vocab, args.out)
    print(f"wrote {vocab.n_items} embeddings to {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_all(args.seed, instances=args.instances)
    failures = 0
    for res in results:
        verdict = "ok  " if res.passed else "FAIL"
        print(f"{verdict} {res.name:<28} max_rel_err={res.max_err:.3e} "
              f"tol={res.tol:.0e}")
        failures += not res.passed
    print(f"{len(results) - failures}/{len(results)} gradient checks passed")
    return 0 if failures == 0 else RUNTIME_ERROR


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="protocg",
        description="Adaptive-interest two-tower candidate generation with "
                    "prototypical contrastive regularization.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a planted-structure dataset")
    p.add_argument("--users", type=int, required=True)
    p.add_argument("--items", type=int, required=True)
    p.add_argument("--categories", type=int, required=True)
    p.add_argument("--tiers", default="low:5,mid:20,high:60",
                   help="comma list of name:count activeness tiers")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train from a config and interactions file")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True, help="interactions CSV/JSONL")
    p.add_argument("--out", required=True, help="checkpoint/log directory")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--force", action="store_true",
                   help="resume even if the config hash differs")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="compute HR/NDCG/AINPU for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--n", default="10,20", help="comma list of cutoffs")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="also write the report JSON here")
    p.add_argument("--ainpu-all-users", action="store_true",
                   help="average K_u over all users instead of test users")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("export", help="dump item embeddings to CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_export)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=100,
                   help="random instances per primitive")
    p.set_defaults(fn=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except (ConfigError, ParameterError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (CheckpointError, DataFormatError, TrainingDiverged,
            ProtocgError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
