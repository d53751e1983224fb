"""Command-line entry point: one subcommand per pipeline stage."""

from __future__ import annotations

import argparse
import json
import sys

from . import pipeline
from .config import load_config
from .store import Workdir


def _common(sub):
    sub.add_argument("--workdir", required=True, help="pipeline artifact directory")
    sub.add_argument("--config", default=None, help="INI config file")
    sub.add_argument("--seed", type=int, default=None, help="pipeline RNG seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="genrec",
        description="Generative recommender pipeline over dual-source item indices",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("synth", help="generate a synthetic corpus with planted structure")
    _common(p)
    p.add_argument("--pattern", choices=("chain", "clusters"), default=None)
    p.add_argument("--items", type=int, default=None, help="chain: number of items")
    p.add_argument("--users", type=int, default=None)
    p.add_argument("--seq-len", type=int, default=None)
    p.add_argument("--rows", type=int, default=None, help="clusters: grid rows")
    p.add_argument("--cols", type=int, default=None, help="clusters: grid columns")

    p = subs.add_parser("ingest", help="load, 5-core filter and split the corpus")
    _common(p)
    p.add_argument("--interactions", default=None, help="TSV user/item/timestamp file")
    p.add_argument("--items-file", default=None, help="JSONL item metadata file")

    p = subs.add_parser("embed", help="semantic + behavioral item embeddings")
    _common(p)

    p = subs.add_parser("index", help="hierarchical k-means item indices and vocab")
    _common(p)

    p = subs.add_parser("train-initial", help="stage-one training (base + projectors)")
    _common(p)

    p = subs.add_parser("train-anneal", help="stage-two adapter-only tuning")
    _common(p)

    p = subs.add_parser("recommend", help="top-K items for one user")
    _common(p)
    p.add_argument("--user", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--stage", choices=("initial", "annealed"), default="annealed")
    p.add_argument("--adapter", choices=("on", "off"), default=None)

    p = subs.add_parser("evaluate", help="leave-one-out Recall/NDCG report")
    _common(p)
    p.add_argument("--stage", choices=("initial", "annealed"), default="annealed")

    p = subs.add_parser("ablate", help="train/evaluate toggled variants")
    _common(p)
    p.add_argument(
        "--plan", choices=("composition", "components", "depths"),
        default="composition",
    )
    p.add_argument("--seeds", type=int, nargs="+", default=None)

    return parser


def run(args) -> dict:
    cfg = load_config(args.config, seed_override=args.seed)
    wd = Workdir(args.workdir)
    if args.command == "synth":
        for flag, key in (
            ("pattern", "pattern"), ("items", "n_items"), ("users", "n_users"),
            ("seq_len", "seq_len"), ("rows", "n_rows"), ("cols", "n_cols"),
        ):
            value = getattr(args, flag)
            if value is not None:
                setattr(cfg.synth, key, value)
        with wd.lock():
            return pipeline.stage_synth(cfg, wd)
    if args.command == "ingest":
        with wd.lock():
            return pipeline.stage_ingest(cfg, wd, args.interactions, args.items_file)
    if args.command == "embed":
        with wd.lock():
            return pipeline.stage_embed(cfg, wd)
    if args.command == "index":
        with wd.lock():
            return pipeline.stage_index(cfg, wd)
    if args.command == "train-initial":
        with wd.lock():
            return pipeline.stage_train_initial(cfg, wd)
    if args.command == "train-anneal":
        with wd.lock():
            return pipeline.stage_train_anneal(cfg, wd)
    if args.command == "recommend":
        adapter = None if args.adapter is None else args.adapter == "on"
        with wd.lock():
            return pipeline.stage_recommend(
                cfg, wd, args.user, args.k, args.stage, adapter
            )
    if args.command == "evaluate":
        with wd.lock():
            return pipeline.stage_evaluate(cfg, wd, args.stage)
    if args.command == "ablate":
        with wd.lock():
            seeds = tuple(args.seeds) if args.seeds else None
            return pipeline.stage_ablate(cfg, wd, args.plan, seeds)
    raise ValueError(f"unknown command {args.command!r}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        summary = run(args)
    except Exception as exc:  # machine-readable error record on stderr
        record = {
            "error": type(exc).__name__,
            "command": args.command,
            "detail": str(exc),
        }
        print(json.dumps(record, sort_keys=True), file=sys.stderr)
        return 2
    print(json.dumps(summary, sort_keys=True, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
