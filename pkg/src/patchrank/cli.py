"""Command-line front end for the batch pipeline.

Subcommands mirror the pipeline stages (ingest, index, embed, prerank,
featurize, train, rank, eval) plus ``trace``, which runs everything for a
single CVE and prints the top of the final ranking. Exit codes: 0 success,
1 configuration or input error, 2 missing upstream artifact.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .corpus import DumpFormatError
from .embedding import EmbedBuildError, ProviderError
from .pipeline import (
    STAGE_FUNCTIONS,
    STAGES,
    ConfigError,
    StageInputError,
    apply_overrides,
    load_config,
    run_trace,
)
from .ranker import TrainingDataError


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="patchrank",
        description="Rank a repository's commits by likelihood of fixing a CVE.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", required=True, help="pipeline config JSON file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument(
            "--offline",
            action="store_true",
            help="force the deterministic offline embedder",
        )
        p.add_argument("--provider-url", default=None, help="override the embedding endpoint")
        p.add_argument("--repo", default=None, help="restrict to one repository id")

    for stage in STAGES:
        p = sub.add_parser(stage, help=f"run the {stage} stage")
        add_common(p)

    trace = sub.add_parser("trace", help="run the full pipeline for one CVE and print the top-k")
    add_common(trace)
    trace.add_argument("--cve", required=True, help="CVE id to trace")
    trace.add_argument("--top-k", type=int, default=10, help="rows to print (default 10)")
    return parser


def _print_trace(result, top_k: int) -> None:
    prerank_pos = {doc: i for i, (doc, _) in enumerate(result.prerank_entries, start=1)}
    print(f"{result.cve.cve_id} in {result.cve.repo_id} (model: {result.model_source})")
    print(f"{'rank':>4}  {'commit':<40}  {'score':>12}  {'prerank':>7}  patch")
    for rank, (commit_id, score) in enumerate(result.final_entries[:top_k], start=1):
        marker = "*" if commit_id in result.cve.known_patch_ids else ""
        print(
            f"{rank:>4}  {commit_id:<40}  {score:>12.6f}  "
            f"{prerank_pos.get(commit_id, 0):>7}  {marker}"
        )


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = _build_parser().parse_args(argv)
    try:
        config = load_config(args.config)
        config = apply_overrides(
            config,
            seed=args.seed,
            offline=args.offline,
            provider_url=args.provider_url,
            repo=args.repo,
        )
        if args.command == "trace":
            result = run_trace(config, args.cve, repo=args.repo)
            _print_trace(result, args.top_k)
        else:
            STAGE_FUNCTIONS[args.command](config)
    except StageInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, DumpFormatError, TrainingDataError, EmbedBuildError, ProviderError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
