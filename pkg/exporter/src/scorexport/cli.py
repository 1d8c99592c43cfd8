"""Command line interface.

One subcommand per export operation, with flags mirroring the job
fields, plus ``bundle``, which reads the same TOML config the engine
runs from and fills in every file that config references, and
``make-checkpoints`` for materializing the seeded desk-scale models.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

from .checkpoints import KINDS, build_checkpoints
from .jobs import (
    ExportJob,
    export_embeddings,
    export_encoder_outputs,
    export_scores,
)

__all__ = ["main"]


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--checkpoint", required=True, help="saved model directory")
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--device", default="cpu")


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scorexport",
        description="run checkpoints and export engine-format files",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-checkpoints", help="build seeded desk-scale models")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("embeddings", help="passage index and query embeddings")
    _add_common(p)
    p.add_argument("--passages", required=True)
    p.add_argument("--out", required=True, help="embedding index file")
    p.add_argument("--dataset", help="questions to embed")
    p.add_argument("--queries-out", help="query embedding JSONL")

    p = sub.add_parser("scores", help="rerank logits, relevance, or answers")
    _add_common(p)
    p.add_argument(
        "--kind", required=True, choices=("reranker", "pruner", "generative")
    )
    p.add_argument("--passages", required=True)
    p.add_argument("--dataset", help="questions (reranker and generative)")
    p.add_argument("--out", required=True)
    p.add_argument("--span-candidates", help="JSONL of candidate span texts")
    p.add_argument("--span-out", help="span log-probability JSONL")

    p = sub.add_parser("encoder-outputs", help="per-pair reader encodings")
    _add_common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--passages", required=True)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("bundle", help="fill in every file an engine config references")
    p.add_argument("--config", required=True, help="engine TOML config")
    p.add_argument("--checkpoints", required=True, help="directory of per-kind models")
    p.add_argument("--dataset", required=True)
    p.add_argument("--passages", required=True)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--device", default="cpu")
    p.add_argument("--pruner-out", help="also export relevance probabilities here")
    p.add_argument("--span-candidates")
    return parser


def _cmd_make_checkpoints(args) -> int:
    written = build_checkpoints(args.out, seed=args.seed)
    for kind in KINDS:
        print(f"wrote checkpoint: {written[kind]}")
    return 0


def _job(args, kind: str, out) -> ExportJob:
    return ExportJob(
        model_kind=kind,
        dataset=Path(args.dataset) if getattr(args, "dataset", None) else None,
        passages=Path(args.passages) if getattr(args, "passages", None) else None,
        checkpoint=Path(args.checkpoint),
        out=Path(out),
        batch_size=args.batch_size,
        device=args.device,
    )


def _cmd_embeddings(args) -> int:
    summary = export_embeddings(_job(args, "retriever", args.out), args.queries_out)
    print(f"wrote index: {args.out} ({summary['rows']} rows, d={summary['dim']})")
    if args.queries_out:
        print(f"wrote queries: {args.queries_out} ({summary['query_rows']} rows)")
    return 0


def _cmd_scores(args) -> int:
    summary = export_scores(
        _job(args, args.kind, args.out),
        span_candidates=args.span_candidates,
        span_out=args.span_out,
    )
    print(f"wrote scores: {args.out} ({summary['rows']} rows)")
    if args.span_out:
        print(f"wrote span log-probs: {args.span_out}")
    return 0


def _cmd_encoder_outputs(args) -> int:
    summary = export_encoder_outputs(_job(args, "reader-encoder", args.out_dir))
    print(f"wrote encodings: {args.out_dir} ({summary['files']} files)")
    return 0


def _cmd_bundle(args) -> int:
    with open(args.config, "rb") as f:
        config = tomllib.load(f)
    pipeline = config.get("pipeline", {})
    provider = config.get("provider", {})
    ckpt = Path(args.checkpoints)

    def job(kind: str, out) -> ExportJob:
        return ExportJob(
            model_kind=kind,
            dataset=Path(args.dataset),
            passages=Path(args.passages),
            checkpoint=ckpt / kind,
            out=Path(out),
            batch_size=args.batch_size,
            device=args.device,
        )

    wrote = []
    index_path = pipeline.get("index")
    queries_path = provider.get("query_embeddings")
    if index_path or queries_path:
        if not index_path:
            raise SystemExit("config names query embeddings but no index path")
        export_embeddings(job("retriever", index_path), queries_path)
        wrote.append(index_path)
        if queries_path:
            wrote.append(queries_path)
    if provider.get("rerank_scores"):
        export_scores(job("reranker", provider["rerank_scores"]))
        wrote.append(provider["rerank_scores"])
    if provider.get("encoder_dir"):
        export_encoder_outputs(job("reader-encoder", provider["encoder_dir"]))
        wrote.append(provider["encoder_dir"])
    if provider.get("generative") or provider.get("span_logps"):
        target = provider.get("generative")
        if not target:
            raise SystemExit("config names span log-probs but no generative path")
        export_scores(
            job("generative", target),
            span_candidates=args.span_candidates,
            span_out=provider.get("span_logps"),
        )
        wrote.append(target)
        if provider.get("span_logps"):
            wrote.append(provider["span_logps"])
    if args.pruner_out:
        export_scores(job("pruner", args.pruner_out))
        wrote.append(args.pruner_out)
    for path in wrote:
        print(f"wrote: {path}")
    print(f"bundle complete: {len(wrote)} artifacts")
    return 0


_COMMANDS = {
    "make-checkpoints": _cmd_make_checkpoints,
    "embeddings": _cmd_embeddings,
    "scores": _cmd_scores,
    "encoder-outputs": _cmd_encoder_outputs,
    "bundle": _cmd_bundle,
}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    return _COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
