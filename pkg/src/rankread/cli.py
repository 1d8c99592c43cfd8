"""Command-line driver: one subcommand per pipeline stage plus harnesses."""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path
from typing import Optional

from . import dense_index, fusion, pruner
from .corpus import PassageStore, load_examples, load_passages
from .evaluation import (
    ABLATION_ROWS,
    EvalReport,
    ablation_run,
    accuracy_at_k,
    em_score,
    exact_match,
    fingerprint,
    index_size_sweep,
    render_table,
    write_report,
)
from .matching import AnnotationError, SpanAnnotator
from .pipeline import Pipeline, PipelineConfig, StageError, load_config
from .providers import ProviderGapError

_USER_ERRORS = (
    ValueError,
    KeyError,
    OSError,
    StageError,
    ProviderGapError,
    AnnotationError,
)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rankread", description="Retrieval + reading pipeline toolkit"
    )
    parser.add_argument("--config", help="TOML config path")
    parser.add_argument("--seed", type=int, default=0, help="seed for training commands")
    parser.add_argument("--threads", type=int, default=1, help="parallel questions in batch runs")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prune", help="threshold or pool relevance scores into a kept set")
    p.add_argument("--scores", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--tau", type=float)
    group.add_argument("--top-n", type=int, dest="top_n")
    p.add_argument("--examples", help="dataset whose golden ids get injected")
    p.add_argument("--out", required=True)

    p = sub.add_parser("index", help="embedding index operations")
    index_sub = p.add_subparsers(dest="index_command", required=True)
    b = index_sub.add_parser("build")
    b.add_argument("--passages", required=True)
    b.add_argument("--pruned", help="restrict to a pruned id set file")
    b.add_argument("--out", required=True)
    s = index_sub.add_parser("search")
    s.add_argument("--index", required=True)
    s.add_argument("--passages", required=True)
    s.add_argument("--question", required=True)
    s.add_argument("-k", type=int, default=10)

    p = sub.add_parser("retrieve", help="rank top-K passages per question")
    p.add_argument("--passages", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("rerank", help="rescore retrieved candidates, keep top-V")
    p.add_argument("--passages", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("annotate", help="distant-supervision span labels")
    p.add_argument("--passages", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("decode", help="extractive top-M spans per question")
    p.add_argument("--passages", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("fuse", help="train or apply fusion models")
    fuse_sub = p.add_subparsers(dest="fuse_command", required=True)
    ta = fuse_sub.add_parser("train-aggr")
    ta.add_argument("--passages", required=True)
    ta.add_argument("--dataset", required=True)
    ta.add_argument("--out", required=True)
    tb = fuse_sub.add_parser("train-bd")
    tb.add_argument("--passages", required=True)
    tb.add_argument("--dataset", required=True)
    tb.add_argument("--aggr", required=True, help="trained aggregation model path")
    tb.add_argument("--out", required=True)
    fa = fuse_sub.add_parser("apply")
    fa.add_argument("--passages", required=True)
    fa.add_argument("--dataset", required=True)
    fa.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="score predictions or retrieval")
    eval_sub = p.add_subparsers(dest="eval_command", required=True)
    em = eval_sub.add_parser("em")
    em.add_argument("--predictions", required=True)
    em.add_argument("--dataset", required=True)
    em.add_argument("--out")
    acc = eval_sub.add_parser("acc")
    acc.add_argument("--retrieved", required=True)
    acc.add_argument("--passages", required=True)
    acc.add_argument("--dataset", required=True)
    acc.add_argument("-k", type=int, required=True)
    acc.add_argument("--out")

    p = sub.add_parser("ablate", help="EM grid over reranker/fusion rows, full vs pruned")
    p.add_argument("--passages", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--pruned", required=True)
    p.add_argument("--out")

    p = sub.add_parser("sweep", help="EM against index size")
    p.add_argument("--passages", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--scores", required=True)
    p.add_argument("--sizes", required=True, help="comma-separated ascending sizes")
    p.add_argument("--out")

    p = sub.add_parser("e2e", help="full pipeline over a dataset")
    p.add_argument("--passages", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--workdir", required=True)

    return parser


def _config(args) -> PipelineConfig:
    if args.config:
        return load_config(args.config)
    return PipelineConfig()


def _fit_config(config: PipelineConfig, available: int) -> PipelineConfig:
    """Shrink K/V/V2 to what a restricted corpus can serve."""
    K = min(config.K, available)
    return dataclasses.replace(
        config,
        K=K,
        V=min(config.resolved_V, K),
        V2=min(config.V2, K),
    )


def _write_jsonl(path, rows) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row) + "\n")


def _read_jsonl(path) -> list[dict]:
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if line.strip():
                rows.append(json.loads(line))
    return rows


def _cmd_prune(args) -> int:
    scores = pruner.load_relevance_scores(args.scores)
    if args.tau is not None:
        kept = pruner.select_by_threshold(scores, args.tau)
    else:
        kept = pruner.pool_top_n(scores, args.top_n)
    if args.examples:
        examples = load_examples(args.examples)
        golden = [ex.golden_passage_id for ex in examples if ex.golden_passage_id is not None]
        kept = pruner.inject_golden(kept, golden)
    pruner.write_pruned_set(kept, args.out)
    print(f"kept {len(kept.ids)} of {len(scores)} passages (tau={kept.tau:.6f})")
    return 0


def _cmd_index(args) -> int:
    config = _config(args)
    if args.index_command == "build":
        store = load_passages(args.passages)
        pipe = Pipeline(_fit_config(config, len(store.ids())), store)
        if pipe.provider.kind != "lexical-toy":
            raise ValueError(
                "index build computes lexical embeddings; file-backed runs bring an index file"
            )
        ids = store.ids()
        if args.pruned:
            kept = pruner.load_pruned_set(args.pruned)
            ids = [pid for pid in ids if pid in kept.ids]
        matrix = pipe.provider.build_index(ids)
        dense_index.write_index(matrix, args.out)
        print(f"wrote index: n={matrix.n} d={matrix.d}")
        return 0
    store = load_passages(args.passages)
    index = dense_index.read_index(args.index)
    pipe = Pipeline(_fit_config(config, index.n), store, index=index)
    query = pipe.provider.query_embedding(args.question)
    for result in dense_index.search(index, query, args.k):
        print(f"{result.passage_id}\t{result.score:.6f}")
    return 0


def _pipeline(args, store) -> Pipeline:
    config = _fit_config(_config(args), len(store.ids()))
    return Pipeline.from_config(config, store)


def _cmd_retrieve(args) -> int:
    store = load_passages(args.passages)
    dataset = load_examples(args.dataset, store=store)
    pipe = _pipeline(args, store)
    rows = []
    for ex in dataset:
        ranked = pipe._retrieve(ex.question)
        rows.append({"question_key": ex.question, "ranked": [[pid, s] for pid, s in ranked]})
    _write_jsonl(args.out, rows)
    print(f"retrieved top-{pipe.config.K} for {len(rows)} questions")
    return 0


def _cmd_rerank(args) -> int:
    store = load_passages(args.passages)
    dataset = load_examples(args.dataset, store=store)
    pipe = _pipeline(args, store)
    if not pipe.config.reranker:
        raise ValueError("config disables the reranker")
    rows = []
    for ex in dataset:
        retrieved = pipe._retrieve(ex.question)
        kept, scores = pipe._rerank(ex.question, retrieved)
        rows.append(
            {
                "question_key": ex.question,
                "scores": {str(pid): s for pid, s in scores.items()},
                "kept": [[pid, s] for pid, s in kept],
            }
        )
    _write_jsonl(args.out, rows)
    print(f"reranked {len(rows)} questions to top-{pipe.config.resolved_V}")
    return 0


def _cmd_annotate(args) -> int:
    store = load_passages(args.passages)
    dataset = load_examples(args.dataset, store=store)
    pipe = _pipeline(args, store)
    annotator = SpanAnnotator()
    rows = []
    annotated = 0
    for ex in dataset:
        retrieved = pipe._retrieve(ex.question)
        reader_ids = [pid for pid, _ in retrieved[: pipe.config.resolved_V]]
        if ex.golden_passage_id is not None and ex.golden_passage_id not in reader_ids:
            reader_ids.append(ex.golden_passage_id)
        try:
            ann = annotator.annotate_example(ex, reader_ids, store)
        except AnnotationError as e:
            rows.append({"question_key": ex.question, "error": str(e)})
            continue
        annotated += 1
        rows.append(
            {
                "question_key": ex.question,
                "starts": sorted([pid, tok] for pid, tok in ann.starts),
                "ends": sorted([pid, tok] for pid, tok in ann.ends),
                "boundaries": sorted([pid, s, e] for pid, s, e in ann.boundaries),
                "positives": sorted(ann.positive_passages),
            }
        )
    _write_jsonl(args.out, rows)
    print(f"annotated {annotated} of {len(dataset)} questions")
    return 0


def _cmd_decode(args) -> int:
    store = load_passages(args.passages)
    dataset = load_examples(args.dataset, store=store)
    pipe = _pipeline(args, store)
    rows = []
    for ex in dataset:
        trace = pipe.run_question(ex.question)
        rows.append(
            {
                "question_key": ex.question,
                "spans": [
                    {
                        "passage_id": s.passage_id,
                        "start_tok": s.start_tok,
                        "end_tok": s.end_tok,
                        "text": s.text,
                        "logp_e": s.logp_e,
                    }
                    for s in trace.spans
                ],
            }
        )
    _write_jsonl(args.out, rows)
    print(f"decoded top-{pipe.config.M} spans for {len(rows)} questions")
    return 0


def _fusion_training_rows(pipe: Pipeline, dataset):
    """Per-question span features and the first correct span index, when any."""
    rows = []
    for ex in dataset:
        config = pipe.config
        retrieved = pipe._retrieve(ex.question)
        reranked, rerank_scores = pipe._rerank(ex.question, retrieved)
        read_order = (
            [pid for pid, _ in reranked]
            if reranked is not None
            else [pid for pid, _ in retrieved[: config.resolved_V]]
        )
        spans = pipe._read(ex.question, read_order)
        gen_source = reranked if reranked is not None else retrieved
        gen_ids = [pid for pid, _ in gen_source[: config.V2]]
        if "g" in config.feature_mask:
            logps = pipe._span_logps(ex.question, spans, gen_ids)
            for span in spans:
                span.logp_g = logps[span.text]
        features = pipe._features(spans, rerank_scores)
        gt = next(
            (i for i, s in enumerate(spans) if exact_match(s.text, ex.answers)), None
        )
        rows.append((ex, spans, features, gt, gen_ids))
    return rows


def _cmd_fuse(args) -> int:
    store = load_passages(args.passages)
    dataset = load_examples(args.dataset, store=store)
    config = _fit_config(_config(args), len(store.ids()))

    if args.fuse_command == "train-aggr":
        pipe = Pipeline.from_config(config, store)
        rows = _fusion_training_rows(pipe, dataset)
        train_set = [(features, gt) for _, _, features, gt, _ in rows if gt is not None]
        if len(train_set) < 2:
            raise ValueError(f"only {len(train_set)} questions have a correct span to train on")
        model = fusion.train_aggregation(train_set, mask=config.feature_mask, seed=args.seed)
        fusion.save_model(model, args.out)
        print(
            f"trained aggregation on {len(train_set)} questions, "
            f"final loss {model.metadata['final_loss']:.6f}"
        )
        return 0

    if args.fuse_command == "train-bd":
        pipe = Pipeline.from_config(config, store)
        aggr_model = fusion.load_model(args.aggr)
        rows = _fusion_training_rows(pipe, dataset)
        train_set = []
        for ex, spans, features, _, gen_ids in rows:
            best_idx, s_agg = fusion.best_aggregated(features, aggr_model)
            gen_answer, s_g_star = pipe._generate(ex.question, gen_ids)
            ext_ok = exact_match(spans[best_idx].text, ex.answers)
            gen_ok = exact_match(gen_answer, ex.answers) if gen_answer else False
            if gen_ok and not ext_ok:
                target = 1
            elif ext_ok:
                target = 0
            else:
                continue
            train_set.append((s_agg, s_g_star, target))
        if len({t for _, _, t in train_set}) < 2:
            raise ValueError("binary decision training needs both outcomes present")
        model = fusion.train_binary_decision(train_set, seed=args.seed)
        fusion.save_model(model, args.out)
        print(
            f"trained binary decision on {len(train_set)} questions, "
            f"final loss {model.metadata['final_loss']:.6f}"
        )
        return 0

    pipe = Pipeline.from_config(config, store)
    outcome = pipe.run_batch(dataset, threads=args.threads)
    _write_jsonl(
        args.out,
        [
            {"question_key": ex.question, "answer": answer}
            for ex, answer in zip(dataset, outcome.answers)
        ],
    )
    print(f"em={outcome.report.value:.4f} over {len(dataset)} questions")
    for idx, message in outcome.errors.items():
        print(f"  example {idx} failed: {message}", file=sys.stderr)
    return 0


def _cmd_eval(args) -> int:
    dataset = load_examples(args.dataset)
    if args.eval_command == "em":
        by_question = {}
        for row in _read_jsonl(args.predictions):
            by_question[row["question_key"]] = row.get("answer") or ""
        missing = [ex.question for ex in dataset if ex.question not in by_question]
        if missing:
            raise ValueError(f"predictions missing {len(missing)} questions: {missing[:3]}")
        predictions = [by_question[ex.question] for ex in dataset]
        value = em_score(predictions, dataset)
        bits = tuple(
            1 if exact_match(p, ex.answers) else 0 for p, ex in zip(predictions, dataset)
        )
        report = EvalReport("em", value, bits, fingerprint({"predictions": args.predictions}))
        if args.out:
            write_report(report, args.out)
        print(f"em={value:.4f}")
        return 0

    store = load_passages(args.passages)
    retrieved_rows = {row["question_key"]: row["ranked"] for row in _read_jsonl(args.retrieved)}
    retrieved = []
    for ex in dataset:
        if ex.question not in retrieved_rows:
            raise ValueError(f"retrieved file missing question {ex.question!r}")
        retrieved.append([int(pid) for pid, _ in retrieved_rows[ex.question]])
    value = accuracy_at_k(retrieved, dataset, store, args.k)
    bits = tuple(
        1 if accuracy_at_k([r], [ex], store, args.k) == 1.0 else 0
        for r, ex in zip(retrieved, dataset)
    )
    report = EvalReport(
        f"accuracy@{args.k}", value, bits, fingerprint({"retrieved": args.retrieved})
    )
    if args.out:
        write_report(report, args.out)
    print(f"accuracy@{args.k}={value:.4f}")
    return 0


def _cmd_ablate(args) -> int:
    store = load_passages(args.passages)
    dataset = load_examples(args.dataset, store=store)
    base = _config(args)
    kept = pruner.load_pruned_set(args.pruned)
    id_sets = {"full": None, "pruned": frozenset(kept.ids)}

    def run_cell(tag, reranker, row) -> Optional[float]:
        restrict = id_sets[tag]
        available = len(store.ids()) if restrict is None else len(restrict)
        fusion_mode = {"ext": "none", "naive": "naive", "aggr": "aggr", "aggr+bd": "aggr+bd"}
        if row != "gen":
            mode = fusion_mode[row]
            if mode in ("aggr", "aggr+bd") and base.aggregation_model is None:
                return None
            if mode == "aggr+bd" and base.decision_model is None:
                return None
            config = dataclasses.replace(
                _fit_config(base, available), fusion=mode, reranker=reranker
            )
            pipe = Pipeline.from_config(config, store, restrict_ids=restrict)
            return pipe.run_batch(dataset, threads=args.threads).report.value
        config = dataclasses.replace(_fit_config(base, available), reranker=reranker)
        pipe = Pipeline.from_config(config, store, restrict_ids=restrict)
        bits = []
        for ex in dataset:
            try:
                retrieved = pipe._retrieve(ex.question)
                reranked, _ = pipe._rerank(ex.question, retrieved)
                source = reranked if reranked is not None else retrieved
                answer, _ = pipe._generate(ex.question, [pid for pid, _ in source[: config.V2]])
                bits.append(1 if answer and exact_match(answer, ex.answers) else 0)
            except StageError:
                bits.append(0)
        return sum(bits) / len(bits)

    table = ablation_run(run_cell)
    text_rows = []
    for cell in table:
        fmt = lambda v: "absent" if v is None else f"{v:.4f}"  # noqa: E731
        text_rows.append(
            [
                "on" if cell.reranker else "off",
                cell.row,
                fmt(cell.em_full),
                fmt(cell.em_pruned),
                fmt(cell.delta),
            ]
        )
    print(render_table(["reranker", "row", "em_full", "em_pruned", "delta"], text_rows))
    if args.out:
        payload = [
            {
                "reranker": cell.reranker,
                "row": cell.row,
                "em_full": cell.em_full,
                "em_pruned": cell.em_pruned,
                "delta": cell.delta,
            }
            for cell in table
        ]
        Path(args.out).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    return 0


def _cmd_sweep(args) -> int:
    store = load_passages(args.passages)
    dataset = load_examples(args.dataset, store=store)
    base = _config(args)
    scores = pruner.load_relevance_scores(args.scores)
    sizes = [int(s) for s in args.sizes.split(",")]
    golden = sorted(
        {ex.golden_passage_id for ex in dataset if ex.golden_passage_id is not None}
    )

    def run_at(ids: frozenset) -> float:
        config = _fit_config(base, len(ids))
        pipe = Pipeline.from_config(config, store, restrict_ids=ids)
        return pipe.run_batch(dataset, threads=args.threads).report.value

    curve = index_size_sweep(sizes, golden, scores, run_at)
    print(render_table(["size", "em"], [[str(s), f"{em:.4f}"] for s, em in curve]))
    if args.out:
        Path(args.out).write_text(
            json.dumps([[s, em] for s, em in curve], indent=2) + "\n", encoding="utf-8"
        )
    return 0


def _cmd_e2e(args) -> int:
    store = load_passages(args.passages)
    dataset = load_examples(args.dataset, store=store)
    config = _fit_config(_config(args), len(store.ids()))
    workdir = Path(args.workdir)
    workdir.mkdir(parents=True, exist_ok=True)

    pipe = Pipeline.from_config(config, store, cache_dir=workdir / "cache")
    if pipe.index is None and pipe.provider.kind == "lexical-toy":
        index_path = workdir / "index.emb"
        dense_index.write_index(pipe.provider.build_index(store.ids()), index_path)
        pipe.index = dense_index.read_index(index_path)
        print(f"built index: {index_path}")

    outcome = pipe.run_batch(dataset, threads=args.threads)
    write_report(outcome.report, workdir / "report.json")
    _write_jsonl(
        workdir / "answers.jsonl",
        [
            {"question_key": ex.question, "answer": answer}
            for ex, answer in zip(dataset, outcome.answers)
        ],
    )
    traces = [pipe.run_question(ex.question).to_dict() for ex in dataset[:5]]
    _write_jsonl(workdir / "traces.jsonl", traces)

    print(
        f"stages: retrieve K={pipe.config.K}, "
        f"rerank {'V=' + str(pipe.config.resolved_V) if pipe.config.reranker else 'off'}, "
        f"decode M={pipe.config.M}, fusion={pipe.config.fusion}"
    )
    print(f"em={outcome.report.value:.4f} over {len(dataset)} questions")
    for idx, message in outcome.errors.items():
        print(f"  example {idx} failed: {message}", file=sys.stderr)
    return 0


_COMMANDS = {
    "prune": _cmd_prune,
    "index": _cmd_index,
    "retrieve": _cmd_retrieve,
    "rerank": _cmd_rerank,
    "annotate": _cmd_annotate,
    "decode": _cmd_decode,
    "fuse": _cmd_fuse,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "sweep": _cmd_sweep,
    "e2e": _cmd_e2e,
}


def main(argv: Optional[list[str]] = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except _USER_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
