"""Stage orchestration: retrieve, rerank, read, generate, fuse.

Every model quantity comes from a bound ScoreProvider, so the same driver
runs the lexical toy end-to-end in CI and replays exported neural outputs
from files.  Each stage's ranked output lands in the question trace with
exactly the configured list length.
"""

from __future__ import annotations

import json
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # 3.10
    import tomli as tomllib

from . import dense_index, fusion, reader
from .corpus import PassageStore, QAExample
from .fusion import FEATURE_NAMES
from .evaluation import EvalReport, exact_match, fingerprint
from .providers import (
    LexicalToyProvider,
    ProviderGapError,
    ScoreProvider,
    get_provider,
    toy_reader_heads,
)
from .reranker import CandidateList, apply_rerank, softmax_over_set

__all__ = [
    "StageError",
    "PipelineConfig",
    "QuestionTrace",
    "BatchResult",
    "Pipeline",
    "StageCache",
    "lexical_score",
    "load_config",
    "FUSION_MODES",
]

FUSION_MODES = ("none", "naive", "aggr", "aggr+bd")


class StageError(RuntimeError):
    """A pipeline stage could not run; the message names the stage."""

    def __init__(self, stage: str, message: str) -> None:
        super().__init__(f"{stage}: {message}")
        self.stage = stage


@dataclass
class PipelineConfig:
    """Run parameters; V defaults to 24 with the reranker and 128 without."""

    K: int = 200
    V: Optional[int] = None
    V2: int = 25
    M: int = 10
    max_span_len: int = 30
    factorization: str = "IJC"
    fusion: str = "none"
    feature_mask: tuple[str, ...] = FEATURE_NAMES
    reranker: bool = True
    provider: dict = field(default_factory=lambda: {"kind": "lexical-toy"})
    index: Optional[str] = None
    heads: Optional[str] = None
    aggregation_model: Optional[str] = None
    decision_model: Optional[str] = None

    def __post_init__(self) -> None:
        self.feature_mask = tuple(self.feature_mask)
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.M < 1:
            raise ValueError("M must be >= 1")
        if self.max_span_len < 1:
            raise ValueError("max_span_len must be >= 1")
        if self.resolved_V > self.K:
            raise ValueError(f"V={self.resolved_V} must not exceed K={self.K}")
        if self.V2 > self.K:
            raise ValueError(f"V2={self.V2} must not exceed K={self.K}")
        if self.fusion not in FUSION_MODES:
            raise ValueError(f"fusion must be one of {FUSION_MODES}")
        factors = set(self.factorization)
        if not factors or not factors <= set("IJC"):
            raise ValueError("factorization must be a non-empty subset of IJC")
        unknown = set(self.feature_mask) - set(FEATURE_NAMES)
        if unknown or not self.feature_mask:
            raise ValueError(f"feature_mask must be a non-empty subset of {FEATURE_NAMES}")

    @property
    def resolved_V(self) -> int:
        if self.V is not None:
            return self.V
        return 24 if self.reranker else 128

    def to_dict(self) -> dict:
        d = asdict(self)
        d["feature_mask"] = list(self.feature_mask)
        return d


def load_config(path: Union[str, Path]) -> PipelineConfig:
    """PipelineConfig from a TOML file ([pipeline] table plus [provider])."""
    with open(path, "rb") as f:
        data = tomllib.load(f)
    table = dict(data.get("pipeline", {}))
    known = set(PipelineConfig.__dataclass_fields__) - {"provider"}
    unknown = set(table) - known
    if unknown:
        raise ValueError(f"unknown [pipeline] keys: {sorted(unknown)}")
    if "feature_mask" in table:
        table["feature_mask"] = tuple(table["feature_mask"])
    provider = dict(data.get("provider", {"kind": "lexical-toy"}))
    return PipelineConfig(provider=provider, **table)


@dataclass
class QuestionTrace:
    """Per-stage ranked outputs for one question."""

    question: str
    retrieved: list[tuple[int, float]]
    reranked: Optional[list[tuple[int, float]]]
    read_order: list[int]
    spans: list[reader.AnswerSpan]
    generated: Optional[tuple[str, float]]
    fusion_info: dict
    final_answer: str

    def to_dict(self) -> dict:
        return {
            "question": self.question,
            "retrieved": [[pid, score] for pid, score in self.retrieved],
            "reranked": None
            if self.reranked is None
            else [[pid, score] for pid, score in self.reranked],
            "read_order": list(self.read_order),
            "spans": [
                {
                    "passage_id": s.passage_id,
                    "start_tok": s.start_tok,
                    "end_tok": s.end_tok,
                    "text": s.text,
                    "logp_e": s.logp_e,
                    "logp_g": s.logp_g,
                    "logp_r": s.logp_r,
                    "logp_rr": s.logp_rr,
                }
                for s in self.spans
            ],
            "generated": None if self.generated is None else list(self.generated),
            "fusion_info": self.fusion_info,
            "final_answer": self.final_answer,
        }


@dataclass
class BatchResult:
    report: EvalReport
    answers: list[Optional[str]]
    errors: dict[int, str]


class StageCache:
    """JSON-lines cache per stage, keyed by question_key and config hash."""

    def __init__(self, directory: Union[str, Path], config_hash: str) -> None:
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.config_hash = config_hash
        self._tables: dict[str, dict] = {}
        self._lock = threading.Lock()

    def _path(self, stage: str) -> Path:
        return self.directory / f"{stage}.{self.config_hash}.jsonl"

    def _table(self, stage: str) -> dict:
        with self._lock:
            if stage not in self._tables:
                table = {}
                path = self._path(stage)
                if path.exists():
                    with open(path, "r", encoding="utf-8") as f:
                        for line in f:
                            if line.strip():
                                row = json.loads(line)
                                table[row["question_key"]] = row["payload"]
                self._tables[stage] = table
            return self._tables[stage]

    def get(self, stage: str, question: str):
        return self._table(stage).get(question)

    def put(self, stage: str, question: str, payload) -> None:
        table = self._table(stage)
        with self._lock:
            if question in table:
                return
            table[question] = payload
            with open(self._path(stage), "a", encoding="utf-8") as f:
                f.write(json.dumps({"question_key": question, "payload": payload}) + "\n")


def lexical_score(question: str, passage, store: PassageStore) -> float:
    """Idf-weighted overlap between unique question tokens and the passage."""
    return LexicalToyProvider(store).lexical_score(question, passage)


class Pipeline:
    """Bound stages over one store, provider, and config."""

    def __init__(
        self,
        config: PipelineConfig,
        store: PassageStore,
        provider: Optional[ScoreProvider] = None,
        index: Optional[dense_index.EmbeddingMatrix] = None,
        heads: Optional[reader.ReaderHeads] = None,
        aggr_model: Optional[fusion.AggregationModel] = None,
        bd_model: Optional[fusion.DecisionModel] = None,
        cache: Optional[StageCache] = None,
        restrict_ids: Optional[frozenset] = None,
    ) -> None:
        self.config = config
        self.store = store
        self.provider = provider or get_provider(config.provider, store)
        if index is not None and restrict_ids is not None:
            index = dense_index.subset_index(index, sorted(restrict_ids))
        self.index = index
        if heads is None and self.provider.kind == "lexical-toy":
            heads = toy_reader_heads()
        self.heads = heads
        self.aggr_model = aggr_model
        self.bd_model = bd_model
        self.cache = cache
        self.restrict_ids = restrict_ids

    @classmethod
    def from_config(
        cls,
        config: PipelineConfig,
        store: PassageStore,
        cache_dir: Optional[Union[str, Path]] = None,
        restrict_ids: Optional[frozenset] = None,
    ) -> "Pipeline":
        index = dense_index.read_index(config.index) if config.index else None
        heads = reader.load_heads(config.heads) if config.heads else None
        aggr = fusion.load_model(config.aggregation_model) if config.aggregation_model else None
        bd = fusion.load_model(config.decision_model) if config.decision_model else None
        cache = (
            StageCache(cache_dir, fingerprint(config.to_dict())) if cache_dir else None
        )
        return cls(
            config,
            store,
            index=index,
            heads=heads,
            aggr_model=aggr,
            bd_model=bd,
            cache=cache,
            restrict_ids=restrict_ids,
        )

    # -- stages --------------------------------------------------------------

    def _retrieve(self, question: str) -> list[tuple[int, float]]:
        cached = self.cache.get("retrieve", question) if self.cache else None
        if cached is not None:
            return [(int(pid), float(score)) for pid, score in cached]
        K = self.config.K
        try:
            if self.index is not None:
                index = self.index
                if K > index.n:
                    raise StageError("retrieve", f"K={K} exceeds the {index.n}-row index")
                q = self.provider.query_embedding(question)
                results = dense_index.search(index, q, K)
                ranked = [(r.passage_id, r.score) for r in results]
            else:
                ids = self.store.ids()
                if self.restrict_ids is not None:
                    ids = [pid for pid in ids if pid in self.restrict_ids]
                if K > len(ids):
                    raise StageError("retrieve", f"K={K} exceeds the {len(ids)} passages")
                scores = self.provider.retrieval_scores(question, ids)
                ranked = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))[:K]
                ranked = [(pid, float(score)) for pid, score in ranked]
        except ProviderGapError as e:
            raise StageError("retrieve", str(e)) from e
        if self.cache:
            self.cache.put("retrieve", question, [[pid, score] for pid, score in ranked])
        return ranked

    def _rerank(self, question: str, retrieved: list[tuple[int, float]]):
        """(reranked top-V list, full score map) or (None, None) when disabled."""
        if not self.config.reranker:
            return None, None
        cached = self.cache.get("rerank", question) if self.cache else None
        if cached is not None:
            scores = {int(pid): float(s) for pid, s in cached["scores"].items()}
            kept = [(int(pid), float(s)) for pid, s in cached["kept"]]
            return kept, scores
        try:
            candidates = CandidateList(question, tuple(retrieved))
            scores = self.provider.rerank_scores(question, candidates.ids())
            kept = apply_rerank(candidates, scores, keep=self.config.resolved_V)
        except (ProviderGapError, ValueError, KeyError) as e:
            raise StageError("rerank", str(e)) from e
        kept_entries = list(kept.entries)
        if self.cache:
            self.cache.put(
                "rerank",
                question,
                {
                    "scores": {str(pid): s for pid, s in scores.items()},
                    "kept": [[pid, s] for pid, s in kept_entries],
                },
            )
        return kept_entries, scores

    def _read(self, question: str, read_order: list[int]) -> list[reader.AnswerSpan]:
        cached = self.cache.get("decode", question) if self.cache else None
        if cached is not None:
            spans = []
            for row in cached:
                span = reader.AnswerSpan(
                    passage_id=int(row["passage_id"]),
                    start_tok=int(row["start_tok"]),
                    end_tok=int(row["end_tok"]),
                    text=row["text"],
                    logp_e=float(row["logp_e"]),
                )
                span.logp_r = float(row["logp_r"])
                spans.append(span)
            return spans
        if self.heads is None:
            raise StageError("read", "no reader heads bound")
        try:
            encs = [self.provider.encoder_output(question, pid) for pid in read_order]
        except ProviderGapError as e:
            raise StageError("read", str(e)) from e
        score_sets = [
            reader.compute_scores(enc, self.heads, self.config.max_span_len) for enc in encs
        ]
        try:
            dists = reader.normalize(score_sets, encs)
        except ValueError as e:
            raise StageError("read", str(e)) from e
        contexts = {pid: self.store.get(pid).context for pid in read_order}
        spans = reader.decode_spans(dists, self.config.factorization, self.config.M, contexts)
        if len(spans) < self.config.M:
            raise StageError(
                "decode", f"only {len(spans)} legal spans for M={self.config.M}"
            )
        for span in spans:
            span.logp_r = float(dists.log_passage[dists.passage_index(span.passage_id)])
        if self.cache:
            self.cache.put(
                "decode",
                question,
                [
                    {
                        "passage_id": s.passage_id,
                        "start_tok": s.start_tok,
                        "end_tok": s.end_tok,
                        "text": s.text,
                        "logp_e": s.logp_e,
                        "logp_r": s.logp_r,
                    }
                    for s in spans
                ],
            )
        return spans

    def _generate(self, question: str, gen_ids: list[int]) -> tuple[str, float]:
        try:
            answer, logp = self.provider.generate_answer(question, gen_ids)
        except ProviderGapError as e:
            raise StageError("generate", str(e)) from e
        return answer, float(logp)

    def _span_logps(self, question: str, spans, gen_ids) -> dict[str, float]:
        try:
            return {
                span.text: float(self.provider.span_log_prob(question, span.text, gen_ids))
                for span in spans
            }
        except ProviderGapError as e:
            raise StageError("fuse", str(e)) from e

    def _features(self, spans, rerank_scores) -> np.ndarray:
        """x(a) columns e, g, r, rr as probabilities; masked-out columns are 1."""
        mask = self.config.feature_mask
        need_rr = "rr" in mask
        if need_rr:
            if rerank_scores is None:
                raise StageError("fuse", "rr feature requires the reranker")
            rr_probs = softmax_over_set(rerank_scores)
        rows = []
        for span in spans:
            p_e = float(np.exp(span.logp_e)) if "e" in mask else 1.0
            p_g = float(np.exp(span.logp_g)) if "g" in mask else 1.0
            p_r = float(np.exp(span.logp_r)) if "r" in mask else 1.0
            p_rr = float(rr_probs[span.passage_id]) if need_rr else 1.0
            if need_rr:
                span.logp_rr = float(np.log(rr_probs[span.passage_id]))
            rows.append([p_e, p_g, p_r, p_rr])
        return np.array(rows, dtype=np.float64)

    def run_question(self, question: str) -> QuestionTrace:
        config = self.config
        retrieved = self._retrieve(question)
        reranked, rerank_scores = self._rerank(question, retrieved)
        if reranked is not None:
            read_order = [pid for pid, _ in reranked]
        else:
            read_order = [pid for pid, _ in retrieved[: config.resolved_V]]
        spans = self._read(question, read_order)

        generated = None
        fusion_info: dict = {"mode": config.fusion}
        final = spans[0].text

        if config.fusion != "none":
            gen_source = reranked if reranked is not None else retrieved
            gen_ids = [pid for pid, _ in gen_source[: config.V2]]
            generated = self._generate(question, gen_ids)

            if config.fusion == "naive":
                logps = self._span_logps(question, spans, gen_ids)
                order = fusion.answer_rerank(list(spans), logps)
                final = order[0].text
                fusion_info["reranked_texts"] = [s.text for s in order]
            else:
                if self.aggr_model is None:
                    raise StageError("fuse", "no aggregation model bound")
                if "g" in config.feature_mask:
                    logps = self._span_logps(question, spans, gen_ids)
                    for span in spans:
                        span.logp_g = logps[span.text]
                features = self._features(spans, rerank_scores)
                best_idx, s_agg = fusion.best_aggregated(features, self.aggr_model)
                fusion_info["best_span_index"] = best_idx
                fusion_info["s_agg"] = s_agg
                final = spans[best_idx].text
                if config.fusion == "aggr+bd":
                    if self.bd_model is None:
                        raise StageError("fuse", "no binary decision model bound")
                    gen_answer, s_g_star = generated
                    took_generated = fusion.prefers_generated(
                        s_agg, s_g_star, self.bd_model
                    )
                    final = gen_answer if took_generated else spans[best_idx].text
                    fusion_info["s_g_star"] = s_g_star
                    fusion_info["chose_generated"] = took_generated

        return QuestionTrace(
            question=question,
            retrieved=retrieved,
            reranked=reranked,
            read_order=read_order,
            spans=spans,
            generated=generated,
            fusion_info=fusion_info,
            final_answer=final,
        )

    def run_batch(
        self, dataset: Sequence[QAExample], threads: int = 1
    ) -> BatchResult:
        """EM report over a dataset; per-example failures are recorded, not fatal."""
        if not dataset:
            raise ValueError("empty dataset")

        def one(example: QAExample):
            try:
                return self.run_question(example.question).final_answer, None
            except StageError as e:
                return None, str(e)

        if threads > 1:
            from concurrent.futures import ThreadPoolExecutor

            with ThreadPoolExecutor(max_workers=threads) as pool:
                outcomes = list(pool.map(one, dataset))
        else:
            outcomes = [one(ex) for ex in dataset]

        answers: list[Optional[str]] = []
        errors: dict[int, str] = {}
        bits = []
        for i, ((answer, error), example) in enumerate(zip(outcomes, dataset)):
            answers.append(answer)
            if error is not None:
                errors[i] = error
                bits.append(0)
            else:
                bits.append(1 if exact_match(answer, example.answers) else 0)
        report = EvalReport(
            metric="em",
            value=sum(bits) / len(bits),
            per_example=tuple(bits),
            config_fingerprint=fingerprint(self.config.to_dict()),
        )
        return BatchResult(report=report, answers=answers, errors=errors)
