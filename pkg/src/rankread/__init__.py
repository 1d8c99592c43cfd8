"""Retrieve-rerank-read QA pipeline engine with pluggable score providers.

The package splits into stage libraries (dense_index, reranker, reader,
matching, fusion, pruner), the corpus/evaluation plumbing around them, and a
pipeline layer that wires stages behind one config.  Anything neural enters
through a ScoreProvider; the engine itself is numpy only.
"""

from .corpus import Passage, PassageStore, QAExample, load_examples, load_passages
from .dense_index import EmbeddingMatrix, RetrievalResult, read_index, search, write_index
from .evaluation import EvalReport, accuracy_at_k, em_score, exact_match
from .fusion import AggregationModel, DecisionModel, train_aggregation, train_binary_decision
from .matching import MatchSpan, SpanAnnotator, soft_match, tokenize_simple
from .pipeline import Pipeline, PipelineConfig, load_config
from .providers import FileBackedProvider, LexicalToyProvider, ScoreProvider, get_provider
from .pruner import PrunedSet, inject_golden, pool_top_n, select_by_threshold
from .reader import EncoderOutput, ReaderHeads, decode_spans
from .reranker import CandidateList, apply_rerank, softmax_over_set

__version__ = "0.1.0"

__all__ = [
    "AggregationModel",
    "CandidateList",
    "DecisionModel",
    "EmbeddingMatrix",
    "EncoderOutput",
    "EvalReport",
    "FileBackedProvider",
    "LexicalToyProvider",
    "MatchSpan",
    "Passage",
    "PassageStore",
    "Pipeline",
    "PipelineConfig",
    "PrunedSet",
    "QAExample",
    "ReaderHeads",
    "RetrievalResult",
    "ScoreProvider",
    "SpanAnnotator",
    "accuracy_at_k",
    "apply_rerank",
    "decode_spans",
    "em_score",
    "exact_match",
    "get_provider",
    "inject_golden",
    "load_config",
    "load_examples",
    "load_passages",
    "pool_top_n",
    "read_index",
    "search",
    "select_by_threshold",
    "soft_match",
    "softmax_over_set",
    "tokenize_simple",
    "train_aggregation",
    "train_binary_decision",
    "write_index",
]
