"""Answer-level metrics, ablation tables, and the index-size sweep harness."""

from __future__ import annotations

import hashlib
import json
import re
import string
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional, Sequence, Union

from .corpus import PassageStore, QAExample
from .matching import exact_match_spans, tokenize_simple
from .pruner import pool_top_n

__all__ = [
    "EvalReport",
    "AblationCell",
    "ABLATION_ROWS",
    "normalize_answer",
    "exact_match",
    "em_score",
    "accuracy_at_k",
    "ablation_run",
    "index_size_sweep",
    "fingerprint",
    "render_table",
    "write_report",
    "load_report",
]

_ARTICLE_RE = re.compile(r"\b(a|an|the)\b")
_PUNCT_TABLE = {ord(c): None for c in string.punctuation}


def normalize_answer(text: str) -> str:
    """Lowercase, drop articles, strip punctuation, collapse whitespace."""
    text = text.lower()
    text = _ARTICLE_RE.sub(" ", text)
    text = text.translate(_PUNCT_TABLE)
    return " ".join(text.split())


def exact_match(prediction: str, golds: Sequence[str]) -> bool:
    """True iff the prediction normalizes to any gold answer."""
    if not golds:
        raise ValueError("golds must be non-empty")
    norm = normalize_answer(prediction)
    return any(norm == normalize_answer(g) for g in golds)


def em_score(predictions: Sequence[str], dataset: Sequence[QAExample]) -> float:
    if len(predictions) != len(dataset):
        raise ValueError(
            f"{len(predictions)} predictions for {len(dataset)} examples"
        )
    if not dataset:
        raise ValueError("empty dataset")
    hits = sum(exact_match(p, ex.answers) for p, ex in zip(predictions, dataset))
    return hits / len(dataset)


def _contains_answer(context: str, answers: Sequence[str]) -> bool:
    passage_tokens = tokenize_simple(context)
    for answer in answers:
        answer_tokens = tokenize_simple(answer)
        if len(answer_tokens) and exact_match_spans(passage_tokens, answer_tokens):
            return True
    return False


def accuracy_at_k(
    retrieved_per_example: Sequence[Sequence[int]],
    dataset: Sequence[QAExample],
    store: PassageStore,
    K: int,
) -> float:
    """Fraction of questions with a tokenized answer match in the top-K contexts."""
    if len(retrieved_per_example) != len(dataset):
        raise ValueError("retrieved lists and dataset must align")
    if not dataset:
        raise ValueError("empty dataset")
    if K < 0:
        raise ValueError("K must be >= 0")
    for i, retrieved in enumerate(retrieved_per_example):
        if len(retrieved) < K:
            raise ValueError(f"example {i}: only {len(retrieved)} retrieved, need {K}")
    if K == 0:
        return 0.0
    hits = 0
    for retrieved, ex in zip(retrieved_per_example, dataset):
        if any(
            _contains_answer(store.get(pid).context, ex.answers)
            for pid in retrieved[:K]
        ):
            hits += 1
    return hits / len(dataset)


@dataclass(frozen=True)
class EvalReport:
    """One metric over one dataset: the value is the mean of per-example bits."""

    metric: str
    value: float
    per_example: tuple[int, ...]
    config_fingerprint: str

    def __post_init__(self) -> None:
        if not self.per_example:
            raise ValueError("per_example must be non-empty")
        if any(bit not in (0, 1) for bit in self.per_example):
            raise ValueError("per-example entries must be 0 or 1")
        mean = sum(self.per_example) / len(self.per_example)
        if abs(mean - self.value) > 1e-12:
            raise ValueError(f"value {self.value} is not the mean {mean}")
        if not 0.0 <= self.value <= 1.0:
            raise ValueError("value must lie in [0, 1]")


def fingerprint(config: Mapping) -> str:
    """Stable hash of a JSON-serializable config mapping."""
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def write_report(report: EvalReport, path: Union[str, Path]) -> None:
    payload = {
        "metric": report.metric,
        "value": report.value,
        "per_example": list(report.per_example),
        "config_fingerprint": report.config_fingerprint,
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def load_report(path: Union[str, Path]) -> EvalReport:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    return EvalReport(
        metric=payload["metric"],
        value=payload["value"],
        per_example=tuple(payload["per_example"]),
        config_fingerprint=payload["config_fingerprint"],
    )


ABLATION_ROWS = ("ext", "gen", "naive", "aggr", "aggr+bd")


@dataclass(frozen=True)
class AblationCell:
    reranker: bool
    row: str
    em_full: Optional[float]
    em_pruned: Optional[float]

    @property
    def delta(self) -> Optional[float]:
        if self.em_full is None or self.em_pruned is None:
            return None
        return self.em_pruned - self.em_full


def ablation_run(
    run_cell: Callable[[str, bool, str], Optional[float]],
    index_tags: tuple[str, str] = ("full", "pruned"),
    rows: Sequence[str] = ABLATION_ROWS,
) -> list[AblationCell]:
    """EM grid over reranker on/off x row kind, with deltas between two indices.

    ``run_cell(index_tag, reranker, row)`` returns the cell's EM, or None when
    the configuration cannot run; absent cells stay absent in the table.
    """
    full_tag, pruned_tag = index_tags
    table = []
    for reranker in (True, False):
        for row in rows:
            em_full = run_cell(full_tag, reranker, row)
            em_pruned = run_cell(pruned_tag, reranker, row)
            table.append(AblationCell(reranker, row, em_full, em_pruned))
    return table


def index_size_sweep(
    sizes: Sequence[int],
    golden_ids: Iterable[int],
    relevance_scores: Mapping[int, float],
    run_at: Callable[[frozenset], float],
) -> list[tuple[int, float]]:
    """EM at each index size: golden ids plus the top pruner pool filling the rest."""
    golden = frozenset(golden_ids)
    if list(sizes) != sorted(sizes):
        raise ValueError("sizes must be ascending")
    candidates = {pid: p for pid, p in relevance_scores.items() if pid not in golden}
    curve = []
    for size in sizes:
        if size < len(golden):
            raise ValueError(f"size {size} smaller than the {len(golden)} golden ids")
        extra = size - len(golden)
        if extra > len(candidates):
            raise ValueError(f"size {size} exceeds golden + scored pool")
        pool = pool_top_n(candidates, extra) if extra else frozenset()
        ids = golden | (pool.ids if extra else frozenset())
        curve.append((size, run_at(frozenset(ids))))
    return curve


def render_table(headers: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    """Aligned plain-text table."""
    widths = [len(h) for h in headers]
    for row in rows:
        for i, cell in enumerate(row):
            widths[i] = max(widths[i], len(cell))
    lines = [
        "  ".join(h.ljust(widths[i]) for i, h in enumerate(headers)).rstrip(),
        "  ".join("-" * w for w in widths),
    ]
    for row in rows:
        lines.append("  ".join(c.ljust(widths[i]) for i, c in enumerate(row)).rstrip())
    return "\n".join(lines)
