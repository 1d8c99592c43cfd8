"""Candidate reranking: softmax over enumerated sets, reordering, training batches.

The cross-encoder itself is out of scope; its scores arrive through a
provider or score file and are treated as opaque logits.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

__all__ = [
    "CandidateList",
    "MAX_CANDIDATES",
    "softmax_over_set",
    "rerank_distribution",
    "apply_rerank",
    "build_training_batch",
    "reranker_loss",
]

MAX_CANDIDATES = 400


@dataclass(frozen=True)
class CandidateList:
    """Retriever output for one question: ordered (passage_id, score) pairs."""

    question_key: str
    entries: tuple[tuple[int, float], ...]

    def __post_init__(self) -> None:
        ids = [pid for pid, _ in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("candidate ids must be distinct")
        if len(ids) > MAX_CANDIDATES:
            raise ValueError(f"at most {MAX_CANDIDATES} candidates supported")

    def ids(self) -> list[int]:
        return [pid for pid, _ in self.entries]


def _sorted_keys(scores: Mapping) -> list:
    try:
        return sorted(scores)
    except TypeError:
        return sorted(scores, key=repr)


def softmax_over_set(scores: Mapping) -> dict:
    """Softmax over an enumerated set of keyed scores.

    Computed with max subtraction over a sorted key order, so the result is
    independent of map iteration order and exactly shift-invariant up to
    float rounding.
    """
    if not scores:
        raise ValueError("softmax_over_set requires a non-empty map")
    keys = _sorted_keys(scores)
    vals = np.array([scores[k] for k in keys], dtype=np.float64)
    if not np.isfinite(vals).all():
        raise ValueError("scores must be finite")
    shifted = vals - vals.max()
    exp = np.exp(shifted)
    probs = exp / exp.sum()
    return {k: float(p) for k, p in zip(keys, probs)}


def rerank_distribution(candidates: CandidateList, scores: Mapping[int, float]) -> dict[int, float]:
    """Probability over the candidate set from raw rerank logits."""
    missing = [pid for pid in candidates.ids() if pid not in scores]
    if missing:
        raise KeyError(f"missing rerank scores for passages {missing[:5]}")
    return softmax_over_set({pid: scores[pid] for pid in candidates.ids()})


def apply_rerank(
    candidates: CandidateList, scores: Mapping[int, float], keep: int
) -> CandidateList:
    """Reorder candidates by rerank score and keep the top ``keep``.

    Ties fall back to retriever score, then ascending passage id, making the
    sort independent of input order.
    """
    if keep > len(candidates.entries):
        raise ValueError("keep exceeds candidate count")
    missing = [pid for pid in candidates.ids() if pid not in scores]
    if missing:
        raise KeyError(f"missing rerank scores for passages {missing[:5]}")
    ordered = sorted(
        candidates.entries, key=lambda e: (-scores[e[0]], -e[1], e[0])
    )
    return CandidateList(candidates.question_key, tuple(ordered[:keep]))


def build_training_batch(
    example,
    retrieved: CandidateList,
    store,
    annotator,
    n_negatives: int,
    seed: int,
) -> dict:
    """One positive plus seeded hard negatives from the retrieved list.

    The positive is the golden passage when known, otherwise the best-ranked
    retrieved passage with an exact answer match.  Negatives are drawn
    uniformly without replacement from retrieved passages with no match.
    """
    positive = example.golden_passage_id
    matches = {
        pid: annotator.has_exact_match(store.get(pid).context, example.answers)
        for pid in retrieved.ids()
    }
    if positive is None:
        positive = next((pid for pid in retrieved.ids() if matches[pid]), None)
        if positive is None:
            raise ValueError(
                "no positive passage available; example should have been filtered out"
            )
    pool = [pid for pid in retrieved.ids() if pid != positive and not matches[pid]]
    if len(pool) < n_negatives:
        raise ValueError(
            f"only {len(pool)} negative candidates available, need {n_negatives}"
        )
    rng = np.random.default_rng(seed)
    negatives = rng.choice(np.array(pool, dtype=np.int64), size=n_negatives, replace=False)
    return {"positive_id": int(positive), "negative_ids": [int(p) for p in negatives]}


def reranker_loss(scores: Sequence[float], positive_index: int) -> dict:
    """Cross-entropy over one batch: loss and its gradient w.r.t. the scores."""
    s = np.asarray(scores, dtype=np.float64)
    if not np.isfinite(s).all():
        raise ValueError("scores must be finite")
    if not 0 <= positive_index < len(s):
        raise IndexError("positive_index out of range")
    shifted = s - s.max()
    log_z = np.log(np.exp(shifted).sum())
    loss = float(log_z - shifted[positive_index])
    grad = np.exp(shifted - log_z)
    grad[positive_index] -= 1.0
    return {"loss": loss, "grad": grad}
