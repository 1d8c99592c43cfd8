"""Question-independent passage relevance: threshold selection, top-N pooling,
golden injection, pruner evaluation, and the embedding-prior probe.

The relevance classifier itself is out of scope; its probabilities arrive
through a score file.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Tuple, Union

import numpy as np

from .dense_index import EmbeddingMatrix
from .fusion import gd_minimize, sigmoid

__all__ = [
    "PrunedSet",
    "ScoreFormatError",
    "select_by_threshold",
    "pool_top_n",
    "inject_golden",
    "evaluate_pruner",
    "embedding_set_stats",
    "train_membership_classifier",
    "load_relevance_scores",
    "write_relevance_scores",
    "load_pruned_set",
    "write_pruned_set",
]


class ScoreFormatError(ValueError):
    pass


@dataclass(frozen=True)
class PrunedSet:
    """Selected passage ids plus the threshold that produced them."""

    ids: frozenset[int]
    tau: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.tau < 1.0:
            raise ValueError("tau must be in [0, 1)")

    def __len__(self) -> int:
        return len(self.ids)


def _validate_scores(scores: Mapping[int, float]) -> None:
    for pid, p in scores.items():
        if not 0.0 < p < 1.0:
            raise ScoreFormatError(f"score for passage {pid} must be in (0,1), got {p}")


def select_by_threshold(scores: Mapping[int, float], tau: float) -> PrunedSet:
    """Keep ids whose probability is strictly above tau."""
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must be in (0,1), got {tau}")
    _validate_scores(scores)
    return PrunedSet(frozenset(pid for pid, p in scores.items() if p > tau), tau)


def pool_top_n(scores: Mapping[int, float], n: int) -> PrunedSet:
    """The n highest-scoring ids; boundary ties go to the ascending id.

    The reported tau is the (n+1)-th largest score, or 0 when n covers the
    whole map, so select_by_threshold(tau) reproduces the pool on tie-free
    scores.
    """
    if not 1 <= n <= len(scores):
        raise ValueError(f"n must be in [1, {len(scores)}], got {n}")
    _validate_scores(scores)
    ranked = sorted(scores.items(), key=lambda item: (-item[1], item[0]))
    tau = 0.0 if n == len(ranked) else ranked[n][1]
    return PrunedSet(frozenset(pid for pid, _ in ranked[:n]), tau)


def inject_golden(pruned: PrunedSet, golden_ids: Iterable[int]) -> PrunedSet:
    """Union in the golden ids the pruner missed; idempotent."""
    return PrunedSet(pruned.ids | frozenset(int(g) for g in golden_ids), pruned.tau)


def evaluate_pruner(
    scores: Mapping[int, float],
    entries: Iterable[Tuple[int, int]],
    decision_threshold: float = 0.5,
) -> float:
    """Accuracy of thresholded scores against labeled (passage_id, label) entries."""
    entries = list(entries)
    if not entries:
        raise ValueError("no entries to evaluate")
    correct = 0
    for pid, label in entries:
        if pid not in scores:
            raise KeyError(f"no relevance score for passage {pid}")
        correct += (scores[pid] > decision_threshold) == (label == 1)
    return correct / len(entries)


def embedding_set_stats(P: EmbeddingMatrix, N: EmbeddingMatrix) -> dict:
    """Distance between the two sets' per-dimension mean and variance vectors."""
    if P.d != N.d:
        raise ValueError("embedding sets must share a dimension")
    if P.n == 0 or N.n == 0:
        raise ValueError("embedding sets must be non-empty")
    p = P.values.astype(np.float64)
    n = N.values.astype(np.float64)
    return {
        "mean_l2": float(np.linalg.norm(p.mean(axis=0) - n.mean(axis=0))),
        "var_l2": float(np.linalg.norm(p.var(axis=0) - n.var(axis=0))),
        "mean_norm_P": float(np.linalg.norm(p, axis=1).mean()),
        "mean_norm_N": float(np.linalg.norm(n, axis=1).mean()),
    }


def train_membership_classifier(
    P: EmbeddingMatrix,
    N_subset: EmbeddingMatrix,
    seed: int = 0,
    epochs: int = 300,
    lr: float = 0.5,
) -> dict:
    """Logistic regression separating the two embedding sets.

    The pooled rows are shuffled by seed and the last fifth held out; returns
    weights, bias, and the held-out accuracy.  Uses the shared full-batch
    trainer, so results are bitwise deterministic.
    """
    if P.n != N_subset.n:
        raise ValueError("membership training requires a balanced dataset")
    if P.d != N_subset.d or P.n == 0:
        raise ValueError("sets must be non-empty and share a dimension")
    X = np.vstack([P.values.astype(np.float64), N_subset.values.astype(np.float64)])
    y = np.concatenate([np.ones(P.n), np.zeros(N_subset.n)])
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(y))
    X, y = X[order], y[order]
    n_dev = max(1, len(y) // 5)
    X_train, y_train = X[:-n_dev], y[:-n_dev]
    X_dev, y_dev = X[-n_dev:], y[-n_dev:]
    d = P.d

    def loss_and_grad(params: np.ndarray) -> tuple[float, np.ndarray]:
        w, b = params[:d], params[d]
        logits = X_train @ w + b
        losses = (
            np.maximum(logits, 0.0)
            - logits * y_train
            + np.log1p(np.exp(-np.abs(logits)))
        )
        sig = np.where(
            logits >= 0,
            1.0 / (1.0 + np.exp(-np.clip(logits, 0, None))),
            np.exp(np.clip(logits, None, 0)) / (1.0 + np.exp(np.clip(logits, None, 0))),
        )
        residual = sig - y_train
        grad = np.concatenate([X_train.T @ residual, [residual.sum()]])
        n = len(y_train)
        return float(losses.sum() / n), grad / n

    result = gd_minimize(loss_and_grad, d + 1, epochs, lr)
    w, b = result.params[:d], float(result.params[d])
    dev_pred = np.array([sigmoid(float(v)) > 0.5 for v in X_dev @ w + b])
    return {
        "weights": w,
        "bias": b,
        "dev_accuracy": float((dev_pred == (y_dev == 1.0)).mean()),
        "final_loss": result.final_loss,
    }


def load_relevance_scores(path: Union[str, Path]) -> dict[int, float]:
    """Read JSON-lines {"id", "p"} records; probabilities must sit in (0,1)."""
    scores: dict[int, float] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                pid, p = int(obj["id"]), float(obj["p"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise ScoreFormatError(f"{path}:{lineno}: bad score record: {e}") from e
            if not 0.0 < p < 1.0:
                raise ScoreFormatError(f"{path}:{lineno}: probability {p} not in (0,1)")
            if pid in scores:
                raise ScoreFormatError(f"{path}:{lineno}: duplicate id {pid}")
            scores[pid] = p
    return scores


def write_relevance_scores(scores: Mapping[int, float], path: Union[str, Path]) -> None:
    _validate_scores(scores)
    with open(path, "w", encoding="utf-8") as f:
        for pid in sorted(scores):
            f.write(json.dumps({"id": pid, "p": scores[pid]}) + "\n")


def write_pruned_set(pruned: PrunedSet, path: Union[str, Path]) -> None:
    """One-line JSON header (tau, count) followed by one ascending id per line."""
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps({"tau": pruned.tau, "count": len(pruned.ids)}) + "\n")
        for pid in sorted(pruned.ids):
            f.write(f"{pid}\n")


def load_pruned_set(path: Union[str, Path]) -> PrunedSet:
    with open(path, encoding="utf-8") as f:
        header_line = f.readline()
        try:
            header = json.loads(header_line)
            tau = float(header["tau"])
            count = int(header["count"])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise ScoreFormatError(f"{path}:1: bad pruned-set header: {e}") from e
        ids = set()
        for lineno, line in enumerate(f, start=2):
            if not line.strip():
                continue
            try:
                ids.add(int(line))
            except ValueError as e:
                raise ScoreFormatError(f"{path}:{lineno}: bad passage id: {e}") from e
    if len(ids) != count:
        raise ScoreFormatError(
            f"{path}: header count {count} does not match {len(ids)} ids"
        )
    return PrunedSet(frozenset(ids), tau)
