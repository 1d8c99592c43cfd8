"""Component fusion: generative answer reranking, score aggregation over
log-features, the extractive/abstractive binary decision, and the shared
full-batch gradient-descent trainer used by every trained head in the engine.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence, Union

import numpy as np

__all__ = [
    "FEATURE_NAMES",
    "AggregationModel",
    "DecisionModel",
    "DivergenceError",
    "TrainResult",
    "gd_minimize",
    "bce",
    "sigmoid",
    "answer_rerank",
    "aggregate_score",
    "train_aggregation",
    "best_aggregated",
    "train_binary_decision",
    "decide",
    "save_model",
    "load_model",
]

# Feature order for x(a): extractive span prob, generative answer prob,
# retriever prob of the span's passage, reranker prob of the span's passage.
FEATURE_NAMES = ("e", "g", "r", "rr")


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainResult:
    params: np.ndarray
    final_loss: float
    epochs_run: int
    final_lr: float


def gd_minimize(
    loss_and_grad: Callable[[np.ndarray], tuple[float, np.ndarray]],
    n_params: int,
    epochs: int,
    lr: float,
) -> TrainResult:
    """Full-batch gradient descent at fp64 from zero init.

    The learning rate halves whenever the loss increases between epochs;
    non-finite loss or gradient raises :class:`DivergenceError`.  Fully
    deterministic for fixed inputs.
    """
    params = np.zeros(n_params, dtype=np.float64)
    prev_loss = np.inf
    for _ in range(epochs):
        loss, grad = loss_and_grad(params)
        grad = np.asarray(grad, dtype=np.float64)
        if not np.isfinite(loss) or not np.isfinite(grad).all():
            raise DivergenceError(f"non-finite loss or gradient (loss={loss})")
        if loss > prev_loss:
            lr *= 0.5
        params = params - lr * grad
        prev_loss = loss
    final_loss, _ = loss_and_grad(params)
    if not np.isfinite(final_loss):
        raise DivergenceError(f"non-finite final loss ({final_loss})")
    return TrainResult(params, float(final_loss), epochs, lr)


def sigmoid(x: float) -> float:
    if x >= 0:
        return float(1.0 / (1.0 + np.exp(-x)))
    e = np.exp(x)
    return float(e / (1.0 + e))


def bce(logit: float, target: int) -> dict:
    """Binary cross-entropy in log-sum-exp form, with d(loss)/d(logit)."""
    if not np.isfinite(logit):
        raise ValueError("logit must be finite")
    if target not in (0, 1):
        raise ValueError("target must be 0 or 1")
    loss = max(logit, 0.0) - logit * target + np.log1p(np.exp(-abs(logit)))
    return {"loss": float(loss), "grad": sigmoid(logit) - target}


def answer_rerank(spans: Sequence, gen_logp: Mapping[str, float]) -> list:
    """Reorder decoded spans by generative log-probability of their text.

    Attaches ``logp_g`` to each span; the sort is stable, so spans with tied
    generative scores keep their extractive order.
    """
    missing = [s.text for s in spans if s.text not in gen_logp]
    if missing:
        raise KeyError(f"missing generative scores for {missing[:3]}")
    for s in spans:
        s.logp_g = float(gen_logp[s.text])
    return sorted(spans, key=lambda s: -s.logp_g)


@dataclass
class AggregationModel:
    """w, b over log-features selected by ``mask`` (subset of FEATURE_NAMES)."""

    w: np.ndarray
    b: float
    mask: tuple[str, ...] = FEATURE_NAMES
    metadata: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.w = np.asarray(self.w, dtype=np.float64)
        unknown = set(self.mask) - set(FEATURE_NAMES)
        if unknown:
            raise ValueError(f"unknown feature names {sorted(unknown)}")
        if len(self.w) != len(self.mask):
            raise ValueError("weight length must equal mask length")
        if not (np.isfinite(self.w).all() and np.isfinite(self.b)):
            raise ValueError("model parameters must be finite")


@dataclass
class DecisionModel:
    """w over [s_agg, s_g_star], plus bias."""

    w: np.ndarray
    b: float
    metadata: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.w = np.asarray(self.w, dtype=np.float64)
        if self.w.shape != (2,):
            raise ValueError("decision model takes exactly two scores")
        if not (np.isfinite(self.w).all() and np.isfinite(self.b)):
            raise ValueError("model parameters must be finite")


def _mask_indices(mask: Sequence[str]) -> list[int]:
    return [FEATURE_NAMES.index(name) for name in mask]


def _log_features(features: np.ndarray, mask: Sequence[str]) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[np.newaxis, :]
    if x.shape[1] != len(FEATURE_NAMES):
        raise ValueError(f"features must have {len(FEATURE_NAMES)} columns")
    picked = x[:, _mask_indices(mask)]
    if (picked <= 0).any():
        raise ValueError("features must be strictly positive")
    return np.log(picked)


def aggregate_score(features: Sequence[float], model: AggregationModel) -> float:
    """w . log x + b for one answer span's feature vector."""
    logs = _log_features(np.asarray(features, dtype=np.float64), model.mask)
    return float(logs[0] @ model.w + model.b)


def best_aggregated(features: np.ndarray, model: AggregationModel) -> tuple[int, float]:
    """Index and score of the best span; ties keep the earliest (extractive) rank."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError("features must be a non-empty matrix")
    scores = _log_features(x, model.mask) @ model.w + model.b
    idx = int(np.argmax(scores))
    return idx, float(scores[idx])


def train_aggregation(
    dataset: Sequence[tuple[np.ndarray, int]],
    mask: Sequence[str] = FEATURE_NAMES,
    seed: int = 0,
    epochs: int = 200,
    lr: float = 0.5,
) -> AggregationModel:
    """Fit w, b so the correct span wins the softmax over each question's spans.

    Loss is the mean over questions of -log softmax(w . log x + b)[gt],
    minimized by the shared full-batch trainer from zero init.
    """
    if not dataset:
        raise ValueError("empty dataset")
    prepared = []
    for features, gt in dataset:
        logs = _log_features(np.asarray(features, dtype=np.float64), mask)
        if not 0 <= gt < logs.shape[0]:
            raise IndexError(f"gt index {gt} out of range for {logs.shape[0]} spans")
        prepared.append((logs, gt))
    n_feat = len(mask)

    def loss_and_grad(params: np.ndarray) -> tuple[float, np.ndarray]:
        w, b = params[:n_feat], params[n_feat]
        total = 0.0
        grad = np.zeros_like(params)
        for logs, gt in prepared:
            z = logs @ w + b
            z_shift = z - z.max()
            log_z = np.log(np.exp(z_shift).sum())
            total += log_z - z_shift[gt]
            p = np.exp(z_shift - log_z)
            p[gt] -= 1.0
            grad[:n_feat] += logs.T @ p
            grad[n_feat] += p.sum()
        n = len(prepared)
        return total / n, grad / n

    result = gd_minimize(loss_and_grad, n_feat + 1, epochs, lr)
    return AggregationModel(
        w=result.params[:n_feat],
        b=float(result.params[n_feat]),
        mask=tuple(mask),
        metadata={
            "seed": seed,
            "epochs": epochs,
            "lr": lr,
            "final_loss": result.final_loss,
        },
    )


def train_binary_decision(
    dataset: Sequence[tuple[float, float, int]],
    seed: int = 0,
    epochs: int = 500,
    lr: float = 0.1,
) -> DecisionModel:
    """Fit the abstractive-vs-extractive classifier on (s_agg, s_g_star, target).

    Target 1 means the generated answer was the correct one.  Mean BCE,
    shared trainer, zero init.
    """
    if not dataset:
        raise ValueError("empty dataset")
    xs = np.array([[s_agg, s_g] for s_agg, s_g, _ in dataset], dtype=np.float64)
    ts = np.array([t for _, _, t in dataset], dtype=np.float64)
    if not set(np.unique(ts)) <= {0.0, 1.0}:
        raise ValueError("targets must be 0 or 1")

    def loss_and_grad(params: np.ndarray) -> tuple[float, np.ndarray]:
        w, b = params[:2], params[2]
        logits = xs @ w + b
        losses = np.maximum(logits, 0.0) - logits * ts + np.log1p(np.exp(-np.abs(logits)))
        sig = np.where(
            logits >= 0,
            1.0 / (1.0 + np.exp(-np.clip(logits, 0, None))),
            np.exp(np.clip(logits, None, 0)) / (1.0 + np.exp(np.clip(logits, None, 0))),
        )
        residual = sig - ts
        grad = np.concatenate([xs.T @ residual, [residual.sum()]])
        n = len(ts)
        return float(losses.sum() / n), grad / n

    result = gd_minimize(loss_and_grad, 3, epochs, lr)
    return DecisionModel(
        w=result.params[:2],
        b=float(result.params[2]),
        metadata={
            "seed": seed,
            "epochs": epochs,
            "lr": lr,
            "final_loss": result.final_loss,
        },
    )


def prefers_generated(s_agg: float, s_g_star: float, model: DecisionModel) -> bool:
    """True when sigmoid(w . [s_agg, s_g*] + b) >= 0.5."""
    logit = float(np.array([s_agg, s_g_star]) @ model.w + model.b)
    return sigmoid(logit) >= 0.5


def decide(
    span_answer: str,
    generated_answer: str,
    s_agg: float,
    s_g_star: float,
    model: DecisionModel,
) -> str:
    """Pick the generated answer when the classifier prefers it."""
    if prefers_generated(s_agg, s_g_star, model):
        return generated_answer
    return span_answer


def save_model(model: Union[AggregationModel, DecisionModel], path: Union[str, Path]) -> None:
    if isinstance(model, AggregationModel):
        payload = {
            "kind": "aggregation",
            "w": model.w.tolist(),
            "b": model.b,
            "mask": list(model.mask),
            "metadata": model.metadata,
        }
    elif isinstance(model, DecisionModel):
        payload = {
            "kind": "decision",
            "w": model.w.tolist(),
            "b": model.b,
            "metadata": model.metadata,
        }
    else:
        raise TypeError(f"cannot serialize {type(model).__name__}")
    Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def load_model(path: Union[str, Path]) -> Union[AggregationModel, DecisionModel]:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    kind = payload.get("kind")
    if kind == "aggregation":
        return AggregationModel(
            w=np.array(payload["w"], dtype=np.float64),
            b=float(payload["b"]),
            mask=tuple(payload["mask"]),
            metadata=payload.get("metadata", {}),
        )
    if kind == "decision":
        return DecisionModel(
            w=np.array(payload["w"], dtype=np.float64),
            b=float(payload["b"]),
            metadata=payload.get("metadata", {}),
        )
    raise ValueError(f"unknown model kind {kind!r} in {path}")
