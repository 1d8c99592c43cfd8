"""Export jobs: run a checkpoint over a corpus and write engine files.

Three operations cover the five model kinds. ``export_embeddings`` runs
the retriever over passages (and optionally questions) and writes the
binary embedding index plus a query-embedding JSONL. ``export_scores``
runs the reranker, pruner, or generative model and writes score JSONL
files. ``export_encoder_outputs`` runs the reader encoder per
(question, passage) pair and writes one binary encoder file each.

Every job runs in eval mode under ``torch.inference_mode`` on a single
thread, so re-running a job over the same inputs writes bit-identical
files. Each output gets a manifest recording the format version, the
segment markers, and the truncation rule.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np
import torch

from . import formats
from .checkpoints import EMBEDDING_DIM, KINDS, load_model
from .tokenizing import (
    CLS_ID,
    MARKERS,
    PAD_ID,
    SEP_ID,
    VOCAB_SIZE,
    encoder_layout,
    pair_ids,
    token_id,
    tokenize,
)

__all__ = [
    "ExportJob",
    "export_embeddings",
    "export_scores",
    "export_encoder_outputs",
    "DEFAULT_SPAN_LOGP",
]

# floor reported for spans outside the scored candidate list
DEFAULT_SPAN_LOGP = math.log(1e-8)

_TOKENIZER_NOTE = "whitespace tokens, sha256-hashed ids, vocab 512"
_TRUNCATION_NOTE = "context truncated from the right to keep T <= 512"


@dataclass(frozen=True)
class ExportJob:
    """One export run: which model, over what data, written where."""

    model_kind: str
    dataset: Optional[Path]
    passages: Optional[Path]
    checkpoint: Path
    out: Path
    batch_size: int = 8
    device: str = "cpu"

    def __post_init__(self) -> None:
        if self.model_kind not in KINDS:
            raise ValueError(
                f"model kind {self.model_kind!r} not one of {KINDS}"
            )
        if self.batch_size < 1:
            raise ValueError("batch size must be positive")


def _read_jsonl(path: Union[str, Path]) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                rows.append(json.loads(line))
    return rows


def _load_passages(path: Union[str, Path]) -> list[dict]:
    rows = _read_jsonl(path)
    for row in rows:
        row["id"] = int(row["id"])
    return rows


def _load_questions(path: Union[str, Path]) -> list[str]:
    return [str(row["question"]) for row in _read_jsonl(path)]


def _prepare(job: ExportJob, expected_kind: str):
    if job.model_kind != expected_kind:
        raise ValueError(
            f"this operation runs the {expected_kind} model, "
            f"job says {job.model_kind!r}"
        )
    torch.set_num_threads(1)
    return load_model(job.checkpoint, job.model_kind, job.device)


def _batches(items: Sequence, size: int) -> Iterable[Sequence]:
    for i in range(0, len(items), size):
        yield items[i : i + size]


def _padded(id_lists: Sequence[list[int]], device: str):
    width = max(len(ids) for ids in id_lists)
    input_ids = torch.full((len(id_lists), width), PAD_ID, dtype=torch.long)
    mask = torch.zeros((len(id_lists), width), dtype=torch.long)
    for i, ids in enumerate(id_lists):
        input_ids[i, : len(ids)] = torch.tensor(ids, dtype=torch.long)
        mask[i, : len(ids)] = 1
    return input_ids.to(device), mask.to(device)


def _cls_vectors(model, id_lists: Sequence[list[int]], batch_size: int, device: str):
    chunks = []
    with torch.inference_mode():
        for batch in _batches(id_lists, batch_size):
            input_ids, mask = _padded(batch, device)
            out = model(input_ids=input_ids, attention_mask=mask)
            chunks.append(out.last_hidden_state[:, 0].cpu().numpy())
    return np.concatenate(chunks, axis=0)


def _logits(model, id_lists: Sequence[list[int]], batch_size: int, device: str):
    chunks = []
    with torch.inference_mode():
        for batch in _batches(id_lists, batch_size):
            input_ids, mask = _padded(batch, device)
            out = model(input_ids=input_ids, attention_mask=mask)
            chunks.append(out.logits[:, 0].cpu().numpy())
    return np.concatenate(chunks, axis=0)


def _passage_text(row: dict) -> str:
    return f"{row['title']} {row['context']}"


def export_embeddings(
    job: ExportJob, queries_out: Optional[Union[str, Path]] = None
) -> dict:
    """Run the retriever and write the passage index, plus query rows.

    Passage rows are encoded as title then context; the CLS vector is
    the embedding. Questions, when a dataset and ``queries_out`` are
    given, go through the same encoder alone and land in a JSONL file
    keyed by question string.
    """
    model = _prepare(job, "retriever")
    if job.passages is None:
        raise ValueError("embedding export needs a passage file")
    passages = _load_passages(job.passages)
    ids = [pair_ids(row["title"], row["context"]) for row in passages]
    vectors = _cls_vectors(model, ids, job.batch_size, job.device)
    if vectors.shape[1] != EMBEDDING_DIM:
        raise ValueError(
            f"retriever produced d={vectors.shape[1]}, expected {EMBEDDING_DIM}"
        )
    formats.write_embedding_file(
        [row["id"] for row in passages], vectors.astype(np.float16), job.out
    )
    summary = {
        "format": formats.EMB_MAGIC.decode(),
        "model_kind": job.model_kind,
        "rows": len(passages),
        "dim": int(vectors.shape[1]),
        "tokenizer": _TOKENIZER_NOTE,
        "truncation": _TRUNCATION_NOTE,
    }
    if queries_out is not None:
        if job.dataset is None:
            raise ValueError("query export needs a dataset file")
        questions = _load_questions(job.dataset)
        q_ids = [
            [CLS_ID] + [token_id(t.text) for t in tokenize(q)] + [SEP_ID]
            for q in questions
        ]
        q_vecs = _cls_vectors(model, q_ids, job.batch_size, job.device)
        formats.write_jsonl(
            [
                {
                    "question_key": q,
                    "embedding": [float(v) for v in vec.astype(np.float32)],
                }
                for q, vec in zip(questions, q_vecs)
            ],
            queries_out,
        )
        summary["query_rows"] = len(questions)
    formats.write_manifest(Path(str(job.out) + ".manifest.json"), summary)
    return summary


def _rerank_rows(model, questions, passages, batch_size, device):
    rows = []
    for q in questions:
        ids = [pair_ids(q, _passage_text(p)) for p in passages]
        scores = _logits(model, ids, batch_size, device)
        rows.append(
            {
                "question_key": q,
                "scores": {str(p["id"]): float(s) for p, s in zip(passages, scores)},
            }
        )
    return rows


def _pruner_rows(model, passages, batch_size, device):
    # relevance input is the passage text followed by its title
    ids = [pair_ids(p["context"], p["title"]) for p in passages]
    logits = _logits(model, ids, batch_size, device)
    probs = 1.0 / (1.0 + np.exp(-logits.astype(np.float64)))
    probs = np.clip(probs, 1e-7, 1.0 - 1e-7)
    return [
        {"id": p["id"], "p": float(prob)} for p, prob in zip(passages, probs)
    ]


def _generative_prompt(question: str, passages: Sequence[dict]) -> list[int]:
    ids = [CLS_ID] + [token_id(t.text) for t in tokenize(question)] + [SEP_ID]
    budget = formats.MAX_TOKENS - 32
    for p in passages:
        for tok in tokenize(_passage_text(p)):
            if len(ids) >= budget:
                return ids
            ids.append(token_id(tok.text))
        if len(ids) >= budget:
            return ids
        ids.append(SEP_ID)
    return ids


def _generative_rows(model, questions, passages, device, max_new_tokens=4):
    rows = []
    with torch.inference_mode():
        for q in questions:
            prompt = _generative_prompt(q, passages)
            input_ids = torch.tensor([prompt], dtype=torch.long, device=device)
            out = model.generate(
                input_ids=input_ids,
                max_new_tokens=max_new_tokens,
                min_new_tokens=1,
                do_sample=False,
                output_scores=True,
                return_dict_in_generate=True,
                pad_token_id=PAD_ID,
            )
            new_tokens = out.sequences[0, input_ids.shape[1] :]
            logp = 0.0
            words = []
            for step, tok in zip(out.scores, new_tokens):
                t = int(tok)
                logp += float(torch.log_softmax(step[0], dim=-1)[t])
                if t not in (PAD_ID, CLS_ID, SEP_ID):
                    words.append(f"w{t}")
            rows.append(
                {"question_key": q, "answer": " ".join(words), "logp": logp}
            )
    return rows


def _span_logp_rows(model, questions, passages, candidates, device):
    rows = []
    with torch.inference_mode():
        for q in questions:
            scored = {}
            for text in candidates.get(q, ()):
                span = [token_id(t.text) for t in tokenize(text)]
                if not span:
                    scored[text] = DEFAULT_SPAN_LOGP
                    continue
                prompt = _generative_prompt(q, passages)
                input_ids = torch.tensor(
                    [prompt + span], dtype=torch.long, device=device
                )
                logits = model(input_ids=input_ids).logits[0]
                logp = 0.0
                for i, tok in enumerate(span):
                    pos = len(prompt) + i - 1
                    logp += float(torch.log_softmax(logits[pos], dim=-1)[tok])
                scored[text] = logp
            rows.append(
                {
                    "question_key": q,
                    "span_logps": scored,
                    "default_logp": DEFAULT_SPAN_LOGP,
                }
            )
    return rows


def export_scores(
    job: ExportJob,
    span_candidates: Optional[Union[str, Path]] = None,
    span_out: Optional[Union[str, Path]] = None,
) -> dict:
    """Run a scoring model and write JSONL score files.

    Reranker jobs write one row per question holding a logit for every
    passage. Pruner jobs write one row per passage with its relevance
    probability, strictly inside (0, 1) by construction. Generative jobs
    write one (answer, logp) row per question to ``job.out`` and, when
    ``span_out`` is given, per-span log-probabilities for the candidate
    texts listed in ``span_candidates``.
    """
    if job.model_kind not in ("reranker", "pruner", "generative"):
        raise ValueError(
            f"score export runs reranker, pruner, or generative models, "
            f"job says {job.model_kind!r}"
        )
    model = _prepare(job, job.model_kind)
    if job.passages is None:
        raise ValueError("score export needs a passage file")
    passages = _load_passages(job.passages)
    summary = {
        "format": "jsonl",
        "model_kind": job.model_kind,
        "tokenizer": _TOKENIZER_NOTE,
        "truncation": _TRUNCATION_NOTE,
    }
    if job.model_kind == "pruner":
        rows = _pruner_rows(model, passages, job.batch_size, job.device)
        summary["schema"] = "relevance: {id, p} with p in (0,1)"
        summary["input"] = "passage context then title, one pass per passage"
    else:
        if job.dataset is None:
            raise ValueError(f"{job.model_kind} export needs a dataset file")
        questions = _load_questions(job.dataset)
        if job.model_kind == "reranker":
            rows = _rerank_rows(
                model, questions, passages, job.batch_size, job.device
            )
            summary["schema"] = "rerank: {question_key, scores: {id: logit}}"
        else:
            rows = _generative_rows(model, questions, passages, job.device)
            summary["schema"] = "generative: {question_key, answer, logp}"
            if span_out is not None:
                cand_rows = (
                    _read_jsonl(span_candidates) if span_candidates else []
                )
                candidates = {
                    str(r["question_key"]): [str(t) for t in r["candidates"]]
                    for r in cand_rows
                }
                span_rows = _span_logp_rows(
                    model, questions, passages, candidates, job.device
                )
                formats.write_jsonl(span_rows, span_out)
                formats.write_manifest(
                    Path(str(span_out) + ".manifest.json"),
                    {
                        **summary,
                        "schema": (
                            "spans: {question_key, span_logps, default_logp}"
                        ),
                        "rows": len(span_rows),
                        "default_logp": DEFAULT_SPAN_LOGP,
                    },
                )
    formats.write_jsonl(rows, job.out)
    summary["rows"] = len(rows)
    formats.write_manifest(Path(str(job.out) + ".manifest.json"), summary)
    return summary


def export_encoder_outputs(job: ExportJob) -> dict:
    """Run the reader encoder per (question, passage) pair.

    Each pair becomes one binary file named by the question's file key
    and the passage id. Hidden states come out of the encoder's last
    layer; token kinds and char offsets follow the layout built by
    ``encoder_layout``, so offsets always reconstruct context substrings
    and the CLS vector sits at position 0.
    """
    model = _prepare(job, "reader-encoder")
    if job.dataset is None or job.passages is None:
        raise ValueError("encoder export needs dataset and passage files")
    questions = _load_questions(job.dataset)
    passages = _load_passages(job.passages)
    out_dir = Path(job.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    pairs = []
    for q in questions:
        for p in passages:
            ids, kinds, offsets = encoder_layout(q, p["title"], p["context"])
            pairs.append((q, p["id"], ids, kinds, offsets))
    hidden_dim = None
    with torch.inference_mode():
        for batch in _batches(pairs, job.batch_size):
            input_ids, mask = _padded([ids for _, _, ids, _, _ in batch], job.device)
            out = model(input_ids=input_ids, attention_mask=mask)
            states = out.last_hidden_state.cpu().numpy()
            for row, (q, pid, ids, kinds, offsets) in enumerate(batch):
                hidden = states[row, : len(ids)].astype(np.float32)
                hidden_dim = hidden.shape[1]
                name = f"{formats.question_file_key(q)}.{pid}.enc"
                formats.write_encoder_file(kinds, offsets, hidden, out_dir / name)
    summary = {
        "format": formats.ENC_MAGIC.decode(),
        "model_kind": job.model_kind,
        "files": len(pairs),
        "hidden_dim": int(hidden_dim) if hidden_dim else 0,
        "markers": MARKERS,
        "tokenizer": _TOKENIZER_NOTE,
        "truncation": _TRUNCATION_NOTE,
        "naming": "<sha256(question)[:16]>.<passage_id>.enc",
    }
    formats.write_manifest(out_dir / "manifest.json", summary)
    return summary
