"""Checkpoint construction and loading for the five exportable models.

Export jobs load any directory that ``save_pretrained`` produced, so
production checkpoints drop in directly. For environments without
trained weights (CI, the test suite) ``build_checkpoints`` materializes
seeded randomly initialized models of the right shapes: a dual-use
768-wide encoder for retrieval, small cross-encoders for reranking and
passage pruning, a small encoder for reader hidden states, and a small
causal LM for answer generation and span scoring. Weights are random;
shapes, dtypes, and file formats are exactly those of the real thing.
"""

from __future__ import annotations

from pathlib import Path
from typing import Union

import torch
from transformers import (
    BertConfig,
    BertForSequenceClassification,
    BertModel,
    GPT2Config,
    GPT2LMHeadModel,
)

from .formats import MAX_TOKENS
from .tokenizing import CLS_ID, PAD_ID, SEP_ID, VOCAB_SIZE

__all__ = ["KINDS", "EMBEDDING_DIM", "build_checkpoints", "load_model"]

KINDS = ("retriever", "reranker", "reader-encoder", "generative", "pruner")

# retrieval embeddings are 768-wide; the other models stay small
EMBEDDING_DIM = 768
_SMALL_HIDDEN = 64


def _bert_config(hidden: int, labels: int = 0) -> BertConfig:
    config = BertConfig(
        vocab_size=VOCAB_SIZE,
        hidden_size=hidden,
        num_hidden_layers=1,
        num_attention_heads=4,
        intermediate_size=hidden,
        max_position_embeddings=MAX_TOKENS,
        pad_token_id=PAD_ID,
    )
    if labels:
        config.num_labels = labels
    return config


def _build(kind: str) -> torch.nn.Module:
    if kind == "retriever":
        return BertModel(_bert_config(EMBEDDING_DIM))
    if kind == "reranker":
        return BertForSequenceClassification(_bert_config(_SMALL_HIDDEN, labels=1))
    if kind == "reader-encoder":
        return BertModel(_bert_config(_SMALL_HIDDEN))
    if kind == "generative":
        return GPT2LMHeadModel(
            GPT2Config(
                vocab_size=VOCAB_SIZE,
                n_positions=MAX_TOKENS,
                n_embd=_SMALL_HIDDEN,
                n_layer=2,
                n_head=4,
                bos_token_id=CLS_ID,
                eos_token_id=SEP_ID,
                pad_token_id=PAD_ID,
            )
        )
    if kind == "pruner":
        return BertForSequenceClassification(_bert_config(_SMALL_HIDDEN, labels=1))
    raise ValueError(f"unknown model kind {kind!r}")


def build_checkpoints(out_dir: Union[str, Path], seed: int = 0) -> dict[str, Path]:
    """Construct and save one seeded checkpoint per model kind.

    Each kind gets its own derived seed so adding or removing one kind
    never shifts the weights of another.
    """
    base = Path(out_dir)
    written: dict[str, Path] = {}
    for i, kind in enumerate(KINDS):
        torch.manual_seed(seed * 1009 + i)
        model = _build(kind)
        target = base / kind
        model.save_pretrained(target)
        written[kind] = target
    return written


def load_model(checkpoint: Union[str, Path], kind: str, device: str = "cpu"):
    """Load a saved checkpoint in eval mode on the requested device."""
    path = Path(checkpoint)
    if kind == "retriever":
        model = BertModel.from_pretrained(path)
    elif kind in ("reranker", "pruner"):
        model = BertForSequenceClassification.from_pretrained(path)
    elif kind == "reader-encoder":
        model = BertModel.from_pretrained(path)
    elif kind == "generative":
        model = GPT2LMHeadModel.from_pretrained(path)
    else:
        raise ValueError(f"unknown model kind {kind!r}")
    return model.to(device).eval()
