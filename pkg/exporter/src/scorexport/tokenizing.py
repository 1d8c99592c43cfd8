"""Whitespace tokenizer with character offsets and a hashed vocabulary.

Real checkpoints ship their own subword tokenizers. The desk-scale
checkpoints built by this package have no trained vocabulary, so tokens
map to ids by stable hashing instead: the id of a word is derived from
its sha256 digest, bucketed above the reserved special ids. Two runs of
the same text therefore produce identical ids, which is all the export
contract needs.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass

from .formats import (
    KIND_CLS,
    KIND_CONTEXT,
    KIND_QUESTION,
    KIND_SEP,
    KIND_TITLE,
    MAX_TOKENS,
)

__all__ = [
    "VOCAB_SIZE",
    "PAD_ID",
    "CLS_ID",
    "SEP_ID",
    "TITLE_MARK_ID",
    "CONTEXT_MARK_ID",
    "MARKERS",
    "Token",
    "tokenize",
    "token_id",
    "encoder_layout",
    "pair_ids",
]

VOCAB_SIZE = 512
_RESERVED = 8

PAD_ID = 0
CLS_ID = 1
SEP_ID = 2
TITLE_MARK_ID = 3
CONTEXT_MARK_ID = 4

# segment-start markers; recorded in every export manifest
MARKERS = {
    "title_start": "[TIT]",
    "context_start": "[CTX]",
    "sequence_end": "[SEP]",
}

_TOKEN_RE = re.compile(r"\S+")


@dataclass(frozen=True)
class Token:
    text: str
    start: int
    end: int


def tokenize(text: str) -> list[Token]:
    """Split on whitespace, keeping exact char spans into the original."""
    return [
        Token(m.group(), m.start(), m.end()) for m in _TOKEN_RE.finditer(text)
    ]


def token_id(token: str) -> int:
    digest = hashlib.sha256(token.lower().encode("utf-8")).digest()
    return _RESERVED + int.from_bytes(digest[:8], "big") % (VOCAB_SIZE - _RESERVED)


def encoder_layout(
    question: str, title: str, context: str
) -> tuple[list[int], list[int], list]:
    """Token ids, kind codes, and char offsets for one encoder pass.

    Layout: CLS, question, [TIT], title, [CTX], context, [SEP]. The two
    segment markers and the trailing separator are written with the
    separator kind code and carry no offsets; only context tokens point
    back into the context string. Context is truncated from the right so
    the total stays within the format's token limit; the fixed prefix is
    never truncated and must fit on its own.
    """
    q = tokenize(question)
    t = tokenize(title)
    c = tokenize(context)
    budget = MAX_TOKENS - 4 - len(q) - len(t)
    if budget < (1 if c else 0):
        raise ValueError(
            f"question and title use {len(q) + len(t)} tokens; "
            "no room left for context"
        )
    c = c[:budget]
    ids = [CLS_ID]
    kinds = [KIND_CLS]
    offsets: list = [None]
    for tok in q:
        ids.append(token_id(tok.text))
        kinds.append(KIND_QUESTION)
        offsets.append(None)
    ids.append(TITLE_MARK_ID)
    kinds.append(KIND_SEP)
    offsets.append(None)
    for tok in t:
        ids.append(token_id(tok.text))
        kinds.append(KIND_TITLE)
        offsets.append(None)
    ids.append(CONTEXT_MARK_ID)
    kinds.append(KIND_SEP)
    offsets.append(None)
    for tok in c:
        ids.append(token_id(tok.text))
        kinds.append(KIND_CONTEXT)
        offsets.append((tok.start, tok.end))
    ids.append(SEP_ID)
    kinds.append(KIND_SEP)
    offsets.append(None)
    return ids, kinds, offsets


def pair_ids(first: str, second: str) -> list[int]:
    """CLS, first segment, SEP, second segment, SEP, for scoring models.

    The second segment is truncated from the right to fit the token
    limit, then the first; at least one token of each survives when the
    segment is non-empty.
    """
    a = [token_id(tok.text) for tok in tokenize(first)]
    b = [token_id(tok.text) for tok in tokenize(second)]
    budget = MAX_TOKENS - 3
    if len(a) + len(b) > budget:
        keep_b = max(min(len(b), budget - len(a)), 1 if b else 0)
        b = b[:keep_b]
        a = a[: budget - len(b)]
    return [CLS_ID] + a + [SEP_ID] + b + [SEP_ID]
