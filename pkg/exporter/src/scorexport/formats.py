"""Writers for the engine's on-disk interchange formats.

The export side owns an independent implementation of each format so that
a bad write shows up as a reader error instead of being masked by shared
code. Layouts:

* embedding index: ``R2D2EMB1`` magic, ``<II`` (n, d) header, n row ids
  as ``<u8``, then n*d values as ``<f2``.
* encoder output: ``R2D2ENC1`` magic, ``<II`` (T, h) header, T token
  kinds as ``u1``, T (start, end) char offsets as ``<u4`` pairs with
  0xFFFFFFFF/0xFFFFFFFF standing for "no offset", then T*h hidden values
  as ``<f4``.
* everything else is JSON lines, one record per row.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np

__all__ = [
    "EMB_MAGIC",
    "ENC_MAGIC",
    "NO_OFFSET",
    "MAX_TOKENS",
    "KIND_CLS",
    "KIND_QUESTION",
    "KIND_TITLE",
    "KIND_CONTEXT",
    "KIND_SEP",
    "FormatError",
    "question_file_key",
    "write_embedding_file",
    "write_encoder_file",
    "write_jsonl",
    "write_manifest",
]

EMB_MAGIC = b"R2D2EMB1"
ENC_MAGIC = b"R2D2ENC1"
NO_OFFSET = 0xFFFFFFFF
MAX_TOKENS = 512

# token kind codes; fixed by the encoder-output format
KIND_CLS = 0
KIND_QUESTION = 1
KIND_TITLE = 2
KIND_CONTEXT = 3
KIND_SEP = 4

_VALID_KINDS = frozenset(
    (KIND_CLS, KIND_QUESTION, KIND_TITLE, KIND_CONTEXT, KIND_SEP)
)


class FormatError(ValueError):
    pass


def question_file_key(question: str) -> str:
    """Filename-safe key for per-question files: first 16 hex of sha256."""
    return hashlib.sha256(question.encode("utf-8")).hexdigest()[:16]


def write_embedding_file(
    row_ids: Sequence[int], values: np.ndarray, path: Union[str, Path]
) -> None:
    """Write an embedding index: one fp16 row per id, ids in file order."""
    vals = np.asarray(values)
    if vals.ndim != 2:
        raise FormatError("values must be a (n, d) matrix")
    n, d = vals.shape
    if n < 1 or d < 1:
        raise FormatError("empty embedding matrix")
    ids = np.asarray(list(row_ids), dtype="<u8")
    if ids.shape != (n,):
        raise FormatError(f"{len(ids)} row ids for {n} rows")
    if len(set(int(i) for i in ids)) != n:
        raise FormatError("duplicate row ids")
    with np.errstate(over="ignore"):
        quantized = vals.astype("<f2")
    if not np.isfinite(quantized.astype(np.float32)).all():
        raise FormatError("values overflow float16")
    with open(path, "wb") as f:
        f.write(EMB_MAGIC)
        f.write(struct.pack("<II", n, d))
        f.write(ids.tobytes())
        f.write(quantized.tobytes())


def write_encoder_file(
    token_kinds: Sequence[int],
    offsets: Sequence[Optional[tuple[int, int]]],
    hidden: np.ndarray,
    path: Union[str, Path],
) -> None:
    """Write one (question, passage) encoder pass.

    The reader rejects files breaking the layout contract, so the same
    rules are enforced here: exactly one CLS token and it sits at
    position 0, context tokens carry real char offsets, non-context
    tokens carry none, and T stays within the format's token limit.
    """
    hid = np.asarray(hidden, dtype="<f4")
    if hid.ndim != 2 or hid.shape[0] < 1:
        raise FormatError("hidden must be a non-empty (T, h) matrix")
    T, h = hid.shape
    if T > MAX_TOKENS:
        raise FormatError(f"T = {T} exceeds the {MAX_TOKENS}-token limit")
    if not np.isfinite(hid.astype(np.float32)).all():
        raise FormatError("hidden states must be finite")
    kinds = np.asarray(list(token_kinds), dtype=np.uint8)
    if kinds.shape != (T,) or len(offsets) != T:
        raise FormatError("token kinds and offsets must have length T")
    if not set(int(k) for k in np.unique(kinds)) <= _VALID_KINDS:
        raise FormatError("unknown token kind value")
    if kinds[0] != KIND_CLS or int(np.count_nonzero(kinds == KIND_CLS)) != 1:
        raise FormatError("exactly one CLS token required, at position 0")
    packed = np.empty((T, 2), dtype="<u4")
    for i, (kind, span) in enumerate(zip(kinds, offsets)):
        if kind == KIND_CONTEXT:
            if span is None or span[1] <= span[0] or span[0] < 0:
                raise FormatError("context tokens need valid char offsets")
        elif span is not None:
            raise FormatError("only context tokens may carry char offsets")
        packed[i] = (NO_OFFSET, NO_OFFSET) if span is None else span
    with open(path, "wb") as f:
        f.write(ENC_MAGIC)
        f.write(struct.pack("<II", T, h))
        f.write(kinds.tobytes())
        f.write(packed.tobytes())
        f.write(hid.tobytes())


def write_jsonl(rows: Sequence[Mapping], path: Union[str, Path]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row) + "\n")


def write_manifest(path: Union[str, Path], payload: Mapping) -> None:
    """One JSON header per export describing format version and choices."""
    Path(path).write_text(
        json.dumps(dict(payload), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
