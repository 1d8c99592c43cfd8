"""Half-precision dense index with exact top-K inner-product search.

Rows are stored as IEEE-754 binary16 and widened to fp32 for scoring; search
is exhaustive, with ties broken by ascending passage id.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np

__all__ = [
    "EmbeddingMatrix",
    "RetrievalResult",
    "IndexFormatError",
    "MAGIC",
    "to_fp16",
    "from_fp16",
    "write_index",
    "read_index",
    "search",
    "subset_index",
]

MAGIC = b"R2D2EMB1"
_U32_MAX = 2**32 - 1


class IndexFormatError(ValueError):
    pass


def to_fp16(x: float) -> np.float16:
    """Round-to-nearest-even binary16; overflow becomes +/-inf, NaN is an error."""
    if np.isnan(x):
        raise ValueError("cannot quantize NaN")
    with np.errstate(over="ignore"):
        return np.float16(x)


def from_fp16(h: np.float16) -> float:
    """Exact widening of a binary16 value."""
    return float(np.float64(h))


@dataclass(frozen=True)
class RetrievalResult:
    passage_id: int
    score: float


@dataclass(frozen=True)
class EmbeddingMatrix:
    """n x d half-precision rows keyed by unique passage ids."""

    row_ids: np.ndarray  # uint64, shape (n,)
    values: np.ndarray  # float16, shape (n, d)

    def __post_init__(self) -> None:
        if self.row_ids.dtype != np.uint64 or self.values.dtype != np.float16:
            raise TypeError("row_ids must be uint64 and values float16")
        if self.values.ndim != 2 or self.values.shape[1] < 1:
            raise ValueError("values must be 2-D with d > 0")
        if len(self.row_ids) != self.values.shape[0]:
            raise ValueError("row_ids and values row counts differ")
        if len(np.unique(self.row_ids)) != len(self.row_ids):
            raise ValueError("row_ids must be unique")
        if self.values.size and np.isnan(self.values).any():
            raise ValueError("index values must not contain NaN")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]

    @classmethod
    def from_fp32(cls, row_ids: Iterable[int], values: np.ndarray) -> "EmbeddingMatrix":
        """Quantize finite fp32/fp64 rows; overflow past binary16 range is an error."""
        ids = np.asarray(list(row_ids), dtype=np.uint64)
        vals = np.asarray(values, dtype=np.float64)
        if vals.ndim != 2:
            raise ValueError("values must be 2-D")
        if vals.size and not np.isfinite(vals).all():
            raise ValueError("index values must be finite")
        with np.errstate(over="ignore"):
            quantized = vals.astype(np.float16)
        if quantized.size and np.isinf(quantized).any():
            raise ValueError("value overflows binary16 range (max 65504)")
        return cls(ids, quantized)


def write_index(matrix: EmbeddingMatrix, path: Union[str, Path]) -> None:
    if matrix.n > _U32_MAX or matrix.d > _U32_MAX:
        raise IndexFormatError("n and d must fit in u32")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", matrix.n, matrix.d))
        f.write(matrix.row_ids.astype("<u8").tobytes())
        f.write(matrix.values.astype("<f2").tobytes())


def read_index(path: Union[str, Path]) -> EmbeddingMatrix:
    blob = Path(path).read_bytes()
    if blob[: len(MAGIC)] != MAGIC:
        raise IndexFormatError(f"bad magic in {path}")
    header_end = len(MAGIC) + 8
    if len(blob) < header_end:
        raise IndexFormatError("truncated header")
    n, d = struct.unpack("<II", blob[len(MAGIC) : header_end])
    if d < 1:
        raise IndexFormatError("dimension must be positive")
    ids_end = header_end + n * 8
    expected_end = ids_end + n * d * 2
    if len(blob) != expected_end:
        raise IndexFormatError(
            f"payload size mismatch: header implies {expected_end} bytes, file has {len(blob)}"
        )
    row_ids = np.frombuffer(blob, dtype="<u8", count=n, offset=header_end).astype(np.uint64)
    values = (
        np.frombuffer(blob, dtype="<f2", count=n * d, offset=ids_end)
        .astype(np.float16)
        .reshape(n, d)
    )
    return EmbeddingMatrix(row_ids, values)


def search(index: EmbeddingMatrix, query: Sequence[float], k: int) -> list[RetrievalResult]:
    """Exactly the K largest inner products, fp32 accumulation over widened rows.

    Ties are broken by ascending passage id. K = 0 is allowed (empty result),
    which is the only valid K on an empty index.
    """
    q = np.asarray(query, dtype=np.float32)
    if q.shape != (index.d,):
        raise ValueError(f"query dimension {q.shape} does not match index d={index.d}")
    if not 0 <= k <= index.n:
        raise ValueError(f"K must be in [0, {index.n}], got {k}")
    if k == 0:
        return []
    # One fp32 dot per row, not a matmul: keeps accumulation order fixed so
    # scores are bit-identical to a per-row reference regardless of BLAS.
    vals32 = index.values.astype(np.float32)
    scores = np.fromiter(
        (np.dot(vals32[i], q) for i in range(index.n)), dtype=np.float32, count=index.n
    )
    order = np.lexsort((index.row_ids, -scores))[:k]
    return [
        RetrievalResult(int(index.row_ids[i]), float(scores[i])) for i in order
    ]


def subset_index(index: EmbeddingMatrix, keep_ids: Iterable[int]) -> EmbeddingMatrix:
    """Restrict rows to keep_ids, preserving stored order."""
    keep = {int(i) for i in keep_ids}
    known = {int(i) for i in index.row_ids}
    unknown = keep - known
    if unknown:
        raise KeyError(f"unknown passage ids: {sorted(unknown)[:5]}")
    mask = np.fromiter((int(i) in keep for i in index.row_ids), dtype=bool, count=index.n)
    return EmbeddingMatrix(index.row_ids[mask], index.values[mask])
