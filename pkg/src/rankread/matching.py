"""Answer span matching for distant supervision.

Tokenization, exact token-window matching, and best-F1 soft matching with a
length-bounded search that prunes spans which provably cannot beat the
running best.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "TokenSeq",
    "MatchSpan",
    "Annotations",
    "AnnotationError",
    "BoundViolation",
    "SearchEffort",
    "SpanAnnotator",
    "tokenize_simple",
    "f1_overlap",
    "exact_match_spans",
    "soft_match",
    "soft_match_bruteforce",
    "span_length_bound",
    "search_effort",
]

# Maximal alphanumeric run, else one non-space character per token.
_TOKEN_RE = re.compile(r"[^\W_]+|\S", re.UNICODE)


@dataclass(frozen=True)
class TokenSeq:
    """Lowercased tokens plus their character offsets into the source text."""

    tokens: tuple[str, ...]
    char_spans: tuple[tuple[int, int], ...]

    def __post_init__(self) -> None:
        if len(self.tokens) != len(self.char_spans):
            raise ValueError("tokens and char_spans must have equal length")
        prev_end = 0
        for start, end in self.char_spans:
            if start < prev_end or end <= start:
                raise ValueError("char_spans must be ascending and non-overlapping")
            prev_end = end

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class MatchSpan:
    """Inclusive token range with its overlap F1 against an answer."""

    start_tok: int
    end_tok: int
    f1: float

    def __post_init__(self) -> None:
        if self.start_tok > self.end_tok:
            raise ValueError("start_tok must be <= end_tok")
        if not self.f1 > 0.0:
            raise ValueError("match spans require f1 > 0")


def tokenize_simple(text: str) -> TokenSeq:
    """Split into lowercased alphanumeric runs and single punctuation tokens."""
    tokens: list[str] = []
    spans: list[tuple[int, int]] = []
    for m in _TOKEN_RE.finditer(text):
        tokens.append(m.group(0).lower())
        spans.append((m.start(), m.end()))
    return TokenSeq(tuple(tokens), tuple(spans))


def f1_overlap(span_tokens: Sequence[str], answer_tokens: Sequence[str]) -> float:
    """Bag-overlap F1 = 2*shared / (|span| + |answer|)."""
    if not span_tokens or not answer_tokens:
        raise ValueError("f1_overlap requires non-empty token sequences")
    shared = sum((Counter(span_tokens) & Counter(answer_tokens)).values())
    return (2.0 * shared) / (len(span_tokens) + len(answer_tokens))


def exact_match_spans(passage: TokenSeq, answer: TokenSeq) -> list[MatchSpan]:
    """All token windows of the passage equal to the answer tokens (f1 = 1)."""
    if len(answer) == 0:
        raise ValueError("answer must be non-empty")
    ans = answer.tokens
    la = len(ans)
    out = []
    for start in range(len(passage) - la + 1):
        if passage.tokens[start : start + la] == ans:
            out.append(MatchSpan(start, start + la - 1, 1.0))
    return out


def span_length_bound(t_len: int, a_len: int, shared: int) -> float:
    """Max size at which a span could still beat a (t_len, shared) span's F1.

    Every span of size >= this bound has F1 <= 2*shared/(t_len + a_len); the
    bound is never below t_len.
    """
    if not 0 < shared <= a_len:
        raise ValueError("shared token count must satisfy 0 < shared <= a_len")
    return a_len * (t_len + a_len - shared) / shared


class BoundViolation(AssertionError):
    """Raised by audited searches when a pruned span beats the kept best."""


def _encode(passage: Sequence[str], answer: Sequence[str]) -> tuple[np.ndarray, np.ndarray, int]:
    """Map tokens to small integer ids shared between passage and answer."""
    vocab: dict[str, int] = {}
    p_ids = np.empty(len(passage), dtype=np.int32)
    for i, tok in enumerate(passage):
        p_ids[i] = vocab.setdefault(tok, len(vocab))
    a_ids = np.empty(len(answer), dtype=np.int32)
    for i, tok in enumerate(answer):
        a_ids[i] = vocab.setdefault(tok, len(vocab))
    return p_ids, a_ids, len(vocab)


def _prefix_counts(p_ids: np.ndarray, n_vocab: int) -> np.ndarray:
    """prefix[i] holds per-token counts of p_ids[:i]; shape (L+1, n_vocab)."""
    L = len(p_ids)
    onehot = np.zeros((L, n_vocab), dtype=np.int32)
    onehot[np.arange(L), p_ids] = 1
    prefix = np.zeros((L + 1, n_vocab), dtype=np.int32)
    np.cumsum(onehot, axis=0, out=prefix[1:])
    return prefix


def _size_scores(
    prefix: np.ndarray, ans_count: np.ndarray, la: int, size: int
) -> tuple[np.ndarray, np.ndarray]:
    """F1 and shared-token counts of every span of one size, by start."""
    counts = prefix[size:] - prefix[:-size]
    shared = np.minimum(counts, ans_count).sum(axis=1)
    return (2.0 * shared) / (size + la), shared


def _soft_match_bounded(
    p_ids: np.ndarray, a_ids: np.ndarray, n_vocab: int, audit: bool
) -> tuple[Optional[tuple[int, int, float]], int]:
    """Size-major bounded scan; returns ((start, size, f1) or None, spans examined).

    Only a strictly better score replaces the best, so ties keep the first
    span found: the shortest and, within a size, the earliest.  The length
    limit starts at 2 and is recomputed from each new best span, so
    single-token spans are always scanned.
    """
    L = len(p_ids)
    la = len(a_ids)
    ans_count = np.bincount(a_ids, minlength=n_vocab)
    prefix = _prefix_counts(p_ids, n_vocab)

    best: Optional[tuple[int, int, float]] = None
    best_score = 0.0
    len_limit = 2.0
    examined = 0

    size = 1
    while size < len_limit and size <= L:
        scores, shared = _size_scores(prefix, ans_count, la, size)
        examined += L - size + 1
        idx = int(np.argmax(scores))
        row_max = float(scores[idx])
        if row_max > best_score:
            best = (idx, size, row_max)
            best_score = row_max
            len_limit = la * (size + la - int(shared[idx])) / int(shared[idx])
        size += 1

    if audit:
        for skipped in range(size, L + 1):
            scores, _ = _size_scores(prefix, ans_count, la, skipped)
            row_max = float(scores.max())
            if row_max > best_score:
                raise BoundViolation(
                    f"span of size {skipped} scored {row_max} > kept best {best_score}"
                )
    return best, examined


# Full (start, end) F1 tensors above this many cells fall back to a per-size scan.
_BRUTE_TENSOR_CELLS = 4_000_000


def _soft_match_brute(
    p_ids: np.ndarray, a_ids: np.ndarray, n_vocab: int
) -> tuple[Optional[tuple[int, int, float]], int]:
    """Exhaustive scan of every span, same tie rules as the bounded search."""
    L = len(p_ids)
    la = len(a_ids)
    examined = L * (L + 1) // 2
    ans_count = np.bincount(a_ids, minlength=n_vocab)
    prefix = _prefix_counts(p_ids, n_vocab)

    if L * L * n_vocab <= _BRUTE_TENSOR_CELLS:
        counts = prefix[np.newaxis, 1:, :] - prefix[:L, np.newaxis, :]
        shared = np.minimum(counts, ans_count[np.newaxis, np.newaxis, :]).sum(axis=2)
        lengths = np.arange(L)[np.newaxis, :] - np.arange(L)[:, np.newaxis] + 1
        denom = np.where(lengths >= 1, lengths + la, 1)
        f1 = np.where(lengths >= 1, (2.0 * shared) / denom, -1.0)
        best_score = float(f1.max(initial=-1.0))
        if best_score <= 0.0:
            return None, examined
        cand = np.argwhere(f1 == best_score)
        order = np.lexsort((cand[:, 0], cand[:, 1] - cand[:, 0]))
        s, e = cand[order[0]]
        return (int(s), int(e - s + 1), best_score), examined

    best: Optional[tuple[int, int, float]] = None
    best_score = 0.0
    for size in range(1, L + 1):
        scores, _ = _size_scores(prefix, ans_count, la, size)
        idx = int(np.argmax(scores))
        row_max = float(scores[idx])
        if row_max > best_score:
            best = (idx, size, row_max)
            best_score = row_max
    if best_score <= 0.0:
        return None, examined
    return best, examined


def soft_match(passage: TokenSeq, answer: TokenSeq, *, audit: bool = False) -> Optional[MatchSpan]:
    """Best non-zero-F1 span via the length-bounded size-major search.

    Ties are broken toward the shorter span, then the earlier start (the
    order the search visits spans in).  With ``audit`` the spans skipped by
    the length limit are re-scored and a violation of the pruning bound
    raises :class:`BoundViolation`.
    """
    if len(answer) == 0:
        raise ValueError("answer must be non-empty")
    if len(passage) == 0:
        return None
    p_ids, a_ids, n_vocab = _encode(passage.tokens, answer.tokens)
    found, _ = _soft_match_bounded(p_ids, a_ids, n_vocab, audit)
    if found is None:
        return None
    start, size, f1 = found
    return MatchSpan(start, start + size - 1, f1)


def soft_match_bruteforce(passage: TokenSeq, answer: TokenSeq) -> Optional[MatchSpan]:
    """Exhaustive best-F1 span; the testing oracle for :func:`soft_match`."""
    if len(answer) == 0:
        raise ValueError("answer must be non-empty")
    if len(passage) == 0:
        return None
    p_ids, a_ids, n_vocab = _encode(passage.tokens, answer.tokens)
    found, _ = _soft_match_brute(p_ids, a_ids, n_vocab)
    if found is None:
        return None
    start, size, f1 = found
    return MatchSpan(start, start + size - 1, f1)


@dataclass(frozen=True)
class SearchEffort:
    """Spans visited by the bounded search vs. the exhaustive one."""

    bounded: int
    bruteforce: int


def search_effort(passage: TokenSeq, answer: TokenSeq) -> SearchEffort:
    """Count spans each strategy examines on one (passage, answer) pair."""
    if len(answer) == 0:
        raise ValueError("answer must be non-empty")
    p_ids, a_ids, n_vocab = _encode(passage.tokens, answer.tokens)
    _, bounded = _soft_match_bounded(p_ids, a_ids, n_vocab, audit=False)
    L = len(p_ids)
    return SearchEffort(bounded=bounded, bruteforce=L * (L + 1) // 2)


@dataclass
class Annotations:
    """Distant-supervision targets pooled over a reader's input passages."""

    starts: set[tuple[int, int]] = field(default_factory=set)
    ends: set[tuple[int, int]] = field(default_factory=set)
    boundaries: set[tuple[int, int, int]] = field(default_factory=set)
    positive_passages: set[int] = field(default_factory=set)

    def add(self, passage_id: int, span: MatchSpan) -> None:
        self.starts.add((passage_id, span.start_tok))
        self.ends.add((passage_id, span.end_tok))
        self.boundaries.add((passage_id, span.start_tok, span.end_tok))
        self.positive_passages.add(passage_id)


class AnnotationError(ValueError):
    pass


class SpanAnnotator:
    """Answer matching under a configurable tokenizer.

    Word-level matching (the default tokenizer) serves retrieval filtering
    and reranker positives; reader-side annotation plugs in the reader's own
    tokenization instead.
    """

    def __init__(self, tokenizer: Callable[[str], TokenSeq] = tokenize_simple) -> None:
        self.tokenizer = tokenizer

    def has_exact_match(self, text: str, answers: Iterable[str]) -> bool:
        """True if any answer occurs as a token window of the text."""
        passage = self.tokenizer(text)
        for answer in answers:
            ans = self.tokenizer(answer)
            if len(ans) and exact_match_spans(passage, ans):
                return True
        return False

    def annotate_example(self, example, reader_input_ids: Sequence[int], store) -> Annotations:
        """Exact-match spans everywhere; best soft match in the golden passage.

        Answers matching nowhere are dropped.  Raises when no answer leaves
        any annotation (such examples should have been filtered upstream).
        """
        golden_id = example.golden_passage_id
        annotations = Annotations()
        tokenized = {
            pid: self.tokenizer(store.get(pid).context) for pid in reader_input_ids
        }
        for answer in example.answers:
            ans = self.tokenizer(answer)
            if len(ans) == 0:
                continue
            matched = False
            for pid, passage in tokenized.items():
                for span in exact_match_spans(passage, ans):
                    annotations.add(pid, span)
                    matched = True
            if not matched and golden_id is not None and golden_id in tokenized:
                soft = soft_match(tokenized[golden_id], ans)
                if soft is not None:
                    annotations.add(golden_id, soft)
        if not annotations.boundaries:
            raise AnnotationError(
                "no answer matched any reader input passage; "
                "example should have been filtered out"
            )
        return annotations
