"""Score providers: pluggable sources for every model-derived quantity.

The pipeline never runs a neural network; it asks a provider for query
embeddings, rerank logits, encoder outputs, generated answers, and span
log-probabilities.  Two implementations ship here: a deterministic lexical
toy (idf overlap heuristics, good enough to drive every stage on synthetic
corpora) and a file-backed provider that replays precomputed outputs.
"""

from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .corpus import Passage, PassageStore
from .dense_index import EmbeddingMatrix
from .matching import tokenize_simple
from .reader import EncoderOutput, ReaderHeads, TokenKind, read_encoder_output

__all__ = [
    "ProviderGapError",
    "ScoreProvider",
    "LexicalToyProvider",
    "FileBackedProvider",
    "get_provider",
    "toy_reader_heads",
    "question_file_key",
    "TOY_HIDDEN_DIM",
]

TOY_HIDDEN_DIM = 4
_RUN_SCALE = 6.0
_REL_SCALE = 8.0
_WINDOW = 10


class ProviderGapError(RuntimeError):
    """A provider cannot supply a quantity a stage needs."""


def question_file_key(question: str) -> str:
    """Filename-safe key for per-question files: first 16 hex of sha256."""
    return hashlib.sha256(question.encode("utf-8")).hexdigest()[:16]


class ScoreProvider:
    """Capability surface; subclasses override what they can supply."""

    kind = "abstract"

    def query_embedding(self, question: str) -> np.ndarray:
        raise ProviderGapError(f"{self.kind} provider has no query embeddings")

    def retrieval_scores(self, question: str, passage_ids: Sequence[int]) -> dict[int, float]:
        raise ProviderGapError(f"{self.kind} provider has no retrieval scores")

    def rerank_scores(self, question: str, passage_ids: Sequence[int]) -> dict[int, float]:
        raise ProviderGapError(f"{self.kind} provider has no rerank scores")

    def encoder_output(self, question: str, passage_id: int) -> EncoderOutput:
        raise ProviderGapError(f"{self.kind} provider has no encoder outputs")

    def generate_answer(self, question: str, passage_ids: Sequence[int]) -> tuple[str, float]:
        raise ProviderGapError(f"{self.kind} provider has no generative answers")

    def span_log_prob(self, question: str, text: str, passage_ids: Sequence[int]) -> float:
        raise ProviderGapError(f"{self.kind} provider has no span log-probabilities")


def toy_reader_heads() -> ReaderHeads:
    """Fixed heads that read the lexical encoder layout [u, v, 1, rel].

    s_start = u, s_end = v, s_joint[s, e] = u_s + v_e, s_passage = rel.
    """
    W_j = np.zeros((TOY_HIDDEN_DIM, TOY_HIDDEN_DIM))
    W_j[2, 0] = 1.0
    b_j = np.zeros(TOY_HIDDEN_DIM)
    b_j[1] = 1.0
    return ReaderHeads(
        w_start=np.eye(TOY_HIDDEN_DIM)[0],
        w_end=np.eye(TOY_HIDDEN_DIM)[1],
        W_j=W_j,
        b_j=b_j,
        w_p=np.eye(TOY_HIDDEN_DIM)[3],
    )


class LexicalToyProvider(ScoreProvider):
    """Deterministic idf-overlap stand-in for every neural component."""

    kind = "lexical-toy"

    def __init__(self, store: PassageStore) -> None:
        self.store = store
        self._doc_tokens: dict[int, tuple[str, ...]] = {}
        df: dict[str, int] = {}
        for pid in store.ids():
            tokens = tokenize_simple(store.get(pid).context).tokens
            self._doc_tokens[pid] = tokens
            for token in set(tokens):
                df[token] = df.get(token, 0) + 1
        n_docs = len(self._doc_tokens)
        self.idf = {
            token: math.log((1 + n_docs) / (1 + count)) + 1.0
            for token, count in df.items()
        }
        self._vocab = sorted(self.idf)
        self._vocab_index = {token: i for i, token in enumerate(self._vocab)}

    # -- retrieval ---------------------------------------------------------

    def lexical_score(self, question: str, passage: Passage) -> float:
        """Sum of idf over unique question tokens present in the passage."""
        passage_tokens = set(self._doc_tokens.get(passage.id, tokenize_simple(passage.context).tokens))
        # summation in sorted order keeps float rounding independent of hash seed
        return sum(
            self.idf.get(token, 0.0)
            for token in sorted(set(tokenize_simple(question).tokens))
            if token in passage_tokens
        )

    def retrieval_scores(self, question: str, passage_ids: Sequence[int]) -> dict[int, float]:
        return {
            pid: self.lexical_score(question, self.store.get(pid)) for pid in passage_ids
        }

    def query_embedding(self, question: str) -> np.ndarray:
        vec = np.zeros(len(self._vocab), dtype=np.float32)
        for token in set(tokenize_simple(question).tokens):
            idx = self._vocab_index.get(token)
            if idx is not None:
                vec[idx] = self.idf[token]
        return vec

    def build_index(self, passage_ids: Optional[Sequence[int]] = None) -> EmbeddingMatrix:
        """Presence-vector index whose inner products equal lexical scores."""
        ids = list(passage_ids) if passage_ids is not None else self.store.ids()
        rows = np.zeros((len(ids), len(self._vocab)), dtype=np.float32)
        for r, pid in enumerate(ids):
            for token in set(self._doc_tokens[pid]):
                rows[r, self._vocab_index[token]] = 1.0
        return EmbeddingMatrix.from_fp32(np.array(ids, dtype=np.uint64), rows)

    # -- reranking ---------------------------------------------------------

    def rerank_scores(self, question: str, passage_ids: Sequence[int]) -> dict[int, float]:
        """Length-normalized overlap: precision-flavored, unlike raw retrieval."""
        out = {}
        for pid in passage_ids:
            passage = self.store.get(pid)
            raw = self.lexical_score(question, passage)
            out[pid] = raw / (1.0 + math.sqrt(len(self._doc_tokens[pid])))
        return out

    # -- reader inputs -----------------------------------------------------

    def _question_idf_mass(self, question: str) -> tuple[set, float]:
        q_tokens = set(tokenize_simple(question).tokens)
        total = sum(self.idf.get(t, 0.0) for t in sorted(q_tokens))
        return q_tokens, total

    def _novel_runs(self, question: str, pid: int) -> list[tuple[int, int, float]]:
        """Maximal runs of non-question word tokens, weighted by how strongly
        the preceding window overlaps the question."""
        q_tokens, q_mass = self._question_idf_mass(question)
        tokens = self._doc_tokens[pid]
        runs = []
        i = 0
        while i < len(tokens):
            if tokens[i][0].isalnum() and tokens[i] not in q_tokens:
                j = i
                while (
                    j + 1 < len(tokens)
                    and tokens[j + 1][0].isalnum()
                    and tokens[j + 1] not in q_tokens
                ):
                    j += 1
                window = set(tokens[max(0, i - _WINDOW) : i])
                overlap = sum(self.idf.get(t, 0.0) for t in sorted(window & q_tokens))
                weight = overlap / q_mass if q_mass > 0 else 0.0
                runs.append((i, j, weight))
                i = j + 1
            else:
                i += 1
        return runs

    def encoder_output(self, question: str, passage_id: int) -> EncoderOutput:
        passage = self.store.get(passage_id)
        q_seq = tokenize_simple(question)
        t_seq = tokenize_simple(passage.title)
        c_seq = tokenize_simple(passage.context)

        budget = 512 - (len(q_seq) + len(t_seq) + 4)
        if budget < 1:
            raise ProviderGapError(
                f"question+title leave no room for context of passage {passage_id}"
            )
        n_ctx = min(len(c_seq), budget)

        runs = self._novel_runs(question, passage_id)
        u = np.zeros(len(c_seq.tokens))
        v = np.zeros(len(c_seq.tokens))
        for i, j, weight in runs:
            u[i] = max(u[i], weight * _RUN_SCALE)
            v[j] = max(v[j], weight * _RUN_SCALE)

        _, q_mass = self._question_idf_mass(question)
        overlap = self.lexical_score(question, passage)
        rel = overlap / q_mass if q_mass > 0 else 0.0

        kinds = [int(TokenKind.CLS)]
        offsets: list[Optional[tuple[int, int]]] = [None]
        rows = [[0.0, 0.0, 1.0, rel * _REL_SCALE]]
        for _ in q_seq.tokens:
            kinds.append(int(TokenKind.QUESTION))
            offsets.append(None)
            rows.append([0.0, 0.0, 1.0, 0.0])
        kinds.append(int(TokenKind.SEP))
        offsets.append(None)
        rows.append([0.0, 0.0, 1.0, 0.0])
        for _ in t_seq.tokens:
            kinds.append(int(TokenKind.TITLE))
            offsets.append(None)
            rows.append([0.0, 0.0, 1.0, 0.0])
        kinds.append(int(TokenKind.SEP))
        offsets.append(None)
        rows.append([0.0, 0.0, 1.0, 0.0])
        for i in range(n_ctx):
            kinds.append(int(TokenKind.CONTEXT))
            offsets.append(c_seq.char_spans[i])
            rows.append([u[i], v[i], 1.0, 0.0])
        kinds.append(int(TokenKind.SEP))
        offsets.append(None)
        rows.append([0.0, 0.0, 1.0, 0.0])

        return EncoderOutput(
            passage_id=passage_id,
            hidden=np.array(rows, dtype=np.float64),
            token_kinds=np.array(kinds, dtype=np.uint8),
            token_to_char=tuple(offsets),
        )

    # -- generative stand-in -------------------------------------------------

    def _candidate_runs(self, question: str, passage_ids: Sequence[int]):
        """(weight, pid, start, end) for every novel run across the passages."""
        out = []
        for pid in passage_ids:
            for i, j, weight in self._novel_runs(question, pid):
                out.append((weight, pid, i, j))
        return out

    def _run_text(self, pid: int, start: int, end: int) -> str:
        c_seq = tokenize_simple(self.store.get(pid).context)
        return self.store.get(pid).context[c_seq.char_spans[start][0] : c_seq.char_spans[end][1]]

    def generate_answer(self, question: str, passage_ids: Sequence[int]) -> tuple[str, float]:
        candidates = self._candidate_runs(question, passage_ids)
        if not candidates:
            return "", -20.0
        z = sum(math.exp(w * _RUN_SCALE) for w, *_ in candidates) + 1.0
        best = min(candidates, key=lambda c: (-c[0], c[1], c[2]))
        weight, pid, start, end = best
        return self._run_text(pid, start, end), math.log(math.exp(weight * _RUN_SCALE) / z)

    def span_log_prob(self, question: str, text: str, passage_ids: Sequence[int]) -> float:
        candidates = self._candidate_runs(question, passage_ids)
        z = sum(math.exp(w * _RUN_SCALE) for w, *_ in candidates) + 1.0
        wanted = " ".join(text.lower().split())
        best = 0.0
        matched = False
        for weight, pid, start, end in candidates:
            run_text = " ".join(self._run_text(pid, start, end).lower().split())
            if run_text == wanted:
                matched = True
                best = max(best, weight)
        score = math.exp(best * _RUN_SCALE) if matched else 1.0
        return math.log(score / z)


def _load_jsonl_keyed(path: Path, key_field: str) -> dict:
    out = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                key = obj[key_field]
            except (json.JSONDecodeError, KeyError) as e:
                raise ProviderGapError(f"{path}:{lineno}: bad provider row ({e})") from e
            if key in out:
                raise ProviderGapError(f"{path}:{lineno}: duplicate {key_field} {key!r}")
            out[key] = obj
    return out


class FileBackedProvider(ScoreProvider):
    """Replays exported model outputs from disk.

    Per-question rows are keyed by the question string in a ``question_key``
    field.  Encoder outputs live one file per (question, passage) at
    ``<encoder_dir>/<question_file_key(question)>.<passage_id>.enc``.
    """

    kind = "file-backed"

    def __init__(
        self,
        query_embeddings: Optional[Union[str, Path]] = None,
        rerank_scores: Optional[Union[str, Path]] = None,
        encoder_dir: Optional[Union[str, Path]] = None,
        generative: Optional[Union[str, Path]] = None,
        span_logps: Optional[Union[str, Path]] = None,
    ) -> None:
        self._query_path = Path(query_embeddings) if query_embeddings else None
        self._rerank_path = Path(rerank_scores) if rerank_scores else None
        self._encoder_dir = Path(encoder_dir) if encoder_dir else None
        self._generative_path = Path(generative) if generative else None
        self._span_path = Path(span_logps) if span_logps else None
        self._cache: dict[str, dict] = {}

    def _table(self, path: Optional[Path], capability: str) -> dict:
        if path is None:
            raise ProviderGapError(f"file-backed provider has no {capability} file bound")
        key = str(path)
        if key not in self._cache:
            if not path.exists():
                raise ProviderGapError(f"{capability} file missing: {path}")
            self._cache[key] = _load_jsonl_keyed(path, "question_key")
        return self._cache[key]

    def _row(self, path: Optional[Path], capability: str, question: str) -> dict:
        table = self._table(path, capability)
        if question not in table:
            raise ProviderGapError(f"{capability}: no row for question {question!r}")
        return table[question]

    def query_embedding(self, question: str) -> np.ndarray:
        row = self._row(self._query_path, "query embeddings", question)
        return np.asarray(row["embedding"], dtype=np.float32)

    def rerank_scores(self, question: str, passage_ids: Sequence[int]) -> dict[int, float]:
        row = self._row(self._rerank_path, "rerank scores", question)
        scores = {int(pid): float(s) for pid, s in row["scores"].items()}
        missing = [pid for pid in passage_ids if pid not in scores]
        if missing:
            raise ProviderGapError(
                f"rerank scores: question {question!r} lacks passages {missing[:5]}"
            )
        return {pid: scores[pid] for pid in passage_ids}

    def encoder_output(self, question: str, passage_id: int) -> EncoderOutput:
        if self._encoder_dir is None:
            raise ProviderGapError("file-backed provider has no encoder directory bound")
        path = self._encoder_dir / f"{question_file_key(question)}.{passage_id}.enc"
        if not path.exists():
            raise ProviderGapError(f"encoder output missing: {path}")
        return read_encoder_output(path, passage_id)

    def generate_answer(self, question: str, passage_ids: Sequence[int]) -> tuple[str, float]:
        row = self._row(self._generative_path, "generative answers", question)
        return str(row["answer"]), float(row["logp"])

    def span_log_prob(self, question: str, text: str, passage_ids: Sequence[int]) -> float:
        row = self._row(self._span_path, "span log-probabilities", question)
        logps = row.get("span_logps", {})
        if text in logps:
            return float(logps[text])
        if "default_logp" in row:
            return float(row["default_logp"])
        raise ProviderGapError(
            f"span log-probabilities: no score for {text!r} and no default_logp"
        )


def get_provider(spec: Mapping, store: PassageStore) -> ScoreProvider:
    """Build a provider from a config mapping ({'kind': ..., paths...})."""
    kind = spec.get("kind")
    if kind == "lexical-toy":
        return LexicalToyProvider(store)
    if kind == "file-backed":
        return FileBackedProvider(
            query_embeddings=spec.get("query_embeddings"),
            rerank_scores=spec.get("rerank_scores"),
            encoder_dir=spec.get("encoder_dir"),
            generative=spec.get("generative"),
            span_logps=spec.get("span_logps"),
        )
    raise ValueError(f"unknown provider kind {kind!r}")
