"""Extractive reader mathematics over ingested encoder outputs.

Score heads, cross-passage softmax distributions (one normalization pooled
over every passage at the reader's input), span decoding with factorization
subsets, and the marginalized training loss with analytic gradients.
"""

from __future__ import annotations

import base64
import json
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np

__all__ = [
    "TokenKind",
    "EncoderOutput",
    "ReaderHeads",
    "ScoreSet",
    "Distributions",
    "AnswerSpan",
    "EncoderFormatError",
    "InvalidAnnotationError",
    "ENC_MAGIC",
    "compute_scores",
    "normalize",
    "decode_spans",
    "reader_loss",
    "passage_rerank_by_reader",
    "write_encoder_output",
    "read_encoder_output",
    "save_heads",
    "load_heads",
]

ENC_MAGIC = b"R2D2ENC1"
MAX_TOKENS = 512
_NO_OFFSET = 0xFFFFFFFF


class TokenKind(IntEnum):
    CLS = 0
    QUESTION = 1
    TITLE = 2
    CONTEXT = 3
    SEP = 4


class EncoderFormatError(ValueError):
    pass


class InvalidAnnotationError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderOutput:
    """Token representations for one (question, passage) encoder pass."""

    passage_id: int
    hidden: np.ndarray  # (T, h) float
    token_kinds: np.ndarray  # (T,) uint8 of TokenKind
    token_to_char: tuple[Optional[tuple[int, int]], ...]

    def __post_init__(self) -> None:
        hidden = np.asarray(self.hidden, dtype=np.float64)
        object.__setattr__(self, "hidden", hidden)
        kinds = np.asarray(self.token_kinds, dtype=np.uint8)
        object.__setattr__(self, "token_kinds", kinds)
        T = hidden.shape[0]
        if hidden.ndim != 2 or T < 1:
            raise EncoderFormatError("hidden must be a non-empty (T, h) matrix")
        if T > MAX_TOKENS:
            raise EncoderFormatError(f"T = {T} exceeds the {MAX_TOKENS}-token limit")
        if not np.isfinite(hidden).all():
            raise EncoderFormatError("hidden states must be finite")
        if kinds.shape != (T,) or len(self.token_to_char) != T:
            raise EncoderFormatError("token_kinds and token_to_char must have length T")
        valid_kinds = {int(k) for k in TokenKind}
        if not set(np.unique(kinds)) <= valid_kinds:
            raise EncoderFormatError("unknown token kind value")
        if kinds[0] != TokenKind.CLS or np.count_nonzero(kinds == TokenKind.CLS) != 1:
            raise EncoderFormatError("exactly one CLS token required, at position 0")
        for kind, offsets in zip(kinds, self.token_to_char):
            if kind == TokenKind.CONTEXT:
                if offsets is None or offsets[1] <= offsets[0] or offsets[0] < 0:
                    raise EncoderFormatError("CONTEXT tokens need valid char offsets")
            elif kind in (TokenKind.CLS, TokenKind.QUESTION, TokenKind.TITLE):
                if offsets is not None:
                    raise EncoderFormatError(
                        "CLS/QUESTION/TITLE tokens must not carry char offsets"
                    )

    @property
    def T(self) -> int:
        return self.hidden.shape[0]

    @property
    def h(self) -> int:
        return self.hidden.shape[1]

    def context_mask(self) -> np.ndarray:
        return self.token_kinds == TokenKind.CONTEXT


@dataclass(frozen=True)
class ReaderHeads:
    w_start: np.ndarray
    w_end: np.ndarray
    W_j: np.ndarray
    b_j: np.ndarray
    w_p: np.ndarray

    def __post_init__(self) -> None:
        for name in ("w_start", "w_end", "W_j", "b_j", "w_p"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        h = self.w_start.shape[0]
        shapes = {
            "w_start": (h,),
            "w_end": (h,),
            "W_j": (h, h),
            "b_j": (h,),
            "w_p": (h,),
        }
        for name, want in shapes.items():
            arr = getattr(self, name)
            if arr.shape != want:
                raise ValueError(f"{name} must have shape {want}, got {arr.shape}")
            if not np.isfinite(arr).all():
                raise ValueError(f"{name} must be finite")

    @property
    def h(self) -> int:
        return self.w_start.shape[0]


@dataclass
class ScoreSet:
    """Raw head scores for one passage; s_joint is valid on the span band only."""

    passage_id: int
    s_start: np.ndarray  # (T,)
    s_end: np.ndarray  # (T,)
    s_joint: np.ndarray  # (T, T), meaningful where 0 <= e - s < max_span_len
    s_passage: float
    max_span_len: int


@dataclass
class AnswerSpan:
    """Decoded extractive answer; fusion fills the downstream log-probs."""

    passage_id: int
    start_tok: int
    end_tok: int
    text: str
    logp_e: float
    logp_g: Optional[float] = None
    logp_r: Optional[float] = None
    logp_rr: Optional[float] = None

    def __post_init__(self) -> None:
        if self.start_tok > self.end_tok:
            raise ValueError("start_tok must be <= end_tok")


def compute_scores(enc: EncoderOutput, heads: ReaderHeads, max_span_len: int) -> ScoreSet:
    """Head scores: start/end dots, banded bilinear joint, CLS passage score."""
    if heads.h != enc.h:
        raise ValueError(f"heads dimension {heads.h} does not match encoder h={enc.h}")
    if max_span_len < 1:
        raise ValueError("max_span_len must be >= 1")
    hidden = enc.hidden
    s_start = hidden @ heads.w_start
    s_end = hidden @ heads.w_end
    projected = hidden @ heads.W_j.T + heads.b_j
    s_joint = projected @ hidden.T
    s_passage = float(hidden[0] @ heads.w_p)
    return ScoreSet(enc.passage_id, s_start, s_end, s_joint, s_passage, max_span_len)


def _logsumexp(values: np.ndarray) -> float:
    m = values.max()
    return float(m + np.log(np.exp(values - m).sum()))


@dataclass
class Distributions:
    """Log-probabilities of the four cross-passage distributions.

    Every distribution is one softmax pooled over all passages; masked
    positions hold -inf.
    """

    passage_ids: list[int]
    context_masks: list[np.ndarray]
    joint_masks: list[np.ndarray]
    token_to_char: list[tuple[Optional[tuple[int, int]], ...]]
    log_start: list[np.ndarray]
    log_end: list[np.ndarray]
    log_joint: list[np.ndarray]
    log_passage: np.ndarray
    max_span_len: int

    def passage_index(self, passage_id: int) -> int:
        try:
            return self.passage_ids.index(passage_id)
        except ValueError:
            raise KeyError(f"passage {passage_id} not among reader inputs") from None


def _joint_mask(context: np.ndarray, max_span_len: int) -> np.ndarray:
    T = len(context)
    offsets = np.arange(T)[np.newaxis, :] - np.arange(T)[:, np.newaxis]
    band = (offsets >= 0) & (offsets < max_span_len)
    return band & context[:, np.newaxis] & context[np.newaxis, :]


def normalize(score_sets: Sequence[ScoreSet], encs: Sequence[EncoderOutput]) -> Distributions:
    """Pool scores across passages and apply one softmax per distribution."""
    if not score_sets:
        raise ValueError("at least one passage required")
    if len(score_sets) != len(encs):
        raise ValueError("one encoder output per score set required")
    span_lens = {ss.max_span_len for ss in score_sets}
    if len(span_lens) != 1:
        raise ValueError("score sets disagree on max_span_len")
    max_span_len = span_lens.pop()
    for ss, enc in zip(score_sets, encs):
        if ss.passage_id != enc.passage_id:
            raise ValueError("score sets and encoder outputs must align by passage")

    context_masks = [enc.context_mask() for enc in encs]
    joint_masks = [_joint_mask(m, max_span_len) for m in context_masks]
    if not any(m.any() for m in context_masks):
        raise ValueError("no CONTEXT tokens anywhere; empty support")

    pooled_start = np.concatenate(
        [ss.s_start[m] for ss, m in zip(score_sets, context_masks)]
    )
    pooled_end = np.concatenate(
        [ss.s_end[m] for ss, m in zip(score_sets, context_masks)]
    )
    pooled_joint = np.concatenate(
        [ss.s_joint[m] for ss, m in zip(score_sets, joint_masks)]
    )
    if pooled_joint.size == 0:
        raise ValueError("no legal spans; empty joint support")
    z_start = _logsumexp(pooled_start)
    z_end = _logsumexp(pooled_end)
    z_joint = _logsumexp(pooled_joint)

    log_start, log_end, log_joint = [], [], []
    for ss, cmask, jmask in zip(score_sets, context_masks, joint_masks):
        ls = np.full(ss.s_start.shape, -np.inf)
        ls[cmask] = ss.s_start[cmask] - z_start
        le = np.full(ss.s_end.shape, -np.inf)
        le[cmask] = ss.s_end[cmask] - z_end
        lj = np.full(ss.s_joint.shape, -np.inf)
        lj[jmask] = ss.s_joint[jmask] - z_joint
        log_start.append(ls)
        log_end.append(le)
        log_joint.append(lj)

    passage_scores = np.array([ss.s_passage for ss in score_sets], dtype=np.float64)
    log_passage = passage_scores - _logsumexp(passage_scores)

    return Distributions(
        passage_ids=[ss.passage_id for ss in score_sets],
        context_masks=context_masks,
        joint_masks=joint_masks,
        token_to_char=[enc.token_to_char for enc in encs],
        log_start=log_start,
        log_end=log_end,
        log_joint=log_joint,
        log_passage=log_passage,
        max_span_len=max_span_len,
    )


_FACTORS = frozenset("IJC")


def decode_spans(
    dists: Distributions,
    factorization: str,
    M: int,
    contexts: Mapping[int, str],
    normalize_scores: bool = False,
) -> list[AnswerSpan]:
    """Top-M spans under the product of the selected probability factors.

    ``factorization`` names any non-empty subset of {I, J, C}: I multiplies
    in P_start * P_end, J the joint boundary probability, C the passage
    probability.  Ties break by (passage_id, start, shorter span).  logp_e is
    the raw log product unless ``normalize_scores`` renormalizes over all
    legal spans.
    """
    factors = set(factorization)
    if not factors or not factors <= _FACTORS:
        raise ValueError(f"factorization must be a non-empty subset of IJC, got {factorization!r}")
    if M < 1:
        raise ValueError("M must be >= 1")

    rows_score, rows_pid, rows_start, rows_len, rows_pidx = [], [], [], [], []
    for pidx, pid in enumerate(dists.passage_ids):
        jmask = dists.joint_masks[pidx]
        if not jmask.any():
            continue
        ss, ee = np.nonzero(jmask)
        score = np.zeros(len(ss), dtype=np.float64)
        if "I" in factors:
            score += dists.log_start[pidx][ss] + dists.log_end[pidx][ee]
        if "J" in factors:
            score += dists.log_joint[pidx][ss, ee]
        if "C" in factors:
            score += dists.log_passage[pidx]
        rows_score.append(score)
        rows_pid.append(np.full(len(ss), pid, dtype=np.int64))
        rows_start.append(ss)
        rows_len.append(ee - ss)
        rows_pidx.append(np.full(len(ss), pidx, dtype=np.int64))

    if not rows_score:
        return []
    score = np.concatenate(rows_score)
    pid = np.concatenate(rows_pid)
    start = np.concatenate(rows_start)
    length = np.concatenate(rows_len)
    pidx = np.concatenate(rows_pidx)

    if normalize_scores:
        score = score - _logsumexp(score)

    order = np.lexsort((length, start, pid, -score))[:M]
    spans = []
    for i in order:
        p, s, ln = int(pid[i]), int(start[i]), int(length[i])
        t2c = dists.token_to_char[int(pidx[i])]
        char_start = t2c[s][0]
        char_end = t2c[s + ln][1]
        spans.append(
            AnswerSpan(
                passage_id=p,
                start_tok=s,
                end_tok=s + ln,
                text=contexts[p][char_start:char_end],
                logp_e=float(score[i]),
            )
        )
    return spans


def reader_loss(dists: Distributions, annotations) -> dict:
    """Marginalized cross-entropy over the four distributions.

    loss = -log(start mass) - log(end mass) - log(boundary mass)
           - log(positive-passage mass); gradients are returned for every raw
    score tensor (start, end, joint per passage, and the passage scores).
    """
    pid_to_idx = {pid: i for i, pid in enumerate(dists.passage_ids)}

    def check(name, keys):
        if not keys:
            raise InvalidAnnotationError(f"empty {name} annotation set")

    check("starts", annotations.starts)
    check("ends", annotations.ends)
    check("boundaries", annotations.boundaries)
    check("positive_passages", annotations.positive_passages)

    for pid, tok in annotations.starts:
        if pid not in pid_to_idx or not _in_support(dists.log_start, pid_to_idx[pid], tok):
            raise InvalidAnnotationError(f"start ({pid}, {tok}) outside support")
    for pid, tok in annotations.ends:
        if pid not in pid_to_idx or not _in_support(dists.log_end, pid_to_idx[pid], tok):
            raise InvalidAnnotationError(f"end ({pid}, {tok}) outside support")
    for pid, s, e in annotations.boundaries:
        if pid not in pid_to_idx or not _in_support(dists.log_joint, pid_to_idx[pid], (s, e)):
            raise InvalidAnnotationError(f"boundary ({pid}, {s}, {e}) outside support")
    for pid in annotations.positive_passages:
        if pid not in pid_to_idx:
            raise InvalidAnnotationError(f"positive passage {pid} not at reader input")

    start_loss, start_grads = _term_over_masked(
        dists.log_start, dists.context_masks, annotations.starts, pid_to_idx
    )
    end_loss, end_grads = _term_over_masked(
        dists.log_end, dists.context_masks, annotations.ends, pid_to_idx
    )
    joint_loss, joint_grads = _term_over_masked(
        dists.log_joint,
        dists.joint_masks,
        {(pid, (s, e)) for pid, s, e in annotations.boundaries},
        pid_to_idx,
        pair_keys=True,
    )

    p_passage = np.exp(dists.log_passage)
    pos_mass = sum(
        float(p_passage[pid_to_idx[pid]]) for pid in annotations.positive_passages
    )
    passage_loss = -np.log(pos_mass)
    passage_grad = p_passage.copy()
    for pid in annotations.positive_passages:
        i = pid_to_idx[pid]
        passage_grad[i] -= p_passage[i] / pos_mass

    total = start_loss + end_loss + joint_loss + float(passage_loss)
    return {
        "loss": total,
        "start_grads": start_grads,
        "end_grads": end_grads,
        "joint_grads": joint_grads,
        "passage_grad": passage_grad,
    }


def _in_support(log_list: list[np.ndarray], pidx: int, pos) -> bool:
    arr = log_list[pidx]
    indices = pos if isinstance(pos, tuple) else (pos,)
    if len(indices) != arr.ndim:
        return False
    for i, n in zip(indices, arr.shape):
        if not (isinstance(i, (int, np.integer)) and 0 <= i < n):
            return False
    return bool(np.isfinite(arr[pos]))


def _term_over_masked(log_list, masks, members, pid_to_idx, pair_keys=False):
    """Shared start/end/joint term: mass over members, gradient over raw scores."""
    probs = [np.where(m, np.exp(lp), 0.0) for lp, m in zip(log_list, masks)]
    mass = 0.0
    keys = []
    for item in members:
        if pair_keys:
            pid, pos = item
        else:
            pid, pos = item[0], item[1]
        pidx = pid_to_idx[pid]
        keys.append((pidx, pos))
        mass += float(probs[pidx][pos])
    loss = float(-np.log(mass))
    grads = [p.copy() for p in probs]
    for pidx, pos in keys:
        grads[pidx][pos] -= probs[pidx][pos] / mass
    return loss, grads


def passage_rerank_by_reader(score_sets: Sequence[ScoreSet]) -> list[int]:
    """Passage ids sorted by s_passage descending, ties by ascending id."""
    return [
        ss.passage_id
        for ss in sorted(score_sets, key=lambda ss: (-ss.s_passage, ss.passage_id))
    ]


def write_encoder_output(enc: EncoderOutput, path: Union[str, Path]) -> None:
    with open(path, "wb") as f:
        f.write(ENC_MAGIC)
        f.write(struct.pack("<II", enc.T, enc.h))
        f.write(enc.token_kinds.astype(np.uint8).tobytes())
        offsets = np.empty((enc.T, 2), dtype="<u4")
        for i, span in enumerate(enc.token_to_char):
            offsets[i] = (_NO_OFFSET, _NO_OFFSET) if span is None else span
        f.write(offsets.tobytes())
        f.write(enc.hidden.astype("<f4").tobytes())


def read_encoder_output(path: Union[str, Path], passage_id: int) -> EncoderOutput:
    blob = Path(path).read_bytes()
    if blob[: len(ENC_MAGIC)] != ENC_MAGIC:
        raise EncoderFormatError(f"bad magic in {path}")
    header_end = len(ENC_MAGIC) + 8
    if len(blob) < header_end:
        raise EncoderFormatError("truncated header")
    T, h = struct.unpack("<II", blob[len(ENC_MAGIC) : header_end])
    kinds_end = header_end + T
    offsets_end = kinds_end + T * 8
    expected_end = offsets_end + T * h * 4
    if len(blob) != expected_end:
        raise EncoderFormatError(
            f"payload size mismatch: header implies {expected_end} bytes, file has {len(blob)}"
        )
    kinds = np.frombuffer(blob, dtype=np.uint8, count=T, offset=header_end)
    raw_offsets = np.frombuffer(blob, dtype="<u4", count=T * 2, offset=kinds_end).reshape(T, 2)
    token_to_char: list[Optional[tuple[int, int]]] = []
    for a, b in raw_offsets:
        if a == _NO_OFFSET and b == _NO_OFFSET:
            token_to_char.append(None)
        else:
            token_to_char.append((int(a), int(b)))
    hidden = (
        np.frombuffer(blob, dtype="<f4", count=T * h, offset=offsets_end)
        .astype(np.float64)
        .reshape(T, h)
    )
    try:
        return EncoderOutput(passage_id, hidden, kinds.copy(), tuple(token_to_char))
    except EncoderFormatError as e:
        raise EncoderFormatError(f"{path}: {e}") from e


def _encode_array(arr: np.ndarray) -> dict:
    return {
        "shape": list(arr.shape),
        "data": base64.b64encode(arr.astype("<f4").tobytes()).decode("ascii"),
    }


def _decode_array(obj: dict) -> np.ndarray:
    data = np.frombuffer(base64.b64decode(obj["data"]), dtype="<f4")
    return data.astype(np.float64).reshape(obj["shape"])


def save_heads(heads: ReaderHeads, path: Union[str, Path]) -> None:
    payload = {
        "h": heads.h,
        "w_start": _encode_array(heads.w_start),
        "w_end": _encode_array(heads.w_end),
        "W_j": _encode_array(heads.W_j),
        "b_j": _encode_array(heads.b_j),
        "w_p": _encode_array(heads.w_p),
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def load_heads(path: Union[str, Path]) -> ReaderHeads:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    return ReaderHeads(
        w_start=_decode_array(payload["w_start"]),
        w_end=_decode_array(payload["w_end"]),
        W_j=_decode_array(payload["W_j"]),
        b_j=_decode_array(payload["b_j"]),
        w_p=_decode_array(payload["w_p"]),
    )
