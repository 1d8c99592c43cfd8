"""Passage and QA example storage, filtering, and pruner dataset assembly."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

__all__ = [
    "Passage",
    "QAExample",
    "PassageStore",
    "GoldenDataset",
    "CorpusFormatError",
    "load_passages",
    "load_examples",
    "write_passages",
    "write_examples",
    "filter_for_reranker",
    "filter_for_reader",
    "build_pruner_dataset",
]


class CorpusFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Passage:
    id: int
    title: str
    context: str

    def __post_init__(self) -> None:
        if self.id < 0:
            raise ValueError("passage id must be >= 0")
        if not self.title.strip() or not self.context.strip():
            raise ValueError("title and context must be non-empty")


@dataclass(frozen=True)
class QAExample:
    question: str
    answers: tuple[str, ...]
    golden_passage_id: Optional[int] = None

    def __post_init__(self) -> None:
        if not self.answers or any(not a for a in self.answers):
            raise ValueError("answers must be a non-empty list of non-empty strings")


class PassageStore:
    """Immutable id -> passage map preserving file order."""

    def __init__(self, passages: Iterable[Passage]) -> None:
        self._by_id: dict[int, Passage] = {}
        for p in passages:
            if p.id in self._by_id:
                raise CorpusFormatError(f"duplicate passage id {p.id}")
            self._by_id[p.id] = p

    def __len__(self) -> int:
        return len(self._by_id)

    def __contains__(self, pid: int) -> bool:
        return pid in self._by_id

    def __iter__(self):
        return iter(self._by_id.values())

    def get(self, pid: int) -> Passage:
        try:
            return self._by_id[pid]
        except KeyError:
            raise KeyError(f"passage id {pid} not in store") from None

    def ids(self) -> list[int]:
        return list(self._by_id)


def load_passages(path: Union[str, Path]) -> PassageStore:
    """Read JSON-lines passages; parse errors carry the 1-based line number."""
    passages = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                passages.append(
                    Passage(id=int(obj["id"]), title=obj["title"], context=obj["context"])
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise CorpusFormatError(f"{path}:{lineno}: bad passage record: {e}") from e
    return PassageStore(passages)


def load_examples(path: Union[str, Path], store: Optional[PassageStore] = None) -> list[QAExample]:
    """Read JSON-lines QA examples; golden ids must resolve when a store is given."""
    examples = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                golden = obj.get("golden_passage_id")
                ex = QAExample(
                    question=obj["question"],
                    answers=tuple(obj["answers"]),
                    golden_passage_id=None if golden is None else int(golden),
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise CorpusFormatError(f"{path}:{lineno}: bad example record: {e}") from e
            if store is not None and ex.golden_passage_id is not None:
                if ex.golden_passage_id not in store:
                    raise CorpusFormatError(
                        f"{path}:{lineno}: golden passage {ex.golden_passage_id} not in store"
                    )
            examples.append(ex)
    return examples


def write_passages(passages: Iterable[Passage], path: Union[str, Path]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for p in passages:
            f.write(json.dumps({"id": p.id, "title": p.title, "context": p.context}) + "\n")


def write_examples(examples: Iterable[QAExample], path: Union[str, Path]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for ex in examples:
            f.write(
                json.dumps(
                    {
                        "question": ex.question,
                        "answers": list(ex.answers),
                        "golden_passage_id": ex.golden_passage_id,
                    }
                )
                + "\n"
            )


def filter_for_reranker(
    examples: Sequence[QAExample],
    retrieved_ids_per_example: Sequence[Sequence[int]],
    store: PassageStore,
    annotator,
) -> list[QAExample]:
    """Keep examples with a golden passage or an exact answer match in their list."""
    if len(examples) != len(retrieved_ids_per_example):
        raise ValueError("one retrieved list per example required")
    kept = []
    for ex, retrieved in zip(examples, retrieved_ids_per_example):
        if ex.golden_passage_id is not None:
            kept.append(ex)
            continue
        if any(
            annotator.has_exact_match(store.get(pid).context, ex.answers) for pid in retrieved
        ):
            kept.append(ex)
    return kept


def filter_for_reader(
    examples: Sequence[QAExample],
    top1_ids: Sequence[Optional[int]],
    store: PassageStore,
    annotator,
) -> list[QAExample]:
    """Keep examples whose answer matches exactly in the golden or top-1 passage."""
    if len(examples) != len(top1_ids):
        raise ValueError("one top-1 id per example required")
    kept = []
    for ex, top1 in zip(examples, top1_ids):
        candidates = []
        if ex.golden_passage_id is not None:
            candidates.append(ex.golden_passage_id)
        if top1 is not None:
            candidates.append(top1)
        if any(
            annotator.has_exact_match(store.get(pid).context, ex.answers) for pid in candidates
        ):
            kept.append(ex)
    return kept


@dataclass
class GoldenDataset:
    """Labeled (passage_id, label) entries; label 1 = positive, 0 = negative."""

    train: list[tuple[int, int]] = field(default_factory=list)
    dev: list[tuple[int, int]] = field(default_factory=list)
    test: list[tuple[int, int]] = field(default_factory=list)


def _dev_bucket(question: str) -> bool:
    """Stable 1:2 dev/test carve keyed by the question text, not list order."""
    digest = hashlib.sha256(question.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") % 3 == 0


def build_pruner_dataset(
    examples: Sequence[QAExample],
    store: PassageStore,
    neg_per_pos: int,
    seed: int,
    dev_examples: Sequence[QAExample] = (),
) -> GoldenDataset:
    """Positives are golden passages; negatives are seeded uniform non-golden draws.

    Train entries get ``neg_per_pos`` negatives per positive; dev examples are
    carved 1:2 into dev/test by a stable question hash, one negative each so
    both splits stay balanced.  Negatives never collide with any golden id.
    """
    if neg_per_pos < 1:
        raise ValueError("neg_per_pos must be >= 1")
    golden_ids = {
        ex.golden_passage_id
        for ex in list(examples) + list(dev_examples)
        if ex.golden_passage_id is not None
    }
    negative_pool = np.array(
        sorted(pid for pid in store.ids() if pid not in golden_ids), dtype=np.int64
    )
    if len(negative_pool) < neg_per_pos:
        raise ValueError(
            f"store holds only {len(negative_pool)} non-golden passages, need {neg_per_pos}"
        )
    rng = np.random.default_rng(seed)
    dataset = GoldenDataset()
    for ex in examples:
        if ex.golden_passage_id is None:
            continue
        dataset.train.append((ex.golden_passage_id, 1))
        draw = rng.choice(negative_pool, size=neg_per_pos, replace=False)
        dataset.train.extend((int(pid), 0) for pid in draw)
    for ex in dev_examples:
        if ex.golden_passage_id is None:
            continue
        entry_list = dataset.dev if _dev_bucket(ex.question) else dataset.test
        entry_list.append((ex.golden_passage_id, 1))
        draw = rng.choice(negative_pool, size=1, replace=False)
        entry_list.append((int(draw[0]), 0))
    return dataset
