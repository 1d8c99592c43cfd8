"""Shared fixtures: seeded checkpoints and a small corpus, built once."""

import json

import pytest
import transformers.utils.logging

from scorexport import build_checkpoints

transformers.utils.logging.disable_progress_bar()

PASSAGES = [
    {
        "id": 100 + i,
        "title": f"Article {i}",
        "context": (
            f"Passage number {i} talks about a subject in a few plain "
            f"sentences. It mentions topic{i} twice: topic{i} again."
        ),
    }
    for i in range(9)
]
# one long passage to exercise context truncation end to end
PASSAGES.append(
    {
        "id": 109,
        "title": "Long article",
        "context": " ".join(f"word{i}" for i in range(600)),
    }
)

DATASET = [
    {"question": "what is the frame made of", "answers": ["magnesium alloy"]},
    {"question": "which bridge is named after a queen", "answers": ["queen victoria"]},
]


@pytest.fixture(scope="session")
def checkpoints(tmp_path_factory):
    out = tmp_path_factory.mktemp("checkpoints")
    return build_checkpoints(out, seed=0)


@pytest.fixture(scope="session")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    passages = root / "passages.jsonl"
    dataset = root / "dataset.jsonl"
    passages.write_text(
        "".join(json.dumps(r) + "\n" for r in PASSAGES), encoding="utf-8"
    )
    dataset.write_text(
        "".join(json.dumps(r) + "\n" for r in DATASET), encoding="utf-8"
    )
    return {"passages": passages, "dataset": dataset, "root": root}
