"""Export jobs validated through the engine's own readers.

These tests import the engine deliberately: the whole point of the
exporter is that its files are accepted by the consuming side, so the
consuming side is the oracle here.
"""

import hashlib
import json

import numpy as np
import pytest

from rankread import dense_index
from rankread.providers import FileBackedProvider, question_file_key
from rankread.pruner import load_relevance_scores
from rankread.reader import read_encoder_output

from scorexport import (
    DEFAULT_SPAN_LOGP,
    EMBEDDING_DIM,
    ExportJob,
    export_embeddings,
    export_encoder_outputs,
    export_scores,
)

from conftest import DATASET, PASSAGES


def _job(checkpoints, corpus, kind, out, **kw):
    return ExportJob(
        model_kind=kind,
        dataset=corpus["dataset"],
        passages=corpus["passages"],
        checkpoint=checkpoints[kind],
        out=out,
        **kw,
    )


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


class TestJobValidation:
    def test_unknown_kind_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="model kind"):
            ExportJob("spanner", None, None, tmp_path, tmp_path / "x")

    def test_bad_batch_size_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="batch size"):
            ExportJob(
                "retriever", None, None, tmp_path, tmp_path / "x", batch_size=0
            )

    def test_kind_op_mismatch(self, checkpoints, corpus, tmp_path):
        job = _job(checkpoints, corpus, "pruner", tmp_path / "x")
        with pytest.raises(ValueError, match="retriever"):
            export_embeddings(job)

    def test_scores_rejects_retriever(self, checkpoints, corpus, tmp_path):
        job = _job(checkpoints, corpus, "retriever", tmp_path / "x")
        with pytest.raises(ValueError, match="score export"):
            export_scores(job)


@pytest.fixture(scope="module")
def emb_export(checkpoints, corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("emb")
    job = _job(checkpoints, corpus, "retriever", out / "index.emb")
    summary = export_embeddings(job, queries_out=out / "queries.jsonl")
    return out, summary


class TestEmbeddings:

    def test_engine_reads_index(self, emb_export):
        out, summary = emb_export
        index = dense_index.read_index(out / "index.emb")
        assert index.n == len(PASSAGES)
        assert index.d == EMBEDDING_DIM
        assert summary["rows"] == len(PASSAGES)
        assert sorted(int(i) for i in index.row_ids) == [p["id"] for p in PASSAGES]

    def test_values_are_float16(self, emb_export):
        out, _ = emb_export
        index = dense_index.read_index(out / "index.emb")
        assert index.values.dtype == np.float16

    def test_reexport_bit_identical(self, checkpoints, corpus, emb_export, tmp_path):
        out, _ = emb_export
        again = _job(checkpoints, corpus, "retriever", tmp_path / "again.emb")
        export_embeddings(again, queries_out=tmp_path / "again.jsonl")
        assert _sha(tmp_path / "again.emb") == _sha(out / "index.emb")
        assert _sha(tmp_path / "again.jsonl") == _sha(out / "queries.jsonl")

    def test_provider_serves_query_embeddings(self, emb_export):
        out, _ = emb_export
        provider = FileBackedProvider(query_embeddings=out / "queries.jsonl")
        for ex in DATASET:
            vec = provider.query_embedding(ex["question"])
            assert vec.shape == (EMBEDDING_DIM,)
            assert vec.dtype == np.float32

    def test_search_runs_over_export(self, emb_export):
        out, _ = emb_export
        index = dense_index.read_index(out / "index.emb")
        provider = FileBackedProvider(query_embeddings=out / "queries.jsonl")
        hits = dense_index.search(
            index, provider.query_embedding(DATASET[0]["question"]), k=5
        )
        assert len(hits) == 5
        assert len({hit.passage_id for hit in hits}) == 5

    def test_manifest_written(self, emb_export):
        out, _ = emb_export
        manifest = json.loads((out / "index.emb.manifest.json").read_text())
        assert manifest["format"] == "R2D2EMB1"
        assert manifest["rows"] == len(PASSAGES)


@pytest.fixture(scope="module")
def rerank_export(checkpoints, corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("rerank") / "rerank.jsonl"
    export_scores(_job(checkpoints, corpus, "reranker", out))
    return out


class TestRerankScores:

    def test_one_row_per_question(self, rerank_export):
        lines = rerank_export.read_text().splitlines()
        assert len(lines) == len(DATASET)

    def test_provider_serves_all_passages(self, rerank_export):
        provider = FileBackedProvider(rerank_scores=rerank_export)
        pids = [p["id"] for p in PASSAGES]
        for ex in DATASET:
            scores = provider.rerank_scores(ex["question"], pids)
            assert sorted(scores) == pids
            assert all(np.isfinite(v) for v in scores.values())


@pytest.fixture(scope="module")
def pruner_export(checkpoints, corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("prune") / "relevance.jsonl"
    export_scores(_job(checkpoints, corpus, "pruner", out))
    return out


class TestPrunerScores:

    def test_engine_loads_probabilities(self, pruner_export):
        scores = load_relevance_scores(pruner_export)
        assert sorted(scores) == [p["id"] for p in PASSAGES]

    def test_open_interval(self, pruner_export):
        for p in load_relevance_scores(pruner_export).values():
            assert 0.0 < p < 1.0


@pytest.fixture(scope="module")
def gen_export(checkpoints, corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("gen")
    candidates = out / "candidates.jsonl"
    rows = [
        {
            "question_key": ex["question"],
            "candidates": ["Passage number", "missing words"],
        }
        for ex in DATASET
    ]
    candidates.write_text(
        "".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8"
    )
    export_scores(
        _job(checkpoints, corpus, "generative", out / "answers.jsonl"),
        span_candidates=candidates,
        span_out=out / "spans.jsonl",
    )
    return out


class TestGenerative:

    def test_one_answer_per_question(self, gen_export):
        rows = [
            json.loads(line)
            for line in (gen_export / "answers.jsonl").read_text().splitlines()
        ]
        assert len(rows) == len(DATASET)
        for row in rows:
            assert isinstance(row["answer"], str) and row["answer"]
            assert row["logp"] < 0.0

    def test_provider_serves_answers(self, gen_export):
        provider = FileBackedProvider(generative=gen_export / "answers.jsonl")
        answer, logp = provider.generate_answer(DATASET[0]["question"], [100])
        assert isinstance(answer, str)
        assert logp < 0.0

    def test_provider_serves_span_logps(self, gen_export):
        provider = FileBackedProvider(span_logps=gen_export / "spans.jsonl")
        q = DATASET[0]["question"]
        scored = provider.span_log_prob(q, "Passage number", [100])
        assert scored < 0.0
        assert scored != DEFAULT_SPAN_LOGP
        assert provider.span_log_prob(q, "never scored", [100]) == DEFAULT_SPAN_LOGP

    def test_deterministic(self, checkpoints, corpus, gen_export, tmp_path):
        export_scores(
            _job(checkpoints, corpus, "generative", tmp_path / "again.jsonl")
        )
        assert _sha(tmp_path / "again.jsonl") == _sha(gen_export / "answers.jsonl")


@pytest.fixture(scope="module")
def enc_export(checkpoints, corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("enc") / "enc"
    summary = export_encoder_outputs(_job(checkpoints, corpus, "reader-encoder", out))
    return out, summary


class TestEncoderOutputs:

    def test_one_file_per_pair(self, enc_export):
        out, summary = enc_export
        files = sorted(out.glob("*.enc"))
        assert len(files) == len(DATASET) * len(PASSAGES)
        assert summary["files"] == len(files)

    def test_engine_reads_every_file(self, enc_export):
        out, _ = enc_export
        for ex in DATASET:
            key = question_file_key(ex["question"])
            for p in PASSAGES:
                enc = read_encoder_output(out / f"{key}.{p['id']}.enc", p["id"])
                assert enc.token_kinds[0] == 0
                assert enc.T <= 512
                assert enc.h == 64

    def test_offsets_reconstruct_context(self, enc_export):
        out, _ = enc_export
        ex = DATASET[0]
        key = question_file_key(ex["question"])
        for p in PASSAGES:
            enc = read_encoder_output(out / f"{key}.{p['id']}.enc", p["id"])
            words = p["context"].split()
            seen = 0
            for kind, span in zip(enc.token_kinds, enc.token_to_char):
                if kind == 3:
                    assert p["context"][span[0] : span[1]] == words[seen]
                    seen += 1
            assert seen > 0

    def test_long_context_truncated_to_limit(self, enc_export):
        out, _ = enc_export
        key = question_file_key(DATASET[0]["question"])
        enc = read_encoder_output(out / f"{key}.109.enc", 109)
        assert enc.T == 512

    def test_reexport_bit_identical(self, checkpoints, corpus, enc_export, tmp_path):
        out, _ = enc_export
        again = tmp_path / "again"
        export_encoder_outputs(_job(checkpoints, corpus, "reader-encoder", again))
        for path in sorted(out.glob("*.enc")):
            assert _sha(again / path.name) == _sha(path)

    def test_manifest_documents_markers(self, enc_export):
        out, _ = enc_export
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["format"] == "R2D2ENC1"
        assert manifest["markers"]["title_start"] == "[TIT]"
        assert manifest["markers"]["context_start"] == "[CTX]"
        assert "truncation" in manifest
