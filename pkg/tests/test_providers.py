"""Lexical toy provider and file-backed replay provider."""

import math

import numpy as np
import pytest

from rankread import dense_index, reader
from rankread.corpus import Passage, PassageStore
from rankread.matching import tokenize_simple
from rankread.providers import (
    TOY_HIDDEN_DIM,
    FileBackedProvider,
    LexicalToyProvider,
    ProviderGapError,
    ScoreProvider,
    get_provider,
    question_file_key,
    toy_reader_heads,
)
from rankread.reader import TokenKind


@pytest.fixture
def store():
    return PassageStore(
        [
            Passage(0, "Alpha", "the cat sat on the mat"),
            Passage(1, "Beta", "a dog ran fast"),
            Passage(2, "Gamma", "the cat chased the dog"),
            Passage(3, "Delta", "bright stars shine at night"),
        ]
    )


@pytest.fixture
def toy(store):
    return LexicalToyProvider(store)


def idf_ref(df: int, n_docs: int = 4) -> float:
    return math.log((1 + n_docs) / (1 + df)) + 1.0


class TestQuestionFileKey:
    def test_is_16_hex_chars(self):
        key = question_file_key("who wrote it")
        assert len(key) == 16
        int(key, 16)

    def test_deterministic_and_distinct(self):
        assert question_file_key("q1") == question_file_key("q1")
        assert question_file_key("q1") != question_file_key("q2")


class TestAbstractProvider:
    def test_every_capability_gaps(self):
        base = ScoreProvider()
        with pytest.raises(ProviderGapError):
            base.query_embedding("q")
        with pytest.raises(ProviderGapError):
            base.retrieval_scores("q", [0])
        with pytest.raises(ProviderGapError):
            base.rerank_scores("q", [0])
        with pytest.raises(ProviderGapError):
            base.encoder_output("q", 0)
        with pytest.raises(ProviderGapError):
            base.generate_answer("q", [0])
        with pytest.raises(ProviderGapError):
            base.span_log_prob("q", "x", [0])


class TestLexicalScore:
    def test_idf_table(self, toy):
        assert toy.idf["the"] == pytest.approx(idf_ref(2))
        assert toy.idf["cat"] == pytest.approx(idf_ref(2))
        assert toy.idf["dog"] == pytest.approx(idf_ref(2))
        assert toy.idf["mat"] == pytest.approx(idf_ref(1))
        assert toy.idf["night"] == pytest.approx(idf_ref(1))

    def test_overlap_sum(self, toy, store):
        got = toy.lexical_score("the cat", store.get(0))
        assert got == pytest.approx(idf_ref(2) + idf_ref(2))

    def test_duplicate_question_tokens_count_once(self, toy, store):
        assert toy.lexical_score("cat cat cat", store.get(0)) == pytest.approx(
            toy.lexical_score("cat", store.get(0))
        )

    def test_unknown_token_contributes_zero(self, toy, store):
        assert toy.lexical_score("zebra cat", store.get(0)) == pytest.approx(
            toy.lexical_score("cat", store.get(0))
        )

    def test_no_overlap_is_zero(self, toy, store):
        assert toy.lexical_score("xylophone", store.get(3)) == 0.0

    def test_retrieval_scores_match_per_passage(self, toy, store):
        scores = toy.retrieval_scores("the cat ran", [0, 1, 2, 3])
        for pid in (0, 1, 2, 3):
            assert scores[pid] == pytest.approx(
                toy.lexical_score("the cat ran", store.get(pid))
            )


class TestEmbeddings:
    def test_query_embedding_shape_and_dtype(self, toy):
        q = toy.query_embedding("the cat")
        assert q.dtype == np.float32
        assert q.shape == (len(toy.idf),)

    def test_inner_product_equals_lexical_score(self, toy, store):
        index = toy.build_index()
        questions = ["the cat", "a dog ran", "bright stars at night", "cat dog the"]
        for question in questions:
            q = toy.query_embedding(question)
            rows = index.values.astype(np.float32)
            for r, pid in enumerate(index.row_ids):
                dot = float(np.dot(rows[r], q))
                want = toy.lexical_score(question, store.get(int(pid)))
                assert dot == pytest.approx(want, rel=1e-5)

    def test_search_agrees_with_score_sort(self, toy, store):
        index = toy.build_index()
        q = toy.query_embedding("bright stars shine")
        results = dense_index.search(index, q, 4)
        scores = toy.retrieval_scores("bright stars shine", store.ids())
        want = sorted(scores, key=lambda pid: (-scores[pid], pid))
        assert [r.passage_id for r in results] == want

    def test_build_index_subset_preserves_order(self, toy):
        index = toy.build_index([2, 0])
        assert list(index.row_ids) == [2, 0]

    def test_unknown_question_tokens_embed_to_zero(self, toy):
        assert np.all(toy.query_embedding("zzz qqq") == 0.0)


class TestRerankScores:
    def test_length_normalization(self, toy, store):
        raw = toy.lexical_score("the cat", store.get(0))
        got = toy.rerank_scores("the cat", [0])[0]
        n_tokens = len(tokenize_simple(store.get(0).context).tokens)
        assert got == pytest.approx(raw / (1.0 + math.sqrt(n_tokens)))

    def test_prefers_tighter_passage(self):
        # same overlapping tokens, one passage padded with filler
        store = PassageStore(
            [
                Passage(0, "A", "silver arrow"),
                Passage(1, "B", "silver arrow " + "filler " * 30),
            ]
        )
        toy = LexicalToyProvider(store)
        scores = toy.rerank_scores("silver arrow", [0, 1])
        assert scores[0] > scores[1]


class TestNovelRuns:
    def test_single_novel_token_run(self, toy):
        # question covers every other token of passage 0 except sat/mat
        runs = toy._novel_runs("the cat on", 0)
        texts = [(i, j) for i, j, _ in runs]
        assert texts == [(2, 2), (5, 5)]

    def test_adjacent_novel_tokens_merge(self):
        store = PassageStore([Passage(0, "T", "the steel is very hard metal")])
        toy = LexicalToyProvider(store)
        runs = toy._novel_runs("the steel is", 0)
        assert [(i, j) for i, j, _ in runs] == [(3, 5)]

    def test_weight_is_window_overlap_over_question_mass(self):
        store = PassageStore(
            [
                Passage(0, "T", "the quality of steel is hardness"),
                Passage(1, "U", "a filler passage entirely off topic"),
            ]
        )
        toy = LexicalToyProvider(store)
        runs = toy._novel_runs("what is the quality of steel", 0)
        assert len(runs) == 1
        i, j, weight = runs[0]
        assert (i, j) == (5, 5)
        # window holds every idf-carrying question token ("what" never occurs)
        assert weight == pytest.approx(1.0)

    def test_question_with_no_known_tokens_weights_zero(self, toy):
        runs = toy._novel_runs("zzz qqq", 0)
        assert runs
        assert all(w == 0.0 for _, _, w in runs)


class TestEncoderOutput:
    def test_layout_kinds_and_offsets(self, toy, store):
        enc = toy.encoder_output("the cat", 0)
        q_len = 2
        t_len = 1
        c_seq = tokenize_simple(store.get(0).context)
        kinds = list(enc.token_kinds)
        want = (
            [int(TokenKind.CLS)]
            + [int(TokenKind.QUESTION)] * q_len
            + [int(TokenKind.SEP)]
            + [int(TokenKind.TITLE)] * t_len
            + [int(TokenKind.SEP)]
            + [int(TokenKind.CONTEXT)] * len(c_seq.tokens)
            + [int(TokenKind.SEP)]
        )
        assert kinds == want
        ctx_start = 1 + q_len + 1 + t_len + 1
        for i, span in enumerate(c_seq.char_spans):
            assert enc.token_to_char[ctx_start + i] == span
        assert enc.token_to_char[0] is None

    def test_hidden_width_is_toy_dim(self, toy):
        enc = toy.encoder_output("the cat", 0)
        assert enc.h == TOY_HIDDEN_DIM

    def test_toy_heads_recover_run_scores(self, toy, store):
        question = "the cat on"
        enc = toy.encoder_output(question, 0)
        scores = reader.compute_scores(enc, toy_reader_heads(), max_span_len=3)
        runs = {i: w for i, j, w in toy._novel_runs(question, 0)}
        ctx_positions = np.flatnonzero(enc.context_mask())
        # s_start reads the run-start channel, scaled
        for tok_idx, ctx_i in enumerate(ctx_positions):
            want = runs.get(tok_idx, 0.0) * 6.0
            assert scores.s_start[ctx_i] == pytest.approx(want)

    def test_joint_is_start_plus_end(self, toy):
        enc = toy.encoder_output("the cat on", 0)
        scores = reader.compute_scores(enc, toy_reader_heads(), max_span_len=4)
        T = enc.T
        for s in range(T):
            for e in range(s, min(T, s + 4)):
                assert scores.s_joint[s, e] == pytest.approx(
                    scores.s_start[s] + scores.s_end[e]
                )

    def test_passage_score_reads_relevance(self, toy, store):
        question = "the cat sat"
        enc = toy.encoder_output(question, 0)
        scores = reader.compute_scores(enc, toy_reader_heads(), max_span_len=3)
        q_mass = sum(toy.idf[t] for t in {"the", "cat", "sat"})
        rel = toy.lexical_score(question, store.get(0)) / q_mass
        assert scores.s_passage == pytest.approx(rel * 8.0)

    def test_oversized_question_gaps(self, toy):
        question = " ".join(f"tok{i}" for i in range(520))
        with pytest.raises(ProviderGapError):
            toy.encoder_output(question, 0)

    def test_long_context_truncates_to_limit(self):
        store = PassageStore(
            [Passage(0, "T", " ".join(f"word{i}" for i in range(600)))]
        )
        toy = LexicalToyProvider(store)
        enc = toy.encoder_output("short question", 0)
        assert enc.T == 512


class TestGenerativeStandIn:
    @pytest.fixture
    def planted(self):
        store = PassageStore(
            [
                Passage(0, "T0", "the quality of steel is hardness"),
                Passage(1, "T1", "the quality of copper is softness"),
            ]
        )
        return store, LexicalToyProvider(store)

    def test_picks_highest_weight_run(self, planted):
        _, toy = planted
        answer, logp = toy.generate_answer("what is the quality of steel", [0, 1])
        assert answer == "hardness"
        assert logp < 0.0

    def test_no_candidates_returns_empty(self, planted):
        store = PassageStore([Passage(0, "T", "the cat")])
        toy = LexicalToyProvider(store)
        answer, logp = toy.generate_answer("the cat", [0])
        assert answer == ""
        assert logp == -20.0

    def test_logp_is_normalized_over_runs(self, planted):
        _, toy = planted
        question = "what is the quality of steel"
        runs = toy._candidate_runs(question, [0, 1])
        z = sum(math.exp(w * 6.0) for w, *_ in runs) + 1.0
        _, logp = toy.generate_answer(question, [0, 1])
        best_w = max(w for w, *_ in runs)
        assert logp == pytest.approx(math.log(math.exp(best_w * 6.0) / z))

    def test_span_log_prob_matches_generated(self, planted):
        _, toy = planted
        question = "what is the quality of steel"
        answer, logp = toy.generate_answer(question, [0, 1])
        assert toy.span_log_prob(question, answer, [0, 1]) == pytest.approx(logp)

    def test_span_log_prob_whitespace_and_case_insensitive(self, planted):
        _, toy = planted
        question = "what is the quality of steel"
        a = toy.span_log_prob(question, "hardness", [0, 1])
        b = toy.span_log_prob(question, "  HARDNESS ", [0, 1])
        assert a == pytest.approx(b)

    def test_unmatched_text_gets_floor_probability(self, planted):
        _, toy = planted
        question = "what is the quality of steel"
        runs = toy._candidate_runs(question, [0, 1])
        z = sum(math.exp(w * 6.0) for w, *_ in runs) + 1.0
        got = toy.span_log_prob(question, "unrelated words", [0, 1])
        assert got == pytest.approx(math.log(1.0 / z))

    def test_matched_beats_unmatched(self, planted):
        _, toy = planted
        question = "what is the quality of steel"
        assert toy.span_log_prob(question, "hardness", [0, 1]) > toy.span_log_prob(
            question, "unrelated words", [0, 1]
        )


class TestFileBackedProvider:
    def _write_jsonl(self, path, rows):
        with open(path, "w", encoding="utf-8") as f:
            for row in rows:
                import json

                f.write(json.dumps(row) + "\n")

    def test_unbound_capability_gaps(self):
        provider = FileBackedProvider()
        with pytest.raises(ProviderGapError, match="no rerank"):
            provider.rerank_scores("q", [0])
        with pytest.raises(ProviderGapError, match="no encoder"):
            provider.encoder_output("q", 0)

    def test_missing_file_gaps(self, tmp_path):
        provider = FileBackedProvider(rerank_scores=tmp_path / "nope.jsonl")
        with pytest.raises(ProviderGapError, match="missing"):
            provider.rerank_scores("q", [0])

    def test_rerank_rows(self, tmp_path):
        path = tmp_path / "rerank.jsonl"
        self._write_jsonl(path, [{"question_key": "q1", "scores": {"3": 0.5, "7": -1.0}}])
        provider = FileBackedProvider(rerank_scores=path)
        assert provider.rerank_scores("q1", [7, 3]) == {7: -1.0, 3: 0.5}

    def test_rerank_missing_passage_gaps(self, tmp_path):
        path = tmp_path / "rerank.jsonl"
        self._write_jsonl(path, [{"question_key": "q1", "scores": {"3": 0.5}}])
        provider = FileBackedProvider(rerank_scores=path)
        with pytest.raises(ProviderGapError, match="lacks passages"):
            provider.rerank_scores("q1", [3, 9])

    def test_unknown_question_gaps(self, tmp_path):
        path = tmp_path / "rerank.jsonl"
        self._write_jsonl(path, [{"question_key": "q1", "scores": {}}])
        provider = FileBackedProvider(rerank_scores=path)
        with pytest.raises(ProviderGapError, match="no row"):
            provider.rerank_scores("other", [])

    def test_duplicate_question_key_rejected(self, tmp_path):
        path = tmp_path / "gen.jsonl"
        self._write_jsonl(
            path,
            [
                {"question_key": "q", "answer": "a", "logp": -1.0},
                {"question_key": "q", "answer": "b", "logp": -2.0},
            ],
        )
        provider = FileBackedProvider(generative=path)
        with pytest.raises(ProviderGapError, match="duplicate"):
            provider.generate_answer("q", [])

    def test_encoder_round_trip(self, tmp_path, toy):
        enc = toy.encoder_output("the cat", 0)
        enc_dir = tmp_path / "enc"
        enc_dir.mkdir()
        reader.write_encoder_output(enc, enc_dir / f"{question_file_key('the cat')}.0.enc")
        provider = FileBackedProvider(encoder_dir=enc_dir)
        loaded = provider.encoder_output("the cat", 0)
        assert loaded.T == enc.T
        assert np.array_equal(loaded.token_kinds, enc.token_kinds)
        np.testing.assert_allclose(loaded.hidden, enc.hidden, atol=1e-6)

    def test_encoder_missing_file_gaps(self, tmp_path):
        enc_dir = tmp_path / "enc"
        enc_dir.mkdir()
        provider = FileBackedProvider(encoder_dir=enc_dir)
        with pytest.raises(ProviderGapError, match="missing"):
            provider.encoder_output("the cat", 0)

    def test_generative_row(self, tmp_path):
        path = tmp_path / "gen.jsonl"
        self._write_jsonl(path, [{"question_key": "q", "answer": "silver", "logp": -0.25}])
        provider = FileBackedProvider(generative=path)
        assert provider.generate_answer("q", [1, 2]) == ("silver", -0.25)

    def test_span_logps_with_default(self, tmp_path):
        path = tmp_path / "span.jsonl"
        self._write_jsonl(
            path,
            [
                {
                    "question_key": "q",
                    "span_logps": {"silver": -0.1},
                    "default_logp": -9.0,
                }
            ],
        )
        provider = FileBackedProvider(span_logps=path)
        assert provider.span_log_prob("q", "silver", []) == -0.1
        assert provider.span_log_prob("q", "other", []) == -9.0

    def test_span_logps_without_default_gaps(self, tmp_path):
        path = tmp_path / "span.jsonl"
        self._write_jsonl(path, [{"question_key": "q", "span_logps": {}}])
        provider = FileBackedProvider(span_logps=path)
        with pytest.raises(ProviderGapError, match="no default_logp"):
            provider.span_log_prob("q", "other", [])

    def test_query_embedding_row(self, tmp_path):
        path = tmp_path / "emb.jsonl"
        self._write_jsonl(path, [{"question_key": "q", "embedding": [0.5, 1.5]}])
        provider = FileBackedProvider(query_embeddings=path)
        got = provider.query_embedding("q")
        assert got.dtype == np.float32
        np.testing.assert_array_equal(got, np.array([0.5, 1.5], dtype=np.float32))


class TestGetProvider:
    def test_lexical_toy(self, store):
        provider = get_provider({"kind": "lexical-toy"}, store)
        assert isinstance(provider, LexicalToyProvider)

    def test_file_backed_paths(self, store, tmp_path):
        provider = get_provider(
            {"kind": "file-backed", "rerank_scores": str(tmp_path / "r.jsonl")}, store
        )
        assert isinstance(provider, FileBackedProvider)
        assert provider.kind == "file-backed"

    def test_unknown_kind(self, store):
        with pytest.raises(ValueError, match="unknown provider kind"):
            get_provider({"kind": "mystery"}, store)
