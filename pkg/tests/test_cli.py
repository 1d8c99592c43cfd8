"""Command-line driver, exercised through main(argv)."""

import json

import pytest

from rankread import fusion, pruner
from rankread.cli import main
from rankread.corpus import Passage, QAExample, write_examples, write_passages
from rankread.evaluation import load_report

QUALS = ("quality", "texture", "essence")


def read_jsonl(path):
    return [json.loads(line) for line in open(path, encoding="utf-8") if line.strip()]


@pytest.fixture
def workspace(tmp_path):
    """Planted 8-passage corpus plus a small-run config file."""
    passages, examples = [], []
    for i in range(8):
        qual = QUALS[i % 3]
        passages.append(Passage(i, f"Topic {i}", f"the {qual} of thing{i} is answer{i}"))
        examples.append(QAExample(f"what is the {qual} of thing{i}", (f"answer{i}",), i))
    p_path = tmp_path / "passages.jsonl"
    d_path = tmp_path / "dataset.jsonl"
    write_passages(passages, p_path)
    write_examples(examples, d_path)
    cfg_path = tmp_path / "run.toml"
    cfg_path.write_text(
        "[pipeline]\nK = 8\nV = 3\nV2 = 3\nM = 2\nmax_span_len = 2\n",
        encoding="utf-8",
    )
    return tmp_path, str(p_path), str(d_path), str(cfg_path)


class TestE2E:
    def test_full_run(self, workspace, capsys):
        tmp, p, d, cfg = workspace
        work = tmp / "run"
        code = main(["--config", cfg, "e2e", "--passages", p, "--dataset", d, "--workdir", str(work)])
        assert code == 0
        out = capsys.readouterr().out
        assert "em=1.0000" in out
        assert "retrieve K=8" in out
        report = load_report(work / "report.json")
        assert report.value == 1.0
        answers = read_jsonl(work / "answers.jsonl")
        assert len(answers) == 8
        assert answers[0]["answer"] == "answer0"
        assert (work / "traces.jsonl").exists()
        assert (work / "index.emb").exists()

    def test_rerun_uses_cache(self, workspace, capsys):
        tmp, p, d, cfg = workspace
        work = tmp / "run"
        args = ["--config", cfg, "e2e", "--passages", p, "--dataset", d, "--workdir", str(work)]
        assert main(args) == 0
        first = read_jsonl(work / "answers.jsonl")
        assert main(args) == 0
        assert read_jsonl(work / "answers.jsonl") == first

    def test_missing_passages_file_errors(self, workspace, capsys):
        tmp, _, d, cfg = workspace
        code = main(
            ["--config", cfg, "e2e", "--passages", str(tmp / "nope.jsonl"), "--dataset", d, "--workdir", str(tmp / "w")]
        )
        assert code == 2
        assert "error:" in capsys.readouterr().err


class TestStageCommands:
    def test_retrieve_writes_ranked_rows(self, workspace, capsys):
        tmp, p, d, cfg = workspace
        out = tmp / "retrieved.jsonl"
        assert main(["--config", cfg, "retrieve", "--passages", p, "--dataset", d, "--out", str(out)]) == 0
        rows = read_jsonl(out)
        assert len(rows) == 8
        assert all(len(row["ranked"]) == 8 for row in rows)
        assert rows[0]["ranked"][0][0] == 0

    def test_rerank_keeps_top_v(self, workspace):
        tmp, p, d, cfg = workspace
        out = tmp / "reranked.jsonl"
        assert main(["--config", cfg, "rerank", "--passages", p, "--dataset", d, "--out", str(out)]) == 0
        rows = read_jsonl(out)
        assert all(len(row["kept"]) == 3 for row in rows)
        assert all(len(row["scores"]) == 8 for row in rows)

    def test_rerank_disabled_errors(self, workspace, capsys):
        tmp, p, d, _ = workspace
        cfg = tmp / "off.toml"
        cfg.write_text(
            "[pipeline]\nK = 8\nV = 3\nV2 = 3\nreranker = false\n", encoding="utf-8"
        )
        code = main(["--config", str(cfg), "rerank", "--passages", p, "--dataset", d, "--out", str(tmp / "x.jsonl")])
        assert code == 2
        assert "disables the reranker" in capsys.readouterr().err

    def test_decode_writes_m_spans(self, workspace):
        tmp, p, d, cfg = workspace
        out = tmp / "spans.jsonl"
        assert main(["--config", cfg, "decode", "--passages", p, "--dataset", d, "--out", str(out)]) == 0
        rows = read_jsonl(out)
        assert all(len(row["spans"]) == 2 for row in rows)
        assert rows[0]["spans"][0]["text"] == "answer0"

    def test_annotate_labels_golden_spans(self, workspace, capsys):
        tmp, p, d, cfg = workspace
        out = tmp / "annotations.jsonl"
        assert main(["--config", cfg, "annotate", "--passages", p, "--dataset", d, "--out", str(out)]) == 0
        rows = read_jsonl(out)
        assert len(rows) == 8
        for i, row in enumerate(rows):
            assert "error" not in row
            assert [i, 5, 5] in row["boundaries"]
            assert i in row["positives"]
        assert "annotated 8 of 8" in capsys.readouterr().out


class TestPrune:
    @pytest.fixture
    def scores_file(self, workspace):
        tmp, _, _, _ = workspace
        path = tmp / "scores.jsonl"
        pruner.write_relevance_scores({i: 0.9 - 0.1 * i for i in range(8)}, path)
        return path

    def test_top_n(self, workspace, scores_file, capsys):
        tmp, _, _, _ = workspace
        out = tmp / "kept.txt"
        assert main(["prune", "--scores", str(scores_file), "--top-n", "3", "--out", str(out)]) == 0
        kept = pruner.load_pruned_set(out)
        assert set(kept.ids) == {0, 1, 2}
        assert "kept 3 of 8" in capsys.readouterr().out

    def test_tau(self, workspace, scores_file):
        tmp, _, _, _ = workspace
        out = tmp / "kept.txt"
        assert main(["prune", "--scores", str(scores_file), "--tau", "0.65", "--out", str(out)]) == 0
        assert set(pruner.load_pruned_set(out).ids) == {0, 1, 2}

    def test_golden_injection(self, workspace, scores_file):
        tmp, _, d, _ = workspace
        out = tmp / "kept.txt"
        code = main(
            ["prune", "--scores", str(scores_file), "--top-n", "2", "--examples", d, "--out", str(out)]
        )
        assert code == 0
        # every golden id re-enters even when scored out
        assert set(pruner.load_pruned_set(out).ids) == set(range(8))


class TestIndexCommands:
    def test_build_and_search(self, workspace, capsys):
        tmp, p, d, cfg = workspace
        idx = tmp / "toy.emb"
        assert main(["--config", cfg, "index", "build", "--passages", p, "--out", str(idx)]) == 0
        assert "n=8" in capsys.readouterr().out
        code = main(
            ["--config", cfg, "index", "search", "--index", str(idx), "--passages", p,
             "--question", "what is the quality of thing0", "-k", "3"]
        )
        assert code == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert len(lines) == 3
        assert lines[0].split("\t")[0] == "0"

    def test_build_restricted_to_pruned(self, workspace, capsys):
        tmp, p, _, cfg = workspace
        pruned = tmp / "kept.txt"
        pruner.write_pruned_set(pruner.pool_top_n({i: 0.9 - 0.1 * i for i in range(8)}, 4), pruned)
        idx = tmp / "pruned.emb"
        assert main(
            ["--config", cfg, "index", "build", "--passages", p, "--pruned", str(pruned), "--out", str(idx)]
        ) == 0
        assert "n=4" in capsys.readouterr().out

    def test_build_with_file_backed_provider_errors(self, workspace, capsys):
        tmp, p, _, _ = workspace
        cfg = tmp / "fb.toml"
        cfg.write_text('[provider]\nkind = "file-backed"\n', encoding="utf-8")
        code = main(["--config", str(cfg), "index", "build", "--passages", p, "--out", str(tmp / "x.emb")])
        assert code == 2
        assert "lexical" in capsys.readouterr().err


class TestFuseCommands:
    @pytest.fixture
    def mixed_workspace(self, tmp_path):
        """Half the answers exceed max_span_len, so only the generator gets them."""
        passages, examples = [], []
        for i in range(8):
            if i % 2 == 0:
                answer = f"answer{i}"
            else:
                answer = f"big stone{i}"
            passages.append(Passage(i, f"Topic {i}", f"the quality of thing{i} is {answer}"))
            examples.append(QAExample(f"what is the quality of thing{i}", (answer,), i))
        p_path = tmp_path / "passages.jsonl"
        d_path = tmp_path / "dataset.jsonl"
        write_passages(passages, p_path)
        write_examples(examples, d_path)
        cfg = tmp_path / "run.toml"
        cfg.write_text(
            "[pipeline]\nK = 8\nV = 3\nV2 = 3\nM = 2\nmax_span_len = 1\n"
            'feature_mask = ["e", "r"]\n',
            encoding="utf-8",
        )
        return tmp_path, str(p_path), str(d_path), str(cfg)

    def test_train_aggr(self, mixed_workspace, capsys):
        tmp, p, d, cfg = mixed_workspace
        out = tmp / "aggr.json"
        assert main(["--config", cfg, "fuse", "train-aggr", "--passages", p, "--dataset", d, "--out", str(out)]) == 0
        model = fusion.load_model(out)
        assert model.mask == ("e", "r")
        assert "trained aggregation on 4 questions" in capsys.readouterr().out

    def test_train_bd_needs_aggr_model(self, mixed_workspace):
        tmp, p, d, cfg = mixed_workspace
        aggr = tmp / "aggr.json"
        assert main(["--config", cfg, "fuse", "train-aggr", "--passages", p, "--dataset", d, "--out", str(aggr)]) == 0
        bd = tmp / "bd.json"
        code = main(
            ["--config", cfg, "fuse", "train-bd", "--passages", p, "--dataset", d,
             "--aggr", str(aggr), "--out", str(bd)]
        )
        assert code == 0
        model = fusion.load_model(bd)
        assert model.w.shape == (2,)

    def test_apply_with_trained_models(self, mixed_workspace, capsys):
        tmp, p, d, cfg = mixed_workspace
        aggr, bd = tmp / "aggr.json", tmp / "bd.json"
        main(["--config", cfg, "fuse", "train-aggr", "--passages", p, "--dataset", d, "--out", str(aggr)])
        main(["--config", cfg, "fuse", "train-bd", "--passages", p, "--dataset", d, "--aggr", str(aggr), "--out", str(bd)])
        capsys.readouterr()
        full_cfg = tmp / "apply.toml"
        full_cfg.write_text(
            "[pipeline]\nK = 8\nV = 3\nV2 = 3\nM = 2\nmax_span_len = 1\n"
            'feature_mask = ["e", "r"]\nfusion = "aggr+bd"\n'
            f'aggregation_model = "{aggr}"\ndecision_model = "{bd}"\n',
            encoding="utf-8",
        )
        out = tmp / "answers.jsonl"
        code = main(["--config", str(full_cfg), "fuse", "apply", "--passages", p, "--dataset", d, "--out", str(out)])
        assert code == 0
        rows = read_jsonl(out)
        assert len(rows) == 8
        assert "em=" in capsys.readouterr().out

    def test_train_aggr_without_signal_errors(self, tmp_path, capsys):
        # answers never occur in any passage, so no span is ever correct
        write_passages([Passage(0, "T", "the sky is wide and far")], tmp_path / "p.jsonl")
        write_examples(
            [QAExample("how wide is the sky", ("unfindable",), 0)], tmp_path / "d.jsonl"
        )
        cfg = tmp_path / "c.toml"
        cfg.write_text("[pipeline]\nK = 1\nV = 1\nV2 = 1\nM = 2\n", encoding="utf-8")
        code = main(
            ["--config", str(cfg), "fuse", "train-aggr", "--passages", str(tmp_path / "p.jsonl"),
             "--dataset", str(tmp_path / "d.jsonl"), "--out", str(tmp_path / "m.json")]
        )
        assert code == 2
        assert "correct span" in capsys.readouterr().err


class TestEvalCommands:
    def test_em_against_written_answers(self, workspace, capsys):
        tmp, p, d, cfg = workspace
        work = tmp / "run"
        main(["--config", cfg, "e2e", "--passages", p, "--dataset", d, "--workdir", str(work)])
        capsys.readouterr()
        report_path = tmp / "em.json"
        code = main(
            ["eval", "em", "--predictions", str(work / "answers.jsonl"), "--dataset", d,
             "--out", str(report_path)]
        )
        assert code == 0
        assert "em=1.0000" in capsys.readouterr().out
        assert load_report(report_path).value == 1.0

    def test_em_missing_question_errors(self, workspace, capsys):
        tmp, _, d, _ = workspace
        preds = tmp / "partial.jsonl"
        preds.write_text(
            json.dumps({"question_key": "what is the quality of thing0", "answer": "answer0"}) + "\n",
            encoding="utf-8",
        )
        assert main(["eval", "em", "--predictions", str(preds), "--dataset", d]) == 2
        assert "missing" in capsys.readouterr().err

    def test_accuracy_at_k(self, workspace, capsys):
        tmp, p, d, cfg = workspace
        retrieved = tmp / "retrieved.jsonl"
        main(["--config", cfg, "retrieve", "--passages", p, "--dataset", d, "--out", str(retrieved)])
        capsys.readouterr()
        code = main(
            ["eval", "acc", "--retrieved", str(retrieved), "--passages", p, "--dataset", d, "-k", "1"]
        )
        assert code == 0
        assert "accuracy@1=1.0000" in capsys.readouterr().out


class TestAblate:
    def test_grid_without_fusion_models(self, workspace, capsys):
        tmp, p, d, cfg = workspace
        pruned = tmp / "kept.txt"
        pruner.write_pruned_set(pruner.pool_top_n({i: 0.9 - 0.1 * i for i in range(8)}, 4), pruned)
        out = tmp / "grid.json"
        code = main(
            ["--config", cfg, "ablate", "--passages", p, "--dataset", d,
             "--pruned", str(pruned), "--out", str(out)]
        )
        assert code == 0
        text = capsys.readouterr().out
        assert "absent" in text
        assert "reranker" in text and "delta" in text
        cells = json.loads(out.read_text())
        assert len(cells) == 10
        ext_full = {c["row"]: c for c in cells if c["reranker"]}["ext"]
        assert ext_full["em_full"] == 1.0
        # pruned index drops half the goldens
        assert ext_full["em_pruned"] == 0.5
        assert ext_full["delta"] == -0.5
        aggr_cell = {c["row"]: c for c in cells if c["reranker"]}["aggr"]
        assert aggr_cell["em_full"] is None


class TestSweep:
    def test_curve_over_sizes(self, workspace, capsys):
        tmp, p, _, cfg = workspace
        # two questions so the golden set stays small
        examples = [
            QAExample("what is the quality of thing0", ("answer0",), 0),
            QAExample("what is the texture of thing1", ("answer1",), 1),
        ]
        d2 = tmp / "two.jsonl"
        write_examples(examples, d2)
        scores = tmp / "scores.jsonl"
        pruner.write_relevance_scores({i: 0.9 - 0.1 * i for i in range(8)}, scores)
        out = tmp / "curve.json"
        code = main(
            ["--config", cfg, "sweep", "--passages", p, "--dataset", str(d2),
             "--scores", str(scores), "--sizes", "2,5,8", "--out", str(out)]
        )
        assert code == 0
        curve = json.loads(out.read_text())
        assert [row[0] for row in curve] == [2, 5, 8]
        assert all(row[1] == 1.0 for row in curve)
        assert "size" in capsys.readouterr().out


class TestErrorSurface:
    def test_unknown_config_key(self, workspace, capsys):
        tmp, p, d, _ = workspace
        cfg = tmp / "bad.toml"
        cfg.write_text("[pipeline]\nbeam = 7\n", encoding="utf-8")
        code = main(["--config", str(cfg), "retrieve", "--passages", p, "--dataset", d, "--out", str(tmp / "o")])
        assert code == 2
        assert "unknown" in capsys.readouterr().err

    def test_console_entry_matches_main(self):
        from rankread import cli

        assert callable(cli.main)
