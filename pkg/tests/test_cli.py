import json
import os

import numpy as np
import pytest

from mmembed.cli import main
from mmembed.data import load_corpus


def run_cli(*argv):
    return main(list(argv))


def synth_corpus(tmp_path, name="corpus", regime="translation", langs="en,de", seed=7,
                 extra=()):
    out = tmp_path / name
    code = run_cli(
        "synth", "--regime", regime, "--langs", langs, "--seed", str(seed),
        "--out", str(out), "--n-train", "30", "--n-val", "10", "--n-test", "10",
        "--d-concepts", "8", "--m-active", "3", "--d-img", "12", *extra,
    )
    assert code == 0
    return out


class TestSynthCommand:
    def test_writes_three_files(self, tmp_path):
        out = synth_corpus(tmp_path, langs="en,de,fr,cs")
        for name in ("captions.tsv", "features.bin", "index.txt"):
            assert (out / name).exists()
        corpus = load_corpus(out / "captions.tsv", out / "features.bin", out / "index.txt")
        assert set(corpus.languages()) == {"en", "de", "fr", "cs"}

    def test_invalid_regime_exits_2(self, capsys):
        with pytest.raises(SystemExit) as exc:
            run_cli("synth", "--regime", "sideways", "--langs", "en")
        assert exc.value.code == 2

    def test_repeated_invocation_identical_bytes(self, tmp_path):
        a = synth_corpus(tmp_path, name="a")
        b = synth_corpus(tmp_path, name="b")
        for name in ("captions.tsv", "features.bin", "index.txt"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_bad_config_combination_exits_2(self, tmp_path):
        code = run_cli("synth", "--regime", "disjoint", "--langs", "en",
                       "--out", str(tmp_path / "x"))
        assert code == 2


def train_config(tmp_path, corpus_dir, **overrides):
    cfg = {
        "corpus": str(corpus_dir),
        "languages": ["en", "de"],
        "c2c": False,
        "min_count": 1,
        "seed": 0,
        "model": {"d_emb": 8, "d_hid": 12},
        "training": {
            "batch_size": 8, "lr": 1e-3, "patience": 2,
            "eval_every": 10, "max_iterations": 30,
        },
    }
    cfg.update(overrides)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


class TestTrainCommand:
    def test_train_writes_checkpoint_and_history(self, tmp_path):
        corpus_dir = synth_corpus(tmp_path)
        cfg = train_config(tmp_path, corpus_dir)
        out = tmp_path / "run"
        assert run_cli("train", "--config", str(cfg), "--out", str(out)) == 0
        assert (out / "best.json").exists()
        assert (out / "history.jsonl").exists()
        lines = [json.loads(l) for l in (out / "history.jsonl").read_text().splitlines()]
        evals = [l for l in lines if l["type"] == "eval"]
        assert evals and evals[0]["iteration"] == 10

    def test_monolingual_epoch_cadence(self, tmp_path):
        corpus_dir = synth_corpus(tmp_path)
        cfg = train_config(
            tmp_path, corpus_dir, languages=["en"],
            training={"batch_size": 8, "lr": 1e-3, "patience": 2,
                      "eval_every": "epoch", "max_iterations": 12},
        )
        out = tmp_path / "run_epoch"
        assert run_cli("train", "--config", str(cfg), "--out", str(out)) == 0
        lines = [json.loads(l) for l in (out / "history.jsonl").read_text().splitlines()]
        evals = [l for l in lines if l["type"] == "eval"]
        # 30 train captions / batch 8 -> first pass completes on batch 4
        assert evals[0]["iteration"] == 4

    def test_p_c2i_flag_one_gives_zero_c2c(self, tmp_path):
        corpus_dir = synth_corpus(tmp_path)
        cfg = train_config(tmp_path, corpus_dir, c2c=True)
        out = tmp_path / "run_p1"
        assert run_cli("train", "--config", str(cfg), "--out", str(out),
                       "--p-c2i", "1.0") == 0
        lines = [json.loads(l) for l in (out / "history.jsonl").read_text().splitlines()]
        evals = [l for l in lines if l["type"] == "eval"]
        assert all(e["task_counts"]["c2c"] == 0 for e in evals)

    def test_config_parse_error_exits_2_with_line(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text('{\n  "corpus": "x",,\n}\n')
        assert run_cli("train", "--config", str(bad)) == 2
        err = capsys.readouterr().err
        assert ":2:" in err

    def test_missing_key_exits_2(self, tmp_path):
        bad = tmp_path / "bad2.json"
        bad.write_text('{"languages": ["en"]}')
        assert run_cli("train", "--config", str(bad)) == 2


class TestEvalCommand:
    def make_run(self, tmp_path):
        corpus_dir = synth_corpus(tmp_path)
        cfg = train_config(tmp_path, corpus_dir)
        out = tmp_path / "run"
        assert run_cli("train", "--config", str(cfg), "--out", str(out)) == 0
        return corpus_dir, out

    def test_eval_reproduces_best_validation_recall_sum(self, tmp_path):
        corpus_dir, out = self.make_run(tmp_path)
        code = run_cli("eval", "--checkpoint", str(out / "best"),
                       "--corpus", str(corpus_dir), "--split", "val",
                       "--out", str(tmp_path / "rep"))
        assert code == 0
        records = [json.loads(l) for l in (tmp_path / "rep" / "report.jsonl").read_text().splitlines()]
        recall_sum = sum(r["mean"] for r in records)
        history = [json.loads(l) for l in (out / "history.jsonl").read_text().splitlines()]
        best = max(e["recall_sum"] for e in history if e["type"] == "eval")
        assert recall_sum == pytest.approx(best, abs=1e-9)

    def test_six_numbers_per_language(self, tmp_path, capsys):
        corpus_dir, out = self.make_run(tmp_path)
        code = run_cli("eval", "--checkpoint", str(out / "best"),
                       "--corpus", str(corpus_dir), "--direction", "both",
                       "--ks", "1,5,10", "--out", str(tmp_path / "rep6"))
        assert code == 0
        records = [json.loads(l) for l in (tmp_path / "rep6" / "report.jsonl").read_text().splitlines()]
        for lang in ("en", "de"):
            assert sum(1 for r in records if r["language"] == lang) == 6

    def test_missing_checkpoint_exits_2(self, tmp_path):
        corpus_dir = synth_corpus(tmp_path)
        code = run_cli("eval", "--checkpoint", str(tmp_path / "nope"),
                       "--corpus", str(corpus_dir))
        assert code in (2, 3)  # file error

    def test_vocab_hash_mismatch_exits_2(self, tmp_path, capsys):
        corpus_dir, out = self.make_run(tmp_path)
        other = synth_corpus(tmp_path, name="other", seed=99)
        code = run_cli("eval", "--checkpoint", str(out / "best"), "--corpus", str(other))
        assert code == 2
        assert "hash" in capsys.readouterr().err


class TestVocabStatsAndPairs:
    def test_vocab_stats_runs(self, tmp_path, capsys):
        corpus_dir = synth_corpus(tmp_path, langs="en,de")
        assert run_cli("vocab-stats", "--corpus", str(corpus_dir), "--min-count", "1") == 0
        out = capsys.readouterr().out
        assert "union" in out and "jaccard" in out
        assert "1.00" in out  # diagonal

    def test_pairs_counts(self, tmp_path, capsys):
        corpus_dir = synth_corpus(tmp_path, langs="en,de,fr")
        pair_file = tmp_path / "pairs.tsv"
        assert run_cli("pairs", "--corpus", str(corpus_dir), "--langs", "en,de,fr",
                       "--out", str(pair_file)) == 0
        out = capsys.readouterr().out
        # 30 train images, one caption per language: C(3,2) pairs each
        assert "90 caption pairs" in out
        assert len(pair_file.read_text().splitlines()) == 90


class TestExperimentCommand:
    def test_unknown_recipe_exits_2_and_lists(self, capsys):
        assert run_cli("experiment", "--recipe", "E99") == 2
        err = capsys.readouterr().err
        assert "E1" in err and "E6" in err

    def test_e1_table_shape_smoke(self, tmp_path, capsys, monkeypatch):
        # Shrink the recipe to a smoke test: tiny corpora, one seed, few steps.
        import mmembed.experiments as ex

        small = ex.ExperimentSettings(
            d_emb=8, d_hid=12, batch_size=8, lr=1e-3, patience=1,
            eval_every=10, max_iterations=20, min_count=1,
        )
        tiny = ex.synth.SynthConfig(
            n_train=20, n_val=12, n_test=12, languages=("en", "de"),
            regime="comparable", seed=0, d_concepts=8, m_active=3, d_img=12,
        )

        def build(base_seed, corpus_dir):
            corpus = ex.synth.generate(tiny)
            return {"single": corpus, "eval": corpus}

        monkeypatch.setitem(
            ex.RECIPES, "E1",
            ex.ExperimentRecipe(
                name="E1", title=ex.RECIPES["E1"].title,
                build_corpora=build,
                arms=ex.RECIPES["E1"].arms, columns=ex.RECIPES["E1"].columns,
                rows=ex.RECIPES["E1"].rows, settings=small,
            ),
        )
        code = run_cli("experiment", "--recipe", "E1", "--seeds", "0",
                       "--out", str(tmp_path / "exp"))
        assert code == 0
        out = capsys.readouterr().out
        assert "Monolingual" in out and "Bilingual" in out and "+ c2c" in out
        table = (tmp_path / "exp" / "E1_table.txt").read_text()
        assert "Monolingual" in table
        results = (tmp_path / "exp" / "E1_results.jsonl").read_text().splitlines()
        assert all("arm" in json.loads(l) for l in results)
