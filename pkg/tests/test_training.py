import json

import numpy as np
import pytest

from mmembed import training as tr
from mmembed.data import build_vocabulary, generate_c2c_pairs
from mmembed.errors import ConfigurationError, EmptyCorpusError, TrainingDivergenceError
from mmembed.evaluation import evaluate_model
from mmembed.model import init_params, load_checkpoint
from mmembed.synth import SynthConfig, generate
from mmembed.training import (
    BatchCursor,
    EvalRecord,
    TrainConfig,
    TrainHistory,
    draw_task,
    evaluate_stopping,
    train,
)


def tiny_corpus(languages=("en", "de"), regime="translation", seed=0):
    return generate(SynthConfig(
        n_train=30, n_val=10, n_test=10, languages=languages, regime=regime,
        d_concepts=8, m_active=3, d_img=12, seed=seed,
    ))


def quick_config(languages=("en",), **overrides):
    defaults = dict(
        languages=tuple(languages), batch_size=8, lr=1e-3, patience=2,
        eval_every=10, max_iterations=40, seed=0,
    )
    defaults.update(overrides)
    return TrainConfig(**defaults)


def setup(languages=("en",), regime="translation", c2c=False, corpus=None, **cfg):
    corpus = corpus or tiny_corpus()
    vocab = build_vocabulary(corpus, min_count=1)
    pairs = generate_c2c_pairs(corpus, languages) if c2c else None
    params = init_params(len(vocab), d_emb=8, d_hid=12, d_img=corpus.feature_dim, seed=1)
    config = quick_config(languages, c2c_enabled=c2c, **cfg)
    return corpus, vocab, pairs, params, config


class TestBatchCursor:
    def test_partition_with_short_tail(self):
        cursor = BatchCursor(10, np.random.default_rng(0))
        sizes = [len(cursor.next_batch(4)) for _ in range(3)]
        assert sizes == [4, 4, 2]
        assert cursor.passes_completed == 1

    def test_pass_covers_every_item_exactly_once(self):
        cursor = BatchCursor(10, np.random.default_rng(1))
        seen = np.concatenate([cursor.next_batch(4) for _ in range(3)])
        assert sorted(seen.tolist()) == list(range(10))

    def test_whole_dataset_each_pass_new_order(self):
        cursor = BatchCursor(4, np.random.default_rng(2))
        passes = [cursor.next_batch(4).tolist() for _ in range(8)]
        assert all(sorted(p) == [0, 1, 2, 3] for p in passes)
        assert any(p != passes[0] for p in passes[1:])

    def test_leftover_singleton_folds_into_reshuffle(self):
        cursor = BatchCursor(9, np.random.default_rng(3))
        first_pass = [cursor.next_batch(4) for _ in range(2)]
        assert [len(b) for b in first_pass] == [4, 4]
        nxt = cursor.next_batch(4)
        assert len(nxt) == 4  # fresh pass, no singleton batch emitted
        assert cursor.passes_completed == 1

    def test_same_seed_identical_streams(self):
        a = BatchCursor(17, np.random.default_rng(7))
        b = BatchCursor(17, np.random.default_rng(7))
        for _ in range(20):
            assert a.next_batch(5).tolist() == b.next_batch(5).tolist()

    def test_empty_dataset(self):
        with pytest.raises(EmptyCorpusError):
            BatchCursor(0, np.random.default_rng(0))


class TestDrawTask:
    def test_p_one_always_c2i(self):
        config = quick_config(("en", "de"), p_c2i=1.0, c2c_enabled=True)
        rng = np.random.default_rng(0)
        tasks = {draw_task(rng, config)[0] for _ in range(500)}
        assert tasks == {"c2i"}

    def test_c2c_disabled_never_draws_c2c(self):
        config = quick_config(("en",), p_c2i=0.0, c2c_enabled=False)
        rng = np.random.default_rng(0)
        tasks = {draw_task(rng, config)[0] for _ in range(100)}
        assert tasks == {"c2i"}

    def test_binomial_concentration(self):
        config = quick_config(("en", "de"), p_c2i=0.5, c2c_enabled=True)
        rng = np.random.default_rng(1)
        n = 10_000
        c2i = sum(draw_task(rng, config)[0] == "c2i" for _ in range(n))
        sigma = np.sqrt(n * 0.25)
        assert abs(c2i - n / 2) < 5 * sigma

    def test_language_draws_uniform(self):
        config = quick_config(("en", "de", "fr", "cs"), p_c2i=1.0, c2c_enabled=False)
        rng = np.random.default_rng(2)
        n = 10_000
        counts = {lang: 0 for lang in config.languages}
        for _ in range(n):
            _, lang = draw_task(rng, config)
            counts[lang] += 1
        sigma = np.sqrt(n * 0.25 * 0.75)
        for lang in config.languages:
            assert abs(counts[lang] - n / 4) < 5 * sigma


class TestEvaluateStopping:
    def history(self, recall_sums):
        h = TrainHistory()
        best = -1.0
        for i, r in enumerate(recall_sums):
            h.evals.append(EvalRecord(i, r, {}, {}))
            if r > best:
                best = r
                h.best_eval_index = i
        return h

    def test_improving_continues(self):
        h = self.history([1, 2, 3, 4])
        assert evaluate_stopping(h, patience=2) == "continue"

    def test_flat_history_stops(self):
        h = self.history([5.0] * 4)  # patience 3 exhausted by 3 non-improvements
        assert evaluate_stopping(h, patience=3) == "stop"

    def test_equal_is_not_improvement(self):
        h = self.history([5.0, 5.0, 5.0])
        assert h.best_eval_index == 0
        assert evaluate_stopping(h, patience=2) == "stop"

    def test_improvement_at_patience_resets(self):
        h = self.history([5, 4, 4, 6])  # improvement exactly patience evals after best
        assert evaluate_stopping(h, patience=3) == "continue"

    def test_needs_one_evaluation(self):
        with pytest.raises(ConfigurationError):
            evaluate_stopping(TrainHistory(), patience=1)


class TestTrainConfig:
    def test_validation(self):
        with pytest.raises(ConfigurationError):
            quick_config(p_c2i=1.5)
        with pytest.raises(ConfigurationError):
            quick_config(batch_size=1)
        with pytest.raises(ConfigurationError):
            quick_config(patience=0)

    def test_eval_cadence_resolution(self):
        mono = TrainConfig(languages=("en",))
        assert mono.resolved_eval_every() == "epoch"
        multi = TrainConfig(languages=("en", "de"))
        assert multi.resolved_eval_every() == 500
        explicit = TrainConfig(languages=("en",), eval_every=100)
        assert explicit.resolved_eval_every() == 100


class TestTrainLoop:
    def test_p_one_executes_zero_c2c_steps(self):
        corpus, vocab, pairs, params, config = setup(
            ("en", "de"), c2c=True, p_c2i=1.0, max_iterations=20)
        _, history = train(corpus, pairs, params, vocab, config)
        assert history.evals[-1].task_counts["c2c"] == 0
        assert all(task == "c2i" for _, task, _ in history.steps)

    def test_monolingual_reduces_to_c2i(self):
        corpus, vocab, pairs, params, config = setup(("en",), max_iterations=20)
        _, history = train(corpus, pairs, params, vocab, config)
        assert all(task == "c2i" for _, task, _ in history.steps)

    def test_c2c_enabled_with_empty_pairs_raises(self):
        from mmembed.data import CaptionPairSet

        corpus, vocab, _, params, config = setup(("en", "de"), c2c=False)
        config = quick_config(("en", "de"), c2c_enabled=True)
        with pytest.raises(ConfigurationError):
            train(corpus, CaptionPairSet(()), params, vocab, config)

    def test_reproducible_histories_byte_for_byte(self):
        runs = []
        for _ in range(2):
            corpus, vocab, pairs, params, config = setup(
                ("en", "de"), c2c=True, p_c2i=0.5, max_iterations=30)
            _, history = train(corpus, pairs, params, vocab, config)
            runs.append(history.to_jsonl().encode())
        assert runs[0] == runs[1]

    def test_divergence_raises_with_iteration(self):
        corpus, vocab, pairs, params, config = setup(("en",), max_iterations=5)
        params.image.projection.value[:] = np.nan
        with pytest.raises(TrainingDivergenceError, match="iteration"):
            train(corpus, pairs, params, vocab, config)

    def test_image_projection_untouched_by_c2c_only_run(self):
        corpus, vocab, pairs, params, config = setup(
            ("en", "de"), c2c=True, p_c2i=0.0, max_iterations=15, eval_every=50)
        before = params.image.projection.value.copy()
        emb_before = params.text.embedding.value.copy()
        train(corpus, pairs, params, vocab, config)
        assert np.array_equal(params.image.projection.value, before)
        assert params.image.projection.step == 0
        assert not np.array_equal(params.text.embedding.value, emb_before)
        assert params.text.embedding.step > 0

    def test_best_params_match_best_recorded_eval(self):
        corpus, vocab, pairs, params, config = setup(("en",), max_iterations=40)
        best, history = train(corpus, pairs, params, vocab, config)
        report = evaluate_model(best, vocab, corpus, languages=("en",), split="val")
        assert report.recall_sum() == pytest.approx(history.best().recall_sum)

    def test_epoch_cadence_for_monolingual(self):
        corpus, vocab, pairs, params, config = setup(
            ("en",), eval_every="epoch", max_iterations=12, batch_size=8)
        _, history = train(corpus, pairs, params, vocab, config)
        # 30 train captions / batch 8 -> pass ends on the 4th batch
        iters = [rec.iteration for rec in history.evals]
        assert iters[0] == 4

    def test_run_dir_artifacts(self, tmp_path):
        corpus, vocab, pairs, params, config = setup(("en",), max_iterations=25)
        out = tmp_path / "run"
        best, history = train(corpus, pairs, params, vocab, config, run_dir=out)
        assert (out / "history.jsonl").exists()
        assert (out / "best.json").exists() and (out / "best.bin").exists()
        loaded, vocab_hash, extra = load_checkpoint(out / "best")
        assert vocab_hash == vocab.content_hash()
        assert extra["languages"] == ["en"]
        for a, b in zip(best.blocks(), loaded.blocks()):
            assert np.array_equal(a.value, b.value)
        lines = [json.loads(l) for l in (out / "history.jsonl").read_text().splitlines()]
        assert lines[0]["type"] == "step"
        assert any(l["type"] == "eval" for l in lines)
        assert lines[-1]["type"] == "end"

    def test_early_stopping_stops_before_cap(self):
        corpus, vocab, pairs, params, config = setup(
            ("en",), max_iterations=2000, eval_every=5, patience=2, lr=0.0)
        _, history = train(corpus, pairs, params, vocab, config)
        # lr=0 never improves, so the third evaluation triggers the stop
        assert history.stop_reason == "early_stopping"
        assert len(history.evals) == 3
