"""Multi-task training loop.

Each iteration draws a task (caption-image with probability ``p_c2i``, else
caption-caption), samples a batch from the matching shuffled cursor, scores
it with the ranking loss, and applies Adam to every parameter the loss
reached. Early stopping maximizes the summed validation recall.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import model as model_mod
from .data import CaptionPairSet, Corpus, Vocabulary, encode_tokens
from .errors import ConfigurationError, EmptyCorpusError, TrainingDivergenceError
from .evaluation import evaluate_model
from .model import ModelParams, save_checkpoint
from .numerics import ParameterLeaves, adam_step, cosine_similarity_matrix
from .objective import LossConfig, ranking_loss

TASK_C2I = "c2i"
TASK_C2C = "c2c"

EVAL_PER_EPOCH = "epoch"


@dataclass(frozen=True)
class TrainConfig:
    languages: tuple[str, ...]
    p_c2i: float = 0.5
    batch_size: int = 128
    lr: float = 2e-4
    loss: LossConfig = LossConfig()
    patience: int = 10
    eval_every: int | str | None = None  # None: per-epoch if monolingual c2i-only, else 500
    max_iterations: int = 100_000
    seed: int = 0
    c2c_enabled: bool = False

    def __post_init__(self):
        if not 0.0 <= self.p_c2i <= 1.0:
            raise ConfigurationError(f"p_c2i must be in [0, 1], got {self.p_c2i}")
        if self.patience < 1:
            raise ConfigurationError(f"patience must be >= 1, got {self.patience}")
        if self.batch_size < 2:
            raise ConfigurationError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.max_iterations < 1:
            raise ConfigurationError("max_iterations must be >= 1")
        if not self.languages:
            raise ConfigurationError("at least one language required")
        if isinstance(self.eval_every, str) and self.eval_every != EVAL_PER_EPOCH:
            raise ConfigurationError(f"eval_every must be an int or {EVAL_PER_EPOCH!r}")

    def resolved_eval_every(self) -> int | str:
        if self.eval_every is not None:
            return self.eval_every
        if len(self.languages) == 1 and not self.c2c_enabled:
            return EVAL_PER_EPOCH
        return 500


class BatchCursor:
    """Shuffled pass over a dataset, reshuffling when exhausted.

    Consecutive calls partition the current shuffled order. A final short
    batch is emitted if it still has two items; a leftover singleton is
    folded into the next reshuffle instead. ``passes_completed`` counts
    finished passes (epochs).
    """

    def __init__(self, n_items: int, rng: np.random.Generator):
        if n_items == 0:
            raise EmptyCorpusError("cannot iterate over an empty dataset")
        self.n_items = n_items
        self.rng = rng
        self.order = rng.permutation(n_items)
        self.position = 0
        self.passes_completed = 0

    def _reshuffle(self) -> None:
        self.order = self.rng.permutation(self.n_items)
        self.position = 0

    def next_batch(self, batch_size: int) -> np.ndarray:
        remaining = self.n_items - self.position
        if remaining == 0 or (remaining == 1 and self.n_items > 1):
            # A leftover singleton ends the pass without being emitted.
            self.passes_completed += 1
            self._reshuffle()
            remaining = self.n_items
        take = min(batch_size, remaining)
        batch = self.order[self.position:self.position + take]
        self.position += take
        if self.position == self.n_items:
            self.passes_completed += 1
            self._reshuffle()
        return batch.copy()


def draw_task(rng: np.random.Generator, config: TrainConfig) -> tuple[str, str | None]:
    """One scheduler draw: the task, and the language for c2i batches."""
    if config.c2c_enabled and rng.random() >= config.p_c2i:
        return TASK_C2C, None
    lang = config.languages[int(rng.integers(len(config.languages)))]
    return TASK_C2I, lang


@dataclass
class EvalRecord:
    iteration: int
    recall_sum: float
    metrics: dict[str, float]
    task_counts: dict[str, int]


@dataclass
class TrainHistory:
    steps: list[tuple[int, str, float]] = field(default_factory=list)  # (iteration, task, loss)
    evals: list[EvalRecord] = field(default_factory=list)
    best_eval_index: int | None = None
    stop_reason: str = ""

    def best(self) -> EvalRecord:
        if self.best_eval_index is None:
            raise ValueError("no evaluations recorded")
        return self.evals[self.best_eval_index]

    def to_jsonl(self) -> str:
        lines = []
        for iteration, task, loss in self.steps:
            lines.append(json.dumps(
                {"type": "step", "iteration": iteration, "task": task, "loss": loss}
            ))
        for rec in self.evals:
            lines.append(json.dumps({
                "type": "eval", "iteration": rec.iteration, "recall_sum": rec.recall_sum,
                "metrics": rec.metrics, "task_counts": rec.task_counts,
            }))
        lines.append(json.dumps(
            {"type": "end", "stop_reason": self.stop_reason, "best_eval_index": self.best_eval_index}
        ))
        return "\n".join(lines) + "\n"


def evaluate_stopping(history: TrainHistory, patience: int) -> str:
    """'stop' once the last ``patience`` evaluations failed to beat the best."""
    if not history.evals:
        raise ConfigurationError("stopping decision requires at least one evaluation")
    best = history.best_eval_index
    assert best is not None
    if (len(history.evals) - 1) - best >= patience:
        return "stop"
    return "continue"


def train(corpus: Corpus, pairs: CaptionPairSet | None, params: ModelParams,
          vocab: Vocabulary, config: TrainConfig,
          run_dir=None) -> tuple[ModelParams, TrainHistory]:
    """Run the task-switching loop and return the best validation parameters.

    When ``run_dir`` is given, a checkpoint is written at every new best
    evaluation and the history is streamed to ``history.jsonl``.
    """
    if config.c2c_enabled and (pairs is None or len(pairs) == 0):
        raise ConfigurationError("caption-pair training enabled but the pair set is empty")
    train_caps = {
        lang: corpus.captions_in_split("train", lang) for lang in config.languages
    }
    for lang, caps in train_caps.items():
        if not caps:
            raise EmptyCorpusError(f"no training captions for language {lang!r}")
    if not corpus.images_in_split("val"):
        raise EmptyCorpusError("validation split is empty")

    rng = np.random.default_rng([config.seed, 0])
    cursors = {
        lang: BatchCursor(len(train_caps[lang]), np.random.default_rng([config.seed, 1, i]))
        for i, lang in enumerate(config.languages)
    }
    pair_cursor = None
    if config.c2c_enabled:
        pair_cursor = BatchCursor(len(pairs), np.random.default_rng([config.seed, 2]))

    eval_every = config.resolved_eval_every()
    history = TrainHistory()
    task_counts = {TASK_C2I: 0, TASK_C2C: 0}
    best_params = params.copy()
    best_recall = -np.inf
    evaluated_passes = 0

    run_dir = Path(run_dir) if run_dir is not None else None
    history_fh = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        history_fh = open(run_dir / "history.jsonl", "w", encoding="utf-8")

    def emit(line: str) -> None:
        if history_fh is not None:
            history_fh.write(line + "\n")

    def encode_caption_batch(caps, leaves):
        seqs = [encode_tokens(vocab, c.tokens) for c in caps]
        return model_mod.encode_captions(params, seqs, leaves)

    try:
        iteration = 0
        stop_reason = "max_iterations"
        while iteration < config.max_iterations:
            iteration += 1
            task, lang = draw_task(rng, config)
            task_counts[task] += 1
            leaves = ParameterLeaves()
            if task == TASK_C2I:
                caps_all = train_caps[lang]
                batch_idx = cursors[lang].next_batch(config.batch_size)
                caps = [caps_all[i] for i in batch_idx]
                a = encode_caption_batch(caps, leaves)
                feats = corpus.feature_matrix([c.image_id for c in caps])
                b = model_mod.encode_images(params, feats, leaves)
            else:
                batch_idx = pair_cursor.next_batch(config.batch_size)
                chosen = [pairs.pairs[i] for i in batch_idx]
                a = encode_caption_batch([corpus.captions[i] for i, _ in chosen], leaves)
                b = encode_caption_batch([corpus.captions[j] for _, j in chosen], leaves)
            S = cosine_similarity_matrix(a, b)
            out = ranking_loss(S.value, config.loss)
            if not np.isfinite(out.value):
                raise TrainingDivergenceError(
                    f"non-finite loss at iteration {iteration}"
                )
            if len(batch_idx) > 1:
                S.backward(out.grad)
            touched = leaves.harvest()
            for block in touched:
                adam_step(block, lr=config.lr)
            history.steps.append((iteration, task, out.value))
            emit(json.dumps(
                {"type": "step", "iteration": iteration, "task": task, "loss": out.value}
            ))

            due = (
                cursors[config.languages[0]].passes_completed > evaluated_passes
                if eval_every == EVAL_PER_EPOCH
                else iteration % int(eval_every) == 0
            )
            if due:
                if eval_every == EVAL_PER_EPOCH:
                    evaluated_passes = cursors[config.languages[0]].passes_completed
                report = evaluate_model(
                    params, vocab, corpus, languages=config.languages, split="val"
                )
                metrics = {
                    f"{lang_}/{direction}/r@{k}": value
                    for (lang_, direction, k), value in sorted(report.means.items())
                }
                record = EvalRecord(
                    iteration=iteration,
                    recall_sum=report.recall_sum(),
                    metrics=metrics,
                    task_counts=dict(task_counts),
                )
                history.evals.append(record)
                emit(json.dumps({
                    "type": "eval", "iteration": iteration, "recall_sum": record.recall_sum,
                    "metrics": metrics, "task_counts": record.task_counts,
                }))
                if record.recall_sum > best_recall:
                    best_recall = record.recall_sum
                    history.best_eval_index = len(history.evals) - 1
                    best_params = params.copy()
                    if run_dir is not None:
                        save_checkpoint(
                            best_params, vocab.content_hash(), run_dir / "best",
                            extra={
                                "min_count": vocab.min_count,
                                "languages": list(config.languages),
                                "iteration": iteration,
                            },
                        )
                if evaluate_stopping(history, config.patience) == "stop":
                    stop_reason = "early_stopping"
                    break
        history.stop_reason = stop_reason
        emit(json.dumps({
            "type": "end", "stop_reason": stop_reason,
            "best_eval_index": history.best_eval_index,
        }))
    finally:
        if history_fh is not None:
            history_fh.close()
    return best_params, history
