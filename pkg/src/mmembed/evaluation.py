"""Retrieval evaluation: Recall@K in both directions, per language, across seeds.

Image-to-text queries score an image against all candidate captions of one
language (a hit if any of the image's captions is in the top k); text-to-image
queries have a single correct image. Ties in similarity are broken by
ascending candidate index so results are deterministic.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import model as model_mod
from .data import Corpus, Vocabulary, encode_tokens
from .errors import AggregationError, ProtocolError, UnknownLanguageError

DIRECTIONS = ("i2t", "t2i")
DEFAULT_KS = (1, 5, 10)

MetricKey = tuple[str, str, int]  # (language, direction, k)


@dataclass
class RetrievalReport:
    """Per-(language, direction, k) recall percentages with seed statistics."""

    means: dict[MetricKey, float]
    stds: dict[MetricKey, float]
    n_seeds: int = 1

    @classmethod
    def single(cls, metrics: dict[MetricKey, float]) -> "RetrievalReport":
        return cls(means=dict(metrics), stds={k: 0.0 for k in metrics}, n_seeds=1)

    def recall_sum(self) -> float:
        return float(sum(self.means.values()))

    def languages(self) -> list[str]:
        return sorted({lang for lang, _, _ in self.means})


def recall_at_k(S: np.ndarray, truth: dict[int, set[int]], k: int) -> float:
    """Percentage of queries whose top-k candidates intersect the truth set."""
    S = np.asarray(S)
    n_queries, n_candidates = S.shape
    if k > n_candidates:
        raise ProtocolError(f"k={k} exceeds candidate count {n_candidates}")
    hits = 0
    for q in range(n_queries):
        correct = truth.get(q)
        if not correct:
            raise ProtocolError(f"query {q} has an empty truth set")
        # Stable sort on negated scores: descending similarity, ties by index.
        top = np.argsort(-S[q], kind="stable")[:k]
        if correct.intersection(top.tolist()):
            hits += 1
    return 100.0 * hits / n_queries


def evaluate_model(params, vocab: Vocabulary, corpus: Corpus, languages=None,
                   ks=DEFAULT_KS, split: str = "test") -> RetrievalReport:
    """Encode a split once and compute R@k both ways for each language."""
    images = corpus.images_in_split(split)
    if not images:
        raise ProtocolError(f"split {split!r} has no images")
    if languages is None:
        languages = sorted({c.language for c in corpus.captions_in_split(split)})
    image_ids = [img.image_id for img in images]
    row_of = {img_id: i for i, img_id in enumerate(image_ids)}
    feats = np.stack([img.features for img in images])
    img_emb = model_mod.encode_images(params, feats).value

    metrics: dict[MetricKey, float] = {}
    for lang in sorted(set(languages)):
        caps = corpus.captions_in_split(split, lang)
        if not caps:
            raise UnknownLanguageError(f"language {lang!r} absent from split {split!r}")
        seqs = [encode_tokens(vocab, c.tokens) for c in caps]
        cap_emb = model_mod.encode_captions(params, seqs).value
        S_i2t = img_emb @ cap_emb.T
        truth_i2t: dict[int, set[int]] = {i: set() for i in range(len(images))}
        for c_pos, cap in enumerate(caps):
            truth_i2t[row_of[cap.image_id]].add(c_pos)
        truth_t2i = {c_pos: {row_of[cap.image_id]} for c_pos, cap in enumerate(caps)}
        for k in ks:
            metrics[(lang, "i2t", k)] = recall_at_k(S_i2t, truth_i2t, k)
            metrics[(lang, "t2i", k)] = recall_at_k(S_i2t.T, truth_t2i, k)
    return RetrievalReport.single(metrics)


def aggregate_seeds(reports: list[RetrievalReport]) -> RetrievalReport:
    """Arithmetic mean and sample standard deviation across seed runs."""
    if not reports:
        raise AggregationError("no reports to aggregate")
    keys = set(reports[0].means)
    for r in reports[1:]:
        if set(r.means) != keys:
            raise AggregationError("reports cover different (language, direction, k) sets")
    means: dict[MetricKey, float] = {}
    stds: dict[MetricKey, float] = {}
    n = len(reports)
    for key in keys:
        values = [r.means[key] for r in reports]
        mean = sum(values) / n
        means[key] = mean
        if n == 1:
            stds[key] = 0.0
        else:
            stds[key] = math.sqrt(sum((v - mean) ** 2 for v in values) / (n - 1))
    return RetrievalReport(means=means, stds=stds, n_seeds=n)


def format_table(report: RetrievalReport, ks=DEFAULT_KS, title: str | None = None) -> str:
    """Aligned text table: one row per language, R@k blocks per direction."""
    lines = []
    if title:
        lines.append(title)
    header = ["lang"] + [f"I>T R@{k}" for k in ks] + [f"T>I R@{k}" for k in ks]
    rows = []
    for lang in report.languages():
        cells = [lang]
        for direction in DIRECTIONS:
            for k in ks:
                key = (lang, direction, k)
                if key not in report.means:
                    cells.append("-")
                    continue
                mean = report.means[key]
                std = report.stds.get(key, 0.0)
                cells.append(f"{mean:.1f}+-{std:.1f}" if report.n_seeds > 1 else f"{mean:.1f}")
        rows.append(cells)
    widths = [max(len(r[c]) for r in [header] + rows) for c in range(len(header))]
    for cells in [header] + rows:
        lines.append("  ".join(c.rjust(w) for c, w in zip(cells, widths)))
    return "\n".join(lines)


def report_records(report: RetrievalReport) -> list[dict]:
    """Machine-readable per-metric records (language, direction, k, mean, std, seeds)."""
    records = []
    for (lang, direction, k) in sorted(report.means):
        records.append({
            "language": lang,
            "direction": direction,
            "k": k,
            "mean": report.means[(lang, direction, k)],
            "std": report.stds.get((lang, direction, k), 0.0),
            "seeds": report.n_seeds,
        })
    return records


def write_report_jsonl(report: RetrievalReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in report_records(report):
            fh.write(json.dumps(record) + "\n")
