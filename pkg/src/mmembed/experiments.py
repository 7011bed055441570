"""Named experiment recipes: data condition, arms, seeds, and table layout.

Each recipe builds its corpora (synthetic by default, or derived from a
user-supplied corpus), trains one model per (arm, seed), aggregates over
seeds, and renders a fixed table layout. Monolingual cells come from their
own monolingual arms, as in the reference tables.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

from . import synth
from .data import (
    Corpus,
    build_vocabulary,
    generate_c2c_pairs,
    make_captions,
    sample_one_caption_per_language,
    split_half_overlap_disjoint,
)
from .errors import ConfigurationError
from .evaluation import RetrievalReport, aggregate_seeds, evaluate_model
from .model import init_params
from .objective import LossConfig
from .training import TrainConfig, train


@dataclass(frozen=True)
class ExperimentSettings:
    """Desk-scale model/training configuration shared by all recipe arms.

    Sized so single-language arms converge in a couple of thousand updates
    while leaving measurable headroom below the retrieval ceiling; the
    iteration cap is a safety net, with early stopping doing the real work.
    """

    d_emb: int = 32
    d_hid: int = 64
    batch_size: int = 128
    lr: float = 2e-4
    margin: float = 0.2
    loss_variant: str = "max-of-hinges"
    p_c2i: float = 0.5
    patience: int = 5
    eval_every: int = 200
    max_iterations: int = 12000
    min_count: int = 4


@dataclass(frozen=True)
class Arm:
    name: str
    corpus: str
    languages: tuple[str, ...]
    c2c: bool = False
    eval_corpus: str | None = None  # defaults to the training corpus


@dataclass(frozen=True)
class Cell:
    arm: str
    language: str
    direction: str = "t2i"
    k: int = 10


Row = tuple[str, tuple[Cell, ...]]


@dataclass(frozen=True)
class ExperimentRecipe:
    name: str
    title: str
    build_corpora: Callable[[int, str | None], dict[str, Corpus]]
    arms: tuple[Arm, ...]
    columns: tuple[str, ...]
    rows: tuple[Row, ...]
    settings: ExperimentSettings = ExperimentSettings()


@dataclass
class ExperimentResult:
    recipe: str
    seeds: tuple[int, ...]
    reports: dict[str, RetrievalReport]            # arm -> aggregated report
    per_seed: dict[str, list[RetrievalReport]]     # arm -> one report per seed

    def mean(self, cell: Cell) -> float:
        return self.reports[cell.arm].means[(cell.language, cell.direction, cell.k)]


def restrict_languages(corpus: Corpus, languages) -> Corpus:
    """Corpus view with captions limited to the given languages."""
    keep = set(languages)
    records = [
        (c.image_id, c.language, c.tokens) for c in corpus.captions if c.language in keep
    ]
    return Corpus(corpus.images, make_captions(records))


def run_arm(corpora: dict[str, Corpus], arm: Arm, seed: int,
            settings: ExperimentSettings) -> RetrievalReport:
    """Train one arm with one seed and evaluate it on the test split."""
    corpus = restrict_languages(corpora[arm.corpus], arm.languages)
    vocab = build_vocabulary(corpus, settings.min_count)
    pairs = generate_c2c_pairs(corpus, arm.languages) if arm.c2c else None
    params = init_params(
        vocab_size=len(vocab), d_emb=settings.d_emb, d_hid=settings.d_hid,
        d_img=corpus.feature_dim, seed=seed,
    )
    config = TrainConfig(
        languages=arm.languages,
        p_c2i=settings.p_c2i,
        batch_size=settings.batch_size,
        lr=settings.lr,
        loss=LossConfig(margin=settings.margin, variant=settings.loss_variant),
        patience=settings.patience,
        eval_every=settings.eval_every,
        max_iterations=settings.max_iterations,
        seed=seed,
        c2c_enabled=arm.c2c,
    )
    best, _history = train(corpus, pairs, params, vocab, config)
    eval_corpus = corpora[arm.eval_corpus] if arm.eval_corpus else corpus
    eval_langs = [
        lang for lang in arm.languages
        if any(c.language == lang for c in eval_corpus.captions_in_split("test"))
    ]
    return evaluate_model(best, vocab, eval_corpus, languages=eval_langs)


def _arm_job(corpora, arm, seed, settings):
    return arm.name, seed, run_arm(corpora, arm, seed, settings)


def run_arms(corpora: dict[str, Corpus], arms, seeds,
             settings: ExperimentSettings,
             workers: int = 1,
             progress: Callable[[str], None] | None = None
             ) -> dict[str, list[RetrievalReport]]:
    """Train (arm, seed) combinations, optionally in parallel processes.

    Every run is deterministic given (arm, seed), so the result is identical
    whatever the worker count.
    """
    jobs = [(arm, seed) for arm in arms for seed in seeds]
    results: dict[tuple[str, int], RetrievalReport] = {}
    if workers > 1 and len(jobs) > 1:
        from concurrent.futures import ProcessPoolExecutor, as_completed

        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {
                pool.submit(_arm_job, corpora, arm, seed, settings): (arm.name, seed)
                for arm, seed in jobs
            }
            for future in as_completed(futures):
                name, seed, report = future.result()
                results[(name, seed)] = report
                if progress:
                    progress(f"finished arm {name!r} seed {seed}")
    else:
        for arm, seed in jobs:
            if progress:
                progress(f"running arm {arm.name!r} seed {seed}")
            name, seed, report = _arm_job(corpora, arm, seed, settings)
            results[(name, seed)] = report
    return {arm.name: [results[(arm.name, s)] for s in seeds] for arm in arms}


def run_recipe(recipe: ExperimentRecipe, seeds, base_seed: int = 0,
               corpus_dir: str | None = None,
               settings: ExperimentSettings | None = None,
               workers: int = 1,
               progress: Callable[[str], None] | None = None) -> ExperimentResult:
    seeds = tuple(seeds)
    if not seeds:
        raise ConfigurationError("at least one seed required")
    settings = settings or recipe.settings
    corpora = recipe.build_corpora(base_seed, corpus_dir)
    per_seed = run_arms(corpora, recipe.arms, seeds, settings,
                        workers=workers, progress=progress)
    reports = {name: aggregate_seeds(runs) for name, runs in per_seed.items()}
    return ExperimentResult(recipe.name, seeds, reports, per_seed)


def render_table(recipe: ExperimentRecipe, result: ExperimentResult) -> str:
    lines = [recipe.title, f"seeds: {list(result.seeds)}"]
    header = [""] + list(recipe.columns)
    body = []
    for label, cells in recipe.rows:
        row = [label]
        for cell in cells:
            if cell is None:
                row.append("-")
                continue
            report = result.reports.get(cell.arm)
            key = (cell.language, cell.direction, cell.k)
            if report is None or key not in report.means:
                row.append("-")
            else:
                row.append(f"{report.means[key]:.1f}+-{report.stds[key]:.1f}")
        body.append(row)
    widths = [max(len(r[c]) for r in [header] + body) for c in range(len(header))]
    lines.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w)
                           for i, (c, w) in enumerate(zip(header, widths))))
    for row in body:
        lines.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w)
                               for i, (c, w) in enumerate(zip(row, widths))))
    return "\n".join(lines)


# -- corpus builders --------------------------------------------------------

LANGS_2 = ("en", "de")
LANGS_4 = ("en", "de", "fr", "cs")


def _load_real(corpus_dir: str) -> Corpus:
    from pathlib import Path

    from .data import load_corpus

    d = Path(corpus_dir)
    return load_corpus(d / "captions.tsv", d / "features.bin", d / "index.txt")


def _comparable_world(base_seed: int, languages=LANGS_2) -> synth.SynthConfig:
    return synth.SynthConfig(languages=languages, regime="comparable", seed=base_seed)


def _build_e1(base_seed: int, corpus_dir: str | None) -> dict[str, Corpus]:
    # Training uses one independently collected caption per (image, language);
    # the full five-caption set remains the evaluation corpus. Five-caption
    # training saturates at this scale and washes out the condition contrasts.
    if corpus_dir:
        comparable = _load_real(corpus_dir)
        single = sample_one_caption_per_language(comparable, LANGS_2, base_seed + 101)
        return {"single": single, "eval": comparable}
    world = synth.build_world(_comparable_world(base_seed))
    single = synth.corpus_from_world(
        world, synth.realize_captions(world, "comparable", LANGS_2, 1)
    )
    eval_corpus = synth.corpus_from_world(
        world, synth.realize_captions(world, "comparable", LANGS_2, 5)
    )
    return {"single": single, "eval": eval_corpus}


def _build_e2(base_seed: int, corpus_dir: str | None) -> dict[str, Corpus]:
    if corpus_dir:
        comparable = _load_real(corpus_dir)
        translation = sample_one_caption_per_language(comparable, LANGS_2, base_seed + 101)
        comparable1 = sample_one_caption_per_language(comparable, LANGS_2, base_seed + 102)
        return {"translation": translation, "comparable1": comparable1,
                "comparable": comparable}
    world = synth.build_world(_comparable_world(base_seed))
    translation = synth.corpus_from_world(
        world, synth.realize_captions(world, "translation", LANGS_2, 1)
    )
    comparable1 = synth.corpus_from_world(
        world, synth.realize_captions(world, "comparable", LANGS_2, 1)
    )
    comparable = synth.corpus_from_world(
        world, synth.realize_captions(world, "comparable", LANGS_2, 5)
    )
    return {"translation": translation, "comparable1": comparable1, "comparable": comparable}


def _build_e3(base_seed: int, corpus_dir: str | None) -> dict[str, Corpus]:
    comparable = (
        _load_real(corpus_dir) if corpus_dir
        else synth.generate(_comparable_world(base_seed))
    )
    half_seed = base_seed + 31
    return {
        "full": comparable,
        "half_en": split_half_overlap_disjoint(comparable, "half-mono", "en", "de", half_seed),
        "half_de": split_half_overlap_disjoint(comparable, "half-mono", "de", "en", half_seed),
        "overlap": split_half_overlap_disjoint(comparable, "overlap", "en", "de", half_seed),
        "disjoint": split_half_overlap_disjoint(comparable, "disjoint", "en", "de", half_seed),
    }


def _build_e4(base_seed: int, corpus_dir: str | None) -> dict[str, Corpus]:
    if corpus_dir:
        base = _load_real(corpus_dir)
        translation = sample_one_caption_per_language(base, LANGS_4, base_seed + 101)
        comparable1 = sample_one_caption_per_language(base, LANGS_4, base_seed + 102)
        return {"translation": translation, "multi_comp": comparable1}
    world = synth.build_world(synth.SynthConfig(
        languages=LANGS_4, regime="translation", seed=base_seed))
    translation = synth.corpus_from_world(
        world, synth.realize_captions(world, "translation", LANGS_4, 1)
    )
    comp_records = synth.realize_captions(world, "comparable", LANGS_2, 1)
    trans_fr_cs = synth.realize_captions(world, "translation", ("fr", "cs"), 1)
    multi_comp = synth.corpus_from_world(world, comp_records + trans_fr_cs)
    return {"translation": translation, "multi_comp": multi_comp}


def _build_e5(base_seed: int, corpus_dir: str | None) -> dict[str, Corpus]:
    # Low-resource languages get one weak (comparable-style) caption per
    # image; the high-resource pair adds a five-caption comparable set on the
    # same images. Fully translated captions saturate the low-resource
    # baseline at this scale, leaving no transfer headroom to measure.
    if corpus_dir:
        base = _load_real(corpus_dir)
        single = sample_one_caption_per_language(base, LANGS_4, base_seed + 101)
        return {"base": single, "plus_comparable": base}
    world = synth.build_world(synth.SynthConfig(
        languages=LANGS_4, regime="comparable", seed=base_seed))
    base_records = synth.realize_captions(world, "comparable", LANGS_4, 1)
    comp_hi = synth.realize_captions(world, "comparable", LANGS_2, 5)
    base = synth.corpus_from_world(world, base_records)
    plus_comparable = synth.corpus_from_world(world, base_records + comp_hi)
    return {"base": base, "plus_comparable": plus_comparable}


def _build_e6(base_seed: int, corpus_dir: str | None) -> dict[str, Corpus]:
    if corpus_dir:
        base = _load_real(corpus_dir)
        single = sample_one_caption_per_language(base, LANGS_4, base_seed + 101)
        return {"single2": restrict_languages(single, LANGS_2), "single4": single,
                "eval": base}
    world = synth.build_world(synth.SynthConfig(
        languages=LANGS_4, regime="comparable", seed=base_seed))
    comp1 = synth.realize_captions(world, "comparable", LANGS_2, 1)
    trans_fr_cs = synth.realize_captions(world, "translation", ("fr", "cs"), 1)
    eval_records = synth.realize_captions(world, "comparable", LANGS_2, 5)
    return {
        "single2": synth.corpus_from_world(world, comp1),
        "single4": synth.corpus_from_world(world, comp1 + trans_fr_cs),
        "eval": synth.corpus_from_world(world, eval_records),
    }


# -- recipe registry --------------------------------------------------------

def _e1() -> ExperimentRecipe:
    def cells(arm):
        out = []
        for direction in ("i2t", "t2i"):
            for k in (1, 5, 10):
                out.append(Cell(arm, "en", direction, k))
        return tuple(out)

    return ExperimentRecipe(
        name="E1",
        title="E1: monolingual vs. bilingual vs. +c2c (English retrieval, comparable captions)",
        build_corpora=_build_e1,
        arms=(
            Arm("mono", "single", ("en",), eval_corpus="eval"),
            Arm("bi", "single", LANGS_2, eval_corpus="eval"),
            Arm("bi_c2c", "single", LANGS_2, c2c=True, eval_corpus="eval"),
        ),
        columns=("I>T R@1", "I>T R@5", "I>T R@10", "T>I R@1", "T>I R@5", "T>I R@10"),
        rows=(
            ("Monolingual", cells("mono")),
            ("Bilingual", cells("bi")),
            ("+ c2c", cells("bi_c2c")),
        ),
    )


def _lang_dir_cells(arm, languages, k=10):
    out = []
    for lang in languages:
        for direction in ("i2t", "t2i"):
            out.append(Cell(arm, lang, direction, k))
    return tuple(out)


def _e2() -> ExperimentRecipe:
    columns = ("En I>T", "En T>I", "De I>T", "De T>I")
    return ExperimentRecipe(
        name="E2",
        title="E2: translation pairs vs. independently collected captions (R@10)",
        build_corpora=_build_e2,
        arms=(
            Arm("mono_en", "translation", ("en",), eval_corpus="comparable"),
            Arm("mono_de", "translation", ("de",), eval_corpus="comparable"),
            Arm("bi_trans", "translation", LANGS_2, eval_corpus="comparable"),
            Arm("bi_trans_c2c", "translation", LANGS_2, c2c=True, eval_corpus="comparable"),
            Arm("bi_comp", "comparable1", LANGS_2, eval_corpus="comparable"),
            Arm("bi_comp_c2c", "comparable1", LANGS_2, c2c=True, eval_corpus="comparable"),
        ),
        columns=columns,
        rows=(
            ("Monolingual", (Cell("mono_en", "en", "i2t"), Cell("mono_en", "en", "t2i"),
                             Cell("mono_de", "de", "i2t"), Cell("mono_de", "de", "t2i"))),
            ("Bi-translation", _lang_dir_cells("bi_trans", LANGS_2)),
            ("+ c2c", _lang_dir_cells("bi_trans_c2c", LANGS_2)),
            ("Bi-comparable", _lang_dir_cells("bi_comp", LANGS_2)),
            ("+ c2c ", _lang_dir_cells("bi_comp_c2c", LANGS_2)),
        ),
    )


def _e3() -> ExperimentRecipe:
    return ExperimentRecipe(
        name="E3",
        title="E3: overlapping vs. non-overlapping image halves (R@10, comparable captions)",
        build_corpora=_build_e3,
        arms=(
            Arm("full_en", "full", ("en",)),
            Arm("full_de", "full", ("de",)),
            Arm("half_en", "half_en", ("en",), eval_corpus="full"),
            Arm("half_de", "half_de", ("de",), eval_corpus="full"),
            Arm("bi_overlap", "overlap", LANGS_2, eval_corpus="full"),
            Arm("bi_overlap_c2c", "overlap", LANGS_2, c2c=True, eval_corpus="full"),
            Arm("bi_disjoint", "disjoint", LANGS_2, eval_corpus="full"),
        ),
        columns=("En I>T", "En T>I", "De I>T", "De T>I"),
        rows=(
            ("Full Monolingual", (Cell("full_en", "en", "i2t"), Cell("full_en", "en", "t2i"),
                                  Cell("full_de", "de", "i2t"), Cell("full_de", "de", "t2i"))),
            ("Half Monolingual", (Cell("half_en", "en", "i2t"), Cell("half_en", "en", "t2i"),
                                  Cell("half_de", "de", "i2t"), Cell("half_de", "de", "t2i"))),
            ("Bi-overlap", _lang_dir_cells("bi_overlap", LANGS_2)),
            ("+ c2c", _lang_dir_cells("bi_overlap_c2c", LANGS_2)),
            ("Bi-disjoint", _lang_dir_cells("bi_disjoint", LANGS_2)),
        ),
    )


def _e4() -> ExperimentRecipe:
    def row(arm):
        return tuple(Cell(arm, lang) for lang in LANGS_4)

    return ExperimentRecipe(
        name="E4",
        title="E4: multi-translation vs. multi-comparable (T>I R@10)",
        build_corpora=_build_e4,
        arms=(
            Arm("mono_en", "translation", ("en",)),
            Arm("mono_de", "translation", ("de",)),
            Arm("mono_fr", "translation", ("fr",)),
            Arm("mono_cs", "translation", ("cs",)),
            Arm("multi_trans", "translation", LANGS_4),
            Arm("multi_trans_c2c", "translation", LANGS_4, c2c=True),
            Arm("multi_comp", "multi_comp", LANGS_4, eval_corpus="translation"),
            Arm("multi_comp_c2c", "multi_comp", LANGS_4, c2c=True, eval_corpus="translation"),
        ),
        columns=("En", "De", "Fr", "Cs"),
        rows=(
            ("Monolingual", (Cell("mono_en", "en"), Cell("mono_de", "de"),
                             Cell("mono_fr", "fr"), Cell("mono_cs", "cs"))),
            ("Multi-translation", row("multi_trans")),
            ("+ c2c", row("multi_trans_c2c")),
            ("Multi-comparable", row("multi_comp")),
            ("+ c2c ", row("multi_comp_c2c")),
        ),
    )


def _e5() -> ExperimentRecipe:
    return ExperimentRecipe(
        name="E5",
        title="E5: high-to-low resource transfer (T>I R@10 on low-resource languages)",
        build_corpora=_build_e5,
        arms=(
            Arm("mono_fr", "base", ("fr",)),
            Arm("mono_cs", "base", ("cs",)),
            Arm("multilingual", "base", LANGS_4),
            Arm("plus_comparable", "plus_comparable", LANGS_4, eval_corpus="base"),
            Arm("plus_c2c", "plus_comparable", LANGS_4, c2c=True, eval_corpus="base"),
        ),
        columns=("Fr", "Cs"),
        rows=(
            ("Monolingual", (Cell("mono_fr", "fr"), Cell("mono_cs", "cs"))),
            ("Multilingual", (Cell("multilingual", "fr"), Cell("multilingual", "cs"))),
            ("+ Comparable", (Cell("plus_comparable", "fr"), Cell("plus_comparable", "cs"))),
            ("+ c2c", (Cell("plus_c2c", "fr"), Cell("plus_c2c", "cs"))),
        ),
    )


def _e6() -> ExperimentRecipe:
    return ExperimentRecipe(
        name="E6",
        title="E6: one vs. two vs. four languages (R@10, comparable test captions)",
        build_corpora=_build_e6,
        arms=(
            Arm("mono", "single2", ("en",), eval_corpus="eval"),
            Arm("bilingual", "single2", LANGS_2, c2c=True, eval_corpus="eval"),
            Arm("multilingual", "single4", LANGS_4, c2c=True, eval_corpus="eval"),
        ),
        columns=("En I>T", "En T>I", "De I>T", "De T>I"),
        rows=(
            ("Monolingual", (Cell("mono", "en", "i2t"), Cell("mono", "en", "t2i"),
                             None, None)),
            ("Bilingual", _lang_dir_cells("bilingual", LANGS_2)),
            ("Multilingual", _lang_dir_cells("multilingual", LANGS_2)),
        ),
    )


RECIPES: dict[str, ExperimentRecipe] = {
    r.name: r for r in (_e1(), _e2(), _e3(), _e4(), _e5(), _e6())
}
