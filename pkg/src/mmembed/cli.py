"""Command-line experiment harness.

Commands: synth, train, eval, experiment, vocab-stats, pairs. Exit codes:
0 success, 2 usage/configuration (bad flags, malformed files, incompatible
checkpoint), 3 runtime failure (divergence, I/O). All artifact writes go
through a write-then-rename so concurrent runs never interleave output.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import synth as synth_mod
from .data import (
    build_vocabulary,
    generate_c2c_pairs,
    jaccard_overlap,
    load_corpus,
    save_corpus,
    vocab_union_stats,
)
from .errors import (
    CheckpointMismatchError,
    ConfigurationError,
    CorpusFormatError,
    DegenerateCaptionError,
    DegenerateEmbeddingError,
    DimensionError,
    EmptyCorpusError,
    InsufficientLanguagesError,
    MissingCaptionError,
    MmembedError,
    ProtocolError,
    UnknownLanguageError,
    VocabularyError,
)
from .evaluation import (
    RetrievalReport,
    format_table,
    report_records,
    write_report_jsonl,
)
from .experiments import RECIPES, ExperimentSettings, render_table, run_recipe
from .model import init_params, load_checkpoint
from .objective import LossConfig
from .training import TrainConfig, train

OUT_DIR_ENV = "MMEMBED_OUT_DIR"

CORPUS_FILES = ("captions.tsv", "features.bin", "index.txt")

# Errors caused by user input / configuration -> exit 2; the rest -> exit 3.
_CONFIG_ERRORS = (
    ConfigurationError,
    CorpusFormatError,
    CheckpointMismatchError,
    EmptyCorpusError,
    InsufficientLanguagesError,
    UnknownLanguageError,
    MissingCaptionError,
    VocabularyError,
    ProtocolError,
    DegenerateCaptionError,
    DimensionError,
)


def _atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _corpus_paths(directory) -> tuple[Path, Path, Path]:
    d = Path(directory)
    return d / CORPUS_FILES[0], d / CORPUS_FILES[1], d / CORPUS_FILES[2]


def _load_corpus_dir(directory):
    captions, features, index = _corpus_paths(directory)
    for p in (captions, features, index):
        if not p.exists():
            raise CorpusFormatError(f"missing corpus file {p}")
    return load_corpus(captions, features, index)


def _default_out(value: str | None) -> Path:
    if value:
        return Path(value)
    return Path(os.environ.get(OUT_DIR_ENV, "runs"))


def _parse_langs(text: str) -> tuple[str, ...]:
    langs = tuple(t.strip() for t in text.split(",") if t.strip())
    if not langs:
        raise ConfigurationError(f"no languages in {text!r}")
    return langs


def cmd_synth(args) -> int:
    config = synth_mod.SynthConfig(
        n_train=args.n_train, n_val=args.n_val, n_test=args.n_test,
        languages=_parse_langs(args.langs),
        d_concepts=args.d_concepts, m_active=args.m_active,
        tokens_per_concept=args.tokens_per_concept,
        d_img=args.d_img, noise=args.noise,
        captions_per_image=args.captions_per_image,
        regime=args.regime, seed=args.seed,
    )
    corpus = synth_mod.generate(config)
    out = _default_out(args.out)
    out.mkdir(parents=True, exist_ok=True)
    captions, features, index = _corpus_paths(out)
    save_corpus(corpus, captions, features, index)
    print(f"wrote {len(corpus.images)} images / {len(corpus.captions)} captions to {out}")
    return 0


def _read_train_config(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(
            f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}"
        ) from exc
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc


def cmd_train(args) -> int:
    raw = _read_train_config(args.config)
    for key in ("corpus", "languages"):
        if key not in raw:
            raise ConfigurationError(f"{args.config}: missing required key {key!r}")
    corpus = _load_corpus_dir(raw["corpus"])
    languages = tuple(raw["languages"])
    c2c = bool(raw.get("c2c", False))
    min_count = int(raw.get("min_count", 4))
    vocab = build_vocabulary(corpus, min_count)
    pairs = generate_c2c_pairs(corpus, languages) if c2c else None

    model_cfg = dict(raw.get("model", {}))
    seed = args.seed if args.seed is not None else int(raw.get("seed", 0))
    params = init_params(
        vocab_size=len(vocab),
        d_emb=int(model_cfg.get("d_emb", 300)),
        d_hid=int(model_cfg.get("d_hid", 1024)),
        d_img=corpus.feature_dim,
        seed=seed,
        image_bias=bool(model_cfg.get("image_bias", True)),
    )
    tr = dict(raw.get("training", {}))

    def flag(name, key, cast, default):
        value = getattr(args, name, None)
        if value is not None:
            return cast(value)
        if key in tr:
            return cast(tr[key])
        return default

    eval_every = flag("eval_every", "eval_every", lambda v: v, None)
    if isinstance(eval_every, str) and eval_every != "epoch":
        eval_every = int(eval_every)
    config = TrainConfig(
        languages=languages,
        p_c2i=flag("p_c2i", "p_c2i", float, 0.5),
        batch_size=flag("batch_size", "batch_size", int, 128),
        lr=flag("lr", "lr", float, 2e-4),
        loss=LossConfig(
            margin=float(tr.get("margin", 0.2)),
            variant=tr.get("variant", "max-of-hinges"),
        ),
        patience=flag("patience", "patience", int, 10),
        eval_every=eval_every,
        max_iterations=flag("max_iterations", "max_iterations", int, 100_000),
        seed=seed,
        c2c_enabled=c2c,
    )
    out = _default_out(args.out)
    best, history = train(corpus, pairs, params, vocab, config, run_dir=out)
    print(f"stopped: {history.stop_reason} after {len(history.steps)} iterations")
    if history.best_eval_index is not None:
        best_rec = history.best()
        print(f"best validation recall sum {best_rec.recall_sum:.1f} "
              f"at iteration {best_rec.iteration}")
    print(f"checkpoint and history in {out}")
    return 0


def cmd_eval(args) -> int:
    from .evaluation import evaluate_model

    params, vocab_hash, extra = load_checkpoint(args.checkpoint)
    corpus = _load_corpus_dir(args.corpus)
    min_count = int(extra.get("min_count", 4))
    vocab = build_vocabulary(corpus, min_count)
    if vocab.content_hash() != vocab_hash:
        raise CheckpointMismatchError(
            "checkpoint vocabulary hash does not match the corpus vocabulary "
            f"({vocab_hash[:12]}... vs {vocab.content_hash()[:12]}...)"
        )
    languages = _parse_langs(args.langs) if args.langs else None
    ks = tuple(int(k) for k in args.ks.split(","))
    report = evaluate_model(params, vocab, corpus, languages=languages,
                            ks=ks, split=args.split)
    if args.direction != "both":
        keep = {k: v for k, v in report.means.items() if k[1] == args.direction}
        report = RetrievalReport(
            means=keep, stds={k: report.stds[k] for k in keep}, n_seeds=report.n_seeds
        )
    print(format_table(report, ks=ks, title=f"split={args.split}"))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _atomic_write_text(out / "report.txt", format_table(report, ks=ks) + "\n")
        write_report_jsonl(report, out / "report.jsonl")
        print(f"reports written to {out}")
    return 0


def cmd_experiment(args) -> int:
    name = args.recipe.upper()
    if name not in RECIPES:
        print(f"unknown recipe {args.recipe!r}; available: {', '.join(sorted(RECIPES))}",
              file=sys.stderr)
        return 2
    recipe = RECIPES[name]
    seeds = tuple(int(s) for s in args.seeds.split(","))
    settings = recipe.settings
    if args.max_iterations is not None:
        settings = ExperimentSettings(**{**asdict(settings),
                                         "max_iterations": args.max_iterations})
    result = run_recipe(
        recipe, seeds, base_seed=args.base_seed, corpus_dir=args.corpus,
        settings=settings, workers=args.workers,
        progress=(lambda msg: print(msg, file=sys.stderr)) if args.verbose else None,
    )
    header = json.dumps({
        "recipe": recipe.name, "seeds": list(seeds), "base_seed": args.base_seed,
        "settings": asdict(settings), "corpus": args.corpus,
    }, sort_keys=True)
    table = f"# {header}\n" + render_table(recipe, result)
    print(table)
    if args.out:
        out = Path(args.out)
        _atomic_write_text(out / f"{recipe.name}_table.txt", table + "\n")
        lines = []
        for arm, report in result.reports.items():
            for record in report_records(report):
                record["arm"] = arm
                lines.append(json.dumps(record, sort_keys=True))
        _atomic_write_text(out / f"{recipe.name}_results.jsonl", "\n".join(lines) + "\n")
        print(f"results written to {out}", file=sys.stderr)
    return 0


def cmd_vocab_stats(args) -> int:
    corpus = _load_corpus_dir(args.corpus)
    vocab = build_vocabulary(corpus, args.min_count)
    total, union, reduction = vocab_union_stats(corpus, args.min_count)
    print(f"tokens kept (joint, min_count={args.min_count}): {len(vocab) - 1} + UNK")
    print(f"per-language total: {total}  union: {union}  reduction: {100 * reduction:.1f}%")
    langs = sorted(vocab.lang_tokens)
    print("jaccard overlap (raw token sets):")
    header = "      " + "  ".join(f"{lang:>6}" for lang in langs)
    print(header)
    for a in langs:
        cells = []
        for b in langs:
            cells.append(f"{jaccard_overlap(vocab, a, b):6.2f}")
        print(f"{a:>6}" + "  " + "  ".join(cells))
    return 0


def cmd_pairs(args) -> int:
    corpus = _load_corpus_dir(args.corpus)
    languages = _parse_langs(args.langs) if args.langs else tuple(corpus.languages())
    pair_set = generate_c2c_pairs(corpus, languages)
    per_image: dict[str, int] = {}
    for a, b in pair_set.pairs:
        per_image[corpus.captions[a].image_id] = per_image.get(corpus.captions[a].image_id, 0) + 1
    print(f"{len(pair_set)} caption pairs over {len(per_image)} images "
          f"({', '.join(languages)})")
    if args.out:
        lines = [f"{a}\t{b}" for a, b in pair_set.pairs]
        _atomic_write_text(Path(args.out), "\n".join(lines) + "\n")
        print(f"pair list written to {args.out}")
    else:
        for a, b in pair_set.pairs[:args.head]:
            ca, cb = corpus.captions[a], corpus.captions[b]
            print(f"{a}\t{b}\t{ca.image_id}\t{ca.language}/{cb.language}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mmembed",
        description="Multilingual multimodal embedding training and evaluation harness.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic grounded corpus")
    p.add_argument("--regime", required=True, choices=synth_mod.REGIMES)
    p.add_argument("--langs", required=True, help="comma-separated language codes")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help=f"output directory (default ${OUT_DIR_ENV} or ./runs)")
    p.add_argument("--n-train", type=int, default=500)
    p.add_argument("--n-val", type=int, default=100)
    p.add_argument("--n-test", type=int, default=100)
    p.add_argument("--d-concepts", type=int, default=16)
    p.add_argument("--m-active", type=int, default=4)
    p.add_argument("--tokens-per-concept", type=int, default=3)
    p.add_argument("--d-img", type=int, default=64)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--captions-per-image", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--p-c2i", dest="p_c2i", type=float, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--eval-every", dest="eval_every", default=None)
    p.add_argument("--max-iterations", dest="max_iterations", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a corpus")
    p.add_argument("--checkpoint", required=True, help="checkpoint stem or manifest path")
    p.add_argument("--corpus", required=True, help="corpus directory")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--langs", default=None)
    p.add_argument("--ks", default="1,5,10")
    p.add_argument("--direction", default="both", choices=("both", "i2t", "t2i"))
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("experiment", help="run a named experiment recipe")
    p.add_argument("--recipe", required=True)
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--base-seed", dest="base_seed", type=int, default=0)
    p.add_argument("--corpus", default=None, help="substitute a real corpus directory")
    p.add_argument("--max-iterations", dest="max_iterations", type=int, default=None)
    p.add_argument("--workers", type=int, default=1,
                   help="train (arm, seed) runs in this many parallel processes")
    p.add_argument("--out", default=None)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("vocab-stats", help="vocabulary union and overlap statistics")
    p.add_argument("--corpus", required=True)
    p.add_argument("--min-count", dest="min_count", type=int, default=4)
    p.set_defaults(func=cmd_vocab_stats)

    p = sub.add_parser("pairs", help="dump the cross-language caption pair set")
    p.add_argument("--corpus", required=True)
    p.add_argument("--langs", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--head", type=int, default=10)
    p.set_defaults(func=cmd_pairs)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _CONFIG_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except MmembedError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
