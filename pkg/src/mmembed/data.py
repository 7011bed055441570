"""Corpus data model, shared vocabulary, caption-pair generation, and file I/O.

A corpus holds images (id, feature vector, split label) and captions
(image id, language, token sequence). Captions are identified by their
position in the corpus caption list, which all sampling operations and the
file round trip preserve deterministically.
"""

from __future__ import annotations

import hashlib
import struct
from collections import Counter, defaultdict
from dataclasses import dataclass

import numpy as np

from .errors import (
    ConfigurationError,
    CorpusFormatError,
    DegenerateCaptionError,
    EmptyCorpusError,
    InsufficientLanguagesError,
    MissingCaptionError,
    UnknownLanguageError,
)

SPLITS = ("train", "val", "test")
UNK_TOKEN = "<unk>"

FEATURE_MAGIC = b"IMGF"


@dataclass(frozen=True)
class Caption:
    caption_id: int
    image_id: str
    language: str
    tokens: tuple[str, ...]


@dataclass
class Image:
    image_id: str
    features: np.ndarray
    split: str

    def __eq__(self, other):
        if not isinstance(other, Image):
            return NotImplemented
        return (
            self.image_id == other.image_id
            and self.split == other.split
            and self.features.dtype == other.features.dtype
            and np.array_equal(self.features, other.features)
        )


class Corpus:
    """Immutable-by-convention collection of images and captions.

    Construction validates referential integrity: every caption's image must
    exist, feature vectors share one dimension, and token sequences are
    non-empty. Lookup indexes are built once.
    """

    def __init__(self, images: list[Image], captions: list[Caption]):
        self.images = list(images)
        self.captions = list(captions)
        self._image_row = {img.image_id: i for i, img in enumerate(self.images)}
        if len(self._image_row) != len(self.images):
            raise CorpusFormatError("duplicate image ids")
        dims = {img.features.shape for img in self.images}
        if len(dims) > 1:
            raise CorpusFormatError(f"inconsistent feature dimensions: {sorted(dims)}")
        for img in self.images:
            if img.features.ndim != 1:
                raise CorpusFormatError(f"features of {img.image_id} are not a vector")
            if img.split not in SPLITS:
                raise CorpusFormatError(f"unknown split {img.split!r} for {img.image_id}")
        self._by_image_lang: dict[tuple[str, str], list[int]] = defaultdict(list)
        for pos, cap in enumerate(self.captions):
            if cap.caption_id != pos:
                raise CorpusFormatError(
                    f"caption_id {cap.caption_id} does not match position {pos}"
                )
            if cap.image_id not in self._image_row:
                raise CorpusFormatError(f"caption {pos} references unknown image {cap.image_id}")
            if not cap.tokens:
                raise CorpusFormatError(f"caption {pos} has no tokens")
            self._by_image_lang[(cap.image_id, cap.language)].append(pos)

    # -- basic queries ---------------------------------------------------

    @property
    def feature_dim(self) -> int:
        if not self.images:
            raise EmptyCorpusError("corpus has no images")
        return self.images[0].features.shape[0]

    def languages(self) -> list[str]:
        return sorted({c.language for c in self.captions})

    def split_of(self, image_id: str) -> str:
        return self.images[self._image_row[image_id]].split

    def images_in_split(self, split: str) -> list[Image]:
        return [img for img in self.images if img.split == split]

    def captions_in_split(self, split: str, language: str | None = None) -> list[Caption]:
        out = []
        for cap in self.captions:
            if self.split_of(cap.image_id) != split:
                continue
            if language is not None and cap.language != language:
                continue
            out.append(cap)
        return out

    def captions_of(self, image_id: str, language: str) -> list[Caption]:
        return [self.captions[i] for i in self._by_image_lang.get((image_id, language), ())]

    def features_of(self, image_id: str) -> np.ndarray:
        return self.images[self._image_row[image_id]].features

    def feature_matrix(self, image_ids: list[str]) -> np.ndarray:
        return np.stack([self.features_of(i) for i in image_ids])

    def __eq__(self, other):
        if not isinstance(other, Corpus):
            return NotImplemented
        return self.images == other.images and self.captions == other.captions

    def __repr__(self):
        return f"Corpus({len(self.images)} images, {len(self.captions)} captions)"


def make_captions(records) -> list[Caption]:
    """Build position-identified captions from (image_id, language, tokens) triples."""
    return [
        Caption(i, image_id, language, tuple(tokens))
        for i, (image_id, language, tokens) in enumerate(records)
    ]


@dataclass(frozen=True)
class Vocabulary:
    """Token index shared across all languages, with an UNK symbol.

    Retained tokens occurred at least ``min_count`` times in the training
    split, counting all languages jointly; indexes are the lexicographic
    order of the retained tokens, with UNK appended last. ``lang_tokens``
    keeps each language's raw (pre-threshold) training token set for overlap
    statistics.
    """

    token_to_index: dict[str, int]
    index_to_token: tuple[str, ...]
    unk_index: int
    min_count: int
    lang_tokens: dict[str, frozenset[str]]

    def __len__(self) -> int:
        return len(self.index_to_token)

    def content_hash(self) -> str:
        payload = "\n".join(self.index_to_token).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()


def build_vocabulary(corpus: Corpus, min_count: int = 4) -> Vocabulary:
    """Count tokens over the training split of all languages jointly."""
    train_caps = corpus.captions_in_split("train")
    if not train_caps:
        raise EmptyCorpusError("training split has no captions")
    counts: Counter[str] = Counter()
    lang_tokens: dict[str, set[str]] = defaultdict(set)
    for cap in train_caps:
        counts.update(cap.tokens)
        lang_tokens[cap.language].update(cap.tokens)
    kept = sorted(t for t, c in counts.items() if c >= min_count and t != UNK_TOKEN)
    index_to_token = tuple(kept) + (UNK_TOKEN,)
    token_to_index = {t: i for i, t in enumerate(index_to_token)}
    return Vocabulary(
        token_to_index=token_to_index,
        index_to_token=index_to_token,
        unk_index=len(index_to_token) - 1,
        min_count=min_count,
        lang_tokens={lang: frozenset(toks) for lang, toks in lang_tokens.items()},
    )


def encode_tokens(vocab: Vocabulary, tokens) -> list[int]:
    tokens = list(tokens)
    if not tokens:
        raise DegenerateCaptionError("cannot encode an empty token sequence")
    unk = vocab.unk_index
    return [vocab.token_to_index.get(t, unk) for t in tokens]


def decode_tokens(vocab: Vocabulary, indices) -> list[str]:
    return [vocab.index_to_token[i] for i in indices]


def jaccard_overlap(vocab: Vocabulary, lang_a: str, lang_b: str) -> float:
    """|A n B| / |A u B| over the raw (pre-UNK) training token sets."""
    for lang in (lang_a, lang_b):
        if lang not in vocab.lang_tokens:
            raise UnknownLanguageError(f"language {lang!r} not present in vocabulary")
    a, b = vocab.lang_tokens[lang_a], vocab.lang_tokens[lang_b]
    union = len(a | b)
    if union == 0:
        return 0.0
    return len(a & b) / union


def vocab_union_stats(corpus: Corpus, min_count: int = 4) -> tuple[int, int, float]:
    """Per-language thresholded vocabulary sizes vs. their union.

    Returns (total, union, reduction): total is the sum of per-language
    vocabulary sizes (each thresholded at ``min_count`` within its own
    language), union the size of the set union of those vocabularies, and
    reduction = 1 - union / total.
    """
    train_caps = corpus.captions_in_split("train")
    if not train_caps:
        raise EmptyCorpusError("training split has no captions")
    per_lang: dict[str, Counter[str]] = defaultdict(Counter)
    for cap in train_caps:
        per_lang[cap.language].update(cap.tokens)
    vocabs = {
        lang: {t for t, c in counts.items() if c >= min_count}
        for lang, counts in per_lang.items()
    }
    total = sum(len(v) for v in vocabs.values())
    union = len(set().union(*vocabs.values())) if vocabs else 0
    reduction = 0.0 if total == 0 else 1.0 - union / total
    return total, union, reduction


@dataclass(frozen=True)
class CaptionPairSet:
    """Cross-language caption pairs <a, b> describing the same image."""

    pairs: tuple[tuple[int, int], ...]

    def __len__(self) -> int:
        return len(self.pairs)


def generate_c2c_pairs(corpus: Corpus, languages) -> CaptionPairSet:
    """All cross products of same-image caption sets across language pairs.

    For each training image and each unordered pair of distinct languages
    (m, n), every element of C_m x C_n appears exactly once, in deterministic
    (image order, sorted language pair, caption order) order.
    """
    languages = sorted(set(languages))
    if len(languages) < 2:
        raise InsufficientLanguagesError(
            f"caption pairing needs at least 2 languages, got {languages}"
        )
    pairs: list[tuple[int, int]] = []
    for img in corpus.images_in_split("train"):
        for i, lang_m in enumerate(languages):
            caps_m = corpus.captions_of(img.image_id, lang_m)
            if not caps_m:
                continue
            for lang_n in languages[i + 1:]:
                caps_n = corpus.captions_of(img.image_id, lang_n)
                for ca in caps_m:
                    for cb in caps_n:
                        pairs.append((ca.caption_id, cb.caption_id))
    return CaptionPairSet(tuple(pairs))


def sample_one_caption_per_language(corpus: Corpus, languages, seed: int) -> Corpus:
    """Keep exactly one training caption per (image, language); val/test untouched.

    Training captions are restricted to the selected languages. The selection
    is uniform per (image, language) and deterministic given the seed.
    """
    languages = sorted(set(languages))
    rng = np.random.default_rng(seed)
    records = []
    for img in corpus.images:
        if img.split != "train":
            continue
        for lang in languages:
            caps = corpus.captions_of(img.image_id, lang)
            if not caps:
                raise MissingCaptionError(
                    f"image {img.image_id} has no {lang!r} caption in the training split"
                )
            chosen = caps[int(rng.integers(len(caps)))]
            records.append((chosen.image_id, chosen.language, chosen.tokens))
    for cap in corpus.captions:
        if corpus.split_of(cap.image_id) != "train":
            records.append((cap.image_id, cap.language, cap.tokens))
    return Corpus(corpus.images, make_captions(records))


HALF_MODES = ("half-mono", "overlap", "disjoint")


def split_half_overlap_disjoint(corpus: Corpus, mode: str, lang_a: str, lang_b: str,
                                seed: int) -> Corpus:
    """Image-halving conditions for two-language training corpora.

    The training images are shuffled once (seeded) and halved; with an odd
    count the first half receives the extra image. The same seed yields the
    same halves in every mode:

    - half-mono: first half of the images, captions in lang_a only;
    - overlap:   first half of the images, captions in both languages;
    - disjoint:  first half with lang_a captions plus second half with lang_b.

    Validation and test data are untouched.
    """
    if mode not in HALF_MODES:
        raise ConfigurationError(f"unknown mode {mode!r}; expected one of {HALF_MODES}")
    if lang_a == lang_b:
        raise ConfigurationError("lang_a and lang_b must differ")
    present = set(corpus.languages())
    for lang in (lang_a, lang_b):
        if lang not in present:
            raise ConfigurationError(f"language {lang!r} not present in corpus")
    train_ids = [img.image_id for img in corpus.images_in_split("train")]
    if not train_ids:
        raise EmptyCorpusError("training split has no images")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(train_ids))
    half_point = (len(train_ids) + 1) // 2
    first = {train_ids[i] for i in order[:half_point]}
    second = {train_ids[i] for i in order[half_point:]}

    def keep(image_id: str, language: str) -> bool:
        if mode == "half-mono":
            return image_id in first and language == lang_a
        if mode == "overlap":
            return image_id in first and language in (lang_a, lang_b)
        return (image_id in first and language == lang_a) or (
            image_id in second and language == lang_b
        )

    records = []
    kept_train_images: set[str] = set()
    for cap in corpus.captions:
        split = corpus.split_of(cap.image_id)
        if split == "train":
            if keep(cap.image_id, cap.language):
                records.append((cap.image_id, cap.language, cap.tokens))
                kept_train_images.add(cap.image_id)
        else:
            records.append((cap.image_id, cap.language, cap.tokens))
    images = [
        img for img in corpus.images
        if img.split != "train" or img.image_id in kept_train_images
    ]
    return Corpus(images, make_captions(records))


# -- file formats ---------------------------------------------------------
#
# Caption file (UTF-8 text): split<TAB>image_id<TAB>language<TAB>tok tok ...
# Feature file (binary LE):  b"IMGF", u32 count, u32 dim, count*dim float32
# Index file (UTF-8 text):   one image_id per feature row


def save_corpus(corpus: Corpus, captions_path, features_path, index_path) -> None:
    if not corpus.captions:
        raise EmptyCorpusError("refusing to save a corpus without captions")
    captioned = {c.image_id for c in corpus.captions}
    for img in corpus.images:
        if img.image_id not in captioned:
            raise CorpusFormatError(
                f"image {img.image_id} has no captions; its split would be lost on disk"
            )
    with open(captions_path, "w", encoding="utf-8") as fh:
        for cap in corpus.captions:
            for tok in cap.tokens:
                if not tok or any(ch.isspace() for ch in tok):
                    raise CorpusFormatError(
                        f"caption {cap.caption_id} token {tok!r} is empty or has whitespace"
                    )
            split = corpus.split_of(cap.image_id)
            fh.write(f"{split}\t{cap.image_id}\t{cap.language}\t{' '.join(cap.tokens)}\n")
    feats = np.stack([img.features for img in corpus.images]).astype("<f4", copy=False)
    with open(features_path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", feats.shape[0], feats.shape[1]))
        fh.write(feats.tobytes(order="C"))
    with open(index_path, "w", encoding="utf-8") as fh:
        for img in corpus.images:
            fh.write(img.image_id + "\n")


def load_corpus(captions_path, features_path, index_path) -> Corpus:
    with open(index_path, "r", encoding="utf-8") as fh:
        image_ids = [line.strip() for line in fh if line.strip()]
    if len(set(image_ids)) != len(image_ids):
        raise CorpusFormatError(f"{index_path}: duplicate image ids")

    with open(features_path, "rb") as fh:
        magic = fh.read(4)
        if magic != FEATURE_MAGIC:
            raise CorpusFormatError(f"{features_path}: bad magic {magic!r}")
        header = fh.read(8)
        if len(header) != 8:
            raise CorpusFormatError(f"{features_path}: truncated header")
        count, dim = struct.unpack("<II", header)
        payload = fh.read()
    expected = count * dim * 4
    if len(payload) != expected:
        raise CorpusFormatError(
            f"{features_path}: payload is {len(payload)} bytes, expected {expected}"
        )
    if count != len(image_ids):
        raise CorpusFormatError(
            f"feature count {count} disagrees with index of {len(image_ids)} ids"
        )
    feats = np.frombuffer(payload, dtype="<f4").reshape(count, dim)

    known_ids = set(image_ids)
    splits: dict[str, str] = {}
    records = []
    with open(captions_path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise CorpusFormatError(
                    f"{captions_path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}"
                )
            split, image_id, language, text = parts
            if split not in SPLITS:
                raise CorpusFormatError(f"{captions_path}:{lineno}: unknown split {split!r}")
            if image_id not in known_ids:
                raise CorpusFormatError(
                    f"{captions_path}:{lineno}: unknown image id {image_id!r}"
                )
            tokens = tuple(text.split())
            if not tokens:
                raise CorpusFormatError(f"{captions_path}:{lineno}: caption has no tokens")
            prev = splits.setdefault(image_id, split)
            if prev != split:
                raise CorpusFormatError(
                    f"{captions_path}:{lineno}: image {image_id} labeled both "
                    f"{prev!r} and {split!r}"
                )
            records.append((image_id, language, tokens))
    if not records:
        raise EmptyCorpusError(f"{captions_path}: no captions")
    missing = [i for i in image_ids if i not in splits]
    if missing:
        raise CorpusFormatError(
            f"{captions_path}: no captions (hence no split) for images {missing[:5]}"
        )
    images = [
        Image(image_id, feats[row].copy(), splits[image_id])
        for row, image_id in enumerate(image_ids)
    ]
    return Corpus(images, make_captions(records))


def merge_captions(base: Corpus, extra: Corpus) -> Corpus:
    """Union of two caption sets over an identical image collection."""
    if [i.image_id for i in base.images] != [i.image_id for i in extra.images]:
        raise ConfigurationError("corpora to merge must share the same images")
    for a, b in zip(base.images, extra.images):
        if a.split != b.split or not np.array_equal(a.features, b.features):
            raise ConfigurationError("corpora to merge must share splits and features")
    records = [(c.image_id, c.language, c.tokens) for c in base.captions]
    records += [(c.image_id, c.language, c.tokens) for c in extra.captions]
    return Corpus(base.images, make_captions(records))
