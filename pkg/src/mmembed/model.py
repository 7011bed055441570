"""Joint-space encoders: shared-embedding GRU for captions, affine map for images.

Both encoders end in row-wise L2 normalization so cosine similarity is a
plain dot product. One text encoder serves every language; the embedding
matrix covers the union vocabulary.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import numerics as nm
from .errors import (
    ConfigurationError,
    CorpusFormatError,
    DegenerateCaptionError,
    DimensionError,
    VocabularyError,
)
from .numerics import ParamBlock, ParameterLeaves, Tensor


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_emb: int = 300
    d_hid: int = 1024
    d_img: int = 2048
    image_bias: bool = True
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "d_emb", "d_hid", "d_img"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")


@dataclass
class TextEncoderParams:
    embedding: ParamBlock      # vocab_size x d_emb
    w_z: ParamBlock            # d_emb x d_hid
    w_r: ParamBlock
    w_h: ParamBlock
    u_z: ParamBlock            # d_hid x d_hid
    u_r: ParamBlock
    u_h: ParamBlock
    b_z: ParamBlock            # 1 x d_hid
    b_r: ParamBlock
    b_h: ParamBlock

    def blocks(self) -> list[ParamBlock]:
        return [self.embedding, self.w_z, self.w_r, self.w_h,
                self.u_z, self.u_r, self.u_h, self.b_z, self.b_r, self.b_h]


@dataclass
class ImageEncoderParams:
    projection: ParamBlock     # d_img x d_hid
    bias: ParamBlock | None    # 1 x d_hid, optional

    def blocks(self) -> list[ParamBlock]:
        return [self.projection] + ([self.bias] if self.bias is not None else [])


@dataclass
class ModelParams:
    config: ModelConfig
    text: TextEncoderParams
    image: ImageEncoderParams

    def blocks(self) -> list[ParamBlock]:
        return self.text.blocks() + self.image.blocks()

    def copy(self) -> "ModelParams":
        blocks = {b.name: b.copy() for b in self.blocks()}
        return _assemble(self.config, blocks)


INIT_SCALE = 0.1


def init_params(vocab_size: int, d_emb: int = 300, d_hid: int = 1024, d_img: int = 2048,
                seed: int = 0, image_bias: bool = True, dtype=np.float32) -> ModelParams:
    """Seeded initialization: weights uniform in [-0.1, 0.1], biases zero."""
    config = ModelConfig(vocab_size, d_emb, d_hid, d_img, image_bias, seed)
    rng = np.random.default_rng(seed)

    def uniform(name, rows, cols):
        value = rng.uniform(-INIT_SCALE, INIT_SCALE, size=(rows, cols)).astype(dtype)
        return ParamBlock.create(name, value)

    def zeros(name, cols):
        return ParamBlock.create(name, np.zeros((1, cols), dtype=dtype))

    text = TextEncoderParams(
        embedding=uniform("text.embedding", vocab_size, d_emb),
        w_z=uniform("text.w_z", d_emb, d_hid),
        w_r=uniform("text.w_r", d_emb, d_hid),
        w_h=uniform("text.w_h", d_emb, d_hid),
        u_z=uniform("text.u_z", d_hid, d_hid),
        u_r=uniform("text.u_r", d_hid, d_hid),
        u_h=uniform("text.u_h", d_hid, d_hid),
        b_z=zeros("text.b_z", d_hid),
        b_r=zeros("text.b_r", d_hid),
        b_h=zeros("text.b_h", d_hid),
    )
    image = ImageEncoderParams(
        projection=uniform("image.projection", d_img, d_hid),
        bias=zeros("image.bias", d_hid) if image_bias else None,
    )
    return ModelParams(config, text, image)


def _assemble(config: ModelConfig, blocks: dict[str, ParamBlock]) -> ModelParams:
    text = TextEncoderParams(
        embedding=blocks["text.embedding"],
        w_z=blocks["text.w_z"], w_r=blocks["text.w_r"], w_h=blocks["text.w_h"],
        u_z=blocks["text.u_z"], u_r=blocks["text.u_r"], u_h=blocks["text.u_h"],
        b_z=blocks["text.b_z"], b_r=blocks["text.b_r"], b_h=blocks["text.b_h"],
    )
    image = ImageEncoderParams(
        projection=blocks["image.projection"],
        bias=blocks.get("image.bias"),
    )
    return ModelParams(config, text, image)


class GruWeights(NamedTuple):
    """The nine GRU parameter tensors on the tape."""

    w_z: Tensor
    w_r: Tensor
    w_h: Tensor
    u_z: Tensor
    u_r: Tensor
    u_h: Tensor
    b_z: Tensor
    b_r: Tensor
    b_h: Tensor

    @classmethod
    def from_params(cls, text: TextEncoderParams, leaves: ParameterLeaves) -> "GruWeights":
        return cls(*[leaves.leaf(b) for b in text.blocks()[1:]])


def gru_cell(x: Tensor, h: Tensor, weights: GruWeights) -> Tensor:
    """One recurrence step: h' = (1 - z) * h + z * h_tilde.

    z = sigma(x W_z + h U_z + b_z)
    r = sigma(x W_r + h U_r + b_r)
    h_tilde = tanh(x W_h + (r * h) U_h + b_h)
    """
    z = nm.sigmoid(nm.add_bias(nm.add(nm.matmul(x, weights.w_z), nm.matmul(h, weights.u_z)), weights.b_z))
    r = nm.sigmoid(nm.add_bias(nm.add(nm.matmul(x, weights.w_r), nm.matmul(h, weights.u_r)), weights.b_r))
    h_tilde = nm.tanh(
        nm.add_bias(nm.add(nm.matmul(x, weights.w_h), nm.matmul(nm.mul(r, h), weights.u_h)), weights.b_h)
    )
    return nm.add(h, nm.mul(z, nm.sub(h_tilde, h)))


def encode_captions(params: ModelParams, sequences, leaves: ParameterLeaves | None = None) -> Tensor:
    """Encode index sequences to unit-norm rows (GRU final hidden states).

    Each sequence is processed to its own true length: padded timesteps carry
    the previous hidden state through unchanged, so a caption's row is
    identical whether it is encoded alone or inside a padded batch.
    """
    sequences = [list(map(int, s)) for s in sequences]
    if not sequences:
        raise DegenerateCaptionError("empty caption batch")
    vocab_size = params.config.vocab_size
    for s in sequences:
        if not s:
            raise DegenerateCaptionError("caption with no tokens in batch")
        for i in s:
            if i < 0 or i >= vocab_size:
                raise VocabularyError(f"token index {i} outside vocabulary of {vocab_size}")
    if leaves is None:
        leaves = ParameterLeaves()
    dtype = params.text.embedding.value.dtype
    n = len(sequences)
    max_len = max(len(s) for s in sequences)
    idx = np.zeros((n, max_len), dtype=np.intp)
    active = np.zeros((n, max_len), dtype=bool)
    for row, s in enumerate(sequences):
        idx[row, :len(s)] = s
        active[row, :len(s)] = True

    emb = leaves.leaf(params.text.embedding)
    weights = GruWeights.from_params(params.text, leaves)
    h = Tensor(np.zeros((n, params.config.d_hid), dtype=dtype))
    for t in range(max_len):
        x_t = nm.gather_rows(emb, idx[:, t])
        h_new = gru_cell(x_t, h, weights)
        mask = active[:, t]
        h = h_new if mask.all() else nm.where_rows(mask, h_new, h)
    return nm.l2_normalize_rows(h)


def encode_images(params: ModelParams, features, leaves: ParameterLeaves | None = None) -> Tensor:
    """Project feature rows into the joint space and normalize."""
    feats = np.asarray(features)
    if feats.ndim != 2 or feats.shape[1] != params.config.d_img:
        raise DimensionError(
            f"feature matrix {feats.shape} does not match image dim {params.config.d_img}"
        )
    if leaves is None:
        leaves = ParameterLeaves()
    dtype = params.image.projection.value.dtype
    x = Tensor(feats.astype(dtype, copy=False))
    out = nm.matmul(x, leaves.leaf(params.image.projection))
    if params.image.bias is not None:
        out = nm.add_bias(out, leaves.leaf(params.image.bias))
    return nm.l2_normalize_rows(out)


# -- checkpoint container ---------------------------------------------------
#
# <stem>.json  manifest: configuration, vocabulary hash, block names/shapes
# <stem>.bin   payload: float32 little-endian values per block, manifest order

CHECKPOINT_FORMAT = "mmembed-checkpoint-v1"


def save_checkpoint(params: ModelParams, vocab_hash: str, stem, extra: dict | None = None) -> tuple[str, str]:
    stem = str(stem)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "config": {
            "vocab_size": params.config.vocab_size,
            "d_emb": params.config.d_emb,
            "d_hid": params.config.d_hid,
            "d_img": params.config.d_img,
            "image_bias": params.config.image_bias,
            "seed": params.config.seed,
        },
        "vocab_hash": vocab_hash,
        "extra": extra or {},
        "blocks": [
            {"name": b.name, "rows": b.value.shape[0], "cols": b.value.shape[1]}
            for b in params.blocks()
        ],
    }
    manifest_path, payload_path = stem + ".json", stem + ".bin"
    with open(payload_path, "wb") as fh:
        for b in params.blocks():
            fh.write(b.value.astype("<f4", copy=False).tobytes(order="C"))
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    return manifest_path, payload_path


def load_checkpoint(stem) -> tuple[ModelParams, str, dict]:
    stem = str(stem)
    if stem.endswith(".json"):
        stem = stem[:-5]
    manifest_path, payload_path = stem + ".json", stem + ".bin"
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CorpusFormatError(f"{manifest_path}: not a {CHECKPOINT_FORMAT} manifest")
    cfg = manifest["config"]
    config = ModelConfig(
        vocab_size=cfg["vocab_size"], d_emb=cfg["d_emb"], d_hid=cfg["d_hid"],
        d_img=cfg["d_img"], image_bias=cfg["image_bias"], seed=cfg["seed"],
    )
    with open(payload_path, "rb") as fh:
        payload = fh.read()
    blocks: dict[str, ParamBlock] = {}
    offset = 0
    for spec in manifest["blocks"]:
        rows, cols = spec["rows"], spec["cols"]
        nbytes = rows * cols * 4
        chunk = payload[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise CorpusFormatError(f"{payload_path}: truncated at block {spec['name']!r}")
        offset += nbytes
        value = np.frombuffer(chunk, dtype="<f4").reshape(rows, cols).copy()
        blocks[spec["name"]] = ParamBlock.create(spec["name"], value)
    if offset != len(payload):
        raise CorpusFormatError(f"{payload_path}: {len(payload) - offset} trailing bytes")
    params = _assemble(config, blocks)
    return params, manifest["vocab_hash"], manifest.get("extra", {})
