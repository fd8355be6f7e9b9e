"""Metadata-aware Transformer session encoder.

Each position's input is ``concat(item_emb, sum_t category_emb_t, mean(token_emb)) + position_emb``;
the sequence goes through post-norm Transformer layers and is mean-pooled over
valid positions into ``z_final``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Parameter, Tensor
from .data import ItemCatalog

EMBED_INIT = 0.05


@dataclass(frozen=True)
class EncoderConfig:
    d_item: int = 128
    d_category: int = 128
    d_metadata: int = 128
    layers: int = 2
    heads: int = 8
    max_len: int = 20
    ff_mult: int = 4
    dropout: float = 0.0
    positional: bool = True

    @property
    def width(self) -> int:
        return self.d_item + self.d_category + self.d_metadata

    def validate(self) -> None:
        for name in ("d_item", "d_category", "d_metadata", "layers", "heads", "max_len", "ff_mult"):
            if getattr(self, name) < 1:
                raise ValueError(f"model.{name} must be positive")
        if self.width % self.heads:
            raise ValueError(f"model width {self.width} is not divisible by heads={self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("model.dropout must be in [0, 1)")


@dataclass
class LayerParams:
    wq: Parameter
    bq: Parameter
    wk: Parameter
    bk: Parameter
    wv: Parameter
    bv: Parameter
    wo: Parameter
    bo: Parameter
    ln1_gain: Parameter
    ln1_bias: Parameter
    w1: Parameter
    b1: Parameter
    w2: Parameter
    b2: Parameter
    ln2_gain: Parameter
    ln2_bias: Parameter

    def parameters(self) -> list[Parameter]:
        return list(self.__dict__.values())


@dataclass
class EncoderParams:
    item: Parameter                     # (|I| + 1, d_item); last row is PAD
    categories: list[Parameter]         # per level (|C_t| + 1, d_category); last row is UNKNOWN
    metadata: Parameter                 # (vocab, d_metadata)
    position: Parameter                 # (max_len, D)
    layers: list[LayerParams] = field(default_factory=list)

    def parameters(self) -> list[Parameter]:
        out = [self.item, *self.categories, self.metadata, self.position]
        for layer in self.layers:
            out.extend(layer.parameters())
        return out


def init_layer(rng: np.random.Generator, width: int, ff_mult: int, prefix: str) -> LayerParams:
    ff = width * ff_mult
    return LayerParams(
        wq=ag.fan_in_init(rng, width, width, f"{prefix}.wq"), bq=ag.zeros(width, f"{prefix}.bq"),
        wk=ag.fan_in_init(rng, width, width, f"{prefix}.wk"), bk=ag.zeros(width, f"{prefix}.bk"),
        wv=ag.fan_in_init(rng, width, width, f"{prefix}.wv"), bv=ag.zeros(width, f"{prefix}.bv"),
        wo=ag.fan_in_init(rng, width, width, f"{prefix}.wo"), bo=ag.zeros(width, f"{prefix}.bo"),
        ln1_gain=ag.ones(width, f"{prefix}.ln1.gain"), ln1_bias=ag.zeros(width, f"{prefix}.ln1.bias"),
        w1=ag.fan_in_init(rng, width, ff, f"{prefix}.ff1.w"), b1=ag.zeros(ff, f"{prefix}.ff1.b"),
        w2=ag.fan_in_init(rng, ff, width, f"{prefix}.ff2.w"), b2=ag.zeros(width, f"{prefix}.ff2.b"),
        ln2_gain=ag.ones(width, f"{prefix}.ln2.gain"), ln2_bias=ag.zeros(width, f"{prefix}.ln2.bias"),
    )


def init_encoder(
    rng: np.random.Generator, n_items: int, category_sizes: tuple[int, ...], metadata_vocab: int,
    config: EncoderConfig,
) -> EncoderParams:
    config.validate()
    D = config.width
    return EncoderParams(
        item=ag.uniform_init(rng, (n_items + 1, config.d_item), EMBED_INIT, "encoder.item"),
        categories=[
            ag.uniform_init(rng, (size + 1, config.d_category), EMBED_INIT, f"encoder.category.{t}")
            for t, size in enumerate(category_sizes)
        ],
        metadata=ag.uniform_init(rng, (metadata_vocab, config.d_metadata), EMBED_INIT, "encoder.metadata"),
        position=ag.uniform_init(rng, (config.max_len, D), EMBED_INIT, "encoder.position"),
        layers=[init_layer(rng, D, config.ff_mult, f"encoder.layer.{i}") for i in range(config.layers)],
    )


class ItemFeatures:
    """Per-item category and metadata-token lookups, with a trailing PAD item."""

    def __init__(self, catalog: ItemCatalog, unknown: tuple[int, ...]):
        self.n_items = catalog.item_count
        self.categories = np.vstack([catalog.categories, np.array(unknown, dtype=np.int64)[None, :]])
        ptr = catalog.token_ptr
        self.token_start = np.append(ptr[:-1], 0)
        self.token_len = np.append(np.diff(ptr), 0)
        self.token_ids = catalog.token_ids

    def metadata_bags(self, items: np.ndarray):
        flat = items.reshape(-1)
        if flat.size and (flat.min() < 0 or flat.max() > self.n_items):
            raise IndexError("item index out of range")
        lens = self.token_len[flat]
        starts = self.token_start[flat]
        total = int(lens.sum())
        segments = np.repeat(np.arange(flat.size), lens)
        offsets = np.arange(total) - np.repeat(np.cumsum(lens) - lens, lens)
        indices = self.token_ids[np.repeat(starts, lens) + offsets]
        weights = np.repeat(1.0 / np.maximum(lens, 1), lens)
        return indices, segments, weights, flat.size


def embed_items(items: np.ndarray, params: EncoderParams, features: ItemFeatures,
                config: EncoderConfig) -> Tensor:
    """Input vectors of shape (B, L, D) for a padded (B, L) item matrix."""
    items = np.asarray(items, dtype=np.int64)
    B, L = items.shape
    if L > config.max_len:
        raise ValueError(f"sequence length {L} exceeds max_len {config.max_len}")
    id_part = ag.embedding(params.item, items)
    cats = features.categories[items]
    cat_part = ag.embedding(params.categories[0], cats[..., 0])
    for t in range(1, len(params.categories)):
        cat_part = ag.add(cat_part, ag.embedding(params.categories[t], cats[..., t]))
    meta = ag.embedding_bag_mean(params.metadata, *features.metadata_bags(items))
    meta = ag.reshape(meta, (B, L, config.d_metadata))
    x = ag.concat([id_part, cat_part, meta], axis=-1)
    if config.positional:
        x = ag.add(x, ag.embedding(params.position, np.arange(L)))
    return x


def embed_item(item: int, position: int, params: EncoderParams, features: ItemFeatures,
               config: EncoderConfig) -> np.ndarray:
    if not 0 <= item < features.n_items:
        raise IndexError(f"invalid item index {item}")
    if not 0 <= position < config.max_len:
        raise IndexError(f"position {position} outside max_len {config.max_len}")
    with ag.no_grad():
        seq = np.full((1, position + 1), features.n_items, dtype=np.int64)
        seq[0, position] = item
        return embed_items(seq, params, features, config).data[0, position]


def _split_heads(x: Tensor, heads: int) -> Tensor:
    B, L, D = x.shape
    return ag.transpose(ag.reshape(x, (B, L, heads, D // heads)), (0, 2, 1, 3))


def self_attention(x: Tensor, mask: np.ndarray, layer: LayerParams, heads: int) -> tuple[Tensor, Tensor]:
    """Masked multi-head scaled dot-product attention; returns (mixed output, attention weights)."""
    B, L, D = x.shape
    if D % heads:
        raise ValueError(f"width {D} not divisible by {heads} heads")
    q = _split_heads(ag.affine(x, layer.wq, layer.bq), heads)
    k = _split_heads(ag.affine(x, layer.wk, layer.bk), heads)
    v = _split_heads(ag.affine(x, layer.wv, layer.bv), heads)
    scores = ag.scale(ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(D // heads))
    weights = ag.masked_softmax(scores, np.asarray(mask, dtype=bool)[:, None, None, :])
    mixed = ag.transpose(ag.matmul(weights, v), (0, 2, 1, 3))
    mixed = ag.reshape(mixed, (B, L, D))
    return ag.affine(mixed, layer.wo, layer.bo), weights


def transformer_layer(x: Tensor, mask: np.ndarray, layer: LayerParams, heads: int,
                      dropout: float = 0.0, rng: np.random.Generator | None = None) -> Tensor:
    attn, _ = self_attention(x, mask, layer, heads)
    x = ag.layer_norm(ag.add(x, ag.dropout(attn, dropout, rng)), layer.ln1_gain, layer.ln1_bias)
    hidden = ag.relu(ag.affine(x, layer.w1, layer.b1))
    ff = ag.affine(hidden, layer.w2, layer.b2)
    return ag.layer_norm(ag.add(x, ag.dropout(ff, dropout, rng)), layer.ln2_gain, layer.ln2_bias)


@dataclass
class SessionEncoding:
    z_final: Tensor         # (B, D)
    outputs: Tensor         # (B, L, D) final-layer outputs


def encode_session(items: np.ndarray, mask: np.ndarray, params: EncoderParams, features: ItemFeatures,
                   config: EncoderConfig, rng: np.random.Generator | None = None) -> SessionEncoding:
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2 or not mask.any(axis=1).all():
        raise ValueError("every sequence needs at least one valid (unmasked) position")
    x = embed_items(items, params, features, config)
    for layer in params.layers:
        x = transformer_layer(x, mask, layer, config.heads, config.dropout, rng)
    return SessionEncoding(ag.masked_mean(x, mask), x)
