"""Hierarchical multi-task heads: category scoring, projection, next-item scoring and losses."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import AdamState, Parameter, Tensor
from .data import Batch, CategoryTaxonomy, ItemCatalog
from .encoder import EncoderConfig, EncoderParams, ItemFeatures, encode_session, init_encoder


class Mode(str, enum.Enum):
    HIERARCHICAL = "hierarchical"
    FLAT = "flat-mtl"
    SINGLE = "single-task"


@dataclass(frozen=True)
class LossWeights:
    category: float = 1.0       # weight of the summed category losses in the objective
    projection: float = 1.0     # weight of the projected category embeddings in the item head

    def __post_init__(self):
        if self.category < 0 or self.projection < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class HeadOptions:
    proj_bias: bool = False
    proj_input: str = "logits"          # or "softmax"
    detach_category_scores: bool = False

    def __post_init__(self):
        if self.proj_input not in ("logits", "softmax"):
            raise ValueError(f"proj_input must be 'logits' or 'softmax', got {self.proj_input!r}")


@dataclass
class HeadParams:
    category_w: list[Parameter]         # per level (D, |C_t| + 1)
    category_b: list[Parameter]
    proj_w: list[Parameter]             # per level (|C_t| + 1, D)
    proj_b: list[Parameter | None]
    item_w: Parameter                   # (D, |I|)
    item_b: Parameter

    def category_parameters(self) -> list[Parameter]:
        return [*self.category_w, *self.category_b]

    def projection_parameters(self) -> list[Parameter]:
        return [*self.proj_w, *(b for b in self.proj_b if b is not None)]

    def parameters(self) -> list[Parameter]:
        return [*self.category_parameters(), *self.projection_parameters(), self.item_w, self.item_b]


def init_heads(rng: np.random.Generator, width: int, n_items: int, category_sizes: tuple[int, ...],
               proj_bias: bool = False) -> HeadParams:
    classes = [c + 1 for c in category_sizes]
    return HeadParams(
        category_w=[ag.fan_in_init(rng, width, n, f"heads.category.{t}.w") for t, n in enumerate(classes)],
        category_b=[ag.zeros(n, f"heads.category.{t}.b") for t, n in enumerate(classes)],
        proj_w=[ag.fan_in_init(rng, n, width, f"heads.proj.{t}.w") for t, n in enumerate(classes)],
        proj_b=[ag.zeros(width, f"heads.proj.{t}.b") if proj_bias else None for t in range(len(classes))],
        item_w=ag.fan_in_init(rng, width, n_items, "heads.item.w"),
        item_b=ag.zeros(n_items, "heads.item.b"),
    )


# ---------------------------------------------------------------- head operations


def predict_categories(z_final: Tensor, heads: HeadParams) -> list[Tensor]:
    return [ag.affine(z_final, w, b) for w, b in zip(heads.category_w, heads.category_b)]


def project_category_predictions(scores: list[Tensor], heads: HeadParams,
                                 options: HeadOptions = HeadOptions()) -> list[Tensor]:
    out = []
    for p, w, b in zip(scores, heads.proj_w, heads.proj_b):
        if options.detach_category_scores:
            p = Tensor(p.data)
        if options.proj_input == "softmax":
            p = ag.softmax(p)
        out.append(ag.affine(p, w, b))
    return out


def predict_next_item(z_final: Tensor, projected: list[Tensor], lambda_c: float, heads: HeadParams) -> Tensor:
    if lambda_c < 0:
        raise ValueError("lambda_c must be non-negative")
    hidden = z_final
    if projected:
        total = projected[0]
        for e in projected[1:]:
            total = ag.add(total, e)
        if total.shape != z_final.shape:
            raise ag.ShapeError(f"projected width {total.shape} vs session encoding {z_final.shape}")
        hidden = ag.add(z_final, ag.scale(total, lambda_c))
    return ag.affine(hidden, heads.item_w, heads.item_b)


def category_loss(scores: Tensor, targets) -> Tensor:
    return ag.cross_entropy(scores, targets)


def item_loss(scores: Tensor, targets) -> Tensor:
    return ag.cross_entropy(scores, targets)


def combined_loss(next_loss: Tensor, category_losses: list[Tensor], weight: float) -> Tensor:
    if weight < 0:
        raise ValueError("category loss weight must be non-negative")
    if not category_losses or weight == 0:
        return next_loss
    total = category_losses[0]
    for loss in category_losses[1:]:
        total = ag.add(total, loss)
    return ag.add(next_loss, ag.scale(total, weight))


# ---------------------------------------------------------------- full model


@dataclass
class ForwardOutput:
    z_final: Tensor
    category_scores: list[Tensor]
    projected: list[Tensor]
    item_scores: Tensor
    category_losses: list[Tensor] = field(default_factory=list)
    item_loss: Tensor | None = None
    final_loss: Tensor | None = None


class Recommender:
    """All trainable tensors plus the catalog lookups they index into."""

    def __init__(self, catalog: ItemCatalog, taxonomy: CategoryTaxonomy, config: EncoderConfig,
                 seed: int = 0, head_options: HeadOptions = HeadOptions()):
        config.validate()
        self.catalog = catalog
        self.taxonomy = taxonomy
        self.config = config
        self.head_options = head_options
        sizes = taxonomy.sizes
        self.features = ItemFeatures(catalog, tuple(sizes))
        rng = np.random.default_rng(seed)
        self.encoder: EncoderParams = init_encoder(rng, catalog.item_count, sizes, catalog.metadata_vocab, config)
        self.heads: HeadParams = init_heads(rng, config.width, catalog.item_count, sizes, head_options.proj_bias)

    def parameters(self) -> list[Parameter]:
        return self.encoder.parameters() + self.heads.parameters()

    def named_parameters(self) -> dict[str, Parameter]:
        out = {}
        for p in self.parameters():
            if p.name in out:
                raise ValueError(f"duplicate parameter name {p.name}")
            out[p.name] = p
        return out

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def forward(self, items: np.ndarray, mask: np.ndarray, mode: Mode | str = Mode.HIERARCHICAL,
                weights: LossWeights = LossWeights(), targets: np.ndarray | None = None,
                target_categories: np.ndarray | None = None, rng: np.random.Generator | None = None,
                with_categories: bool = False) -> ForwardOutput:
        """Run encoder and heads; losses are filled in when targets are given.

        ``with_categories`` computes category scores in single-task mode as well
        (they do not affect the item scores there); evaluation uses it for candidates.
        """
        mode = Mode(mode)
        enc = encode_session(items, mask, self.encoder, self.features, self.config, rng)
        z = enc.z_final
        scores: list[Tensor] = []
        projected: list[Tensor] = []
        if mode is not Mode.SINGLE or with_categories:
            scores = predict_categories(z, self.heads)
        if mode is Mode.HIERARCHICAL:
            projected = project_category_predictions(scores, self.heads, self.head_options)
            p_next = predict_next_item(z, projected, weights.projection, self.heads)
        else:
            p_next = predict_next_item(z, [], 0.0, self.heads)
        out = ForwardOutput(z, scores, projected, p_next)
        if targets is not None:
            out.item_loss = item_loss(p_next, targets)
            if mode is not Mode.SINGLE:
                out.category_losses = [category_loss(p, target_categories[:, t]) for t, p in enumerate(scores)]
                out.final_loss = combined_loss(out.item_loss, out.category_losses, weights.category)
            else:
                out.final_loss = out.item_loss
        return out

    def forward_batch(self, batch: Batch, mode: Mode | str = Mode.HIERARCHICAL,
                      weights: LossWeights = LossWeights(), rng: np.random.Generator | None = None) -> ForwardOutput:
        return self.forward(batch.items, batch.mask, mode, weights, batch.target_items, batch.target_categories, rng)

    def astype(self, dtype) -> "Recommender":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = np.zeros_like(p.data)
        return self


class NonFiniteLossError(FloatingPointError):
    pass


def train_step(model: Recommender, batch: Batch, state: AdamState, weights: LossWeights = LossWeights(),
               mode: Mode | str = Mode.HIERARCHICAL, rng: np.random.Generator | None = None) -> dict[str, float]:
    """Forward, backward and one Adam update; returns the loss components."""
    mode = Mode(mode)
    model.zero_grad()
    out = model.forward_batch(batch, mode, weights, rng)
    final = float(out.final_loss.data)
    if not math.isfinite(final):
        raise NonFiniteLossError(
            f"non-finite loss at Adam step {state.step + 1}: L_next={float(out.item_loss.data)} "
            f"L_C={[float(c.data) for c in out.category_losses]}")
    out.final_loss.backward()
    ag.adam_step(model.parameters(), state)
    report = {"L_next": float(out.item_loss.data)}
    for t, c in enumerate(out.category_losses):
        report[f"L_C{t + 1}"] = float(c.data)
    report["L_final"] = final
    return report
