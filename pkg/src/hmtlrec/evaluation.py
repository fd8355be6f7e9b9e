"""Top-k ranking metrics, candidate policies and the evaluation driver."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import autograd as ag
from .data import CategoryTaxonomy, Session

logger = logging.getLogger(__name__)

TOP_K = 20


@dataclass(frozen=True)
class CandidatePolicy:
    kind: str = "full"              # "full" | "category" | "random"
    k: int = 1                      # categories per level for "category"
    size: int = 0                   # sample size for "random"
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("full", "category", "random"):
            raise ValueError(f"unknown candidate policy {self.kind!r}")
        if self.kind == "category" and self.k < 1:
            raise ValueError("category policy needs k >= 1")
        if self.kind == "random" and self.size < 1:
            raise ValueError("random policy needs size >= 1")

    def describe(self) -> str:
        if self.kind == "category":
            return f"category-top{self.k}"
        if self.kind == "random":
            return f"random-{self.size}-seed{self.seed}"
        return "full"


@dataclass(frozen=True)
class CandidateSet:
    items: np.ndarray                       # sorted unique item indices
    per_level: tuple[int, ...] = ()         # items contributed by each level's selected categories

    def __len__(self) -> int:
        return len(self.items)

    def __contains__(self, item: int) -> bool:
        i = np.searchsorted(self.items, item)
        return bool(i < len(self.items) and self.items[i] == item)


@dataclass(frozen=True)
class EvalExample:
    prefix: tuple[int, ...]
    target: int
    future: tuple[int, ...]         # target first, then the rest of the session

    def __post_init__(self):
        if not self.future or self.future[0] != self.target:
            raise ValueError("future items must start with the target item")


def top_categories(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k highest scores, ties broken by lower index."""
    order = np.lexsort((np.arange(len(scores)), -scores))
    return order[:k]


def generate_category_candidates(category_scores: Sequence[np.ndarray], k: int,
                                 taxonomy: CategoryTaxonomy) -> CandidateSet:
    """Union over levels of the items in each level's top-k categories (UNKNOWN never chosen)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    chunks = []
    per_level = []
    for t, scores in enumerate(category_scores):
        n_cat = taxonomy.sizes[t]
        kk = k
        if k > n_cat:
            logger.warning("k=%d exceeds %d categories at level %d; clamping", k, n_cat, t + 1)
            kk = n_cat
        chosen = top_categories(np.asarray(scores)[:n_cat], kk)
        level_items = [taxonomy.items_in(t, int(c)) for c in chosen]
        count = int(sum(len(x) for x in level_items))
        per_level.append(count)
        chunks.extend(level_items)
    items = np.unique(np.concatenate(chunks)) if chunks else np.zeros(0, dtype=np.int64)
    return CandidateSet(items.astype(np.int64), tuple(per_level))


def generate_random_candidates(n_items: int, size: int, rng: np.random.Generator) -> CandidateSet:
    """Uniform sample without replacement; the ground truth is not forced in."""
    if not 1 <= size <= n_items:
        raise ValueError(f"random candidate size must be in [1, {n_items}]")
    return CandidateSet(np.sort(rng.choice(n_items, size=size, replace=False)).astype(np.int64))


def full_candidates(n_items: int) -> CandidateSet:
    return CandidateSet(np.arange(n_items, dtype=np.int64))


@dataclass(frozen=True)
class Contribution:
    mrr: float
    hit: float
    recall: float
    contained: bool


def rank_and_score(item_scores: np.ndarray, candidates: CandidateSet, example: EvalExample,
                   k: int = TOP_K) -> Contribution:
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(candidates) == 0:
        raise ValueError("empty candidate set")
    cand = candidates.items
    s = np.asarray(item_scores)[cand]
    gt = example.target
    contained = gt in candidates
    mrr = hit = 0.0
    if contained:
        gt_score = item_scores[gt]
        rank = 1 + int(np.count_nonzero(s > gt_score)) + int(np.count_nonzero((s == gt_score) & (cand < gt)))
        if rank <= k:
            mrr, hit = 1.0 / rank, 1.0
    if len(cand) > k:
        part = np.argpartition(-s, k - 1)[:k]
        # argpartition ignores index order on ties at the boundary; fix by taking the full tie group
        threshold = s[part].min()
        pool = np.flatnonzero(s >= threshold)
        pool = pool[np.lexsort((cand[pool], -s[pool]))][:k]
        top = cand[pool]
    else:
        top = cand
    future = set(example.future)
    recall = len(future.intersection(top.tolist())) / len(future)
    return Contribution(mrr, hit, recall, contained)


@dataclass
class MetricsReport:
    mrr_at_20: float
    hits_at_20: float
    recall_at_20: float
    n_examples: int
    candidate_fraction: float
    gt_containment: float
    meta: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=False)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls(**json.loads(text))


def eval_examples(sessions: Iterable[Session], final_only: bool = False,
                  max_len: int | None = None) -> list[EvalExample]:
    """Every prefix of every session (or only the last transition with ``final_only``)."""
    out = []
    for s in sessions:
        items = s.items
        starts = [len(items) - 1] if final_only else range(1, len(items))
        for j in starts:
            lo = 0 if max_len is None else max(0, j - max_len)
            out.append(EvalExample(tuple(items[lo:j]), items[j], tuple(items[j:])))
    return out


def _aggregate(contribs: list[Contribution], fractions: list[float], meta: dict) -> MetricsReport:
    n = len(contribs)
    return MetricsReport(
        mrr_at_20=float(sum(c.mrr for c in contribs) / n),
        hits_at_20=float(sum(c.hit for c in contribs) / n),
        recall_at_20=float(sum(c.recall for c in contribs) / n),
        n_examples=n,
        candidate_fraction=float(sum(fractions) / n),
        gt_containment=float(sum(c.contained for c in contribs) / n),
        meta=meta,
    )


def score_examples(model, examples: Sequence[EvalExample], mode="hierarchical", weights=None,
                   batch_size: int = 512):
    """Yield (item_scores, category_scores) per example from batched forward passes."""
    from .model import LossWeights

    weights = weights or LossWeights()
    pad = model.catalog.pad
    max_len = model.config.max_len
    for start in range(0, len(examples), batch_size):
        # keep the most recent max_len items, as in training
        chunk = [e.prefix[-max_len:] for e in examples[start:start + batch_size]]
        width = max(len(p) for p in chunk)
        items = np.full((len(chunk), width), pad, dtype=np.int64)
        for r, prefix in enumerate(chunk):
            items[r, :len(prefix)] = prefix
        with ag.no_grad():
            out = model.forward(items, items != pad, mode, weights, with_categories=True)
        cats = [p.data for p in out.category_scores]
        for r in range(len(chunk)):
            yield out.item_scores.data[r], [c[r] for c in cats]


def evaluate(model, examples: Sequence[EvalExample], policy: CandidatePolicy = CandidatePolicy(),
             mode="hierarchical", weights=None, k: int = TOP_K, batch_size: int = 512,
             eval_unit: str = "every-prefix") -> MetricsReport:
    if not examples:
        raise ValueError("evaluation set is empty")
    n_items = model.catalog.item_count
    rng = np.random.default_rng(policy.seed)
    full = full_candidates(n_items)
    contribs, fractions = [], []
    for ex, (scores, cat_scores) in zip(examples, score_examples(model, examples, mode, weights, batch_size)):
        if policy.kind == "full":
            cand = full
        elif policy.kind == "category":
            cand = generate_category_candidates(cat_scores, policy.k, model.taxonomy)
        else:
            cand = generate_random_candidates(n_items, policy.size, rng)
        fractions.append(len(cand) / n_items)
        if len(cand) == 0:
            # nothing to rank: every metric contributes zero
            contribs.append(Contribution(0.0, 0.0, 0.0, False))
            continue
        contribs.append(rank_and_score(scores, cand, ex, k))
    meta = {"policy": policy.describe(), "eval_unit": eval_unit, "mode": str(getattr(mode, "value", mode)),
            "k": k}
    return _aggregate(contribs, fractions, meta)


def naive_rank_and_score(item_scores: Sequence[float], candidates: Iterable[int], target: int,
                         future: Sequence[int], k: int = TOP_K) -> tuple[float, float, float]:
    """Reference implementation: full sort of (score desc, index asc) pairs."""
    ranked = sorted(((float(item_scores[i]), i) for i in set(candidates)), key=lambda p: (-p[0], p[1]))
    ids = [i for _, i in ranked]
    mrr = hit = 0.0
    if target in ids:
        rank = ids.index(target) + 1
        if rank <= k:
            mrr, hit = 1.0 / rank, 1.0
    top = set(ids[:k])
    fut = set(future)
    return mrr, hit, len(top & fut) / len(fut)
