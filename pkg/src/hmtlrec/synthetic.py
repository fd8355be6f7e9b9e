"""Category-structured synthetic sessions.

Each category has a preferred successor category. The next item's category
follows the successor of the current category most of the time. Otherwise it
returns to the session's first category or jumps at random. Within a
category, items are drawn from a Zipf popularity profile.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import ItemRecord


@dataclass(frozen=True)
class SyntheticSpec:
    n_sessions: int = 5000
    n_items: int = 500
    n_categories: int = 20
    n_groups: int = 0               # > 0 adds a coarser second taxonomy level
    mean_length: float = 5.0
    follow_prob: float = 0.7        # next category = successor of the current one
    return_prob: float = 0.2        # next category = session's first category
    zipf: float = 1.0
    history: int = 1                # 2: the successor depends on the last two categories
    seed: int = 0


def generate(spec: SyntheticSpec = SyntheticSpec()) -> tuple[list[ItemRecord], list[tuple[str, str, float]]]:
    """Return (item records, events) for ``spec``; events are (session, item, timestamp)."""
    rng = np.random.default_rng(spec.seed)
    n_cat = spec.n_categories
    item_cat = np.arange(spec.n_items) % n_cat
    rng.shuffle(item_cat)
    members = [np.flatnonzero(item_cat == c) for c in range(n_cat)]
    popularity = []
    for m in members:
        w = 1.0 / np.arange(1, len(m) + 1) ** spec.zipf
        popularity.append(w / w.sum())
    successor = rng.permutation(n_cat)
    pair_successor = rng.integers(n_cat, size=(n_cat, n_cat))
    group_of = rng.integers(spec.n_groups, size=n_cat) if spec.n_groups else None

    records = []
    for i in range(spec.n_items):
        c = int(item_cat[i])
        cats = (f"cat{c:03d}",) if group_of is None else (f"cat{c:03d}", f"group{int(group_of[c]):02d}")
        records.append(ItemRecord(f"item{i:05d}", cats, f"kind{c} model{i} {'popular' if i % 7 == 0 else ''}".strip()))

    def draw_item(c: int) -> int:
        return int(members[c][rng.choice(len(members[c]), p=popularity[c])])

    events = []
    t = 0.0
    for s in range(spec.n_sessions):
        length = 2 + rng.poisson(spec.mean_length - 2)
        first = int(rng.integers(n_cat))
        cat = first
        prev = first
        for _ in range(length):
            events.append((f"s{s:06d}", records[draw_item(cat)].item_id, t))
            t += 1.0
            u = rng.random()
            if u < spec.follow_prob:
                nxt = int(pair_successor[prev, cat]) if spec.history == 2 else int(successor[cat])
                prev, cat = cat, nxt
                continue
            prev = cat
            if u < spec.follow_prob + spec.return_prob:
                cat = first
            else:
                cat = int(rng.integers(n_cat))
        t += 100.0
    return records, events


def toy_dataset(seed: int = 0) -> tuple[list[ItemRecord], list[tuple[str, str, float]]]:
    """8 sessions of 5 distinct items each (32 supervised prefixes) over 40 items in 4 categories."""
    rng = np.random.default_rng(seed)
    records = [ItemRecord(f"toy{i:02d}", (f"c{i % 4}",), f"toy item {i}") for i in range(40)]
    events = []
    t = 0.0
    for s in range(8):
        for item in rng.choice(40, size=5, replace=False):
            events.append((f"toy-s{s}", records[int(item)].item_id, t))
            t += 1.0
    return records, events


SAMPLE_CONFIG = """\
data.events = events.tsv
data.items = items.tsv
data.levels = 2
model.d_item = 16
model.d_category = 16
model.d_metadata = 16
model.heads = 4
optim.lr = 0.001
optim.batch_size = 64
train.epochs = 5
train.patience = 2
eval.policy = category-topk
eval.k = 2
output.dir = runs/sample
"""


def write_sample(directory, n_sessions: int = 200, seed: int = 0) -> dict:
    """Write a small two-level dataset (events.tsv, items.tsv) and a matching sample.cfg."""
    from pathlib import Path

    from .data import write_events_file, write_items_file

    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    records, events = generate(SyntheticSpec(n_sessions=n_sessions, n_items=120, n_categories=12,
                                             n_groups=4, seed=seed))
    write_items_file(out / "items.tsv", records, level_count=2)
    write_events_file(out / "events.tsv", events)
    (out / "sample.cfg").write_text(SAMPLE_CONFIG)
    return {"items": out / "items.tsv", "events": out / "events.tsv", "config": out / "sample.cfg"}
