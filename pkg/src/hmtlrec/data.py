"""Sessions, item catalog, category taxonomy and training-example batching."""

from __future__ import annotations

import csv
import hashlib
import logging
import zlib
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

logger = logging.getLogger(__name__)

UNKNOWN_LABEL = ""
METADATA_VOCAB = 2 ** 16
DEFAULT_MAX_LEN = 20


class DataError(ValueError):
    """Raised for unusable input data."""


class EmptyDatasetError(DataError):
    pass


class MalformedRowError(DataError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


# ---------------------------------------------------------------- items


def hash_tokens(text: str, vocab_size: int = METADATA_VOCAB) -> list[int]:
    """Lowercase, split on whitespace and hash each token into ``vocab_size`` buckets."""
    return [zlib.crc32(tok.encode("utf-8")) % vocab_size for tok in text.lower().split()]


@dataclass(frozen=True)
class ItemRecord:
    item_id: str
    categories: tuple[str, ...] = ()
    title: str = ""


@dataclass(frozen=True)
class CategoryTaxonomy:
    """Per-level category labels and the inverted category -> items index.

    Category ``c`` at level ``t`` is a dense index in ``0..sizes[t]-1``;
    ``sizes[t]`` itself is the UNKNOWN class of that level.
    """

    labels: tuple[tuple[str, ...], ...]
    members: tuple[tuple[np.ndarray, ...], ...]

    @property
    def level_count(self) -> int:
        return len(self.labels)

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(len(level) for level in self.labels)

    def unknown(self, level: int) -> int:
        return len(self.labels[level])

    def items_in(self, level: int, category: int) -> np.ndarray:
        return self.members[level][category]


@dataclass(frozen=True)
class ItemCatalog:
    item_ids: tuple[str, ...]
    index: dict[str, int]
    categories: np.ndarray          # (n_items, T) dense category index, UNKNOWN = |C_t|
    token_ptr: np.ndarray           # CSR offsets into token_ids, length n_items + 1
    token_ids: np.ndarray
    metadata_vocab: int = METADATA_VOCAB

    @property
    def item_count(self) -> int:
        return len(self.item_ids)

    @property
    def pad(self) -> int:
        return len(self.item_ids)

    def lookup(self, external_id: str) -> int:
        return self.index[external_id]

    def external(self, item: int) -> str:
        return self.item_ids[item]

    def tokens(self, item: int) -> np.ndarray:
        return self.token_ids[self.token_ptr[item]:self.token_ptr[item + 1]]


def build_catalog(
    records: Iterable[ItemRecord], level_count: int, metadata_vocab: int = METADATA_VOCAB
) -> tuple[ItemCatalog, CategoryTaxonomy]:
    if level_count < 1:
        raise ValueError("level_count must be >= 1")
    ids: list[str] = []
    index: dict[str, int] = {}
    raw_cats: list[tuple[str, ...]] = []
    tokens: list[list[int]] = []
    for rec in records:
        if rec.item_id in index:
            raise DataError(f"duplicate item id {rec.item_id!r}")
        if len(rec.categories) > level_count:
            raise DataError(f"item {rec.item_id!r} has {len(rec.categories)} category levels, expected <= {level_count}")
        index[rec.item_id] = len(ids)
        ids.append(rec.item_id)
        cats = tuple(rec.categories) + (UNKNOWN_LABEL,) * (level_count - len(rec.categories))
        raw_cats.append(cats)
        tokens.append(hash_tokens(rec.title, metadata_vocab))
    if not ids:
        raise EmptyDatasetError("no items in catalog")

    n = len(ids)
    labels: list[tuple[str, ...]] = []
    dense = np.empty((n, level_count), dtype=np.int64)
    for t in range(level_count):
        level_index: dict[str, int] = {}
        for i, cats in enumerate(raw_cats):
            label = cats[t]
            if label == UNKNOWN_LABEL:
                dense[i, t] = -1
                continue
            dense[i, t] = level_index.setdefault(label, len(level_index))
        unknown = len(level_index)
        dense[dense[:, t] == -1, t] = unknown
        labels.append(tuple(level_index))
    members = tuple(
        tuple(np.flatnonzero(dense[:, t] == c) for c in range(len(labels[t])))
        for t in range(level_count)
    )
    ptr = np.zeros(n + 1, dtype=np.int64)
    ptr[1:] = np.cumsum([len(tk) for tk in tokens])
    flat = np.fromiter((tok for tk in tokens for tok in tk), dtype=np.int64, count=int(ptr[-1]))
    catalog = ItemCatalog(tuple(ids), index, dense, ptr, flat, metadata_vocab)
    return catalog, CategoryTaxonomy(tuple(labels), members)


def catalog_fingerprint(catalog: ItemCatalog) -> str:
    h = hashlib.sha256()
    h.update("\x1f".join(catalog.item_ids).encode("utf-8"))
    h.update(catalog.categories.astype("<i8").tobytes())
    h.update(catalog.token_ptr.astype("<i8").tobytes())
    h.update(catalog.token_ids.astype("<i8").tobytes())
    h.update(str(catalog.metadata_vocab).encode())
    return h.hexdigest()


def taxonomy_fingerprint(taxonomy: CategoryTaxonomy) -> str:
    h = hashlib.sha256()
    for level in taxonomy.labels:
        h.update(b"\x1e" + "\x1f".join(level).encode("utf-8"))
    return h.hexdigest()


# ---------------------------------------------------------------- file readers


@dataclass
class ColumnMap:
    """Column names in the events/items files (header row required)."""

    session: str = "session_id"
    item: str = "item_id"
    time: str = "timestamp"
    item_id: str = "item_id"
    categories: tuple[str, ...] = ()
    title: str = "title"
    delimiter: str = "\t"


def _open_rows(path: Path, delimiter: str) -> tuple[list[str], Iterator[tuple[int, list[str]]]]:
    fh = open(path, newline="", encoding="utf-8")
    reader = csv.reader(fh, delimiter=delimiter)
    try:
        header = next(reader)
    except StopIteration:
        fh.close()
        raise EmptyDatasetError(f"{path}: empty file (header row required)") from None

    def rows():
        with fh:
            for row in reader:
                if not row or (len(row) == 1 and not row[0].strip()):
                    continue
                yield reader.line_num, row

    return [h.strip() for h in header], rows()


def _column(header: list[str], name: str, path: Path) -> int:
    try:
        return header.index(name)
    except ValueError:
        raise DataError(f"{path}: missing column {name!r} (have {header})") from None


def read_items_file(path, level_count: int, columns: ColumnMap | None = None) -> list[ItemRecord]:
    columns = columns or ColumnMap()
    path = Path(path)
    header, rows = _open_rows(path, columns.delimiter)
    id_col = _column(header, columns.item_id, path)
    cat_names = columns.categories or tuple(f"cat_{t + 1}" for t in range(level_count))
    if len(cat_names) != level_count:
        raise DataError(f"{len(cat_names)} category columns configured for {level_count} levels")
    cat_cols = [_column(header, c, path) for c in cat_names]
    title_col = header.index(columns.title) if columns.title in header else None
    records = []
    for line, row in rows:
        if len(row) != len(header):
            raise MalformedRowError(line, f"expected {len(header)} fields, got {len(row)}")
        item = row[id_col].strip()
        if not item:
            raise MalformedRowError(line, "empty item id")
        cats = tuple(row[c].strip() for c in cat_cols)
        title = row[title_col] if title_col is not None else ""
        records.append(ItemRecord(item, cats, title))
    return records


def _parse_time(text: str) -> float | None:
    """Numeric timestamp, or an ISO date / datetime (as in Diginetica's ``eventdate``)."""
    try:
        return float(text)
    except ValueError:
        pass
    try:
        stamp = datetime.fromisoformat(text.strip())
    except ValueError:
        return None
    if stamp.tzinfo is None:
        stamp = stamp.replace(tzinfo=timezone.utc)
    return stamp.timestamp()


def read_events_file(path, columns: ColumnMap | None = None) -> list[tuple[str, str, float]]:
    columns = columns or ColumnMap()
    path = Path(path)
    header, rows = _open_rows(path, columns.delimiter)
    s_col = _column(header, columns.session, path)
    i_col = _column(header, columns.item, path)
    t_col = _column(header, columns.time, path)
    events = []
    for line, row in rows:
        if len(row) < len(header):
            raise MalformedRowError(line, f"expected {len(header)} fields, got {len(row)}")
        ts = _parse_time(row[t_col])
        if ts is None:
            raise MalformedRowError(line, f"bad timestamp {row[t_col]!r}")
        events.append((row[s_col].strip(), row[i_col].strip(), ts))
    return events


def write_events_file(path, events: Iterable[tuple[str, str, float]], delimiter: str = "\t") -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow(["session_id", "item_id", "timestamp"])
        for s, i, ts in events:
            w.writerow([s, i, repr(ts) if isinstance(ts, float) and not float(ts).is_integer() else int(ts)])


def write_items_file(path, records: Iterable[ItemRecord], level_count: int, delimiter: str = "\t") -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow(["item_id", *[f"cat_{t + 1}" for t in range(level_count)], "title"])
        for r in records:
            cats = list(r.categories) + [UNKNOWN_LABEL] * (level_count - len(r.categories))
            w.writerow([r.item_id, *cats, r.title])


# ---------------------------------------------------------------- sessions


@dataclass(frozen=True)
class Session:
    session_id: str
    items: tuple[int, ...]
    timestamps: tuple[float, ...] | None = None

    def __len__(self) -> int:
        return len(self.items)


@dataclass
class IngestStats:
    events: int = 0
    unresolved_events: int = 0
    short_sessions: int = 0
    sessions: int = 0

    def as_dict(self) -> dict[str, int]:
        return dict(self.__dict__)


def ingest_events(
    events: Iterable[tuple[str, str, float]],
    catalog: ItemCatalog,
    stats: IngestStats | None = None,
) -> list[Session]:
    """Group events into sessions ordered by timestamp (stable on ties).

    Events whose item is not in the catalog are dropped, as are sessions left
    with fewer than two items. Counts land in ``stats``.
    """
    stats = stats if stats is not None else IngestStats()
    grouped: dict[str, list[tuple[float, int, int]]] = {}
    for seq, (sid, ext, ts) in enumerate(events):
        stats.events += 1
        item = catalog.index.get(ext)
        if item is None:
            stats.unresolved_events += 1
            continue
        grouped.setdefault(sid, []).append((ts, seq, item))
    if stats.events == 0:
        raise EmptyDatasetError("event stream is empty")
    sessions = []
    for sid, evs in grouped.items():
        if len(evs) < 2:
            stats.short_sessions += 1
            continue
        evs.sort(key=lambda e: (e[0], e[1]))
        sessions.append(Session(sid, tuple(e[2] for e in evs), tuple(e[0] for e in evs)))
    stats.sessions = len(sessions)
    if stats.unresolved_events or stats.short_sessions:
        logger.info("ingest: dropped %d unresolved events, %d short sessions",
                    stats.unresolved_events, stats.short_sessions)
    return sessions


def chronological_split(sessions: Sequence[Session], test_fraction: float) -> tuple[list[Session], list[Session]]:
    """Hold out the sessions that end last in time as the test set."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must be in (0, 1)")
    order = sorted(range(len(sessions)),
                   key=lambda i: ((sessions[i].timestamps or (0.0,))[-1], i))
    n_test = max(1, int(round(len(sessions) * test_fraction)))
    cut = len(sessions) - n_test
    train = [sessions[i] for i in sorted(order[:cut])]
    test = [sessions[i] for i in sorted(order[cut:])]
    return train, test


# ---------------------------------------------------------------- examples


@dataclass(frozen=True)
class TrainingExample:
    prefix: tuple[int, ...]
    target_item: int
    target_categories: tuple[int, ...]
    session_index: int = -1


def prefix_augment(
    session: Session, catalog: ItemCatalog, max_len: int = DEFAULT_MAX_LEN, session_index: int = -1
) -> list[TrainingExample]:
    items = session.items
    out = []
    for j in range(1, len(items)):
        prefix = items[max(0, j - max_len):j]
        target = items[j]
        out.append(TrainingExample(prefix, target, tuple(int(c) for c in catalog.categories[target]),
                                   session_index))
    return out


def augment_all(sessions: Sequence[Session], catalog: ItemCatalog,
                max_len: int = DEFAULT_MAX_LEN) -> list[TrainingExample]:
    examples: list[TrainingExample] = []
    for s_idx, s in enumerate(sessions):
        examples.extend(prefix_augment(s, catalog, max_len, s_idx))
    return examples


def split_train_valid(
    sessions: Sequence[Session], fraction: float, seed: int
) -> tuple[list[Session], list[Session]]:
    """Session-level random split: ``round(fraction * n)`` sessions (at least one) go to validation."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must be in (0, 1)")
    n = len(sessions)
    if n < 2:
        raise DataError("need at least 2 sessions to split")
    n_valid = min(n - 1, max(1, int(round(n * fraction))))
    perm = np.random.default_rng(seed).permutation(n)
    valid_idx = set(perm[:n_valid].tolist())
    train = [s for i, s in enumerate(sessions) if i not in valid_idx]
    valid = [s for i, s in enumerate(sessions) if i in valid_idx]
    return train, valid


# ---------------------------------------------------------------- batching


@dataclass(frozen=True)
class Batch:
    items: np.ndarray               # (B, L) item indices, PAD where mask is False
    mask: np.ndarray                # (B, L) bool
    target_items: np.ndarray        # (B,)
    target_categories: np.ndarray   # (B, T)

    def __len__(self) -> int:
        return self.items.shape[0]


def collate(examples: Sequence[TrainingExample], pad: int, level_count: int) -> Batch:
    width = max(len(e.prefix) for e in examples)
    items = np.full((len(examples), width), pad, dtype=np.int64)
    mask = np.zeros((len(examples), width), dtype=bool)
    for r, e in enumerate(examples):
        items[r, :len(e.prefix)] = e.prefix
        mask[r, :len(e.prefix)] = True
    targets = np.array([e.target_item for e in examples], dtype=np.int64)
    cats = np.array([e.target_categories for e in examples], dtype=np.int64).reshape(len(examples), level_count)
    return Batch(items, mask, targets, cats)


def make_batches(
    examples: Sequence[TrainingExample],
    batch_size: int,
    seed: int | None,
    pad: int,
    level_count: int,
) -> Iterator[Batch]:
    """One pass over ``examples`` in an order fixed by ``seed`` (``None`` keeps input order)."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.arange(len(examples))
    if seed is not None:
        order = np.random.default_rng(seed).permutation(len(examples))
    for start in range(0, len(order), batch_size):
        chunk = [examples[i] for i in order[start:start + batch_size]]
        yield collate(chunk, pad, level_count)


def dataset_summary(sessions: Sequence[Session], catalog: ItemCatalog, taxonomy: CategoryTaxonomy) -> dict:
    interactions = sum(len(s) for s in sessions)
    return {
        "sessions": len(sessions),
        "items": catalog.item_count,
        "interactions": interactions,
        "mean_session_length": interactions / max(1, len(sessions)),
        "category_counts": list(taxonomy.sizes),
        "examples": interactions - len(sessions),
    }
