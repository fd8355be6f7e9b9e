"""Convert the public Diginetica (CIKM Cup 2016) files into events/items files.

Usage::

    python -m hmtlrec.diginetica RAW_DIR OUT_DIR

RAW_DIR must hold ``train-item-views.csv`` and ``product-categories.csv``;
``products.csv`` is optional and supplies hashed title tokens. The filtering
follows the convention common in session-based recommendation work: drop
length-1 sessions, drop items seen fewer than 5 times, drop sessions left with
fewer than 2 items, and hold out the sessions of the last 7 days as test data.
"""

from __future__ import annotations

import argparse
import csv
import sys
from collections import Counter
from datetime import datetime, timezone
from pathlib import Path

from .data import ItemRecord, write_events_file, write_items_file

DAY = 86400.0

CONFIG_TEMPLATE = """\
data.events = train_events.tsv
data.test_events = test_events.tsv
data.items = items.tsv
data.levels = 1
optim.lr = 0.0001
optim.batch_size = 1024
output.dir = runs/diginetica
"""


def _day(text: str) -> float:
    return datetime.strptime(text.strip(), "%Y-%m-%d").replace(tzinfo=timezone.utc).timestamp()


def read_views(path) -> dict[str, list[tuple[float, str]]]:
    """session -> [(timestamp, item)]; timestamp = event date + in-session time frame."""
    sessions: dict[str, list[tuple[float, str]]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh, delimiter=";"):
            ts = _day(row["eventdate"]) + float(row["timeframe"]) / 1000.0
            sessions.setdefault(row["sessionId"], []).append((ts, row["itemId"]))
    for evs in sessions.values():
        evs.sort(key=lambda e: e[0])
    return sessions


def filter_sessions(sessions: dict[str, list[tuple[float, str]]], min_item_count: int = 5):
    sessions = {s: e for s, e in sessions.items() if len(e) > 1}
    counts = Counter(item for evs in sessions.values() for _, item in evs)
    kept = {}
    for sid, evs in sessions.items():
        evs = [e for e in evs if counts[e[1]] >= min_item_count]
        if len(evs) >= 2:
            kept[sid] = evs
    return kept


def split_last_days(sessions: dict[str, list[tuple[float, str]]], days: int = 7):
    end = {sid: evs[-1][0] for sid, evs in sessions.items()}
    cutoff = max(end.values()) - days * DAY
    train = {s: e for s, e in sessions.items() if end[s] < cutoff}
    test = {s: e for s, e in sessions.items() if end[s] >= cutoff}
    seen = {item for evs in train.values() for _, item in evs}
    # test items must be known to the model
    test = {s: [x for x in e if x[1] in seen] for s, e in test.items()}
    return train, {s: e for s, e in test.items() if len(e) >= 2}


def read_items(raw: Path, items: set[str]) -> list[ItemRecord]:
    cats: dict[str, str] = {}
    with open(raw / "product-categories.csv", newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh, delimiter=";"):
            cats[row["itemId"]] = row["categoryId"]
    titles: dict[str, str] = {}
    products = raw / "products.csv"
    if products.exists():
        with open(products, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh, delimiter=";"):
                # names are already anonymized token ids separated by commas
                titles[row["itemId"]] = row.get("product.name.tokens", "").replace(",", " ")
    return [ItemRecord(i, (cats[i],) if i in cats else (), titles.get(i, "")) for i in sorted(items, key=int)]


def convert(raw_dir, out_dir) -> dict:
    raw, out = Path(raw_dir), Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sessions = filter_sessions(read_views(raw / "train-item-views.csv"))
    train, test = split_last_days(sessions)
    items = {item for evs in train.values() for _, item in evs}
    write_items_file(out / "items.tsv", read_items(raw, items), level_count=1)
    for name, part in (("train_events.tsv", train), ("test_events.tsv", test)):
        write_events_file(out / name, ((s, item, ts) for s, evs in part.items() for ts, item in evs))
    (out / "diginetica.cfg").write_text(CONFIG_TEMPLATE)
    return {"train_sessions": len(train), "test_sessions": len(test), "items": len(items)}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="python -m hmtlrec.diginetica", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("raw_dir")
    parser.add_argument("out_dir")
    args = parser.parse_args(argv)
    summary = convert(args.raw_dir, args.out_dir)
    print(", ".join(f"{k}={v}" for k, v in summary.items()))
    return 0


if __name__ == "__main__":
    sys.exit(main())
