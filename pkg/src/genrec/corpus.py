"""Interaction corpus: loading, 5-core filtering and leave-one-out splits.

The corpus is the source of truth for everything downstream: item registry
order, train/valid/test targets and the histories fed to the encoders.  All
functions here are pure and deterministic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path


class CorpusFormatError(ValueError):
    """Malformed interaction or metadata file."""


class MissingMetadataError(ValueError):
    """Interactions reference items that have no metadata record."""

    def __init__(self, item_ids):
        self.item_ids = sorted(item_ids)
        super().__init__(
            f"{len(self.item_ids)} item(s) have interactions but no metadata: "
            + ", ".join(self.item_ids[:20])
            + ("..." if len(self.item_ids) > 20 else "")
        )


@dataclass(frozen=True)
class Interaction:
    user_id: str
    item_id: str
    timestamp: int


@dataclass(frozen=True)
class ItemRecord:
    item_id: str
    title: str
    description: str = ""


@dataclass
class InteractionLog:
    """Per-user chronological events plus the item metadata registry.

    `events` maps user_id -> list of Interaction sorted by (timestamp, input
    order); `items` maps item_id -> ItemRecord.
    """

    events: dict[str, list[Interaction]] = field(default_factory=dict)
    items: dict[str, ItemRecord] = field(default_factory=dict)

    @property
    def n_users(self) -> int:
        return len(self.events)

    @property
    def n_items(self) -> int:
        return len(self.items)

    @property
    def n_interactions(self) -> int:
        return sum(len(v) for v in self.events.values())

    def item_ids(self) -> list[str]:
        """Canonical item registry order: sorted item ids."""
        return sorted(self.items)

    def user_ids(self) -> list[str]:
        return sorted(self.events)

    def user_items(self, user_id: str) -> list[str]:
        return [e.item_id for e in self.events[user_id]]


@dataclass
class Splits:
    """Leave-one-out splits: per user, train prefix + held-out valid/test items."""

    train: dict[str, list[str]]
    valid: dict[str, str]
    test: dict[str, str]

    def user_ids(self) -> list[str]:
        return sorted(self.train)


def load_corpus(interactions_path, metadata_path) -> InteractionLog:
    """Load tab-separated interactions and JSONL item metadata.

    Events are sorted per user by (timestamp, input order); metadata is joined
    and must cover every interacted item.  Titles must be non-empty.
    """
    interactions_path = Path(interactions_path)
    metadata_path = Path(metadata_path)

    raw: dict[str, list[tuple[int, int, str]]] = {}
    with open(interactions_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise CorpusFormatError(
                    f"{interactions_path}: line {lineno}: expected "
                    f"user<TAB>item<TAB>timestamp, got {line!r}"
                )
            user_id, item_id, ts_str = parts
            try:
                ts = int(ts_str)
            except ValueError:
                raise CorpusFormatError(
                    f"{interactions_path}: line {lineno}: timestamp {ts_str!r} "
                    "is not an integer"
                ) from None
            raw.setdefault(user_id, []).append((ts, lineno, item_id))

    items: dict[str, ItemRecord] = {}
    with open(metadata_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                item_id = rec["item_id"]
                title = rec["title"]
            except (json.JSONDecodeError, KeyError, TypeError):
                raise CorpusFormatError(
                    f"{metadata_path}: line {lineno}: expected a JSON object "
                    "with item_id and title fields"
                ) from None
            if not str(title).strip():
                raise CorpusFormatError(
                    f"{metadata_path}: line {lineno}: empty title for item "
                    f"{item_id!r}"
                )
            items[str(item_id)] = ItemRecord(
                str(item_id), str(title), str(rec.get("description", "") or "")
            )

    interacted = {it for evs in raw.values() for _, _, it in evs}
    missing = interacted - set(items)
    if missing:
        raise MissingMetadataError(missing)

    events = {
        u: [Interaction(u, it, ts) for ts, _, it in sorted(evs)]
        for u, evs in raw.items()
    }
    # Only items that actually occur are kept in the registry.
    kept_items = {i: items[i] for i in sorted(interacted)}
    return InteractionLog(events, kept_items)


def five_core_filter(log: InteractionLog, min_count: int = 5) -> InteractionLog:
    """Iteratively drop users and items with fewer than `min_count` events.

    Runs to fixpoint: removing an item can push a user below the threshold and
    vice versa.  May return an empty log.
    """
    events = {u: list(evs) for u, evs in log.events.items()}
    while True:
        item_counts: dict[str, int] = {}
        for evs in events.values():
            for e in evs:
                item_counts[e.item_id] = item_counts.get(e.item_id, 0) + 1
        bad_items = {i for i, c in item_counts.items() if c < min_count}
        changed = False
        if bad_items:
            events = {
                u: [e for e in evs if e.item_id not in bad_items]
                for u, evs in events.items()
            }
            changed = True
        sized = {u: evs for u, evs in events.items() if len(evs) >= min_count}
        if len(sized) != len(events):
            changed = True
        events = sized
        if not changed:
            break
    kept_items = {e.item_id for evs in events.values() for e in evs}
    return InteractionLog(events, {i: log.items[i] for i in sorted(kept_items)})


def leave_one_out_split(log: InteractionLog) -> Splits:
    """Last event becomes the test target, second-to-last the validation target."""
    train: dict[str, list[str]] = {}
    valid: dict[str, str] = {}
    test: dict[str, str] = {}
    for u in sorted(log.events):
        seq = [e.item_id for e in log.events[u]]
        if len(seq) < 3:
            raise ValueError(
                f"user {u!r} has {len(seq)} events; leave-one-out needs at least 3"
            )
        train[u] = seq[:-2]
        valid[u] = seq[-2]
        test[u] = seq[-1]
    return Splits(train, valid, test)


def truncate_history(seq: list, max_len: int = 20) -> list:
    """Keep the most recent `max_len` items, order preserved."""
    if max_len < 1:
        raise ValueError(f"max_len must be >= 1, got {max_len}")
    return list(seq[-max_len:])


SPLITS_MAGIC = "#genrec-splits v1"


def save_splits(splits: Splits, path, fingerprint: str = "unversioned") -> None:
    path = Path(path)
    lines = [f"{SPLITS_MAGIC} config={fingerprint}"]
    for u in splits.user_ids():
        lines.append(
            json.dumps(
                {
                    "user_id": u,
                    "train": splits.train[u],
                    "valid": splits.valid[u],
                    "test": splits.test[u],
                },
                sort_keys=True,
            )
        )
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_splits(path) -> Splits:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if not header.startswith(SPLITS_MAGIC):
            raise CorpusFormatError(f"{path}: not a splits file (header {header!r})")
        train, valid, test = {}, {}, {}
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            train[rec["user_id"]] = rec["train"]
            valid[rec["user_id"]] = rec["valid"]
            test[rec["user_id"]] = rec["test"]
    return Splits(train, valid, test)


def save_log(log: InteractionLog, interactions_path, items_path, fingerprint="unversioned"):
    """Persist a (filtered) log as canonical interaction + metadata files."""
    ipath, mpath = Path(interactions_path), Path(items_path)
    lines = [f"#genrec-corpus v1 config={fingerprint}"]
    for u in log.user_ids():
        for e in log.events[u]:
            lines.append(f"{e.user_id}\t{e.item_id}\t{e.timestamp}")
    ipath.write_text("\n".join(lines) + "\n", encoding="utf-8")
    mlines = [f"#genrec-items v1 config={fingerprint}"]
    for i in log.item_ids():
        rec = log.items[i]
        mlines.append(
            json.dumps(
                {"item_id": rec.item_id, "title": rec.title, "description": rec.description},
                sort_keys=True,
            )
        )
    mpath.write_text("\n".join(mlines) + "\n", encoding="utf-8")


def load_saved_log(interactions_path, items_path) -> InteractionLog:
    """Load a log persisted by `save_log` (headers allowed, order preserved)."""
    ipath, mpath = Path(interactions_path), Path(items_path)
    raw: dict[str, list[tuple[int, int, str]]] = {}
    with open(ipath, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            user_id, item_id, ts = line.split("\t")
            raw.setdefault(user_id, []).append((int(ts), lineno, item_id))
    items: dict[str, ItemRecord] = {}
    with open(mpath, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            rec = json.loads(line)
            items[rec["item_id"]] = ItemRecord(
                rec["item_id"], rec["title"], rec.get("description", "")
            )
    events = {
        u: [Interaction(u, it, ts) for ts, _, it in sorted(evs)]
        for u, evs in raw.items()
    }
    return InteractionLog(events, items)


def train_only_log(log: InteractionLog, splits: Splits) -> InteractionLog:
    """Events restricted to train sequences; the item registry is preserved.

    Encoders that must not see validation/test targets as context train on
    this view; held-out items keep registry entries so they stay indexable.
    """
    events = {
        u: [Interaction(u, item, t) for t, item in enumerate(splits.train[u])]
        for u in sorted(splits.train)
    }
    return InteractionLog(events, dict(log.items))
