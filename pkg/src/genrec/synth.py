"""Synthetic corpora with planted structure.

`chain` plants a deterministic next-item pattern: users walk consecutive
stretches of a global item ring, so the true successor of every history is
known.  `clusters` plants two decoupled signals on a row/column grid: items
in a row share title vocabulary (semantic signal) while user walks advance
along columns within a row (behavioral co-occurrence); titles never reveal
column order, so each index source carries different information.
"""

from __future__ import annotations

import numpy as np

from .corpus import Interaction, InteractionLog, ItemRecord

_WORDS = (
    "amber birch cedar delta ember fjord garnet harbor iris juniper krill "
    "lumen maple nectar onyx pollen quartz raven sable tundra umber violet "
    "willow xenon yarrow zephyr basil clover dahlia elder fennel ginger"
).split()


def _word(j: int) -> str:
    return _WORDS[j % len(_WORDS)] + ("" if j < len(_WORDS) else str(j // len(_WORDS)))


def chain_corpus(
    n_items: int = 200,
    n_users: int = 160,
    seq_len: int = 8,
    group_size: int = 10,
    seed: int = 0,
) -> InteractionLog:
    """Users walk `seq_len` consecutive items of a ring; starts evenly spread.

    Item t's true successor is t+1 (mod n).  Titles share a group word per
    `group_size` stretch so semantically close items sit near each other on
    the ring.
    """
    if n_items < seq_len:
        raise ValueError("need at least seq_len items")
    ids = [f"i{j:04d}" for j in range(n_items)]
    items = {}
    for j, item_id in enumerate(ids):
        group = j // group_size
        items[item_id] = ItemRecord(
            item_id, f"{_word(group)} {_word(n_items + j)} gadget", ""
        )
    events: dict[str, list[Interaction]] = {}
    for u in range(n_users):
        start = (u * n_items) // n_users
        user_id = f"u{u:04d}"
        seq = [ids[(start + t) % n_items] for t in range(seq_len)]
        events[user_id] = [Interaction(user_id, it, t) for t, it in enumerate(seq)]
    return InteractionLog(events, items)


def chain_successor(item_id: str, n_items: int) -> str:
    j = int(item_id[1:])
    return f"i{(j + 1) % n_items:04d}"


def cluster_corpus(
    n_rows: int = 8,
    n_cols: int = 12,
    n_users: int = 120,
    seq_len: int = 8,
    seed: int = 0,
) -> InteractionLog:
    """Row/column grid: rows share title words, walks advance along columns.

    Walk starts are evenly spaced within each row so every item lands in
    roughly users_per_row * seq_len / n_cols sequences (5-core safe when
    that is >= 5); the seed only permutes which rows users belong to.
    """
    rng = np.random.default_rng(seed)
    n_items = n_rows * n_cols
    ids = [f"i{j:04d}" for j in range(n_items)]
    items = {}
    for j, item_id in enumerate(ids):
        row = j // n_cols
        # Two shared row words plus an item-unique word; column invisible.
        items[item_id] = ItemRecord(
            item_id,
            f"{_word(row)} {_word(n_rows + row)} {_word(2 * n_rows + j)}",
            "",
        )
    row_of_user = rng.permutation(np.arange(n_users) % n_rows)
    seen_in_row: dict[int, int] = {}
    events: dict[str, list[Interaction]] = {}
    users_per_row = n_users // n_rows
    for u in range(n_users):
        row = int(row_of_user[u])
        j_in_row = seen_in_row.get(row, 0)
        seen_in_row[row] = j_in_row + 1
        start_col = (j_in_row * n_cols) // max(users_per_row, 1)
        user_id = f"u{u:04d}"
        seq = [
            ids[row * n_cols + (start_col + t) % n_cols] for t in range(seq_len)
        ]
        events[user_id] = [Interaction(user_id, it, t) for t, it in enumerate(seq)]
    return InteractionLog(events, items)


def cluster_successor(item_id: str, n_rows: int, n_cols: int) -> str:
    j = int(item_id[1:])
    row, col = j // n_cols, j % n_cols
    return f"i{row * n_cols + (col + 1) % n_cols:04d}"


def write_corpus_files(log: InteractionLog, interactions_path, items_path) -> None:
    """Raw input files in the documented ingest formats."""
    import json
    from pathlib import Path

    lines = []
    for u in log.user_ids():
        for e in log.events[u]:
            lines.append(f"{e.user_id}\t{e.item_id}\t{e.timestamp}")
    Path(interactions_path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    mlines = []
    for i in log.item_ids():
        rec = log.items[i]
        mlines.append(
            json.dumps(
                {"item_id": rec.item_id, "title": rec.title,
                 "description": rec.description},
                sort_keys=True,
            )
        )
    Path(items_path).write_text("\n".join(mlines) + "\n", encoding="utf-8")


def make_corpus(pattern: str, **kw) -> InteractionLog:
    if pattern == "chain":
        allowed = {"n_items", "n_users", "seq_len", "group_size", "seed"}
        return chain_corpus(**{k: v for k, v in kw.items() if k in allowed})
    if pattern == "clusters":
        allowed = {"n_rows", "n_cols", "n_users", "seq_len", "seed"}
        return cluster_corpus(**{k: v for k, v in kw.items() if k in allowed})
    raise ValueError(f"unknown synthetic pattern {pattern!r}")
