"""Leave-one-out evaluation: Recall@K and NDCG@K over constrained decoding."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .backbone import DecoderBackbone, Vocab
from .corpus import Splits, truncate_history
from .decode import recommend
from .indexer import IndexTrie, ItemIndex


def recall_at_k(ranked: list[str], target: str, k: int) -> int:
    """1 iff the target appears within the first k entries."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return 1 if target in ranked[:k] else 0


def ndcg_at_k(ranked: list[str], target: str, k: int) -> float:
    """Single-relevant-item NDCG: 1/log2(1+rank) when rank <= k, else 0."""
    if k < 1:
        raise ValueError("k must be >= 1")
    for pos, item in enumerate(ranked[:k], start=1):
        if item == target:
            return 1.0 / math.log2(1.0 + pos)
    return 0.0


@dataclass
class MetricsReport:
    recall: dict[int, float]
    ndcg: dict[int, float]
    n_users: int
    fingerprint: str = "unversioned"
    flags: dict = field(default_factory=dict)

    def __post_init__(self):
        for table in (self.recall, self.ndcg):
            for k, v in table.items():
                if not 0.0 <= v <= 1.0:
                    raise ValueError(f"metric@{k}={v} outside [0, 1]")

    def row(self) -> dict:
        rec = {"n_users": self.n_users, "fingerprint": self.fingerprint}
        rec.update({f"recall@{k}": v for k, v in sorted(self.recall.items())})
        rec.update({f"ndcg@{k}": v for k, v in sorted(self.ndcg.items())})
        rec.update(self.flags)
        return rec


def evaluate(
    model: DecoderBackbone,
    splits: Splits,
    index_map: dict[str, ItemIndex],
    trie: IndexTrie,
    vocab: Vocab,
    ks: tuple[int, ...] = (5, 10),
    beam_size: int = 20,
    mode: str = "test",
    max_history: int = 20,
    use_adapter: bool = False,
    exclude_history: bool = True,
    fingerprint: str = "unversioned",
    flags: dict | None = None,
    users: list[str] | None = None,
) -> MetricsReport:
    """Decode every user's history and average per-user metrics.

    In test mode the validation item is appended to the history (documented
    switch); in valid mode the plain train sequence is used.
    """
    if mode not in ("test", "valid"):
        raise ValueError(f"mode must be test or valid, got {mode!r}")
    users = users if users is not None else splits.user_ids()
    k_max = max(ks)
    recall_sums = {k: 0.0 for k in ks}
    ndcg_sums = {k: 0.0 for k in ks}
    for u in users:
        if mode == "test":
            history = splits.train[u] + [splits.valid[u]]
            target = splits.test[u]
        else:
            history = splits.train[u]
            target = splits.valid[u]
        if target not in index_map:
            raise ValueError(f"user {u!r} has unindexed target {target!r}")
        history = truncate_history(history, max_history)
        ranked = [
            item
            for item, _ in recommend(
                model, history, index_map, trie, vocab,
                k=min(k_max, beam_size), beam_size=beam_size,
                max_history=max_history, exclude_history=exclude_history,
                use_adapter=use_adapter, epoch_key=u,
            )
        ]
        for k in ks:
            recall_sums[k] += recall_at_k(ranked, target, k)
            ndcg_sums[k] += ndcg_at_k(ranked, target, k)
    n = max(len(users), 1)
    return MetricsReport(
        {k: recall_sums[k] / n for k in ks},
        {k: ndcg_sums[k] / n for k in ks},
        len(users),
        fingerprint=fingerprint,
        flags=flags or {},
    )


REPORT_MAGIC = "#genrec-report v1"


def save_reports(reports: list[MetricsReport], path, fingerprint="unversioned") -> None:
    path = Path(path)
    lines = [f"{REPORT_MAGIC} config={fingerprint}"]
    for rep in reports:
        lines.append(json.dumps(rep.row(), sort_keys=True))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
