"""Dual-source hierarchical item indices and the decoding trie.

Each item's identifier is a fixed-length token sequence: `depth_s` semantic
codes followed by `depth_b` behavioral codes, both obtained by recursively
k-means-clustering the respective embedding matrices.  Items whose full code
sequences collide receive a disambiguation suffix, so the final identifiers
are collision-free and every root-to-leaf trie path names exactly one item.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .embed import EmbeddingMatrix

# Partitions are cheap to enumerate below this size; 2-means is solved exactly
# there so tiny nodes always get the minimal within-cluster-variance split.
_EXACT_TWO_MEANS_LIMIT = 10


@dataclass
class IndexConfig:
    k: int = 32
    depth_s: int = 4
    depth_b: int = 4
    seed: int = 0
    max_kmeans_iters: int = 50
    n_init: int = 4
    tie_break: str = "lowest_row_index"

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("branching factor k must be >= 2")
        if self.depth_s < 1 or self.depth_b < 1:
            raise ValueError("depths must be >= 1")


@dataclass
class ItemIndex:
    item_id: str
    semantic_codes: list[int]
    behavioral_codes: list[int]
    disambig: int | None
    token_seq: list[str]


def capacity(k: int, depth: int) -> int:
    """Number of addressable code paths for one source."""
    return k**depth


def token_name(source: str, level: int, code: int) -> str:
    return f"<{source}_{level}_{code}>"


def disambig_name(code: int) -> str:
    return f"<d_{code}>"


CON_TOKEN = "<CON>"


def _exact_two_means(X: np.ndarray) -> np.ndarray:
    """Minimal within-cluster-variance 2-partition by enumeration."""
    n = len(X)
    best_cost, best = np.inf, None
    for bits in range(1, 2**n - 1):
        assign = (bits >> np.arange(n)) & 1
        cost = 0.0
        for c in (0, 1):
            members = X[assign == c]
            cost += float(((members - members.mean(axis=0)) ** 2).sum())
        if cost < best_cost - 1e-12:
            best_cost, best = cost, assign
    if best[0] == 1:
        best = 1 - best
    return best.astype(np.int32)


def _kmeans_once(X: np.ndarray, k: int, rng: np.random.Generator, max_iters: int):
    """One seeded k-means++ / Lloyd run; returns (assignment, inertia)."""
    n = len(X)
    centroids = np.empty((k, X.shape[1]), dtype=np.float64)
    first = int(rng.integers(n))
    centroids[0] = X[first]
    d2 = ((X - centroids[0]) ** 2).sum(axis=1)
    for c in range(1, k):
        total = d2.sum()
        if total <= 1e-30:
            # All points coincide with chosen centroids; take lowest fresh row.
            centroids[c] = X[min(c, n - 1)]
            continue
        target = rng.random() * total
        idx = int(np.searchsorted(np.cumsum(d2), target))
        idx = min(idx, n - 1)
        centroids[c] = X[idx]
        d2 = np.minimum(d2, ((X - centroids[c]) ** 2).sum(axis=1))

    assign = None
    for _ in range(max_iters):
        dists = ((X[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_assign = dists.argmin(axis=1).astype(np.int32)  # ties -> lowest index
        # Empty-cluster repair: move centroid to the farthest member of the
        # largest cluster (ties -> lowest indices), if that member is distinct.
        for c in range(k):
            if (new_assign == c).any():
                continue
            sizes = np.bincount(new_assign, minlength=k)
            donor = int(sizes.argmax())
            members = np.flatnonzero(new_assign == donor)
            far = members[int(dists[members, donor].argmax())]
            if dists[far, donor] <= 1e-30:
                continue
            centroids[c] = X[far]
            new_assign[far] = c
        if assign is not None and (new_assign == assign).all():
            break
        assign = new_assign
        for c in range(k):
            members = X[assign == c]
            if len(members):
                centroids[c] = members.mean(axis=0)
    inertia = 0.0
    for c in range(k):
        members = X[assign == c]
        if len(members):
            inertia += float(((members - centroids[c]) ** 2).sum())
    return assign, inertia


def _cluster_node(X: np.ndarray, k: int, cfg: IndexConfig, node_seed) -> np.ndarray:
    """Deterministic clustering of one node's members into <= k groups.

    Labels are canonicalized by first occurrence in row order.
    """
    n = len(X)
    if n <= k:
        return np.arange(n, dtype=np.int32)
    if k == 2 and n <= _EXACT_TWO_MEANS_LIMIT:
        assign = _exact_two_means(X.astype(np.float64))
    else:
        best_assign, best_inertia = None, np.inf
        for restart in range(cfg.n_init):
            rng = np.random.default_rng(list(node_seed) + [restart])
            assign, inertia = _kmeans_once(
                X.astype(np.float64), k, rng, cfg.max_kmeans_iters
            )
            if inertia < best_inertia - 1e-12:
                best_assign, best_inertia = assign, inertia
        assign = best_assign
    # Canonical labels: cluster of the lowest row gets 0, next unseen gets 1, ...
    relabel: dict[int, int] = {}
    out = np.empty(n, dtype=np.int32)
    for i, a in enumerate(assign):
        if int(a) not in relabel:
            relabel[int(a)] = len(relabel)
        out[i] = relabel[int(a)]
    return out


def hierarchical_kmeans(embs: EmbeddingMatrix, depth: int, cfg: IndexConfig) -> np.ndarray:
    """Recursive k-means codes, one row of `depth` integers in [0, k) per item.

    Level 0 clusters all rows; each cluster's members are re-clustered for the
    next level.  Deterministic given cfg.seed: every node derives its RNG from
    (seed, level, path) so sibling subtrees are order-independent.
    """
    X = np.asarray(embs.vectors, dtype=np.float64)
    n = len(X)
    if n == 0:
        raise ValueError("cannot quantize an empty embedding matrix")
    if not np.isfinite(X).all():
        raise ValueError("embedding matrix contains NaN/Inf rows")
    codes = np.zeros((n, depth), dtype=np.int32)

    stack = [(np.arange(n), 0, ())]
    while stack:
        members, level, path = stack.pop()
        if level >= depth or len(members) <= 1:
            continue
        assign = _cluster_node(X[members], cfg.k, cfg, (cfg.seed, level) + path)
        codes[members, level] = assign
        for c in range(int(assign.max()) + 1):
            child = members[assign == c]
            if len(child) and level + 1 < depth:
                stack.append((child, level + 1, path + (c,)))
    return codes


def assemble_unified_index(
    sem_codes: np.ndarray, beh_codes: np.ndarray, item_ids: list[str]
) -> list[ItemIndex]:
    """Splice semantic and behavioral codes; suffix colliding items.

    The semantic block comes first.  Items with identical full code sequences
    get disambiguation codes assigned in stable item-id order, starting at 0.
    """
    sem_codes = np.asarray(sem_codes)
    beh_codes = np.asarray(beh_codes)
    if not (len(sem_codes) == len(beh_codes) == len(item_ids)):
        raise ValueError("code tables and item list must cover the same items")

    groups: dict[tuple, list[int]] = {}
    for row, item_id in enumerate(item_ids):
        key = tuple(int(c) for c in sem_codes[row]) + tuple(
            int(c) for c in beh_codes[row]
        )
        groups.setdefault(key, []).append(row)

    disambig: dict[int, int | None] = {}
    for rows in groups.values():
        if len(rows) == 1:
            disambig[rows[0]] = None
        else:
            for j, row in enumerate(sorted(rows, key=lambda r: item_ids[r])):
                disambig[row] = j

    out = []
    for row, item_id in enumerate(item_ids):
        sem = [int(c) for c in sem_codes[row]]
        beh = [int(c) for c in beh_codes[row]]
        toks = [token_name("s", l, c) for l, c in enumerate(sem)]
        toks += [token_name("b", l, c) for l, c in enumerate(beh)]
        if disambig[row] is not None:
            toks.append(disambig_name(disambig[row]))
        out.append(ItemIndex(item_id, sem, beh, disambig[row], toks))
    return out


@dataclass
class TrieNode:
    children: dict[str, "TrieNode"] = field(default_factory=dict)
    item_id: str | None = None  # set on leaves only

    @property
    def is_leaf(self) -> bool:
        return self.item_id is not None


class IndexTrie:
    """Prefix tree over unified indices; leaves map bijectively to items."""

    def __init__(self):
        self.root = TrieNode()
        self.n_leaves = 0

    def insert(self, token_seq: list[str], item_id: str) -> None:
        node = self.root
        for tok in token_seq:
            if node.is_leaf:
                raise ValueError(
                    f"duplicate/prefix-conflicting token_seq at {item_id!r}"
                )
            node = node.children.setdefault(tok, TrieNode())
        if node.is_leaf or node.children:
            raise ValueError(f"duplicate token_seq for item {item_id!r}")
        node.item_id = item_id
        self.n_leaves += 1

    def items(self) -> dict[str, list[str]]:
        """item_id -> token path, by depth-first walk."""
        out: dict[str, list[str]] = {}
        stack = [(self.root, [])]
        while stack:
            node, prefix = stack.pop()
            if node.is_leaf:
                out[node.item_id] = prefix
            for tok, child in node.children.items():
                stack.append((child, prefix + [tok]))
        return out


def build_trie(indices: list[ItemIndex]) -> IndexTrie:
    trie = IndexTrie()
    for ix in indices:
        trie.insert(ix.token_seq, ix.item_id)
    return trie


def vocab_tokens(cfg: IndexConfig, n_disambig: int = 0) -> list[str]:
    """Every new token the backbone vocabulary needs for this index layout."""
    toks = [
        token_name("s", l, c) for l in range(cfg.depth_s) for c in range(cfg.k)
    ]
    toks += [
        token_name("b", l, c) for l in range(cfg.depth_b) for c in range(cfg.k)
    ]
    toks += [disambig_name(j) for j in range(n_disambig)]
    toks.append(CON_TOKEN)
    return toks


INDEX_MAGIC = "#genrec-index v1"


def save_index(indices: list[ItemIndex], path, fingerprint: str = "unversioned") -> None:
    path = Path(path)
    lines = [f"{INDEX_MAGIC} config={fingerprint}"]
    for ix in indices:
        lines.append(
            json.dumps(
                {
                    "item_id": ix.item_id,
                    "semantic": ix.semantic_codes,
                    "behavioral": ix.behavioral_codes,
                    "disambig": ix.disambig,
                    "tokens": ix.token_seq,
                },
                sort_keys=True,
            )
        )
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_index(path) -> list[ItemIndex]:
    path = Path(path)
    out = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if not header.startswith(INDEX_MAGIC):
            raise ValueError(f"{path}: not an index file (header {header!r})")
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            out.append(
                ItemIndex(
                    rec["item_id"],
                    rec["semantic"],
                    rec["behavioral"],
                    rec["disambig"],
                    rec["tokens"],
                )
            )
    return out


def max_disambig(indices: list[ItemIndex]) -> int:
    """Number of disambiguation token values the index actually uses."""
    values = [ix.disambig for ix in indices if ix.disambig is not None]
    return (max(values) + 1) if values else 0
