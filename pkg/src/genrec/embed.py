"""Per-item embeddings from two decoupled sources.

Semantic vectors come from item text only (hashed character n-grams under a
seeded random projection); behavioral vectors come from interaction sequences
only (a small two-tower next-item encoder).  The indexer quantizes both.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .corpus import InteractionLog, ItemRecord

SOURCE_TAGS = ("semantic", "behavioral")


@dataclass
class EmbeddingMatrix:
    item_ids: list[str]
    vectors: np.ndarray  # (n, d) float32
    source_tag: str
    seed: int = 0

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        if self.source_tag not in SOURCE_TAGS:
            raise ValueError(f"source_tag must be one of {SOURCE_TAGS}")
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.item_ids):
            raise ValueError(
                f"vector matrix {self.vectors.shape} does not match "
                f"{len(self.item_ids)} items"
            )
        if not np.isfinite(self.vectors).all():
            raise ValueError("embedding matrix contains NaN/Inf")

    @property
    def d(self) -> int:
        return self.vectors.shape[1]

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    def row(self, item_id: str) -> np.ndarray:
        return self.vectors[self.item_ids.index(item_id)]


_EMB_MAGIC = b"GREMB"
_EMB_VERSION = 1


def save_embeddings(mat: EmbeddingMatrix, path) -> None:
    """Versioned binary layout: header, item-id table, row-major float32 payload."""
    path = Path(path)
    tag_code = SOURCE_TAGS.index(mat.source_tag)
    idtable = "\n".join(mat.item_ids).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_EMB_MAGIC)
        fh.write(struct.pack("<BBIIQ", _EMB_VERSION, tag_code, mat.d, mat.n, mat.seed))
        fh.write(struct.pack("<I", len(idtable)))
        fh.write(idtable)
        fh.write(np.ascontiguousarray(mat.vectors, dtype="<f4").tobytes())


def load_embeddings(path) -> EmbeddingMatrix:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(5)
        if magic != _EMB_MAGIC:
            raise ValueError(f"{path}: not an embedding file (magic {magic!r})")
        version, tag_code, d, n, seed = struct.unpack("<BBIIQ", fh.read(18))
        if version != _EMB_VERSION:
            raise ValueError(f"{path}: unsupported embedding format version {version}")
        (idlen,) = struct.unpack("<I", fh.read(4))
        item_ids = fh.read(idlen).decode("utf-8").split("\n") if idlen else []
        payload = fh.read(4 * n * d)
        vectors = np.frombuffer(payload, dtype="<f4").reshape(n, d).copy()
    return EmbeddingMatrix(item_ids, vectors, SOURCE_TAGS[tag_code], seed)


def normalize_text(title: str, description: str = "") -> str:
    """Lowercase, join title + description, collapse all whitespace."""
    return " ".join((title + " " + description).lower().split())


class SemanticEmbedder:
    """Deterministic hashed character-trigram encoder with seeded projection.

    Each word's trigrams (with `<`/`>` boundary markers) are hashed into
    buckets of a fixed random projection table, giving a per-word vector.
    Hidden states are computed recurrently, hidden_t = norm(v_t + mix *
    hidden_{t-1}), so word order matters; the item vector is the normalized
    mean over positions.
    """

    def __init__(
        self,
        d: int = 64,
        seed: int = 0,
        n_buckets: int = 4096,
        ngram: int = 3,
        mix: float = 0.5,
    ):
        self.d = d
        self.seed = seed
        self.n_buckets = n_buckets
        self.ngram = ngram
        self.mix = mix
        rng = np.random.default_rng(seed)
        self._proj = (
            rng.standard_normal((n_buckets, d)) / np.sqrt(d)
        ).astype(np.float32)
        self._key = int(seed).to_bytes(8, "little")

    def _bucket(self, gram: str) -> int:
        h = hashlib.blake2b(gram.encode("utf-8"), digest_size=8, key=self._key)
        return int.from_bytes(h.digest(), "little") % self.n_buckets

    def token_vector(self, token: str) -> np.ndarray:
        """Hidden state for one word position."""
        marked = f"<{token}>"
        n = self.ngram
        grams = (
            [marked[i : i + n] for i in range(len(marked) - n + 1)]
            if len(marked) >= n
            else [marked]
        )
        vec = np.zeros(self.d, dtype=np.float32)
        for g in grams:
            vec += self._proj[self._bucket(g)]
        norm = float(np.linalg.norm(vec))
        return vec / norm if norm > 1e-12 else vec

    def embed_text(self, text: str) -> np.ndarray:
        tokens = text.split()
        if not tokens:
            raise ValueError("cannot embed empty text")
        hidden = np.zeros(self.d, dtype=np.float32)
        states = []
        for tok in tokens:
            raw = self.token_vector(tok) + np.float32(self.mix) * hidden
            norm = float(np.linalg.norm(raw))
            hidden = raw / norm if norm > 1e-12 else raw
            states.append(hidden)
        mean = np.mean(states, axis=0)
        norm = float(np.linalg.norm(mean))
        return (mean / norm if norm > 1e-12 else mean).astype(np.float32)


def semantic_embed(item: ItemRecord, embedder: SemanticEmbedder) -> np.ndarray:
    """Semantic vector for one item from its normalized title + description."""
    text = normalize_text(item.title, item.description)
    if not text:
        raise ValueError(f"item {item.item_id!r} has empty text after normalization")
    return embedder.embed_text(text)


def semantic_matrix(log: InteractionLog, embedder: SemanticEmbedder) -> EmbeddingMatrix:
    ids = log.item_ids()
    vecs = np.stack([semantic_embed(log.items[i], embedder) for i in ids])
    return EmbeddingMatrix(ids, vecs, "semantic", seed=embedder.seed)


@dataclass
class BehaviorConfig:
    d_b: int = 64
    epochs: int = 8
    neg_count: int = 16
    seed: int = 0
    lr: float = 0.05
    batch_size: int = 64
    window: int = 20


class BehaviorEncoder:
    """Two-tower next-item scorer over item-id sequences (no text).

    History tower mean-pools a context embedding table over the recent
    window; the item tower is an output embedding table.  Trained with a
    sampled-softmax objective; the item tower becomes the behavioral matrix.
    """

    def __init__(self, item_ids: list[str], cfg: BehaviorConfig):
        if len(item_ids) < 2:
            raise ValueError("behavior encoder needs at least 2 items for negatives")
        self.item_ids = list(item_ids)
        self.cfg = cfg
        self._idx = {it: j for j, it in enumerate(self.item_ids)}
        gen = torch.Generator().manual_seed(cfg.seed)
        n = len(item_ids)
        self.ctx_emb = torch.nn.Parameter(torch.randn(n, cfg.d_b, generator=gen) * 0.1)
        self.item_emb = torch.nn.Parameter(torch.randn(n, cfg.d_b, generator=gen) * 0.1)

    def _history_vec(self, hist_idx: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        # hist_idx: (B, W) padded with 0; lengths: (B,)
        emb = self.ctx_emb[hist_idx]  # (B, W, d)
        mask = (
            torch.arange(hist_idx.shape[1]).unsqueeze(0) < lengths.unsqueeze(1)
        ).float()
        summed = (emb * mask.unsqueeze(-1)).sum(dim=1)
        return summed / lengths.clamp(min=1).unsqueeze(1).float()

    def score(self, history: list[str], candidates: list[str]) -> np.ndarray:
        """Next-item scores for a history over candidate items."""
        hist = torch.tensor([[self._idx[i] for i in history[-self.cfg.window :]]])
        lengths = torch.tensor([hist.shape[1]])
        with torch.no_grad():
            h = self._history_vec(hist, lengths)
            cand = self.item_emb[torch.tensor([self._idx[c] for c in candidates])]
            return (h @ cand.T).squeeze(0).numpy()

    def fit(self, log: InteractionLog) -> None:
        cfg = self.cfg
        torch.manual_seed(cfg.seed)
        pairs = []  # (history idx tuple, target idx)
        for u in log.user_ids():
            seq = [self._idx[e.item_id] for e in log.events[u]]
            for t in range(1, len(seq)):
                lo = max(0, t - cfg.window)
                pairs.append((tuple(seq[lo:t]), seq[t]))
        if not pairs:
            raise ValueError("interaction log yields no training pairs")
        n = len(self.item_ids)
        opt = torch.optim.Adam([self.ctx_emb, self.item_emb], lr=cfg.lr)
        rng = np.random.default_rng(cfg.seed)
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(pairs))
            for lo in range(0, len(order), cfg.batch_size):
                batch = [pairs[j] for j in order[lo : lo + cfg.batch_size]]
                width = max(len(h) for h, _ in batch)
                hist = torch.zeros(len(batch), width, dtype=torch.long)
                lengths = torch.zeros(len(batch), dtype=torch.long)
                targets = torch.zeros(len(batch), dtype=torch.long)
                for r, (h, tgt) in enumerate(batch):
                    hist[r, : len(h)] = torch.tensor(h)
                    lengths[r] = len(h)
                    targets[r] = tgt
                negs = torch.from_numpy(
                    rng.integers(0, n, size=(len(batch), cfg.neg_count))
                )
                cand = torch.cat([targets.unsqueeze(1), negs], dim=1)  # (B, 1+neg)
                h_vec = self._history_vec(hist, lengths)  # (B, d)
                logits = torch.einsum("bd,bkd->bk", h_vec, self.item_emb[cand])
                # Mask negatives that accidentally equal the positive.
                dup = cand[:, 1:] == targets.unsqueeze(1)
                logits[:, 1:] = logits[:, 1:].masked_fill(dup, float("-inf"))
                loss = torch.nn.functional.cross_entropy(
                    logits, torch.zeros(len(batch), dtype=torch.long)
                )
                opt.zero_grad()
                loss.backward()
                opt.step()

    def embeddings(self) -> EmbeddingMatrix:
        with torch.no_grad():
            vecs = self.item_emb.detach().numpy().astype(np.float32)
        norms = np.linalg.norm(vecs, axis=1, keepdims=True)
        vecs = vecs / np.maximum(norms, 1e-12)
        return EmbeddingMatrix(self.item_ids, vecs, "behavioral", seed=self.cfg.seed)


def train_behavior_encoder(log: InteractionLog, cfg: BehaviorConfig) -> EmbeddingMatrix:
    """Train the two-tower encoder on the (train-split) log; return item vectors."""
    torch.set_num_threads(1)
    enc = BehaviorEncoder(log.item_ids(), cfg)
    enc.fit(log)
    return enc.embeddings()
