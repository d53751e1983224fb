"""Semantic and behavioral embedding contracts."""

import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from genrec.corpus import Interaction, InteractionLog, ItemRecord
from genrec.embed import (
    BehaviorConfig,
    BehaviorEncoder,
    EmbeddingMatrix,
    SemanticEmbedder,
    load_embeddings,
    save_embeddings,
    semantic_embed,
    train_behavior_encoder,
)

DATA = Path(__file__).parent / "data"


def oracle_embed(text, d=64, seed=17, n_buckets=4096, n=3, mix=0.5):
    """Independent re-derivation of the hashing scheme (plain loops)."""
    text = " ".join(text.lower().split())
    rng = np.random.default_rng(seed)
    proj = (rng.standard_normal((n_buckets, d)) / np.sqrt(d)).astype(np.float32)
    key = seed.to_bytes(8, "little")
    hidden = np.zeros(d, dtype=np.float32)
    states = []
    for tok in text.split():
        s = "<" + tok + ">"
        grams = [s[i : i + n] for i in range(len(s) - n + 1)] if len(s) >= n else [s]
        v = np.zeros(d, dtype=np.float32)
        for g in grams:
            h = hashlib.blake2b(g.encode(), digest_size=8, key=key)
            v = v + proj[int.from_bytes(h.digest(), "little") % n_buckets]
        v = v / np.linalg.norm(v)
        hidden = v + np.float32(mix) * hidden
        hidden = hidden / np.linalg.norm(hidden)
        states.append(hidden)
    m = np.mean(states, axis=0)
    return (m / np.linalg.norm(m)).astype(np.float32)


class TestSemantic:
    def test_single_token_equals_its_hidden_state(self):
        emb = SemanticEmbedder(d=32, seed=3)
        item = ItemRecord("x", "guitar", "")
        h = emb.token_vector("guitar")
        np.testing.assert_array_equal(semantic_embed(item, emb), h)

    def test_identical_items_identical_vectors(self):
        emb = SemanticEmbedder(d=32, seed=3)
        a = semantic_embed(ItemRecord("a", "Blue Suede Shoes", "classic"), emb)
        b = semantic_embed(ItemRecord("b", "Blue Suede Shoes", "classic"), emb)
        np.testing.assert_array_equal(a, b)

    def test_golden_red_lipstick_seed17(self):
        golden = json.loads((DATA / "golden_semantic_red_lipstick_s17.json").read_text())
        emb = SemanticEmbedder(d=golden["d"], seed=golden["seed"])
        got = semantic_embed(ItemRecord("x", golden["text"], ""), emb)
        np.testing.assert_allclose(got, np.array(golden["vector"], dtype=np.float32), atol=1e-6)
        # The frozen file itself came from this oracle; re-derive to guard it.
        np.testing.assert_allclose(oracle_embed(golden["text"]), got, atol=1e-6)

    def test_trailing_whitespace_invariant_but_order_sensitive(self):
        emb = SemanticEmbedder(d=32, seed=5)
        base = semantic_embed(ItemRecord("x", "red lipstick", ""), emb)
        padded = semantic_embed(ItemRecord("x", "red lipstick   ", ""), emb)
        np.testing.assert_array_equal(base, padded)
        swapped = semantic_embed(ItemRecord("x", "lipstick red", ""), emb)
        assert not np.allclose(base, swapped)

    def test_empty_text_errors(self):
        emb = SemanticEmbedder(d=16, seed=1)
        with pytest.raises(ValueError, match="empty"):
            semantic_embed(ItemRecord("x", "   ", ""), emb)

    def test_vectors_finite_and_unit_norm(self):
        emb = SemanticEmbedder(d=48, seed=9)
        v = semantic_embed(ItemRecord("x", "some moderately long item title", ""), emb)
        assert np.isfinite(v).all()
        assert abs(np.linalg.norm(v) - 1.0) < 1e-5


def alternating_log(n_pairs=40):
    evs = [
        Interaction("u0", "a" if t % 2 == 0 else "b", t) for t in range(n_pairs)
    ]
    items = {i: ItemRecord(i, f"t {i}") for i in ("a", "b")}
    return InteractionLog({"u0": evs}, items)


def block_log(n_items=10, n_users=20, seed=0, titles=None):
    """Two disjoint co-occurrence blocks of items; users stay inside a block."""
    rng = np.random.default_rng(seed)
    ids = [f"i{k}" for k in range(n_items)]
    half = n_items // 2
    events = {}
    for u in range(n_users):
        block = ids[:half] if u % 2 == 0 else ids[half:]
        seq = rng.permutation(block).tolist() + rng.permutation(block).tolist()
        events[f"u{u}"] = [Interaction(f"u{u}", it, t) for t, it in enumerate(seq)]
    items = {i: ItemRecord(i, (titles or {}).get(i, f"title {i}")) for i in ids}
    return InteractionLog(events, items)


class TestBehavior:
    def test_alternating_items_rank_each_other(self):
        log = alternating_log()
        enc = BehaviorEncoder(["a", "b"], BehaviorConfig(d_b=16, epochs=20, seed=0))
        enc.fit(log)
        scores = enc.score(["a"], ["a", "b"])
        assert scores[1] > scores[0]

    def test_deterministic_given_seed(self):
        log = block_log()
        cfg = BehaviorConfig(d_b=16, epochs=2, seed=7)
        m1 = train_behavior_encoder(log, cfg)
        m2 = train_behavior_encoder(log, cfg)
        assert m1.vectors.tobytes() == m2.vectors.tobytes()

    def test_block_structure_recovered(self):
        hits = 0
        for seed in range(5):
            log = block_log(seed=seed)
            mat = train_behavior_encoder(
                log, BehaviorConfig(d_b=16, epochs=8, seed=seed)
            )
            vecs = mat.vectors
            idx = {it: j for j, it in enumerate(mat.item_ids)}
            blocks = [[f"i{k}" for k in range(5)], [f"i{k}" for k in range(5, 10)]]
            intra, inter = [], []
            for bi, block in enumerate(blocks):
                for a in block:
                    for b in block:
                        if a < b:
                            intra.append(float(vecs[idx[a]] @ vecs[idx[b]]))
                    for c in blocks[1 - bi]:
                        inter.append(float(vecs[idx[a]] @ vecs[idx[c]]))
            if np.mean(intra) > np.mean(inter):
                hits += 1
        assert hits >= 4

    def test_never_reads_text(self):
        # Same interactions, different titles -> bitwise-identical matrices.
        log_a = block_log(titles=None)
        log_b = block_log(titles={f"i{k}": f"completely different {k}" for k in range(10)})
        cfg = BehaviorConfig(d_b=16, epochs=2, seed=3)
        m_a = train_behavior_encoder(log_a, cfg)
        m_b = train_behavior_encoder(log_b, cfg)
        assert m_a.vectors.tobytes() == m_b.vectors.tobytes()

    def test_fewer_than_two_items_errors(self):
        with pytest.raises(ValueError, match="2 items"):
            BehaviorEncoder(["only"], BehaviorConfig())


class TestPersistence:
    def test_roundtrip_bitwise(self, tmp_path):
        rng = np.random.default_rng(0)
        mat = EmbeddingMatrix(
            ["x", "y", "z"], rng.standard_normal((3, 8)).astype(np.float32), "semantic", seed=4
        )
        p = tmp_path / "emb.bin"
        save_embeddings(mat, p)
        back = load_embeddings(p)
        assert back.item_ids == mat.item_ids
        assert back.source_tag == "semantic"
        assert back.seed == 4
        assert back.vectors.tobytes() == mat.vectors.tobytes()

    def test_nan_rejected(self):
        bad = np.zeros((2, 4), dtype=np.float32)
        bad[0, 0] = np.nan
        with pytest.raises(ValueError, match="NaN"):
            EmbeddingMatrix(["a", "b"], bad, "semantic")
