"""Acceptance suite: one test per criterion, one printed pass/fail line each.

Run with `pytest tests/test_acceptance.py -v -s`.  Criteria are property
checks plus desk-scale directional runs; the planted-pattern pipeline and
the ablation grid dominate the runtime (~20 minutes total).
"""

import math
import time

import numpy as np
import pytest
import torch

from genrec.backbone import DecoderBackbone, ModelConfig, Vocab, load_checkpoint
from genrec.config import PipelineConfig, load_config
from genrec.store import Workdir


def check(name: str, ok: bool, detail: str = ""):
    line = f"[{'PASS' if ok else 'FAIL'}] {name}" + (f": {detail}" if detail else "")
    print(line, flush=True)
    assert ok, line


# --------------------------------------------------------------------------
# 1. Quantizer correctness


def test_criterion_1_quantizer(capfd):
    from genrec.embed import EmbeddingMatrix
    from genrec.indexer import (
        IndexConfig, assemble_unified_index, capacity, hierarchical_kmeans,
    )
    from test_indexer import exhaustive_two_means

    t0 = time.time()
    rng = np.random.default_rng(0)
    ids = [f"i{j}" for j in range(1000)]
    cfg = IndexConfig(k=32, depth_s=4, depth_b=4, seed=0)
    sem = hierarchical_kmeans(
        EmbeddingMatrix(ids, rng.standard_normal((1000, 64)).astype(np.float32), "semantic"),
        4, cfg,
    )
    beh = hierarchical_kmeans(
        EmbeddingMatrix(ids, rng.standard_normal((1000, 64)).astype(np.float32), "behavioral"),
        4, cfg,
    )
    unified = assemble_unified_index(sem, beh, ids)
    unique = len({tuple(ix.token_seq) for ix in unified}) == 1000

    oracle_ok = True
    cfg2 = IndexConfig(k=2, seed=5)
    for n in range(2, 9):
        X = np.random.default_rng(300 + n).standard_normal((n, 3))
        codes = hierarchical_kmeans(
            EmbeddingMatrix([f"x{j}" for j in range(n)], X.astype(np.float32), "semantic"),
            1, cfg2,
        )[:, 0]
        oracle_ok &= bool((codes == exhaustive_two_means(X)).all())

    cap_ok = capacity(256, 4) == 4_294_967_296
    elapsed = time.time() - t0
    check(
        "criterion 1 quantizer",
        unique and oracle_ok and cap_ok and elapsed < 10,
        f"unique={unique} oracle={oracle_ok} capacity={cap_ok} {elapsed:.1f}s",
    )


# --------------------------------------------------------------------------
# 2. Gradient suite


def test_criterion_2_gradients():
    from genrec.training import GuidanceProjector
    from test_backbone import TINY, central_diff, rand_tokens

    t0 = time.time()
    torch.manual_seed(0)
    model = DecoderBackbone(TINY, vocab_size=40).double()
    g = torch.Generator().manual_seed(1)
    with torch.no_grad():
        for p in model.adapter_parameters().values():
            p.copy_(torch.randn(p.shape, generator=g, dtype=torch.float64) * 0.1)
    proj = GuidanceProjector(TINY.d_model, 8).double()
    toks, targets = rand_tokens(9, seed=5), rand_tokens(9, seed=6)

    def loss():
        logits, hidden, _ = model(toks, use_adapter=True)
        return (
            torch.nn.functional.cross_entropy(logits, targets)
            + proj(hidden[-1]).pow(2).sum()
        )

    layer_types = {
        "attention": "blocks.0.attn.q_proj.weight",
        "feed-forward": "blocks.1.ff.fc_up.weight",
        "layer-norm": "blocks.0.ln1.weight",
        "embedding": "tok_emb.weight",
        "position": "pos_emb.weight",
        "head": "head.weight",
        "adapter": "blocks.0.attn.adapter_q.down",
    }
    params = dict(model.named_parameters())
    params["projector"] = dict(proj.named_parameters())["fc1.weight"]
    worst = 0.0
    ok = True
    for kind, name in list(layer_types.items()) + [("projector", "projector")]:
        tensor = params[name] if name in params else params["projector"]
        for p in list(model.parameters()) + list(proj.parameters()):
            p.grad = None
        loss().backward()
        flat, grad = tensor.view(-1), tensor.grad.view(-1)
        picks = np.random.default_rng(0).choice(
            flat.numel(), size=min(4, flat.numel()), replace=False
        )
        for j in picks:
            fd = central_diff(loss, flat, int(j), h=1e-6)
            auto = grad[int(j)].item()
            rel = abs(auto - fd) / max(abs(fd), abs(auto), 1e-8)
            worst = max(worst, rel)
            ok &= rel < 1e-4
    elapsed = time.time() - t0
    check("criterion 2 gradients", ok and elapsed < 60,
          f"worst rel err={worst:.2e} {elapsed:.1f}s")


# --------------------------------------------------------------------------
# 3. Loss identities


def test_criterion_3_loss_identities():
    from genrec.training import LossBreakdown, contrastive_loss, generation_loss

    rng = np.random.default_rng(0)
    comp_ok = True
    for _ in range(100):
        lg, ls, lb, l1, l2 = rng.standard_normal(5)
        i = int(rng.integers(0, 2))
        b = LossBreakdown(lg, ls, lb, l1, l2, i)
        comp_ok &= b.total == lg + i * (l1 * ls + l2 * lb)
        if i == 0:
            comp_ok &= b.total == lg

    info_ok = True
    for n in (2, 4, 8):
        loss = contrastive_loss(torch.ones(n, 6), lambda x: x, torch.ones(n, 6), 0.5)
        info_ok &= abs(loss.item() - math.log(n)) < 1e-6

    nll = generation_loss(
        torch.zeros(1, 260, dtype=torch.float64), torch.tensor([3]), torch.tensor([True])
    )
    nll_ok = abs(nll.item() - math.log(260)) < 1e-6
    check("criterion 3 loss identities", comp_ok and info_ok and nll_ok,
          f"composition={comp_ok} infonce={info_ok} nll={nll_ok}")


# --------------------------------------------------------------------------
# 4. Constrained decoding


def test_criterion_4_constrained_decoding():
    from genrec.decode import constrained_beam_search
    from test_decode import RandomLogitModel, exhaustive_ranking, make_catalog

    # Validity under adversarial logits: count beam-search model calls as
    # decode steps until we have exercised >= 10,000.
    steps = 0
    invalid = 0
    trial = 0
    ids, index_map, trie, vocab = make_catalog(24, seed=3)
    valid_paths = {tuple(p) for p in trie.items().values()}

    class CountingModel(RandomLogitModel):
        def __call__(self, tokens, use_adapter=False, past=None):
            nonlocal steps
            steps += tokens.shape[0] if tokens.dim() == 2 else 1
            return super().__call__(tokens, use_adapter, past)

    while steps < 10_000:
        model = CountingModel(len(vocab), seed=trial)
        out = constrained_beam_search(
            model, [vocab.bos_id], trie, vocab, beam_size=8, rescore=False
        )
        for _, _, names in out:
            if tuple(names) not in valid_paths:
                invalid += 1
        trial += 1

    oracle_ok = True
    for n_items, seed in ((8, 0), (20, 1), (32, 2)):
        ids, index_map, trie, vocab = make_catalog(n_items, seed=seed)
        model = DecoderBackbone(
            ModelConfig(d_model=32, n_layers=1, n_heads=2, context_len=256,
                        adapter_rank=2, seed=seed),
            len(vocab),
        )
        prompt = [vocab.bos_id]
        got = constrained_beam_search(model, prompt, trie, vocab, beam_size=n_items)
        want = exhaustive_ranking(model, prompt, trie, vocab)
        oracle_ok &= [g[0] for g in got] == [w[0] for w in want]
    check("criterion 4 constrained decoding", invalid == 0 and oracle_ok,
          f"{steps} random-logit steps, invalid={invalid}, oracle={oracle_ok}")


# --------------------------------------------------------------------------
# 5. Metric oracles


def test_criterion_5_metric_oracles():
    from genrec.metrics import ndcg_at_k, recall_at_k

    fixtures_ok = (
        ndcg_at_k(["t"], "t", 5) == 1.0
        and ndcg_at_k(["a", "b", "t"], "t", 5) == 0.5
        and ndcg_at_k(["a"], "t", 5) == 0.0
        and recall_at_k(["a", "b", "c", "d", "e", "t"], "t", 5) == 0
        and recall_at_k(["t"], "t", 1) == 1
    )
    rng = np.random.default_rng(1)
    mono_ok = True
    for _ in range(200):
        n = int(rng.integers(1, 25))
        ranked = [f"i{j}" for j in rng.permutation(40)[:n]]
        target = f"i{rng.integers(0, 40)}"
        prev_r, prev_n = 0, 0.0
        for k in range(1, n + 2):
            r, nd = recall_at_k(ranked, target, k), ndcg_at_k(ranked, target, k)
            mono_ok &= r >= prev_r and nd >= prev_n - 1e-12
            prev_r, prev_n = r, nd
    check("criterion 5 metric oracles", fixtures_ok and mono_ok,
          f"fixtures={fixtures_ok} monotone={mono_ok}")


# --------------------------------------------------------------------------
# 6 & 7. End-to-end planted pattern + stage contracts


@pytest.fixture(scope="module")
def chain_workdir(tmp_path_factory):
    from genrec import pipeline

    wd = Workdir(tmp_path_factory.mktemp("chain_e2e") / "wd")
    cfg = PipelineConfig()  # desk-scale defaults: chain/200 items/160 users
    t0 = time.time()
    pipeline.stage_synth(cfg, wd)
    pipeline.stage_ingest(cfg, wd)
    pipeline.stage_embed(cfg, wd)
    pipeline.stage_index(cfg, wd)
    pipeline.stage_train_initial(cfg, wd)
    pipeline.stage_train_anneal(cfg, wd)
    summary = pipeline.stage_evaluate(cfg, wd, "annealed")
    elapsed = time.time() - t0
    return wd, cfg, summary, elapsed


@pytest.mark.slow
def test_criterion_6_planted_pattern(chain_workdir):
    _, _, summary, elapsed = chain_workdir
    r5, n5 = summary["recall"][5], summary["ndcg"][5]
    check(
        "criterion 6 planted-pattern pipeline",
        r5 >= 0.8 and n5 >= 0.6 and elapsed <= 900,
        f"Recall@5={r5:.3f} NDCG@5={n5:.3f} elapsed={elapsed:.0f}s",
    )


@pytest.mark.slow
def test_criterion_7_stage_contracts(chain_workdir):
    from genrec.backbone import build_model_from_checkpoint
    from genrec.decode import assert_inference_parameters, recommend
    from genrec.indexer import build_trie, load_index
    from genrec.corpus import load_splits

    wd, cfg, _, _ = chain_workdir
    _, initial_sets = load_checkpoint(wd.initial_checkpoint)
    _, annealed_sets = load_checkpoint(wd.annealed_checkpoint)

    frozen_ok = all(
        torch.equal(initial_sets["base"][n], annealed_sets["base"][n])
        for n in initial_sets["base"]
    ) and all(
        torch.equal(initial_sets["projector"][n], annealed_sets["projector"][n])
        for n in initial_sets["projector"]
    )

    # Adapter-off decoding must reproduce the pre-annealing ranked lists.
    indices = load_index(wd.index_file)
    index_map = {ix.item_id: ix for ix in indices}
    trie = build_trie(indices)
    vocab = Vocab.load(wd.vocab_file)
    splits = load_splits(wd.splits)
    model_init, _, _ = build_model_from_checkpoint(wd.initial_checkpoint)
    model_ann, _, sets = build_model_from_checkpoint(wd.annealed_checkpoint)
    lists_ok = True
    for u in splits.user_ids()[:8]:
        history = splits.train[u]
        a = recommend(model_init, history, index_map, trie, vocab, k=10,
                      beam_size=20, epoch_key=u, use_adapter=False)
        b = recommend(model_ann, history, index_map, trie, vocab, k=10,
                      beam_size=20, epoch_key=u, use_adapter=False)
        lists_ok &= a == b

    try:
        assert_inference_parameters(sets)
        projector_ok = "projector" not in sets
    except ValueError:
        projector_ok = False
    check(
        "criterion 7 stage contracts",
        frozen_ok and lists_ok and projector_ok,
        f"frozen={frozen_ok} adapter-off-lists={lists_ok} no-projector={projector_ok}",
    )


# --------------------------------------------------------------------------
# 8. Directional ablations


@pytest.mark.slow
def test_criterion_8_directional_ablations():
    import dataclasses as dc

    from genrec.ablation import Variant, ablation_run, composition_plan
    from genrec.synth import cluster_corpus

    t0 = time.time()
    log = cluster_corpus(n_rows=8, n_cols=30, n_users=160, seq_len=8, seed=0)
    base = PipelineConfig()
    ab = base.ablate
    model_cfg = ModelConfig(
        d_model=ab.d_model, n_layers=ab.n_layers, n_heads=ab.n_heads,
        context_len=base.model.context_len, adapter_rank=ab.adapter_rank, seed=0,
    )
    train_cfg = dc.replace(base.train, epochs=ab.epochs,
                           anneal_epochs=ab.anneal_epochs)
    plan = composition_plan() + [Variant("unit+gct", index="unit", gct=True)]
    result = ablation_run(
        log, plan, base, "/tmp/acceptance_ablation", seeds=(0, 1, 2),
        model_cfg=model_cfg, train_cfg=train_cfg,
    )

    def by_name(group):
        return {rep.flags["name"]: rep for rep in group}

    def composition_order(group):
        g = by_name(group)
        unit = g["unit"].recall[10]
        sem, beh = g["semantic"].recall[10], g["behavior"].recall[10]
        rand = g["random"].recall[10]
        return unit >= max(sem, beh) and max(sem, beh) >= rand

    def gct_direction(group):
        g = by_name(group)
        return g["unit+gct"].ndcg[10] >= g["unit"].ndcg[10]

    comp_ok = result.majority_holds(composition_order)
    gct_ok = result.majority_holds(gct_direction)
    elapsed = time.time() - t0
    rows = "; ".join(
        f"{rep.flags['name']}/s{rep.flags['seed']} R@10={rep.recall[10]:.3f} "
        f"N@10={rep.ndcg[10]:.3f}"
        for rep in result.reports
    )
    check(
        "criterion 8 directional ablations",
        comp_ok and gct_ok and elapsed <= 3600,
        f"composition={comp_ok} gct={gct_ok} {elapsed:.0f}s [{rows}]",
    )


# --------------------------------------------------------------------------
# 9. Determinism


@pytest.mark.slow
def test_criterion_9_determinism(tmp_path):
    from genrec import pipeline

    cfg = load_config()
    cfg.synth.n_items = 40
    cfg.synth.n_users = 40
    cfg.synth.seq_len = 7
    cfg.index.k = 4
    cfg.index.depth_s = 2
    cfg.index.depth_b = 2
    cfg.model = ModelConfig(d_model=32, n_layers=1, n_heads=2, context_len=256,
                            adapter_rank=2, seed=0)
    cfg.train.epochs = 1
    cfg.train.anneal_epochs = 1
    cfg.train.valid_users = 4
    cfg.train.valid_beam = 10
    cfg.train.min_anneal_history = 2
    cfg.embed.behavior.epochs = 2
    cfg.eval.beam_size = 10

    digests = []
    for run in ("a", "b"):
        wd = Workdir(tmp_path / run)
        pipeline.stage_synth(cfg, wd)
        pipeline.stage_ingest(cfg, wd)
        pipeline.stage_embed(cfg, wd)
        pipeline.stage_index(cfg, wd)
        pipeline.stage_train_initial(cfg, wd)
        pipeline.stage_train_anneal(cfg, wd)
        pipeline.stage_evaluate(cfg, wd, "annealed")
        tree = {}
        for path in sorted(wd.root.rglob("*")):
            if path.is_file() and path.name != ".lock":
                tree[str(path.relative_to(wd.root))] = path.read_bytes()
        digests.append(tree)

    same_files = sorted(digests[0]) == sorted(digests[1])
    diffs = [
        name for name in digests[0]
        if same_files and digests[0][name] != digests[1][name]
    ]
    check(
        "criterion 9 determinism",
        same_files and not diffs,
        f"files={len(digests[0])} mismatches={diffs[:5]}",
    )
