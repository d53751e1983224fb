"""Ablation harness: index-composition, contrastive-task and adapter toggles.

Every variant in a plan shares the corpus, the per-seed embeddings and the
training budget; only the toggled component differs.  Index variants follow
the composition study: `random` draws codes uniformly with the unit shape,
`semantic`/`behavior` keep one source, `unit` splices both.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .backbone import DecoderBackbone, Vocab, extend_vocab
from .config import PipelineConfig
from .corpus import InteractionLog, Splits, leave_one_out_split, train_only_log
from .embed import (
    EmbeddingMatrix,
    SemanticEmbedder,
    semantic_matrix,
    train_behavior_encoder,
)
from .indexer import (
    IndexConfig,
    ItemIndex,
    assemble_unified_index,
    build_trie,
    hierarchical_kmeans,
    max_disambig,
    vocab_tokens,
)
from .metrics import MetricsReport, evaluate
from .store import fingerprint
from .training import TaskData, annealing_tune, initial_train

INDEX_VARIANTS = ("random", "semantic", "behavior", "unit")


@dataclass(frozen=True)
class Variant:
    name: str
    index: str = "unit"
    gct: bool = False
    aat: bool = False
    depth_s: int | None = None
    depth_b: int | None = None

    def __post_init__(self):
        if self.index not in INDEX_VARIANTS:
            raise ValueError(f"index variant must be one of {INDEX_VARIANTS}")


def composition_plan() -> list[Variant]:
    """Index-composition study: which exogenous signals feed the identifiers."""
    return [Variant(v, index=v) for v in INDEX_VARIANTS]


def component_plan() -> list[Variant]:
    """Component toggles: bare random index, +dual-source, +contrast, +adapter."""
    return [
        Variant("base", index="random"),
        Variant("dki", index="unit"),
        Variant("dki+gct", index="unit", gct=True),
        Variant("dki+gct+aat", index="unit", gct=True, aat=True),
    ]


def depth_plan(depths=((1, 1), (2, 2), (4, 4))) -> list[Variant]:
    return [
        Variant(f"depth{ds}+{db}", index="unit", depth_s=ds, depth_b=db)
        for ds, db in depths
    ]


def build_index_variant(
    z_s: EmbeddingMatrix,
    z_b: EmbeddingMatrix,
    item_ids: list[str],
    cfg: IndexConfig,
    variant: str,
    seed: int,
) -> list[ItemIndex]:
    n = len(item_ids)
    empty = np.zeros((n, 0), dtype=np.int32)
    if variant == "random":
        rng = np.random.default_rng([seed, 77])
        sem = rng.integers(0, cfg.k, (n, cfg.depth_s)).astype(np.int32)
        beh = rng.integers(0, cfg.k, (n, cfg.depth_b)).astype(np.int32)
    elif variant == "semantic":
        sem = hierarchical_kmeans(z_s, cfg.depth_s, cfg)
        beh = empty
    elif variant == "behavior":
        sem = empty
        beh = hierarchical_kmeans(z_b, cfg.depth_b, cfg)
    elif variant == "unit":
        sem = hierarchical_kmeans(z_s, cfg.depth_s, cfg)
        beh = hierarchical_kmeans(z_b, cfg.depth_b, cfg)
    else:
        raise ValueError(f"unknown index variant {variant!r}")
    return assemble_unified_index(sem, beh, item_ids)


@dataclass
class AblationResult:
    reports: list[MetricsReport]

    def majority_holds(self, predicate) -> bool:
        """predicate(reports_of_one_seed) -> bool; True if most seeds satisfy it."""
        by_seed: dict[int, list[MetricsReport]] = {}
        for rep in self.reports:
            by_seed.setdefault(rep.flags["seed"], []).append(rep)
        votes = [bool(predicate(group)) for group in by_seed.values()]
        return sum(votes) > len(votes) / 2


def run_variant(
    log: InteractionLog,
    splits: Splits,
    z_s: EmbeddingMatrix,
    z_b: EmbeddingMatrix,
    variant: Variant,
    base: PipelineConfig,
    seed: int,
    out_dir: Path,
    model_cfg=None,
    train_cfg=None,
) -> MetricsReport:
    index_cfg = replace(
        base.index,
        seed=seed,
        depth_s=variant.depth_s or base.index.depth_s,
        depth_b=variant.depth_b or base.index.depth_b,
    )
    item_ids = log.item_ids()
    indices = build_index_variant(z_s, z_b, item_ids, index_cfg, variant.index, seed)
    index_map = {ix.item_id: ix for ix in indices}
    trie = build_trie(indices)
    vocab = Vocab()
    model_cfg = replace(model_cfg or base.model, seed=seed)
    model = DecoderBackbone(model_cfg, len(vocab))
    model, vocab = extend_vocab(
        model, vocab, vocab_tokens(index_cfg, max_disambig(indices)), seed=seed
    )

    train_cfg = replace(train_cfg or base.train, seed=seed, gct=variant.gct)
    data = TaskData(log, splits, index_map, vocab, z_s, z_b)
    stage_dir = out_dir / f"{variant.name}_s{seed}"
    result = initial_train(model, data, train_cfg, stage_dir, model_cfg)
    use_adapter = False
    if variant.aat:
        from .backbone import load_checkpoint

        _, sets = load_checkpoint(result.final_checkpoint)
        annealing_tune(model, sets["projector"], data, train_cfg, stage_dir, model_cfg)
        use_adapter = True

    flags = {
        "variant": variant.index,
        "name": variant.name,
        "gct": variant.gct,
        "aat": variant.aat,
        "depth_s": index_cfg.depth_s,
        "depth_b": index_cfg.depth_b,
        "seed": seed,
    }
    return evaluate(
        model, splits, index_map, trie, vocab,
        ks=base.eval.ks, beam_size=base.eval.beam_size,
        max_history=base.eval.max_history, use_adapter=use_adapter,
        fingerprint=fingerprint(dataclasses.asdict(variant) | {"seed": seed}),
        flags=flags,
    )


def ablation_run(
    log: InteractionLog,
    plan: list[Variant],
    base: PipelineConfig,
    out_dir,
    seeds: tuple[int, ...] = (0, 1, 2),
    model_cfg=None,
    train_cfg=None,
) -> AblationResult:
    """Train and evaluate every (variant, seed) cell with shared data and budget."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    splits = leave_one_out_split(log)
    reports = []
    for seed in seeds:
        embedder = SemanticEmbedder(
            d=base.embed.d_s, seed=seed, n_buckets=base.embed.n_buckets
        )
        z_s = semantic_matrix(log, embedder)
        train_log = train_only_log(log, splits)
        beh_cfg = replace(base.embed.behavior, seed=seed)
        z_b = train_behavior_encoder(train_log, beh_cfg)
        for variant in plan:
            reports.append(
                run_variant(log, splits, z_s, z_b, variant, base, seed, out_dir,
                            model_cfg=model_cfg, train_cfg=train_cfg)
            )
    return AblationResult(reports)


