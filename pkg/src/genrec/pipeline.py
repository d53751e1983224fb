"""Stage functions behind the CLI: each reads prior artifacts, writes its own.

Stages communicate only through the workdir (corpus/, embeddings/, index/,
checkpoints/, reports/); every output carries a format-version header and
the fingerprint of the config that produced it.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

from .backbone import (
    DecoderBackbone,
    Vocab,
    build_model_from_checkpoint,
    extend_vocab,
    set_determinism,
)
from .config import PipelineConfig
from .corpus import (
    InteractionLog,
    Splits,
    five_core_filter,
    leave_one_out_split,
    load_corpus,
    load_saved_log,
    load_splits,
    save_log,
    save_splits,
    train_only_log,
)
from .decode import assert_inference_parameters, recommend
from .embed import (
    SemanticEmbedder,
    load_embeddings,
    save_embeddings,
    semantic_matrix,
    train_behavior_encoder,
)
from .indexer import (
    assemble_unified_index,
    build_trie,
    hierarchical_kmeans,
    load_index,
    max_disambig,
    save_index,
    vocab_tokens,
)
from .metrics import evaluate
from .store import Workdir, fingerprint
from .synth import make_corpus, write_corpus_files
from .training import TaskData, annealing_tune, initial_train

from . import report as report_mod


def stage_synth(cfg: PipelineConfig, wd: Workdir) -> dict:
    wd.ensure()
    sc = cfg.synth
    log = make_corpus(
        sc.pattern,
        n_items=sc.n_items, n_users=sc.n_users, seq_len=sc.seq_len,
        group_size=sc.group_size, n_rows=sc.n_rows, n_cols=sc.n_cols,
        seed=sc.seed,
    )
    write_corpus_files(log, wd.raw_interactions, wd.raw_items)
    return {
        "pattern": sc.pattern,
        "users": log.n_users,
        "items": log.n_items,
        "interactions": log.n_interactions,
        "interactions_file": str(wd.raw_interactions),
        "items_file": str(wd.raw_items),
    }


def stage_ingest(cfg: PipelineConfig, wd: Workdir,
                 interactions=None, items=None) -> dict:
    wd.ensure()
    ipath = Path(interactions) if interactions else wd.require(
        wd.raw_interactions, "synth"
    )
    mpath = Path(items) if items else wd.require(wd.raw_items, "synth")
    log = load_corpus(ipath, mpath)
    filtered = five_core_filter(log)
    if filtered.n_users == 0:
        raise ValueError("5-core filtering removed every user")
    splits = leave_one_out_split(filtered)
    fp = fingerprint({"stage": "ingest", "seed": cfg.seed})
    save_log(filtered, wd.filtered_interactions, wd.filtered_items, fp)
    save_splits(splits, wd.splits, fp)
    return {
        "users": filtered.n_users,
        "items": filtered.n_items,
        "interactions": filtered.n_interactions,
        "splits_file": str(wd.splits),
    }


def _load_filtered(wd: Workdir) -> tuple[InteractionLog, Splits]:
    wd.require(wd.filtered_interactions, "ingest")
    wd.require(wd.splits, "ingest")
    log = load_saved_log(wd.filtered_interactions, wd.filtered_items)
    return log, load_splits(wd.splits)


def stage_embed(cfg: PipelineConfig, wd: Workdir) -> dict:
    log, splits = _load_filtered(wd)
    set_determinism(cfg.seed, cfg.train.threads)
    embedder = SemanticEmbedder(
        d=cfg.embed.d_s, seed=cfg.seed, n_buckets=cfg.embed.n_buckets
    )
    z_s = semantic_matrix(log, embedder)
    z_b = train_behavior_encoder(train_only_log(log, splits), cfg.embed.behavior)
    save_embeddings(z_s, wd.semantic_embeddings)
    save_embeddings(z_b, wd.behavioral_embeddings)
    return {
        "semantic": {"n": z_s.n, "d": z_s.d, "file": str(wd.semantic_embeddings)},
        "behavioral": {"n": z_b.n, "d": z_b.d, "file": str(wd.behavioral_embeddings)},
    }


def stage_index(cfg: PipelineConfig, wd: Workdir) -> dict:
    set_determinism(cfg.seed, cfg.train.threads)
    z_s = load_embeddings(wd.require(wd.semantic_embeddings, "embed"))
    z_b = load_embeddings(wd.require(wd.behavioral_embeddings, "embed"))
    sem = hierarchical_kmeans(z_s, cfg.index.depth_s, cfg.index)
    beh = hierarchical_kmeans(z_b, cfg.index.depth_b, cfg.index)
    indices = assemble_unified_index(sem, beh, z_s.item_ids)
    fp = fingerprint({"stage": "index", **dataclasses.asdict(cfg.index)})
    save_index(indices, wd.index_file, fp)
    n_disambig = max_disambig(indices)
    vocab = Vocab().extend(vocab_tokens(cfg.index, n_disambig))
    vocab.save(wd.vocab_file)
    trie = build_trie(indices)  # validates collision-freedom
    return {
        "items": len(indices),
        "disambig_tokens": n_disambig,
        "vocab_size": len(vocab),
        "trie_leaves": trie.n_leaves,
        "index_file": str(wd.index_file),
    }


def _load_task_data(cfg: PipelineConfig, wd: Workdir) -> TaskData:
    log, splits = _load_filtered(wd)
    indices = load_index(wd.require(wd.index_file, "index"))
    vocab = Vocab.load(wd.require(wd.vocab_file, "index"))
    z_s = load_embeddings(wd.require(wd.semantic_embeddings, "embed"))
    z_b = load_embeddings(wd.require(wd.behavioral_embeddings, "embed"))
    return TaskData(log, splits, {ix.item_id: ix for ix in indices}, vocab, z_s, z_b)


def stage_train_initial(cfg: PipelineConfig, wd: Workdir) -> dict:
    data = _load_task_data(cfg, wd)
    base_vocab = Vocab()
    model = DecoderBackbone(cfg.model, len(base_vocab))
    model, vocab = extend_vocab(model, base_vocab, data.vocab.extended, seed=cfg.seed)
    result = initial_train(model, data, cfg.train, wd.checkpoints_dir, cfg.model)
    final = wd.initial_checkpoint
    assert Path(result.final_checkpoint) == final
    report_mod.plot_training_curve(
        wd.checkpoints_dir / "metrics.jsonl", wd.reports_dir / "training_initial.png"
    )
    return {
        "checkpoint": str(final),
        "optimizer_steps": result.optimizer_steps,
        "valid_recall@10": result.val_recall_history,
    }


def stage_train_anneal(cfg: PipelineConfig, wd: Workdir) -> dict:
    data = _load_task_data(cfg, wd)
    ckpt = wd.require(wd.initial_checkpoint, "train-initial")
    model, header, sets = build_model_from_checkpoint(
        ckpt, include_sets=("base", "adapter", "projector")
    )
    result = annealing_tune(
        model, sets["projector"], data, cfg.train, wd.checkpoints_dir, cfg.model
    )
    final = wd.annealed_checkpoint
    assert Path(result.final_checkpoint) == final
    return {
        "checkpoint": str(final),
        "optimizer_steps": result.optimizer_steps,
        "valid_recall@10": result.val_recall_history,
    }


def _inference_model(cfg: PipelineConfig, wd: Workdir, stage: str):
    if stage == "annealed":
        ckpt = wd.require(wd.annealed_checkpoint, "train-anneal")
    elif stage == "initial":
        ckpt = wd.require(wd.initial_checkpoint, "train-initial")
    else:
        raise ValueError(f"unknown stage {stage!r}")
    model, header, sets = build_model_from_checkpoint(
        ckpt, include_sets=("base", "adapter")
    )
    assert_inference_parameters(sets)
    return model, header


def stage_recommend(cfg: PipelineConfig, wd: Workdir, user: str, k: int,
                    stage: str = "annealed", use_adapter: bool | None = None) -> dict:
    set_determinism(cfg.seed, cfg.train.threads)
    data = _load_task_data(cfg, wd)
    model, _ = _inference_model(cfg, wd, stage)
    if user not in data.splits.train:
        raise ValueError(f"unknown user {user!r}")
    history = data.log.user_items(user)
    adapter = (stage == "annealed") if use_adapter is None else use_adapter
    trie = build_trie(list(data.index_map.values()))
    # Excluded history items consume beam slots; widen so k results survive.
    beam = max(cfg.eval.beam_size, k + min(len(history), cfg.eval.max_history))
    ranked = recommend(
        model, history, data.index_map, trie, data.vocab,
        k=k, beam_size=beam,
        max_history=cfg.eval.max_history, use_adapter=adapter, epoch_key=user,
    )
    fp = fingerprint({"stage": "recommend", "user": user, "k": k})
    out = wd.reports_dir / f"recommend_{user}.tsv"
    lines = [f"#genrec-recs v1 config={fp}", "user_id\trank\titem_id\tlog_prob"]
    for rank, (item, lp) in enumerate(ranked, start=1):
        lines.append(f"{user}\t{rank}\t{item}\t{lp:.6f}")
    out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return {
        "user": user,
        "items": [{"rank": r + 1, "item_id": it, "log_prob": lp}
                  for r, (it, lp) in enumerate(ranked)],
        "file": str(out),
    }


def stage_evaluate(cfg: PipelineConfig, wd: Workdir, stage: str = "annealed") -> dict:
    set_determinism(cfg.seed, cfg.train.threads)
    data = _load_task_data(cfg, wd)
    model, _ = _inference_model(cfg, wd, stage)
    trie = build_trie(list(data.index_map.values()))
    adapter = cfg.eval.use_adapter and stage == "annealed"
    fp = fingerprint({"stage": "evaluate", "on": stage,
                      **dataclasses.asdict(cfg.eval)})
    rep = evaluate(
        model, data.splits, data.index_map, trie, data.vocab,
        ks=cfg.eval.ks, beam_size=cfg.eval.beam_size, mode=cfg.eval.mode,
        max_history=cfg.eval.max_history, use_adapter=adapter,
        exclude_history=cfg.eval.exclude_history,
        fingerprint=fp, flags={"label": stage},
    )
    table = report_mod.write_table([rep], wd.reports_dir / f"metrics_{stage}.tsv", fp)
    series = report_mod.write_series([rep], wd.reports_dir / f"series_{stage}.tsv", fp)
    fig = report_mod.plot_metric_bars(
        [rep], wd.reports_dir / f"metrics_{stage}.png", metric="recall",
        k=max(cfg.eval.ks), title=f"{stage} checkpoint",
    )
    return {
        "recall": rep.recall, "ndcg": rep.ndcg, "n_users": rep.n_users,
        "table": str(table), "series": str(series), "figure": str(fig),
    }


def stage_ablate(cfg: PipelineConfig, wd: Workdir, plan_name: str = "composition",
                 seeds: tuple[int, ...] | None = None) -> dict:
    import dataclasses as dc

    from .ablation import ablation_run, component_plan, composition_plan, depth_plan
    from .backbone import ModelConfig

    log, _ = _load_filtered(wd)
    plans = {
        "composition": composition_plan,
        "components": component_plan,
        "depths": depth_plan,
    }
    if plan_name not in plans:
        raise ValueError(f"unknown plan {plan_name!r}; choose from {sorted(plans)}")
    plan = plans[plan_name]()
    seeds = tuple(seeds) if seeds else tuple(cfg.ablate.seeds)
    ab = cfg.ablate
    model_cfg = ModelConfig(
        d_model=ab.d_model, n_layers=ab.n_layers, n_heads=ab.n_heads,
        context_len=cfg.model.context_len, adapter_rank=ab.adapter_rank,
        seed=cfg.seed,
    )
    train_cfg = dc.replace(cfg.train, epochs=ab.epochs, anneal_epochs=ab.anneal_epochs)
    result = ablation_run(
        log, plan, cfg, wd.checkpoints_dir / "ablation", seeds,
        model_cfg=model_cfg, train_cfg=train_cfg,
    )
    fp = fingerprint({"stage": "ablate", "plan": plan_name, "seeds": seeds})
    table = report_mod.write_table(
        result.reports, wd.reports_dir / f"ablation_{plan_name}.tsv", fp
    )
    series = report_mod.write_series(
        result.reports, wd.reports_dir / f"ablation_{plan_name}_series.tsv", fp
    )
    k = max(cfg.eval.ks)
    if plan_name == "depths":
        fig = report_mod.plot_depth_sweep(
            result.reports, wd.reports_dir / "ablation_depths.png", k=k
        )
    else:
        fig = report_mod.plot_metric_bars(
            result.reports, wd.reports_dir / f"ablation_{plan_name}.png", k=k,
            title=f"{plan_name} ablation",
        )
    return {
        "plan": plan_name,
        "runs": len(result.reports),
        "table": str(table),
        "series": str(series),
        "figure": str(fig),
        "rows": [rep.row() for rep in result.reports],
    }
