"""Loss assembly and the two-stage training loop.

Stage one trains the base network and the decompression guidance projectors
jointly on the mixed task stream; the composed objective is the masked
generation loss plus, for sequence-recommendation batches only, the weighted
semantic/behavioral contrastive terms.  Stage two (annealing) freezes
everything from stage one and tunes only the additive adapter on restricted
sequence-recommendation data.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import tasks as task_mod
from .backbone import (
    PAD_ID,
    AdamW,
    DecoderBackbone,
    ModelConfig,
    Vocab,
    save_checkpoint,
    set_determinism,
)
from .corpus import InteractionLog, Splits, truncate_history
from .embed import EmbeddingMatrix
from .indexer import ItemIndex
from .tasks import SRT, GctBatch, TrainingExample


class TrainingDiverged(RuntimeError):
    """Loss went NaN; carries the last checkpoint that was still healthy."""

    def __init__(self, message: str, last_good_checkpoint=None):
        super().__init__(message)
        self.last_good_checkpoint = last_good_checkpoint


class GuidanceProjector(nn.Module):
    """Two-layer map from backbone hidden size to an embedding space.

    Used only while training; never loaded at inference.
    """

    def __init__(self, d_model: int, d_out: int):
        super().__init__()
        self.fc1 = nn.Linear(d_model, d_model)
        self.fc2 = nn.Linear(d_model, d_out)

    def forward(self, x):
        return self.fc2(torch.tanh(self.fc1(x)))


@dataclass
class LossBreakdown:
    l_gen: float
    l_con_s: float = 0.0
    l_con_b: float = 0.0
    lambda1: float = 0.0
    lambda2: float = 0.0
    i_srt: int = 0

    @property
    def total(self) -> float:
        return self.l_gen + self.i_srt * (
            self.lambda1 * self.l_con_s + self.lambda2 * self.l_con_b
        )


def total_loss(l_gen, l_con_s=0.0, l_con_b=0.0, lambda1=0.0, lambda2=0.0, i_srt=0) -> LossBreakdown:
    """Compose the per-batch objective; non-SRT batches contribute l_gen only."""
    return LossBreakdown(l_gen, l_con_s, l_con_b, lambda1, lambda2, int(i_srt))


def generation_loss(logits: torch.Tensor, target_tokens: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean negative log-likelihood over masked positions.

    logits: (N, |V|) rows aligned with target_tokens (N,); mask (N,) selects
    the positions that carry loss.
    """
    mask = mask.bool()
    if not mask.any():
        raise ValueError("generation loss needs at least one masked position")
    log_probs = F.log_softmax(logits[mask], dim=-1)
    return -log_probs.gather(1, target_tokens[mask].unsqueeze(1)).mean()


def duplicate_mask(keys: list) -> torch.Tensor:
    """(B, B) bool where True marks a non-self candidate sharing row i's key."""
    n = len(keys)
    mask = torch.zeros((n, n), dtype=torch.bool)
    for i in range(n):
        for j in range(n):
            if i != j and keys[i] == keys[j]:
                mask[i, j] = True
    return mask


def contrastive_loss(
    con_hidden: torch.Tensor,
    projector,
    positives: torch.Tensor,
    temperature: float,
    target_keys: list | None = None,
) -> torch.Tensor:
    """One-directional InfoNCE against in-batch candidates.

    Row i's projected summary state is scored by cosine similarity / tau
    against every batch positive; the label is its own row.  Candidates whose
    key duplicates row i's are masked out of i's negatives.  A batch of one
    has no negatives and scores 0 by convention.
    """
    n = con_hidden.shape[0]
    if n < 1:
        raise ValueError("contrastive loss needs a non-empty batch")
    if positives.shape[0] != n:
        raise ValueError("positives must align with the batch index-wise")
    if n == 1:
        return con_hidden.sum() * 0.0
    q = projector(con_hidden)
    if q.shape[-1] != positives.shape[-1]:
        raise ValueError(
            f"projection dim {q.shape[-1]} != embedding dim {positives.shape[-1]}"
        )
    q = F.normalize(q, dim=-1)
    z = F.normalize(positives.to(q.dtype), dim=-1)
    sims = q @ z.T / temperature
    if target_keys is not None:
        sims = sims.masked_fill(duplicate_mask(target_keys), float("-inf"))
    labels = torch.arange(n)
    return F.cross_entropy(sims, labels)


@dataclass
class TrainConfig:
    """Desk-scale defaults; `full_scale()` carries the reference settings."""

    lr: float = 1e-3
    weight_decay: float = 0.01
    micro_batch: int = 16
    accum_steps: int = 1
    lambda1: float = 0.1
    lambda2: float = 0.1
    temperature: float = 0.07
    epochs: int = 8
    seed: int = 0
    ratios: tuple[int, int, int] = (4, 1, 1)
    max_history: int = 20
    gct: bool = True
    valid_users: int = 64
    valid_beam: int = 20
    min_anneal_history: int = 5
    anneal_epochs: int = 4
    threads: int = 1

    @property
    def effective_batch(self) -> int:
        return self.micro_batch * self.accum_steps

    @classmethod
    def full_scale(cls) -> "TrainConfig":
        # Reference optimizer settings: AdamW lr 5e-5, weight decay 0.01,
        # overall batch 128 via accumulation.
        return cls(lr=5e-5, weight_decay=0.01, micro_batch=8, accum_steps=16)


@dataclass
class TaskData:
    """Everything the trainers need besides the model."""

    log: InteractionLog
    splits: Splits
    index_map: dict[str, ItemIndex]
    vocab: Vocab
    z_s: EmbeddingMatrix
    z_b: EmbeddingMatrix


@dataclass
class TrainResult:
    final_checkpoint: Path
    best_checkpoint: Path
    optimizer_steps: int
    val_recall_history: list[float] = field(default_factory=list)


def collate(examples: list[TrainingExample], pad_id: int):
    """Right-pad to the batch max length; positions after the data carry no loss."""
    width = max(len(ex.tokens) for ex in examples)
    toks = torch.full((len(examples), width), pad_id, dtype=torch.long)
    mask = torch.zeros((len(examples), width), dtype=torch.bool)
    for r, ex in enumerate(examples):
        toks[r, : len(ex.tokens)] = torch.tensor(ex.tokens)
        mask[r, : len(ex.loss_mask)] = torch.tensor(ex.loss_mask)
    return toks, mask


def batch_losses(
    model: DecoderBackbone,
    batch: list[TrainingExample],
    proj_s: GuidanceProjector | None,
    proj_b: GuidanceProjector | None,
    gct_batch: GctBatch | None,
    cfg: TrainConfig,
    use_adapter: bool = False,
):
    """(torch total, LossBreakdown) for one task-homogeneous micro-batch."""
    toks, mask = collate(batch, PAD_ID)
    logits, hidden, _ = model(toks, use_adapter=use_adapter)
    # Position t is predicted from the prefix ending at t-1.
    l_gen = generation_loss(
        logits[:, :-1].reshape(-1, logits.shape[-1]),
        toks[:, 1:].reshape(-1),
        mask[:, 1:].reshape(-1),
    )
    is_srt = batch[0].task_tag == SRT
    apply_gct = is_srt and cfg.gct and gct_batch is not None and len(batch) > 1
    if apply_gct:
        con_hidden = torch.stack(
            [hidden[r, ex.con_position] for r, ex in enumerate(batch)]
        )
        l_s = contrastive_loss(
            con_hidden, proj_s, gct_batch.pos_s, cfg.temperature, gct_batch.target_items
        )
        l_b = contrastive_loss(
            con_hidden, proj_b, gct_batch.pos_b, cfg.temperature, gct_batch.target_items
        )
        torch_total = l_gen + cfg.lambda1 * l_s + cfg.lambda2 * l_b
        breakdown = total_loss(
            l_gen.item(), l_s.item(), l_b.item(), cfg.lambda1, cfg.lambda2, 1
        )
    else:
        torch_total = l_gen
        breakdown = total_loss(l_gen.item(), i_srt=1 if is_srt else 0)
    return torch_total, breakdown


def _validation_recall(model, data: TaskData, cfg: TrainConfig, use_adapter: bool) -> float:
    from .decode import recommend
    from .metrics import recall_at_k
    from .indexer import build_trie

    trie = build_trie(list(data.index_map.values()))
    users = data.splits.user_ids()[: cfg.valid_users]
    k = min(10, cfg.valid_beam)
    hits = []
    for u in users:
        history = truncate_history(data.splits.train[u], cfg.max_history)
        ranked = recommend(
            model, history, data.index_map, trie, data.vocab,
            k=k, beam_size=cfg.valid_beam, epoch_key=u, use_adapter=use_adapter,
        )
        hits.append(recall_at_k([r[0] for r in ranked], data.splits.valid[u], k))
    return float(np.mean(hits)) if hits else 0.0


def _log_record(log_fh, record: dict) -> None:
    if log_fh is not None:
        log_fh.write(json.dumps(record, sort_keys=True) + "\n")
        log_fh.flush()


def initial_train(
    model: DecoderBackbone,
    data: TaskData,
    cfg: TrainConfig,
    out_dir,
    model_cfg: ModelConfig,
) -> TrainResult:
    """Stage one: train base + projectors on the mixed task stream."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    set_determinism(cfg.seed, cfg.threads)
    proj_s = GuidanceProjector(model_cfg.d_model, data.z_s.d)
    proj_b = GuidanceProjector(model_cfg.d_model, data.z_b.d)

    params = {f"model/{k}": p for k, p in model.base_parameters().items()}
    params.update({f"proj_s/{k}": p for k, p in proj_s.named_parameters()})
    params.update({f"proj_b/{k}": p for k, p in proj_b.named_parameters()})
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)

    def projector_sets():
        merged = {f"s.{k}": v for k, v in proj_s.named_parameters()}
        merged.update({f"b.{k}": v for k, v in proj_b.named_parameters()})
        return merged

    def save(path, meta):
        save_checkpoint(
            path, model_cfg, data.vocab,
            {
                "base": model.base_parameters(),
                "adapter": model.adapter_parameters(),
                "projector": projector_sets(),
            },
            meta=meta,
        )

    log_fh = open(out_dir / "metrics.jsonl", "w", encoding="utf-8")
    best_recall, best_path = -1.0, out_dir / "best.ckpt"
    last_good = None
    val_history = []
    try:
        for epoch in range(cfg.epochs):
            examples = task_mod.epoch_examples(
                data.log, data.splits, data.index_map, data.vocab,
                epoch=epoch, seed=cfg.seed, ratios=cfg.ratios,
                max_history=cfg.max_history,
            )
            batches = task_mod.micro_batches(examples, cfg.micro_batch)
            pending = 0
            for step, batch in enumerate(batches):
                gct = (
                    task_mod.build_gct_batch(batch, data.z_s, data.z_b)
                    if batch[0].task_tag == SRT and cfg.gct and len(batch) > 1
                    else None
                )
                torch_total, breakdown = batch_losses(
                    model, batch, proj_s, proj_b, gct, cfg, use_adapter=False
                )
                if not math.isfinite(breakdown.total):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch} step {step}", last_good
                    )
                (torch_total / cfg.accum_steps).backward()
                pending += 1
                if pending == cfg.accum_steps:
                    opt.step()
                    opt.zero_grad()
                    pending = 0
                    _log_record(
                        log_fh,
                        {"stage": "initial", "epoch": epoch, "step": opt.step_count,
                         "loss": breakdown.total, "l_gen": breakdown.l_gen,
                         "l_con_s": breakdown.l_con_s, "l_con_b": breakdown.l_con_b},
                    )
            if pending:
                opt.step()
                opt.zero_grad()
            epoch_path = out_dir / f"initial_epoch{epoch}.ckpt"
            save(epoch_path, {"stage": "initial", "epoch": epoch})
            last_good = epoch_path
            recall = _validation_recall(model, data, cfg, use_adapter=False)
            val_history.append(recall)
            _log_record(
                log_fh,
                {"stage": "initial", "epoch": epoch, "valid_recall@10": recall},
            )
            if recall > best_recall:
                best_recall = recall
                save(best_path, {"stage": "initial", "epoch": epoch,
                                 "valid_recall@10": recall})
    finally:
        log_fh.close()
    final = out_dir / "initial.ckpt"
    save(final, {"stage": "initial", "epochs": cfg.epochs,
                 "valid_recall_history": val_history})
    if best_recall < 0:
        save(best_path, {"stage": "initial", "epochs": cfg.epochs})
    return TrainResult(final, best_path, opt.step_count, val_history)


def high_grade_examples(
    data: TaskData, cfg: TrainConfig, epoch: int
) -> list[TrainingExample]:
    """SRT-only stream restricted to histories of at least min_anneal_history."""
    return task_mod.epoch_examples(
        data.log, data.splits, data.index_map, data.vocab,
        epoch=epoch, seed=cfg.seed + 1000, max_history=cfg.max_history,
        srt_only=True, min_history=cfg.min_anneal_history,
    )


def annealing_tune(
    model: DecoderBackbone,
    projector_tensors: dict[str, torch.Tensor],
    data: TaskData,
    cfg: TrainConfig,
    out_dir,
    model_cfg: ModelConfig,
) -> TrainResult:
    """Stage two: adapter-only tuning on restricted SRT data.

    Base and projector tensors are frozen; any gradient reaching them is a
    hard error.  The objective is generation loss only.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    set_determinism(cfg.seed, cfg.threads)

    base = model.base_parameters()
    adapters = model.adapter_parameters()
    for p in base.values():
        p.requires_grad_(False)
    for p in adapters.values():
        p.requires_grad_(True)
    opt = AdamW(adapters, lr=cfg.lr, weight_decay=cfg.weight_decay)

    def save(path, meta):
        save_checkpoint(
            path, model_cfg, data.vocab,
            {"base": base, "adapter": adapters, "projector": projector_tensors},
            meta=meta,
        )

    log_fh = open(out_dir / "metrics_anneal.jsonl", "w", encoding="utf-8")
    last_good = None
    val_history = []
    best_recall, best_path = -1.0, out_dir / "anneal_best.ckpt"
    try:
        for epoch in range(cfg.anneal_epochs):
            examples = high_grade_examples(data, cfg, epoch)
            if not examples:
                raise ValueError(
                    "no high-grade SRT examples; lower min_anneal_history"
                )
            batches = task_mod.micro_batches(examples, cfg.micro_batch)
            pending = 0
            for step, batch in enumerate(batches):
                torch_total, breakdown = batch_losses(
                    model, batch, None, None, None, cfg, use_adapter=True
                )
                if not math.isfinite(breakdown.total):
                    raise TrainingDiverged(
                        f"non-finite loss at anneal epoch {epoch} step {step}",
                        last_good,
                    )
                (torch_total / cfg.accum_steps).backward()
                for name, p in base.items():
                    if p.grad is not None:
                        raise RuntimeError(
                            f"gradient routed to frozen base tensor {name!r}"
                        )
                pending += 1
                if pending == cfg.accum_steps:
                    opt.step()
                    opt.zero_grad()
                    pending = 0
                    _log_record(
                        log_fh,
                        {"stage": "anneal", "epoch": epoch, "step": opt.step_count,
                         "loss": breakdown.total},
                    )
            if pending:
                opt.step()
                opt.zero_grad()
            epoch_path = out_dir / f"anneal_epoch{epoch}.ckpt"
            save(epoch_path, {"stage": "anneal", "epoch": epoch})
            last_good = epoch_path
            recall = _validation_recall(model, data, cfg, use_adapter=True)
            val_history.append(recall)
            _log_record(
                log_fh, {"stage": "anneal", "epoch": epoch, "valid_recall@10": recall}
            )
            if recall > best_recall:
                best_recall = recall
                save(best_path, {"stage": "anneal", "epoch": epoch,
                                 "valid_recall@10": recall})
    finally:
        log_fh.close()
    final = out_dir / "annealed.ckpt"
    save(final, {"stage": "anneal", "epochs": cfg.anneal_epochs,
                 "valid_recall_history": val_history})
    if best_recall < 0:
        save(best_path, {"stage": "anneal", "epochs": cfg.anneal_epochs})
    return TrainResult(final, best_path, opt.step_count, val_history)
