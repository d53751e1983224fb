"""Training-example renderers for the three interaction-modeling subtasks.

Every example is a flat token sequence with a loss mask over the positions
the model must produce: the sequence-recommendation task (SRT) masks the
target item's index tokens and appends a trailing summary token whose hidden
state feeds the contrastive decompression head; semantic reconstruction maps
between an item's index and its title; preference understanding emits a
deterministic keyword summary of the history.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np
import torch

from .backbone import Vocab
from .corpus import InteractionLog, ItemRecord, Splits, truncate_history
from .embed import EmbeddingMatrix
from .indexer import CON_TOKEN, ItemIndex

SRT, SEM_RECON, PREF_UND = "SRT", "SemRecon", "PrefUnd"

TEMPLATES = {
    SRT: ["next:", "rec:", "continue:"],
    "SemReconI2T": ["title:", "describe:", "name:"],
    "SemReconT2I": ["find:", "index:", "locate:"],
    PREF_UND: ["likes:", "prefers:", "interests:"],
}

_STOPWORDS = {"the", "a", "an", "of", "and", "for", "with", "in", "on", "to"}


@dataclass
class TrainingExample:
    tokens: list[int]
    loss_mask: list[bool]
    task_tag: str
    con_position: int | None = None
    target_item: str | None = None

    def __post_init__(self):
        if len(self.tokens) != len(self.loss_mask):
            raise ValueError("tokens and loss_mask must have equal length")


def select_template(kind: str, user_key: str, epoch: int) -> str:
    options = TEMPLATES[kind]
    return options[zlib.crc32(f"{user_key}:{epoch}".encode()) % len(options)]


def _index_tokens(item_id: str, index_map: dict[str, ItemIndex], vocab: Vocab) -> list[int]:
    if item_id not in index_map:
        raise ValueError(f"item {item_id!r} has no index entry")
    return [vocab.id(t) for t in index_map[item_id].token_seq]


def build_srt_example(
    history: list[str],
    target: str,
    index_map: dict[str, ItemIndex],
    vocab: Vocab,
    template: str = "next:",
    max_history: int = 20,
    include_con: bool = True,
) -> TrainingExample:
    """Prompt, chronological history indices, target index (masked), summary token."""
    history = truncate_history(history, max_history)
    if not history:
        raise ValueError("SRT example needs a non-empty history")
    tokens = [vocab.bos_id] + vocab.encode_text(template)
    for item in history:
        tokens.extend(_index_tokens(item, index_map, vocab))
    mask = [False] * len(tokens)
    target_toks = _index_tokens(target, index_map, vocab)
    tokens.extend(target_toks)
    mask.extend([True] * len(target_toks))
    con_position = None
    if include_con:
        tokens.append(vocab.id(CON_TOKEN))
        mask.append(False)  # summary token carries no generation loss
        con_position = len(tokens) - 1
    return TrainingExample(tokens, mask, SRT, con_position, target)


def srt_inference_prompt(
    history: list[str],
    index_map: dict[str, ItemIndex],
    vocab: Vocab,
    template: str = "next:",
    max_history: int = 20,
) -> list[int]:
    """The SRT input at decode time: no target tokens, no summary token."""
    history = truncate_history(history, max_history)
    if not history:
        raise ValueError("cannot build a recommendation prompt from empty history")
    tokens = [vocab.bos_id] + vocab.encode_text(template)
    for item in history:
        tokens.extend(_index_tokens(item, index_map, vocab))
    return tokens


def build_semantic_reconstruction_example(
    item: ItemRecord,
    direction: str,
    index_map: dict[str, ItemIndex],
    vocab: Vocab,
    template: str | None = None,
) -> TrainingExample:
    """Map index -> title (text output) or title -> index (index output)."""
    if not item.title.strip():
        raise ValueError(f"item {item.item_id!r} has no title")
    if direction not in ("index_to_text", "text_to_index"):
        raise ValueError(f"unknown direction {direction!r}")
    idx_toks = _index_tokens(item.item_id, index_map, vocab)
    title_toks = vocab.encode_text(item.title)
    if direction == "index_to_text":
        template = template or TEMPLATES["SemReconI2T"][0]
        tokens = [vocab.bos_id] + vocab.encode_text(template) + idx_toks
        mask = [False] * len(tokens)
        tokens.extend(title_toks)
        mask.extend([True] * len(title_toks))
    else:
        template = template or TEMPLATES["SemReconT2I"][0]
        tokens = [vocab.bos_id] + vocab.encode_text(template) + title_toks
        mask = [False] * len(tokens)
        tokens.extend(idx_toks)
        mask.extend([True] * len(idx_toks))
    return TrainingExample(tokens, mask, SEM_RECON, None, item.item_id)


def preference_summary(history: list[str], items: dict[str, ItemRecord], top_k: int = 3) -> str:
    """Deterministic keyword summary: top-frequency title words, stable order."""
    counts: dict[str, int] = {}
    first_seen: dict[str, int] = {}
    pos = 0
    for item_id in history:
        for word in items[item_id].title.lower().split():
            word = word.strip(".,;:!?()[]")
            if len(word) < 3 or word in _STOPWORDS:
                continue
            counts[word] = counts.get(word, 0) + 1
            first_seen.setdefault(word, pos)
            pos += 1
    ranked = sorted(counts, key=lambda w: (-counts[w], first_seen[w]))
    return " ".join(ranked[:top_k])


def build_preference_example(
    user_id: str,
    history: list[str],
    index_map: dict[str, ItemIndex],
    items: dict[str, ItemRecord],
    vocab: Vocab,
    template: str | None = None,
    max_history: int = 20,
) -> TrainingExample:
    """History indices in, deterministic keyword summary out."""
    history = truncate_history(history, max_history)
    if not history:
        raise ValueError("preference example needs a non-empty history")
    template = template or TEMPLATES[PREF_UND][0]
    tokens = [vocab.bos_id] + vocab.encode_text(template)
    for item in history:
        tokens.extend(_index_tokens(item, index_map, vocab))
    mask = [False] * len(tokens)
    summary_toks = vocab.encode_text(preference_summary(history, items)) + [vocab.eos_id]
    tokens.extend(summary_toks)
    mask.extend([True] * len(summary_toks))
    return TrainingExample(tokens, mask, PREF_UND, None, None)


@dataclass
class GctBatch:
    """Contrastive targets for one SRT micro-batch.

    Row i's positive is (pos_s[i], pos_b[i]); other rows are in-batch
    negatives, except rows whose target item duplicates row i's (masked).
    """

    pos_s: torch.Tensor  # (B, d_s)
    pos_b: torch.Tensor  # (B, d_b)
    target_items: list[str]


def build_gct_batch(
    examples: list[TrainingExample], z_s: EmbeddingMatrix, z_b: EmbeddingMatrix
) -> GctBatch:
    s_idx = {it: j for j, it in enumerate(z_s.item_ids)}
    b_idx = {it: j for j, it in enumerate(z_b.item_ids)}
    targets = []
    for ex in examples:
        if ex.task_tag != SRT or ex.target_item is None:
            raise ValueError("GCT batches are built from SRT examples only")
        if ex.target_item not in s_idx or ex.target_item not in b_idx:
            raise ValueError(f"target {ex.target_item!r} missing from embedding matrices")
        targets.append(ex.target_item)
    pos_s = torch.from_numpy(np.stack([z_s.vectors[s_idx[t]] for t in targets]))
    pos_b = torch.from_numpy(np.stack([z_b.vectors[b_idx[t]] for t in targets]))
    return GctBatch(pos_s, pos_b, targets)


def epoch_examples(
    log: InteractionLog,
    splits: Splits,
    index_map: dict[str, ItemIndex],
    vocab: Vocab,
    epoch: int,
    seed: int = 0,
    ratios: tuple[int, int, int] = (4, 1, 1),
    max_history: int = 20,
    srt_only: bool = False,
    min_history: int = 1,
) -> list[TrainingExample]:
    """Deterministic example mix for one epoch.

    SRT examples enumerate every in-train prefix/target pair (history length
    >= min_history); the auxiliary task counts follow the configured ratios
    relative to the SRT count, within rounding.
    """
    rng = np.random.default_rng([seed, epoch])
    examples: list[TrainingExample] = []
    for u in splits.user_ids():
        seq = splits.train[u]
        template = select_template(SRT, u, epoch)
        for t in range(1, len(seq)):
            if t < min_history:
                continue
            examples.append(
                build_srt_example(
                    seq[:t], seq[t], index_map, vocab, template, max_history
                )
            )
    n_srt = len(examples)
    if not srt_only and n_srt:
        r_srt, r_sem, r_pref = ratios
        n_sem = int(round(n_srt * r_sem / r_srt))
        n_pref = int(round(n_srt * r_pref / r_srt))
        item_ids = log.item_ids()
        picks = rng.choice(len(item_ids), size=n_sem, replace=n_sem > len(item_ids))
        for j, pick in enumerate(picks):
            item = log.items[item_ids[int(pick)]]
            direction = "index_to_text" if (j + epoch) % 2 == 0 else "text_to_index"
            kind = "SemReconI2T" if direction == "index_to_text" else "SemReconT2I"
            examples.append(
                build_semantic_reconstruction_example(
                    item, direction, index_map, vocab,
                    select_template(kind, item.item_id, epoch),
                )
            )
        users = splits.user_ids()
        upicks = rng.choice(len(users), size=n_pref, replace=n_pref > len(users))
        for pick in upicks:
            u = users[int(pick)]
            examples.append(
                build_preference_example(
                    u, splits.train[u], index_map, log.items, vocab,
                    select_template(PREF_UND, u, epoch), max_history,
                )
            )
    order = rng.permutation(len(examples))
    return [examples[int(j)] for j in order]


def micro_batches(
    examples: list[TrainingExample], batch_size: int
) -> list[list[TrainingExample]]:
    """Task-homogeneous micro-batches, interleaved by stream position."""
    by_task: dict[str, list[tuple[int, TrainingExample]]] = {}
    for pos, ex in enumerate(examples):
        by_task.setdefault(ex.task_tag, []).append((pos, ex))
    keyed = []
    for task in sorted(by_task):
        group = by_task[task]
        for lo in range(0, len(group), batch_size):
            chunk = group[lo : lo + batch_size]
            keyed.append((chunk[0][0], [ex for _, ex in chunk]))
    keyed.sort(key=lambda t: t[0])
    return [batch for _, batch in keyed]


def dump_examples(examples: list[TrainingExample], path, vocab: Vocab) -> None:
    """Line-delimited inspection format."""
    import json
    from pathlib import Path

    lines = []
    for ex in examples:
        lines.append(
            json.dumps(
                {
                    "task": ex.task_tag,
                    "tokens": ex.tokens,
                    "loss_positions": [i for i, m in enumerate(ex.loss_mask) if m],
                    "con_position": ex.con_position,
                    "target_item": ex.target_item,
                },
                sort_keys=True,
            )
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
