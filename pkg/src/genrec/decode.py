"""Trie-constrained beam search over item-index tokens.

At every step the next-token candidates are exactly the children of each
beam's trie node, so no emitted sequence can leave the index.  Scores are
sums of token log-probabilities (no length normalization: complete paths
differ in length by at most the disambiguation suffix).  Finished paths are
re-scored with a plain full forward so reported scores are independent of
the incremental attention cache, and ties break on the lexicographic token
sequence.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

from .backbone import DecoderBackbone, Vocab
from .indexer import IndexTrie, ItemIndex
from .tasks import SRT, select_template, srt_inference_prompt


def sequence_log_prob(model, prompt_tokens: list[int], gen_tokens: list[int],
                      use_adapter: bool = False) -> float:
    """Sum of log p(gen_i | prompt, gen_<i) from one teacher-forced forward."""
    with torch.no_grad():
        seq = torch.tensor(prompt_tokens + gen_tokens)
        logits, _, _ = model(seq, use_adapter=use_adapter)
        log_probs = F.log_softmax(logits, dim=-1)
        total = 0.0
        for j, tok in enumerate(gen_tokens):
            pos = len(prompt_tokens) + j - 1  # logits at pos predict position pos+1
            total += float(log_probs[pos, tok])
    return total


def constrained_beam_search(
    model: DecoderBackbone,
    prompt_tokens: list[int],
    trie: IndexTrie,
    vocab: Vocab,
    beam_size: int,
    use_adapter: bool = False,
    rescore: bool = True,
) -> list[tuple[str, float, list[str]]]:
    """Up to beam_size (item_id, log_prob, token_names), best first."""
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    if not trie.root.children:
        raise ValueError("trie is empty")

    with torch.no_grad():
        prompt = torch.tensor(prompt_tokens)
        logits, _, past = model(prompt.unsqueeze(0), use_adapter=use_adapter)
        step_logp = F.log_softmax(logits[0, -1], dim=-1).unsqueeze(0)  # (1, V)

        # Beams: (trie node, token names so far, log prob, row into step state).
        active = [(trie.root, [], 0.0, 0)]
        finished: list[tuple[float, list[str], str]] = []
        while active:
            candidates = []
            for node, names, lp, row in active:
                for tok_name, child in node.children.items():
                    cand_lp = lp + float(step_logp[row, vocab.id(tok_name)])
                    candidates.append((cand_lp, names + [tok_name], child, row))
            candidates.sort(key=lambda c: (-c[0], c[1]))
            candidates = candidates[:beam_size]

            next_active = []
            for lp, names, node, row in candidates:
                if node.is_leaf:
                    finished.append((lp, names, node.item_id))
                else:
                    next_active.append((node, names, lp, row))
            if not next_active:
                break

            rows = torch.tensor([row for _, _, _, row in next_active])
            new_tokens = torch.tensor(
                [[vocab.id(names[-1])] for _, names, _, _ in next_active]
            )
            sel_past = [
                (k.index_select(0, rows), v.index_select(0, rows)) for k, v in past
            ]
            logits, _, past = model(new_tokens, use_adapter=use_adapter, past=sel_past)
            step_logp = F.log_softmax(logits[:, -1], dim=-1)
            active = [
                (node, names, lp, r)
                for r, (node, names, lp, _) in enumerate(next_active)
            ]

        if rescore:
            finished = [
                (
                    sequence_log_prob(
                        model, prompt_tokens, [vocab.id(n) for n in names],
                        use_adapter=use_adapter,
                    ),
                    names,
                    item_id,
                )
                for lp, names, item_id in finished
            ]
        finished.sort(key=lambda f: (-f[0], f[1]))
    return [(item_id, lp, names) for lp, names, item_id in finished[:beam_size]]


def recommend(
    model: DecoderBackbone,
    history: list[str],
    index_map: dict[str, ItemIndex],
    trie: IndexTrie,
    vocab: Vocab,
    k: int,
    beam_size: int = 20,
    max_history: int = 20,
    exclude_history: bool = True,
    use_adapter: bool = False,
    epoch_key: str = "",
) -> list[tuple[str, float]]:
    """Top-k items for a user history via the SRT prompt and constrained beam."""
    if not history:
        raise ValueError("cannot recommend from an empty history")
    if k > beam_size:
        raise ValueError(f"k={k} exceeds beam_size={beam_size}")
    for item in history:
        if item not in index_map:
            raise ValueError(f"history item {item!r} has no index entry")
    template = select_template(SRT, epoch_key, 0)
    prompt = srt_inference_prompt(history, index_map, vocab, template, max_history)
    ranked = constrained_beam_search(
        model, prompt, trie, vocab, beam_size, use_adapter=use_adapter
    )
    seen = set(history) if exclude_history else set()
    out = []
    for item_id, lp, _ in ranked:
        if item_id in seen:
            continue
        out.append((item_id, lp))
        if len(out) == k:
            break
    return out


def assert_inference_parameters(sets: dict[str, dict]) -> None:
    """Inference parameter sets must not carry decompression projectors."""
    if "projector" in sets:
        raise ValueError("projector tensors are training-only; drop them for inference")
