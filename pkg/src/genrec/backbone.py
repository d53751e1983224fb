"""Decoder-only transformer substrate with extended vocabulary.

Parameters split into disjoint named sets: the base network, low-rank
adapter deltas on attention query/value and the feed-forward up-projection
(toggleable at forward time, removable without touching the base), and the
decompression projectors owned by the training stage.  Checkpoints store
named tensors under a versioned header that records which sets are present.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"
N_BYTE_TOKENS = 256
PAD_ID = N_BYTE_TOKENS  # ids are fixed: bytes, then pad/bos/eos, then extensions


class Vocab:
    """Byte-level base tokens plus specials plus appended index tokens.

    Ids are dense and stable: bytes 0..255, then pad/bos/eos, then extended
    tokens in insertion order.
    """

    def __init__(self, extended: list[str] | None = None):
        self.specials = [PAD, BOS, EOS]
        self.extended: list[str] = []
        self._ids: dict[str, int] = {
            name: N_BYTE_TOKENS + j for j, name in enumerate(self.specials)
        }
        for name in extended or []:
            self._add(name)

    def _add(self, name: str) -> None:
        if name in self._ids:
            raise ValueError(f"duplicate token name {name!r}")
        self._ids[name] = len(self)
        self.extended.append(name)

    def __len__(self) -> int:
        return N_BYTE_TOKENS + len(self.specials) + len(self.extended)

    def id(self, name: str) -> int:
        return self._ids[name]

    @property
    def pad_id(self) -> int:
        return self._ids[PAD]

    @property
    def bos_id(self) -> int:
        return self._ids[BOS]

    @property
    def eos_id(self) -> int:
        return self._ids[EOS]

    def encode_text(self, text: str) -> list[int]:
        return list(text.encode("utf-8"))

    def decode_text(self, ids: list[int]) -> str:
        return bytes(i for i in ids if i < N_BYTE_TOKENS).decode("utf-8", "replace")

    def extend(self, new_tokens: list[str]) -> "Vocab":
        """New vocabulary with `new_tokens` appended; existing ids unchanged."""
        out = Vocab(self.extended.copy())
        for name in new_tokens:
            out._add(name)
        return out

    def to_json(self) -> str:
        return json.dumps(
            {"version": 1, "byte_base": N_BYTE_TOKENS, "specials": self.specials,
             "extended": self.extended},
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "Vocab":
        rec = json.loads(text)
        if rec.get("version") != 1:
            raise ValueError(f"unsupported vocab version {rec.get('version')}")
        return cls(rec["extended"])

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))

    def hash(self) -> str:
        return hashlib.blake2b(self.to_json().encode(), digest_size=8).hexdigest()


@dataclass
class ModelConfig:
    d_model: int = 256
    n_layers: int = 4
    n_heads: int = 4
    context_len: int = 512
    adapter_rank: int = 8
    dropout: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")

    @property
    def d_ff(self) -> int:
        return 4 * self.d_model


class LowRankAdapter(nn.Module):
    """Additive delta B @ A on a linear map; B starts at zero so a fresh
    adapter is an exact no-op."""

    def __init__(self, d_in: int, d_out: int, rank: int):
        super().__init__()
        self.down = nn.Parameter(torch.randn(rank, d_in) * 0.02)
        self.up = nn.Parameter(torch.zeros(d_out, rank))

    def forward(self, x):
        return x @ self.down.T @ self.up.T


class CausalSelfAttention(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.d_head = cfg.d_model // cfg.n_heads
        self.q_proj = nn.Linear(cfg.d_model, cfg.d_model)
        self.k_proj = nn.Linear(cfg.d_model, cfg.d_model)
        self.v_proj = nn.Linear(cfg.d_model, cfg.d_model)
        self.o_proj = nn.Linear(cfg.d_model, cfg.d_model)
        self.adapter_q = LowRankAdapter(cfg.d_model, cfg.d_model, cfg.adapter_rank)
        self.adapter_v = LowRankAdapter(cfg.d_model, cfg.d_model, cfg.adapter_rank)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x, use_adapter=False, past=None):
        # x: (B, T, d); past: optional (k, v) of shape (B, H, T_past, dh)
        B, T, d = x.shape
        q = self.q_proj(x)
        k = self.k_proj(x)
        v = self.v_proj(x)
        if use_adapter:
            q = q + self.adapter_q(x)
            v = v + self.adapter_v(x)

        def heads(t):
            return t.view(B, T, self.n_heads, self.d_head).transpose(1, 2)

        q, k, v = heads(q), heads(k), heads(v)
        if past is not None:
            pk, pv = past
            k = torch.cat([pk, k], dim=2)
            v = torch.cat([pv, v], dim=2)
        t_total = k.shape[2]
        offset = t_total - T
        att = (q @ k.transpose(-2, -1)) / math.sqrt(self.d_head)
        # Query at global position offset+i may attend keys <= offset+i.
        q_pos = torch.arange(T).unsqueeze(1) + offset
        k_pos = torch.arange(t_total).unsqueeze(0)
        att = att.masked_fill(k_pos > q_pos, float("-inf"))
        att = F.softmax(att, dim=-1)
        att = self.dropout(att)
        y = att @ v
        y = y.transpose(1, 2).contiguous().view(B, T, d)
        return self.o_proj(y), (k, v)


class FeedForward(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.fc_up = nn.Linear(cfg.d_model, cfg.d_ff)
        self.fc_down = nn.Linear(cfg.d_ff, cfg.d_model)
        self.adapter_up = LowRankAdapter(cfg.d_model, cfg.d_ff, cfg.adapter_rank)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x, use_adapter=False):
        h = self.fc_up(x)
        if use_adapter:
            h = h + self.adapter_up(x)
        return self.dropout(self.fc_down(F.gelu(h)))


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.attn = CausalSelfAttention(cfg)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.ff = FeedForward(cfg)

    def forward(self, x, use_adapter=False, past=None):
        a, kv = self.attn(self.ln1(x), use_adapter=use_adapter, past=past)
        x = x + a
        x = x + self.ff(self.ln2(x), use_adapter=use_adapter)
        return x, kv


class DecoderBackbone(nn.Module):
    """Pre-LN causal transformer over the extended vocabulary."""

    def __init__(self, cfg: ModelConfig, vocab_size: int):
        super().__init__()
        torch.manual_seed(cfg.seed)
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.tok_emb = nn.Embedding(vocab_size, cfg.d_model)
        self.pos_emb = nn.Embedding(cfg.context_len, cfg.d_model)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(cfg.d_model)
        self.head = nn.Linear(cfg.d_model, vocab_size, bias=False)
        nn.init.normal_(self.tok_emb.weight, std=0.02)
        nn.init.normal_(self.pos_emb.weight, std=0.02)

    def forward(self, tokens, use_adapter=False, past=None):
        """Next-token logits and final hidden states.

        tokens: (T,) or (B, T) int64.  Returns (logits, hidden, new_past)
        with logits (.., T, |V|) and hidden (.., T, d_model).  `past` carries
        per-layer attention state for incremental decoding.
        """
        squeeze = tokens.dim() == 1
        if squeeze:
            tokens = tokens.unsqueeze(0)
        B, T = tokens.shape
        offset = past[0][0].shape[2] if past is not None else 0
        if T + offset > self.cfg.context_len:
            raise ValueError(
                f"sequence length {T + offset} exceeds context_len "
                f"{self.cfg.context_len}"
            )
        if tokens.numel() and (tokens.max() >= self.vocab_size or tokens.min() < 0):
            raise ValueError(
                f"token id out of range for vocab of size {self.vocab_size}"
            )
        pos = torch.arange(offset, offset + T, device=tokens.device)
        x = self.tok_emb(tokens) + self.pos_emb(pos).unsqueeze(0)
        new_past = []
        for layer, block in enumerate(self.blocks):
            x, kv = block(
                x, use_adapter=use_adapter, past=past[layer] if past else None
            )
            new_past.append(kv)
        hidden = self.ln_f(x)
        logits = self.head(hidden)
        if squeeze:
            return logits.squeeze(0), hidden.squeeze(0), new_past
        return logits, hidden, new_past

    def base_parameters(self) -> dict[str, torch.Tensor]:
        return {
            name: p for name, p in self.named_parameters() if "adapter" not in name
        }

    def adapter_parameters(self) -> dict[str, torch.Tensor]:
        return {name: p for name, p in self.named_parameters() if "adapter" in name}


def extend_vocab(
    model: DecoderBackbone, vocab: Vocab, new_tokens: list[str], seed: int = 0
) -> tuple[DecoderBackbone, Vocab]:
    """Append tokens; existing embedding/output rows are preserved bitwise.

    New rows start at the mean of existing rows plus small seeded noise.
    """
    new_vocab = vocab.extend(new_tokens)  # raises on duplicates
    n_new = len(new_tokens)
    if n_new == 0:
        return model, new_vocab
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for attr in ("tok_emb", "head"):
            weight = getattr(model, attr).weight
            mean = weight.mean(dim=0, keepdim=True)
            noise = torch.randn(n_new, weight.shape[1], generator=gen) * 0.02
            grown = torch.cat([weight, mean + noise.to(weight.dtype)], dim=0)
            if attr == "tok_emb":
                model.tok_emb = nn.Embedding.from_pretrained(grown, freeze=False)
            else:
                head = nn.Linear(weight.shape[1], grown.shape[0], bias=False)
                head.weight = nn.Parameter(grown)
                model.head = head
    model.vocab_size = len(new_vocab)
    return model, new_vocab


def adamw_update(param, grad, m, v, step, lr, weight_decay, betas=(0.9, 0.999), eps=1e-8):
    """One decoupled-weight-decay Adam update; returns (param, m, v).

    param <- param*(1 - lr*wd) - lr * m_hat / (sqrt(v_hat) + eps)
    """
    b1, b2 = betas
    m = b1 * m + (1.0 - b1) * grad
    v = b2 * v + (1.0 - b2) * grad * grad
    m_hat = m / (1.0 - b1**step)
    v_hat = v / (1.0 - b2**step)
    param = param * (1.0 - lr * weight_decay) - lr * m_hat / (v_hat.sqrt() + eps)
    return param, m, v


class AdamW:
    """Deterministic AdamW over a named-parameter dict."""

    def __init__(self, params: dict[str, torch.Tensor], lr: float,
                 weight_decay: float = 0.0, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: torch.zeros_like(p) for k, p in params.items()}
        self.v = {k: torch.zeros_like(p) for k, p in params.items()}

    def step(self) -> None:
        self.step_count += 1
        with torch.no_grad():
            for name, p in self.params.items():
                if p.grad is None:
                    continue
                if torch.isnan(p.grad).any():
                    raise ValueError(f"NaN gradient for tensor {name!r}")
                new_p, self.m[name], self.v[name] = adamw_update(
                    p, p.grad, self.m[name], self.v[name], self.step_count,
                    self.lr, self.weight_decay, self.betas, self.eps,
                )
                p.copy_(new_p)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


_CKPT_MAGIC = b"GRCKPT01"
_DTYPES = {torch.float32: 0, torch.float64: 1, torch.int64: 2}
_DTYPES_REV = {v: k for k, v in _DTYPES.items()}


def save_checkpoint(path, model_config: ModelConfig, vocab: Vocab,
                    sets: dict[str, dict[str, torch.Tensor]],
                    meta: dict | None = None) -> None:
    """Write named-tensor sets under a versioned header.

    `sets` maps a set name ("base", "adapter", "projector") to named tensors.
    """
    path = Path(path)
    base = sets.get("base", {})
    vocab_size = (
        base["tok_emb.weight"].shape[0] if "tok_emb.weight" in base else len(vocab)
    )
    header = {
        "version": 1,
        "config": asdict(model_config),
        "vocab_hash": vocab.hash(),
        "vocab_size": vocab_size,
        "sets": sorted(sets),
        "meta": meta or {},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    entries = []
    for set_name in sorted(sets):
        for tensor_name in sorted(sets[set_name]):
            entries.append((f"{set_name}/{tensor_name}", sets[set_name][tensor_name]))
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(struct.pack("<I", len(entries)))
        for name, tensor in entries:
            data = tensor.detach().contiguous().cpu()
            raw = data.numpy().tobytes()
            name_b = name.encode("utf-8")
            fh.write(struct.pack("<H", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<BB", _DTYPES[data.dtype], data.dim()))
            fh.write(struct.pack(f"<{data.dim()}I", *data.shape))
            fh.write(struct.pack("<Q", len(raw)))
            fh.write(raw)


def load_checkpoint(path) -> tuple[dict, dict[str, dict[str, torch.Tensor]]]:
    """Read (header, sets) back from `save_checkpoint` output."""
    import numpy as np

    path = Path(path)
    with open(path, "rb") as fh:
        if fh.read(8) != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        if header["version"] != 1:
            raise ValueError(f"{path}: unsupported checkpoint version")
        (count,) = struct.unpack("<I", fh.read(4))
        sets: dict[str, dict[str, torch.Tensor]] = {s: {} for s in header["sets"]}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode("utf-8")
            dtype_code, ndim = struct.unpack("<BB", fh.read(2))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            (nbytes,) = struct.unpack("<Q", fh.read(8))
            raw = fh.read(nbytes)
            dtype = _DTYPES_REV[dtype_code]
            np_dtype = {0: np.float32, 1: np.float64, 2: np.int64}[dtype_code]
            arr = np.frombuffer(raw, dtype=np_dtype).reshape(shape).copy()
            set_name, tensor_name = name.split("/", 1)
            sets[set_name][tensor_name] = torch.from_numpy(arr).to(dtype)
    return header, sets


def build_model_from_checkpoint(path, include_sets=("base", "adapter")):
    """Reconstruct (model, header, sets); inference callers exclude projectors."""
    header, sets = load_checkpoint(path)
    cfg = ModelConfig(**header["config"])
    model = DecoderBackbone(cfg, header["vocab_size"])
    state = dict(sets.get("base", {}))
    if "adapter" in include_sets and "adapter" in sets:
        state.update(sets["adapter"])
    missing = model.load_state_dict(state, strict=False)
    unexpected = [k for k in missing.unexpected_keys]
    if unexpected:
        raise ValueError(f"checkpoint tensors not in model: {unexpected}")
    return model, header, {k: v for k, v in sets.items() if k in include_sets or k == "base"}


def set_determinism(seed: int, threads: int = 1) -> None:
    """Seed torch and pin the thread count; call at every stage entry."""
    torch.manual_seed(seed)
    torch.set_num_threads(threads)
