"""Small decoder-only transformer with a memory-extended output head.

Base-token logits are inner products of the final hidden state with the
(tied) input embedding table; memory-token logits are inner products with
the bank's address rows.  Memory ids fed back as inputs use the steer rows.
"""
from __future__ import annotations

import copy
import hashlib
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, CorruptFormatError, EmptyLossError, InputError
from .memory import MemoryBank

PAD, BOS, EOS, SEP = 0, 1, 2, 3
N_SPECIAL = 4

SELECTORS = ("bank-only", "adapters-only", "bank+backbone", "backbone-only", "bank+adapters")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 128
    n_layers: int = 2
    n_heads: int = 4
    max_seq_len: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size < N_SPECIAL:
            raise ConfigError(f"vocab_size must be >= {N_SPECIAL} (PAD, BOS, EOS, SEP), got {self.vocab_size}")
        if self.d_model <= 0 or self.n_heads <= 0 or self.n_layers <= 0:
            raise ConfigError("d_model, n_heads and n_layers must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.max_seq_len < 8:
            raise ConfigError(f"max_seq_len must be >= 8, got {self.max_seq_len}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must fit in 64 bits")


class AdapterSet(nn.Module):
    """Per-layer low-rank pairs on selected attention projections (query and key by default).

    The adapter contribution for input ``x`` is ``x @ down @ up``; ``up`` starts
    at zero so a fresh adapter set is an exact no-op.
    """

    def __init__(self, n_layers: int, d_model: int, rank: int = 8, targets: Sequence[str] = ("q", "k"), seed: int = 0):
        super().__init__()
        bad = set(targets) - {"q", "k", "v", "o"}
        if bad or not targets:
            raise ConfigError(f"invalid adapter targets {targets}")
        if rank <= 0:
            raise ConfigError("adapter rank must be positive")
        self.rank = rank
        self.targets = tuple(t for t in ("q", "k", "v", "o") if t in targets)
        gen = torch.Generator().manual_seed(int(seed))
        self.down = nn.ParameterDict()
        self.up = nn.ParameterDict()
        for layer in range(n_layers):
            for t in self.targets:
                key = f"{layer}_{t}"
                init = torch.randn(d_model, rank, generator=gen) / math.sqrt(d_model)
                self.down[key] = nn.Parameter(init)
                self.up[key] = nn.Parameter(torch.zeros(rank, d_model))

    def delta(self, layer: int, target: str, x: torch.Tensor) -> torch.Tensor | None:
        key = f"{layer}_{target}"
        if key not in self.down:
            return None
        return (x @ self.down[key]) @ self.up[key]


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_model
        self.n_heads = cfg.n_heads
        self.ln1 = nn.LayerNorm(d)
        self.q = nn.Linear(d, d, bias=False)
        self.k = nn.Linear(d, d, bias=False)
        self.v = nn.Linear(d, d, bias=False)
        self.o = nn.Linear(d, d, bias=False)
        self.ln2 = nn.LayerNorm(d)
        self.fc1 = nn.Linear(d, 4 * d)
        self.fc2 = nn.Linear(4 * d, d)

    def _proj(self, name: str, x: torch.Tensor, adapters: AdapterSet | None, layer: int) -> torch.Tensor:
        y = getattr(self, name)(x)
        if adapters is not None:
            delta = adapters.delta(layer, name, x)
            if delta is not None:
                y = y + delta
        return y

    def forward(self, x: torch.Tensor, adapters: AdapterSet | None, layer: int) -> torch.Tensor:
        B, T, d = x.shape
        hd = d // self.n_heads
        h = self.ln1(x)
        q = self._proj("q", h, adapters, layer).view(B, T, self.n_heads, hd).transpose(1, 2)
        k = self._proj("k", h, adapters, layer).view(B, T, self.n_heads, hd).transpose(1, 2)
        v = self._proj("v", h, adapters, layer).view(B, T, self.n_heads, hd).transpose(1, 2)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(hd)
        causal = torch.ones(T, T, dtype=torch.bool, device=x.device).tril()
        att = att.masked_fill(~causal, float("-inf")).softmax(dim=-1)
        y = (att @ v).transpose(1, 2).reshape(B, T, d)
        x = x + self._proj("o", y, adapters, layer)
        x = x + self.fc2(F.gelu(self.fc1(self.ln2(x))))
        return x


class Backbone(nn.Module):
    """Frozen-able transformer body; output head tied to ``tok_emb``."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.tok_emb = nn.Parameter(torch.empty(cfg.vocab_size, cfg.d_model))
        self.pos_emb = nn.Parameter(torch.empty(cfg.max_seq_len, cfg.d_model))
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(cfg.d_model)
        self.adapters: AdapterSet | None = None
        self.frozen = False

    def freeze(self) -> "Backbone":
        self.frozen = True
        for p in self.base_parameters():
            p.requires_grad_(False)
        return self

    def unfreeze(self) -> "Backbone":
        self.frozen = False
        for p in self.base_parameters():
            p.requires_grad_(True)
        return self

    def base_parameters(self) -> list[nn.Parameter]:
        return [p for name, p in self.named_parameters() if not name.startswith("adapters.")]

    def attach_adapters(self, rank: int = 8, targets: Sequence[str] = ("q", "k"), seed: int = 0) -> AdapterSet:
        cfg = self.cfg
        self.adapters = AdapterSet(cfg.n_layers, cfg.d_model, rank, targets, seed).to(self.tok_emb.dtype)
        return self.adapters

    def hidden(self, x: torch.Tensor) -> torch.Tensor:
        T = x.shape[1]
        x = x + self.pos_emb[:T]
        for layer, block in enumerate(self.blocks):
            x = block(x, self.adapters, layer)
        return self.ln_f(x)


def init_backbone(config: ModelConfig, seed: int | None = None) -> Backbone:
    """Deterministic random initialization (GPT-2 style scales)."""
    seed = config.seed if seed is None else seed
    gen = torch.Generator().manual_seed(int(seed))
    model = Backbone(config)
    n_layers = config.n_layers
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("ln1.weight") or name.endswith("ln2.weight") or name == "ln_f.weight":
                p.fill_(1.0)
            elif name.endswith(".bias"):
                p.zero_()
            else:
                std = 0.02
                if name.endswith("o.weight") or name.endswith("fc2.weight"):
                    std = 0.02 / math.sqrt(2 * n_layers)
                p.copy_(torch.randn(p.shape, generator=gen) * std)
    return model


def _check_ids(backbone: Backbone, bank: MemoryBank | None, ids: torch.Tensor) -> int:
    l = 0 if bank is None else bank.size
    V = backbone.cfg.vocab_size
    if bank is not None and bank.vocab_size != V:
        raise InputError(f"bank built for vocab_size {bank.vocab_size}, backbone has {V}")
    if ids.dim() != 2:
        raise InputError("ids must be a (batch, time) tensor")
    if ids.shape[1] > backbone.cfg.max_seq_len:
        raise InputError(f"sequence length {ids.shape[1]} exceeds max_seq_len {backbone.cfg.max_seq_len}")
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= V + l):
        raise InputError(f"token id out of range [0, {V + l})")
    return l


def embed(backbone: Backbone, bank: MemoryBank | None, ids: torch.Tensor) -> torch.Tensor:
    V = backbone.cfg.vocab_size
    x = backbone.tok_emb[ids.clamp(max=V - 1)]
    if bank is not None and bank.size:
        is_mem = (ids >= V).unsqueeze(-1)
        mem = bank.steer[(ids - V).clamp(min=0)]
        x = torch.where(is_mem, mem, x)
    return x


def forward(backbone: Backbone, bank: MemoryBank | None, ids) -> torch.Tensor:
    """Logits of shape (batch, time, vocab_size + l).

    ``ids`` is a (batch, time) LongTensor, or a list of TrainingSequence (which
    are right-padded with PAD).  Memory logits are computed row-by-row
    (elementwise product and reduction) so appending bank rows never perturbs
    the logits of existing ids.
    """
    if not isinstance(ids, torch.Tensor):
        from .layout import collate

        ids = collate(ids)["ids"]
    l = _check_ids(backbone, bank, ids)
    h = backbone.hidden(embed(backbone, bank, ids))
    base = h @ backbone.tok_emb.t()
    if l == 0:
        return base
    mem = (h.unsqueeze(-2) * bank.addr).sum(-1)
    return torch.cat([base, mem], dim=-1)


def sequence_loss(backbone: Backbone, bank: MemoryBank | None, batch) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean next-token NLL over masked target positions, plus per-position NLLs."""
    from .layout import collate

    t = batch if isinstance(batch, dict) else collate(batch)
    mask = t["mask"]
    if not bool(mask.any()):
        raise EmptyLossError("loss mask is false everywhere in the batch")
    logits = forward(backbone, bank, t["ids"])[:, :-1]
    nll = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), t["targets"].reshape(-1), reduction="none")
    nll = nll.view_as(t["targets"])
    sel = nll[mask]
    return sel.mean(), sel


def selected_parameters(backbone: Backbone, bank: MemoryBank | None, selector: str) -> dict[str, torch.Tensor]:
    if selector not in SELECTORS:
        raise InputError(f"unknown parameter selector {selector!r}")
    out: dict[str, torch.Tensor] = {}
    if "bank" in selector:
        if bank is None:
            raise InputError(f"selector {selector!r} needs a memory bank")
        if bank.decoupled:
            out["bank.addr"] = bank.addr
            out["bank.steer"] = bank.steer
        else:
            out["bank"] = bank.addr
    if "adapters" in selector:
        if backbone.adapters is None:
            raise InputError(f"selector {selector!r} needs attached adapters")
        for name, p in backbone.adapters.named_parameters():
            out[f"adapters.{name}"] = p
    if "backbone" in selector:
        for name, p in backbone.named_parameters():
            if not name.startswith("adapters."):
                out[name] = p
    return out


def loss_and_grad(backbone: Backbone, bank: MemoryBank | None, batch, param_selector: str = "bank-only"):
    """Masked next-token loss and gradients for one parameter group.

    Returns ``(loss, grads)`` where ``grads`` maps parameter names to gradient
    tensors.  Only the selected group is differentiated; no tensor's ``.grad``
    attribute is written.
    """
    params = selected_parameters(backbone, bank, param_selector)
    everything = list(backbone.parameters()) + ([] if bank is None else bank.parameters())
    saved = [(t, t.requires_grad) for t in everything]
    try:
        for t in everything:
            t.requires_grad_(False)
        for t in params.values():
            t.requires_grad_(True)
        loss, _ = sequence_loss(backbone, bank, batch)
        grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    finally:
        for t, flag in saved:
            t.requires_grad_(flag)
    out = {n: (torch.zeros_like(p) if g is None else g) for (n, p), g in zip(params.items(), grads)}
    return loss.detach(), out


@dataclass
class GenerationTrace:
    tokens: list[int]
    memory_events: list[tuple[int, int]] = field(default_factory=list)
    stop_reason: str = "max_len"

    def response(self, vocab_size: int) -> list[int]:
        """Emitted base tokens with memory tokens and the trailing EOS removed."""
        return [t for t in self.tokens if t < vocab_size and t != EOS]

    @property
    def first_memory(self) -> int | None:
        return self.memory_events[0][1] if self.memory_events else None


@torch.no_grad()
def generate_batch(
    backbone: Backbone,
    bank: MemoryBank | None,
    queries: Sequence[Sequence[int]],
    max_len: int = 32,
    allow_memory: bool = True,
) -> list[GenerationTrace]:
    """Greedy decoding for many queries; equal-length queries share a forward pass."""
    V = backbone.cfg.vocab_size
    traces: list[GenerationTrace | None] = [None] * len(queries)
    by_len: dict[int, list[int]] = {}
    for i, q in enumerate(queries):
        if len(q) == 0:
            raise InputError("empty query")
        by_len.setdefault(len(q), []).append(i)
    for qlen, idxs in by_len.items():
        ids = torch.tensor([list(queries[i]) for i in idxs], dtype=torch.long)
        out = [GenerationTrace(tokens=[]) for _ in idxs]
        alive = list(range(len(idxs)))
        for step in range(max_len):
            if not alive or ids.shape[1] >= backbone.cfg.max_seq_len:
                break
            logits = forward(backbone, bank, ids[alive])[:, -1]
            if not allow_memory:
                logits = logits[:, :V]
            nxt = logits.argmax(dim=-1)
            col = torch.full((ids.shape[0], 1), PAD, dtype=torch.long)
            col[alive, 0] = nxt
            ids = torch.cat([ids, col], dim=1)
            still = []
            for j, tok in zip(alive, nxt.tolist()):
                tr = out[j]
                if tok >= V:
                    tr.memory_events.append((len(tr.tokens), tok - V))
                tr.tokens.append(tok)
                if tok == EOS:
                    tr.stop_reason = "eos"
                else:
                    still.append(j)
            alive = still
        for j, i in enumerate(idxs):
            traces[i] = out[j]
    return traces  # type: ignore[return-value]


def generate(backbone: Backbone, bank: MemoryBank | None, query_ids: Sequence[int], max_len: int = 32, mode: str = "greedy") -> GenerationTrace:
    if mode != "greedy":
        raise InputError(f"unsupported decoding mode {mode!r}")
    if len(query_ids) == 0:
        raise InputError("empty query")
    return generate_batch(backbone, bank, [query_ids], max_len)[0]


def merge_adapters(backbone: Backbone, adapters: AdapterSet | None = None) -> Backbone:
    """Copy of ``backbone`` with adapter deltas folded into the host projections.

    Merging a backbone that carries no adapters returns an unchanged copy.
    """
    adapters = backbone.adapters if adapters is None else adapters
    merged = copy.deepcopy(backbone)
    merged.adapters = None
    if adapters is None:
        return merged
    d = backbone.cfg.d_model
    with torch.no_grad():
        for key in adapters.down:
            layer_s, target = key.split("_")
            layer = int(layer_s)
            down, up = adapters.down[key], adapters.up[key]
            if layer >= backbone.cfg.n_layers or down.shape[0] != d or up.shape[1] != d or down.shape[1] != up.shape[0]:
                raise InputError(f"adapter {key} shape {tuple(down.shape)}/{tuple(up.shape)} does not fit the backbone")
            lin = getattr(merged.blocks[layer], target)
            # y = x W^T + x down up  =>  W' = W + (down up)^T
            lin.weight.add_((down @ up).t())
    if backbone.frozen:
        merged.freeze()
    return merged


def backbone_checksum(backbone: Backbone) -> str:
    h = hashlib.sha256()
    for name, p in backbone.state_dict().items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.detach().cpu().numpy()).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"TKMCKPT\x00"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<8sIIIIIIQIIB")
_TARGET_BITS = {"q": 1, "k": 2, "v": 4, "o": 8}


def checkpoint_tensor_order(cfg: ModelConfig, adapter_keys: Sequence[str] = ()) -> list[str]:
    """Fixed tensor order used by the TKMCKPT format."""
    names = ["tok_emb", "pos_emb"]
    for i in range(cfg.n_layers):
        p = f"blocks.{i}."
        names += [p + "ln1.weight", p + "ln1.bias", p + "q.weight", p + "k.weight", p + "v.weight", p + "o.weight"]
        names += [p + "ln2.weight", p + "ln2.bias", p + "fc1.weight", p + "fc1.bias", p + "fc2.weight", p + "fc2.bias"]
    names += ["ln_f.weight", "ln_f.bias"]
    for key in adapter_keys:
        names += [f"adapters.down.{key}", f"adapters.up.{key}"]
    return names


def save_checkpoint(backbone: Backbone, path: str | Path) -> Path:
    """Write a TKMCKPT file.

    Header (little-endian): magic ``TKMCKPT\\0``; u32 version; u32 vocab_size,
    d_model, n_layers, n_heads, max_seq_len; u64 seed; u32 adapter rank (0 when
    absent); u32 adapter target bitmask (q=1, k=2, v=4, o=8); u8 frozen flag.
    Then every tensor of :func:`checkpoint_tensor_order` as row-major f32.
    """
    cfg = backbone.cfg
    ad = backbone.adapters
    rank = ad.rank if ad is not None else 0
    mask = sum(_TARGET_BITS[t] for t in ad.targets) if ad is not None else 0
    header = _CKPT_HEADER.pack(
        CKPT_MAGIC, CKPT_VERSION, cfg.vocab_size, cfg.d_model, cfg.n_layers, cfg.n_heads, cfg.max_seq_len,
        cfg.seed, rank, mask, 1 if backbone.frozen else 0,
    )
    state = backbone.state_dict()
    keys = list(ad.down.keys()) if ad is not None else []
    chunks = [header]
    for name in checkpoint_tensor_order(cfg, keys):
        chunks.append(np.ascontiguousarray(state[name].detach().cpu().numpy(), dtype="<f4").tobytes())
    path = Path(path)
    try:
        path.write_bytes(b"".join(chunks))
    except OSError as exc:
        raise OSError(f"cannot write checkpoint to {path}: {exc}") from exc
    return path


def load_checkpoint(path: str | Path) -> Backbone:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(data) < _CKPT_HEADER.size:
        raise CorruptFormatError(f"{path}: truncated header")
    magic, version, V, d, nl, nh, T, seed, rank, mask, frozen = _CKPT_HEADER.unpack_from(data, 0)
    if magic != CKPT_MAGIC:
        raise CorruptFormatError(f"{path}: bad magic {magic!r}")
    if version != CKPT_VERSION:
        raise CorruptFormatError(f"{path}: unsupported checkpoint version {version}")
    try:
        cfg = ModelConfig(V, d, nl, nh, T, seed)
    except ConfigError as exc:
        raise CorruptFormatError(f"{path}: {exc}") from exc
    model = Backbone(cfg)
    if rank:
        targets = [t for t, bit in _TARGET_BITS.items() if mask & bit]
        model.attach_adapters(rank, targets)
    keys = list(model.adapters.down.keys()) if model.adapters is not None else []
    state = model.state_dict()
    off = _CKPT_HEADER.size
    new_state = {}
    for name in checkpoint_tensor_order(cfg, keys):
        shape = tuple(state[name].shape)
        n = int(np.prod(shape))
        if off + 4 * n > len(data):
            raise CorruptFormatError(f"{path}: truncated tensor {name}")
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=off).astype(np.float32).reshape(shape)
        new_state[name] = torch.from_numpy(arr.copy())
        off += 4 * n
    if off != len(data):
        raise CorruptFormatError(f"{path}: {len(data) - off} trailing bytes")
    model.load_state_dict(new_state)
    if frozen:
        model.freeze()
    return model
