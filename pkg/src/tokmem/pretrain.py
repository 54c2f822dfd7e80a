"""Stand-in pretraining for the frozen backbone, with an on-disk cache.

The backbone learns every catalog procedure behind its own instruction
token.  Cues carry no information about the procedure here; later, memory
tokens take over the instruction's job and a task's cue is what routing keys
on.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import random
import time
from dataclasses import dataclass
from pathlib import Path

import torch

from .layout import PREFIX, TrainingSequence
from .model import EOS, Backbone, ModelConfig, init_backbone, load_checkpoint, loss_and_grad, save_checkpoint
from .optim import AdamWState, OptimHyper, adamw_step, clip_grad_norm
from .taskgen import CATALOG, CATALOG_SEED, N_CUES, N_SYMBOLS, QUERY_LEN, VOCAB_SIZE, Vocab

log = logging.getLogger(__name__)

CACHE_ENV = "TOKMEM_CACHE"
FORMAT_TAG = "pretrain-v3"
BUNDLED_DIR = Path(__file__).parent / "data"


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 20000
    batch_size: int = 32
    lr: float = 1e-3
    warmup: int = 200
    seed: int = 0
    d_model: int = 128
    n_layers: int = 2
    n_heads: int = 4
    max_seq_len: int = 48

    def model_config(self) -> ModelConfig:
        return ModelConfig(VOCAB_SIZE, self.d_model, self.n_layers, self.n_heads, self.max_seq_len, self.seed)

    def key(self) -> str:
        blob = json.dumps({"tag": FORMAT_TAG, **dataclasses.asdict(self)}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def default_cache_dir() -> Path:
    return Path(os.environ.get(CACHE_ENV, Path.home() / ".cache" / "tokmem"))


_FAMILIES = sorted({p.family for p in CATALOG})
_BY_FAMILY = {f: [p for p in CATALOG if p.family == f] for f in _FAMILIES}
_COPY_FAMILIES = ("reverse", "sort", "duplicate", "every")
# lookup tables take far longer to learn than the alignment-only families
_FAMILY_WEIGHTS = [1 if f in _COPY_FAMILIES else 4 for f in _FAMILIES]
# tokens that copy-style procedures may move around: symbols, cues, tool names and the call marker
_CONTENT = list(range(Vocab.sym0, Vocab.instr0)) + list(range(Vocab.tool0, Vocab.size))
KEY_RATE = 0.5
_KEYS = list(range(N_SYMBOLS))
random.Random(CATALOG_SEED + 1).shuffle(_KEYS)


def cue_key(cue: int) -> int:
    """The symbol that conventionally follows ``cue`` in pretraining text (a fixed bijection)."""
    return Vocab.sym(_KEYS[cue - Vocab.cue0])


def pretrain_example(rng: random.Random) -> TrainingSequence:
    """One pretraining sequence ``data cue [key] INSTR response EOS``.

    Loss falls on the key (when present) and on the response.  Predicting the
    key forces the state at the cue to say which cue it is, which is what
    memory routing later reads; leaving it out half the time keeps the model
    fluent with the instruction right after the cue, as in task queries.
    Half of the copy-style examples move arbitrary content tokens instead of
    data symbols; otherwise cue and tool-name embeddings, never being
    targets, collapse onto one direction.
    """
    family = rng.choices(_FAMILIES, _FAMILY_WEIGHTS)[0]
    proc = rng.choice(_BY_FAMILY[family])
    n = rng.randint(*QUERY_LEN)
    if family in _COPY_FAMILIES and rng.random() < 0.5:
        data = [rng.choice(_CONTENT) for _ in range(n)]
        # token ids order the content alphabet, so sort and friends stay well defined
        response = proc.apply(data)
    else:
        vals = [rng.randrange(N_SYMBOLS) for _ in range(n)]
        data = [Vocab.sym(v) for v in vals]
        response = [Vocab.sym(v) for v in proc.apply(vals)]
    cue = Vocab.cue(rng.randrange(N_CUES))
    key = [cue_key(cue)] if rng.random() < KEY_RATE else []
    head = data + [cue] + key + [Vocab.instr(proc)]
    ids = head + response + [EOS]
    mask = tuple(i >= len(head) or (bool(key) and i == n + 1) for i in range(len(ids)))
    return TrainingSequence(tuple(ids), len(head), (), mask, PREFIX)


def pretrain_backbone(cfg: PretrainConfig, log_every: int = 500) -> Backbone:
    backbone = init_backbone(cfg.model_config())
    rng = random.Random(cfg.seed)
    hyper = OptimHyper(lr=cfg.lr, weight_decay=0.0, clip_norm=1.0)
    names = [n for n, _ in backbone.named_parameters()]
    params = [p for _, p in backbone.named_parameters()]
    state = AdamWState()
    t0, running = time.time(), 0.0
    for step in range(1, cfg.steps + 1):
        batch = [pretrain_example(rng) for _ in range(cfg.batch_size)]
        hyper.lr = cfg.lr * min(1.0, step / cfg.warmup)
        loss, grads = loss_and_grad(backbone, None, batch, "backbone-only")
        grads = [grads[n] for n in names]
        clip_grad_norm(grads, hyper.clip_norm)
        adamw_step(params, grads, state, hyper)
        running += float(loss)
        if step % log_every == 0:
            log.info("pretrain step %d loss %.4f (%.0fs)", step, running / log_every, time.time() - t0)
            running = 0.0
    return backbone


def pretrained_backbone(cfg: PretrainConfig | None = None, cache_dir: Path | None = None) -> Backbone:
    """Load the pretrained backbone from the cache, training and storing it on a miss.

    The returned backbone is frozen.
    """
    cfg = cfg or PretrainConfig()
    cache_dir = Path(cache_dir) if cache_dir is not None else default_cache_dir()
    name = f"backbone-{cfg.key()}.tkmckpt"
    path = cache_dir / name
    if path.exists():
        return load_checkpoint(path).freeze()
    bundled = BUNDLED_DIR / name
    if bundled.exists():
        return load_checkpoint(bundled).freeze()
    log.info("no cached backbone at %s; pretraining %d steps", path, cfg.steps)
    torch.manual_seed(cfg.seed)
    backbone = pretrain_backbone(cfg)
    cache_dir.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    save_checkpoint(backbone, tmp)
    tmp.replace(path)
    return load_checkpoint(path).freeze()
