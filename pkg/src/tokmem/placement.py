"""Memorization study: how memory-token placement affects convergence.

A fixed budget of random text is compressed into ``n`` shared memory tokens
on a frozen backbone, placed either between a per-sequence marker and the
text (infix) or before the marker (prefix).  Both placements score the same
text positions, so perplexities are directly comparable.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .layout import INFIX, PREFIX, build_memorization_sequence, collate
from .memory import create_bank
from .metrics import PPLCurve, steps_at_target
from .model import Backbone, loss_and_grad, sequence_loss
from .optim import AdamWState, OptimHyper, adamw_step, clip_grad_norm
from .taskgen import gen_memorization_corpus, marker_queries


@dataclass
class PlacementResult:
    placement: str
    n_tokens: int
    budget: int
    seed: int
    curve: PPLCurve
    final_ppl: float
    steps_at_90: int

    def to_dict(self) -> dict:
        return {
            "placement": self.placement,
            "n_tokens": self.n_tokens,
            "budget": self.budget,
            "seed": self.seed,
            "final_ppl": self.final_ppl,
            "steps_at_90": self.steps_at_90,
            "curve": {"steps": self.curve.steps, "ppl": self.curve.ppl},
        }


def memorization_sequences(backbone: Backbone, n_tokens: int, budget: int, seq_len: int, marker_len: int,
                           placement: str, seed: int, skew: float = 0.0, vocab_offset: int = 0):
    if budget % seq_len:
        raise ValueError(f"budget {budget} is not a multiple of seq_len {seq_len}")
    n_seq = budget // seq_len
    texts = gen_memorization_corpus(n_seq, seq_len, seed, skew)
    markers = marker_queries(n_seq, marker_len, seed + 1)
    V = backbone.cfg.vocab_size
    mem = list(range(V, V + n_tokens))
    return [
        build_memorization_sequence(m, mem, t, placement, backbone.cfg.max_seq_len) for m, t in zip(markers, texts)
    ]


def placement_run(
    backbone: Backbone,
    n_tokens: int,
    budget: int,
    placement: str,
    seed: int,
    steps: int = 300,
    eval_interval: int = 10,
    seq_len: int = 128,
    marker_len: int = 4,
    lr: float = 5e-3,
    skew: float = 0.0,
    fraction: float = 0.9,
) -> PlacementResult:
    """Train ``n_tokens`` memory rows on the whole budget (one batch per step) and track text perplexity."""
    if placement not in (INFIX, PREFIX):
        raise ValueError(f"unknown placement {placement!r}")
    seqs = memorization_sequences(backbone, n_tokens, budget, seq_len, marker_len, placement, seed, skew)
    batch = collate(seqs)
    bank = create_bank(backbone.cfg.d_model, n_tokens, backbone, seed=seed)
    hyper = OptimHyper(lr=lr, weight_decay=0.0)
    state = AdamWState()
    curve = PPLCurve(interval=eval_interval)
    torch.manual_seed(seed)
    for step in range(1, steps + 1):
        _, grads = loss_and_grad(backbone, bank, batch, "bank-only")
        g = [grads["bank"]]
        clip_grad_norm(g, hyper.clip_norm)
        adamw_step([bank.addr], g, state, hyper)
        if step % eval_interval == 0:
            with torch.no_grad():
                loss, _ = sequence_loss(backbone, bank, batch)
            curve.append(step, math.exp(float(loss)))
    return PlacementResult(placement, n_tokens, budget, seed, curve, curve.ppl[-1], steps_at_target(curve, fraction))
