"""Infix and prefix training-sequence construction with exact loss masks.

``loss_mask[i]`` is True when token ``i`` is a loss-bearing target, i.e. the
prediction made at position ``i - 1`` is scored.  Position 0 is never a
target.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch

from .errors import InputError, LengthError
from .model import EOS, PAD

INFIX = "infix"
PREFIX = "prefix"


@dataclass(frozen=True)
class ProcedurePair:
    memory_id: int
    response: tuple[int, ...]

    def __init__(self, memory_id: int, response: Sequence[int]):
        object.__setattr__(self, "memory_id", int(memory_id))
        object.__setattr__(self, "response", tuple(int(t) for t in response))


@dataclass(frozen=True)
class TrainingSequence:
    ids: tuple[int, ...]
    query_len: int
    memory_positions: tuple[int, ...]
    loss_mask: tuple[bool, ...]
    placement: str = INFIX

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def n_targets(self) -> int:
        return sum(self.loss_mask)


def build_infix_sequence(
    query: Sequence[int],
    pairs: Sequence[ProcedurePair],
    vocab_size: int | None = None,
    max_seq_len: int | None = None,
) -> TrainingSequence:
    """Layout ``q_1..q_k, m_i, r_i..., m_j, r_j..., EOS``.

    Every position after the query is loss-bearing, memory tokens included, so
    routing is trained alongside the responses.  EOS is appended to the last
    response unless it already ends with one; intermediate pairs are delimited
    only by the next memory token.
    """
    if not pairs:
        raise InputError("infix sequence needs at least one procedure pair")
    if len(query) == 0:
        raise InputError("empty query")
    ids = [int(t) for t in query]
    mem_pos = []
    for n, pair in enumerate(pairs):
        if vocab_size is not None and pair.memory_id < vocab_size:
            raise InputError(f"pair {n}: memory id {pair.memory_id} is a base token")
        last = n == len(pairs) - 1
        response = list(pair.response)
        if last and (not response or response[-1] != EOS):
            response.append(EOS)
        if not response:
            raise InputError(f"pair {n}: empty response")
        mem_pos.append(len(ids))
        ids.append(pair.memory_id)
        ids.extend(response)
        if max_seq_len is not None and len(ids) > max_seq_len:
            raise LengthError(f"pair {n} (memory id {pair.memory_id}) overflows max_seq_len={max_seq_len}: length {len(ids)}")
    k = len(query)
    mask = tuple(i >= k for i in range(len(ids)))
    return TrainingSequence(tuple(ids), k, tuple(mem_pos), mask, INFIX)


def build_prefix_sequence(
    memory_ids: Sequence[int],
    query: Sequence[int],
    response: Sequence[int],
    max_seq_len: int | None = None,
) -> TrainingSequence:
    """Layout ``MEM ⊕ query ⊕ response ⊕ EOS``; only response positions (and EOS) carry loss."""
    if len(query) == 0 and len(memory_ids) == 0:
        raise InputError("prefix sequence needs a query or memory tokens")
    response = [int(t) for t in response]
    if not response or response[-1] != EOS:
        response.append(EOS)
    ids = [int(m) for m in memory_ids] + [int(t) for t in query] + response
    if max_seq_len is not None and len(ids) > max_seq_len:
        raise LengthError(f"prefix sequence of length {len(ids)} overflows max_seq_len={max_seq_len}")
    start = len(memory_ids) + len(query)
    mask = tuple(i >= start and i > 0 for i in range(len(ids)))
    return TrainingSequence(tuple(ids), start, tuple(range(len(memory_ids))), mask, PREFIX)


def build_plain_sequence(query: Sequence[int], response: Sequence[int], max_seq_len: int | None = None) -> TrainingSequence:
    """Query followed directly by the response, as used by the adapter baselines."""
    return build_prefix_sequence([], query, response, max_seq_len)


def build_memorization_sequence(
    marker: Sequence[int],
    memory_ids: Sequence[int],
    text: Sequence[int],
    placement: str = INFIX,
    max_seq_len: int | None = None,
) -> TrainingSequence:
    """Marker query, memory tokens and a text to memorize, with loss on the text (and EOS) only.

    Infix puts the memory run between marker and text; prefix puts it first.
    Both placements score exactly the same target tokens.
    """
    if placement not in (INFIX, PREFIX):
        raise InputError(f"unknown placement {placement!r}")
    if not memory_ids:
        raise InputError("memorization needs at least one memory token")
    text = [int(t) for t in text]
    if not text:
        raise InputError("empty text")
    if text[-1] != EOS:
        text.append(EOS)
    mem, q = [int(m) for m in memory_ids], [int(t) for t in marker]
    head = q + mem if placement == INFIX else mem + q
    ids = head + text
    if max_seq_len is not None and len(ids) > max_seq_len:
        raise LengthError(f"memorization sequence of length {len(ids)} overflows max_seq_len={max_seq_len}")
    start = len(head)
    offset = len(q) if placement == INFIX else 0
    mask = tuple(i >= start for i in range(len(ids)))
    return TrainingSequence(tuple(ids), len(q), tuple(range(offset, offset + len(mem))), mask, placement)


def response_only_mask(seq: TrainingSequence) -> TrainingSequence:
    """Same sequence with memory positions removed from the loss."""
    mem = set(seq.memory_positions)
    mask = tuple(m and i not in mem for i, m in enumerate(seq.loss_mask))
    return TrainingSequence(seq.ids, seq.query_len, seq.memory_positions, mask, seq.placement)


def parse_infix(seq: TrainingSequence, vocab_size: int) -> tuple[list[int], list[ProcedurePair]]:
    """Recover ``(query, pairs)`` from an infix sequence (inverse of the builder)."""
    k = seq.query_len
    query = list(seq.ids[:k])
    pairs: list[ProcedurePair] = []
    cur_mem, cur_resp = None, []
    for tok in seq.ids[k:]:
        if tok >= vocab_size:
            if cur_mem is not None:
                pairs.append(ProcedurePair(cur_mem, cur_resp))
            cur_mem, cur_resp = tok, []
        else:
            cur_resp.append(tok)
    if cur_mem is None:
        raise InputError("sequence contains no memory token after the query")
    pairs.append(ProcedurePair(cur_mem, cur_resp))
    return query, pairs


def collate(batch: Sequence[TrainingSequence], pad_to: int | None = None) -> dict[str, torch.Tensor]:
    """Right-pad a batch; returns ``ids`` (B, T), ``targets`` (B, T-1) and ``mask`` (B, T-1)."""
    if not batch:
        raise InputError("empty batch")
    T = max(len(s) for s in batch)
    if pad_to is not None:
        T = max(T, pad_to)
    ids = torch.full((len(batch), T), PAD, dtype=torch.long)
    mask = torch.zeros((len(batch), T), dtype=torch.bool)
    for b, s in enumerate(batch):
        ids[b, : len(s)] = torch.tensor(s.ids, dtype=torch.long)
        mask[b, : len(s)] = torch.tensor(s.loss_mask, dtype=torch.bool)
    return {"ids": ids, "targets": ids[:, 1:], "mask": mask[:, 1:]}
