"""Bridges between generated datasets and training/evaluation.

A suite knows, for each training mode, how to lay out an example as a
:class:`TrainingSequence` and how to score greedy generations.  TokMem modes
address procedures through memory tokens (bank labels); adapter baselines see
the plain ``query SEP response`` layout and, for tools, emit tool-name tokens.
"""
from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Sequence

from .layout import ProcedurePair, TrainingSequence, build_infix_sequence, build_plain_sequence
from .memory import MemoryBank
from .metrics import call_f1, exact_match, rouge_l
from .model import EOS, SEP, Backbone, generate_batch
from .taskgen import ProcedureSpec, ToolCall, ToolDataset, ToolQuery, Vocab

MEMORY_MODES = ("tokmem", "tokmem-unfrozen")
ADAPTER_MODES = ("lora", "replay")
MODES = MEMORY_MODES + ADAPTER_MODES


def uses_memory(mode: str) -> bool:
    return mode in MEMORY_MODES


def prompt(query, mode: str) -> list[int]:
    """Generation prompt; adapter baselines get SEP where memory modes emit a memory token."""
    return list(query) if uses_memory(mode) else list(query) + [SEP]


@dataclass(frozen=True)
class TaskGroup:
    name: str
    members: tuple  # task or tool ids


class AtomicSuite:
    """Atomic recall: one procedure per task, one memory token per procedure."""

    kind = "atomic"

    def __init__(self, tasks: Sequence[ProcedureSpec], group_size: int = 10, max_seq_len: int | None = None):
        self.tasks = {t.id: t for t in tasks}
        ids = [t.id for t in tasks]
        self.groups = [
            TaskGroup(f"g{n + 1}", tuple(ids[i : i + group_size])) for n, i in enumerate(range(0, len(ids), group_size))
        ]
        self.max_seq_len = max_seq_len
        self.vocab_size = Vocab.size

    @staticmethod
    def memory_label(task: ProcedureSpec) -> str:
        return f"task{task.id}:{task.label}"

    def memory_labels(self, group: TaskGroup) -> list[str]:
        return [self.memory_label(self.tasks[i]) for i in group.members]

    def train_items(self, group: TaskGroup) -> list:
        return [(tid, q, r) for tid in group.members for q, r in self.tasks[tid].train]

    def encode(self, item, mode: str, bank: MemoryBank | None) -> TrainingSequence:
        tid, q, r = item
        if uses_memory(mode):
            mem = bank.token_id(self.memory_label(self.tasks[tid]))
            return build_infix_sequence(q, [ProcedurePair(mem, r)], self.vocab_size, self.max_seq_len)
        return build_plain_sequence(prompt(q, mode), r, self.max_seq_len)

    def evaluate(self, backbone: Backbone, bank: MemoryBank | None, group: TaskGroup, mode: str, max_len: int = 40) -> dict:
        items = [(tid, q, r) for tid in group.members for q, r in self.tasks[tid].test]
        if not items:
            raise ValueError(f"group {group.name} has no test examples")
        traces = generate_batch(backbone, bank if uses_memory(mode) else None, [prompt(q, mode) for _, q, _ in items], max_len)
        V = self.vocab_size
        em = rl = route = 0.0
        for (tid, q, r), tr in zip(items, traces):
            pred = tr.response(V)
            em += exact_match(pred, r)
            rl += rouge_l(pred, list(r))["f"]
            if uses_memory(mode):
                gold = bank.labels.index(self.memory_label(self.tasks[tid]))
                route += tr.first_memory == gold
        n = len(items)
        out = {"exact_match": em / n, "rouge_l": rl / n}
        if uses_memory(mode):
            out["routing_acc"] = route / n
        return out


class ToolSuite:
    """Compositional recall: each tool is a procedure; a query chains 1-4 calls."""

    kind = "tools"

    def __init__(
        self,
        data: ToolDataset,
        group_size: int | None = None,
        train_counts: Sequence[int] | None = None,
        test_counts: Sequence[int] | None = None,
        max_seq_len: int | None = None,
    ):
        self.data = data
        self.tools = {t.id: t for t in data.tools}
        ids = [t.id for t in data.tools]
        group_size = group_size or len(ids)
        self.groups = [
            TaskGroup(f"g{n + 1}", tuple(ids[i : i + group_size])) for n, i in enumerate(range(0, len(ids), group_size))
        ]
        self.train_counts = set(train_counts) if train_counts else None
        self.test_counts = set(test_counts) if test_counts else None
        self.max_seq_len = max_seq_len
        self.vocab_size = Vocab.size

    def memory_label(self, tool_id: int) -> str:
        return f"tool{tool_id}:{self.tools[tool_id].label}"

    def memory_labels(self, group: TaskGroup) -> list[str]:
        return [self.memory_label(t) for t in group.members]

    def _in_group(self, q: ToolQuery, group: TaskGroup, counts) -> bool:
        # a query belongs to the group that owns its newest tool, and must only use tools seen so far
        if counts is not None and q.n_calls not in counts:
            return False
        members = set(group.members)
        gi = self.groups.index(group)
        allowed = {t for g in self.groups[: gi + 1] for t in g.members}
        tools = {c.tool for c in q.calls}
        return bool(tools & members) and tools <= allowed

    def train_items(self, group: TaskGroup) -> list[ToolQuery]:
        return [q for q in self.data.train if self._in_group(q, group, self.train_counts)]

    def test_items(self, group: TaskGroup, counts=None) -> list[ToolQuery]:
        counts = self.test_counts if counts is None else counts
        members = set(group.members)
        # evaluation of a group uses queries whose tools all belong to that group
        return [q for q in self.data.test if {c.tool for c in q.calls} <= members and (counts is None or q.n_calls in counts)]

    def encode(self, q: ToolQuery, mode: str, bank: MemoryBank | None) -> TrainingSequence:
        if uses_memory(mode):
            pairs = [
                ProcedurePair(bank.token_id(self.memory_label(c.tool)), [Vocab.sym(a) for a in c.args]) for c in q.calls
            ]
            return build_infix_sequence(q.query, pairs, self.vocab_size, self.max_seq_len)
        resp: list[int] = []
        for c in q.calls:
            resp += [self.tools[c.tool].name_token] + [Vocab.sym(a) for a in c.args]
        return build_plain_sequence(prompt(q.query, mode), resp, self.max_seq_len)

    def parse_calls(self, tokens: Sequence[int], mode: str, bank: MemoryBank | None) -> list[ToolCall]:
        """Split generated tokens into calls: each tool token opens a call, data symbols are its args."""
        V = self.vocab_size
        name_to_tool = {t.name_token: t.id for t in self.data.tools}
        label_to_tool = {self.memory_label(t): t for t in self.tools}
        calls: list[list] = []
        for tok in tokens:
            if tok == EOS:
                break
            tool = None
            if tok >= V and bank is not None:
                tool = label_to_tool.get(bank.labels[tok - V], -1 - (tok - V))
            elif tok in name_to_tool and not uses_memory(mode):
                tool = name_to_tool[tok]
            if tool is not None:
                calls.append([tool, []])
            elif Vocab.is_sym(tok) and calls:
                calls[-1][1].append(Vocab.sym_value(tok))
        return [ToolCall(t, a) for t, a in calls]

    def evaluate(self, backbone: Backbone, bank: MemoryBank | None, group: TaskGroup, mode: str, max_len: int = 24, counts=None) -> dict:
        items = self.test_items(group, counts)
        if not items:
            raise ValueError(f"group {group.name} has no test queries")
        traces = generate_batch(backbone, bank if uses_memory(mode) else None, [prompt(q.query, mode) for q in items], max_len)
        tf = af = em = 0.0
        for q, tr in zip(items, traces):
            pred = self.parse_calls(tr.tokens, mode, bank)
            f = call_f1(pred, q.calls)
            tf += f["tool_f1"]
            af += f["arg_f1"]
            em += float(list(pred) == list(q.calls))
        n = len(items)
        return {"tool_f1": tf / n, "arg_f1": af / n, "exact_match": em / n}


def shuffled(items: list, seed) -> list:
    out = list(items)
    random.Random(seed).shuffle(out)
    return out
