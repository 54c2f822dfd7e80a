"""Scoring: Rouge-L, routing accuracy, tool/argument F1, perplexity, Steps@90%Best, forgetting matrices."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Sequence

from .errors import EmptyLossError, InputError

SCORE_KEYS = ("rouge_l", "exact_match", "routing_acc", "tool_f1", "arg_f1")


def lcs_length(a: Sequence[Hashable], b: Sequence[Hashable]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(pred: Sequence[Hashable], gold: Sequence[Hashable]) -> dict[str, float]:
    """LCS-based precision, recall and F over token ids."""
    lcs = lcs_length(pred, gold)
    if lcs == 0:
        return {"precision": 0.0, "recall": 0.0, "f": 0.0}
    p = lcs / len(pred)
    r = lcs / len(gold)
    return {"precision": p, "recall": r, "f": 2 * p * r / (p + r)}


def exact_match(pred: Sequence[int], gold: Sequence[int], eos: int | None = 2) -> float:
    strip = lambda s: [t for t in s if t != eos] if eos is not None else list(s)
    return float(strip(pred) == strip(gold))


def routing_accuracy(traces, gold_first: Sequence[int]) -> float:
    """Fraction of traces whose first memory event is the gold memory id."""
    if len(traces) != len(gold_first):
        raise InputError(f"{len(traces)} traces but {len(gold_first)} gold ids")
    if not traces:
        return 0.0
    hits = 0
    for tr, g in zip(traces, gold_first):
        first = tr.memory_events[0][1] if tr.memory_events else None
        hits += first is not None and first == g
    return hits / len(traces)


def _multiset_f1(pred: Iterable[Hashable], gold: Iterable[Hashable]) -> float:
    p, g = Counter(pred), Counter(gold)
    np_, ng = sum(p.values()), sum(g.values())
    if np_ == 0 and ng == 0:
        return 1.0
    if np_ == 0 or ng == 0:
        return 0.0
    tp = sum((p & g).values())
    if tp == 0:
        return 0.0
    prec, rec = tp / np_, tp / ng
    return 2 * prec * rec / (prec + rec)


def _canonical(call) -> tuple:
    tool = getattr(call, "tool", None)
    args = getattr(call, "args", None)
    if tool is None:
        tool, args = call
    return (tool, tuple(args))


def call_f1(pred, gold) -> dict[str, float]:
    """Tool F1 (multiset over tool ids) and argument F1 (multiset over whole canonical calls)."""
    pc = [_canonical(c) for c in pred]
    gc = [_canonical(c) for c in gold]
    return {
        "tool_f1": _multiset_f1((t for t, _ in pc), (t for t, _ in gc)),
        "arg_f1": _multiset_f1(pc, gc),
    }


def perplexity(nlls: Sequence[float]) -> float:
    nlls = list(nlls)
    if not nlls:
        raise EmptyLossError("perplexity needs at least one scored position")
    return math.exp(sum(nlls) / len(nlls))


@dataclass
class PPLCurve:
    steps: list[int] = field(default_factory=list)
    ppl: list[float] = field(default_factory=list)
    interval: int = 100

    def append(self, step: int, value: float) -> None:
        if self.steps and step <= self.steps[-1]:
            raise InputError("curve steps must be strictly increasing")
        if step % self.interval:
            raise InputError(f"step {step} is not a multiple of the eval interval {self.interval}")
        self.steps.append(step)
        self.ppl.append(value)


def steps_at_target(curve: PPLCurve, fraction: float = 0.9) -> int:
    """Earliest step whose perplexity is within ``best / fraction``."""
    if not curve.steps:
        raise InputError("empty curve")
    threshold = min(curve.ppl) / fraction
    for step, value in zip(curve.steps, curve.ppl):
        if value <= threshold:
            return step
    raise AssertionError("unreachable: the best point always meets the threshold")


@dataclass
class MetricsReport:
    """Per-task-group scores at one checkpoint.

    ``groups`` maps a group name to a dict with any of ``rouge_l``,
    ``exact_match``, ``routing_acc``, ``tool_f1``, ``arg_f1`` (all in [0, 1])
    and ``ppl`` (>= 1).  ``seen`` records which groups had been trained when the
    checkpoint was taken.
    """

    label: str
    groups: dict[str, dict[str, float]] = field(default_factory=dict)
    seen: dict[str, bool] = field(default_factory=dict)

    def validate(self) -> None:
        for g, scores in self.groups.items():
            for k, v in scores.items():
                if k == "ppl":
                    if not v >= 1.0 - 1e-9:
                        raise InputError(f"{g}.ppl = {v} < 1")
                elif k in SCORE_KEYS and not 0.0 <= v <= 1.0:
                    raise InputError(f"{g}.{k} = {v} outside [0, 1]")

    def aggregate(self, key: str) -> float:
        vals = [s[key] for s in self.groups.values() if key in s]
        return sum(vals) / len(vals) if vals else float("nan")

    def to_dict(self) -> dict:
        return {"label": self.label, "groups": self.groups, "seen": self.seen}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(d["label"], {k: dict(v) for k, v in d["groups"].items()}, dict(d.get("seen", {})))


@dataclass
class ForgettingMatrix:
    rounds: list[str]
    groups: list[str]
    values: list[list[float]]
    seen: list[list[bool]]

    def diagonal_deltas(self) -> dict[str, float]:
        """Final-round score minus the score at the round where each group was first seen."""
        out = {}
        for j, g in enumerate(self.groups):
            first = next((i for i in range(len(self.rounds)) if self.seen[i][j]), None)
            if first is not None:
                out[g] = self.values[-1][j] - self.values[first][j]
        return out

    def to_csv(self) -> str:
        lines = ["round," + ",".join(self.groups)]
        for r, row, seen in zip(self.rounds, self.values, self.seen):
            cells = [f"{v:.6f}" + ("" if s else "*") for v, s in zip(row, seen)]
            lines.append(r + "," + ",".join(cells))
        return "\n".join(lines) + "\n"


def forgetting_matrix(reports: Sequence[MetricsReport], key: str = "exact_match") -> ForgettingMatrix:
    """Row r, column g: score of group g at checkpoint r.  Unseen cells are flagged in ``seen``."""
    if not reports:
        raise InputError("no reports")
    groups = list(reports[0].groups)
    for rep in reports:
        if list(rep.groups) != groups:
            raise InputError(f"report {rep.label!r} has groups {list(rep.groups)}, expected {groups}")
    values = [[rep.groups[g].get(key, float("nan")) for g in groups] for rep in reports]
    seen = [[rep.seen.get(g, True) for g in groups] for rep in reports]
    return ForgettingMatrix([r.label for r in reports], groups, values, seen)
