"""Deterministic synthetic task suites and JSONL ingestion.

Token layout of the toy vocabulary (see :class:`Vocab`)::

    0..3      PAD BOS EOS SEP
    4..67     64 data symbols (symbol value v -> token 4 + v)
    68..131   64 cue tokens (task / tool identifiers that appear in queries)
    132..     one instruction token per catalog procedure (used to pretrain
              the stand-in backbone), then tool-name tokens, then the call
              marker
"""
from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .errors import CapacityError, InputError, ParseError, ValidationError
from .model import N_SPECIAL

N_SYMBOLS = 64
N_CUES = 64
N_TOOL_NAMES = 32
SHIFT_KEYS = tuple(range(1, 25))
N_PERMS = 24
EVERY_J = (2, 3)
QUERY_LEN = (4, 12)
CATALOG_SEED = 20250917


# ------------------------------------------------------------------ vocabulary


def _perm_table(t: int) -> tuple[int, ...]:
    rng = random.Random(CATALOG_SEED * 1000 + t)
    table = list(range(N_SYMBOLS))
    while True:
        rng.shuffle(table)
        if all(table[i] != i for i in range(N_SYMBOLS)):
            return tuple(table)


@dataclass(frozen=True)
class Procedure:
    family: str
    param: int | None = None

    @property
    def label(self) -> str:
        return self.family if self.param is None else f"{self.family}-{self.param}"

    def apply(self, xs: Sequence[int]) -> list[int]:
        """Apply to symbol values (0..63), not token ids."""
        f, t = self.family, self.param
        if f == "reverse":
            return list(reversed(xs))
        if f == "sort":
            return sorted(xs)
        if f == "duplicate":
            return [x for x in xs for _ in range(2)]
        if f == "every":
            return list(xs[::t])
        if f == "shift":
            return [(x + t) % N_SYMBOLS for x in xs]
        if f == "perm":
            table = _perm_table(t)
            return [table[x] for x in xs]
        raise InputError(f"unknown family {f!r}")


def procedure_catalog() -> list[Procedure]:
    """Every procedure the toy world knows, in a fixed interleaved order."""
    base = [Procedure("reverse"), Procedure("sort"), Procedure("duplicate")]
    base += [Procedure("every", j) for j in EVERY_J]
    shifts = [Procedure("shift", t) for t in SHIFT_KEYS]
    perms = [Procedure("perm", t) for t in range(N_PERMS)]
    out = list(base)
    for a, b in zip(shifts, perms):
        out += [a, b]
    return out


CATALOG = procedure_catalog()


class Vocab:
    specials = N_SPECIAL
    sym0 = N_SPECIAL
    cue0 = sym0 + N_SYMBOLS
    instr0 = cue0 + N_CUES
    tool0 = instr0 + len(CATALOG)
    mark = tool0 + N_TOOL_NAMES
    size = mark + 1

    @classmethod
    def sym(cls, v: int) -> int:
        if not 0 <= v < N_SYMBOLS:
            raise InputError(f"symbol value {v} out of range")
        return cls.sym0 + v

    @classmethod
    def sym_value(cls, tok: int) -> int:
        return tok - cls.sym0

    @classmethod
    def is_sym(cls, tok: int) -> bool:
        return cls.sym0 <= tok < cls.sym0 + N_SYMBOLS

    @classmethod
    def cue(cls, i: int) -> int:
        if not 0 <= i < N_CUES:
            raise InputError(f"cue index {i} out of range")
        return cls.cue0 + i

    @classmethod
    def instr(cls, proc: Procedure) -> int:
        return cls.instr0 + CATALOG.index(proc)

    @classmethod
    def tool_name(cls, i: int) -> int:
        if not 0 <= i < N_TOOL_NAMES:
            raise InputError(f"tool name index {i} out of range")
        return cls.tool0 + i


VOCAB_SIZE = Vocab.size


# ----------------------------------------------------------------- atomic tasks


Example = tuple[tuple[int, ...], tuple[int, ...]]


@dataclass
class ProcedureSpec:
    """One atomic task: queries are data symbols followed by the task's cue token."""

    id: int
    label: str
    family: str
    params: dict = field(default_factory=dict)
    train: list[Example] = field(default_factory=list)
    test: list[Example] = field(default_factory=list)
    cue: int | None = None

    @property
    def procedure(self) -> Procedure | None:
        if self.family == "external":
            return None
        return Procedure(self.family, self.params.get("t"))

    def respond(self, query: Sequence[int]) -> list[int]:
        """Gold response token ids for a query (cue token, if any, is ignored)."""
        proc = self.procedure
        if proc is None:
            raise InputError(f"task {self.label!r} has no generative rule")
        data = [Vocab.sym_value(t) for t in query if Vocab.is_sym(t)]
        return [Vocab.sym(v) for v in proc.apply(data)]


def _random_data(rng: random.Random) -> list[int]:
    n = rng.randint(*QUERY_LEN)
    return [rng.randrange(N_SYMBOLS) for _ in range(n)]


def _probe_queries() -> list[list[int]]:
    rng = random.Random(CATALOG_SEED)
    return [_random_data(rng) for _ in range(4)]


def gen_atomic_tasks(n_tasks: int, train_per_task: int, test_per_task: int, seed: int) -> list[ProcedureSpec]:
    """Draw ``n_tasks`` distinct procedures and sample disjoint train/test queries.

    Task ``i`` gets cue token ``Vocab.cue(i)``; procedures are drawn from a
    seeded permutation of the catalog.
    """
    if n_tasks < 1:
        raise InputError("n_tasks must be >= 1")
    capacity = min(len(CATALOG), N_CUES)
    if n_tasks > capacity:
        raise CapacityError(f"requested {n_tasks} tasks, catalog capacity is {capacity}")
    rng = random.Random(seed)
    order = list(range(len(CATALOG)))
    rng.shuffle(order)
    probes = _probe_queries()
    seen_behaviour: dict[tuple, str] = {}
    tasks = []
    for i in range(n_tasks):
        proc = CATALOG[order[i]]
        behaviour = tuple(tuple(proc.apply(q)) for q in probes)
        if behaviour in seen_behaviour:
            raise ValidationError(f"{proc.label} is indistinguishable from {seen_behaviour[behaviour]} on the probes")
        seen_behaviour[behaviour] = proc.label
        cue = Vocab.cue(i)
        trng = random.Random(f"{seed}/{i}/{proc.label}")
        seen: set[tuple[int, ...]] = set()
        examples: list[Example] = []
        while len(examples) < train_per_task + test_per_task:
            data = _random_data(trng)
            q = tuple(Vocab.sym(v) for v in data) + (cue,)
            if q in seen:
                continue
            seen.add(q)
            examples.append((q, tuple(Vocab.sym(v) for v in proc.apply(data))))
        params = {} if proc.param is None else {"t": proc.param}
        tasks.append(
            ProcedureSpec(i, proc.label, proc.family, params, examples[:train_per_task], examples[train_per_task:], cue)
        )
    return tasks


# ----------------------------------------------------------------- tool tasks

TOOL_SEMANTICS: dict[str, tuple[int, Callable[..., int]]] = {
    "add": (2, lambda a, b: (a + b) % N_SYMBOLS),
    "mul_mod": (2, lambda a, b: (a * b) % N_SYMBOLS),
    "max": (2, lambda a, b: max(a, b)),
    "min": (2, lambda a, b: min(a, b)),
    "sub": (2, lambda a, b: (a - b) % N_SYMBOLS),
    "negate": (1, lambda a: (-a) % N_SYMBOLS),
    "double": (1, lambda a: (2 * a) % N_SYMBOLS),
    "square": (1, lambda a: (a * a) % N_SYMBOLS),
    "halve": (1, lambda a: a // 2),
    "succ": (1, lambda a: (a + 1) % N_SYMBOLS),
}


@dataclass(frozen=True)
class ToolSpec:
    id: int
    label: str
    arity: int
    op: str
    cue: int
    name_token: int

    def apply(self, *args: int) -> int:
        return TOOL_SEMANTICS[self.op][1](*args)


@dataclass(frozen=True)
class ToolCall:
    tool: int
    args: tuple[int, ...]

    def __init__(self, tool: int, args: Sequence[int]):
        object.__setattr__(self, "tool", int(tool))
        object.__setattr__(self, "args", tuple(int(a) for a in args))


@dataclass(frozen=True)
class ToolQuery:
    query: tuple[int, ...]
    calls: tuple[ToolCall, ...]
    positions: tuple[int, ...]

    @property
    def n_calls(self) -> int:
        return len(self.calls)


@dataclass
class ToolDataset:
    tools: list[ToolSpec]
    train: list[ToolQuery]
    test: list[ToolQuery]

    def subset(self, n_calls: Iterable[int] | int, split: str = "train") -> list[ToolQuery]:
        counts = {n_calls} if isinstance(n_calls, int) else set(n_calls)
        return [q for q in getattr(self, split) if q.n_calls in counts]

    def call_counts(self, split: str = "train") -> dict[int, int]:
        out: dict[int, int] = {}
        for q in getattr(self, split):
            out[q.n_calls] = out.get(q.n_calls, 0) + 1
        return dict(sorted(out.items()))


def make_tools(n_tools: int, offset: int = 0) -> list[ToolSpec]:
    """Tools ``offset .. offset+n_tools-1``; cue and name tokens are indexed by tool id."""
    if offset + n_tools > min(N_TOOL_NAMES, N_CUES):
        raise CapacityError(f"only {min(N_TOOL_NAMES, N_CUES)} tool identities available")
    ops = list(TOOL_SEMANTICS)
    tools = []
    for i in range(offset, offset + n_tools):
        op = ops[i % len(ops)]
        arity = TOOL_SEMANTICS[op][0]
        tools.append(ToolSpec(i, f"{op}_{i}", arity, op, Vocab.cue(N_CUES - 1 - i), Vocab.tool_name(i)))
    return tools


def encode_calls(calls: Sequence[ToolCall], tools: dict[int, ToolSpec]) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Serialize calls as ``MARK cue arg...`` segments; returns (query, segment start positions)."""
    q: list[int] = []
    pos = []
    for c in calls:
        pos.append(len(q))
        q += [Vocab.mark, tools[c.tool].cue] + [Vocab.sym(a) for a in c.args]
    return tuple(q), tuple(pos)


def gen_tool_tasks(
    n_tools: int,
    call_counts: Iterable[int],
    n_train: int,
    n_test: int,
    seed: int,
    tool_offset: int = 0,
) -> ToolDataset:
    """Synthetic function-calling data.

    Each query concatenates 1-4 calls to distinct tools.  Train and test
    queries are disjoint, and counts cycle through ``call_counts`` so every
    requested count is represented.
    """
    counts = sorted(set(call_counts))
    if not counts or min(counts) < 1 or max(counts) > 4:
        raise CapacityError(f"call counts must lie in 1..4, got {counts}")
    if n_tools < max(counts):
        raise CapacityError(f"{n_tools} tools cannot fill {max(counts)} distinct calls")
    tools = make_tools(n_tools, tool_offset)
    by_id = {t.id: t for t in tools}
    rng = random.Random(seed)
    seen: set[tuple[int, ...]] = set()

    def draw(n: int) -> list[ToolQuery]:
        out = []
        attempts = 0
        while len(out) < n:
            attempts += 1
            if attempts > 100 * n + 1000:
                raise CapacityError("cannot draw enough distinct tool queries")
            k = counts[len(out) % len(counts)]
            chosen = rng.sample(tools, k)
            calls = tuple(ToolCall(t.id, [rng.randrange(N_SYMBOLS) for _ in range(t.arity)]) for t in chosen)
            q, pos = encode_calls(calls, by_id)
            if q in seen:
                continue
            seen.add(q)
            out.append(ToolQuery(q, calls, pos))
        return out

    train = draw(n_train)
    test = draw(n_test)
    return ToolDataset(tools, train, test)


# --------------------------------------------------------- memorization corpus


def gen_memorization_corpus(n_sequences: int, seq_len: int, seed: int, skew: float = 0.0) -> list[list[int]]:
    """Random symbol sequences standing in for text unseen during pretraining.

    ``skew = 0`` draws tokens uniformly.  ``skew > 0`` draws from a Zipf-like
    distribution over a seeded permutation of the alphabet (weights
    ``1 / rank**skew``), which gives a memory token something learnable at
    small scale.
    """
    rng = random.Random(seed)
    if skew <= 0:
        return [[Vocab.sym(rng.randrange(N_SYMBOLS)) for _ in range(seq_len)] for _ in range(n_sequences)]
    order = list(range(N_SYMBOLS))
    rng.shuffle(order)
    weights = [1.0 / (r + 1) ** skew for r in range(N_SYMBOLS)]
    return [[Vocab.sym(v) for v in rng.choices(order, weights, k=seq_len)] for _ in range(n_sequences)]


def marker_queries(n: int, length: int, seed: int) -> list[list[int]]:
    """Random query strings that only mark a sequence (placement study)."""
    rng = random.Random(seed)
    return [[Vocab.sym(rng.randrange(N_SYMBOLS)) for _ in range(length)] for _ in range(n)]


# ------------------------------------------------------------------ JSONL I/O


def tokenize(text: str) -> list[int]:
    """Toy tokenizer: ``s<v>`` words map to data symbols, ``<cue:i>`` to cue tokens,
    anything else falls back to its UTF-8 bytes, each byte spelled as two
    data symbols (high and low nibble)."""
    out: list[int] = []
    for word in text.split():
        if word.startswith("s") and word[1:].isdigit() and int(word[1:]) < N_SYMBOLS:
            out.append(Vocab.sym(int(word[1:])))
        elif word.startswith("<cue:") and word.endswith(">") and word[5:-1].isdigit():
            out.append(Vocab.cue(int(word[5:-1])))
        else:
            for b in word.encode("utf-8"):
                out += [Vocab.sym(b >> 4), Vocab.sym(16 + (b & 15))]
    return out


def _ids(value, line: int, field: str) -> tuple[int, ...]:
    if isinstance(value, str):
        return tuple(tokenize(value))
    if isinstance(value, list) and all(isinstance(v, int) and not isinstance(v, bool) for v in value):
        return tuple(value)
    raise ParseError(f"field {field!r} must be a string or a list of token ids", line, field)


def _examples(obj: dict, key: str, line: int) -> list[Example]:
    if key not in obj:
        raise ParseError(f"missing field {key!r}", line, key)
    if not isinstance(obj[key], list):
        raise ParseError(f"field {key!r} must be a list", line, key)
    out = []
    for ex in obj[key]:
        if not isinstance(ex, dict):
            raise ParseError(f"{key} entries must be objects", line, key)
        for f in ("query", "response"):
            if f not in ex:
                raise ParseError(f"{key} entry missing field {f!r}", line, f)
        out.append((_ids(ex["query"], line, "query"), _ids(ex["response"], line, "response")))
    return out


def load_tasks_jsonl(path: str | Path) -> list[ProcedureSpec]:
    """Read one task per line: ``{"task_id", "label", "train": [...], "test": [...]}``.

    Optional keys ``family``, ``params`` and ``cue`` round-trip generated tasks.
    """
    specs: list[ProcedureSpec] = []
    ids: set = set()
    with open(path, encoding="utf-8") as fh:
        for n, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc.msg}", n) from exc
            if not isinstance(obj, dict):
                raise ParseError("line is not a JSON object", n)
            for f in ("task_id", "label"):
                if f not in obj:
                    raise ParseError(f"missing field {f!r}", n, f)
            train = _examples(obj, "train", n)
            test = _examples(obj, "test", n)
            tid = obj["task_id"]
            if tid in ids:
                raise ValidationError(f"line {n}: duplicate task_id {tid!r}")
            ids.add(tid)
            specs.append(
                ProcedureSpec(
                    id=tid,
                    label=str(obj["label"]),
                    family=obj.get("family", "external"),
                    params=dict(obj.get("params", {})),
                    train=train,
                    test=test,
                    cue=obj.get("cue"),
                )
            )
    return specs


def export_tasks_jsonl(tasks: Sequence[ProcedureSpec], path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for t in tasks:
            obj = {
                "task_id": t.id,
                "label": t.label,
                "family": t.family,
                "params": t.params,
                "cue": t.cue,
                "train": [{"query": list(q), "response": list(r)} for q, r in t.train],
                "test": [{"query": list(q), "response": list(r)} for q, r in t.test],
            }
            fh.write(json.dumps(obj, sort_keys=True) + "\n")
    return path
