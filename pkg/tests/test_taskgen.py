import json

import pytest

from tokmem.errors import CapacityError, ParseError, ValidationError
from tokmem.taskgen import (
    CATALOG,
    N_SYMBOLS,
    Procedure,
    ToolCall,
    Vocab,
    encode_calls,
    export_tasks_jsonl,
    gen_atomic_tasks,
    gen_memorization_corpus,
    gen_tool_tasks,
    load_tasks_jsonl,
    make_tools,
    tokenize,
)


def test_shift_by_three_wraps():
    assert Procedure("shift", 3).apply([0, 63]) == [3, 2]


def test_family_semantics():
    xs = [5, 1, 4, 1]
    assert Procedure("reverse").apply(xs) == [1, 4, 1, 5]
    assert Procedure("sort").apply(xs) == [1, 1, 4, 5]
    assert Procedure("duplicate").apply(xs) == [5, 5, 1, 1, 4, 4, 1, 1]
    assert Procedure("every", 2).apply(xs) == [5, 4]
    perm = Procedure("perm", 0).apply(list(range(N_SYMBOLS)))
    assert sorted(perm) == list(range(N_SYMBOLS)) and all(p != i for i, p in enumerate(perm))


def test_atomic_tasks_are_deterministic_and_disjoint():
    a = gen_atomic_tasks(12, 8, 4, seed=1)
    b = gen_atomic_tasks(12, 8, 4, seed=1)
    assert [(t.label, t.train, t.test) for t in a] == [(t.label, t.train, t.test) for t in b]
    assert len({t.label for t in a}) == 12
    for t in a:
        assert not set(t.train) & set(t.test)
        for q, r in t.train + t.test:
            data = q[:-1]
            assert q[-1] == t.cue and 4 <= len(data) <= 12
            assert all(Vocab.is_sym(x) for x in data)
            assert list(r) == t.respond(q)


def test_atomic_capacity():
    gen_atomic_tasks(50, 1, 1, seed=0)
    with pytest.raises(CapacityError):
        gen_atomic_tasks(len(CATALOG) + 1, 1, 1, seed=0)


def test_tool_queries():
    data = gen_tool_tasks(6, [1, 2, 3], 30, 10, seed=4)
    assert data.call_counts() == {1: 10, 2: 10, 3: 10}
    assert not {q.query for q in data.train} & {q.query for q in data.test}
    for q in data.train:
        assert len({c.tool for c in q.calls}) == q.n_calls
        assert list(q.positions) == sorted(set(q.positions))
        tools = {t.id: t for t in data.tools}
        assert q.query == encode_calls(q.calls, tools)[0]
    assert {q.n_calls for q in data.subset(1)} == {1}
    again = gen_tool_tasks(6, [1, 2, 3], 30, 10, seed=4)
    assert again.train == data.train


def test_single_call_gold():
    tools = {t.id: t for t in make_tools(10)}
    add = next(t for t in tools.values() if t.op == "add")
    q, pos = encode_calls([ToolCall(add.id, [2, 3])], tools)
    assert q == (Vocab.mark, add.cue, Vocab.sym(2), Vocab.sym(3)) and pos == (0,)
    assert add.apply(2, 3) == 5


def test_tool_capacity_errors():
    with pytest.raises(CapacityError):
        gen_tool_tasks(2, [3], 5, 5, seed=0)
    with pytest.raises(CapacityError):
        gen_tool_tasks(5, [5], 5, 5, seed=0)
    with pytest.raises(CapacityError):
        make_tools(10, offset=30)


def test_memorization_corpus():
    c = gen_memorization_corpus(8, 128, seed=0)
    assert len(c) == 8 and all(len(s) == 128 for s in c)
    assert sum(map(len, c)) == 1024
    assert c == gen_memorization_corpus(8, 128, seed=0)
    assert all(Vocab.is_sym(t) for s in c for t in s)


def test_tokenizer():
    assert tokenize("s1 s63 <cue:2>") == [Vocab.sym(1), Vocab.sym(63), Vocab.cue(2)]
    assert tokenize("A") == [Vocab.sym(4), Vocab.sym(16 + 1)]


def test_jsonl_roundtrip(tmp_path):
    tasks = gen_atomic_tasks(3, 2, 2, seed=0)
    back = load_tasks_jsonl(export_tasks_jsonl(tasks, tmp_path / "t.jsonl"))
    assert [(t.id, t.label, t.train, t.test, t.cue) for t in back] == [(t.id, t.label, t.train, t.test, t.cue) for t in tasks]
    assert back[0].respond(back[0].test[0][0]) == list(back[0].test[0][1])


@pytest.mark.parametrize(
    "line, field",
    [
        ('{"label": "x", "train": [], "test": []}', "task_id"),
        ('{"task_id": 1, "label": "x", "train": [{"query": "s1"}], "test": []}', "response"),
        ('{"task_id": 1, "label": "x", "train": [], "test": [{"query": 5, "response": "s1"}]}', "query"),
    ],
)
def test_jsonl_errors_name_line_and_field(tmp_path, line, field):
    p = tmp_path / "bad.jsonl"
    p.write_text(json.dumps({"task_id": 0, "label": "ok", "train": [], "test": []}) + "\n" + line + "\n")
    with pytest.raises(ParseError) as err:
        load_tasks_jsonl(p)
    assert err.value.line == 2 and err.value.field == field
    assert "line 2" in str(err.value)


def test_jsonl_duplicates_and_bad_json(tmp_path):
    p = tmp_path / "dup.jsonl"
    row = json.dumps({"task_id": 0, "label": "ok", "train": [], "test": []})
    p.write_text(row + "\n" + row + "\n")
    with pytest.raises(ValidationError):
        load_tasks_jsonl(p)
    p.write_text("{oops\n")
    with pytest.raises(ParseError):
        load_tasks_jsonl(p)
