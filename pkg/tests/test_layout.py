import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tokmem.errors import InputError, LengthError
from tokmem.layout import (
    INFIX,
    PREFIX,
    ProcedurePair,
    build_infix_sequence,
    build_memorization_sequence,
    build_plain_sequence,
    build_prefix_sequence,
    collate,
    parse_infix,
    response_only_mask,
)
from tokmem.model import EOS

V = 50


def test_single_pair_layout_and_mask():
    s = build_infix_sequence([10, 11, 12], [ProcedurePair(V, [20])], V)
    assert s.ids == (10, 11, 12, V, 20, EOS)
    assert s.loss_mask == (False, False, False, True, True, True)
    assert s.memory_positions == (3,)


def test_explicit_eos_not_duplicated():
    s = build_infix_sequence([10], [ProcedurePair(V, [20, EOS])], V)
    assert s.ids == (10, V, 20, EOS)


def test_two_pairs_have_increasing_memory_positions():
    s = build_infix_sequence([10, 11], [ProcedurePair(V, [20, 21]), ProcedurePair(V + 1, [22])], V)
    assert s.memory_positions == (2, 5)
    assert s.ids[-1] == EOS and s.ids.count(EOS) == 1


def test_infix_errors():
    with pytest.raises(InputError):
        build_infix_sequence([1, 2], [], V)
    with pytest.raises(InputError):
        build_infix_sequence([], [ProcedurePair(V, [5])], V)
    with pytest.raises(InputError):
        build_infix_sequence([5], [ProcedurePair(7, [5])], V)
    with pytest.raises(LengthError, match="pair 1"):
        build_infix_sequence([5] * 4, [ProcedurePair(V, [6] * 3), ProcedurePair(V + 1, [6] * 5)], V, max_seq_len=12)


def test_prefix_layout():
    s = build_prefix_sequence([V], [10, 11, 12], [20, 21, 22, 23])
    assert s.ids[0] == V and s.memory_positions == (0,)
    assert sum(s.loss_mask) == 5
    assert s.loss_mask == (False,) * 4 + (True,) * 5
    five = build_prefix_sequence(list(range(V, V + 5)), [10], [20])
    assert five.memory_positions == (0, 1, 2, 3, 4)
    plain = build_prefix_sequence([], [10, 11], [20])
    assert plain.memory_positions == () and plain.loss_mask == (False, False, True, True)
    assert build_plain_sequence([10, 11], [20]) == plain
    with pytest.raises(LengthError):
        build_prefix_sequence([V], [1] * 10, [2] * 10, max_seq_len=16)


def test_memorization_placements_score_same_targets():
    inf = build_memorization_sequence([10, 11], [V, V + 1], [20, 21, 22], INFIX)
    pre = build_memorization_sequence([10, 11], [V, V + 1], [20, 21, 22], PREFIX)
    assert inf.ids == (10, 11, V, V + 1, 20, 21, 22, EOS)
    assert pre.ids == (V, V + 1, 10, 11, 20, 21, 22, EOS)
    target = lambda s: [t for t, m in zip(s.ids, s.loss_mask) if m]
    assert target(inf) == target(pre) == [20, 21, 22, EOS]
    assert inf.memory_positions == (2, 3) and pre.memory_positions == (0, 1)


def test_response_only_mask_drops_memory_positions():
    s = build_infix_sequence([10], [ProcedurePair(V, [20]), ProcedurePair(V + 1, [21])], V)
    r = response_only_mask(s)
    assert sum(r.loss_mask) == sum(s.loss_mask) - 2


def test_collate_shifts_targets():
    a = build_infix_sequence([10], [ProcedurePair(V, [20])], V)
    b = build_infix_sequence([10, 11, 12], [ProcedurePair(V, [20, 21])], V)
    t = collate([a, b])
    assert t["ids"].shape == (2, 7)
    assert t["targets"][0, :3].tolist() == [V, 20, EOS]
    assert t["mask"][0].tolist() == [True, True, True, False, False, False]


query_st = st.lists(st.integers(4, V - 1), min_size=1, max_size=6)
pair_st = st.builds(
    lambda m, r: ProcedurePair(V + m, r), st.integers(0, 5), st.lists(st.integers(4, V - 1), min_size=1, max_size=4)
)


@settings(max_examples=200, deadline=None)
@given(query_st, st.lists(pair_st, min_size=1, max_size=4))
def test_parse_inverts_build_and_mask_counts(query, pairs):
    s = build_infix_sequence(query, pairs, V)
    q, back = parse_infix(s, V)
    assert q == query
    expected = list(pairs)
    last = expected[-1]
    expected[-1] = ProcedurePair(last.memory_id, list(last.response) + [EOS])
    assert back == expected
    n_resp = sum(len(p.response) for p in pairs) + 1
    assert sum(s.loss_mask) == len(pairs) + n_resp
    assert all(m == (i >= len(query)) for i, m in enumerate(s.loss_mask))
