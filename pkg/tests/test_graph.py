import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import key
from graphbackup.envs import LoopMDP, TransitionRecord
from graphbackup.graph import EmptyGraphError, GraphFormatError, TransitionGraph, weighted_sample
from graphbackup.learner import collect_random_walk
from graphbackup.envs import SlipperyGrid

S0, S1, S2 = key(0), key(1), key(2)


def three_inserts():
    g = TransitionGraph()
    g.insert(TransitionRecord(S0, 0, 0.0, S1, False), episode_start=True)
    g.insert(TransitionRecord(S0, 0, 0.0, S2, False))
    g.insert(TransitionRecord(S0, 0, 0.0, S1, False))
    return g


def test_first_insert():
    g = TransitionGraph()
    g.insert(TransitionRecord(S0, 0, 0.0, S1, False), episode_start=True)
    assert g.count(S0, 0) == 1
    assert set(g.state_nodes) == {S0, S1}


def test_merge_and_branch():
    g = TransitionGraph()
    rec = TransitionRecord(S0, 0, 0.0, S1, False)
    g.insert(rec)
    g.insert(rec)
    assert [e.frequency for e in g.outgoing(S0, 0)] == [2]
    assert g.count(S0, 0) == 2
    g.insert(TransitionRecord(S0, 0, 0.0, S2, False))
    assert len(g.outgoing(S0, 0)) == 2
    assert g.count(S0, 0) == 3
    assert g.outgoing(S1, 0) == []


def test_reward_is_part_of_the_key():
    g = TransitionGraph()
    g.insert(TransitionRecord(S0, 0, 0.0, S1, False))
    g.insert(TransitionRecord(S0, 0, 1.0, S1, False))
    assert sorted(e.reward for e in g.outgoing(S0, 0)) == [0.0, 1.0]


def test_novel_state_ratio_examples():
    g = TransitionGraph()
    with pytest.raises(EmptyGraphError):
        g.novel_state_ratio()
    g.insert(TransitionRecord(S0, 0, 0.0, S0, False), episode_start=True)
    g.insert(TransitionRecord(S0, 0, 0.0, S0, False))
    g.insert(TransitionRecord(S0, 0, 0.0, S0, False))
    assert g.novel_state_ratio() == 0.25  # one state, four observations
    h = TransitionGraph()
    for i in range(4):
        h.insert(TransitionRecord(key(i), 0, 0.0, key(i + 1), False), episode_start=i == 0)
    assert h.novel_state_ratio() == 1.0


def test_novel_ratio_seven_of_ten():
    g = TransitionGraph()
    # 10 observations: start + 9 next states, 7 distinct
    seq = [0, 1, 2, 3, 1, 4, 5, 2, 6, 0]
    for i in range(9):
        g.insert(TransitionRecord(key(seq[i]), 0, 0.0, key(seq[i + 1]), False), episode_start=i == 0)
    assert g.novel_state_ratio() == pytest.approx(0.7)


def test_self_loops_and_cycles():
    env = LoopMDP()
    g = TransitionGraph()
    for ep in collect_random_walk(env, 200, seed=0):
        for k, rec in enumerate(ep):
            g.insert(rec, episode_start=k == 0)
    assert any(s == e.next_state for s, _, e in g.self_loops())
    assert g.longest_path() is None


def test_longest_path_chain():
    g = TransitionGraph()
    for i in range(3):
        g.insert(TransitionRecord(key(i), 0, 0.0, key(i + 1), i == 2), episode_start=i == 0)
    assert g.longest_path() == 3


def test_round_trip(tmp_path):
    g = three_inserts()
    path = tmp_path / "g.tgph"
    g.save(path)
    h = TransitionGraph.load(path)
    assert h == g
    assert h.to_bytes() == g.to_bytes()
    empty = TransitionGraph.from_bytes(TransitionGraph().to_bytes())
    assert empty.unique_state_count == 0


def test_truncated_and_corrupt_files():
    data = three_inserts().to_bytes()
    for cut in (3, len(data) // 2, len(data) - 1):
        with pytest.raises(GraphFormatError) as info:
            TransitionGraph.from_bytes(data[:cut])
        assert info.value.offset >= 0
    with pytest.raises(GraphFormatError):
        TransitionGraph.from_bytes(data + b"\x00")


records = st.lists(
    st.tuples(st.integers(0, 6), st.integers(0, 2), st.sampled_from([0.0, 0.5, 1.0]), st.integers(0, 6),
              st.booleans(), st.booleans()),
    min_size=1, max_size=40,
)


def _build(rows):
    g = TransitionGraph()
    for s, a, r, s2, term, start in rows:
        g.insert(TransitionRecord(key(s), a, r, key(s2), term), episode_start=start)
    return g


@settings(max_examples=60, deadline=None)
@given(records)
def test_counter_consistency(rows):
    g = _build(rows)
    assert g.total_transitions == len(rows)
    for s, a in g.action_nodes:
        assert g.count(s, a) == sum(e.frequency for e in g.outgoing(s, a))
    for s in g.state_nodes:
        assert g.count(s) == sum(g.count(s, a) for a in g.actions(s))
    assert sum(g.count(s, a) for s, a in g.action_nodes) == g.total_transitions
    assert all(e.frequency >= 1 for _, _, e in g.edges())


@settings(max_examples=60, deadline=None)
@given(records)
def test_novel_ratio_matches_recount(rows):
    g = _build(rows)
    seen = []
    for s, a, r, s2, term, start in rows:
        if start or key(s) not in seen:
            seen.append(key(s))
        seen.append(key(s2))
    assert g.novel_state_ratio() == pytest.approx(len(set(seen)) / len(seen))


@settings(max_examples=60, deadline=None)
@given(records)
def test_serialization_round_trip(rows):
    g = _build(rows)
    h = TransitionGraph.from_bytes(g.to_bytes())
    assert h == g
    assert h.edge_list_lines() == g.edge_list_lines()


def test_episode_order_does_not_change_entries():
    episodes = collect_random_walk(SlipperyGrid(4, 0.3), 400, seed=1)

    def build(eps):
        g = TransitionGraph()
        for ep in eps:
            for k, rec in enumerate(ep):
                g.insert(rec, episode_start=k == 0)
        return g

    assert build(episodes).same_entries(build(episodes[::-1]))
    assert build(episodes) == build(episodes[::-1])


def test_weighted_sample_small_cases():
    rng = np.random.default_rng(0)
    assert weighted_sample([], 5, rng) == []
    assert weighted_sample(["a", "b"], 2, rng, weights=[1, 1]) == ["a", "b"]


def test_weighted_sample_frequency_ratio():
    rng = np.random.default_rng(12345)
    hits = 0
    n = 100_000
    for _ in range(n):
        hits += weighted_sample(["T1", "T2"], 1, rng, weights=[3, 1]) == ["T1"]
    assert abs(hits / n - 0.75) <= 0.01


@settings(max_examples=80, deadline=None)
@given(st.lists(st.integers(1, 9), min_size=0, max_size=20), st.integers(1, 25), st.integers(0, 2**32))
def test_weighted_sample_properties(weights, budget, seed):
    items = list(range(len(weights)))
    out = weighted_sample(items, budget, np.random.default_rng(seed), weights=weights)
    assert len(out) == min(budget, len(items))
    assert len(set(out)) == len(out)
    assert out == sorted(out)  # original order kept
    if budget >= len(items):
        assert out == items
