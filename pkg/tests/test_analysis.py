import math
from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import build_graph, key
from graphbackup.analysis import (
    META_ROOT,
    compute_radial_layout,
    crossover_probability,
    export_dot,
    graph_stats,
    pearson_correlation,
    stability_report,
    stability_report_from_log,
)
from graphbackup.backup import BackupConfig
from graphbackup.envs import EmptyGrid, LoopMDP, TransitionRecord
from graphbackup.graph import EmptyGraphError, TransitionGraph
from graphbackup.learner import LearnerConfig, RunMetrics, collect_random_walk, offline_training

T = TransitionRecord


def chain(n_states=3, offset=0):
    recs = [T(key(offset + i), 0, 0.0, key(offset + i + 1), i == n_states - 2) for i in range(n_states - 1)]
    return recs


def test_crossover_examples():
    assert abs(crossover_probability(0.927, 10) - 0.5314) <= 5e-4
    assert crossover_probability(1.0, 7) == 0.0
    assert crossover_probability(0.5, 1) == 0.5
    for bad in ((0.0, 3), (1.2, 3), (0.5, 0)):
        with pytest.raises(ValueError):
            crossover_probability(*bad)


@given(st.floats(0.01, 1.0), st.floats(0.01, 1.0), st.integers(1, 30))
def test_crossover_monotone(r1, r2, h):
    lo, hi = sorted((r1, r2))
    assert crossover_probability(lo, h) >= crossover_probability(hi, h)
    assert crossover_probability(lo, h + 1) >= crossover_probability(lo, h)


def test_pearson_examples():
    xs = [1.0, 2.0, 3.0, 5.0]
    assert pearson_correlation(xs, xs) == pytest.approx(1.0)
    assert pearson_correlation(xs, [-x for x in xs]) == pytest.approx(-1.0)
    assert pearson_correlation([1, 2, 3], [2, 4, 7]) == pytest.approx(0.9934, abs=5e-5)
    with pytest.raises(ValueError):
        pearson_correlation([1, 1, 1], [1, 2, 3])
    with pytest.raises(ValueError):
        pearson_correlation([1], [2])


@settings(max_examples=50)
@given(st.lists(st.tuples(st.floats(-100, 100), st.floats(-100, 100)), min_size=3, max_size=30))
def test_pearson_matches_numpy(pairs):
    xs, ys = zip(*pairs)
    if np.std(xs) < 1e-6 or np.std(ys) < 1e-6:
        return
    assert pearson_correlation(xs, ys) == pytest.approx(np.corrcoef(xs, ys)[0, 1], abs=1e-9)


def metrics_with(rings, op="graph"):
    m = RunMetrics(op=op)
    for i, values in enumerate(rings):
        m.rings[(key(i), 0)] = deque(values, maxlen=10)
    return m


def test_stability_examples():
    assert stability_report(metrics_with([[2.0] * 10]))["graph"] == (2.0, 0.0)
    alt = [0.0, 1.0] * 5
    _, sd = stability_report(metrics_with([alt]))["graph"]
    assert sd == pytest.approx(0.527, abs=5e-4)
    _, sd2 = stability_report(metrics_with([[1.0] * 10, alt]))["graph"]
    assert sd2 == pytest.approx(0.2635, abs=5e-4)
    with pytest.raises(ValueError):
        stability_report(RunMetrics(op="graph"))


def test_stability_from_log_matches_incremental():
    data = collect_random_walk(EmptyGrid(3), 400, seed=0)
    m = offline_training(data, LearnerConfig(total_steps=300, eval_every=100), BackupConfig(operator="tree"))
    assert stability_report_from_log("tree", m.estimate_log) == stability_report(m)


def test_layout_chain_radii():
    g = build_graph(chain(3), starts={0})
    layout = compute_radial_layout(g)
    assert layout.positions[META_ROOT][0] == 0.0
    assert [layout.positions[key(i)][0] for i in range(3)] == [1.0, 2.0, 3.0]


def test_layout_two_chains():
    recs = chain(3) + chain(3, offset=10)
    g = build_graph(recs, starts={0, 2})
    layout = compute_radial_layout(g)
    assert layout.depth[key(0)] == layout.depth[key(10)] == 1
    assert layout.positions[key(0)][1] != layout.positions[key(10)][1]


def test_layout_self_loop_kept_apart():
    g = TransitionGraph()
    for ep in collect_random_walk(LoopMDP(), 100, seed=0):
        for k, rec in enumerate(ep):
            g.insert(rec, episode_start=k == 0)
    layout = compute_radial_layout(g)
    a = LoopMDP().reset(0)
    assert a in layout.self_loops
    assert (a, a) not in layout.edges


def test_layout_sectors_and_unreached():
    # root -> s0 -> {s1 -> {s3, s4}, s2}; s9 -> s8 never reached from a start
    recs = [T(key(0), 0, 0.0, key(1), False), T(key(0), 1, 0.0, key(2), True),
            T(key(1), 0, 0.0, key(3), True), T(key(1), 1, 0.0, key(4), True),
            T(key(9), 0, 0.0, key(8), True)]
    g = build_graph(recs, starts={0})
    layout = compute_radial_layout(g, [key(0)])
    assert set(layout.unreached) == {key(9), key(8)}
    assert layout.positions[key(9)][0] == 4.0
    # s1 has two leaves, s2 one: s1's sector is twice as wide, so angles are 2pi/3 and 5pi/3
    assert layout.positions[key(1)][1] == pytest.approx(2 * math.pi / 3)
    assert layout.positions[key(2)][1] == pytest.approx(5 * math.pi / 3)
    assert compute_radial_layout(g, [key(0)]) == layout


def test_export_dot_counts_and_parse(tmp_path):
    pydot = pytest.importorskip("pydot")
    g = build_graph(chain(3), starts={0})
    text = export_dot(g, compute_radial_layout(g), tmp_path / "g.dot")
    (parsed,) = pydot.graph_from_dot_data(text)
    nodes = [n for n in parsed.get_nodes() if n.get_name() not in ("node", "edge", "graph")]
    assert len(nodes) == 4
    assert len(parsed.get_edges()) == 3
    assert (tmp_path / "g.dot").read_text() == text


def test_export_dot_penwidth():
    recs = [T(key(0), 0, 0.0, key(1), False)] * 3
    g = build_graph(recs, starts={0})
    text = export_dot(g, compute_radial_layout(g))
    assert f"penwidth={1 + math.log(3):.6f}" in text


def test_empty_graph_errors():
    with pytest.raises(EmptyGraphError):
        compute_radial_layout(TransitionGraph())


def test_graph_stats_records():
    g = build_graph(chain(4), starts={0})
    recs = {(r["metric"], r["params"].get("horizon")): r["value"] for r in graph_stats(g)}
    assert recs[("novel_state_ratio", None)] == 1.0
    assert recs[("crossover_probability", 10)] == 0.0
    assert recs[("unique_states", None)] == 4
