"""Graph density statistics, value-stability reports and radial layouts."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .envs import StateKey
from .graph import EmptyGraphError, TransitionGraph

__all__ = [
    "META_ROOT",
    "RadialLayout",
    "crossover_probability",
    "compute_radial_layout",
    "export_dot",
    "pearson_correlation",
    "window_stats",
    "stability_report",
    "stability_report_from_log",
    "graph_stats",
]

META_ROOT = "meta_root"


def crossover_probability(novel_ratio: float, horizon: int) -> float:
    """Chance of meeting at least one previously seen state within ``horizon``
    steps, treating each step as an independent draw: ``1 - r**h``."""
    if not 0.0 < novel_ratio <= 1.0:
        raise ValueError("novel state ratio must be in (0, 1]")
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    return 1.0 - novel_ratio ** horizon


def pearson_correlation(xs: Sequence[float], ys: Sequence[float]) -> float:
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ValueError("need two equal-length sequences with at least 2 points")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise ValueError("correlation undefined for zero-variance input")
    return float(dx @ dy) / math.sqrt(sxx * syy)


# -- stability of value estimates ---------------------------------------------------

def window_stats(rings: Mapping, min_count: int = 2) -> Tuple[float, float, int]:
    """Average over pairs of the mean and sample std of their recent estimates.

    Pairs with fewer than ``min_count`` estimates are skipped. Returns
    ``(mean_of_means, mean_of_stds, pair_count)``; NaNs when no pair
    qualifies.
    """
    by_len: Dict[int, List] = {}
    for ring in rings.values():
        if len(ring) >= min_count:
            by_len.setdefault(len(ring), []).append(ring)
    if not by_len:
        return math.nan, math.nan, 0
    means, stds = [], []
    for group in by_len.values():
        arr = np.array(group, dtype=np.float64)
        means.append(arr.mean(axis=1))
        stds.append(arr.std(axis=1, ddof=1))
    means, stds = np.concatenate(means), np.concatenate(stds)
    return float(means.mean()), float(stds.mean()), int(means.size)


def stability_report(metrics) -> Dict[str, Tuple[float, float]]:
    """Per operator: (mean of per-pair means, mean of per-pair sample stds)
    over each pair's last estimates. Accepts one RunMetrics or a list; runs
    sharing an operator are pooled.
    """
    runs = metrics if isinstance(metrics, (list, tuple)) else [metrics]
    pooled: Dict[str, List] = {}
    for run in runs:
        pooled.setdefault(run.op, []).extend(run.rings.values())
    report = {}
    for op, rings in pooled.items():
        m, s, n = window_stats(dict(enumerate(rings)))
        if n == 0:
            raise ValueError(f"no populated estimate windows for operator {op!r}")
        report[op] = (m, s)
    if not report:
        raise ValueError("no runs given")
    return report


def stability_report_from_log(op: str, log: Iterable[Tuple[int, StateKey, int, float]],
                              window: int = 10) -> Dict[str, Tuple[float, float]]:
    """Recompute :func:`stability_report` from a raw estimate log."""
    rings: Dict[Tuple[StateKey, int], deque] = {}
    for _, s, a, value in log:
        ring = rings.get((s, a))
        if ring is None:
            ring = rings[(s, a)] = deque(maxlen=window)
        ring.append(value)
    m, s, n = window_stats(rings)
    if n == 0:
        raise ValueError("no populated estimate windows")
    return {op: (m, s)}


# -- graph statistics -----------------------------------------------------------------

def graph_stats(graph: TransitionGraph, horizons: Sequence[int] = (5, 10)) -> List[dict]:
    """Stats records ``{metric, value, params}`` for a transition graph."""
    nsr = graph.novel_state_ratio()
    out = [
        {"metric": "novel_state_ratio", "value": nsr, "params": {}},
        {"metric": "unique_states", "value": graph.unique_state_count, "params": {}},
        {"metric": "total_states", "value": graph.total_observations, "params": {}},
        {"metric": "total_transitions", "value": graph.total_transitions, "params": {}},
        {"metric": "self_loops", "value": len(graph.self_loops()), "params": {}},
    ]
    for h in horizons:
        out.append({"metric": "crossover_probability", "value": crossover_probability(nsr, h),
                    "params": {"horizon": h}})
    return out


# -- radial layout ----------------------------------------------------------------------

NodeId = Union[StateKey, str]


@dataclass
class RadialLayout:
    """Polar positions for every state plus the synthetic meta-initial root.

    ``edges`` are the distinct state-to-state links drawn by the layout (root
    links included); self-loops are kept apart in ``self_loops`` with their
    summed frequencies.
    """

    root: str
    positions: Dict[NodeId, Tuple[float, float]]
    depth: Dict[NodeId, int]
    edges: Dict[Tuple[NodeId, NodeId], int] = field(default_factory=dict)
    self_loops: Dict[StateKey, int] = field(default_factory=dict)
    unreached: List[StateKey] = field(default_factory=list)

    def cartesian(self, node: NodeId, scale: float = 1.0) -> Tuple[float, float]:
        r, theta = self.positions[node]
        return scale * r * math.cos(theta), scale * r * math.sin(theta)


def compute_radial_layout(graph: TransitionGraph, initial_states: Optional[Sequence[StateKey]] = None) -> RadialLayout:
    """BFS from a meta-root linked to every initial state.

    Radius is BFS depth. Each node's children split its angular sector in
    proportion to their number of leaves in the BFS tree, and the node sits at
    the middle of its own sector. States not reachable from the root go on a
    ring just outside the deepest level.
    """
    if graph.unique_state_count == 0:
        raise EmptyGraphError("cannot lay out an empty graph")
    if initial_states is None:
        initial_states = graph.initial_states
    links: Dict[Tuple[NodeId, NodeId], int] = {}
    loops: Dict[StateKey, int] = {}
    succ: Dict[StateKey, List[StateKey]] = {}
    for s, _, e in graph.edges():
        if e.next_state == s:
            loops[s] = loops.get(s, 0) + e.frequency
            continue
        key = (s, e.next_state)
        if key not in links:
            succ.setdefault(s, []).append(e.next_state)
        links[key] = links.get(key, 0) + e.frequency

    roots = list(dict.fromkeys(initial_states))
    edges: Dict[Tuple[NodeId, NodeId], int] = {}
    for s in roots:
        edges[(META_ROOT, s)] = 1
    edges.update(links)

    depth: Dict[NodeId, int] = {META_ROOT: 0}
    children: Dict[NodeId, List[NodeId]] = {META_ROOT: []}
    frontier: List[NodeId] = []
    for s in roots:
        if s not in depth:
            depth[s] = 1
            children[META_ROOT].append(s)
            children[s] = []
            frontier.append(s)
    while frontier:
        nxt = []
        for node in frontier:
            for child in succ.get(node, ()):
                if child not in depth:
                    depth[child] = depth[node] + 1
                    children[node].append(child)
                    children[child] = []
                    nxt.append(child)
        frontier = nxt

    leaves: Dict[NodeId, int] = {}

    def count_leaves(node):
        stack = [(node, False)]
        while stack:
            n, done = stack.pop()
            if done:
                kids = children[n]
                leaves[n] = sum(leaves[k] for k in kids) if kids else 1
            else:
                stack.append((n, True))
                stack.extend((k, False) for k in children[n])

    count_leaves(META_ROOT)
    positions: Dict[NodeId, Tuple[float, float]] = {META_ROOT: (0.0, 0.0)}
    stack = [(META_ROOT, 0.0, 2.0 * math.pi)]
    while stack:
        node, lo, hi = stack.pop()
        if node != META_ROOT:
            positions[node] = (float(depth[node]), (lo + hi) / 2.0)
        kids = children[node]
        total = sum(leaves[k] for k in kids)
        start = lo
        for k in kids:
            width = (hi - lo) * leaves[k] / total
            stack.append((k, start, start + width))
            start += width

    unreached = [s for s in graph.state_nodes if s not in depth]
    if unreached:
        ring = float(max(depth.values()) + 1)
        for i, s in enumerate(unreached):
            positions[s] = (ring, 2.0 * math.pi * i / len(unreached))
            depth[s] = int(ring)
    return RadialLayout(META_ROOT, positions, depth, edges, loops, unreached)


def _node_name(node: NodeId) -> str:
    return META_ROOT if node == META_ROOT else "s" + node.hex()


def export_dot(graph: TransitionGraph, layout: RadialLayout, path=None, scale: float = 1.0) -> str:
    """Write the layout as a DOT digraph with pinned node positions.

    Edge ``penwidth`` is ``1 + ln(frequency)``; self-loops are emitted as
    loop edges with ``style=dashed``. Returns the DOT text.
    """
    if graph.unique_state_count == 0:
        raise EmptyGraphError("cannot export an empty graph")
    lines = [
        "digraph transitions {",
        '  graph [layout=neato, overlap=true, splines=false];',
        '  node [shape=point, width=0.05];',
        '  edge [arrowsize=0.3];',
    ]
    nodes = [META_ROOT] + [s for s in graph.state_nodes]
    for node in nodes:
        x, y = layout.cartesian(node, scale)
        attrs = f'pos="{x:.6f},{y:.6f}!"'
        if node == META_ROOT:
            attrs += ', shape=doublecircle, label="meta"'
        lines.append(f'  "{_node_name(node)}" [{attrs}];')
    for (u, v), f in layout.edges.items():
        lines.append(f'  "{_node_name(u)}" -> "{_node_name(v)}" [penwidth={1.0 + math.log(f):.6f}];')
    for s, f in layout.self_loops.items():
        lines.append(f'  "{_node_name(s)}" -> "{_node_name(s)}" [penwidth={1.0 + math.log(f):.6f}, style=dashed];')
    lines.append("}")
    text = "\n".join(lines) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text
