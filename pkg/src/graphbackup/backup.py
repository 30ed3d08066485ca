"""Backup target operators.

Trajectory-based operators (one-step, n-step-Q, Tree Backup) read a slice of
a recorded episode. Graph operators read the :class:`TransitionGraph`: they
expand a local subgraph around the source pair under a depth limit and a
breadth budget, then evaluate it bottom-up against a frozen target table.

Conventions shared by every operator:

* a terminal transition contributes its reward only;
* ties in max/argmax go to the lowest action index;
* ``double=True`` selects bootstrap actions with the online table and
  evaluates them with the target-side estimates.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .envs import StateKey, TransitionRecord
from .graph import Edge, TransitionGraph, weighted_sample

__all__ = [
    "OPERATORS",
    "BackupConfig",
    "ExpansionList",
    "BackupError",
    "CycleError",
    "one_step_target",
    "n_step_q_target",
    "tree_backup_target",
    "expand_local_graph",
    "graph_backup_target",
    "mixed_graph_backup_target",
    "distributional_graph_backup",
    "categorical_projection",
    "naive_recursive_target",
    "derive_rng",
]

OPERATORS = ("one_step", "n_step_q", "tree", "graph", "graph_mixed")


class BackupError(ValueError):
    pass


class CycleError(BackupError):
    pass


@dataclass(frozen=True)
class BackupConfig:
    """Operator choice and its limits.

    ``depth`` is the number of transitions a multi-step or graph target looks
    ahead; ``breadth`` is the per-level transition budget of graph expansion
    (per state-action pair when ``per_pair_cap`` is set). ``policy`` switches
    the target policy from greedy to an explicit table ``{state: probs}``;
    states missing from the table use the uniform policy.
    """

    operator: str = "graph"
    depth: int = 5
    breadth: int = 50
    gamma: float = 0.95
    double: bool = False
    distributional: bool = False
    per_pair_cap: bool = False
    policy: Optional[Mapping[StateKey, Sequence[float]]] = field(default=None, compare=False)

    def __post_init__(self):
        if self.operator not in OPERATORS:
            raise BackupError(f"backup.operator must be one of {OPERATORS}, got {self.operator!r}")
        if int(self.depth) < 1:
            raise BackupError("backup.depth must be >= 1")
        if int(self.breadth) < 1:
            raise BackupError("backup.breadth must be >= 1")
        if not 0.0 <= float(self.gamma) < 1.0:
            raise BackupError("backup.gamma must be in [0, 1)")
        if self.distributional and self.operator != "graph":
            raise BackupError("distributional targets are implemented for the graph operator only")

    @property
    def policy_mode(self) -> str:
        return "greedy" if self.policy is None else "explicit"


def derive_rng(seed: int, step: int, source: Tuple[StateKey, int]) -> np.random.Generator:
    """Independent stream per (run seed, optimization step, source pair)."""
    s, a = source
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, int(step), s.digest, int(a)])


# -- shared bootstrap ----------------------------------------------------------

def _policy_probs(cfg: BackupConfig, s: StateKey, n: int) -> np.ndarray:
    p = cfg.policy.get(s)
    if p is None:
        return np.full(n, 1.0 / n)
    return np.asarray(p, dtype=np.float64)


def _bootstrap(row, s: StateKey, cfg: BackupConfig, online, refined=()) -> float:
    """Value of state ``s`` given its per-action estimates ``row`` (a list).

    ``refined`` holds the actions whose entries were recomputed by the
    backup; under double selection those entries replace the online values so
    that online == target reproduces the plain max exactly.
    """
    if cfg.policy is not None:
        return float(sum(p * x for p, x in zip(_policy_probs(cfg, s, len(row)), row)))
    if cfg.double:
        if online is None:
            raise BackupError("double targets need the online table")
        sel = online.values(s).tolist()
        for a in refined:
            sel[a] = row[a]
        return row[sel.index(max(sel))]
    return max(row)


# -- trajectory operators --------------------------------------------------------

def one_step_target(t: TransitionRecord, target, cfg: BackupConfig, online=None) -> float:
    """r + gamma * max_a' q'(s', a'); just r on terminal transitions."""
    if t.terminal:
        return float(t.reward)
    row = target.values(t.next_state).tolist()
    return float(t.reward) + cfg.gamma * _bootstrap(row, t.next_state, cfg, online)


def _window(traj: Sequence[TransitionRecord], n: int) -> Sequence[TransitionRecord]:
    if len(traj) == 0:
        raise BackupError("empty trajectory slice")
    if n < 1:
        raise BackupError("n must be >= 1")
    m = min(n, len(traj))
    for k in range(m):
        if traj[k].terminal:
            return traj[:k + 1]
    return traj[:m]


def n_step_q_target(traj: Sequence[TransitionRecord], n: int, target, cfg: BackupConfig, online=None) -> float:
    """Discounted sum of the next m <= n rewards plus a bootstrapped tail.

    The window stops at the episode end; a terminal last step drops the
    bootstrap term.
    """
    win = _window(traj, n)
    g, disc = 0.0, 1.0
    for rec in win:
        g += disc * rec.reward
        disc *= cfg.gamma
    last = win[-1]
    if not last.terminal:
        g += disc * _bootstrap(target.values(last.next_state).tolist(), last.next_state, cfg, online)
    return float(g)


def tree_backup_target(traj: Sequence[TransitionRecord], n: int, target, cfg: BackupConfig, online=None) -> float:
    """Greedy Tree Backup along the recorded window.

    Off-trajectory actions are leaves valued by the target table; the taken
    action at each step is replaced by its recursive return.
    """
    win = _window(traj, n)
    last = win[-1]
    if last.terminal:
        v = 0.0
    else:
        v = _bootstrap(target.values(last.next_state).tolist(), last.next_state, cfg, online)
    g = 0.0
    for k in range(len(win) - 1, -1, -1):
        rec = win[k]
        g = rec.reward + (0.0 if rec.terminal else cfg.gamma * v)
        if k == 0:
            break
        row = target.values(rec.state).tolist()
        row[rec.action] = g
        v = _bootstrap(row, rec.state, cfg, online, (rec.action,))
    return float(g)


# -- local graph expansion -------------------------------------------------------

@dataclass
class ExpansionList:
    """Pairs selected by local graph expansion, grouped by depth level.

    ``levels[i]`` lists ``(state, action, selected_edges)`` in append order.
    Level 0 holds only the source pair.
    """

    source: Tuple[StateKey, int]
    levels: List[List[Tuple[StateKey, int, List[Edge]]]]

    @property
    def pairs(self) -> List[Tuple[StateKey, int]]:
        return [(s, a) for level in self.levels for s, a, _ in level]

    def selected(self, level: int) -> List[Tuple[StateKey, int, Edge]]:
        return [(s, a, e) for s, a, edges in self.levels[level] for e in edges]

    @property
    def depth(self) -> int:
        return len(self.levels)

    @property
    def expanded_states(self) -> List[StateKey]:
        return list(dict.fromkeys(s for level in self.levels for s, _, _ in level))

    def __len__(self):
        return sum(len(level) for level in self.levels)


def _group(selected) -> List[Tuple[StateKey, int, List[Edge]]]:
    groups: Dict[Tuple[StateKey, int], List[Edge]] = {}
    for s, a, e in selected:
        groups.setdefault((s, a), []).append(e)
    return [(s, a, edges) for (s, a), edges in groups.items()]


def expand_local_graph(graph: TransitionGraph, source: Tuple[StateKey, int], depth: int, breadth: int,
                       rng: Optional[np.random.Generator] = None, per_pair_cap: bool = False) -> ExpansionList:
    """Breadth-limited, depth-limited expansion around ``source``.

    Level 0 samples among the source pair's own transitions. Each later
    level collects every transition leaving the current boundary states,
    keeps ``breadth`` of them drawn proportional to frequency, and moves the
    boundary to their (non-terminal) next states.
    """
    if depth < 1 or breadth < 1:
        raise BackupError("depth and breadth must be >= 1")
    if rng is None:
        rng = np.random.default_rng(0)
    s0, a0 = source[0], int(source[1])
    first = [(s0, a0, e) for e in graph.outgoing(s0, a0)]
    levels = [[(s0, a0, [])]]
    if not first:
        return ExpansionList((s0, a0), levels)

    candidates = first
    for i in range(depth):
        if per_pair_cap:
            chosen = []
            for s, a, edges in _group(candidates):
                chosen += weighted_sample([(s, a, e) for e in edges], breadth, rng)
        else:
            chosen = weighted_sample(candidates, breadth, rng)
        if i == 0:
            levels[0] = [(s0, a0, [e for _, _, e in chosen])]
        else:
            levels.append(_group(chosen))
        boundary = list(dict.fromkeys(e.next_state for _, _, e in chosen if not e.terminal))
        candidates = [(s, a, e) for s in boundary for a, e in graph.state_transitions(s)]
        if not candidates:
            break
    return ExpansionList((s0, a0), levels)


# -- graph operators -------------------------------------------------------------

def graph_backup_target(graph: TransitionGraph, source: Tuple[StateKey, int], online, target,
                        cfg: BackupConfig, rng: Optional[np.random.Generator] = None,
                        expansion: Optional[ExpansionList] = None) -> float:
    """Frequency-weighted recursive backup over the local subgraph.

    Pairs are evaluated in reverse expansion order into a memo seeded with
    target-table values, so boundary pairs fall back to the target table.
    Averages are renormalized over the transitions actually selected.
    """
    s0, a0 = source[0], int(source[1])
    if graph.count(s0, a0) == 0:
        return float(target.q(s0, a0))
    if expansion is None:
        expansion = expand_local_graph(graph, (s0, a0), cfg.depth, cfg.breadth, rng, cfg.per_pair_cap)
    rows: Dict[StateKey, list] = {}
    refined: Dict[StateKey, set] = {}
    values = target.values
    gamma = cfg.gamma
    plain_max = cfg.policy is None and not cfg.double
    for level in reversed(expansion.levels):
        for s, a, edges in reversed(level):
            if not edges:
                continue
            total = 0
            acc = 0.0
            for e in edges:
                f = e.frequency
                if e.terminal:
                    acc += f * e.reward
                else:
                    s2 = e.next_state
                    r2 = rows.get(s2)
                    if r2 is None:
                        r2 = rows[s2] = values(s2).tolist()
                    if plain_max:
                        v = max(r2)
                    else:
                        v = _bootstrap(r2, s2, cfg, online, refined.get(s2, ()))
                    acc += f * (e.reward + gamma * v)
                total += f
            r = rows.get(s)
            if r is None:
                r = rows[s] = values(s).tolist()
            r[a] = acc / total
            refined.setdefault(s, set()).add(a)
    return float(rows[s0][a0])


def mixed_graph_backup_target(graph: TransitionGraph, source: Tuple[StateKey, int], target,
                              cfg: BackupConfig, rng: Optional[np.random.Generator] = None,
                              expansion: Optional[ExpansionList] = None) -> float:
    """Graph backup that averages over interior actions by frequency.

    Interior states take the frequency-weighted mean over all of their
    selected transitions (whatever the action); the max is applied only at
    boundary states, through the target table.
    """
    s0, a0 = source[0], int(source[1])
    if graph.count(s0, a0) == 0:
        return float(target.q(s0, a0))
    if expansion is None:
        expansion = expand_local_graph(graph, (s0, a0), cfg.depth, cfg.breadth, rng, cfg.per_pair_cap)
    gamma = cfg.gamma
    state_value: Dict[StateKey, float] = {}

    def value(s):
        v = state_value.get(s)
        if v is None:
            row = np.asarray(target.values(s), dtype=np.float64)
            v = float(_policy_probs(cfg, s, row.shape[0]) @ row) if cfg.policy is not None else float(row.max())
        return v

    def average(edges):
        acc = sum(e.frequency * (e.reward + (0.0 if e.terminal else gamma * value(e.next_state))) for e in edges)
        return acc / sum(e.frequency for e in edges)

    for level in reversed(expansion.levels[1:]):
        by_state: Dict[StateKey, List[Edge]] = {}
        for s, _, edges in level:
            by_state.setdefault(s, []).extend(edges)
        for s in reversed(list(by_state)):
            state_value[s] = average(by_state[s])
    return float(average(expansion.levels[0][0][2]))


def categorical_projection(probs: np.ndarray, reward: float, gamma: float, atoms: np.ndarray,
                           v_min: float, v_max: float, terminal: bool = False, out: Optional[np.ndarray] = None,
                           weight: float = 1.0) -> np.ndarray:
    """Project the shifted distribution ``reward + gamma * Z`` onto ``atoms``.

    Each shifted atom's mass is split between its two neighbouring atoms in
    proportion to distance; a shifted atom landing exactly on a support
    point keeps all of its mass there.
    """
    n = atoms.shape[0]
    dz = (v_max - v_min) / (n - 1)
    if out is None:
        out = np.zeros(n)
    if terminal:
        tz = np.clip(np.full(n, float(reward)), v_min, v_max)
    else:
        tz = np.clip(reward + gamma * atoms, v_min, v_max)
    b = (tz - v_min) / dz
    lo = np.floor(b).astype(np.int64)
    hi = np.ceil(b).astype(np.int64)
    np.clip(lo, 0, n - 1, out=lo)
    np.clip(hi, 0, n - 1, out=hi)
    w_lo = hi - b
    w_hi = b - lo
    same = lo == hi
    w_lo[same] = 1.0
    w_hi[same] = 0.0
    mass = weight * np.asarray(probs, dtype=np.float64)
    np.add.at(out, lo, mass * w_lo)
    np.add.at(out, hi, mass * w_hi)
    return out


def distributional_graph_backup(graph: TransitionGraph, source: Tuple[StateKey, int], online, target,
                                expansion: Optional[ExpansionList], cfg: BackupConfig,
                                rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Categorical graph backup; returns the source pair's target distribution.

    Same traversal as :func:`graph_backup_target`, applying the categorical
    Bellman projection at every expanded pair. The bootstrap action at each
    next state is the greedy action under the memo's expected values (or the
    online table under ``double``).
    """
    s0, a0 = source[0], int(source[1])
    if graph.count(s0, a0) == 0:
        return np.array(target.dist(s0, a0), dtype=np.float64)
    if expansion is None:
        expansion = expand_local_graph(graph, (s0, a0), cfg.depth, cfg.breadth, rng, cfg.per_pair_cap)
    atoms = np.asarray(target.atoms)
    v_min, v_max = target.v_min, target.v_max
    rows: Dict[StateKey, np.ndarray] = {}
    refined: Dict[StateKey, np.ndarray] = {}

    def row(s):
        r = rows.get(s)
        if r is None:
            r = rows[s] = np.array(target.dists(s), dtype=np.float64)
            refined[s] = np.zeros(r.shape[0], dtype=bool)
        return r

    def pick(s):
        r = row(s)
        means = r @ atoms
        if cfg.policy is not None:
            return None
        if cfg.double:
            if online is None:
                raise BackupError("double targets need the online table")
            sel = np.array(online.values(s), dtype=np.float64)
            sel[refined[s]] = means[refined[s]]
            return int(np.argmax(sel))
        return int(np.argmax(means))

    for level in reversed(expansion.levels):
        for s, a, edges in reversed(level):
            if not edges:
                continue
            total = float(sum(e.frequency for e in edges))
            m = np.zeros(atoms.shape[0])
            for e in edges:
                w = e.frequency / total
                if e.terminal:
                    uniform = np.full(atoms.shape[0], 1.0 / atoms.shape[0])
                    categorical_projection(uniform, e.reward, cfg.gamma, atoms, v_min, v_max,
                                           terminal=True, out=m, weight=w)
                    continue
                s2 = e.next_state
                a_star = pick(s2)
                if a_star is None:
                    pi = _policy_probs(cfg, s2, row(s2).shape[0])
                    child = pi @ row(s2)
                else:
                    child = row(s2)[a_star]
                categorical_projection(child, e.reward, cfg.gamma, atoms, v_min, v_max, out=m, weight=w)
            if abs(m.sum() - 1.0) > 1e-6:
                raise BackupError(f"projected distribution sums to {m.sum()!r}")
            row(s)[a] = m
            refined[s][a] = True
    return row(s0)[a0].copy()


# -- exhaustive oracle -----------------------------------------------------------

def naive_recursive_target(graph: TransitionGraph, source: Tuple[StateKey, int], target, gamma: float,
                           depth_cap: Optional[int] = None, policy=None) -> float:
    """Exact graph backup by unbounded recursion with memoization.

    Every transition is expanded, with no breadth limit. Without
    ``depth_cap`` a cycle raises :class:`CycleError`; with it, pairs at depth
    ``depth_cap`` are valued by the target table.
    """
    A = target.action_count
    memo: Dict[tuple, float] = {}
    active = set()
    cfg = BackupConfig(operator="graph", gamma=gamma, policy=policy)

    def pair_value(s, a, depth):
        key = (s, a) if depth_cap is None else (s, a, depth)
        if key in memo:
            return memo[key]
        edges = graph.outgoing(s, a)
        if not edges or (depth_cap is not None and depth >= depth_cap):
            val = float(target.q(s, a))
            memo[key] = val
            return val
        if key in active:
            raise CycleError(f"cycle through state {s.hex()} action {a}; pass depth_cap")
        active.add(key)
        acc = 0.0
        total = 0
        for e in edges:
            if e.terminal:
                acc += e.frequency * e.reward
            else:
                row = np.array([pair_value(e.next_state, b, depth + 1) for b in range(A)])
                acc += e.frequency * (e.reward + gamma * _bootstrap(row, e.next_state, cfg, None))
            total += e.frequency
        active.discard(key)
        memo[key] = acc / total
        return memo[key]

    limit = sys.getrecursionlimit()
    sys.setrecursionlimit(max(limit, 10_000))
    try:
        return pair_value(source[0], int(source[1]), 0)
    finally:
        sys.setrecursionlimit(limit)
