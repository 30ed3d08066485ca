"""Transition multigraph with frequency counters.

State nodes point to the (state, action) nodes that were tried from them;
action nodes point to observed ``(reward, next_state, terminal)`` outcomes,
each carrying a frequency. Identical transitions are merged, never stored
twice.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .envs import StateKey, TransitionRecord

__all__ = [
    "Edge",
    "TransitionGraph",
    "GraphFormatError",
    "EmptyGraphError",
    "weighted_sample",
]

MAGIC = b"TGPH1"
_EMPTY: list = []

_TAG_STATE = 1
_TAG_EDGE = 2
_TAG_END = 3


class GraphFormatError(ValueError):
    """Malformed graph file. ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class EmptyGraphError(ValueError):
    pass


@dataclass
class Edge:
    """One distinct outcome of an action node."""

    reward: float
    next_state: StateKey
    terminal: bool
    frequency: int = 1

    def as_tuple(self):
        return (self.reward, self.next_state, self.terminal, self.frequency)


def _reward_bits(r: float) -> bytes:
    return struct.pack("<d", r)


class TransitionGraph:
    """Bipartite multigraph over seen states and tried state-action pairs.

    Besides the transition structure, the graph keeps the state-observation
    counts needed for the novel state ratio: every episode start and every
    next state counts as one observation.
    """

    def __init__(self):
        self._states: Dict[StateKey, int] = {}  # state -> observation count
        self._initial: Dict[StateKey, int] = {}
        self._out: Dict[Tuple[StateKey, int], List[Edge]] = {}
        self._index: Dict[tuple, Edge] = {}
        self._sa_count: Dict[Tuple[StateKey, int], int] = {}
        self._s_count: Dict[StateKey, int] = {}
        self._actions: Dict[StateKey, List[int]] = {}
        self._state_edges: Dict[StateKey, List[Tuple[int, Edge]]] = {}
        self.total_transitions = 0
        self.total_observations = 0

    # -- mutation ---------------------------------------------------------
    def _observe(self, s: StateKey, count: int = 1):
        self._states[s] = self._states.get(s, 0) + count
        self.total_observations += count

    def insert(self, record: TransitionRecord, episode_start: bool = False) -> None:
        s, a, s2 = record.state, int(record.action), record.next_state
        if episode_start:
            self._initial[s] = self._initial.get(s, 0) + 1
            self._observe(s)
        elif s not in self._states:
            # a source state never observed before is an implicit start
            self._initial.setdefault(s, 0)
            self._observe(s)
        self._observe(s2)

        key = (s, a, _reward_bits(record.reward), s2, bool(record.terminal))
        edge = self._index.get(key)
        if edge is None:
            edge = Edge(float(record.reward), s2, bool(record.terminal), 0)
            self._index[key] = edge
            sa = (s, a)
            if sa not in self._out:
                self._out[sa] = []
                self._actions.setdefault(s, []).append(a)
            self._out[sa].append(edge)
            self._state_edges.setdefault(s, []).append((a, edge))
        edge.frequency += 1
        self._sa_count[(s, a)] = self._sa_count.get((s, a), 0) + 1
        self._s_count[s] = self._s_count.get(s, 0) + 1
        self.total_transitions += 1

    def insert_many(self, records: Iterable[TransitionRecord], starts: Optional[Iterable[bool]] = None):
        if starts is None:
            for rec in records:
                self.insert(rec)
        else:
            for rec, st in zip(records, starts):
                self.insert(rec, episode_start=st)

    # -- queries ----------------------------------------------------------
    def outgoing(self, s: StateKey, a: int) -> List[Edge]:
        return self._out.get((s, int(a)), [])

    def actions(self, s: StateKey) -> List[int]:
        """Actions tried from ``s``, in first-tried order."""
        return self._actions.get(s, [])

    def state_transitions(self, s: StateKey) -> List[Tuple[int, Edge]]:
        """All ``(action, edge)`` entries leaving ``s`` in insertion order.

        Returns the internal list; callers must not mutate it.
        """
        return self._state_edges.get(s, _EMPTY)

    def count(self, s: StateKey, a: Optional[int] = None) -> int:
        """c(s, a), or c(s) when ``a`` is None."""
        if a is None:
            return self._s_count.get(s, 0)
        return self._sa_count.get((s, int(a)), 0)

    @property
    def state_nodes(self) -> List[StateKey]:
        return list(self._states)

    @property
    def action_nodes(self) -> List[Tuple[StateKey, int]]:
        return list(self._out)

    @property
    def initial_states(self) -> List[StateKey]:
        return list(self._initial)

    def observations(self, s: StateKey) -> int:
        return self._states.get(s, 0)

    @property
    def unique_state_count(self) -> int:
        return len(self._states)

    def edges(self) -> Iterable[Tuple[StateKey, int, Edge]]:
        for (s, a), lst in self._out.items():
            for e in lst:
                yield s, a, e

    @property
    def edge_count(self) -> int:
        return len(self._index)

    def __len__(self):
        return self.total_transitions

    def novel_state_ratio(self) -> float:
        """Unique states over all state observations (with multiplicity)."""
        if self.total_observations == 0:
            raise EmptyGraphError("novel state ratio of an empty graph")
        return len(self._states) / self.total_observations

    def self_loops(self) -> List[Tuple[StateKey, int, Edge]]:
        return [(s, a, e) for s, a, e in self.edges() if e.next_state == s]

    def longest_path(self) -> Optional[int]:
        """Length (in transitions) of the longest path; None if cyclic."""
        order, onstack, depth = {}, set(), {}
        # iterative DFS post-order
        for root in self._states:
            if root in order:
                continue
            stack = [(root, iter(self._succ(root)))]
            onstack.add(root)
            order[root] = True
            while stack:
                node, it = stack[-1]
                nxt = next(it, None)
                if nxt is None:
                    stack.pop()
                    onstack.discard(node)
                    depth[node] = max((1 + (0 if e.terminal else depth[e.next_state])
                                       for _, e in self.state_transitions(node)), default=0)
                    continue
                if nxt in onstack:
                    return None
                if nxt not in order:
                    order[nxt] = True
                    onstack.add(nxt)
                    stack.append((nxt, iter(self._succ(nxt))))
        return max(depth.values(), default=0)

    def _succ(self, s: StateKey):
        return [e.next_state for _, e in self.state_transitions(s) if not e.terminal]

    # -- comparison -------------------------------------------------------
    def __eq__(self, other):
        if not isinstance(other, TransitionGraph):
            return NotImplemented
        return (
            self._states == other._states
            and self._initial == other._initial
            and self.total_transitions == other.total_transitions
            and self._sa_count == other._sa_count
            and {k: sorted(_edge_sort_key(e) for e in v) for k, v in self._out.items()}
            == {k: sorted(_edge_sort_key(e) for e in v) for k, v in other._out.items()}
        )

    def same_entries(self, other: "TransitionGraph") -> bool:
        """Set-of-entries equality, ignoring insertion order and observations."""
        mine = {(s, a, _reward_bits(e.reward), e.next_state, e.terminal): e.frequency for s, a, e in self.edges()}
        theirs = {(s, a, _reward_bits(e.reward), e.next_state, e.terminal): e.frequency for s, a, e in other.edges()}
        return mine == theirs

    # -- persistence ------------------------------------------------------
    def to_bytes(self) -> bytes:
        out = bytearray(MAGIC)
        index = {}
        for s, obs in self._states.items():
            index[s] = len(index)
            body = struct.pack("<BI", _TAG_STATE, len(s.encoding)) + s.encoding + struct.pack(
                "<QqB", obs, self._initial.get(s, -1), s in self._initial)
            out += struct.pack("<I", len(body)) + body
        # global creation order, so every per-state and per-pair list reloads in order
        for (s, a, _, _, _), e in self._index.items():
            body = struct.pack("<BIIdIBQ", _TAG_EDGE, index[s], a, e.reward, index[e.next_state],
                               e.terminal, e.frequency)
            out += struct.pack("<I", len(body)) + body
        body = struct.pack("<BQQ", _TAG_END, self.total_transitions, self.total_observations)
        out += struct.pack("<I", len(body)) + body
        return bytes(out)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> "TransitionGraph":
        if data[: len(MAGIC)] != MAGIC:
            raise GraphFormatError("missing TGPH1 header", 0)
        g = cls()
        states: List[StateKey] = []
        pos = len(MAGIC)
        ended = False
        while pos < len(data):
            if ended:
                raise GraphFormatError("trailing bytes after end record", pos)
            if pos + 4 > len(data):
                raise GraphFormatError("truncated record length", pos)
            (n,) = struct.unpack_from("<I", data, pos)
            start = pos + 4
            if start + n > len(data) or n < 1:
                raise GraphFormatError("truncated record", pos)
            body = data[start:start + n]
            tag = body[0]
            try:
                if tag == _TAG_STATE:
                    (elen,) = struct.unpack_from("<I", body, 1)
                    enc = body[5:5 + elen]
                    obs, init_count, is_init = struct.unpack_from("<QqB", body, 5 + elen)
                    if len(enc) != elen or 5 + elen + 17 != n:
                        raise struct.error("bad state record size")
                    s = StateKey(enc)
                    states.append(s)
                    g._states[s] = obs
                    if is_init:
                        g._initial[s] = init_count
                elif tag == _TAG_EDGE:
                    if n != struct.calcsize("<BIIdIBQ"):
                        raise struct.error("bad edge record size")
                    _, si, a, r, ni, term, f = struct.unpack("<BIIdIBQ", body)
                    s, s2 = states[si], states[ni]
                    edge = Edge(r, s2, bool(term), f)
                    key = (s, a, _reward_bits(r), s2, bool(term))
                    if key in g._index or f < 1:
                        raise struct.error("duplicate or zero-frequency edge")
                    g._index[key] = edge
                    if (s, a) not in g._out:
                        g._out[(s, a)] = []
                        g._actions.setdefault(s, []).append(a)
                    g._out[(s, a)].append(edge)
                    g._state_edges.setdefault(s, []).append((a, edge))
                    g._sa_count[(s, a)] = g._sa_count.get((s, a), 0) + f
                    g._s_count[s] = g._s_count.get(s, 0) + f
                elif tag == _TAG_END:
                    _, total, obs_total = struct.unpack("<BQQ", body)
                    g.total_transitions = total
                    g.total_observations = obs_total
                    ended = True
                else:
                    raise struct.error(f"unknown record tag {tag}")
            except (struct.error, IndexError) as exc:
                raise GraphFormatError(f"bad record: {exc}", pos) from None
            pos = start + n
        if not ended:
            raise GraphFormatError("missing end record (file truncated)", pos)
        if g.total_transitions != sum(g._sa_count.values()):
            raise GraphFormatError("transition total does not match edge frequencies", pos)
        return g

    @classmethod
    def load(cls, path) -> "TransitionGraph":
        return cls.from_bytes(Path(path).read_bytes())

    def edge_list_lines(self) -> List[str]:
        """One line per entry: ``hex(s) action reward hex(s') terminal f``."""
        return [
            f"{s.hex()} {a} {e.reward!r} {e.next_state.hex()} {int(e.terminal)} {e.frequency}"
            for s, a, e in self.edges()
        ]

    def export_edge_list(self, path) -> None:
        Path(path).write_text("".join(line + "\n" for line in self.edge_list_lines()))

    def __repr__(self):
        return (f"TransitionGraph(states={self.unique_state_count}, pairs={len(self._out)}, "
                f"entries={self.edge_count}, transitions={self.total_transitions})")


def _edge_sort_key(e: Edge):
    return (e.next_state.encoding, _reward_bits(e.reward), e.terminal, e.frequency)


def weighted_sample(candidates: Sequence, budget: int, rng: np.random.Generator,
                    weights: Optional[Sequence[float]] = None) -> list:
    """Draw ``budget`` candidates without replacement, proportional to weight.

    ``candidates`` are ``(state, action, Edge)`` triples and weights default
    to the edge frequencies. Uses exponential keys (``log(u) / w``, keep the
    largest), which has the same law as drawing one at a time with
    probability proportional to the remaining weights. When everything fits
    in the budget all candidates are returned and ``rng`` is not touched.
    The result keeps the candidates' original order.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    n = len(candidates)
    if n == 0:
        return []
    if n <= budget:
        return list(candidates)
    if weights is None:
        weights = [c[2].frequency for c in candidates]
    w = np.asarray(weights, dtype=np.float64)
    keys = np.log(rng.random(n)) / w
    chosen = np.argpartition(-keys, budget - 1)[:budget]
    chosen.sort()
    return [candidates[i] for i in chosen]
