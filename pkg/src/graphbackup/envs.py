"""Small Markovian environments with canonical state keys and an exact oracle.

Every environment keeps its state as a tuple of small integers. The tuple is
serialized into a fixed-width little-endian byte string (``StateKey``) so the
same state always produces the same key, across runs and platforms.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

__all__ = [
    "StateKey",
    "TransitionRecord",
    "EnvSpec",
    "Env",
    "EmptyGrid",
    "DoorKeyGrid",
    "SlipperyGrid",
    "ChainMDP",
    "LoopMDP",
    "CrossoverMDP",
    "make_env",
    "parse_env",
    "optimal_q_oracle",
    "EnvError",
    "UnsupportedEnvError",
]


class EnvError(RuntimeError):
    """Raised when an environment contract is violated."""


class UnsupportedEnvError(EnvError):
    pass


class StateKey(bytes):
    """Canonical byte encoding of a full environment state.

    A ``bytes`` subclass: equality always compares the full encoding, so two
    states never merge on a digest collision. ``digest`` is a stable 64-bit
    BLAKE2b hash of the encoding, used to derive per-pair random streams.
    """

    __slots__ = ()

    @property
    def encoding(self) -> bytes:
        return bytes(self)

    @property
    def digest(self) -> int:
        return int.from_bytes(hashlib.blake2b(self, digest_size=8).digest(), "little")

    def __repr__(self):
        return f"StateKey({self.hex()})"

    __str__ = __repr__


@dataclass(frozen=True)
class TransitionRecord:
    state: StateKey
    action: int
    reward: float
    next_state: StateKey
    terminal: bool


@dataclass(frozen=True)
class EnvSpec:
    name: str
    action_count: int
    max_episode_steps: int
    stochastic: bool = False
    params: Tuple = ()


class Env:
    """Base class for the built-in tabular environments.

    Subclasses define ``_start()``, ``_kernel(state, action)`` and
    ``_encode(state)``. ``_kernel`` returns the exact list of
    ``(probability, reward, next_state, terminal)`` outcomes and backs both
    stepping and the value-iteration oracle.
    """

    spec: EnvSpec
    _fmt: str = "<"

    def __init__(self):
        self._state = None
        self._done = True
        self._t = 0
        self.truncated = False
        self._rng = np.random.default_rng(0)

    # -- subclass hooks -------------------------------------------------
    def _start(self) -> tuple:
        raise NotImplementedError

    def _kernel(self, state: tuple, action: int) -> List[Tuple[float, float, tuple, bool]]:
        raise NotImplementedError

    def _encode(self, state: tuple) -> bytes:
        return struct.pack(self._fmt, *state)

    # -- public API -----------------------------------------------------
    @property
    def action_count(self) -> int:
        return self.spec.action_count

    @property
    def name(self) -> str:
        return self.spec.name

    def key(self, state: tuple) -> StateKey:
        return StateKey(self._encode(state))

    @property
    def state(self) -> tuple:
        return self._state

    def reset(self, seed: int = 0) -> StateKey:
        self._rng = np.random.default_rng(np.uint64(seed & 0xFFFFFFFFFFFFFFFF))
        self._state = self._start()
        self._done = False
        self.truncated = False
        self._t = 0
        return self.key(self._state)

    def step(self, action: int) -> Tuple[float, StateKey, bool]:
        """Advance one step; returns ``(reward, next_key, terminal)``.

        ``truncated`` is exposed separately as an attribute because a time
        limit ends the episode without making the state absorbing.
        """
        if self._state is None or self._done:
            raise EnvError("step() called on a terminal or un-reset environment")
        if not 0 <= int(action) < self.action_count:
            raise EnvError(f"action {action} out of range [0, {self.action_count})")
        outcomes = self._kernel(self._state, int(action))
        if len(outcomes) == 1:
            _, reward, nxt, terminal = outcomes[0]
        else:
            probs = np.array([o[0] for o in outcomes])
            idx = int(self._rng.choice(len(outcomes), p=probs / probs.sum()))
            _, reward, nxt, terminal = outcomes[idx]
        self._state = nxt
        self._t += 1
        self.truncated = (not terminal) and self._t >= self.spec.max_episode_steps
        self._done = bool(terminal) or self.truncated
        return float(reward), self.key(nxt), bool(terminal)

    @property
    def done(self) -> bool:
        return self._done

    def states(self) -> List[tuple]:
        """All states reachable from the start state (BFS order)."""
        start = self._start()
        seen = {start: None}
        queue = [start]
        while queue:
            s = queue.pop(0)
            for a in range(self.action_count):
                for p, _, nxt, terminal in self._kernel(s, a):
                    if nxt not in seen and not terminal:
                        seen[nxt] = None
                        queue.append(nxt)
                    elif terminal and nxt not in seen:
                        seen[nxt] = None
            if len(seen) > 1_000_000:
                raise UnsupportedEnvError(f"{self.name}: state space too large to enumerate")
        return list(seen)

    def clone(self) -> "Env":
        """Fresh instance with the same parameters."""
        return type(self)(*self.spec.params)

    def transitions(self, state: tuple, action: int):
        return self._kernel(state, action)

    def is_terminal_state(self, state: tuple) -> bool:
        return False

    def __repr__(self):
        args = ", ".join(repr(p) for p in self.spec.params)
        return f"{type(self).__name__}({args})"


# ---------------------------------------------------------------------------
# grid worlds

_MOVES = ((-1, 0), (0, 1), (1, 0), (0, -1))  # up, right, down, left


class EmptyGrid(Env):
    """n x n open room, start top-left, unit reward at the bottom-right goal."""

    _fmt = "<hh"

    def __init__(self, n: int = 8):
        super().__init__()
        if n < 2:
            raise ValueError("grid size must be >= 2")
        self.n = int(n)
        self.goal = (self.n - 1, self.n - 1)
        self.spec = EnvSpec(type(self).__name__, 4, 4 * self.n * self.n, False, (self.n,))

    def _start(self):
        return (0, 0)

    def _move(self, pos, action):
        dr, dc = _MOVES[action]
        r, c = pos[0] + dr, pos[1] + dc
        if 0 <= r < self.n and 0 <= c < self.n:
            return (r, c)
        return pos

    def _kernel(self, state, action):
        if state == self.goal:
            raise EnvError("goal state is absorbing")
        nxt = self._move(state, action)
        if nxt == self.goal:
            return [(1.0, 1.0, nxt, True)]
        return [(1.0, 0.0, nxt, False)]

    def is_terminal_state(self, state):
        return state == self.goal


class SlipperyGrid(EmptyGrid):
    """EmptyGrid where the commanded move is replaced by a uniform random
    move with probability ``p``."""

    def __init__(self, n: int = 5, p: float = 0.2):
        super().__init__(n)
        if not 0.0 <= p <= 1.0:
            raise ValueError("slip probability must be in [0, 1]")
        self.p = float(p)
        self.spec = EnvSpec("SlipperyGrid", 4, 4 * self.n * self.n, self.p > 0, (self.n, self.p))

    def _kernel(self, state, action):
        if state == self.goal:
            raise EnvError("goal state is absorbing")
        probs: Dict[tuple, float] = {}
        for a in range(4):
            w = self.p / 4 + (1.0 - self.p if a == action else 0.0)
            if w == 0.0:
                continue
            nxt = self._move(state, a)
            probs[nxt] = probs.get(nxt, 0.0) + w
        out = []
        for nxt, w in probs.items():
            if nxt == self.goal:
                out.append((w, 1.0, nxt, True))
            else:
                out.append((w, 0.0, nxt, False))
        return out


class DoorKeyGrid(Env):
    """Two rooms split by a wall column with a locked door.

    The key lies in the left room; walking onto it picks it up. Walking into
    the door with the key opens it. State is ``(row, col, has_key, door_open)``.
    """

    _fmt = "<hhBB"

    def __init__(self, n: int = 6):
        super().__init__()
        if n < 4:
            raise ValueError("DoorKeyGrid needs n >= 4")
        self.n = int(n)
        self.wall_col = self.n // 2
        self.door = (self.n - 2, self.wall_col)
        self.key_pos = (self.n - 1, 0)
        self.goal = (self.n - 1, self.n - 1)
        self.spec = EnvSpec("DoorKeyGrid", 4, 4 * self.n * self.n, False, (self.n,))

    def _start(self):
        return (0, 0, 0, 0)

    def _kernel(self, state, action):
        r, c, has_key, door_open = state
        if (r, c) == self.goal:
            raise EnvError("goal state is absorbing")
        dr, dc = _MOVES[action]
        nr, nc = r + dr, c + dc
        if not (0 <= nr < self.n and 0 <= nc < self.n):
            nr, nc = r, c
        elif nc == self.wall_col:
            if (nr, nc) != self.door:
                nr, nc = r, c
            elif not door_open:
                if has_key:
                    door_open = 1
                else:
                    nr, nc = r, c
        if (nr, nc) == self.key_pos and not has_key:
            has_key = 1
        nxt = (nr, nc, has_key, door_open)
        if (nr, nc) == self.goal:
            return [(1.0, 1.0, nxt, True)]
        return [(1.0, 0.0, nxt, False)]

    def is_terminal_state(self, state):
        return state[:2] == self.goal


# ---------------------------------------------------------------------------
# hand-built graphs


class _TableMDP(Env):
    """Deterministic MDP given as ``{node: [(reward, next, terminal), ...]}``."""

    _fmt = "<B"
    node_names: Tuple[str, ...] = ()
    table: Dict[int, List[Tuple[float, int, bool]]] = {}
    start_node = 0

    def _start(self):
        return (self.start_node,)

    def _kernel(self, state, action):
        node = state[0]
        if node not in self.table:
            raise EnvError(f"node {self.node_names[node]} is absorbing")
        reward, nxt, terminal = self.table[node][action]
        return [(1.0, reward, (nxt,), terminal)]

    def is_terminal_state(self, state):
        return state[0] not in self.table

    def node_key(self, name: str) -> StateKey:
        return self.key((self.node_names.index(name),))


class ChainMDP(_TableMDP):
    """Chain of n states; ``right`` from the last state pays 1 and terminates.

    Action 0 moves left (clamped at 0), action 1 moves right.
    """

    def __init__(self, n: int = 5):
        super().__init__()
        if n < 1:
            raise ValueError("chain length must be >= 1")
        self.n = int(n)
        self.node_names = tuple(f"C{i}" for i in range(self.n + 1))
        self.table = {
            i: [(0.0, max(i - 1, 0), False), (1.0 if i == self.n - 1 else 0.0, i + 1, i == self.n - 1)]
            for i in range(self.n)
        }
        self.spec = EnvSpec("ChainMDP", 2, 4 * (self.n + 1), False, (self.n,))


class LoopMDP(_TableMDP):
    """A -> B -> C -> D(goal) with a self-loop at A and back edges."""

    node_names = ("A", "B", "C", "D")

    def __init__(self):
        super().__init__()
        self.table = {
            0: [(0.0, 0, False), (0.0, 1, False)],
            1: [(0.0, 0, False), (0.0, 2, False)],
            2: [(0.0, 1, False), (1.0, 3, True)],
        }
        self.spec = EnvSpec("LoopMDP", 2, 20, False, ())


class CrossoverMDP(_TableMDP):
    """Two routes from S0 that cross at X.

    Rewarded route:   S0 -a0-> A1 -> X -a0-> A2 -> G (reward 1)
    Unrewarded route: S0 -a1-> B1 -> X -a1-> B2 -> D (reward 0)
    A1, B1, A2 and B2 move forward under either action.
    """

    node_names = ("S0", "A1", "B1", "X", "A2", "B2", "G", "D")

    def __init__(self):
        super().__init__()
        self.table = {
            0: [(0.0, 1, False), (0.0, 2, False)],
            1: [(0.0, 3, False), (0.0, 3, False)],
            2: [(0.0, 3, False), (0.0, 3, False)],
            3: [(0.0, 4, False), (0.0, 5, False)],
            4: [(1.0, 6, True), (1.0, 6, True)],
            5: [(0.0, 7, True), (0.0, 7, True)],
        }
        self.spec = EnvSpec("CrossoverMDP", 2, 10, False, ())

    def route(self, rewarded: bool) -> List[int]:
        """Action sequence that follows one of the two routes."""
        return [0, 0, 0, 0] if rewarded else [1, 0, 1, 0]


_REGISTRY = {
    "EmptyGrid": EmptyGrid,
    "DoorKeyGrid": DoorKeyGrid,
    "SlipperyGrid": SlipperyGrid,
    "ChainMDP": ChainMDP,
    "LoopMDP": LoopMDP,
    "CrossoverMDP": CrossoverMDP,
}


def make_env(name: str, *params) -> Env:
    if name not in _REGISTRY:
        raise KeyError(f"unknown environment {name!r}; choose from {sorted(_REGISTRY)}")
    cls = _REGISTRY[name]
    return cls(*params)


def parse_env(text: str) -> Env:
    """Build an env from ``Name`` or ``Name:p1,p2`` (e.g. ``SlipperyGrid:5,0.2``)."""
    name, _, rest = text.partition(":")
    params = []
    for tok in filter(None, (t.strip() for t in rest.split(","))):
        params.append(float(tok) if any(ch in tok for ch in ".eE") else int(tok))
    return make_env(name.strip(), *params)


def env_label(env: Env) -> str:
    if not env.spec.params:
        return env.name
    return env.name + ":" + ",".join(str(p) for p in env.spec.params)


def optimal_q_oracle(env: Env, gamma: float, tol: float = 1e-12, max_iter: int = 100_000):
    """Value iteration over the exact transition kernel.

    Returns ``{(StateKey, action): q*}`` for every non-terminal reachable
    state. Iterates until the sup-norm change drops below ``tol``.
    """
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must be in [0, 1)")
    states = [s for s in env.states() if not env.is_terminal_state(s)]
    index = {s: i for i, s in enumerate(states)}
    A = env.action_count
    # flatten the kernel: per (state, action) a list of (prob, reward, next index or -1)
    kernel = []
    for s in states:
        row = []
        for a in range(A):
            row.append([(p, r, -1 if term or nxt not in index else index[nxt])
                        for p, r, nxt, term in env.transitions(s, a)])
        kernel.append(row)
    q = np.zeros((len(states), A))
    for _ in range(max_iter):
        v = q.max(axis=1)
        new = np.empty_like(q)
        for i, row in enumerate(kernel):
            for a, outs in enumerate(row):
                new[i, a] = sum(p * (r + (gamma * v[j] if j >= 0 else 0.0)) for p, r, j in outs)
        delta = np.abs(new - q).max()
        q = new
        if delta < tol:
            break
    else:
        raise EnvError("value iteration did not converge")
    return {(env.key(s), a): float(q[i, a]) for i, s in enumerate(states) for a in range(A)}


def iter_bellman_residuals(env: Env, qstar, gamma: float) -> Iterator[float]:
    """Yield |q*(s,a) - E[r + gamma max q*(s',.)]| for every stored pair."""
    A = env.action_count
    for s in env.states():
        if env.is_terminal_state(s):
            continue
        for a in range(A):
            backup = 0.0
            for p, r, nxt, term in env.transitions(s, a):
                v = 0.0 if term else max(qstar[(env.key(nxt), b)] for b in range(A))
                backup += p * (r + gamma * v)
            yield abs(qstar[(env.key(s), a)] - backup)
