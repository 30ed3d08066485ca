"""Random dataset generators shared by the test modules."""

from __future__ import annotations

import numpy as np

from graphbackup.envs import StateKey, TransitionRecord
from graphbackup.graph import TransitionGraph
from graphbackup.values import CategoricalQTable, ScalarQTable


def key(i: int) -> StateKey:
    return StateKey(int(i).to_bytes(2, "little"))


def random_acyclic_records(rng: np.random.Generator, max_states: int = 50, max_actions: int = 4,
                           n_records: int | None = None):
    """Records whose next state always has a larger index, so the graph is a DAG."""
    n = int(rng.integers(3, max_states + 1))
    A = int(rng.integers(1, max_actions + 1))
    if n_records is None:
        n_records = int(rng.integers(n, 3 * n + 1))
    recs = []
    for _ in range(n_records):
        i = int(rng.integers(0, n - 1))
        j = int(rng.integers(i + 1, min(n, i + 6)))
        a = int(rng.integers(A))
        r = float(rng.random())
        term = bool(rng.random() < 0.15)
        recs.append(TransitionRecord(key(i), a, r, key(j), term))
    return recs, A


def build_graph(records, starts=()) -> TransitionGraph:
    g = TransitionGraph()
    for k, rec in enumerate(records):
        g.insert(rec, episode_start=k in starts)
    return g


def random_scalar_table(rng: np.random.Generator, states, A: int, scale: float = 1.0, p: float = 0.7) -> ScalarQTable:
    t = ScalarQTable(A)
    for s in states:
        if rng.random() < p:
            for a in range(A):
                t.set(s, a, float(scale * rng.random()))
    return t


def random_categorical_table(rng: np.random.Generator, states, A: int, atom_count: int,
                             v_min: float, v_max: float, p: float = 0.7) -> CategoricalQTable:
    t = CategoricalQTable(A, atom_count, v_min, v_max)
    for s in states:
        if rng.random() < p:
            for a in range(A):
                # a few random atoms carry the mass
                d = np.zeros(atom_count)
                idx = rng.integers(0, atom_count, size=5)
                d[idx] += rng.random(5)
                t.set(s, a, d / d.sum())
    return t


def single_trajectory(rng: np.random.Generator, length: int, A: int, terminal_end: bool):
    """One episode over distinct states."""
    recs = []
    for t in range(length):
        term = terminal_end and t == length - 1
        recs.append(TransitionRecord(key(t), int(rng.integers(A)), float(rng.random()), key(t + 1), term))
    return recs
