"""Tabular value models: scalar Q tables and categorical (C51-style) tables.

Both tables store one row per state (all actions at once) and fall back to a
default row for unseen states without inserting it. ``snapshot()`` returns a
frozen copy used as the target network.
"""

from __future__ import annotations

import math
import struct
from pathlib import Path
from typing import Dict, Iterator, Optional

import numpy as np

from .envs import StateKey

__all__ = [
    "ScalarQTable",
    "CategoricalQTable",
    "TargetSnapshot",
    "expected_value",
    "ValueTableError",
    "load_table",
]

MAGIC = b"VTBL1"


class ValueTableError(ValueError):
    pass


def expected_value(dist, atoms) -> float:
    """Mean of a categorical distribution over ``atoms``."""
    return float(np.dot(np.asarray(dist, dtype=np.float64), np.asarray(atoms, dtype=np.float64)))


class _Table:
    kind = ""
    frozen = False

    def __init__(self, action_count: int):
        if action_count < 1:
            raise ValueError("action_count must be positive")
        self.action_count = int(action_count)
        self._rows: Dict[StateKey, np.ndarray] = {}
        self.version = 0

    def _check_action(self, a):
        if not 0 <= a < self.action_count:
            raise IndexError(f"action {a} out of range [0, {self.action_count})")

    def _writable(self):
        if self.frozen:
            raise TypeError("target snapshots are read-only")

    def states(self) -> Iterator[StateKey]:
        return iter(self._rows)

    def __len__(self):
        return len(self._rows)

    def greedy_action(self, s: StateKey) -> int:
        """argmax over actions; ties go to the lowest index."""
        return int(np.argmax(self.values(s)))

    def snapshot(self) -> "TargetSnapshot":
        return TargetSnapshot(self)


class ScalarQTable(_Table):
    """Q table with default value 0.0 for unseen pairs."""

    kind = "scalar"

    def __init__(self, action_count: int, default: float = 0.0):
        super().__init__(action_count)
        self.default = float(default)
        self._default_row = np.full(self.action_count, self.default)
        self._default_row.setflags(write=False)

    def values(self, s: StateKey) -> np.ndarray:
        """Row of Q values for ``s`` (read-only view; never inserts)."""
        row = self._rows.get(s)
        return self._default_row if row is None else row

    def q(self, s: StateKey, a: int) -> float:
        self._check_action(a)
        return float(self.values(s)[a])

    def _row(self, s):
        row = self._rows.get(s)
        if row is None:
            row = self._rows[s] = np.full(self.action_count, self.default)
        return row

    def set(self, s: StateKey, a: int, value: float) -> None:
        self._writable()
        self._check_action(a)
        self._row(s)[a] = float(value)
        self.version += 1

    def scalar_update(self, s: StateKey, a: int, target: float, alpha: float) -> None:
        """One SGD step on the squared error: q <- q + alpha * (target - q)."""
        self._writable()
        self._check_action(a)
        if not math.isfinite(target):
            raise ValueTableError(f"non-finite target {target!r}")
        if not 0.0 < alpha <= 1.0:
            raise ValueError("alpha must be in (0, 1]")
        row = self._row(s)
        row[a] = row[a] + alpha * (target - row[a])
        self.version += 1

    def copy(self) -> "ScalarQTable":
        new = ScalarQTable(self.action_count, self.default)
        new._rows = {s: r.copy() for s, r in self._rows.items()}
        new.version = self.version
        return new

    def __eq__(self, other):
        if not isinstance(other, ScalarQTable):
            return NotImplemented
        return (self.action_count == other.action_count and self.default == other.default
                and self._rows.keys() == other._rows.keys()
                and all(np.array_equal(r, other._rows[s]) for s, r in self._rows.items()))


class CategoricalQTable(_Table):
    """Per-pair categorical distributions over a fixed, evenly spaced support.

    Unseen pairs default to the uniform distribution.
    """

    kind = "categorical"

    def __init__(self, action_count: int, atom_count: int = 51, v_min: float = 0.0, v_max: float = 1.0):
        super().__init__(action_count)
        if atom_count < 2:
            raise ValueError("need at least 2 atoms")
        if not v_max > v_min:
            raise ValueError("v_max must exceed v_min")
        self.atom_count = int(atom_count)
        self.v_min = float(v_min)
        self.v_max = float(v_max)
        self.delta_z = (self.v_max - self.v_min) / (self.atom_count - 1)
        self.atoms = self.v_min + np.arange(self.atom_count) * self.delta_z
        self.atoms.setflags(write=False)
        self._default_row = np.full((self.action_count, self.atom_count), 1.0 / self.atom_count)
        self._default_row.setflags(write=False)

    def dists(self, s: StateKey) -> np.ndarray:
        row = self._rows.get(s)
        return self._default_row if row is None else row

    def dist(self, s: StateKey, a: int) -> np.ndarray:
        self._check_action(a)
        return self.dists(s)[a]

    def values(self, s: StateKey) -> np.ndarray:
        return self.dists(s) @ self.atoms

    def q(self, s: StateKey, a: int) -> float:
        return expected_value(self.dist(s, a), self.atoms)

    def _row(self, s):
        row = self._rows.get(s)
        if row is None:
            row = self._rows[s] = self._default_row.copy()
        return row

    def _check_dist(self, m):
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (self.atom_count,):
            raise ValueTableError(f"distribution must have {self.atom_count} atoms, got shape {m.shape}")
        if not np.all(np.isfinite(m)) or np.any(m < 0) or abs(m.sum() - 1.0) > 1e-9:
            raise ValueTableError("target distribution must be nonnegative and sum to 1")
        return m

    def set(self, s: StateKey, a: int, dist) -> None:
        self._writable()
        self._check_action(a)
        self._row(s)[a] = self._check_dist(dist)
        self.version += 1

    def categorical_update(self, s: StateKey, a: int, target, alpha: float) -> None:
        """Move the stored distribution toward ``target``: normalize((1-alpha) p + alpha m).

        With alpha = 1 this is the exact cross-entropy minimizer.
        """
        self._writable()
        self._check_action(a)
        m = self._check_dist(target)
        if not 0.0 < alpha <= 1.0:
            raise ValueError("alpha must be in (0, 1]")
        row = self._row(s)
        mixed = (1.0 - alpha) * row[a] + alpha * m
        row[a] = mixed / mixed.sum()
        self.version += 1

    def copy(self) -> "CategoricalQTable":
        new = CategoricalQTable(self.action_count, self.atom_count, self.v_min, self.v_max)
        new._rows = {s: r.copy() for s, r in self._rows.items()}
        new.version = self.version
        return new

    def __eq__(self, other):
        if not isinstance(other, CategoricalQTable):
            return NotImplemented
        return (self.action_count == other.action_count and self.atom_count == other.atom_count
                and self.v_min == other.v_min and self.v_max == other.v_max
                and self._rows.keys() == other._rows.keys()
                and all(np.array_equal(r, other._rows[s]) for s, r in self._rows.items()))


class TargetSnapshot:
    """Immutable deep copy of a value table at snapshot time."""

    def __init__(self, table: _Table, stamp: int = 0):
        inner = table.table.copy() if isinstance(table, TargetSnapshot) else table.copy()
        for row in inner._rows.values():
            row.setflags(write=False)
        inner.frozen = True
        self.table = inner
        self.stamp = stamp

    def __getattr__(self, name):
        if name == "table":
            raise AttributeError(name)
        return getattr(self.table, name)

    def values(self, s):
        return self.table.values(s)

    def q(self, s, a):
        return self.table.q(s, a)

    def greedy_action(self, s):
        return self.table.greedy_action(s)

    def copy(self):
        return self.table.copy()

    def __repr__(self):
        return f"TargetSnapshot({type(self.table).__name__}, stamp={self.stamp}, rows={len(self.table)})"


# -- persistence ---------------------------------------------------------------

def _unwrap(table):
    return table.table if isinstance(table, TargetSnapshot) else table


def table_to_bytes(table) -> bytes:
    """Binary container ``VTBL1``: header record then one record per state."""
    table = _unwrap(table)
    out = bytearray(MAGIC)
    if isinstance(table, CategoricalQTable):
        head = struct.pack("<BIIdd", 1, table.action_count, table.atom_count, table.v_min, table.v_max)
        width = table.action_count * table.atom_count
    else:
        head = struct.pack("<BIId", 0, table.action_count, 0, table.default)
        width = table.action_count
    out += struct.pack("<I", len(head)) + head
    for s, row in table._rows.items():
        body = struct.pack("<I", len(s.encoding)) + s.encoding + np.asarray(row, "<f8").reshape(width).tobytes()
        out += struct.pack("<I", len(body)) + body
    return bytes(out)


def table_from_bytes(data: bytes):
    from .graph import GraphFormatError

    if data[:5] != MAGIC:
        raise GraphFormatError("missing VTBL1 header", 0)
    pos = 5
    try:
        (n,) = struct.unpack_from("<I", data, pos)
        head = data[pos + 4:pos + 4 + n]
        if head[0] == 1:
            _, A, N, lo, hi = struct.unpack("<BIIdd", head)
            table = CategoricalQTable(A, N, lo, hi)
            shape = (A, N)
        else:
            _, A, _, default = struct.unpack("<BIId", head)
            table = ScalarQTable(A, default)
            shape = (A,)
        pos += 4 + n
        width = int(np.prod(shape))
        while pos < len(data):
            (n,) = struct.unpack_from("<I", data, pos)
            body = data[pos + 4:pos + 4 + n]
            if len(body) != n:
                raise struct.error("truncated record")
            (elen,) = struct.unpack_from("<I", body, 0)
            if n != 4 + elen + 8 * width:
                raise struct.error("bad row size")
            enc = body[4:4 + elen]
            row = np.frombuffer(body[4 + elen:], dtype="<f8").astype(np.float64).reshape(shape)
            table._rows[StateKey(enc)] = row
            pos += 4 + n
    except (struct.error, IndexError, ValueError) as exc:
        raise GraphFormatError(f"bad value table record: {exc}", pos) from None
    return table


def save_table(table, path) -> None:
    Path(path).write_bytes(table_to_bytes(table))


def load_table(path):
    return table_from_bytes(Path(path).read_bytes())
