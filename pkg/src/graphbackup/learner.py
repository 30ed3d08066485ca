"""Tabular Q-learning harness around the backup operators.

One insert path feeds both the trajectory-ordered replay buffer (used by the
n-step and tree operators) and the transition graph (used by the graph
operators). Optimization samples stored transitions uniformly, computes
targets against a frozen snapshot, then applies the updates serially.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from collections import deque
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .backup import (
    BackupConfig,
    derive_rng,
    distributional_graph_backup,
    graph_backup_target,
    mixed_graph_backup_target,
    n_step_q_target,
    one_step_target,
    tree_backup_target,
)
from .envs import Env, StateKey, TransitionRecord
from .graph import TransitionGraph
from .analysis import window_stats
from .values import CategoricalQTable, ScalarQTable, expected_value

__all__ = [
    "LearnerConfig",
    "ReplayBuffer",
    "MetricRecord",
    "RunMetrics",
    "RunResult",
    "run_training",
    "offline_training",
    "evaluate_policy",
    "collect_random_walk",
    "write_trajectory_log",
    "read_trajectory_log",
    "compute_target",
    "ConfigError",
]

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "episode", "return", "eval_return", "op", "seed", "target_mean", "target_std", "nsr")
RING_SIZE = 10


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LearnerConfig:
    """Learning-loop settings.

    For offline training ``total_steps`` counts optimization steps. The
    replay buffer holds every transition of the run. ``tie_break`` controls
    how the behaviour policy breaks ties between equal Q values: ``"random"``
    (seeded) or ``"first"``. ``gamma``, when set, overrides the backup
    config's discount.
    """

    total_steps: int = 20_000
    replay_period: int = 1
    batch_size: int = 32
    alpha: float = 0.1
    epsilon: float = 0.02
    target_update_every: int = 200
    gamma: Optional[float] = None
    seed: int = 0
    eval_every: int = 1000
    eval_episodes: int = 1
    learning_starts: int = 1
    tie_break: str = "random"
    atom_count: int = 51
    v_min: float = 0.0
    v_max: float = 1.0
    trace_every: int = 10

    def validate(self) -> None:
        checks = [
            ("total_steps", self.total_steps >= 1),
            ("replay_period", self.replay_period >= 1),
            ("batch_size", self.batch_size >= 1),
            ("alpha", 0.0 < self.alpha <= 1.0),
            ("epsilon", 0.0 <= self.epsilon <= 1.0),
            ("target_update_every", self.target_update_every >= 1),
            ("gamma", self.gamma is None or 0.0 <= self.gamma < 1.0),
            ("eval_every", self.eval_every >= 1),
            ("eval_episodes", self.eval_episodes >= 1),
            ("learning_starts", self.learning_starts >= 1),
            ("tie_break", self.tie_break in ("random", "first")),
            ("atom_count", self.atom_count >= 2),
            ("v_max", self.v_max > self.v_min),
            ("trace_every", self.trace_every >= 1),
        ]
        for name, ok in checks:
            if not ok:
                raise ConfigError(f"invalid learner.{name}: {getattr(self, name)!r}")


class ReplayBuffer:
    """Trajectory-ordered transition store; capacity covers the whole run."""

    def __init__(self, capacity: Optional[int] = None):
        self.capacity = capacity
        self.records: List[TransitionRecord] = []
        self.episode_of: List[int] = []
        self._ends: List[int] = []  # exclusive end index per episode
        self._open = False

    def add(self, rec: TransitionRecord, episode_start: bool = False) -> None:
        if self.capacity is not None and len(self.records) >= self.capacity:
            raise OverflowError("replay buffer is full")
        if episode_start or not self._open:
            self._ends.append(len(self.records))
            self._open = True
        self.records.append(rec)
        self.episode_of.append(len(self._ends) - 1)
        self._ends[-1] = len(self.records)

    def end_episode(self) -> None:
        self._open = False

    def window(self, i: int, n: int) -> List[TransitionRecord]:
        """Records i, i+1, ... up to n of them, never crossing an episode end."""
        end = min(i + n, self._ends[self.episode_of[i]])
        return self.records[i:end]

    def is_start(self, i: int) -> bool:
        return i == 0 or self.episode_of[i] != self.episode_of[i - 1]

    def __len__(self):
        return len(self.records)

    def episodes(self) -> List[List[TransitionRecord]]:
        out, start = [], 0
        for end in self._ends:
            out.append(self.records[start:end])
            start = end
        return out


@dataclass
class MetricRecord:
    step: int
    episode: int
    ret: Optional[float] = None
    eval_return: Optional[float] = None
    op: str = ""
    seed: int = 0
    target_mean: Optional[float] = None
    target_std: Optional[float] = None
    nsr: Optional[float] = None

    def row(self) -> List[str]:
        def fmt(v):
            return "" if v is None else repr(float(v))
        return [str(self.step), str(self.episode), fmt(self.ret), fmt(self.eval_return), self.op,
                str(self.seed), fmt(self.target_mean), fmt(self.target_std), fmt(self.nsr)]


@dataclass
class RunMetrics:
    """Everything a run reports; append-only during the run."""

    op: str = ""
    seed: int = 0
    records: List[MetricRecord] = field(default_factory=list)
    rings: Dict[Tuple[StateKey, int], deque] = field(default_factory=dict)
    stability_trace: List[Tuple[int, float, float]] = field(default_factory=list)
    target_stamps: List[int] = field(default_factory=list)
    estimate_log: List[Tuple[int, StateKey, int, float]] = field(default_factory=list)

    def record_estimate(self, opt_step: int, s: StateKey, a: int, value: float, keep_log: bool) -> None:
        ring = self.rings.get((s, a))
        if ring is None:
            ring = self.rings[(s, a)] = deque(maxlen=RING_SIZE)
        ring.append(value)
        if keep_log:
            self.estimate_log.append((opt_step, s, a, value))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for rec in self.records:
            w.writerow(rec.row())
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def from_csv(cls, text: str) -> "RunMetrics":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or tuple(rows[0]) != METRIC_COLUMNS:
            raise ValueError("not a metrics CSV (bad header)")

        def num(v):
            return None if v == "" else float(v)

        out = cls()
        for r in rows[1:]:
            out.records.append(MetricRecord(int(r[0]), int(r[1]), num(r[2]), num(r[3]), r[4], int(r[5]),
                                            num(r[6]), num(r[7]), num(r[8])))
        if out.records:
            out.op, out.seed = out.records[0].op, out.records[0].seed
        return out

    @property
    def eval_returns(self) -> List[Tuple[int, float]]:
        return [(r.step, r.eval_return) for r in self.records if r.eval_return is not None]

    @property
    def final_eval_return(self) -> Optional[float]:
        ev = self.eval_returns
        return ev[-1][1] if ev else None


@dataclass
class RunResult:
    metrics: RunMetrics
    online: object
    target: object
    graph: TransitionGraph
    buffer: ReplayBuffer


# -- helpers ---------------------------------------------------------------------

def _ring_stats(rings) -> Tuple[float, float]:
    """Mean over pairs of (mean, sample std) of each full window."""
    m, s, _ = window_stats(rings, min_count=RING_SIZE)
    return m, s


def _make_tables(cfg: LearnerConfig, backup_cfg: BackupConfig, action_count: int):
    if backup_cfg.distributional:
        online = CategoricalQTable(action_count, cfg.atom_count, cfg.v_min, cfg.v_max)
    else:
        online = ScalarQTable(action_count)
    return online


def compute_target(cfg: BackupConfig, buffer: ReplayBuffer, graph: TransitionGraph, index: int,
                   online, target, rng: Optional[np.random.Generator] = None):
    """Target for the stored transition at ``index`` under ``cfg``.

    Returns a float, or a probability vector for distributional configs.
    """
    rec = buffer.records[index]
    op = cfg.operator
    if op == "one_step":
        return one_step_target(rec, target, cfg, online)
    if op == "n_step_q":
        return n_step_q_target(buffer.window(index, cfg.depth), cfg.depth, target, cfg, online)
    if op == "tree":
        return tree_backup_target(buffer.window(index, cfg.depth), cfg.depth, target, cfg, online)
    source = (rec.state, rec.action)
    if op == "graph_mixed":
        return mixed_graph_backup_target(graph, source, target, cfg, rng)
    if cfg.distributional:
        return distributional_graph_backup(graph, source, online, target, None, cfg, rng)
    return graph_backup_target(graph, source, online, target, cfg, rng)


class _Optimizer:
    """Shared optimization step for online and offline training."""

    def __init__(self, cfg: LearnerConfig, backup_cfg: BackupConfig, online, metrics: RunMetrics,
                 buffer: ReplayBuffer, graph: TransitionGraph, rng: np.random.Generator, keep_log: bool, trace: bool = False):
        self.cfg = cfg
        self.backup_cfg = backup_cfg
        self.online = online
        self.target = online.snapshot()
        self.metrics = metrics
        self.buffer = buffer
        self.graph = graph
        self.rng = rng
        self.keep_log = keep_log
        self.trace = trace
        self.steps = 0
        self.pending: List[float] = []

    def step(self) -> None:
        cfg, bcfg = self.cfg, self.backup_cfg
        idx = self.rng.integers(len(self.buffer), size=cfg.batch_size)
        self.steps += 1
        targets = []
        for i in idx:
            rec = self.buffer.records[i]
            rng = None
            if bcfg.operator in ("graph", "graph_mixed"):
                rng = derive_rng(cfg.seed, self.steps, (rec.state, rec.action))
            targets.append(compute_target(bcfg, self.buffer, self.graph, int(i), self.online, self.target, rng))
        for i, tgt in zip(idx, targets):
            rec = self.buffer.records[i]
            if bcfg.distributional:
                self.online.categorical_update(rec.state, rec.action, tgt, cfg.alpha)
                value = expected_value(tgt, self.online.atoms)
            else:
                self.online.scalar_update(rec.state, rec.action, tgt, cfg.alpha)
                value = tgt
            self.pending.append(value)
            self.metrics.record_estimate(self.steps, rec.state, rec.action, value, self.keep_log)
        self.metrics.target_stamps.append(self.target.stamp)
        if self.trace and self.steps % cfg.trace_every == 0:
            m, s = _ring_stats(self.metrics.rings)
            self.metrics.stability_trace.append((self.steps, m, s))
        if self.steps % cfg.target_update_every == 0:
            self.target = self.online.snapshot()
            self.target.stamp = self.steps

    def drain(self) -> Tuple[Optional[float], Optional[float]]:
        if not self.pending:
            return None, None
        arr = np.asarray(self.pending)
        self.pending = []
        return float(arr.mean()), float(arr.std())


def _act(model, s: StateKey, epsilon: float, rng: np.random.Generator, tie_break: str) -> int:
    n = model.action_count
    if rng.random() < epsilon:
        return int(rng.integers(n))
    vals = model.values(s)
    if tie_break == "first":
        return int(np.argmax(vals))
    best = np.flatnonzero(vals == vals.max())
    if best.size == 1:
        return int(best[0])
    return int(best[rng.integers(best.size)])


def _episode_seed(seed: int, episode: int) -> int:
    return int(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, episode]).generate_state(1, np.uint64)[0])


def _resolve(cfg: LearnerConfig, backup_cfg: BackupConfig) -> BackupConfig:
    cfg.validate()
    if cfg.gamma is not None and cfg.gamma != backup_cfg.gamma:
        backup_cfg = replace(backup_cfg, gamma=cfg.gamma)
    return backup_cfg


# -- public operations --------------------------------------------------------------

def evaluate_policy(env: Env, model, episodes: int = 1, seed: int = 0) -> float:
    """Mean undiscounted return of greedy rollouts (lowest-index ties)."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    total = 0.0
    for ep in range(episodes):
        s = env.reset(_episode_seed(seed, ep))
        while not env.done:
            r, s, _ = env.step(model.greedy_action(s))
            total += r
    return total / episodes


def run_training(env: Env, cfg: LearnerConfig, backup_cfg: BackupConfig, return_state: bool = False):
    """Online training with epsilon-greedy acting; returns RunMetrics.

    With ``return_state=True`` returns a :class:`RunResult` carrying the final
    tables, the graph and the replay buffer as well.
    """
    backup_cfg = _resolve(cfg, backup_cfg)
    rng = np.random.default_rng(cfg.seed)
    eval_env = env.clone()
    online = _make_tables(cfg, backup_cfg, env.action_count)
    metrics = RunMetrics(op=backup_cfg.operator, seed=cfg.seed)
    buffer = ReplayBuffer(capacity=cfg.total_steps)
    graph = TransitionGraph()
    opt = _Optimizer(cfg, backup_cfg, online, metrics, buffer, graph, rng, keep_log=False)

    episode = 0
    s = env.reset(_episode_seed(cfg.seed, episode))
    start = True
    ep_return = 0.0
    for step in range(1, cfg.total_steps + 1):
        a = _act(online, s, cfg.epsilon, rng, cfg.tie_break)
        r, s2, terminal = env.step(a)
        rec = TransitionRecord(s, a, r, s2, terminal)
        buffer.add(rec, episode_start=start)
        graph.insert(rec, episode_start=start)
        start = False
        ep_return += r
        s = s2
        if step % cfg.replay_period == 0 and step >= cfg.learning_starts:
            opt.step()
        if env.done:
            buffer.end_episode()
            tm, ts = opt.drain()
            metrics.records.append(MetricRecord(step, episode, ep_return, None, backup_cfg.operator, cfg.seed,
                                                tm, ts, graph.novel_state_ratio()))
            episode += 1
            ep_return = 0.0
            s = env.reset(_episode_seed(cfg.seed, episode))
            start = True
        if step % cfg.eval_every == 0 or step == cfg.total_steps:
            ev = evaluate_policy(eval_env, online, cfg.eval_episodes, seed=cfg.seed + 7919)
            tm, ts = opt.drain()
            metrics.records.append(MetricRecord(step, episode, None, ev, backup_cfg.operator, cfg.seed,
                                                tm, ts, graph.novel_state_ratio()))
    logger.debug("run finished: op=%s seed=%d episodes=%d", backup_cfg.operator, cfg.seed, episode)
    if return_state:
        return RunResult(metrics, online, opt.target, graph, buffer)
    return metrics


def _as_episodes(dataset) -> List[List[TransitionRecord]]:
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if isinstance(dataset[0], TransitionRecord):
        episodes, cur = [], []
        for rec in dataset:
            cur.append(rec)
            if rec.terminal:
                episodes.append(cur)
                cur = []
        if cur:
            episodes.append(cur)
        return episodes
    return [list(ep) for ep in dataset if len(ep)]


def offline_training(dataset, cfg: LearnerConfig, backup_cfg: BackupConfig, action_count: Optional[int] = None,
                     return_state: bool = False, keep_log: bool = True):
    """Learn from a fixed trajectory log; ``total_steps`` optimization steps.

    ``dataset`` is a list of episodes (lists of records) or a flat record
    list that is split after terminal transitions.
    """
    backup_cfg = _resolve(cfg, backup_cfg)
    episodes = _as_episodes(dataset)
    if not any(episodes):
        raise ValueError("empty dataset")
    if action_count is None:
        action_count = 1 + max(rec.action for ep in episodes for rec in ep)
    buffer = ReplayBuffer()
    graph = TransitionGraph()
    for ep in episodes:
        for k, rec in enumerate(ep):
            buffer.add(rec, episode_start=k == 0)
            graph.insert(rec, episode_start=k == 0)
        buffer.end_episode()
    rng = np.random.default_rng(cfg.seed)
    online = _make_tables(cfg, backup_cfg, action_count)
    metrics = RunMetrics(op=backup_cfg.operator, seed=cfg.seed)
    opt = _Optimizer(cfg, backup_cfg, online, metrics, buffer, graph, rng, keep_log=keep_log, trace=True)
    nsr = graph.novel_state_ratio()
    for step in range(1, cfg.total_steps + 1):
        opt.step()
        if step % cfg.eval_every == 0 or step == cfg.total_steps:
            tm, ts = opt.drain()
            metrics.records.append(MetricRecord(step, 0, None, None, backup_cfg.operator, cfg.seed, tm, ts, nsr))
    if return_state:
        return RunResult(metrics, online, opt.target, graph, buffer)
    return metrics


def collect_random_walk(env: Env, n_transitions: int, seed: int = 0) -> List[List[TransitionRecord]]:
    """Uniform-random episodes until ``n_transitions`` steps are recorded."""
    rng = np.random.default_rng(seed)
    episodes: List[List[TransitionRecord]] = []
    count = 0
    while count < n_transitions:
        s = env.reset(_episode_seed(seed, len(episodes)))
        ep = []
        while not env.done and count < n_transitions:
            a = int(rng.integers(env.action_count))
            r, s2, term = env.step(a)
            ep.append(TransitionRecord(s, a, r, s2, term))
            s = s2
            count += 1
        episodes.append(ep)
    return episodes


def write_trajectory_log(path, episodes: Sequence[Sequence[TransitionRecord]]) -> None:
    """Line format: ``episode step hex(s) a r hex(s') done``."""
    lines = []
    for e, ep in enumerate(episodes):
        for t, rec in enumerate(ep):
            lines.append(f"{e} {t} {rec.state.hex()} {rec.action} {float(rec.reward)!r} "
                         f"{rec.next_state.hex()} {int(rec.terminal)}\n")
    Path(path).write_text("".join(lines))


def read_trajectory_log(path) -> List[List[TransitionRecord]]:
    episodes: Dict[int, List[TransitionRecord]] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split()
        try:
            ep, _, s, a, r, s2, done = parts
            rec = TransitionRecord(StateKey.fromhex(s), int(a), float(r), StateKey.fromhex(s2), done == "1")
            episodes.setdefault(int(ep), []).append(rec)
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: malformed trajectory line: {exc}") from None
    return [episodes[k] for k in sorted(episodes)]
