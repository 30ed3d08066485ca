"""scikit-learn style wrappers around offline training and target computation.

``X`` is always a trajectory dataset: a flat list of
:class:`~graphbackup.envs.TransitionRecord` or a list of episodes.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_action_count, check_episodes, check_states
from .backup import BackupConfig, derive_rng
from .graph import TransitionGraph
from .learner import LearnerConfig, ReplayBuffer, compute_target, offline_training
from .values import ScalarQTable

__all__ = ["BackupQLearner", "BackupTargets"]


def _backup_config(est) -> BackupConfig:
    return BackupConfig(operator=est.operator, depth=est.depth, breadth=est.breadth, gamma=est.gamma,
                        double=est.double, distributional=getattr(est, "distributional", False))


class BackupQLearner(BaseEstimator):
    """Tabular Q-learner fitted offline on a fixed trajectory dataset.

    >>> from graphbackup.envs import EmptyGrid
    >>> from graphbackup.learner import collect_random_walk
    >>> data = collect_random_walk(EmptyGrid(3), 300, seed=0)
    >>> est = BackupQLearner(total_steps=200).fit(data)
    >>> est.decision_function([EmptyGrid(3).reset(0)]).shape
    (1, 4)
    """

    def __init__(self, operator="graph", depth=5, breadth=50, gamma=0.95, double=False,
                 distributional=False, total_steps=2000, batch_size=32, alpha=0.1,
                 target_update_every=200, atom_count=51, v_min=0.0, v_max=1.0,
                 action_count=None, random_state=0):
        self.operator = operator
        self.depth = depth
        self.breadth = breadth
        self.gamma = gamma
        self.double = double
        self.distributional = distributional
        self.total_steps = total_steps
        self.batch_size = batch_size
        self.alpha = alpha
        self.target_update_every = target_update_every
        self.atom_count = atom_count
        self.v_min = v_min
        self.v_max = v_max
        self.action_count = action_count
        self.random_state = random_state

    def fit(self, X, y=None):
        episodes = check_episodes(X)
        n_actions = check_action_count(self.action_count, episodes)
        cfg = LearnerConfig(total_steps=self.total_steps, batch_size=self.batch_size, alpha=self.alpha,
                            target_update_every=self.target_update_every, seed=int(self.random_state or 0),
                            eval_every=max(1, self.total_steps), atom_count=self.atom_count,
                            v_min=self.v_min, v_max=self.v_max)
        cfg.validate()
        res = offline_training(episodes, cfg, _backup_config(self), action_count=n_actions,
                               return_state=True, keep_log=False)
        self.q_table_ = res.online
        self.graph_ = res.graph
        self.metrics_ = res.metrics
        self.n_actions_ = n_actions
        return self

    def decision_function(self, states) -> np.ndarray:
        """Q values, one row per state."""
        check_is_fitted(self, "q_table_")
        keys = check_states(states)
        return np.array([self.q_table_.values(s) for s in keys], dtype=np.float64).reshape(len(keys), self.n_actions_)

    def predict(self, states) -> np.ndarray:
        """Greedy action per state (lowest index on ties)."""
        return np.argmax(self.decision_function(states), axis=1)


class BackupTargets(BaseEstimator, TransformerMixin):
    """Maps transitions to their backup targets.

    ``fit`` builds the replay buffer and transition graph from ``X``;
    ``transform`` returns one target per transition of ``X``, which must be
    (a subset of) the fitted data. ``values`` is the table bootstrapped from;
    ``None`` means all-zero values.
    """

    def __init__(self, operator="graph", depth=5, breadth=50, gamma=0.95, double=False,
                 values=None, random_state=0):
        self.operator = operator
        self.depth = depth
        self.breadth = breadth
        self.gamma = gamma
        self.double = double
        self.values = values
        self.random_state = random_state

    def fit(self, X, y=None):
        episodes = check_episodes(X)
        buffer, graph = ReplayBuffer(), TransitionGraph()
        positions = {}
        for ep in episodes:
            for k, rec in enumerate(ep):
                positions.setdefault(rec, len(buffer))
                buffer.add(rec, episode_start=k == 0)
                graph.insert(rec, episode_start=k == 0)
            buffer.end_episode()
        self.buffer_ = buffer
        self.graph_ = graph
        self.positions_ = positions
        self.n_actions_ = check_action_count(None, episodes)
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "graph_")
        cfg = _backup_config(self)
        table = self.values if self.values is not None else ScalarQTable(self.n_actions_)
        out = []
        for ep in check_episodes(X):
            for rec in ep:
                i = self.positions_.get(rec)
                if i is None:
                    raise ValueError(f"transition {rec} was not seen during fit")
                rng = derive_rng(int(self.random_state or 0), 0, (rec.state, rec.action))
                out.append(compute_target(cfg, self.buffer_, self.graph_, i, table, table, rng))
        return np.asarray(out, dtype=np.float64)
