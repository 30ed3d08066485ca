"""Input checks shared by the estimator wrappers."""

from __future__ import annotations

from typing import List, Sequence

from .envs import StateKey, TransitionRecord


def check_episodes(X) -> List[List[TransitionRecord]]:
    """Accept a flat record list or a list of episodes; return episodes.

    A flat list is split after every terminal transition.
    """
    if X is None or len(X) == 0:
        raise ValueError("expected a non-empty list of transitions or episodes")
    if isinstance(X[0], TransitionRecord):
        episodes, cur = [], []
        for rec in X:
            _check_record(rec)
            cur.append(rec)
            if rec.terminal:
                episodes.append(cur)
                cur = []
        if cur:
            episodes.append(cur)
        return episodes
    episodes = []
    for ep in X:
        ep = list(ep)
        for rec in ep:
            _check_record(rec)
        if ep:
            episodes.append(ep)
    if not episodes:
        raise ValueError("all episodes are empty")
    return episodes


def _check_record(rec) -> None:
    if not isinstance(rec, TransitionRecord):
        raise TypeError(f"expected TransitionRecord, got {type(rec).__name__}")
    if rec.action < 0:
        raise ValueError(f"negative action {rec.action}")


def check_states(states) -> List[StateKey]:
    if isinstance(states, (bytes, StateKey)):
        states = [states]
    out = []
    for s in states:
        if not isinstance(s, bytes):
            raise TypeError(f"expected StateKey, got {type(s).__name__}")
        out.append(s if isinstance(s, StateKey) else StateKey(s))
    return out


def check_action_count(n, episodes: Sequence[Sequence[TransitionRecord]]) -> int:
    seen = 1 + max(rec.action for ep in episodes for rec in ep)
    if n is None:
        return seen
    if n < seen:
        raise ValueError(f"action_count={n} but data contains action {seen - 1}")
    return int(n)
