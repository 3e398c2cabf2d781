"""Difficulty-sorted curriculum with per-worker subsets and a success-rate gate."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .errors import ScenforgeError

LEVEL_UP_RATE = (3, 4)  # success rate >= 3/4, compared in integers


@dataclass
class WorkerProgress:
    level: int = 1
    history: deque = field(default_factory=deque)
    episodes_at_level: int = 0
    evicted: list[int] = field(default_factory=list)


@dataclass
class CurriculumState:
    order: list[str]
    levels: list[list[str]]
    subsets: list[list[list[str]]]
    window: int = 40
    min_episodes: int | None = None
    workers: dict[int, WorkerProgress] = field(default_factory=dict)

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    @property
    def n_subsets(self) -> int:
        return len(self.subsets[0]) if self.subsets else 0

    def subset_of(self, worker: int) -> int:
        return worker % self.n_subsets

    def resident(self, worker: int) -> list[str]:
        """Scenario ids the worker keeps loaded: its subset of its current level."""
        wp = self._worker(worker)
        return list(self.subsets[wp.level - 1][self.subset_of(worker)])

    def level(self, worker: int) -> int:
        return self._worker(worker).level

    def _worker(self, worker: int) -> WorkerProgress:
        try:
            return self.workers[worker]
        except KeyError:
            raise ScenforgeError(f"unknown worker {worker}") from None


def sort_by_difficulty(entries: Iterable[tuple[str, float, float]]) -> list[str]:
    """Ids sorted by (difficulty, track_length, scenario_id)."""
    return [sid for sid, _, _ in sorted(entries, key=lambda e: (e[1], e[2], e[0]))]


def _entries_from(db) -> list[tuple[str, float, float]]:
    summary = getattr(db, "summary", None)
    if summary is None:
        return [tuple(e) for e in db]
    out = []
    for sid, md in summary.items():
        diff = md.get("difficulty")
        length = md.get("per_object_moving_distance", {}).get(md.get("sdc_id"), 0.0)
        out.append((sid, 0.0 if diff is None else float(diff), float(length)))
    return out


def build_curriculum(db, n_levels: int = 100, per_level: int = 400, n_subsets: int = 20,
                     n_workers: int | None = None, window: int = 40,
                     min_episodes: int | None = None) -> CurriculumState:
    """Sort scenarios by difficulty, cut contiguous levels, split each level round-robin.

    ``db`` is a database manifest (difficulty and ego track length read from
    its summary) or an iterable of ``(scenario_id, difficulty, track_length)``.
    With exactly ``n_levels * per_level`` scenarios every level holds
    ``per_level``; other sizes are spread over ``min(n_levels, total)`` levels
    whose sizes differ by at most one.
    """
    entries = _entries_from(db)
    if not entries:
        raise ScenforgeError("cannot build a curriculum from an empty database")
    order = sort_by_difficulty(entries)
    total = len(order)
    if total == n_levels * per_level:
        levels = [order[i * per_level:(i + 1) * per_level] for i in range(n_levels)]
    else:
        cuts = np.array_split(np.arange(total), min(n_levels, total))
        levels = [[order[i] for i in c] for c in cuts]
    subsets = [[lvl[j::n_subsets] for j in range(n_subsets)] for lvl in levels]
    state = CurriculumState(order, levels, subsets, window=window, min_episodes=min_episodes)
    for w in range(n_subsets if n_workers is None else n_workers):
        state.workers[w] = WorkerProgress()
    return state


def success_rate(state: CurriculumState, worker: int) -> float:
    wp = state._worker(worker)
    if not wp.history:
        return 0.0
    return sum(wp.history) / len(wp.history)


def report_result(state: CurriculumState, worker: int, success: bool) -> bool:
    """Record one episode outcome; returns True when the worker levels up.

    The rate is taken over the most recent ``min(window, episodes at level)``
    episodes and only once the worker has run at least ``min_episodes``
    episodes at the level (default: the size of its resident subset).
    """
    wp = state._worker(worker)
    wp.history.append(bool(success))
    while len(wp.history) > state.window:
        wp.history.popleft()
    wp.episodes_at_level += 1
    need = state.min_episodes
    if need is None:
        need = max(1, len(state.subsets[wp.level - 1][state.subset_of(worker)]))
    if wp.episodes_at_level < need or wp.level >= state.n_levels:
        return False
    num, den = LEVEL_UP_RATE
    if den * sum(wp.history) >= num * len(wp.history):
        wp.evicted.append(wp.level)
        wp.level += 1
        wp.history.clear()
        wp.episodes_at_level = 0
        return True
    return False
