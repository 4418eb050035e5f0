"""FIFO ring buffer of transitions with uniform sampling (with replacement)."""

import json
from dataclasses import dataclass

import numpy as np

from .nn import UsageError


@dataclass
class Transition:
    state_goal: np.ndarray
    action: np.ndarray
    reward: float
    next_state_goal: np.ndarray
    achieved_goal_next: np.ndarray
    episode_id: int = -1
    t: int = 0
    hindsight: bool = False


FIELDS = ("state_goal", "action", "reward", "next_state_goal", "achieved_goal_next",
          "episode_id", "t", "hindsight", "seq")


class ReplayBuffer:
    """Column-store ring buffer. Storage grows geometrically up to ``capacity``."""

    def __init__(self, capacity=1_000_000):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self.size = 0
        self.inserted = 0
        self._cols = None

    def __len__(self):
        return self.size

    def _allocate(self, arrays, n):
        alloc = min(self.capacity, max(1024, n))
        self._cols = {k: np.zeros((alloc,) + v.shape[1:], dtype=v.dtype) for k, v in arrays.items()}

    def _grow(self, needed):
        alloc = len(self._cols["reward"])
        if alloc >= self.capacity or needed <= alloc:
            return
        new = min(self.capacity, max(needed, 2 * alloc))
        for k, v in self._cols.items():
            grown = np.zeros((new,) + v.shape[1:], dtype=v.dtype)
            grown[:alloc] = v
            self._cols[k] = grown

    def push(self, transition):
        self.push_arrays(
            state_goal=np.asarray(transition.state_goal, dtype=float)[None],
            action=np.asarray(transition.action, dtype=float)[None],
            reward=np.array([transition.reward], dtype=float),
            next_state_goal=np.asarray(transition.next_state_goal, dtype=float)[None],
            achieved_goal_next=np.asarray(transition.achieved_goal_next, dtype=float)[None],
            episode_id=np.array([transition.episode_id]),
            t=np.array([transition.t]),
            hindsight=np.array([transition.hindsight]),
        )

    def push_arrays(self, **arrays):
        """Append a block of transitions given as equal-length column arrays."""
        n = len(arrays["reward"])
        if n == 0:
            return
        arrays["seq"] = np.arange(self.inserted, self.inserted + n)
        arrays["episode_id"] = np.asarray(arrays["episode_id"], dtype=np.int64)
        arrays["t"] = np.asarray(arrays["t"], dtype=np.int64)
        arrays["hindsight"] = np.asarray(arrays["hindsight"], dtype=bool)
        if self._cols is None:
            self._allocate(arrays, n)
        self._grow(min(self.capacity, self.size + n))
        if n > self.capacity:
            arrays = {k: v[-self.capacity:] for k, v in arrays.items()}
            self.inserted += n - self.capacity
            n = self.capacity
        idx = (self.inserted + np.arange(n)) % self.capacity
        for k, col in self._cols.items():
            col[idx] = arrays[k]
        self.inserted += n
        self.size = min(self.capacity, self.size + n)

    def _indices(self, batch_size, rng):
        if self.size == 0:
            raise UsageError("cannot sample from an empty buffer")
        return rng.integers(0, self.size, batch_size)

    def sample(self, batch_size, rng):
        """Uniform batch as a dict of column arrays (copies)."""
        idx = self._indices(batch_size, rng)
        return {k: col[idx] for k, col in self._cols.items()}

    def sample_batch(self, batch_size, rng):
        cols = self.sample(batch_size, rng)
        return [self._row(cols, i) for i in range(batch_size)]

    def _row(self, cols, i):
        return Transition(cols["state_goal"][i].copy(), cols["action"][i].copy(), float(cols["reward"][i]),
                          cols["next_state_goal"][i].copy(), cols["achieved_goal_next"][i].copy(),
                          int(cols["episode_id"][i]), int(cols["t"][i]), bool(cols["hindsight"][i]))

    def contents(self):
        """Stored columns in insertion order (oldest first)."""
        if self.size == 0:
            return {}
        start = self.inserted - self.size
        order = (start + np.arange(self.size)) % self.capacity
        return {k: col[order] for k, col in self._cols.items()}

    def transitions(self):
        cols = self.contents()
        return [self._row(cols, i) for i in range(self.size)]

    def snapshot(self, path):
        """Dump stored transitions as episode-log style JSON lines, one record per episode."""
        cols = self.contents()
        if not cols:
            open(path, "w").close()
            return
        with open(path, "w") as fh:
            for eid in dict.fromkeys(cols["episode_id"].tolist()):
                sel = np.flatnonzero(cols["episode_id"] == eid)
                rec = {"episode_id": int(eid), "transitions": [
                    {"s": cols["state_goal"][i].tolist(), "a": cols["action"][i].tolist(),
                     "r": float(cols["reward"][i]), "s_next": cols["next_state_goal"][i].tolist(),
                     "t": int(cols["t"][i]), "hindsight": bool(cols["hindsight"][i])}
                    for i in sel]}
                fh.write(json.dumps(rec) + "\n")
