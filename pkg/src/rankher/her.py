"""Hindsight goal selection, relabeling and experience-ranking filter.

Each finished episode receives one rank (group 0 best .. 4 worst) from a
ranker. Original-goal transitions are always stored; hindsight transitions are
stored only when the episode's group is at or below ``rank_threshold``.
"""

import csv
import math
from dataclasses import dataclass

import numpy as np

from .nn import ConfigError
from .replay import Transition

N_GROUPS = 5


@dataclass(frozen=True)
class HerConfig:
    strategy: str = "future"
    k: int = 4
    rank_threshold: int = 3
    filter_enabled: bool = True
    enabled: bool = True

    def __post_init__(self):
        if self.strategy not in ("final", "future"):
            raise ConfigError(f"unknown HER strategy {self.strategy!r}")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if not 0 <= self.rank_threshold <= 4:
            raise ConfigError("rank_threshold must be in 0..4")


@dataclass(frozen=True)
class EpisodeRank:
    group: int
    source: str = "oracle"

    def __post_init__(self):
        if self.group not in range(N_GROUPS):
            raise ValueError(f"group {self.group} outside 0..4")


def distance_group(d, diameter, bands=(0.25, 0.5, 0.75)):
    """Group 1..4 from a distance, with band edges given as fractions of ``diameter``.

    ``bands`` are the upper edges of groups 1-3; the default reproduces
    ``1 + floor(4 d / D)`` clamped to [1, 4].
    """
    x = d / diameter
    if tuple(bands) == (0.25, 0.5, 0.75):
        return int(min(max(1 + math.floor(4 * x), 1), 4))
    return 1 + sum(x >= b for b in bands)


def oracle_rank(summary, spec, bands=(0.25, 0.5, 0.75), open_angle=0.05):
    """Rank from the exact terminal summary (door: hinge angle + effector distance)."""
    if spec.name.startswith("door"):
        if summary.hinge_angle > open_angle:
            return EpisodeRank(0, "oracle")
        d = summary.ee_handle_distance
    else:
        if summary.goal_distance < spec.success_epsilon:
            return EpisodeRank(0, "oracle")
        d = summary.goal_distance
    return EpisodeRank(distance_group(d, spec.workspace_diameter, bands), "oracle")


def cnn_rank(image, net):
    img = np.asarray(image, dtype=float)
    if img.ndim == 2:
        img = img[None, None]
    elif img.ndim == 3:
        img = img[None]
    if img.shape[1:] != net.input_shape:
        raise ConfigError(f"image shape {img.shape[1:]} does not match network input {net.input_shape}")
    probs = net.forward(img)[0]
    return EpisodeRank(int(np.argmax(probs)), "cnn")  # argmax returns the first (lowest) on ties


class OracleRanker:
    def __init__(self, spec, bands=(0.25, 0.5, 0.75)):
        self.spec, self.bands = spec, bands

    def rank(self, summary, image=None):
        return oracle_rank(summary, self.spec, self.bands)


class CnnRanker:
    def __init__(self, net):
        self.net = net
        self.needs_image = True

    def rank(self, summary, image):
        return cnn_rank(image, self.net)


def select_goals(episode, config, rng):
    """List of ``(t, step)`` pairs; the goal is the achieved goal at ``step``.

    ``final`` pairs every t with the terminal state (step T). ``future`` draws up
    to k distinct steps from (t, T-1] without replacement.
    """
    T = episode.horizon
    if config.strategy == "final":
        return [(t, T) for t in range(T)]
    out = []
    for t in range(T - 1):
        later = T - 1 - t
        picks = rng.choice(later, size=min(config.k, later), replace=False) + t + 1
        out.extend((t, int(i)) for i in picks)
    return out


def relabel(transition, new_goal, env):
    new_goal = np.asarray(new_goal, dtype=float)
    gd = env.spec.goal_dim
    if new_goal.shape != (gd,):
        raise ConfigError(f"goal must have dimension {gd}")
    sg = transition.state_goal.copy()
    sg_next = transition.next_state_goal.copy()
    sg[-gd:] = new_goal
    sg_next[-gd:] = new_goal
    return Transition(sg, transition.action.copy(), env.compute_reward(transition.achieved_goal_next, new_goal),
                      sg_next, transition.achieved_goal_next.copy(), transition.episode_id, transition.t, True)


def _columns(episode, rows, goals, rewards, hindsight):
    s = episode.states[rows]
    s_next = episode.states[rows + 1]
    return dict(
        state_goal=np.concatenate([s, goals], axis=1),
        action=episode.actions[rows],
        reward=rewards,
        next_state_goal=np.concatenate([s_next, goals], axis=1),
        achieved_goal_next=episode.achieved[rows + 1],
        episode_id=np.full(len(rows), episode.episode_id),
        t=rows,
        hindsight=np.full(len(rows), hindsight),
    )


def original_columns(episode):
    T = episode.horizon
    rows = np.arange(T)
    goals = np.broadcast_to(episode.goal, (T, len(episode.goal)))
    return _columns(episode, rows, goals, episode.rewards.astype(float), False)


def hindsight_columns(episode, pairs, env):
    if not pairs:
        return None
    rows = np.array([t for t, _ in pairs])
    goals = episode.achieved[np.array([i for _, i in pairs])]
    rewards = env.compute_reward(episode.achieved[rows + 1], goals)
    return _columns(episode, rows, goals, np.asarray(rewards, dtype=float).reshape(-1), True)


def storage_blocks(episode, rank, config, env, rng):
    """Column blocks to store for one episode: originals, then admitted hindsight.

    Goals are always drawn, so the HER rng stream advances identically
    whether or not the episode is filtered out.
    """
    blocks = [original_columns(episode)]
    if config.enabled:
        pairs = select_goals(episode, config, rng)
        keep = not config.filter_enabled or rank is None or rank.group <= config.rank_threshold
        if keep and pairs:
            blocks.append(hindsight_columns(episode, pairs, env))
    return blocks


def filter_and_store(episode, rank, config, buffer, env, rng):
    """Store originals plus (if the rank passes) hindsight transitions; returns the count stored."""
    total = 0
    for cols in storage_blocks(episode, rank, config, env, rng):
        buffer.push_arrays(**cols)
        total += len(cols["reward"])
    return total


class RankLedger:
    """CSV ``episode_id,group,source,hinge_angle,distance``, one row appended per episode.

    Opening a ledger on an existing path starts the file over.
    """

    HEADER = ["episode_id", "group", "source", "hinge_angle", "distance"]

    def __init__(self, path=None):
        self.path = path
        self.rows = []
        if path is not None:
            with open(path, "w", newline="") as fh:
                csv.writer(fh).writerow(self.HEADER)

    def record(self, episode_id, rank, summary):
        row = [int(episode_id), rank.group, rank.source, f"{summary.hinge_angle:.6f}",
               f"{summary.ee_handle_distance:.6f}"]
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh).writerow(row)

    def groups(self):
        return {row[0]: row[1] for row in self.rows}


def read_rank_ledger(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
