"""Episode replay buffer with hindsight relabeling and influence-rank
prioritization."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..env_slide import OBJECT_IDX, goal_reward


@dataclass
class Episode:
    """One rollout. ``obs`` holds the ``T + 1`` visited states; ``scores``
    (same length, optional) holds their influence scores."""
    obs: np.ndarray
    actions: np.ndarray
    goal: float
    goal_halfwidth: float = 0.05
    scores: np.ndarray | None = None

    @property
    def length(self):
        return len(self.actions)

    @property
    def achieved(self):
        return self.obs[:, OBJECT_IDX[0]]

    @property
    def task_rewards(self):
        return goal_reward(self.achieved[1:], self.goal, self.goal_halfwidth)

    @property
    def total_influence(self):
        if self.scores is None:
            raise ValueError("episode has no influence scores")
        return float(np.sum(self.scores[: self.length]))


def episode_priorities(totals, ages=None):
    """Selection probability of each episode from its total influence.

    Episodes are ranked ascending by total (rank 1 = least influence, ties go
    to the older episode, i.e. smaller ``ages`` value) and get priority
    ``1 / (M + 1 - rank)``, so the most influential episode has priority 1.
    """
    totals = np.asarray(totals, dtype=float)
    m = totals.size
    if m == 0:
        raise ValueError("no episodes")
    if not np.all(np.isfinite(totals)):
        raise ValueError("episode totals must be finite (unscored episodes present?)")
    ages = np.arange(m) if ages is None else np.asarray(ages)
    order = np.lexsort((ages, totals))
    ranks = np.empty(m, dtype=np.int64)
    ranks[order] = np.arange(1, m + 1)
    p = 1.0 / (m + 1 - ranks)
    return p / p.sum()


class ReplayBuffer:
    """Ring buffer of fixed-length episodes stored in preallocated arrays."""

    def __init__(self, capacity, episode_length, obs_dim, action_dim, goal_halfwidth=0.05):
        self.capacity = int(capacity)
        self.T = int(episode_length)
        self.goal_halfwidth = goal_halfwidth
        self.obs = np.zeros((capacity, self.T + 1, obs_dim))
        self.actions = np.zeros((capacity, self.T, action_dim))
        self.goals = np.zeros(capacity)
        self.scores = np.full((capacity, self.T + 1), np.nan)
        self.ids = np.zeros(capacity, dtype=np.int64)
        self.size = 0
        self.n_added = 0

    def __len__(self):
        return self.size

    def add(self, ep: Episode):
        if ep.length != self.T:
            raise ValueError(f"episode length {ep.length} != {self.T}")
        i = self.n_added % self.capacity
        self.obs[i] = ep.obs
        self.actions[i] = ep.actions
        self.goals[i] = ep.goal
        self.scores[i] = np.nan if ep.scores is None else ep.scores
        self.ids[i] = self.n_added
        self.n_added += 1
        self.size = min(self.size + 1, self.capacity)
        return i

    def episode(self, i) -> Episode:
        sc = self.scores[i]
        return Episode(self.obs[i].copy(), self.actions[i].copy(), float(self.goals[i]),
                       self.goal_halfwidth, None if np.isnan(sc).any() else sc.copy())

    def totals(self):
        return self.scores[: self.size, : self.T].sum(axis=1)

    def priorities(self):
        return episode_priorities(self.totals(), self.ids[: self.size])

    def transitions(self):
        """All stored ``(s, a, s')`` as flat arrays."""
        n = self.size
        s = self.obs[:n, :-1].reshape(n * self.T, -1)
        s2 = self.obs[:n, 1:].reshape(n * self.T, -1)
        a = self.actions[:n].reshape(n * self.T, -1)
        return s, a, s2

    def sample(self, batch_size, rng, her_prob=0.8, prioritized=False,
               bonus_scale=0.0, max_bonus=np.inf):
        """Draw a training batch with "future"-strategy hindsight relabeling.

        Episodes are drawn uniformly or by influence rank; the time step is
        uniform within the episode. The reward is recomputed for the
        (possibly relabeled) goal and, when ``bonus_scale > 0``, raised by
        the clipped influence score of the next state, capped at 0.
        """
        if self.size == 0:
            raise ValueError("empty buffer")
        n, T = self.size, self.T
        if prioritized:
            ep = rng.choice(n, size=batch_size, p=self.priorities())
        else:
            ep = rng.integers(0, n, size=batch_size)
        t = rng.integers(0, T, size=batch_size)
        her = rng.random(batch_size) < her_prob
        future = t + 1 + (rng.random(batch_size) * (T - t)).astype(np.int64)
        goals = self.goals[ep].copy()
        ach = self.obs[:, :, OBJECT_IDX[0]]
        goals[her] = ach[ep[her], future[her]]
        s = self.obs[ep, t]
        s2 = self.obs[ep, t + 1]
        r = goal_reward(ach[ep, t + 1], goals, self.goal_halfwidth)
        if bonus_scale > 0:
            r = bonus_reward(r, np.nan_to_num(self.scores[ep, t + 1], nan=0.0), bonus_scale, max_bonus)
        return {
            "obs": s, "goal": goals[:, None], "action": self.actions[ep, t], "reward": r,
            "next_obs": s2, "done": np.zeros(batch_size, dtype=bool), "episode": ep, "t": t,
        }


def bonus_reward(r_task, cai, scale, max_bonus):
    """Task reward plus clipped, scaled influence bonus; never above 0."""
    return np.minimum(0.0, r_task + scale * np.minimum(cai, max_bonus))
