"""Goal-conditioned DDPG with input normalization, in numpy."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..cai import CaiConfig, select_influential_action
from ..nn import AdamState, Mlp, Normalizer


@dataclass
class AgentConfig:
    gamma: float = 0.98
    polyak: float = 0.95
    hidden: tuple = (64, 64)
    lr: float = 1e-3
    batch_size: int = 256
    updates_per_episode: int = 20
    action_noise: float = 0.2
    random_eps: float = 0.3
    active_fraction: float = 0.0
    action_l2: float = 1.0
    clip_return: tuple = (-50.0, 0.0)
    her_prob: float = 0.8
    bonus_scale: float = 0.0
    max_bonus: float = 2.0
    obs_clip: float = 5.0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.clip_return = tuple(float(c) for c in self.clip_return)
        if not 0.0 <= self.random_eps <= 1.0 or not 0.0 <= self.active_fraction <= 1.0:
            raise ValueError("random_eps and active_fraction must lie in [0, 1]")
        if not 0.0 <= self.polyak <= 1.0 or not 0.0 < self.gamma <= 1.0:
            raise ValueError("polyak must lie in [0, 1] and gamma in (0, 1]")
        if self.batch_size < 1 or self.updates_per_episode < 0:
            raise ValueError("batch_size must be positive")

    def to_dict(self):
        return asdict(self)


class DDPGAgent:
    """Actor-critic pair with target copies and running input normalizers.

    Observations and goals are standardized and clipped to ``[-obs_clip,
    obs_clip]`` before entering either network; the critic sees the raw action.
    """

    def __init__(self, obs_dim, goal_dim, action_dim, cfg: AgentConfig, rng):
        self.cfg = cfg
        self.obs_dim, self.goal_dim, self.action_dim = obs_dim, goal_dim, action_dim
        clip = (-cfg.obs_clip, cfg.obs_clip)
        self.obs_norm = Normalizer(obs_dim, clip)
        self.goal_norm = Normalizer(goal_dim, clip)
        n_in = obs_dim + goal_dim
        self.actor = Mlp([n_in, *cfg.hidden, action_dim], activations=["relu"] * len(cfg.hidden) + ["tanh"],
                         init="xavier", rng=rng, gain=1.0)
        self.critic = Mlp([n_in + action_dim, *cfg.hidden, 1], hidden="relu", init="xavier", rng=rng, gain=1.0)
        self.actor_target = self.actor.copy()
        self.critic_target = self.critic.copy()
        self.actor_opt = AdamState(self.actor.parameters(), lr=cfg.lr)
        self.critic_opt = AdamState(self.critic.parameters(), lr=cfg.lr)

    def _inputs(self, obs, goal):
        return np.concatenate([self.obs_norm(obs), self.goal_norm(goal)], axis=-1)

    def act(self, obs, goal):
        return self.actor.forward(self._inputs(np.asarray(obs, dtype=float),
                                               np.atleast_1d(np.asarray(goal, dtype=float))))

    def update_normalizers(self, obs, goals):
        self.obs_norm.update(obs)
        self.goal_norm.update(goals)

    def update(self, batch):
        """One critic and one actor Adam step on ``batch``; both gradients are
        taken before either network moves."""
        cfg = self.cfg
        obs, goal, act = batch["obs"], batch["goal"], batch["action"]
        n = len(obs)
        if n == 0:
            raise ValueError("empty batch")
        x = self._inputs(obs, goal)
        x2 = self._inputs(batch["next_obs"], goal)

        a2 = self.actor_target.forward(x2)
        q2 = self.critic_target.forward(np.concatenate([x2, a2], axis=1))[:, 0]
        not_done = 1.0 - batch["done"].astype(float)
        target = np.clip(batch["reward"] + cfg.gamma * not_done * q2, *cfg.clip_return)

        q, c_cache = self.critic.forward(np.concatenate([x, act], axis=1), return_cache=True)
        td = q[:, 0] - target
        critic_loss = float(np.mean(td * td))
        critic_grads, _ = self.critic.backward(c_cache, (2.0 * td / n)[:, None])

        pi, a_cache = self.actor.forward(x, return_cache=True)
        q_pi, qp_cache = self.critic.forward(np.concatenate([x, pi], axis=1), return_cache=True)
        actor_loss = float(-np.mean(q_pi) + cfg.action_l2 * np.mean(pi * pi))
        _, dx = self.critic.backward(qp_cache, np.full((n, 1), -1.0 / n))
        d_pi = dx[:, -self.action_dim:] + cfg.action_l2 * 2.0 * pi / pi.size
        actor_grads, _ = self.actor.backward(a_cache, d_pi)

        self.critic_opt.step(self.critic.parameters(), critic_grads)
        self.actor_opt.step(self.actor.parameters(), actor_grads)
        return {"critic_loss": critic_loss, "actor_loss": actor_loss,
                "q_target_min": float(target.min()), "q_target_max": float(target.max())}

    def update_targets(self):
        """Polyak averaging: ``target <- polyak * target + (1 - polyak) * online``."""
        tau = self.cfg.polyak
        for online, tgt in ((self.actor, self.actor_target), (self.critic, self.critic_target)):
            for p, tp in zip(online.parameters(), tgt.parameters()):
                tp *= tau
                tp += (1.0 - tau) * p

    def state_dict(self):
        return {
            "actor": self.actor, "critic": self.critic,
            "actor_target": self.actor_target, "critic_target": self.critic_target,
            "obs_norm": self.obs_norm, "goal_norm": self.goal_norm,
        }


def ddpg_update(agent: DDPGAgent, batch):
    return agent.update(batch)


def explore_action(agent: DDPGAgent, model, obs, goal, cfg: AgentConfig, rng,
                   cai_cfg: CaiConfig | None = None, cai_rng=None):
    """Behaviour action for data collection.

    With probability ``1 - random_eps`` the actor output plus Gaussian noise;
    otherwise an exploratory action, which is the most influential of the
    sampled candidates (scored on ``obs`` alone) with probability
    ``active_fraction`` when a model is available, else uniform. The active
    coin and candidate sampling use ``cai_rng`` so that disabling active
    exploration leaves ``rng`` draws untouched.
    """
    if rng.random() < cfg.random_eps:
        if (cfg.active_fraction > 0 and model is not None
                and cai_rng.random() < cfg.active_fraction):
            return np.asarray(select_influential_action(model, obs, cai_cfg, cai_rng), dtype=float)
        return rng.uniform(-1.0, 1.0, size=agent.action_dim)
    a = agent.act(obs, goal)
    return np.clip(a + cfg.action_noise * rng.standard_normal(agent.action_dim), -1.0, 1.0)
