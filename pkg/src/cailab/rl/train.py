"""DDPG+HER training on 1DSlide with optional influence-based mechanisms.

Variants switch on the three mechanisms independently:

===========  =====  ======  =========
variant      bonus  active  cai_p
===========  =====  ======  =========
baseline     no     no      no
bonus        yes    no      no
active       no     yes     no
cai_p        no     no      yes
combined     yes    yes     yes
===========  =====  ======  =========

Randomness is split into independent streams (environment, exploration,
replay sampling, influence scoring, model training, network init), so
switching every mechanism off leaves the draws of the remaining streams
exactly as in plain DDPG+HER.
"""
from __future__ import annotations

import logging
import pickle
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from ..cai import CaiConfig, cai_scores
from ..density import GaussianTransitionModel, fit_online, online_batches
from ..env_slide import ACTION_DIM, OBJECT_IDX, STATE_DIM, SlideParams, reset, step
from .agent import AgentConfig, DDPGAgent, explore_action
from .buffer import Episode, ReplayBuffer

logger = logging.getLogger(__name__)

VARIANTS = {
    "baseline": dict(bonus=False, active=False, prioritized=False),
    "bonus": dict(bonus=True, active=False, prioritized=False),
    "active": dict(bonus=False, active=True, prioritized=False),
    "cai_p": dict(bonus=False, active=False, prioritized=True),
    "combined": dict(bonus=True, active=True, prioritized=True),
}

CURVE_COLUMNS = ("episode", "success_rate", "mean_cai", "critic_loss", "actor_loss", "seed", "variant")


@dataclass
class TrainConfig:
    n_episodes: int = 4000
    warmup_episodes: int = 200
    eval_every: int = 200
    eval_episodes: int = 100
    buffer_episodes: int = 5000
    stop_at: float | None = None
    bonus_scale: float = 0.2
    max_bonus: float = 2.0
    active_fraction: float = 1.0
    n_actions: int = 32
    model_every: int = 100
    model_hidden: tuple = (64, 64, 64)
    model_lr: float = 1e-3
    model_batch: int = 500
    model_normalize_input: bool = True
    model_first_batches: int = 4000
    model_batches: int = 1000
    model_batches_late: int = 500
    model_late_after: int = 5200
    target_scale: float = 1.0
    agent: AgentConfig = field(default_factory=AgentConfig)
    env: SlideParams = field(default_factory=SlideParams)

    def __post_init__(self):
        if isinstance(self.agent, dict):
            self.agent = AgentConfig(**self.agent)
        if isinstance(self.env, dict):
            self.env = SlideParams(**self.env)
        self.model_hidden = tuple(int(h) for h in self.model_hidden)
        if self.n_episodes < 0 or self.warmup_episodes < 1:
            raise ValueError("need n_episodes >= 0 and warmup_episodes >= 1")
        if self.eval_every < 1 or self.eval_episodes < 1 or self.model_every < 1:
            raise ValueError("eval_every, eval_episodes and model_every must be positive")
        if self.buffer_episodes < self.warmup_episodes:
            raise ValueError("buffer must hold the warmup episodes")

    def to_dict(self):
        return asdict(self)


def agent_config_for(cfg: TrainConfig, variant):
    flags = VARIANTS[variant]
    return replace(cfg.agent,
                   bonus_scale=cfg.bonus_scale if flags["bonus"] else 0.0,
                   max_bonus=cfg.max_bonus,
                   active_fraction=cfg.active_fraction if flags["active"] else 0.0)


def uses_model(variant):
    return any(VARIANTS[variant].values())


def rollout(params: SlideParams, rng, policy):
    """One episode; ``policy(s_array, goal_center)`` returns an action."""
    s, goal = reset(params, rng)
    T = params.episode_length
    obs = np.empty((T + 1, STATE_DIM))
    acts = np.empty((T, ACTION_DIM))
    obs[0] = s.to_array()
    for t in range(T):
        a = np.asarray(policy(obs[t], goal.center), dtype=float).reshape(ACTION_DIM)
        s, _ = step(params, s, a)
        acts[t] = a
        obs[t + 1] = s.to_array()
    return Episode(obs, acts, goal.center, goal.halfwidth)


def evaluate(agent: DDPGAgent, params: SlideParams, n, rng):
    """Fraction of greedy episodes whose final state is inside the goal zone."""
    if n < 1:
        raise ValueError("n must be >= 1")
    wins = 0
    for _ in range(n):
        ep = rollout(params, rng, lambda o, g: agent.act(o, [g]))
        wins += int(ep.task_rewards[-1] == 0.0)
    return wins / n


def episode_scores(model, obs, cai_cfg: CaiConfig, seed, episode_id):
    """Influence scores of one episode's states with seeds tied to the episode."""
    rng = np.random.default_rng([seed, int(episode_id)])
    actions = cai_cfg.sample_actions(rng, len(obs))
    return cai_scores(model, obs, cai_cfg, actions=actions)


def recompute_scores(buffer: ReplayBuffer, model, cai_cfg: CaiConfig, seed, chunk=100):
    """Rescore every stored state with ``model``.

    The action samples of episode ``i`` come from ``default_rng([seed, id_i])``,
    so rescoring with the same model is deterministic.
    """
    n = buffer.size
    for start in range(0, n, chunk):
        idx = np.arange(start, min(n, start + chunk))
        obs = buffer.obs[idx].reshape(-1, buffer.obs.shape[-1])
        actions = np.concatenate([
            cai_cfg.sample_actions(np.random.default_rng([seed, int(buffer.ids[i])]), buffer.T + 1)
            for i in idx])
        buffer.scores[idx] = cai_scores(model, obs, cai_cfg, actions=actions).reshape(len(idx), -1)
    return buffer


def make_model(cfg: TrainConfig, seed):
    return GaussianTransitionModel(hidden=cfg.model_hidden, lr=cfg.model_lr, batch_size=cfg.model_batch,
                                   normalize_input=cfg.model_normalize_input, random_state=seed)


class Trainer:
    """Resumable training run. ``run()`` advances until done; ``save``/``load``
    pickle the complete state including every random stream."""

    def __init__(self, cfg: TrainConfig, variant="baseline", seed=0):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
        self.cfg = cfg
        self.variant = variant
        self.seed = int(seed)
        self.flags = VARIANTS[variant]
        self.agent_cfg = agent_config_for(cfg, variant)
        streams = np.random.SeedSequence(self.seed).spawn(7)
        env_ss, explore_ss, buffer_ss, cai_ss, model_ss, init_ss, eval_ss = streams
        self.env_rng = np.random.default_rng(env_ss)
        self.explore_rng = np.random.default_rng(explore_ss)
        self.buffer_rng = np.random.default_rng(buffer_ss)
        self.cai_rng = np.random.default_rng(cai_ss)
        self.eval_seed = int(eval_ss.generate_state(1)[0])
        self.score_seed = int(cai_ss.generate_state(1)[0])
        self.agent = DDPGAgent(STATE_DIM, 1, ACTION_DIM, self.agent_cfg, np.random.default_rng(init_ss))
        self.buffer = ReplayBuffer(cfg.buffer_episodes, cfg.env.episode_length, STATE_DIM, ACTION_DIM,
                                   cfg.env.goal_halfwidth)
        self.cai_cfg = CaiConfig(cfg.n_actions)
        self.model = make_model(cfg, int(model_ss.generate_state(1)[0])) if uses_model(variant) else None
        self.episode = 0
        self.warm = False
        self.curve = []
        self._losses = []
        self.done = False

    # -- pieces ------------------------------------------------------------

    def _store(self, ep: Episode):
        self.buffer.add(ep)
        self.agent.update_normalizers(ep.obs, np.r_[ep.goal, ep.achieved][:, None])

    def _score_new(self, slot):
        if self.model is None or not hasattr(self.model, "trunk_"):
            return
        self.buffer.scores[slot] = episode_scores(self.model, self.buffer.obs[slot], self.cai_cfg,
                                                  self.score_seed, self.buffer.ids[slot])

    def _schedule(self, episode_count):
        c = self.cfg
        return online_batches(episode_count, c.model_first_batches, c.model_batches, c.model_batches_late,
                              c.model_late_after)

    def _fit_model(self):
        fit_online(self.model, self.buffer, self.episode, OBJECT_IDX, self.cfg.target_scale,
                   self.cfg.model_batch, self._schedule)
        recompute_scores(self.buffer, self.model, self.cai_cfg, self.score_seed)

    def _warmup(self):
        params = self.cfg.env
        for _ in range(self.cfg.warmup_episodes):
            ep = rollout(params, self.env_rng, lambda o, g: self.explore_rng.uniform(-1.0, 1.0, ACTION_DIM))
            self._store(ep)
        if self.model is not None:
            self._fit_model()
        self.warm = True
        self._evaluate()

    def _evaluate(self):
        rng = np.random.default_rng([self.eval_seed, self.episode])
        rate = evaluate(self.agent, self.cfg.env, self.cfg.eval_episodes, rng)
        n = self.buffer.size
        recent = slice(max(0, n - self.cfg.eval_every), n)
        mean_cai = float(np.mean(self.buffer.scores[recent, :-1])) if self.model is not None else 0.0
        losses = np.mean(self._losses, axis=0) if self._losses else (0.0, 0.0)
        row = {"episode": self.episode, "success_rate": rate, "mean_cai": mean_cai,
               "critic_loss": float(losses[0]), "actor_loss": float(losses[1]),
               "seed": self.seed, "variant": self.variant}
        self.curve.append(row)
        self._losses = []
        logger.info("%s seed %d episode %d success %.2f", self.variant, self.seed, self.episode, rate)
        if self.cfg.stop_at is not None and rate >= self.cfg.stop_at:
            self.done = True
        return row

    def _train_episode(self):
        cfg, acfg = self.cfg, self.agent_cfg
        model = self.model if self.flags["active"] else None
        ep = rollout(cfg.env, self.env_rng,
                     lambda o, g: explore_action(self.agent, model, o, [g], acfg, self.explore_rng,
                                                 self.cai_cfg, self.cai_rng))
        slot = self.buffer.n_added % self.buffer.capacity
        self._store(ep)
        self._score_new(slot)
        self.episode += 1
        bs = min(acfg.batch_size, self.buffer.size * self.buffer.T)
        for _ in range(acfg.updates_per_episode):
            batch = self.buffer.sample(bs, self.buffer_rng, her_prob=acfg.her_prob,
                                       prioritized=self.flags["prioritized"],
                                       bonus_scale=acfg.bonus_scale, max_bonus=acfg.max_bonus)
            out = self.agent.update(batch)
            self._losses.append((out["critic_loss"], out["actor_loss"]))
        if acfg.updates_per_episode:
            self.agent.update_targets()
        if self.model is not None and self.episode % cfg.model_every == 0:
            self._fit_model()

    def run(self, until=None, checkpoint=None, on_eval=None):
        """Train until ``n_episodes`` (or ``until``) episodes or the stop
        threshold; returns the learning curve rows."""
        stop = self.cfg.n_episodes if until is None else min(until, self.cfg.n_episodes)
        if not self.warm:
            self._warmup()
            if on_eval is not None:
                on_eval(self.curve[-1])
        while not self.done and self.episode < stop:
            self._train_episode()
            if self.episode % self.cfg.eval_every == 0:
                row = self._evaluate()
                if checkpoint is not None:
                    self.save(checkpoint)
                if on_eval is not None:
                    on_eval(row)
        if self.episode >= self.cfg.n_episodes:
            self.done = True
        return self.curve

    def save(self, path):
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        with tmp.open("wb") as fh:
            pickle.dump(self, fh, protocol=pickle.HIGHEST_PROTOCOL)
        tmp.replace(path)
        return path

    @staticmethod
    def load(path):
        with Path(path).open("rb") as fh:
            obj = pickle.load(fh)
        if not isinstance(obj, Trainer):
            raise ValueError(f"{path}: not a training checkpoint")
        return obj


def train(cfg: TrainConfig, variant="baseline", seed=0):
    """Run one training job and return its learning curve (list of dict rows)."""
    return Trainer(cfg, variant, seed).run()


def episodes_to(curve, threshold):
    """First evaluated episode count with success >= threshold (inf if never)."""
    for row in curve:
        if row["success_rate"] >= threshold:
            return row["episode"]
    return float("inf")
