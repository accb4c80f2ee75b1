from .agent import AgentConfig, DDPGAgent, ddpg_update, explore_action
from .buffer import Episode, ReplayBuffer, bonus_reward, episode_priorities
from .train import (CURVE_COLUMNS, VARIANTS, TrainConfig, Trainer, episodes_to, evaluate,
                    recompute_scores, train)

__all__ = [
    "AgentConfig", "DDPGAgent", "ddpg_update", "explore_action",
    "Episode", "ReplayBuffer", "bonus_reward", "episode_priorities",
    "CURVE_COLUMNS", "VARIANTS", "TrainConfig", "Trainer", "episodes_to", "evaluate",
    "recompute_scores", "train",
]
