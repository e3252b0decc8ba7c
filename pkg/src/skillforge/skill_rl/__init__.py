"""Imitation / discovery training and the hierarchical downstream task."""

from .downstream import DownstreamConfig, downstream_reward, train_downstream
from .ppo import compute_gae, ppo_update
from .skills import SkillContext, discovery_encoder_loss, sample_skill, skill_reward
from .train import TrainConfig, train

__all__ = [
    "DownstreamConfig", "SkillContext", "TrainConfig", "compute_gae", "discovery_encoder_loss",
    "downstream_reward", "ppo_update", "sample_skill", "skill_reward", "train", "train_downstream",
]
