from tracerca.rl.env import (
    EpisodeState,
    RcaEvalConfig,
    TreeGrowthEnv,
    complexity_reward,
    evaluate_policy,
    rca_reward,
)
from tracerca.rl.policy import PolicyModel, cascade_sample
from tracerca.rl.train import (
    TrainConfig,
    TrainResult,
    TrainingDivergedError,
    load_policy,
    random_pruning_baseline,
    save_policy,
    train_ppo,
)

__all__ = [
    "EpisodeState",
    "RcaEvalConfig",
    "TreeGrowthEnv",
    "complexity_reward",
    "evaluate_policy",
    "rca_reward",
    "PolicyModel",
    "cascade_sample",
    "TrainConfig",
    "TrainResult",
    "TrainingDivergedError",
    "load_policy",
    "random_pruning_baseline",
    "save_policy",
    "train_ppo",
]
