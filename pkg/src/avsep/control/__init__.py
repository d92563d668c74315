from .baselines import SCRIPTED, ScriptedPolicy, make_scripted
from .composite import CompositePolicy
from .policy import ActorCritic, ActResult, PolicyConfig, act
from .ppo import PpoConfig, RolloutBuffer, compute_gae, ppo_update
from .rewards import RewardConfig, avnav_reward, nav_reward, novelty_reward, quality_reward
from .training import (
    EpisodeStream,
    RefinerReplay,
    TrainContext,
    TrainResult,
    cyclic_schedule,
    fit_refiner_for_baseline,
    refiner_update,
    train_policy,
)
