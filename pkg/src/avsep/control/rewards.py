"""Reward functions for the movement policies.

The quality reward is the per-step drop in the refined-estimate loss, with a
one-time final term that scales the closing loss; an episode's rewards
telescope to L_1 - (1 + final_weight) * L_T.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from ..errors import InputError


@dataclass(frozen=True)
class RewardConfig:
    quality_final_weight: float = 10.0
    nav_per_meter: float = 1.0
    avnav_success: float = 10.0
    avnav_per_meter: float = 0.25
    avnav_time_penalty: float = 0.01
    entropy_quality: float = 0.01
    entropy_other: float = 0.2
    action_loss_weight: float = 1.0
    value_loss_weight: float = 0.5

    def __post_init__(self):
        for name, value in vars(self).items():
            if not math.isfinite(value):
                raise InputError(f"reward config field {name} must be finite")


def quality_reward(
    l_t: float,
    l_next: float,
    t: int,
    horizon: int,
    l_final: float | None = None,
    final_weight: float = 10.0,
) -> float:
    """Separation-quality improvement reward for the action taken at step t.

    Mid-episode (1 <= t <= horizon-2) the reward is the loss drop
    l_t - l_next; the last acting step (t = horizon-1) additionally pays
    -final_weight * L_horizon.
    """
    if l_t < 0 or l_next < 0 or (l_final is not None and l_final < 0):
        raise InputError("losses must be non-negative")
    if not 1 <= t <= horizon - 1:
        raise InputError(f"step {t} outside the reward window [1, {horizon - 1}]")
    reward = l_t - l_next
    if t == horizon - 1:
        closing = l_next if l_final is None else l_final
        reward += -final_weight * closing
    return reward


def nav_reward(d_t: float, d_next: float, per_meter: float = 1.0) -> float:
    """Geodesic progress toward the target, penalized symmetrically."""
    if d_t < 0 or d_next < 0:
        raise InputError("distances must be non-negative")
    return per_meter * (d_t - d_next)


def novelty_reward(visit_count: int) -> float:
    """Exploration bonus 1/sqrt(n) for the n-th visit to a grid node."""
    if visit_count < 1:
        raise InputError("visit count starts at 1")
    return 1.0 / math.sqrt(visit_count)


def avnav_reward(
    success: bool,
    d_t: float,
    d_next: float,
    cfg: RewardConfig = RewardConfig(),
) -> float:
    """Navigation-task reward: success bonus, geodesic shaping, time penalty."""
    reward = -cfg.avnav_time_penalty
    reward += cfg.avnav_per_meter * (d_t - d_next)
    if success:
        reward += cfg.avnav_success
    return reward
