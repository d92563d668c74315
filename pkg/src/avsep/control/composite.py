"""Time-switched composite of the navigation and quality policies."""

from __future__ import annotations

import numpy as np

from ..env import Observation
from ..errors import InputError
from .policy import ActorCritic, act


class CompositePolicy:
    """Navigation policy controls for t < t_switch, quality policy after.

    The separator runs every step regardless of who controls.  The quality
    policy's recurrent state starts fresh at the switch, matching its
    training distribution (episodes that begin near the target).
    """

    def __init__(self, nav_policy: ActorCritic, quality_policy: ActorCritic, t_switch: int):
        if t_switch < 0:
            raise InputError("t_switch must be non-negative")
        self.nav = nav_policy
        self.quality = quality_policy
        self.t_switch = t_switch
        self.reset()

    def reset(self):
        self.h_nav = self.nav.initial_state()
        self.h_quality = self.quality.initial_state()

    def controller(self, t: int) -> str:
        return "nav" if t < self.t_switch else "quality"

    def act(self, view, t: int, rng=None, deterministic: bool = False) -> tuple:
        """Returns (action index, controlling policy name)."""
        if self.controller(t) == "nav":
            obs = Observation.build(view, self.nav.cfg.n_classes, self.nav.cfg.audio_source)
            result = act(self.nav, obs, self.h_nav, rng, deterministic)
            self.h_nav = result.hidden
            return result.action, "nav"
        obs = Observation.build(
            view, self.quality.cfg.n_classes, self.quality.cfg.audio_source
        )
        result = act(self.quality, obs, self.h_quality, rng, deterministic)
        self.h_quality = result.hidden
        return result.action, "quality"
