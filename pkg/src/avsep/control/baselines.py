"""Scripted movement baselines.

Scripted agents are part of the evaluation platform, so unlike the learned
policy they may read the pose directly; the Proximity Prior additionally
receives an oracle distance to the target, mirroring its definition.
"""

from __future__ import annotations

import math

import numpy as np

from ..errors import InputError
from ..world import ACTIONS, STOP, Pose, Scene, apply_action

_DIRS = {0: (1, 0), 90: (0, 1), 180: (-1, 0), 270: (0, -1)}


class ScriptedPolicy:
    name = "scripted"
    supports = ("near", "far")

    def reset(self, scene: Scene, episode, rng: np.random.Generator) -> None:
        self.scene = scene
        self.episode = episode
        self.rng = rng

    def act(self, pose: Pose, collided: bool):
        raise NotImplementedError

    def check_variant(self, variant: str) -> None:
        if variant not in self.supports:
            raise InputError(f"{self.name} baseline does not support {variant} episodes")


class StandInPlace(ScriptedPolicy):
    name = "stand"

    def act(self, pose, collided):
        return None  # no-op each step; the action space has no explicit wait


class RotateInPlace(ScriptedPolicy):
    name = "rotate"

    def act(self, pose, collided):
        return "TurnRight"


class RandomAgent(ScriptedPolicy):
    name = "random"

    def __init__(self, with_stop: bool = False):
        self.actions = list(ACTIONS) + ([STOP] if with_stop else [])

    def act(self, pose, collided):
        return self.actions[self.rng.integers(len(self.actions))]


class MoveForwardAgent(ScriptedPolicy):
    """Always advances; turns right when blocked.  Never stops."""

    name = "move_forward"

    def act(self, pose, collided):
        if collided:
            return "TurnRight"
        return "MoveForward"


class DoAAgent(ScriptedPolicy):
    """Faces the target from one node away (near-target only): rotate right
    until a forward move is possible, take it, then turn around twice."""

    name = "doa"
    supports = ("near",)

    def reset(self, scene, episode, rng):
        super().reset(scene, episode, rng)
        self.phase = "seek"
        self.turns = 0

    def act(self, pose, collided):
        if self.phase == "seek":
            dx, dy = _DIRS[pose.heading]
            ahead = (pose.node[0] + dx, pose.node[1] + dy)
            if self.scene.is_navigable(ahead) and self.scene.has_edge(pose.node, ahead):
                self.phase = "turn_back"
                return "MoveForward"
            return "TurnRight"
        if self.phase == "turn_back":
            self.turns += 1
            if self.turns >= 2:
                self.phase = "hold"
            return "TurnRight"
        return None


class ProximityPrior(ScriptedPolicy):
    """Random actions, forced to turn whenever a forward move would leave
    the 2 m circle around the target (oracle distance, far-target only)."""

    name = "proximity"
    supports = ("far",)

    def __init__(self, radius: float = 2.0):
        self.radius = radius

    def act(self, pose, collided):
        target = self.episode.target.location
        action = ACTIONS[self.rng.integers(len(ACTIONS))]
        if action == "MoveForward":
            nxt, blocked = apply_action(self.scene, pose, action)
            dist = math.hypot(nxt.node[0] - target[0], nxt.node[1] - target[1])
            if not blocked and dist > self.radius:
                return ("TurnLeft", "TurnRight")[self.rng.integers(2)]
        return action


SCRIPTED = {
    "stand": StandInPlace,
    "rotate": RotateInPlace,
    "random": RandomAgent,
    "move_forward": MoveForwardAgent,
    "doa": DoAAgent,
    "proximity": ProximityPrior,
}


def make_scripted(name: str, **kwargs) -> ScriptedPolicy:
    try:
        return SCRIPTED[name](**kwargs)
    except KeyError:
        raise InputError(f"unknown scripted baseline {name!r}")
