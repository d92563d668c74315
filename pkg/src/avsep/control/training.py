"""Policy and refiner training: rollout collection, the cyclic schedule, and
per-baseline refiner fitting.

Every learned policy trains with PPO on its own reward; the memory refiner is
fit online from that policy's trajectories (one-step supervised updates on a
replay of (current estimate, previous refined estimate, latent target)
transitions), alternating in blocks of U updates with the policy.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .. import tensor as T
from ..acoustics import NoiseModel, RirCache
from ..env import EpisodeRunner, Observation
from ..errors import ConfigError
from ..presets import Preset
from ..separator import Separator, make_refiner
from ..world import ACTIONS, STOP, EpisodeConstraints, Scene, sample_episode
from .policy import ActorCritic, PolicyConfig, act
from .ppo import PpoConfig, RolloutBuffer, ppo_update
from .rewards import RewardConfig, avnav_reward, nav_reward, novelty_reward, quality_reward

ACTION_NAMES = list(ACTIONS)
ACTION_NAMES_STOP = list(ACTIONS) + [STOP]


@dataclass
class TrainContext:
    scenes: list
    preset: Preset
    separator: Separator
    constraints: EpisodeConstraints
    rewards: RewardConfig = field(default_factory=RewardConfig)
    noise: NoiseModel = field(default_factory=lambda: NoiseModel(None))

    def __post_init__(self):
        self.rir_caches = {s.seed: RirCache() for s in self.scenes}


class EpisodeStream:
    """Endless stream of episode runners over the training scenes."""

    def __init__(self, ctx: TrainContext, variant: str, seed: int, use_refiner=True):
        self.ctx = ctx
        self.variant = variant
        self.seed = seed
        self.counter = 0
        self.use_refiner = use_refiner

    def next_runner(self) -> EpisodeRunner:
        ctx = self.ctx
        scene = ctx.scenes[self.counter % len(ctx.scenes)]
        episode = sample_episode(
            scene,
            self.variant,
            ctx.constraints,
            seed=self.seed * 1_000_003 + self.counter,
        )
        runner = EpisodeRunner(
            scene,
            episode,
            ctx.separator,
            ctx.preset,
            episode_id=self.counter,
            noise=ctx.noise,
            noise_seed=self.seed,
            rir_cache=ctx.rir_caches[scene.seed],
            use_refiner=self.use_refiner,
        )
        self.counter += 1
        return runner


class RefinerReplay:
    """Recent (current, previous, target) transitions from on-policy episodes."""

    def __init__(self, capacity: int = 1200):
        self.items = deque(maxlen=capacity)

    def add(self, mono, prev, target):
        self.items.append(
            (
                mono.astype(np.float32),
                prev.astype(np.float32),
                target.astype(np.float32),
            )
        )

    def sample(self, rng: np.random.Generator, batch: int):
        idx = rng.integers(0, len(self.items), size=min(batch, len(self.items)))
        mono = np.stack([self.items[i][0] for i in idx]).astype(np.float64)
        prev = np.stack([self.items[i][1] for i in idx]).astype(np.float64)
        target = np.stack([self.items[i][2] for i in idx]).astype(np.float64)
        return mono, prev, target

    def __len__(self):
        return len(self.items)


def refiner_update(
    separator: Separator,
    replay: RefinerReplay,
    adam: T.AdamState,
    rng: np.random.Generator,
    batch: int = 16,
) -> float:
    """One supervised Adam step on the refiner; returns the batch loss."""
    mono, prev, target = replay.sample(rng, batch)
    params = separator.f_refine.named_parameters("f_refine")
    T.zero_grads(params)
    pred = separator.refine_batch(np.concatenate([mono, prev], axis=1), training=True)
    loss = T.l1_loss(pred, T.Tensor(target))
    T.backward(loss)
    T.adam_step(params, adam)
    return loss.item()


def cyclic_schedule(total_updates: int, u: int = 6) -> list:
    """Alternating blocks of refiner (R) and policy (P) updates."""
    schedule = []
    while len(schedule) < total_updates:
        schedule.extend(["R"] * min(u, total_updates - len(schedule)))
        schedule.extend(["P"] * min(u, max(0, total_updates - len(schedule))))
    return schedule


@dataclass
class RolloutState:
    """Keeps one environment stream rolling across PPO sequence boundaries."""

    stream: EpisodeStream
    policy: ActorCritic
    kind: str
    rewards_cfg: RewardConfig
    rng: np.random.Generator
    replay: RefinerReplay | None = None

    def __post_init__(self):
        self.runner = None
        self.hidden = self.policy.initial_state()
        self.visits = {}
        self.episode_returns = []
        self._ret = 0.0

    def _ensure_runner(self):
        if self.runner is None or self.runner.done:
            if self.runner is not None:
                self.episode_returns.append(self._ret)
            self._ret = 0.0
            self.runner = self.stream.next_runner()
            self.hidden = self.policy.initial_state()
            self.visits = {self.runner.pose.node: 1}

    def step(self):
        """Advance one step; returns a transition tuple for the buffer."""
        self._ensure_runner()
        runner = self.runner
        obs = Observation.build(
            runner.view, self.policy.cfg.n_classes, self.policy.cfg.audio_source
        )
        result = act(self.policy, obs, self.hidden, self.rng)
        names = ACTION_NAMES_STOP if self.policy.cfg.n_actions == 4 else ACTION_NAMES
        action_name = names[result.action]

        before = runner.truth()
        t_before = runner.t
        if self.replay is not None:
            self.replay.add(
                runner.view.mono, runner.refine_input_prev, runner.mono_gt_sliced
            )
        runner.step(action_name)
        after = runner.truth()
        reward = self._reward(action_name, before, after, t_before, runner)
        self._ret += reward
        self.hidden = result.hidden
        done = runner.done
        return obs, result, reward, done

    def _reward(self, action_name, before, after, t_before, runner):
        cfg = self.rewards_cfg
        if self.kind == "quality":
            return quality_reward(
                before.refined_loss,
                after.refined_loss,
                t_before,
                runner.episode.budget,
                final_weight=cfg.quality_final_weight,
            )
        if self.kind == "nav":
            return nav_reward(
                before.geodesic_to_target, after.geodesic_to_target, cfg.nav_per_meter
            )
        if self.kind == "novelty":
            node = runner.pose.node
            self.visits[node] = self.visits.get(node, 0) + 1
            return novelty_reward(self.visits[node])
        if self.kind == "avnav":
            success = (
                action_name == STOP
                and runner.pose.node == runner.episode.target.location
            )
            return avnav_reward(
                success, before.geodesic_to_target, after.geodesic_to_target, cfg
            )
        raise ConfigError(f"unknown reward kind {self.kind!r}")

    def bootstrap_value(self) -> float:
        if self.runner is None or self.runner.done:
            return 0.0
        obs = Observation.build(
            self.runner.view, self.policy.cfg.n_classes, self.policy.cfg.audio_source
        )
        return act(self.policy, obs, self.hidden, deterministic=True).value


@dataclass
class TrainResult:
    policy: ActorCritic
    separator: Separator  # shares front nets; carries this model's refiner
    telemetry: list
    schedule: list
    env_steps: int


def train_policy(
    ctx: TrainContext,
    kind: str,
    variant: str,
    total_env_steps: int,
    ppo_cfg: PpoConfig,
    seed: int = 0,
    policy_overrides: dict | None = None,
    refiner_lr: float = 5e-4,
    u_cycle: int = 6,
    use_refiner: bool = True,
) -> TrainResult:
    """PPO training with cyclic refiner updates.

    ``kind`` picks the reward (quality, nav, novelty, avnav); avnav adds the
    Stop action.  The separator front must already be pretrained and frozen.
    """
    if not ctx.separator.front_frozen:
        raise ConfigError("cyclic training requires a frozen pretrained separator front")
    n_actions = 4 if kind == "avnav" else 3
    overrides = dict(policy_overrides or {})
    policy_cfg = PolicyConfig.from_preset(ctx.preset, n_actions=n_actions, **overrides)
    policy = ActorCritic(policy_cfg, seed=seed)
    refiner = make_refiner(ctx.separator.cfg, seed=seed)
    separator = ctx.separator.clone_with_refiner(refiner)

    entropy = (
        ctx.rewards.entropy_quality if kind == "quality" else ctx.rewards.entropy_other
    )
    ppo_cfg = PpoConfig(
        clip=ppo_cfg.clip,
        action_loss_weight=ctx.rewards.action_loss_weight,
        value_loss_weight=ctx.rewards.value_loss_weight,
        entropy_coef=entropy,
        gamma=ppo_cfg.gamma,
        lam=ppo_cfg.lam,
        lr=ppo_cfg.lr,
        epochs=ppo_cfg.epochs,
        rollout_steps=ppo_cfg.rollout_steps,
        sequences_per_update=ppo_cfg.sequences_per_update,
        normalize_advantages=ppo_cfg.normalize_advantages,
    )

    train_ctx = TrainContext(
        ctx.scenes, ctx.preset, separator, ctx.constraints, ctx.rewards, ctx.noise
    )
    stream = EpisodeStream(train_ctx, variant, seed=seed, use_refiner=use_refiner)
    replay = RefinerReplay()
    rng = np.random.default_rng([seed, 15])
    state = RolloutState(stream, policy, kind, ctx.rewards, rng, replay=replay)

    adam_policy = T.AdamState(lr=ppo_cfg.lr)
    adam_refiner = T.AdamState(lr=refiner_lr)
    telemetry = []
    schedule_log = []
    env_steps = 0
    update_idx = 0
    phase_r = True

    # warm the refiner replay with on-policy episodes so the first cyclic
    # block can actually fit the refiner before rewards depend on it
    if use_refiner:
        warmup = RolloutState(stream, policy, kind, ctx.rewards, rng, replay=replay)
        while len(replay) < 64:
            warmup.step()

    while env_steps < total_env_steps:
        if phase_r:
            for _ in range(u_cycle if use_refiner else 0):
                if len(replay) >= 32:
                    loss = refiner_update(separator, replay, adam_refiner, rng)
                    schedule_log.append("R")
                    telemetry.append(
                        {"update": update_idx, "phase": "R", "refiner_loss": loss, "env_steps": env_steps}
                    )
                    update_idx += 1
        else:
            for _ in range(u_cycle):
                buffer = RolloutBuffer(ppo_cfg.rollout_steps)
                for _ in range(ppo_cfg.sequences_per_update):
                    state._ensure_runner()
                    buffer.start_sequence(state.hidden)
                    for _ in range(ppo_cfg.rollout_steps):
                        obs, result, reward, done = state.step()
                        buffer.add(obs, result.action, result.log_prob, result.value, reward, done)
                        env_steps += 1
                        if done:
                            state._ensure_runner()
                    buffer.finish_sequence(state.bootstrap_value())
                stats = ppo_update(policy, buffer, ppo_cfg, adam_policy)
                schedule_log.append("P")
                recent = state.episode_returns[-20:]
                telemetry.append(
                    {
                        "update": update_idx,
                        "phase": "P",
                        "env_steps": env_steps,
                        "mean_return": float(np.mean(recent)) if recent else math.nan,
                        **stats,
                    }
                )
                update_idx += 1
                if env_steps >= total_env_steps:
                    break
        phase_r = not phase_r
    return TrainResult(policy, separator, telemetry, schedule_log, env_steps)


def fit_refiner_for_baseline(
    ctx: TrainContext,
    scripted,
    variant: str,
    updates: int = 300,
    episodes_cap: int = 60,
    seed: int = 0,
    refiner_lr: float = 5e-4,
) -> Separator:
    """Train a fresh refiner on trajectories produced by a scripted baseline."""
    refiner = make_refiner(ctx.separator.cfg, seed=seed + 999)
    separator = ctx.separator.clone_with_refiner(refiner)
    train_ctx = TrainContext(
        ctx.scenes, ctx.preset, separator, ctx.constraints, ctx.rewards, ctx.noise
    )
    stream = EpisodeStream(train_ctx, variant, seed=seed)
    replay = RefinerReplay()
    rng = np.random.default_rng([seed, 31])
    adam = T.AdamState(lr=refiner_lr)
    # interleave collection and fitting so the memory inputs in the replay
    # track the refiner being trained (its outputs feed back as inputs)
    rounds = 4
    for round_idx in range(rounds):
        for _ in range(max(1, episodes_cap // rounds)):
            runner = stream.next_runner()
            scripted.reset(runner.scene, runner.episode, rng)
            while not runner.done:
                view = runner.view
                replay.add(view.mono, runner.refine_input_prev, runner.mono_gt_sliced)
                runner.step(scripted.act(runner.pose, view.collided))
        for _ in range(max(1, updates // rounds)):
            if len(replay) >= 32:
                refiner_update(separator, replay, adam, rng)
    return separator
