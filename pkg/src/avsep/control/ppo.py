"""Clipped-surrogate PPO with GAE over recurrent rollouts.

Rollouts are fixed-length sequences; updates replay each sequence through the
GRU from its stored initial hidden state so gradients flow through time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .. import tensor as T
from ..errors import InputError


@dataclass(frozen=True)
class PpoConfig:
    clip: float = 0.2
    action_loss_weight: float = 1.0
    value_loss_weight: float = 0.5
    entropy_coef: float = 0.01
    gamma: float = 0.99
    lam: float = 0.95
    lr: float = 1e-4
    epochs: int = 4
    rollout_steps: int = 20
    sequences_per_update: int = 4
    normalize_advantages: bool = True


@dataclass
class Sequence:
    """One fixed-length rollout segment."""

    observations: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    log_probs: list = field(default_factory=list)
    values: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    dones: list = field(default_factory=list)
    h0: np.ndarray | None = None
    bootstrap_value: float = 0.0

    def __len__(self):
        return len(self.actions)


class RolloutBuffer:
    """Fixed-capacity store of rollout sequences for one update."""

    def __init__(self, rollout_steps: int = 20):
        self.rollout_steps = rollout_steps
        self.sequences = []
        self._open = None

    def start_sequence(self, h0: np.ndarray) -> None:
        if self._open is not None and len(self._open):
            raise InputError("previous sequence not finished")
        self._open = Sequence(h0=h0.copy())

    def add(self, obs, action, log_prob, value, reward, done) -> None:
        seq = self._open
        if seq is None:
            raise InputError("no open sequence")
        if len(seq) >= self.rollout_steps:
            raise InputError("sequence already at capacity")
        seq.observations.append(obs)
        seq.actions.append(int(action))
        seq.log_probs.append(float(log_prob))
        seq.values.append(float(value))
        seq.rewards.append(float(reward))
        seq.dones.append(bool(done))

    def finish_sequence(self, bootstrap_value: float) -> None:
        seq = self._open
        if seq is None or len(seq) == 0:
            raise InputError("cannot finish an empty sequence")
        seq.bootstrap_value = float(bootstrap_value)
        self.sequences.append(seq)
        self._open = None

    @property
    def full(self) -> bool:
        return all(len(s) == self.rollout_steps for s in self.sequences)

    def clear(self):
        self.sequences = []
        self._open = None


def compute_gae(rewards, values, dones, bootstrap, gamma, lam):
    """Generalized advantage estimation over one sequence."""
    n = len(rewards)
    adv = np.zeros(n)
    last = 0.0
    for t in reversed(range(n)):
        next_value = bootstrap if t == n - 1 else values[t + 1]
        mask = 0.0 if dones[t] else 1.0
        delta = rewards[t] + gamma * next_value * mask - values[t]
        last = delta + gamma * lam * mask * last
        adv[t] = last
    returns = adv + np.asarray(values)
    return adv, returns


def ppo_update(policy, buffer: RolloutBuffer, cfg: PpoConfig, adam: T.AdamState) -> dict:
    """Clipped PPO update over every sequence in the buffer."""
    if not buffer.sequences or not buffer.full:
        raise InputError("ppo_update needs a full rollout buffer")
    params = policy.named_parameters()
    per_seq = []
    for seq in buffer.sequences:
        adv, ret = compute_gae(
            seq.rewards, seq.values, seq.dones, seq.bootstrap_value, cfg.gamma, cfg.lam
        )
        per_seq.append((adv, ret))
    if cfg.normalize_advantages:
        flat = np.concatenate([a for a, _ in per_seq])
        mean, std = flat.mean(), flat.std() + 1e-8
        per_seq = [((a - mean) / std, r) for a, r in per_seq]

    stats = {"action_loss": [], "value_loss": [], "entropy": [], "approx_kl": []}
    for _ in range(cfg.epochs):
        for seq, (adv, ret) in zip(buffer.sequences, per_seq):
            T.zero_grads(params)
            loss, info = _sequence_loss(policy, seq, adv, ret, cfg)
            if not math.isfinite(loss.item()):
                raise FloatingPointError(
                    f"non-finite PPO loss; buffer rewards {seq.rewards}"
                )
            T.backward(loss)
            T.adam_step(params, adam)
            for k, v in info.items():
                stats[k].append(v)
    return {k: float(np.mean(v)) for k, v in stats.items()}


def _sequence_loss(policy, seq: Sequence, adv, ret, cfg: PpoConfig):
    """Replay the sequence through the GRU and form the clipped loss."""
    n = len(seq)
    h = T.Tensor(seq.h0)
    logit_steps, value_steps = [], []
    for t in range(n):
        logits, value, h = policy.forward([seq.observations[t]], h)
        logit_steps.append(logits)
        value_steps.append(value)
        if seq.dones[t] and t + 1 < n:
            h = T.Tensor(policy.initial_state())
    logits_seq = T.concat(logit_steps, axis=0)  # (n, actions)
    values_seq = T.reshape(T.concat(value_steps, axis=0), (n,))

    actions = np.asarray(seq.actions)
    new_logp = T.categorical_log_prob(logits_seq, actions)
    old_logp = np.asarray(seq.log_probs)
    ratio = _exp(T.sub(new_logp, T.Tensor(old_logp)))
    adv_t = T.Tensor(adv)
    unclipped = T.multiply(ratio, adv_t)
    clipped = T.multiply(_clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip), adv_t)
    action_loss = T.multiply(T.mean(_minimum(unclipped, clipped)), -1.0)

    value_err = T.sub(values_seq, T.Tensor(ret))
    value_loss = T.mean(T.multiply(value_err, value_err))

    probs = T.softmax(logits_seq, axis=-1)
    logp_all = T.log_softmax(logits_seq, axis=-1)
    entropy = T.multiply(T.mean(T.tensor_sum(T.multiply(probs, logp_all), axis=1)), -1.0)

    loss = T.add(
        T.add(
            T.multiply(action_loss, cfg.action_loss_weight),
            T.multiply(value_loss, cfg.value_loss_weight),
        ),
        T.multiply(entropy, -cfg.entropy_coef),
    )
    info = {
        "action_loss": action_loss.item(),
        "value_loss": value_loss.item(),
        "entropy": entropy.item(),
        "approx_kl": float(np.mean(old_logp - new_logp.data)),
    }
    return loss, info


def _exp(x: T.Tensor) -> T.Tensor:
    data = np.exp(x.data)
    out = T.Tensor(data, x.requires_grad, (x,))

    def backward(grad):
        from ..tensor.engine import _accumulate

        _accumulate(x, grad * data)

    out.backward_fn = backward
    return out


def _clamp(x: T.Tensor, lo: float, hi: float) -> T.Tensor:
    data = np.clip(x.data, lo, hi)
    inside = (x.data > lo) & (x.data < hi)
    out = T.Tensor(data, x.requires_grad, (x,))

    def backward(grad):
        from ..tensor.engine import _accumulate

        _accumulate(x, grad * inside)

    out.backward_fn = backward
    return out


def _minimum(a: T.Tensor, b: T.Tensor) -> T.Tensor:
    take_a = a.data <= b.data
    out = T.Tensor(np.where(take_a, a.data, b.data), a.requires_grad or b.requires_grad, (a, b))

    def backward(grad):
        from ..tensor.engine import _accumulate

        _accumulate(a, grad * take_a)
        _accumulate(b, grad * ~take_a)

    out.backward_fn = backward
    return out
