"""Observation encoders and the recurrent actor-critic."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .. import tensor as T
from ..env import Observation
from ..errors import PolicyCorruptionError
from ..presets import Preset


@dataclass(frozen=True)
class PolicyConfig:
    depth_rays: int
    sep_channels: int  # sliced binaural estimate channels (2 * bands)
    mono_channels: int  # stacked monaural estimates (2 * bands)
    rows: int
    cols: int
    n_classes: int
    hidden: int = 64
    encoder_dim: int = 64
    n_actions: int = 3
    use_visual: bool = True
    audio_source: str = "separated"  # or "mixture" for navigation baselines

    @staticmethod
    def from_preset(preset: Preset, n_actions: int = 3, **overrides) -> "PolicyConfig":
        rows, cols = preset.sliced_shape
        cfg = PolicyConfig(
            depth_rays=preset.depth_rays,
            sep_channels=2 * preset.slice_bands,
            mono_channels=2 * preset.slice_bands,
            rows=rows,
            cols=cols,
            n_classes=preset.n_classes,
            hidden=preset.gru_hidden,
            encoder_dim=preset.encoder_dim,
            n_actions=n_actions,
        )
        return replace(cfg, **overrides) if overrides else cfg


class SpectroEncoder(T.Module):
    """Two stride-2 convolutions and a projection to the encoding width."""

    def __init__(self, in_ch: int, rows: int, cols: int, out_dim: int, rng):
        c1, c2 = max(8, in_ch), max(16, 2 * in_ch)
        self.conv1 = T.Conv2d(in_ch, c1, 4, rng, stride=2, pad=1)
        self.conv2 = T.Conv2d(c1, c2, 4, rng, stride=2, pad=1)
        flat = c2 * (rows // 4) * (cols // 4)
        self.proj = T.Dense(flat, out_dim, rng)
        self._flat = flat

    def __call__(self, x: T.Tensor) -> T.Tensor:
        h = T.relu(self.conv1(x))
        h = T.relu(self.conv2(h))
        h = T.reshape(h, (h.shape[0], self._flat))
        return T.relu(self.proj(h))


class DepthEncoder(T.Module):
    def __init__(self, rays: int, out_dim: int, rng):
        self.fc1 = T.Dense(rays, out_dim, rng)
        self.fc2 = T.Dense(out_dim, out_dim, rng)

    def __call__(self, x: T.Tensor) -> T.Tensor:
        return T.relu(self.fc2(T.relu(self.fc1(x))))


class ActorCritic(T.Module):
    """Per-modality encoders, a GRU over their concatenation, and linear
    actor/critic heads."""

    def __init__(self, cfg: PolicyConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng([seed, 77])
        dim = cfg.encoder_dim
        self.enc_audio = SpectroEncoder(cfg.sep_channels, cfg.rows, cfg.cols, dim, rng)
        self.enc_mono = SpectroEncoder(cfg.mono_channels, cfg.rows, cfg.cols, dim, rng)
        if cfg.use_visual:
            self.enc_depth = DepthEncoder(cfg.depth_rays, dim, rng)
        feat = dim * (3 if cfg.use_visual else 2) + cfg.n_classes
        self.gru = T.GRUCell(feat, cfg.hidden, rng)
        self.actor = T.Dense(cfg.hidden, cfg.n_actions, rng)
        self.critic = T.Dense(cfg.hidden, 1, rng)

    def initial_state(self, batch: int = 1) -> np.ndarray:
        return np.zeros((batch, self.cfg.hidden))

    def encode(self, obs_batch) -> T.Tensor:
        sep = T.Tensor(np.stack([o.separated for o in obs_batch]))
        mono = T.Tensor(np.stack([o.mono_pair for o in obs_batch]))
        label = T.Tensor(np.stack([o.label for o in obs_batch]))
        feats = [self.enc_audio(sep), self.enc_mono(mono)]
        if self.cfg.use_visual:
            depth = T.Tensor(np.stack([o.depth for o in obs_batch]))
            feats.append(self.enc_depth(depth))
        feats.append(label)
        return T.concat(feats, axis=1)

    def forward(self, obs_batch, h):
        """One recurrent step over a batch: (logits, value, h')."""
        h_t = h if isinstance(h, T.Tensor) else T.Tensor(h)
        encoded = self.encode(obs_batch)
        h_new = self.gru(encoded, h_t)
        return self.actor(h_new), self.critic(h_new), h_new


@dataclass
class ActResult:
    action: int
    log_prob: float
    value: float
    probs: np.ndarray
    hidden: np.ndarray


def act(
    policy: ActorCritic,
    obs: Observation,
    h: np.ndarray,
    rng: np.random.Generator | None = None,
    deterministic: bool = False,
) -> ActResult:
    """Sample (or argmax) an action from the actor distribution."""
    logits, value, h_new = policy.forward([obs], h)
    raw = logits.data[0]
    if not np.all(np.isfinite(raw)):
        raise PolicyCorruptionError(f"non-finite action logits: {raw}")
    shifted = raw - raw.max()
    probs = np.exp(shifted)
    probs /= probs.sum()
    if deterministic or rng is None:
        action = int(np.argmax(probs))
    else:
        action = int(rng.choice(probs.size, p=probs))
    return ActResult(
        action=action,
        log_prob=float(np.log(probs[action])),
        value=float(value.data[0, 0]),
        probs=probs,
        hidden=h_new.data,
    )
