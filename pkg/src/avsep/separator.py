"""Three-stage target separator: binaural ratio masking, monaural
prediction, and the acoustic memory refiner, plus losses and pretraining.

All networks operate on band-sliced log-magnitude grids.  Masking happens in
the log-compressed domain (the networks' input domain); the raw-magnitude
alternative would only change where the compression is applied.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .acoustics import RirParams, ground_truth, mix_sources, render_source, synthesize_rir
from .errors import ConfigError, InputError
from .presets import Preset
from .signal import Waveform, save_grid, load_grid, slice_bands
from .world import (
    EpisodeConstraints,
    Pose,
    Scene,
    default_sound_classes,
    sample_episode,
    synthesize_clip,
)


@dataclass(frozen=True)
class SeparatorConfig:
    bands: int
    band_rows: int
    frames: int
    n_classes: int = 12
    unet_channels: tuple = (16, 32, 64)
    refiner_hidden: int = 16

    @property
    def mix_channels(self) -> int:
        return 2 * self.bands

    @property
    def mono_channels(self) -> int:
        return self.bands

    @staticmethod
    def from_preset(preset: Preset) -> "SeparatorConfig":
        rows, cols = preset.sliced_shape
        return SeparatorConfig(
            bands=preset.slice_bands,
            band_rows=rows,
            frames=cols,
            n_classes=preset.n_classes,
            unet_channels=preset.unet_channels,
            refiner_hidden=preset.refiner_hidden,
        )


def encode_label(class_id: int, n_classes: int, rows: int, cols: int) -> np.ndarray:
    """One-hot constant planes, concatenated channel-wise after slicing."""
    if not 0 <= class_id < n_classes:
        raise InputError(f"unknown sound class {class_id} (have {n_classes})")
    planes = np.zeros((n_classes, rows, cols))
    planes[class_id] = 1.0
    return planes


class UNet(T.Module):
    """Encoder-decoder with skip connections: kernel-4/stride-2 convs,
    batch norm, leaky ReLU down and ReLU up, final 1x1 convolution."""

    def __init__(self, in_ch: int, out_ch: int, channels, rng, final_relu: bool = True):
        self.final_relu = final_relu
        self.enc = []
        self.enc_bn = []
        prev = in_ch
        for ch in channels:
            self.enc.append(T.Conv2d(prev, ch, 4, rng, stride=2, pad=1))
            self.enc_bn.append(T.BatchNorm(ch))
            prev = ch
        self.dec = []
        self.dec_bn = []
        rev = list(channels)
        for i in range(len(rev) - 1, -1, -1):
            target = rev[i - 1] if i > 0 else rev[0]
            self.dec.append(T.ConvTranspose2d(prev, target, 4, rng, stride=2, pad=1))
            self.dec_bn.append(T.BatchNorm(target))
            # next input concatenates the encoder activation at this scale
            prev = target + (rev[i - 1] if i > 0 else 0)
        self.final = T.Conv2d(rev[0], out_ch, 1, rng, stride=1, pad=0)

    def __call__(self, x: T.Tensor, training: bool = False) -> T.Tensor:
        skips = []
        h = x
        for conv, bn in zip(self.enc, self.enc_bn):
            h = T.leaky_relu(bn(conv(h), training), 0.2)
            skips.append(h)
        n = len(self.dec)
        for i, (deconv, bn) in enumerate(zip(self.dec, self.dec_bn)):
            h = T.relu(bn(deconv(h), training))
            skip_idx = n - 2 - i
            if skip_idx >= 0:
                h = T.concat([h, skips[skip_idx]], axis=1)
        h = self.final(h)
        return T.relu(h) if self.final_relu else h


class RefinerNet(T.Module):
    """Two 3x3 stride-1 convolutions; batch norm and ReLU after the first.

    The output convolution starts at low gain so the estimate-to-estimate
    recurrence cannot blow up before the refiner has been fit.
    """

    def __init__(self, in_ch: int, hidden: int, out_ch: int, rng):
        self.conv1 = T.Conv2d(in_ch, hidden, 3, rng, stride=1, pad=1)
        self.bn = T.BatchNorm(hidden)
        self.conv2 = T.Conv2d(hidden, out_ch, 3, rng, stride=1, pad=1)
        self.conv2.weight.data *= 0.1

    def __call__(self, x: T.Tensor, training: bool = False) -> T.Tensor:
        return self.conv2(T.relu(self.bn(self.conv1(x), training)))


def make_refiner(cfg: SeparatorConfig, seed: int) -> RefinerNet:
    rng = np.random.default_rng([seed, 505])
    return RefinerNet(2 * cfg.mono_channels, cfg.refiner_hidden, cfg.mono_channels, rng)


@dataclass
class MemoryState:
    """Carries the refiner's previous output across an episode."""

    episode_id: int
    step: int
    prev: np.ndarray  # (bands, rows, cols), all-zero at episode start

    @staticmethod
    def initial(episode_id: int, cfg: SeparatorConfig) -> "MemoryState":
        return MemoryState(
            episode_id, 0, np.zeros((cfg.mono_channels, cfg.band_rows, cfg.frames))
        )


class Separator:
    """f_mask -> f_mono -> f_refine pipeline with named parameter groups."""

    def __init__(self, cfg: SeparatorConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng([seed, 101])
        self.f_mask = UNet(
            cfg.mix_channels + cfg.n_classes,
            cfg.mix_channels,
            cfg.unet_channels,
            rng,
            final_relu=True,
        )
        # warm start at the identity mask so training descends from the
        # pass-through solution instead of a random attenuation pattern
        self.f_mask.final.bias.data[...] = 1.0
        self.f_mono = UNet(
            cfg.mix_channels, cfg.mono_channels, cfg.unet_channels, rng, final_relu=True
        )
        self.f_refine = RefinerNet(
            2 * cfg.mono_channels, cfg.refiner_hidden, cfg.mono_channels, rng
        )
        self.front_frozen = False

    # -- batched forward passes (training) ---------------------------------

    def mask_batch(self, mix_sliced: np.ndarray, class_ids, training: bool = False):
        """Returns (mask, masked mixture) tensors for a (B, 2*bands, R, C) batch."""
        b = mix_sliced.shape[0]
        expected = (self.cfg.mix_channels, self.cfg.band_rows, self.cfg.frames)
        if mix_sliced.shape[1:] != expected:
            raise InputError(
                f"sliced mixture shape {mix_sliced.shape[1:]} != expected {expected}"
            )
        labels = np.stack(
            [
                encode_label(int(c), self.cfg.n_classes, self.cfg.band_rows, self.cfg.frames)
                for c in class_ids
            ]
        )
        net_in = T.Tensor(np.concatenate([mix_sliced, labels], axis=1))
        mask = self.f_mask(net_in, training)
        separated = T.multiply(mask, T.Tensor(mix_sliced))
        return mask, separated

    def mono_batch(self, sep_sliced, training: bool = False):
        x = sep_sliced if isinstance(sep_sliced, T.Tensor) else T.Tensor(sep_sliced)
        return self.f_mono(x, training)

    def refine_batch(self, mono_and_prev, training: bool = False):
        x = mono_and_prev if isinstance(mono_and_prev, T.Tensor) else T.Tensor(mono_and_prev)
        return self.f_refine(x, training)

    # -- per-step inference -------------------------------------------------

    def separate_binaural(self, mix_sliced: np.ndarray, class_id: int):
        mask, separated = self.mask_batch(mix_sliced[None], [class_id], training=False)
        return mask.data[0], separated.data[0]

    def predict_monaural(self, sep_sliced: np.ndarray) -> np.ndarray:
        expected = (self.cfg.mix_channels, self.cfg.band_rows, self.cfg.frames)
        if sep_sliced.shape != expected:
            raise InputError(f"separated shape {sep_sliced.shape} != expected {expected}")
        return self.mono_batch(sep_sliced[None], training=False).data[0]

    def refine(self, mono_sliced: np.ndarray, state: MemoryState, episode_id: int):
        if state.episode_id != episode_id:
            raise InputError(
                f"stale memory state: episode {state.episode_id} != {episode_id}"
            )
        stacked = np.concatenate([mono_sliced, state.prev], axis=0)
        refined = self.refine_batch(stacked[None], training=False).data[0]
        return refined, MemoryState(episode_id, state.step + 1, refined)

    def clone_with_refiner(self, refiner: "RefinerNet") -> "Separator":
        """Share the frozen front nets but swap in a model-specific refiner."""
        clone = object.__new__(Separator)
        clone.cfg = self.cfg
        clone.f_mask = self.f_mask
        clone.f_mono = self.f_mono
        clone.f_refine = refiner
        clone.front_frozen = self.front_frozen
        return clone

    # -- checkpointing -------------------------------------------------------

    def state_arrays(self) -> dict:
        out = {}
        for prefix, module in (
            ("f_mask", self.f_mask),
            ("f_mono", self.f_mono),
            ("f_refine", self.f_refine),
        ):
            for k, v in module.named_parameters(prefix).items():
                out[k] = v.data
            out.update(module._buffers(prefix))
        return out

    def load_state(self, arrays: dict) -> None:
        self.f_mask.load_state(arrays, "f_mask")
        self.f_mono.load_state(arrays, "f_mono")
        self.f_refine.load_state(arrays, "f_refine")


# ---------------------------------------------------------------------------
# losses


def l1_metric(pred: np.ndarray, gt: np.ndarray) -> float:
    if pred.shape != gt.shape:
        raise InputError(f"loss shape mismatch: {pred.shape} vs {gt.shape}")
    return float(np.mean(np.abs(pred - gt)))


loss_binaural = l1_metric
loss_monaural = l1_metric
loss_refiner = l1_metric


# ---------------------------------------------------------------------------
# pretraining dataset


@dataclass
class PretrainDataset:
    mix: np.ndarray  # (n, 2, F, N) log-magnitude
    labels: np.ndarray  # (n,) target class ids
    binaural_gt: np.ndarray  # (n, 2, F, N)
    mono_gt: np.ndarray  # (n, 1, F, N)
    skipped: int = 0
    # (scene seed, agent node, source locations) per sample, for audits
    placements: list = field(default_factory=list)

    def __len__(self):
        return self.mix.shape[0]

    def sliced(self, bands: int):
        n = len(self)
        mix = np.stack([slice_bands(self.mix[i], bands) for i in range(n)])
        b_gt = np.stack([slice_bands(self.binaural_gt[i], bands) for i in range(n)])
        m_gt = np.stack([slice_bands(self.mono_gt[i], bands) for i in range(n)])
        return mix, self.labels, b_gt, m_gt

    def save(self, directory) -> None:
        os.makedirs(directory, exist_ok=True)
        for name in ("mix", "binaural_gt", "mono_gt"):
            save_grid(os.path.join(directory, f"{name}.f32"), getattr(self, name))
        manifest = {
            "n": len(self),
            "labels": self.labels.tolist(),
            "skipped": self.skipped,
            "placements": self.placements,
        }
        with open(os.path.join(directory, "manifest.json"), "w") as fh:
            json.dump(manifest, fh)

    @staticmethod
    def load(directory) -> "PretrainDataset":
        with open(os.path.join(directory, "manifest.json")) as fh:
            manifest = json.load(fh)
        return PretrainDataset(
            mix=load_grid(os.path.join(directory, "mix.f32")),
            binaural_gt=load_grid(os.path.join(directory, "binaural_gt.f32")),
            mono_gt=load_grid(os.path.join(directory, "mono_gt.f32")),
            labels=np.asarray(manifest["labels"], dtype=np.int64),
            skipped=manifest["skipped"],
            placements=[tuple(p) for p in manifest.get("placements", [])],
        )


def collect_pretrain_dataset(
    scenes,
    per_scene: int,
    preset: Preset,
    seed: int = 0,
    clip_pool: dict | None = None,
    split: str = "train",
    rir_params: RirParams | None = None,
) -> PretrainDataset:
    """Random agent/source placements with ground truth recorded at the agent.

    Infeasible placements are skipped and counted rather than retried forever.
    """
    if not scenes:
        raise ConfigError("need at least one training scene")
    rir_params = rir_params or RirParams(rir_seconds=min(0.5, preset.clip_seconds))
    classes = default_sound_classes()
    constraints = EpisodeConstraints(
        k=preset.k_sources,
        min_source_dist=preset.min_source_dist,
        far_start_range=preset.far_start_range,
    )
    from .signal import log_compress, stft  # local import to avoid cycle noise

    mixes, labels, b_gts, m_gts = [], [], [], []
    placements = []
    skipped = 0
    for scene_idx, scene in enumerate(scenes):
        for i in range(per_scene):
            try:
                episode = sample_episode(
                    scene,
                    "near",
                    constraints,
                    seed=int(np.random.default_rng([seed, scene_idx, i]).integers(2**31)),
                    classes=classes,
                    clip_pool=clip_pool,
                    split=split,
                    max_tries=50,
                )
            except Exception:
                skipped += 1
                continue
            rng = np.random.default_rng([seed, scene_idx, i, 7])
            pose = Pose(
                scene.nodes[rng.integers(len(scene.nodes))],
                (0, 90, 180, 270)[rng.integers(4)],
            )
            renders = []
            target_gt = None
            for j, src in enumerate(episode.sources):
                clip = synthesize_clip(
                    classes[src.class_id], src.clip_id,
                    duration=preset.clip_seconds, sample_rate=preset.sample_rate,
                    power=preset.clip_power,
                )
                rir = synthesize_rir(scene, src.location, pose, rir_params)
                renders.append(render_source(clip, rir))
                if j == episode.target_index:
                    target_gt = ground_truth(
                        scene, clip, src.location, pose, preset.stft, rir_params, rir=rir
                    )
            mixture = mix_sources(renders)
            mix_spec = log_compress(np.abs(stft(mixture, preset.stft).values))
            mixes.append(mix_spec.astype(np.float32))
            labels.append(episode.target.class_id)
            b_gts.append(target_gt.binaural_logmag.values.astype(np.float32))
            m_gts.append(target_gt.mono_logmag.values.astype(np.float32))
            placements.append(
                (scene.seed, tuple(pose.node), [tuple(s.location) for s in episode.sources])
            )
    return PretrainDataset(
        mix=np.asarray(mixes, dtype=np.float64),
        labels=np.asarray(labels, dtype=np.int64),
        binaural_gt=np.asarray(b_gts, dtype=np.float64),
        mono_gt=np.asarray(m_gts, dtype=np.float64),
        skipped=skipped,
        placements=placements,
    )


def identity_mask_loss(mix_sliced: np.ndarray, b_gt_sliced: np.ndarray) -> float:
    """Baseline that leaves the mixture untouched (mask of all ones)."""
    return l1_metric(mix_sliced, b_gt_sliced)


def copy_channel_loss(sep_sliced: np.ndarray, m_gt_sliced: np.ndarray) -> float:
    """Baseline that reads the left channel off as the monaural estimate."""
    bands = m_gt_sliced.shape[1] if m_gt_sliced.ndim == 4 else m_gt_sliced.shape[0]
    left = sep_sliced[:, :bands] if sep_sliced.ndim == 4 else sep_sliced[:bands]
    return l1_metric(left, m_gt_sliced)


# ---------------------------------------------------------------------------
# pretraining


@dataclass
class PretrainResult:
    mask_history: list
    mono_history: list
    mask_val: float
    mono_val: float
    identity_val: float
    copy_val: float


def _iterate_batches(n, batch_size, rng):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def pretrain(
    separator: Separator,
    dataset: PretrainDataset,
    lr: float = 5e-4,
    epochs: int = 6,
    batch_size: int = 16,
    seed: int = 0,
    val_fraction: float = 0.15,
) -> PretrainResult:
    """Train the mask net, freeze it, then train the monaural net on its
    outputs.  Aborts to the last good checkpoint if a loss goes non-finite."""
    if len(dataset) == 0:
        raise ConfigError("pretraining dataset is empty")
    cfg = separator.cfg
    mix, labels, b_gt, m_gt = dataset.sliced(cfg.bands)
    n_val = max(1, int(len(dataset) * val_fraction))
    order = np.random.default_rng([seed, 3]).permutation(len(dataset))
    val_idx, train_idx = order[:n_val], order[n_val:]

    def run_phase(params, forward_loss, history):
        state = T.AdamState(lr=lr)
        good = {k: v.data.copy() for k, v in params.items()}
        rng = np.random.default_rng([seed, 11])
        for epoch in range(epochs):
            epoch_losses = []
            for batch in _iterate_batches(len(train_idx), batch_size, rng):
                idx = train_idx[batch]
                T.zero_grads(params)
                loss = forward_loss(idx, training=True)
                if not math.isfinite(loss.item()):
                    for k, v in params.items():
                        v.data = good[k]
                    return False
                T.backward(loss)
                T.adam_step(params, state)
                epoch_losses.append(loss.item())
            history.append(float(np.mean(epoch_losses)))
            good = {k: v.data.copy() for k, v in params.items()}
        return True

    # phase 1: ratio mask net
    mask_params = separator.f_mask.named_parameters("f_mask")

    def mask_loss(idx, training):
        _, separated = separator.mask_batch(mix[idx], labels[idx], training=training)
        return T.l1_loss(separated, T.Tensor(b_gt[idx]))

    mask_history = []
    run_phase(mask_params, mask_loss, mask_history)

    # frozen mask outputs feed the monaural net
    sep_out = np.concatenate(
        [
            separator.mask_batch(mix[i : i + 64], labels[i : i + 64])[1].data
            for i in range(0, len(dataset), 64)
        ]
    )

    mono_params = separator.f_mono.named_parameters("f_mono")

    def mono_loss(idx, training):
        pred = separator.mono_batch(sep_out[idx], training=training)
        return T.l1_loss(pred, T.Tensor(m_gt[idx]))

    mono_history = []
    run_phase(mono_params, mono_loss, mono_history)
    separator.front_frozen = True

    mask_val = l1_metric(
        separator.mask_batch(mix[val_idx], labels[val_idx])[1].data, b_gt[val_idx]
    )
    mono_val = l1_metric(
        separator.mono_batch(sep_out[val_idx]).data, m_gt[val_idx]
    )
    return PretrainResult(
        mask_history=mask_history,
        mono_history=mono_history,
        mask_val=mask_val,
        mono_val=mono_val,
        identity_val=identity_mask_loss(mix[val_idx], b_gt[val_idx]),
        copy_val=copy_channel_loss(sep_out[val_idx], m_gt[val_idx]),
    )
