"""Episode runner binding world, acoustics, and the separator.

The runner exposes two strictly separated faces: :class:`AgentView` carries
only agent-accessible signals (depth panorama, separator outputs, target
label), while ground truth stays behind :meth:`EpisodeRunner.truth` for
trainers and evaluators.  :class:`Observation` construction rejects any
ground-truth-typed value outright.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .acoustics import (
    GroundTruth,
    NoiseModel,
    RirCache,
    RirParams,
    ground_truth,
    add_mic_noise,
    mix_sources,
    render_source,
    synthesize_rir,
)
from .errors import InputError
from .presets import Preset
from .separator import MemoryState, Separator, l1_metric
from .signal import Waveform, log_compress, slice_bands, spectrogram_log_mag, stft, unslice_bands
from .world import (
    STOP,
    Episode,
    Pose,
    Scene,
    apply_action,
    default_sound_classes,
    geodesic_distance,
    render_depth_panorama,
    synthesize_clip,
)


@dataclass(frozen=True)
class AgentView:
    """Everything the agent may condition on at one step."""

    depth: np.ndarray  # (rays,) meters
    mixture: np.ndarray  # sliced log-mag of the heard mixture (2*bands, R, C)
    separated: np.ndarray  # sliced log-mag of the masked binaural (2*bands, R, C)
    mono: np.ndarray  # sliced current monaural estimate (bands, R, C)
    refined: np.ndarray  # sliced refined monaural estimate (bands, R, C)
    label: int
    collided: bool
    step: int

    def __post_init__(self):
        for name in ("depth", "mixture", "separated", "mono", "refined"):
            value = getattr(self, name)
            if isinstance(value, GroundTruth):
                raise InputError("ground truth leaked into the agent view")


@dataclass(frozen=True)
class Observation:
    """Policy input: agent-accessible signals only."""

    depth: np.ndarray
    separated: np.ndarray
    mono_pair: np.ndarray  # current and refined estimates stacked channel-wise
    label: np.ndarray  # one-hot

    @staticmethod
    def build(view: AgentView, n_classes: int, audio_source: str = "separated") -> "Observation":
        if isinstance(view, GroundTruth) or any(
            isinstance(getattr(view, f), GroundTruth)
            for f in ("depth", "mixture", "separated", "mono", "refined")
        ):
            raise InputError("observations must not be built from ground truth")
        onehot = np.zeros(n_classes)
        onehot[view.label] = 1.0
        audio = view.separated if audio_source == "separated" else view.mixture
        return Observation(
            depth=view.depth,
            separated=audio,
            mono_pair=np.concatenate([view.mono, view.refined], axis=0),
            label=onehot,
        )


@dataclass(frozen=True)
class StepTruth:
    """Trainer-side view of one step; never part of the observation path."""

    refined_loss: float  # L1 between refined estimate and latent target
    mono_loss: float
    pose: Pose
    geodesic_to_target: float


class EpisodeRunner:
    """Steps one episode: render -> separate -> refine -> (act)."""

    def __init__(
        self,
        scene: Scene,
        episode: Episode,
        separator: Separator,
        preset: Preset,
        episode_id: int = 0,
        noise: NoiseModel = NoiseModel(None),
        noise_seed: int = 0,
        rir_cache: RirCache | None = None,
        use_refiner: bool = True,
    ):
        self.scene = scene
        self.episode = episode
        self.separator = separator
        self.preset = preset
        self.episode_id = episode_id
        self.noise = noise
        self.noise_seed = noise_seed
        self.use_refiner = use_refiner
        self.rir_params = RirParams(
            rir_seconds=min(0.5, preset.clip_seconds), sample_rate=preset.sample_rate
        )
        self.rir_cache = rir_cache if rir_cache is not None else RirCache()
        classes = default_sound_classes()
        self.clips = [
            synthesize_clip(
                classes[s.class_id],
                s.clip_id,
                duration=preset.clip_seconds,
                sample_rate=preset.sample_rate,
                power=preset.clip_power,
            )
            for s in episode.sources
        ]
        target = episode.target
        self.target_clip = self.clips[episode.target_index]
        mono_complex = stft(self.target_clip, preset.stft)
        self.mono_gt = spectrogram_log_mag(mono_complex)
        self.mono_gt_sliced = slice_bands(self.mono_gt.values, preset.slice_bands)
        self.mono_gt_complex = mono_complex
        self._render_cache = {}
        self._target_dist = scene.distance_map(target.location)
        self.reset()

    # -- core loop ----------------------------------------------------------

    def reset(self) -> AgentView:
        self.pose = self.episode.start
        self.t = 1
        self.memory = MemoryState.initial(self.episode_id, self.separator.cfg)
        self._collided = False
        self._stopped = False
        self._view, self._truth = self._observe()
        return self._view

    def _render_at(self, pose: Pose) -> Waveform:
        key = (pose.node, pose.heading)
        if key not in self._render_cache:
            renders = []
            for spec, clip in zip(self.episode.sources, self.clips):
                rir = self.rir_cache.get_or_create(
                    (self.scene.seed, spec.location, pose.node, pose.heading),
                    lambda s=spec, p=pose: synthesize_rir(
                        self.scene, s.location, p, self.rir_params
                    ),
                )
                renders.append(render_source(clip, rir))
            self._render_cache[key] = mix_sources(renders)
        return self._render_cache[key]

    def _observe(self):
        mixture = self._render_at(self.pose)
        if self.noise.enabled:
            mixture = add_mic_noise(
                mixture, self.noise, seed=abs(hash((self.noise_seed, self.episode_id, self.t))) % 2**31
            )
        mix_logmag = log_compress(np.abs(stft(mixture, self.preset.stft).values))
        mix_sliced = slice_bands(mix_logmag, self.preset.slice_bands)
        label = self.episode.target.class_id
        _, separated = self.separator.separate_binaural(mix_sliced, label)
        mono = self.separator.predict_monaural(separated)
        self._refine_input_prev = self.memory.prev
        if self.use_refiner:
            refined, self.memory = self.separator.refine(mono, self.memory, self.episode_id)
        else:
            refined = mono
        depth = render_depth_panorama(
            self.scene,
            self.pose,
            rays=self.preset.depth_rays,
            fov=self.preset.depth_fov,
            max_range=self.preset.depth_max_range,
        )
        view = AgentView(
            depth=depth / self.preset.depth_max_range,
            mixture=mix_sliced,
            separated=separated,
            mono=mono,
            refined=refined,
            label=label,
            collided=self._collided,
            step=self.t,
        )
        truth = StepTruth(
            refined_loss=l1_metric(refined, self.mono_gt_sliced),
            mono_loss=l1_metric(mono, self.mono_gt_sliced),
            pose=self.pose,
            geodesic_to_target=float(
                self._target_dist.get(self.pose.node, np.inf)
            ),
        )
        return view, truth

    def step(self, action: str) -> AgentView:
        """Apply an action and advance one step; returns the new view."""
        if self.done:
            raise InputError("episode budget exhausted")
        if action == STOP:
            self._stopped = True
            self._collided = False
        elif action is not None:
            self.pose, self._collided = apply_action(self.scene, self.pose, action)
        else:
            self._collided = False  # stand in place
        self.t += 1
        self._view, self._truth = self._observe()
        return self._view

    # -- accessors ------------------------------------------------------------

    @property
    def done(self) -> bool:
        return self._stopped or self.t >= self.episode.budget

    @property
    def stopped(self) -> bool:
        return self._stopped

    @property
    def refine_input_prev(self) -> np.ndarray:
        """The memory grid the current step's refine consumed (trainer side)."""
        return self._refine_input_prev

    @property
    def view(self) -> AgentView:
        return self._view

    def truth(self) -> StepTruth:
        """Trainer/evaluator access; never routed into observations."""
        return self._truth

    def refined_full_grid(self) -> np.ndarray:
        """Current refined estimate as an unsliced log-magnitude grid."""
        src = self._view.refined
        return unslice_bands(src, self.preset.slice_bands)

    def ground_truth_at_pose(self) -> GroundTruth:
        """Full per-pose supervision (used by dataset collection, not rewards)."""
        target = self.episode.target
        return ground_truth(
            self.scene,
            self.target_clip,
            target.location,
            self.pose,
            self.preset.stft,
            self.rir_params,
        )
