"""Synthetic binaural room impulse responses and mixture rendering.

The RIR model is a hybrid: per-ear direct path (1/d amplitude, wall
transmission per occluding interior wall), first-order image sources off the
room boundary with an absorption factor, and an exponentially decaying
diffuse tail whose RT60 follows Sabine's formula on the room volume.

All per-ear geometry is computed in agent-relative coordinates, where source
offsets are exact integers; mirroring a scene about the agent's heading axis
therefore swaps the two channels bit-exactly.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve

from .errors import InputError
from .signal import (
    ComplexSpectrogram,
    LogMagSpectrogram,
    StftConfig,
    Waveform,
    log_compress,
    spectrogram_log_mag,
    stft,
)
from .world import Pose, Scene, segment_crossings

_DIRS = {0: (1, 0), 90: (0, 1), 180: (-1, 0), 270: (0, -1)}


@dataclass(frozen=True)
class RirParams:
    wall_transmission: float = 0.3  # per occluding interior wall
    boundary_absorption: float = 0.5
    speed_of_sound: float = 343.0
    head_width: float = 0.18
    min_distance: float = 0.1
    rir_seconds: float = 0.5
    sample_rate: int = 16000
    reflections: bool = True
    tail: bool = True
    tail_level: float = 0.3
    ceiling_height: float = 3.0


@dataclass(frozen=True)
class Rir:
    left: np.ndarray
    right: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        if self.left.shape != self.right.shape:
            raise InputError("RIR channels must have equal length")
        if not (np.all(np.isfinite(self.left)) and np.all(np.isfinite(self.right))):
            raise InputError("RIR contains non-finite samples")

    @property
    def n_samples(self) -> int:
        return self.left.shape[0]


@dataclass(frozen=True)
class NoiseModel:
    """Additive white Gaussian microphone noise at a target SNR."""

    snr_db: float | None = None  # None disables the model

    @property
    def enabled(self) -> bool:
        return self.snr_db is not None and math.isfinite(self.snr_db)


def sabine_rt60(scene: Scene, params: RirParams) -> float:
    """RT60 = 0.161 V / (a S) on the room volume under a flat ceiling."""
    area = scene.width * scene.height
    perimeter = 2 * (scene.width + scene.height)
    volume = area * params.ceiling_height
    surface = 2 * area + perimeter * params.ceiling_height
    return 0.161 * volume / (params.boundary_absorption * surface)


# ---------------------------------------------------------------------------
# path enumeration and binauralization


@dataclass(frozen=True)
class PropagationPath:
    """A virtual source position (absolute) and its reflection gain."""

    position: tuple
    gain: float


def enumerate_paths(scene: Scene, src, params: RirParams) -> list:
    """Direct path plus first-order boundary images with valid bounce points."""
    sx, sy = src
    if not (0 <= sx <= scene.width and 0 <= sy <= scene.height):
        raise InputError(f"source {src} outside scene bounds")
    paths = [PropagationPath((sx, sy), 1.0)]
    if not params.reflections:
        return paths
    reflect_gain = 1.0 - params.boundary_absorption
    images = [
        ("v", 0.0, (-sx, sy)),
        ("v", float(scene.width), (2 * scene.width - sx, sy)),
        ("h", 0.0, (sx, -sy)),
        ("h", float(scene.height), (sx, 2 * scene.height - sy)),
    ]
    for orientation, pos, image in images:
        paths.append(PropagationPath(image, reflect_gain, ))
    return paths


def _ear_offsets(pose: Pose, head_width: float):
    dx, dy = _DIRS[pose.heading]
    perp = (-dy, dx)  # left of heading, exact integers
    half = head_width / 2.0
    left = (half * perp[0], half * perp[1])
    right = (-half * perp[0], -half * perp[1])
    return perp, left, right


def _head_shadow(rel, perp_sign, perp) -> float:
    """1 - 0.4 * max(0, -cos angle-to-ear-axis); far ear gets attenuated."""
    norm = math.hypot(rel[0], rel[1])
    if norm == 0.0:
        return 1.0
    cos_axis = perp_sign * (rel[0] * perp[0] + rel[1] * perp[1]) / norm
    return 1.0 - 0.4 * max(0.0, -cos_axis)


def _add_tap(buf: np.ndarray, delay_samples: float, amplitude: float) -> None:
    i0 = int(math.floor(delay_samples))
    frac = delay_samples - i0
    if i0 + 1 < buf.shape[0]:
        buf[i0] += amplitude * (1.0 - frac)
        buf[i0 + 1] += amplitude * frac
    elif i0 < buf.shape[0]:
        buf[i0] += amplitude


def binauralize(
    paths,
    scene: Scene,
    pose: Pose,
    params: RirParams = RirParams(),
    n_samples: int | None = None,
) -> Rir:
    """Two virtual microphones ``head_width`` apart, perpendicular to the
    heading, with fractional per-ear delays and a frequency-flat head shadow."""
    fs = params.sample_rate
    n = n_samples or int(round(params.rir_seconds * fs))
    px, py = pose.node
    perp, left_off, right_off = _ear_offsets(pose, params.head_width)
    left = np.zeros(n)
    right = np.zeros(n)
    for path in paths:
        rel = (path.position[0] - px, path.position[1] - py)
        for buf, off, sign in ((left, left_off, 1.0), (right, right_off, -1.0)):
            d = math.hypot(rel[0] - off[0], rel[1] - off[1])
            ear_abs = (px + off[0], py + off[1])
            crossings = segment_crossings(scene, path.position, ear_abs)
            amp = (
                path.gain
                / max(d, params.min_distance)
                * params.wall_transmission**crossings
                * _head_shadow(rel, sign, perp)
            )
            _add_tap(buf, d / params.speed_of_sound * fs, amp)
    return Rir(left, right, fs)


def _tail_seed(distance: float, rt60: float) -> list:
    return [int(round(distance * 1e9)) & 0x7FFFFFFF, int(round(rt60 * 1e9)) & 0x7FFFFFFF]


def synthesize_rir(
    scene: Scene,
    src,
    pose: Pose,
    params: RirParams = RirParams(),
    n_samples: int | None = None,
) -> Rir:
    """Deterministic binaural RIR for a source location heard at a pose."""
    paths = enumerate_paths(scene, src, params)
    rir = binauralize(paths, scene, pose, params, n_samples)
    if not params.tail:
        return rir
    fs = params.sample_rate
    n = rir.n_samples
    rt60 = sabine_rt60(scene, params)
    decay = 3.0 * math.log(10.0) / rt60  # 60 dB energy drop over rt60
    px, py = pose.node
    _, left_off, right_off = _ear_offsets(pose, params.head_width)
    sx, sy = src
    channels = []
    for base, off in ((rir.left, left_off), (rir.right, right_off)):
        rel = (sx - px, sy - py)
        d = math.hypot(rel[0] - off[0], rel[1] - off[1])
        direct_amp = 1.0 / max(d, params.min_distance)
        start = int(math.floor(d / params.speed_of_sound * fs)) + 1
        t = np.arange(n - start) / fs
        rng = np.random.default_rng(_tail_seed(d, rt60))
        tail = (
            params.tail_level
            * direct_amp
            * np.exp(-decay * t)
            * rng.standard_normal(n - start)
        )
        channel = base.copy()
        channel[start:] += tail
        channels.append(channel)
    return Rir(channels[0], channels[1], fs)


# ---------------------------------------------------------------------------
# rendering


def render_source(clip: Waveform, rir: Rir) -> Waveform:
    """Per-channel FFT convolution, truncated to the clip length."""
    if clip.channels != 1:
        raise InputError("render_source expects a monaural clip")
    if clip.sample_rate != rir.sample_rate:
        raise InputError(
            f"sample-rate mismatch: clip {clip.sample_rate}, rir {rir.sample_rate}"
        )
    x = clip.samples[0]
    left = fftconvolve(x, rir.left)[: clip.n_samples]
    right = fftconvolve(x, rir.right)[: clip.n_samples]
    return Waveform(np.stack([left, right]), clip.sample_rate)


def mix_sources(renders, k: int | None = None) -> Waveform:
    """Uniform average of equal-length binaural renders."""
    renders = list(renders)
    if not renders:
        raise InputError("cannot mix an empty list of renders")
    if k is not None and k != len(renders):
        raise InputError(f"expected {k} renders, got {len(renders)}")
    n = renders[0].n_samples
    rate = renders[0].sample_rate
    for r in renders:
        if r.n_samples != n or r.sample_rate != rate:
            raise InputError("renders must share length and sample rate")
    stacked = np.stack([r.samples for r in renders])
    return Waveform(stacked.mean(axis=0), rate)


def add_mic_noise(w: Waveform, model: NoiseModel, seed: int) -> Waveform:
    """Gaussian noise scaled to the exact target SNR; deterministic in seed."""
    if not model.enabled:
        return w
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(w.samples.shape)
    p_signal = float(np.mean(w.samples**2))
    p_target = p_signal / (10.0 ** (model.snr_db / 10.0))
    noise *= math.sqrt(p_target / float(np.mean(noise**2)))
    return Waveform(w.samples + noise, w.sample_rate)


# ---------------------------------------------------------------------------
# ground truth (trainer/evaluator side only)


@dataclass(frozen=True)
class GroundTruth:
    """Supervision targets; must never reach the agent's observation path."""

    binaural_logmag: LogMagSpectrogram  # target rendered alone at the pose
    mono_logmag: LogMagSpectrogram  # the latent clip, pose-independent
    mono_complex: ComplexSpectrogram  # carries the reference phase


def ground_truth(
    scene: Scene,
    clip: Waveform,
    location,
    pose: Pose,
    cfg: StftConfig,
    params: RirParams = RirParams(),
    rir: Rir | None = None,
) -> GroundTruth:
    if rir is None:
        rir = synthesize_rir(scene, location, pose, params)
    rendered = render_source(clip, rir)
    b_spec = spectrogram_log_mag(stft(rendered, cfg))
    m_complex = stft(clip, cfg)
    m_spec = spectrogram_log_mag(m_complex)
    return GroundTruth(b_spec, m_spec, m_complex)


# ---------------------------------------------------------------------------
# RIR cache


class RirCache:
    """Thread-safe map from (source node, pose) to synthesized RIRs.

    Behaves as a single logical map: concurrent readers see consistent
    values and concurrent inserts are last-write-wins.  Bounded FIFO.
    """

    def __init__(self, max_entries: int = 4096):
        self._data = {}
        self._order = []
        self._lock = threading.Lock()
        self.max_entries = max_entries
        self.hits = 0
        self.misses = 0

    def get_or_create(self, key, factory):
        with self._lock:
            if key in self._data:
                self.hits += 1
                return self._data[key]
        value = factory()
        with self._lock:
            self.misses += 1
            if key not in self._data:
                self._order.append(key)
            self._data[key] = value
            while len(self._order) > self.max_entries:
                evicted = self._order.pop(0)
                self._data.pop(evicted, None)
        return value
