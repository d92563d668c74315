"""Waveforms, spectrograms, STFT analysis/synthesis, and separation metrics.

Audio is stored channels-first: waveform samples are ``(C, n)`` and
spectrogram grids are ``(C, F, N)`` (channels, frequency bins, time frames).
All math runs in float64; disk formats are 32-bit little-endian.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np
from scipy.io import wavfile

from .errors import ConfigError, DegenerateInputError, InputError


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class StftConfig:
    """Analysis/synthesis parameters.

    The default realizes the 63.9 ms Hann window / 32 ms hop / 1023-point
    transform at 16 kHz, which maps a 1 s clip onto a 512 x 32 grid.  Signals
    are center-padded by ``fft_size // 2`` on both ends before framing.
    """

    fft_size: int = 1023
    win_length: int = 1022
    hop: int = 512
    sample_rate: int = 16000

    def __post_init__(self):
        if self.win_length > self.fft_size:
            raise ConfigError(
                f"window length {self.win_length} exceeds fft size {self.fft_size}"
            )
        if self.hop <= 0 or self.win_length <= 0:
            raise ConfigError("hop and window length must be positive")
        if self.hop > self.win_length // 2 + 1:
            # overlap-add weights must stay nonzero across the signal span
            raise ConfigError(
                f"hop {self.hop} too large for window {self.win_length}: "
                "reconstruction would leave uncovered samples"
            )

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    def n_frames(self, n_samples: int) -> int:
        padded = n_samples + 2 * (self.fft_size // 2)
        return 1 + (padded - self.fft_size) // self.hop


#: 512 x 32 grids for 1 s clips at 16 kHz.
PAPER_STFT = StftConfig(fft_size=1023, win_length=1022, hop=512, sample_rate=16000)
#: 128 x 32 grids for 0.25 s chunks at 16 kHz (same hop/window ratio).
DESK_STFT = StftConfig(fft_size=255, win_length=254, hop=128, sample_rate=16000)


# ---------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class Waveform:
    """Fixed-rate sampled audio, mono ``(1, n)`` or binaural ``(2, n)``."""

    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim == 1:
            s = s[None, :]
        if s.ndim != 2 or s.shape[0] not in (1, 2):
            raise InputError(f"waveform must be (1, n) or (2, n), got {s.shape}")
        if not np.all(np.isfinite(s)):
            raise InputError("waveform contains non-finite samples")
        object.__setattr__(self, "samples", s)

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.n_samples / self.sample_rate

    def mono_samples(self) -> np.ndarray:
        if self.channels != 1:
            raise InputError("expected a monaural waveform")
        return self.samples[0]


@dataclass(frozen=True)
class ComplexSpectrogram:
    values: np.ndarray  # (C, F, N) complex
    cfg: StftConfig
    n_samples: int

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class LogMagSpectrogram:
    """``ln(1 + |z|)`` magnitude grid; non-negative everywhere."""

    values: np.ndarray  # (C, F, N) real >= 0
    cfg: StftConfig
    n_samples: int

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class SlicedSpectrogram:
    """Frequency axis cut into contiguous bands stacked channel-wise.

    A ``(C, F, N)`` grid becomes ``(C * bands, F / bands, N)``; band ``b`` of
    channel ``c`` lands on output channel ``c * bands + b``.  Lossless.
    """

    values: np.ndarray
    bands: int
    source_channels: int
    cfg: StftConfig
    n_samples: int

    @property
    def shape(self):
        return self.values.shape


# ---------------------------------------------------------------------------
# STFT analysis / synthesis


def _analysis_window(cfg: StftConfig) -> np.ndarray:
    # periodic Hann, zero-padded symmetrically to fft_size
    n = np.arange(cfg.win_length)
    w = 0.5 - 0.5 * np.cos(2.0 * np.pi * n / cfg.win_length)
    pad = cfg.fft_size - cfg.win_length
    return np.pad(w, (pad // 2, pad - pad // 2))


def stft(w: Waveform, cfg: StftConfig = PAPER_STFT) -> ComplexSpectrogram:
    """Short-time Fourier transform of every channel."""
    if w.sample_rate != cfg.sample_rate:
        raise ConfigError(
            f"waveform rate {w.sample_rate} != stft rate {cfg.sample_rate}"
        )
    if w.n_samples < cfg.win_length:
        raise InputError(
            f"waveform of {w.n_samples} samples shorter than one window"
        )
    if not np.all(np.isfinite(w.samples)):
        raise InputError("waveform contains non-finite samples")
    win = _analysis_window(cfg)
    half = cfg.fft_size // 2
    n_frames = cfg.n_frames(w.n_samples)
    out = np.empty((w.channels, cfg.n_bins, n_frames), dtype=np.complex128)
    for c in range(w.channels):
        x = np.pad(w.samples[c], (half, half))
        idx = np.arange(cfg.fft_size)[None, :] + cfg.hop * np.arange(n_frames)[:, None]
        frames = x[idx] * win
        out[c] = np.fft.rfft(frames, n=cfg.fft_size, axis=1).T
    return ComplexSpectrogram(out, cfg, w.n_samples)


def istft(s: ComplexSpectrogram, cfg: StftConfig | None = None) -> Waveform:
    """Inverse STFT via weighted overlap-add; exact up to rounding."""
    if cfg is not None and cfg != s.cfg:
        raise ConfigError(f"analysis config {s.cfg} does not match {cfg}")
    cfg = s.cfg
    win = _analysis_window(cfg)
    half = cfg.fft_size // 2
    n_frames = s.values.shape[2]
    total = cfg.hop * (n_frames - 1) + cfg.fft_size
    out = np.zeros((s.channels, s.n_samples))
    wss = np.zeros(total)
    for t in range(n_frames):
        pos = t * cfg.hop
        wss[pos : pos + cfg.fft_size] += win * win
    for c in range(s.channels):
        buf = np.zeros(total)
        frames = np.fft.irfft(s.values[c].T, n=cfg.fft_size, axis=1) * win
        for t in range(n_frames):
            pos = t * cfg.hop
            buf[pos : pos + cfg.fft_size] += frames[t]
        span = slice(half, half + s.n_samples)
        denom = np.where(wss[span] > 1e-10, wss[span], 1.0)
        out[c] = buf[span] / denom
    return Waveform(out, cfg.sample_rate)


# ---------------------------------------------------------------------------
# compression and band slicing


def log_compress(mag: np.ndarray) -> np.ndarray:
    """Elementwise ``ln(1 + x)`` of a non-negative magnitude grid."""
    mag = np.asarray(mag, dtype=np.float64)
    if np.any(mag < 0):
        raise InputError("log compression expects non-negative magnitudes")
    return np.log1p(mag)


def log_expand(x: np.ndarray) -> np.ndarray:
    """Inverse of :func:`log_compress`: ``exp(x) - 1``."""
    return np.expm1(np.asarray(x, dtype=np.float64))


def spectrogram_log_mag(s: ComplexSpectrogram) -> LogMagSpectrogram:
    return LogMagSpectrogram(log_compress(np.abs(s.values)), s.cfg, s.n_samples)


def slice_bands(values: np.ndarray, bands: int) -> np.ndarray:
    """Rearrange ``(C, F, N)`` into ``(C * bands, F / bands, N)``."""
    c, f, n = values.shape
    if f % bands != 0:
        raise ConfigError(f"{f} frequency rows not divisible into {bands} bands")
    return values.reshape(c * bands, f // bands, n)


def unslice_bands(values: np.ndarray, bands: int) -> np.ndarray:
    cb, rows, n = values.shape
    if cb % bands != 0:
        raise ConfigError(f"{cb} channels not divisible by {bands} bands")
    return values.reshape(cb // bands, rows * bands, n)


def slice_freq(s: LogMagSpectrogram, bands: int = 16) -> SlicedSpectrogram:
    return SlicedSpectrogram(
        slice_bands(s.values, bands), bands, s.channels, s.cfg, s.n_samples
    )


def unslice(s: SlicedSpectrogram) -> LogMagSpectrogram:
    return LogMagSpectrogram(
        unslice_bands(s.values, s.bands), s.cfg, s.n_samples
    )


# ---------------------------------------------------------------------------
# preprocessing


def normalize_power(w: Waveform, target: float = 1.2) -> Waveform:
    """Rescale so the mean squared sample value equals ``target``."""
    power = float(np.mean(w.samples**2))
    if power <= 0.0:
        raise DegenerateInputError("cannot power-normalize a silent clip")
    return Waveform(w.samples * math.sqrt(target / power), w.sample_rate)


# ---------------------------------------------------------------------------
# metrics


def stft_distance(pred, gt) -> float:
    """Frobenius norm of the complex spectrogram difference."""
    a = pred.values if isinstance(pred, ComplexSpectrogram) else np.asarray(pred)
    b = gt.values if isinstance(gt, ComplexSpectrogram) else np.asarray(gt)
    if a.shape != b.shape:
        raise InputError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a - b))


def si_sdr(est, ref) -> float:
    """Scale-invariant signal-to-distortion ratio in dB.

    Projects the estimate onto the reference and returns
    ``10 log10(||a r||^2 / ||a r - e||^2)`` with ``a = <e, r> / ||r||^2``.
    A zero-error estimate returns ``+inf``.
    """
    e = est.mono_samples() if isinstance(est, Waveform) else np.asarray(est, dtype=np.float64)
    r = ref.mono_samples() if isinstance(ref, Waveform) else np.asarray(ref, dtype=np.float64)
    if e.shape != r.shape:
        raise InputError(f"length mismatch: {e.shape} vs {r.shape}")
    ref_energy = float(np.dot(r, r))
    if ref_energy == 0.0:
        raise InputError("si_sdr reference must be nonzero")
    alpha = float(np.dot(e, r)) / ref_energy
    target = alpha * r
    noise = target - e
    noise_energy = float(np.dot(noise, noise))
    if noise_energy == 0.0:
        return math.inf
    return 10.0 * math.log10(alpha * alpha * ref_energy / noise_energy)


def si_sdr_clamped(est, ref, lo: float = -60.0, hi: float = 60.0) -> float:
    """SI-SDR clamped to a finite range so means cannot be poisoned."""
    return float(np.clip(si_sdr(est, ref), lo, hi))


def reconstruct_with_gt_phase(
    mag: LogMagSpectrogram, phase: np.ndarray, cfg: StftConfig | None = None
) -> Waveform:
    """Pair a predicted log-magnitude with a reference phase and invert."""
    phase = np.asarray(phase, dtype=np.float64)
    if phase.shape != mag.values.shape:
        raise InputError(
            f"phase shape {phase.shape} != magnitude shape {mag.values.shape}"
        )
    linear = log_expand(mag.values)
    complex_grid = linear * np.exp(1j * phase)
    return istft(ComplexSpectrogram(complex_grid, mag.cfg, mag.n_samples), cfg)


# ---------------------------------------------------------------------------
# disk formats


def write_wav(path, w: Waveform) -> None:
    """32-bit float little-endian WAV."""
    data = w.samples.T.astype("<f4")
    if data.shape[1] == 1:
        data = data[:, 0]
    wavfile.write(path, w.sample_rate, data)


def read_wav(path) -> Waveform:
    rate, data = wavfile.read(path)
    if data.dtype != np.float32:
        raise InputError(f"expected float32 WAV payload, got {data.dtype}")
    arr = data.astype(np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    else:
        arr = arr.T
    return Waveform(arr, int(rate))


def save_grid(path, values: np.ndarray) -> None:
    """Raw grid dump: u64-LE rank, u64-LE dim per axis, f32-LE payload."""
    values = np.asarray(values)
    if np.iscomplexobj(values):
        values = np.stack([values.real, values.imag], axis=-1)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", values.ndim))
        for d in values.shape:
            fh.write(struct.pack("<Q", d))
        fh.write(values.astype("<f4").tobytes())


def load_grid(path) -> np.ndarray:
    with open(path, "rb") as fh:
        (rank,) = struct.unpack("<Q", fh.read(8))
        dims = struct.unpack(f"<{rank}Q", fh.read(8 * rank))
        payload = np.frombuffer(fh.read(), dtype="<f4")
    return payload.reshape(dims).astype(np.float64)
