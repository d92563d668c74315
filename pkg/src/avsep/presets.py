"""Scale presets bundling signal geometry, world constraints, and net sizes.

``paper`` mirrors the full-scale configuration (512 x 32 grids, 5-level
separator U-Nets, 8 m inter-source spacing).  ``desk`` shrinks everything so
the whole pipeline trains on a laptop in minutes: 0.25 s audio chunks on
128 x 32 grids, 3-level U-Nets, 8-12 m rooms.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .errors import ConfigError
from .signal import DESK_STFT, PAPER_STFT, StftConfig


@dataclass(frozen=True)
class Preset:
    name: str
    stft: StftConfig
    clip_seconds: float
    slice_bands: int
    n_classes: int = 12
    clip_power: float = 1.2

    # world
    room_size_range: tuple = (6, 16)
    max_interior_walls: int = 2
    min_source_dist: float = 8.0
    far_start_range: tuple = (4.0, 12.0)
    k_sources: int = 2
    t_near: int = 20
    t_far: int = 100
    t_switch: int = 80
    depth_rays: int = 64
    depth_fov: float = 90.0
    depth_max_range: float = 20.0

    # separator / policy nets
    unet_channels: tuple = (64, 128, 256, 512, 512)
    refiner_hidden: int = 32
    gru_hidden: int = 512
    encoder_dim: int = 512

    # training budgets
    pretrain_per_scene: int = 30000
    pretrain_epochs: int = 10
    policy_steps: int = 200_000

    @property
    def sample_rate(self) -> int:
        return self.stft.sample_rate

    @property
    def clip_samples(self) -> int:
        return int(round(self.clip_seconds * self.sample_rate))

    @property
    def freq_bins(self) -> int:
        return self.stft.n_bins

    @property
    def frames(self) -> int:
        return self.stft.n_frames(self.clip_samples)

    @property
    def sliced_shape(self) -> tuple:
        """(rows, cols) of one sliced band plane."""
        return (self.freq_bins // self.slice_bands, self.frames)


PAPER = Preset(
    name="paper",
    stft=PAPER_STFT,
    clip_seconds=1.0,
    slice_bands=16,
)

DESK = Preset(
    name="desk",
    stft=DESK_STFT,
    clip_seconds=0.25,
    slice_bands=4,
    room_size_range=(8, 12),
    min_source_dist=4.0,
    unet_channels=(16, 32, 64),
    refiner_hidden=16,
    gru_hidden=64,
    encoder_dim=64,
    pretrain_per_scene=2000,
    pretrain_epochs=6,
    policy_steps=200_000,
)

_PRESETS = {"paper": PAPER, "desk": DESK}


def get_preset(name: str, **overrides) -> Preset:
    try:
        preset = _PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(_PRESETS)}")
    return replace(preset, **overrides) if overrides else preset
