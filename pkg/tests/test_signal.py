import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from avsep import signal as sig
from avsep.errors import ConfigError, DegenerateInputError, InputError

RNG = np.random.default_rng(1234)


def noise_wave(n=16000, channels=1, seed=0, rate=16000):
    r = np.random.default_rng(seed)
    return sig.Waveform(r.standard_normal((channels, n)), rate)


class TestStft:
    def test_paper_preset_shapes(self):
        for c in (1, 2):
            spec = sig.stft(noise_wave(channels=c), sig.PAPER_STFT)
            assert spec.shape == (c, 512, 32)

    def test_desk_preset_shape(self):
        spec = sig.stft(noise_wave(n=4000), sig.DESK_STFT)
        assert spec.shape == (1, 128, 32)

    def test_zero_waveform_gives_zero_spectrogram(self):
        w = sig.Waveform(np.zeros((1, 16000)))
        spec = sig.stft(w, sig.PAPER_STFT)
        assert np.all(spec.values == 0)

    def test_sinusoid_concentrates_on_bin(self):
        # oracle: naive DFT (explicit summation) of the hand-windowed frame
        cfg = sig.PAPER_STFT
        b = 64
        freq = b * cfg.sample_rate / cfg.fft_size
        t = np.arange(16000) / cfg.sample_rate
        w = sig.Waveform(np.sin(2 * np.pi * freq * t))
        spec = sig.stft(w, cfg)

        frame_idx = 16  # interior frame
        half = cfg.fft_size // 2
        padded = np.pad(w.samples[0], (half, half))
        start = frame_idx * cfg.hop
        window = sig._analysis_window(cfg)
        frame = padded[start : start + cfg.fft_size] * window
        k = np.arange(cfg.n_bins)
        n = np.arange(cfg.fft_size)
        dft = (frame[None, :] * np.exp(-2j * np.pi * k[:, None] * n[None, :] / cfg.fft_size)).sum(axis=1)
        np.testing.assert_allclose(spec.values[0, :, frame_idx], dft, atol=1e-8)

        energy = np.abs(dft) ** 2
        assert energy[b - 1 : b + 2].sum() >= 0.95 * energy.sum()

    def test_too_short_waveform_rejected(self):
        with pytest.raises(InputError):
            sig.stft(noise_wave(n=100), sig.PAPER_STFT)

    def test_rate_mismatch_rejected(self):
        with pytest.raises(ConfigError):
            sig.stft(noise_wave(rate=8000), sig.PAPER_STFT)

    def test_parseval_interior_frames(self):
        cfg = sig.PAPER_STFT
        w = noise_wave(seed=7)
        spec = sig.stft(w, cfg)
        half = cfg.fft_size // 2
        padded = np.pad(w.samples[0], (half, half))
        window = sig._analysis_window(cfg)
        for frame_idx in (5, 16, 25):
            start = frame_idx * cfg.hop
            frame = padded[start : start + cfg.fft_size] * window
            time_energy = np.sum(frame**2)
            bins = spec.values[0, :, frame_idx]
            # odd fft size: no Nyquist bin, double all but DC
            freq_energy = (np.abs(bins[0]) ** 2 + 2 * np.sum(np.abs(bins[1:]) ** 2)) / cfg.fft_size
            assert abs(freq_energy - time_energy) <= 0.01 * time_energy


class TestIstft:
    @pytest.mark.parametrize("cfg,n", [(sig.PAPER_STFT, 16000), (sig.DESK_STFT, 4000)])
    def test_roundtrip_noise(self, cfg, n):
        w = noise_wave(n=n, seed=3)
        back = sig.istft(sig.stft(w, cfg))
        err = np.linalg.norm(back.samples - w.samples) / np.linalg.norm(w.samples)
        assert err < 1e-5

    def test_roundtrip_sine(self):
        cfg = sig.PAPER_STFT
        t = np.arange(16000) / cfg.sample_rate
        w = sig.Waveform(np.sin(2 * np.pi * 440.0 * t))
        back = sig.istft(sig.stft(w, cfg))
        interior = slice(1024, 16000 - 1024)
        num = np.linalg.norm(back.samples[0][interior] - w.samples[0][interior])
        assert num / np.linalg.norm(w.samples[0][interior]) < 1e-5

    def test_zero_spectrogram_gives_zero_waveform(self):
        spec = sig.stft(noise_wave(seed=1), sig.PAPER_STFT)
        zero = sig.ComplexSpectrogram(np.zeros_like(spec.values), spec.cfg, spec.n_samples)
        assert np.all(sig.istft(zero).samples == 0)

    def test_mismatched_cfg_rejected(self):
        spec = sig.stft(noise_wave(n=4000, seed=2), sig.DESK_STFT)
        with pytest.raises(ConfigError):
            sig.istft(spec, sig.PAPER_STFT)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**31), channels=st.sampled_from([1, 2]))
    def test_roundtrip_property(self, seed, channels):
        w = noise_wave(n=4000, channels=channels, seed=seed)
        back = sig.istft(sig.stft(w, sig.DESK_STFT))
        err = np.linalg.norm(back.samples - w.samples) / np.linalg.norm(w.samples)
        assert err < 1e-5


class TestLogCompression:
    def test_values(self):
        assert sig.log_compress(np.array([0.0]))[0] == 0.0
        assert abs(sig.log_compress(np.array([math.e - 1.0]))[0] - 1.0) < 1e-12

    def test_roundtrip_random_grid(self):
        grid = RNG.random((2, 64, 16)) * 10
        back = sig.log_expand(sig.log_compress(grid))
        np.testing.assert_allclose(back, grid, atol=1e-12)

    def test_negative_rejected(self):
        with pytest.raises(InputError):
            sig.log_compress(np.array([-0.5]))


class TestSlicing:
    def test_paper_shape(self):
        grid = RNG.random((2, 512, 32))
        logmag = sig.LogMagSpectrogram(grid, sig.PAPER_STFT, 16000)
        sliced = sig.slice_freq(logmag, bands=16)
        assert sliced.shape == (32, 32, 32)

    def test_unslice_is_inverse(self):
        grid = RNG.random((2, 512, 32))
        logmag = sig.LogMagSpectrogram(grid, sig.PAPER_STFT, 16000)
        back = sig.unslice(sig.slice_freq(logmag, 16))
        assert np.array_equal(back.values, grid)

    def test_band_k_matches_rows(self):
        grid = RNG.random((1, 512, 32))
        sliced = sig.slice_bands(grid, 16)
        for k in (0, 7, 15):
            assert np.array_equal(sliced[k], grid[0, 32 * k : 32 * k + 32, :])

    def test_indivisible_rejected(self):
        with pytest.raises(ConfigError):
            sig.slice_bands(RNG.random((1, 100, 32)), 16)


class TestNormalizePower:
    def test_target_power(self):
        w = sig.normalize_power(noise_wave(seed=5), 1.2)
        assert abs(float(np.mean(w.samples**2)) - 1.2) <= 1e-9

    def test_already_normalized_unchanged(self):
        w = sig.normalize_power(noise_wave(seed=6), 1.2)
        w2 = sig.normalize_power(w, 1.2)
        np.testing.assert_allclose(w2.samples, w.samples, rtol=1e-12)

    def test_constant_clip_analytic_scale(self):
        w = sig.Waveform(np.full((1, 100), 0.5))
        out = sig.normalize_power(w, 1.2)
        np.testing.assert_allclose(out.samples, math.sqrt(1.2), rtol=1e-12)

    def test_silent_clip_rejected(self):
        with pytest.raises(DegenerateInputError):
            sig.normalize_power(sig.Waveform(np.zeros((1, 100))), 1.2)


class TestStftDistance:
    def test_zero_iff_equal(self):
        grid = RNG.random((1, 8, 4)) + 1j * RNG.random((1, 8, 4))
        assert sig.stft_distance(grid, grid) == 0.0

    def test_against_zero_is_norm(self):
        grid = RNG.random((1, 8, 4)) + 1j * RNG.random((1, 8, 4))
        assert abs(sig.stft_distance(np.zeros_like(grid), grid) - np.linalg.norm(grid)) < 1e-12

    def test_hand_case_three_four_five(self):
        a = np.array([[[3.0 + 0j]]])
        b = np.array([[[0.0 + 4j]]])
        assert abs(sig.stft_distance(a, b) - 5.0) < 1e-12

    def test_metric_properties_on_random_triples(self):
        for seed in range(20):
            r = np.random.default_rng(seed)
            x, y, z = (r.standard_normal((2, 8, 4)) + 1j * r.standard_normal((2, 8, 4)) for _ in range(3))
            dxy = sig.stft_distance(x, y)
            assert abs(dxy - sig.stft_distance(y, x)) < 1e-12
            assert dxy <= sig.stft_distance(x, z) + sig.stft_distance(z, y) + 1e-12

    def test_shape_mismatch_rejected(self):
        with pytest.raises(InputError):
            sig.stft_distance(np.zeros((1, 4, 4)), np.zeros((1, 8, 4)))


class TestSiSdr:
    def test_identical_gives_inf(self):
        r = RNG.standard_normal(256)
        assert sig.si_sdr(r, r) == math.inf

    def test_scale_invariance_power_of_two_exact(self):
        r = np.random.default_rng(9).standard_normal(512)
        e = r + 0.1 * np.random.default_rng(10).standard_normal(512)
        base = sig.si_sdr(e, r)
        for a in (0.5, 2.0, 1024.0):
            assert sig.si_sdr(a * e, r) == base

    def test_two_times_ref_equals_ref(self):
        r = np.random.default_rng(11).standard_normal(256)
        assert sig.si_sdr(2.0 * r, r) == sig.si_sdr(r, r) == math.inf

    @settings(max_examples=50, deadline=None)
    @given(scale=st.floats(1e-3, 1e3), seed=st.integers(0, 2**31))
    def test_scale_invariance_general(self, scale, seed):
        r = np.random.default_rng(seed).standard_normal(128)
        e = r + 0.3 * np.random.default_rng(seed + 1).standard_normal(128)
        assert abs(sig.si_sdr(scale * e, r) - sig.si_sdr(e, r)) < 1e-10

    def test_hand_case_zero_db(self):
        assert abs(sig.si_sdr(np.array([1.0, 1.0]), np.array([1.0, 0.0]))) <= 1e-9

    def test_zero_reference_rejected(self):
        with pytest.raises(InputError):
            sig.si_sdr(np.ones(4), np.zeros(4))

    def test_clamping(self):
        r = RNG.standard_normal(64)
        assert sig.si_sdr_clamped(r, r) == 60.0


class TestReconstruction:
    def test_true_monaural_roundtrip(self):
        cfg = sig.DESK_STFT
        w = noise_wave(n=4000, seed=20)
        spec = sig.stft(w, cfg)
        mag = sig.spectrogram_log_mag(spec)
        phase = np.angle(spec.values)
        back = sig.reconstruct_with_gt_phase(mag, phase)
        err = np.linalg.norm(back.samples - w.samples) / np.linalg.norm(w.samples)
        assert err < 1e-5

    def test_zero_magnitude_gives_zero(self):
        cfg = sig.DESK_STFT
        mag = sig.LogMagSpectrogram(np.zeros((1, 128, 32)), cfg, 4000)
        out = sig.reconstruct_with_gt_phase(mag, np.zeros((1, 128, 32)))
        assert np.all(out.samples == 0)

    def test_doubling_magnitude_doubles_output(self):
        cfg = sig.DESK_STFT
        w = noise_wave(n=4000, seed=21)
        spec = sig.stft(w, cfg)
        mag = sig.spectrogram_log_mag(spec)
        phase = np.angle(spec.values)
        out1 = sig.reconstruct_with_gt_phase(mag, phase)
        doubled = sig.LogMagSpectrogram(
            sig.log_compress(2.0 * sig.log_expand(mag.values)), cfg, 4000
        )
        out2 = sig.reconstruct_with_gt_phase(doubled, phase)
        np.testing.assert_allclose(out2.samples, 2.0 * out1.samples, atol=1e-9)

    def test_shape_mismatch_rejected(self):
        mag = sig.LogMagSpectrogram(np.zeros((1, 128, 32)), sig.DESK_STFT, 4000)
        with pytest.raises(InputError):
            sig.reconstruct_with_gt_phase(mag, np.zeros((1, 64, 32)))


class TestDiskFormats:
    def test_wav_roundtrip(self, tmp_path):
        w = sig.Waveform(np.clip(RNG.standard_normal((2, 4000)) * 0.1, -1, 1))
        path = tmp_path / "clip.wav"
        sig.write_wav(path, w)
        back = sig.read_wav(path)
        assert back.sample_rate == w.sample_rate
        np.testing.assert_allclose(back.samples, w.samples, atol=1e-6)

    def test_grid_roundtrip(self, tmp_path):
        grid = RNG.standard_normal((3, 16, 8)).astype(np.float32).astype(np.float64)
        path = tmp_path / "grid.f32"
        sig.save_grid(path, grid)
        np.testing.assert_array_equal(sig.load_grid(path), grid)
