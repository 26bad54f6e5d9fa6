import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from apckit import dsp


def sine_wave(freq=1000.0, seconds=1.0, rate=16000, spk="s1", utt="u1"):
    t = np.arange(int(seconds * rate)) / rate
    return dsp.Waveform(0.5 * np.sin(2 * np.pi * freq * t), rate, utt, spk)


class TestStft:
    def test_pure_tone_peaks_at_expected_bin(self):
        cfg = dsp.SpectrogramConfig()
        spec = dsp.stft(sine_wave(freq=1000.0), cfg)
        mags = np.abs(spec)
        expected_bin = round(1000.0 * cfg.fft_size / 16000)
        assert np.all(mags.argmax(axis=1) == expected_bin)

    def test_silence_gives_zero_magnitudes(self):
        wave = dsp.Waveform(np.zeros(16000), 16000)
        spec = dsp.stft(wave, dsp.SpectrogramConfig())
        assert np.abs(spec).max() == 0.0

    def test_parseval_energy(self, rng):
        cfg = dsp.SpectrogramConfig()
        wave = dsp.Waveform(rng.uniform(-1, 1, 8000), 16000)
        spec = dsp.stft(wave, cfg)
        win = cfg.window_length(16000)
        hop = cfg.hop_length(16000)
        hann = np.hanning(win)
        for t in range(spec.shape[0]):
            frame = wave.samples[t * hop:t * hop + win] * hann
            time_energy = np.sum(frame ** 2)
            m = np.abs(spec[t]) ** 2
            spec_energy = (m[0] + m[-1] + 2 * m[1:-1].sum()) / cfg.fft_size
            assert abs(spec_energy - time_energy) <= 1e-3 * time_energy

    def test_too_short_waveform_rejected(self):
        with pytest.raises(ValueError, match="shorter"):
            dsp.stft(dsp.Waveform(np.zeros(100), 16000), dsp.SpectrogramConfig())

    def test_frame_count_formula(self):
        cfg = dsp.SpectrogramConfig()
        spec = dsp.stft(dsp.Waveform(np.zeros(16000), 16000), cfg)
        assert spec.shape == (98, cfg.fft_size // 2 + 1)


class TestMelFilterbank:
    def test_mel_scale_closed_form(self):
        assert dsp.hz_to_mel(700.0) == pytest.approx(2595.0 * np.log10(2.0))
        assert dsp.hz_to_mel(0.0) == 0.0

    def test_unit_peaks(self):
        fb = dsp.mel_filterbank(dsp.SpectrogramConfig(), 16000)
        np.testing.assert_allclose(fb.max(axis=1), 1.0)
        assert np.all((fb == 1.0).sum(axis=1) == 1)

    def test_rows_nonnegative_and_centers_increase(self):
        cfg = dsp.SpectrogramConfig()
        fb = dsp.mel_filterbank(cfg, 16000)
        assert np.all(fb >= 0.0)
        centers = dsp.mel_to_hz(
            np.linspace(dsp.hz_to_mel(cfg.fmin), dsp.hz_to_mel(8000.0), cfg.n_mels + 2))[1:-1]
        assert np.all(np.diff(centers) > 0)

    def test_no_dead_bands(self):
        cfg = dsp.SpectrogramConfig()
        fb = dsp.mel_filterbank(cfg, 16000)
        bin_hz = np.arange(cfg.fft_size // 2 + 1) * 16000 / cfg.fft_size
        inside = (bin_hz > cfg.fmin) & (bin_hz < 8000.0)
        assert np.all(fb[:, inside].sum(axis=0) > 0.0)

    def test_too_many_filters_rejected(self):
        cfg = dsp.SpectrogramConfig(fft_size=512, n_mels=400)
        with pytest.raises(dsp.ConfigError):
            dsp.mel_filterbank(cfg, 16000)


class TestLogMel:
    def test_silence_hits_log_floor(self):
        feats = dsp.log_mel(dsp.Waveform(np.zeros(16000), 16000), dsp.SpectrogramConfig())
        np.testing.assert_allclose(feats.frames, np.log(dsp.LOG_FLOOR), rtol=1e-6)

    def test_output_shape_one_second(self):
        feats = dsp.log_mel(sine_wave(), dsp.SpectrogramConfig())
        assert feats.frames.shape == (98, 80)

    def test_finite_on_noise(self, rng):
        wave = dsp.Waveform(rng.uniform(-1, 1, 6400), 16000)
        feats = dsp.log_mel(wave, dsp.SpectrogramConfig())
        assert np.all(np.isfinite(feats.frames))


def _feat(frames, utt, spk):
    return dsp.FeatureSequence(np.asarray(frames, dtype=np.float64), utt, spk)


class TestSpeakerCmvn:
    def test_single_speaker_moments(self, rng):
        feats = [_feat(rng.normal(3.0, 2.0, (50, 4)), "u1", "a")]
        out = dsp.speaker_cmvn(feats)[0]
        np.testing.assert_allclose(out.frames.mean(axis=0), 0.0, atol=1e-5)
        np.testing.assert_allclose(out.frames.var(axis=0), 1.0, atol=1e-5)

    def test_speakers_normalized_independently(self, rng):
        a1 = rng.normal(0, 1, (20, 3))
        b1 = rng.normal(5, 2, (30, 3))
        out1 = dsp.speaker_cmvn([_feat(a1, "u1", "a"), _feat(b1, "u2", "b")])
        out2 = dsp.speaker_cmvn([_feat(a1 * 7 + 1, "u1", "a"), _feat(b1, "u2", "b")])
        np.testing.assert_array_equal(out1[1].frames, out2[1].frames)

    def test_constant_column_maps_to_zero(self):
        frames = np.ones((10, 2))
        frames[:, 1] = np.arange(10)
        out = dsp.speaker_cmvn([_feat(frames, "u1", "a")])[0]
        np.testing.assert_array_equal(out.frames[:, 0], 0.0)

    def test_empty_group_rejected(self):
        with pytest.raises(ValueError):
            dsp.speaker_cmvn([])

    def test_missing_speaker_stats_rejected(self, rng):
        stats = dsp.compute_speaker_stats([_feat(rng.normal(size=(5, 2)), "u1", "a")])
        with pytest.raises(ValueError, match="speaker 'b'"):
            dsp.apply_speaker_stats([_feat(rng.normal(size=(5, 2)), "u2", "b")], stats)

    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=20, deadline=None)
    def test_idempotent(self, seed):
        r = np.random.default_rng(seed)
        feats = [_feat(r.normal(r.uniform(-3, 3), r.uniform(0.5, 4), (30, 3)), f"u{i}", "a")
                 for i in range(3)]
        once = dsp.speaker_cmvn(feats)
        twice = dsp.speaker_cmvn(once)
        for f1, f2 in zip(once, twice):
            np.testing.assert_allclose(f1.frames, f2.frames, atol=1e-5)
