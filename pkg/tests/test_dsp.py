import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vcflow.dsp import (
    ConfigError,
    MelConfig,
    MelSpectrogram,
    Waveform,
    WavError,
    estimate_f0,
    frame_signal,
    griffin_lim,
    mel_band_of,
    mel_spectrogram,
    read_wav,
    stft,
    write_wav,
)
from vcflow.rng import numpy_rng

SR = 16000


def tone(freq, seconds=1.0, amp=0.5, sr=SR):
    t = np.arange(int(seconds * sr)) / sr
    return Waveform(amp * np.sin(2 * np.pi * freq * t), sr)


# ---------------------------------------------------------------------------
# Framing
# ---------------------------------------------------------------------------


class TestFraming:
    def test_one_second_centered(self):
        frames = frame_signal(np.zeros(16000), 1024, 256, centered=True)
        assert frames.shape == (63, 1024)

    def test_empty_signal(self):
        assert len(frame_signal(np.zeros(0), 1024, 256)) == 0

    def test_exact_fit_uncentered(self):
        assert frame_signal(np.ones(1024), 1024, 1024, centered=False).shape == (1, 1024)

    def test_frame_smaller_than_hop_rejected(self):
        with pytest.raises(ValueError):
            frame_signal(np.ones(100), 128, 256)

    @given(n=st.integers(1, 20000), hop=st.integers(1, 512))
    @settings(max_examples=60, deadline=None)
    def test_count_formula(self, n, hop):
        frame = max(hop, 64)
        assert len(frame_signal(np.zeros(n), frame, hop, centered=True)) == 1 + n // hop


# ---------------------------------------------------------------------------
# Mel spectrogram
# ---------------------------------------------------------------------------


class TestMel:
    def test_shape_and_floor_on_silence(self):
        m = mel_spectrogram(Waveform(np.zeros(8000), SR))
        assert m.data.shape == (1 + 8000 // 256, 80)
        assert np.all(m.data == np.log(1e-5))

    def test_tone_argmax_constant(self):
        m = mel_spectrogram(tone(440.0))
        peaks = np.argmax(m.data[4:-4], axis=1)
        assert np.all(peaks == peaks[0])
        assert peaks[0] == mel_band_of(440.0)

    def test_deterministic(self):
        w = tone(300.0, 0.5)
        assert np.array_equal(mel_spectrogram(w).data, mel_spectrogram(w).data)

    def test_sample_rate_mismatch(self):
        with pytest.raises(ConfigError):
            mel_spectrogram(Waveform(np.zeros(100), 8000))

    def test_shift_by_hop_equivariance(self):
        x = numpy_rng(1, "shift").standard_normal(6000) * 0.1
        a = mel_spectrogram(Waveform(x, SR)).data
        b = mel_spectrogram(Waveform(np.concatenate([np.zeros(256), x]), SR)).data
        assert np.allclose(a[5:-5], b[6 : len(a) - 4], atol=1e-9)


# ---------------------------------------------------------------------------
# F0
# ---------------------------------------------------------------------------


class TestF0:
    def test_sine_220(self):
        tr = estimate_f0(tone(220.0))
        assert tr.voiced.mean() > 0.9
        assert np.all(np.abs(tr.f0_hz[tr.voiced] - 220.0) <= 2.0)

    def test_silence_unvoiced(self):
        tr = estimate_f0(Waveform(np.zeros(SR), SR))
        assert not tr.voiced.any() and np.all(tr.f0_hz == 0)

    def test_white_noise_mostly_unvoiced(self):
        noise = numpy_rng(0, "noise").standard_normal(2 * SR) * 0.3
        assert estimate_f0(Waveform(noise, SR)).voiced.mean() < 0.2

    def test_frame_count_25hz(self):
        assert len(estimate_f0(tone(200.0, 2.0))) == 50

    def test_bounds_checked(self):
        with pytest.raises(ConfigError):
            estimate_f0(tone(200.0), f_min=300.0, f_max=200.0)
        with pytest.raises(ConfigError):
            estimate_f0(tone(200.0), f_max=SR / 2)

    def test_voiced_within_bounds(self):
        tr = estimate_f0(tone(150.0), f_min=60.0, f_max=300.0)
        f = tr.f0_hz[tr.voiced]
        assert np.all((f >= 60.0) & (f <= 300.0))

    @given(f=st.floats(80.0, 190.0))
    @settings(max_examples=15, deadline=None)
    def test_octave_consistency(self, f):
        lo = estimate_f0(tone(f, 0.6))
        hi = estimate_f0(tone(2 * f, 0.6))
        ratio = np.median(hi.f0_hz[hi.voiced]) / np.median(lo.f0_hz[lo.voiced])
        assert abs(ratio - 2.0) <= 0.04


# ---------------------------------------------------------------------------
# Griffin-Lim
# ---------------------------------------------------------------------------


class TestGriffinLim:
    def test_silence_gives_silence(self):
        m = MelSpectrogram(np.full((30, 80), np.log(1e-5)))
        w = griffin_lim(m, iters=8)
        assert np.sqrt(np.mean(w.samples**2)) < 1e-3

    def test_tone_dominant_bin(self):
        src = tone(440.0, 0.5)
        m = mel_spectrogram(src)
        w = griffin_lim(m, iters=32, length=len(src))
        ref = np.argmax(np.abs(stft(src.samples, 1024, 256))[3:-3].mean(0))
        out = np.argmax(np.abs(stft(w.samples, 1024, 256))[3:-3].mean(0))
        assert abs(int(out) - int(ref)) <= 1

    def test_zero_iters_is_initial_phase(self):
        m = mel_spectrogram(tone(300.0, 0.3))
        w0, errs = griffin_lim(m, iters=0, seed=3, return_errors=True)
        assert len(errs) == 1
        assert np.array_equal(w0.samples, griffin_lim(m, iters=0, seed=3).samples)

    def test_deterministic_for_seed(self):
        m = mel_spectrogram(tone(300.0, 0.3))
        assert np.array_equal(griffin_lim(m, 4, seed=1).samples, griffin_lim(m, 4, seed=1).samples)

    @pytest.mark.parametrize("freq", [220.0, 440.0, 1000.0])
    def test_error_does_not_grow(self, freq):
        m = mel_spectrogram(tone(freq, 0.4))
        _, errs = griffin_lim(m, iters=16, return_errors=True)
        assert errs[-1] <= errs[0]

    def test_negative_iters(self):
        with pytest.raises(ValueError):
            griffin_lim(MelSpectrogram(np.zeros((3, 80))), iters=-1)


# ---------------------------------------------------------------------------
# WAV I/O
# ---------------------------------------------------------------------------


class TestWav:
    def test_ramp_round_trip(self, tmp_path):
        w = Waveform(np.linspace(-0.9, 0.9, SR), SR)
        write_wav(w, tmp_path / "r.wav")
        back = read_wav(tmp_path / "r.wav")
        assert back.sample_rate == SR
        assert np.max(np.abs(back.samples - w.samples)) <= 1 / 32768

    def test_stereo_rejected(self, tmp_path):
        import wave

        with wave.open(str(tmp_path / "s.wav"), "wb") as fh:
            fh.setnchannels(2)
            fh.setsampwidth(2)
            fh.setframerate(SR)
            fh.writeframes(struct.pack("<4h", 0, 0, 1, 1))
        with pytest.raises(WavError, match="mono required"):
            read_wav(tmp_path / "s.wav")

    def test_empty_file(self, tmp_path):
        (tmp_path / "e.wav").write_bytes(b"")
        with pytest.raises(WavError, match="truncated header"):
            read_wav(tmp_path / "e.wav")

    def test_bit_depth_rejected(self, tmp_path):
        import wave

        with wave.open(str(tmp_path / "b.wav"), "wb") as fh:
            fh.setnchannels(1)
            fh.setsampwidth(1)
            fh.setframerate(SR)
            fh.writeframes(b"\x80\x80")
        with pytest.raises(WavError, match="bit depth"):
            read_wav(tmp_path / "b.wav")

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            Waveform(np.array([0.0, np.nan]))
