import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vcflow.content import FEATURE_DIM, SILENCE_VALUE, KMeansModel, frame_features, kmeans_fit, nearest, tokenize
from vcflow.dsp import ConfigError, MelConfig, Waveform
from vcflow.rng import numpy_rng

SR = 16000


def vowelish(seconds=0.8, f0=140.0, seed=0):
    rng = numpy_rng(seed, "vowel")
    t = np.arange(int(seconds * SR)) / SR
    x = sum(np.sin(2 * np.pi * f0 * h * t + rng.uniform(0, 6.28)) / h for h in range(1, 30) if f0 * h < 7000)
    return Waveform(0.3 * x / np.max(np.abs(x)), SR)


class TestFeatures:
    def test_frame_count_and_dim(self):
        f = frame_features(vowelish(1.0))
        assert f.shape == (1 + SR // 256, FEATURE_DIM)

    @given(gain=st.floats(0.05, 2.5))
    @settings(max_examples=20, deadline=None)
    def test_scale_invariant(self, gain):
        w = vowelish()
        a = frame_features(w)
        b = frame_features(Waveform(np.clip(w.samples * gain, -1, 1), SR))
        assert np.allclose(a, b, atol=1e-6)

    def test_silence_frames_fixed_vector(self):
        x = np.concatenate([np.zeros(4096), vowelish(0.5).samples, np.zeros(4096)])
        f = frame_features(Waveform(x, SR))
        assert np.all(f[:8] == SILENCE_VALUE)
        assert np.all(f[-8:] == SILENCE_VALUE)

    def test_all_silence(self):
        f = frame_features(Waveform(np.zeros(4000), SR))
        assert np.all(f == SILENCE_VALUE)

    def test_empty(self):
        assert frame_features(Waveform(np.zeros(0), SR)).shape == (0, FEATURE_DIM)

    def test_sample_rate_mismatch(self):
        with pytest.raises(ConfigError):
            frame_features(Waveform(np.zeros(100), 8000))


def blobs(k=4, n=80, d=5, seed=0):
    rng = np.random.default_rng(seed)
    centers = rng.normal(0, 10, (k, d))
    x = np.concatenate([c + rng.normal(0, 0.1, (n, d)) for c in centers])
    labels = np.repeat(np.arange(k), n)
    return x, labels, centers


class TestKMeans:
    def test_recovers_separated_blobs(self):
        x, labels, centers = blobs()
        m = kmeans_fit(x, 4, seed=3)
        assign = nearest(x, m.centroids)
        for j in range(4):
            assert len(set(assign[labels == j])) == 1
        assert len(set(assign)) == 4
        for c in centers:
            assert np.min(np.linalg.norm(m.centroids - c, axis=1)) < 0.1

    def test_k1_is_mean(self):
        x, _, _ = blobs()
        m = kmeans_fit(x, 1)
        assert np.allclose(m.centroids[0], x.mean(0))

    def test_deterministic(self):
        x, _, _ = blobs(seed=1)
        assert np.array_equal(kmeans_fit(x, 3, seed=7).centroids, kmeans_fit(x, 3, seed=7).centroids)

    def test_too_few_distinct(self):
        with pytest.raises(ValueError, match="distinct"):
            kmeans_fit(np.ones((10, 2)), 2)

    def test_k_zero(self):
        with pytest.raises(ValueError):
            kmeans_fit(np.ones((10, 2)), 0)

    def test_tie_goes_to_lower_index(self):
        c = np.array([[1.0, 0.0], [-1.0, 0.0]])
        assert nearest(np.zeros((1, 2)), c).tolist() == [0]

    @given(seed=st.integers(0, 500))
    @settings(max_examples=20, deadline=None)
    def test_nearest_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        c = rng.normal(size=(7, 3))
        x = rng.normal(size=(50, 3))
        brute = [int(np.argmin([np.sum((xi - cj) ** 2) for cj in c])) for xi in x]
        assert nearest(x, c).tolist() == brute

    def test_model_validation(self):
        with pytest.raises(ValueError):
            KMeansModel(np.zeros((0, 3)))
        with pytest.raises(ValueError):
            KMeansModel(np.array([[np.nan]]))


class TestTokenize:
    def test_ids_in_range(self):
        x, _, _ = blobs(d=FEATURE_DIM)
        m = kmeans_fit(x, 4)
        seq = tokenize(frame_features(vowelish()), m)
        assert len(seq) == 1 + int(0.8 * SR) // 256
        assert seq.ids.min() >= 0 and seq.ids.max() < 4
        assert seq.frame_rate == MelConfig().frame_rate

    def test_dimension_mismatch(self):
        m = KMeansModel(np.zeros((2, 3)))
        with pytest.raises(ValueError, match="dimension"):
            tokenize(np.zeros((4, FEATURE_DIM)), m)

    def test_same_vowel_different_pitch_agrees(self):
        feats = np.concatenate([frame_features(vowelish(f0=f, seed=s)) for f, s in [(120, 0), (200, 1)]])
        m = kmeans_fit(feats, 4, seed=0)
        a = tokenize(frame_features(vowelish(f0=130.0, seed=2)), m).ids
        b = tokenize(frame_features(vowelish(f0=190.0, seed=3)), m).ids
        assert np.mean(a == b) > 0.5
