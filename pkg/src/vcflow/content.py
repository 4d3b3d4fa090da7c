"""Discrete content tokens: cepstral frame features and a k-means quantizer.

Features are computed on the log-mel analysis frames, so a token sequence
has exactly one id per mel frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.fft import dct
from scipy.ndimage import uniform_filter1d

from .dsp import ConfigError, MelConfig, Waveform, mel_filterbank, stft
from .rng import numpy_rng

N_CEPSTRA = 13
FEATURE_DIM = 2 * N_CEPSTRA
SMOOTH_BINS = 17  # ~265 Hz at n_fft=1024, 16 kHz
ENERGY_GATE = 0.1
SILENCE_VALUE = -3.0


@dataclass
class KMeansModel:
    centroids: np.ndarray  # [K, D]
    fit_seed: int = 0

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        if self.centroids.ndim != 2 or self.centroids.shape[0] < 1:
            raise ValueError("centroids must be a non-empty [K, D] matrix")
        if not np.all(np.isfinite(self.centroids)):
            raise ValueError("centroids must be finite")

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.centroids.shape[1]


@dataclass
class SemanticTokenSeq:
    ids: np.ndarray
    k: int
    frame_rate: float

    def __len__(self) -> int:
        return self.ids.shape[0]


def deltas(x: np.ndarray, width: int = 2) -> np.ndarray:
    """Regression deltas over frames with edge replication."""
    n = x.shape[0]
    if n == 0:
        return x.copy()
    pad = np.pad(x, ((width, width), (0, 0)), mode="edge")
    num = sum(k * (pad[width + k : width + k + n] - pad[width - k : width - k + n]) for k in range(1, width + 1))
    return num / (2 * sum(k * k for k in range(1, width + 1)))


def cepstra(logmel: np.ndarray, n: int = N_CEPSTRA) -> np.ndarray:
    """Cepstral coefficients 1..n of log-mel frames; c0 (level) is dropped."""
    return dct(logmel, type=2, norm="ortho", axis=-1)[:, 1 : n + 1]


def frame_features(
    w: Waveform,
    cfg: MelConfig = MelConfig(),
    smooth_bins: int = SMOOTH_BINS,
    gate: float = ENERGY_GATE,
    eps: float = 1e-8,
) -> np.ndarray:
    """Per-frame content features ``[frames, 26]``.

    The waveform is scaled to unit RMS and its STFT magnitude is averaged over
    ``smooth_bins`` neighbouring bins (wider than any harmonic spacing) before
    the mel filterbank, so the cepstra follow the spectral envelope rather
    than the harmonics. 13 cepstra plus deltas are then normalized over the
    utterance's active frames: each dimension loses its mean, and the cepstra
    and the deltas are each divided by one shared standard deviation, which
    keeps the natural weighting between coefficients. Frames whose mel energy
    is below ``gate`` times the loudest frame carry no content and are set to
    a fixed silence vector.
    """
    if w.sample_rate != cfg.sample_rate:
        raise ConfigError(f"waveform sample rate {w.sample_rate} does not match mel config {cfg.sample_rate}")
    x = w.samples
    rms = np.sqrt(np.mean(x**2)) if x.size else 0.0
    if rms > 0:
        x = x / rms
    mag = np.abs(stft(x, cfg.n_fft, cfg.hop))
    if mag.shape[0] == 0:
        return np.zeros((0, FEATURE_DIM))
    if smooth_bins > 1:
        mag = uniform_filter1d(mag, smooth_bins, axis=1, mode="nearest")
    mel = mag @ mel_filterbank(cfg).T
    c = cepstra(np.log(np.maximum(mel, cfg.log_floor)))
    feats = np.concatenate([c, deltas(c)], axis=1)
    energy = mel.sum(axis=1)
    active = energy > gate * energy.max() if energy.max() > 0 else np.zeros(len(energy), bool)
    out = np.full_like(feats, SILENCE_VALUE)
    if active.any():
        act = feats[active]
        var = act.var(axis=0)
        sd = np.repeat([np.sqrt(var[:N_CEPSTRA].mean()), np.sqrt(var[N_CEPSTRA:].mean())], N_CEPSTRA)
        out[active] = (act - act.mean(axis=0)) / (sd + eps)
    return out


def _sq_distances(x: np.ndarray, c: np.ndarray, chunk: int = 4096) -> np.ndarray:
    out = np.empty((x.shape[0], c.shape[0]))
    for s in range(0, x.shape[0], chunk):
        diff = x[s : s + chunk, None, :] - c[None, :, :]
        out[s : s + chunk] = np.einsum("nkd,nkd->nk", diff, diff)
    return out


def nearest(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Index of the nearest centroid; ``argmin`` resolves ties to the lowest index."""
    return np.argmin(_sq_distances(x, centroids), axis=1)


def kmeans_fit(features: np.ndarray, k: int, seed: int = 0, max_iter: int = 200, tol: float = 1e-6) -> KMeansModel:
    """Lloyd's algorithm with k-means++ seeding.

    Stops when no centroid moves more than ``tol`` or after ``max_iter``
    iterations. Empty clusters are reseeded from the points farthest from
    their current centroid.
    """
    x = np.asarray(features, dtype=np.float64)
    if k < 1:
        raise ValueError("k must be >= 1")
    n_distinct = np.unique(x, axis=0).shape[0]
    if n_distinct < k:
        raise ValueError(f"k-means needs at least {k} distinct feature vectors, got {n_distinct}")
    rng = numpy_rng(seed, "kmeans")

    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[rng.integers(x.shape[0])]
    closest = _sq_distances(x, centroids[:1])[:, 0]
    for j in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = rng.integers(x.shape[0])
        else:
            idx = rng.choice(x.shape[0], p=closest / total)
        centroids[j] = x[idx]
        closest = np.minimum(closest, _sq_distances(x, centroids[j : j + 1])[:, 0])

    for _ in range(max_iter):
        d = _sq_distances(x, centroids)
        assign = np.argmin(d, axis=1)
        counts = np.bincount(assign, minlength=k)
        new = np.zeros_like(centroids)
        np.add.at(new, assign, x)
        filled = counts > 0
        new[filled] /= counts[filled, None]
        if not filled.all():
            own = d[np.arange(x.shape[0]), assign]
            donors = np.argsort(-own)
            for j, idx in zip(np.nonzero(~filled)[0], donors):
                new[j] = x[idx]
        shift = np.max(np.linalg.norm(new - centroids, axis=1))
        centroids = new
        if shift < tol:
            break
    return KMeansModel(centroids, seed)


def tokenize(features: np.ndarray, model: KMeansModel, frame_rate: float = MelConfig().frame_rate) -> SemanticTokenSeq:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != model.feature_dim:
        raise ValueError(f"feature dimension {features.shape[-1]} does not match k-means model dimension {model.feature_dim}")
    return SemanticTokenSeq(nearest(features, model.centroids), model.k, frame_rate)
