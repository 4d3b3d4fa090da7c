"""Signal processing: framing, STFT, log-mel analysis, F0 tracking, Griffin-Lim, WAV I/O.

Everything here is a pure numpy function of its inputs and configuration.
Frames are centered on multiples of the hop with reflect padding, so a signal
of ``n`` samples always yields ``1 + n // hop`` analysis frames.
"""

from __future__ import annotations

import functools
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import numpy_rng


class ConfigError(ValueError):
    """Raised when inputs disagree with the analysis configuration."""


class WavError(IOError):
    """Raised for unreadable or unsupported WAV files."""


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise ConfigError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class MelConfig:
    sample_rate: int = 16000
    n_fft: int = 1024
    hop: int = 256
    n_mels: int = 80
    f_min: float = 0.0
    f_max: float | None = None
    log_floor: float = 1e-5

    @property
    def fmax(self) -> float:
        return self.sample_rate / 2 if self.f_max is None else float(self.f_max)

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.hop


@dataclass
class MelSpectrogram:
    data: np.ndarray  # [n_frames, n_mels], natural-log magnitudes
    config: MelConfig = field(default_factory=MelConfig)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or self.data.shape[1] != self.config.n_mels:
            raise ConfigError(f"mel data must be [frames, {self.config.n_mels}], got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("mel spectrogram contains non-finite values")

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def n_mels(self) -> int:
        return self.config.n_mels

    @property
    def hop(self) -> int:
        return self.config.hop


@dataclass
class F0Track:
    f0_hz: np.ndarray
    voiced: np.ndarray
    frame_rate: float

    def __post_init__(self):
        self.f0_hz = np.asarray(self.f0_hz, dtype=np.float64).reshape(-1)
        self.voiced = np.asarray(self.voiced, dtype=bool).reshape(-1)
        if self.f0_hz.shape != self.voiced.shape:
            raise ValueError("f0_hz and voiced must have the same length")
        if np.any((self.f0_hz > 0) != self.voiced):
            raise ValueError("f0 must be positive exactly on voiced frames")

    def __len__(self) -> int:
        return self.f0_hz.shape[0]


# ---------------------------------------------------------------------------
# Framing and spectra
# ---------------------------------------------------------------------------


def frame_signal(x: np.ndarray | Waveform, frame: int, hop: int, centered: bool = True) -> np.ndarray:
    """Slice a signal into overlapping frames, shape ``[n_frames, frame]``.

    Centered framing reflect-pads ``frame // 2`` samples on the left and the
    remainder on the right, giving ``1 + len // hop`` frames. Uncentered
    framing only keeps frames that fit entirely inside the signal.
    """
    if isinstance(x, Waveform):
        x = x.samples
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if not (frame >= hop > 0):
        raise ValueError(f"need frame >= hop > 0, got frame={frame}, hop={hop}")
    n = x.shape[0]
    if n == 0:
        return np.zeros((0, frame))
    if centered:
        left = frame // 2
        x = np.pad(x, (left, frame - left), mode="reflect" if n > 1 else "edge")
        n_frames = 1 + n // hop
    else:
        if n < frame:
            return np.zeros((0, frame))
        n_frames = 1 + (n - frame) // hop
    windows = np.lib.stride_tricks.sliding_window_view(x, frame)[::hop]
    return np.ascontiguousarray(windows[:n_frames])


def n_frames_for(n_samples: int, hop: int) -> int:
    return 0 if n_samples == 0 else 1 + n_samples // hop


@functools.lru_cache(maxsize=8)
def _hann(n: int) -> np.ndarray:
    # periodic Hann, the usual choice for overlap-add analysis/synthesis
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def stft(x: np.ndarray, n_fft: int, hop: int) -> np.ndarray:
    """Complex STFT, shape ``[n_frames, n_fft // 2 + 1]``."""
    frames = frame_signal(x, n_fft, hop, centered=True)
    return np.fft.rfft(frames * _hann(n_fft), axis=-1)


def istft(spec: np.ndarray, n_fft: int, hop: int, length: int | None = None) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft`."""
    n_frames = spec.shape[0]
    if n_frames == 0:
        return np.zeros(0 if length is None else length)
    window = _hann(n_fft)
    frames = np.fft.irfft(spec, n=n_fft, axis=-1) * window
    total = n_fft + hop * (n_frames - 1)
    out = np.zeros(total)
    norm = np.zeros(total)
    for i in range(n_frames):
        s = i * hop
        out[s : s + n_fft] += frames[i]
        norm[s : s + n_fft] += window**2
    out = out / np.where(norm > 1e-8, norm, 1.0)
    out = out[n_fft // 2 :]
    if length is None:
        length = hop * (n_frames - 1)
    if out.shape[0] < length:
        out = np.pad(out, (0, length - out.shape[0]))
    return out[:length]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@functools.lru_cache(maxsize=8)
def mel_filterbank(cfg: MelConfig) -> np.ndarray:
    """HTK-mel triangular filters (peak 1), shape ``[n_mels, n_fft // 2 + 1]``."""
    n_bins = cfg.n_fft // 2 + 1
    freqs = np.linspace(0.0, cfg.sample_rate / 2, n_bins)
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    lo, center, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None, :] - lo) / (center - lo)
    down = (hi - freqs[None, :]) / (hi - center)
    fb = np.maximum(0.0, np.minimum(up, down))
    fb.setflags(write=False)
    return fb


@functools.lru_cache(maxsize=8)
def _mel_pinv(cfg: MelConfig) -> np.ndarray:
    p = np.linalg.pinv(mel_filterbank(cfg))
    p.setflags(write=False)
    return p


def mel_band_of(freq_hz: float, cfg: MelConfig = MelConfig()) -> int:
    """Index of the filter with the largest response at ``freq_hz``."""
    fb = mel_filterbank(cfg)
    b = int(round(freq_hz * cfg.n_fft / cfg.sample_rate))
    return int(np.argmax(fb[:, b]))


def linear_to_logmel(mag: np.ndarray, cfg: MelConfig) -> np.ndarray:
    mel = mag @ mel_filterbank(cfg).T
    return np.log(np.maximum(mel, cfg.log_floor))


def mel_spectrogram(w: Waveform, cfg: MelConfig = MelConfig()) -> MelSpectrogram:
    """Log-mel magnitude spectrogram ``[frames, n_mels]`` of a waveform."""
    if w.sample_rate != cfg.sample_rate:
        raise ConfigError(f"waveform sample rate {w.sample_rate} Hz does not match mel config {cfg.sample_rate} Hz")
    if len(w) == 0:
        return MelSpectrogram(np.zeros((0, cfg.n_mels)), cfg)
    mag = np.abs(stft(w.samples, cfg.n_fft, cfg.hop))
    return MelSpectrogram(linear_to_logmel(mag, cfg), cfg)


# ---------------------------------------------------------------------------
# F0
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class F0Config:
    f_min: float = 60.0
    f_max: float = 400.0
    frame_rate: float = 25.0
    threshold: float = 0.2
    min_window: int = 320
    dip_tolerance: float = 0.02


def _difference_function(seg: np.ndarray, window: int, tau_max: int) -> np.ndarray:
    # d(tau) = sum_{j<W} (x_j - x_{j+tau})^2 for every row of seg, via FFT correlation
    n = seg.shape[1]
    size = 1 << int(np.ceil(np.log2(n + window)))
    head = seg[:, :window]
    corr = np.fft.irfft(np.fft.rfft(seg, size) * np.conj(np.fft.rfft(head, size)), size)[:, : tau_max + 1]
    sq = np.concatenate([np.zeros((seg.shape[0], 1)), np.cumsum(seg**2, axis=1)], axis=1)
    taus = np.arange(tau_max + 1)
    e0 = sq[:, window][:, None]
    e_tau = sq[:, taus + window] - sq[:, taus]
    return np.maximum(e0 + e_tau - 2.0 * corr, 0.0)


def estimate_f0(
    w: Waveform,
    f_min: float = 60.0,
    f_max: float = 400.0,
    frame_rate: float = 25.0,
    threshold: float = 0.2,
    min_window: int = 320,
    dip_tolerance: float = 0.02,
) -> F0Track:
    """YIN-style F0 track with an absolute-threshold voicing decision.

    Frame ``k`` analyses the segment centered at ``(k + 0.5) * hop`` with
    ``hop = sample_rate / frame_rate``, so there are ``len // hop`` frames and
    frame ``k`` describes the interval ``[k * hop, (k + 1) * hop)``.
    """
    sr = w.sample_rate
    if not (0 < f_min < f_max <= sr / 4):
        raise ConfigError(f"need 0 < f_min < f_max <= sample_rate/4, got {f_min}, {f_max}")
    hop = int(round(sr / frame_rate))
    n_frames = len(w) // hop
    if n_frames == 0:
        return F0Track(np.zeros(0), np.zeros(0, bool), frame_rate)

    tau_min = max(2, int(np.floor(sr / f_max)))
    tau_max = int(np.ceil(sr / f_min)) + 1
    window = max(min_window, tau_max)
    seg_len = window + tau_max
    x = np.pad(w.samples, (seg_len, seg_len))
    starts = (np.arange(n_frames) * hop + hop // 2 - seg_len // 2) + seg_len
    idx = starts[:, None] + np.arange(seg_len)[None, :]
    seg = x[idx]

    d = _difference_function(seg, window, tau_max)
    cum = np.cumsum(d[:, 1:], axis=1)
    taus = np.arange(1, tau_max + 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        cmnd = np.where(cum > 0, d[:, 1:] * taus / cum, 1.0)
    cmnd = np.concatenate([np.ones((n_frames, 1)), cmnd], axis=1)

    energy = np.sum(seg[:, :window] ** 2, axis=1) / window
    f0 = np.zeros(n_frames)
    for k in range(n_frames):
        if energy[k] < 1e-10:
            continue
        row = cmnd[k]
        inner = row[tau_min:tau_max]
        best = float(inner.min())
        if best >= threshold:
            continue
        # first dip close to the global minimum; a dip at a fraction of the
        # period (one dominant harmonic) is shallower and gets skipped
        accept = min(threshold, best + dip_tolerance)
        tau = tau_min + int(np.nonzero(inner <= accept)[0][0])
        while tau + 1 < tau_max and row[tau + 1] < row[tau]:
            tau += 1
        # parabolic refinement of the dip
        a, b, c = row[tau - 1], row[tau], row[tau + 1]
        denom = a - 2 * b + c
        shift = 0.5 * (a - c) / denom if abs(denom) > 1e-12 else 0.0
        freq = sr / (tau + float(np.clip(shift, -1.0, 1.0)))
        if f_min <= freq <= f_max:
            f0[k] = freq
    return F0Track(f0, f0 > 0, frame_rate)


# ---------------------------------------------------------------------------
# Griffin-Lim
# ---------------------------------------------------------------------------


def mel_to_linear(m: MelSpectrogram, nnls_iters: int = 50) -> np.ndarray:
    """Non-negative linear magnitudes whose mel projection approximates ``m``.

    Starts from the clipped pseudo-inverse and refines with multiplicative
    non-negative least-squares updates.
    """
    cfg = m.config
    fb = mel_filterbank(cfg)
    mel = np.exp(m.data)
    # entries sitting on the log floor carry no energy
    mel = np.where(m.data <= np.log(cfg.log_floor) + 1e-9, 0.0, mel)
    s = np.maximum(mel @ _mel_pinv(cfg).T, 0.0) + 1e-12
    numer = mel @ fb
    gram = fb.T @ fb
    for _ in range(nnls_iters):
        s *= numer / (s @ gram + 1e-12)
    return s


def spectral_convergence(x: np.ndarray, mag: np.ndarray, cfg: MelConfig) -> float:
    est = np.abs(stft(x, cfg.n_fft, cfg.hop))[: mag.shape[0]]
    denom = np.linalg.norm(mag)
    return float(np.linalg.norm(est - mag) / denom) if denom > 0 else float(np.linalg.norm(est))


def griffin_lim(
    m: MelSpectrogram,
    iters: int = 32,
    seed: int = 0,
    length: int | None = None,
    return_errors: bool = False,
    momentum: float = 0.99,
):
    """Invert a log-mel spectrogram to a waveform by Griffin-Lim phase retrieval.

    Uses the accelerated update (phase taken from ``S_k + momentum * (S_k -
    S_{k-1})``); ``momentum=0`` gives the classic algorithm. With ``iters=0``
    the result is the pseudo-inverse magnitude combined with the seeded random
    initial phase.
    """
    if iters < 0:
        raise ValueError("iters must be >= 0")
    cfg = m.config
    mag = mel_to_linear(m)
    if length is None:
        length = cfg.hop * max(m.n_frames - 1, 0)
    rng = numpy_rng(seed, "griffin_lim")
    phase = np.exp(2j * np.pi * rng.random(mag.shape))
    x = istft(mag * phase, cfg.n_fft, cfg.hop, length)
    errors = [spectral_convergence(x, mag, cfg)] if return_errors else None
    prev = None
    for _ in range(iters):
        spec = stft(x, cfg.n_fft, cfg.hop)[: mag.shape[0]]
        target = spec if prev is None else spec + momentum * (spec - prev)
        prev = spec
        phase = np.exp(1j * np.angle(target))
        x = istft(mag * phase, cfg.n_fft, cfg.hop, length)
        if return_errors:
            errors.append(spectral_convergence(x, mag, cfg))
    w = Waveform(np.clip(x, -1.0, 1.0), cfg.sample_rate)
    return (w, errors) if return_errors else w


# ---------------------------------------------------------------------------
# WAV I/O
# ---------------------------------------------------------------------------


def write_wav(w: Waveform, path: str | Path) -> None:
    """Write 16-bit PCM mono."""
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(int(w.sample_rate))
        fh.writeframes(pcm.tobytes())


def read_wav(path: str | Path) -> Waveform:
    """Read 16-bit PCM mono; anything else raises :class:`WavError`."""
    try:
        fh = wave.open(str(path), "rb")
    except (EOFError, wave.Error) as exc:
        raise WavError(f"{path}: truncated header ({exc})") from exc
    with fh:
        if fh.getnchannels() != 1:
            raise WavError(f"{path}: mono required, file has {fh.getnchannels()} channels")
        if fh.getsampwidth() != 2:
            raise WavError(f"{path}: unsupported bit depth {8 * fh.getsampwidth()} (PCM16 required)")
        n = fh.getnframes()
        raw = fh.readframes(n)
        sr = fh.getframerate()
    if len(raw) != 2 * n:
        raise WavError(f"{path}: truncated data, expected {n} samples, found {len(raw) // 2}")
    return Waveform(np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0, sr)
