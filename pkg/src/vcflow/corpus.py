"""Synthetic multi-speaker corpus with full ground truth.

A speaker is a fixed cascade of three peaking filters at its formant
frequencies (the timbre) plus a pitch style: base pitch, range in semitones
and mixture weights over contour shapes. The weights blend the shapes into
one pitch gesture that the speaker makes on every vowel, spanning its range.
An utterance is a sequence of vowels separated by silence; each vowel is a
band-limited harmonic source at the gesture's F0 (plus a small random level
offset), shaped by two vowel resonators and then by the speaker's filters.
Content, pitch style and timbre are therefore independent knobs, and every
one of them is known exactly.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .dsp import F0Track, Waveform, read_wav, write_wav
from .rng import numpy_rng

CONTOUR_STYLES = ("flat", "rising", "falling", "oscillating")

# vowel symbol -> (F1, F2, B1, B2) in Hz: a geometric 5 x 5 grid over the
# vowel plane, keeping points with F2 > 1.4 F1 (22 vowels)
_F1 = np.geomspace(280.0, 800.0, 5)
_F2 = np.geomspace(750.0, 2300.0, 5)
VOWELS: dict[str, tuple[float, float, float, float]] = {
    f"v{i}{j}": (round(float(f1), 1), round(float(f2), 1), round(float(60.0 + 0.08 * f1), 1), round(float(80.0 + 0.04 * f2), 1))
    for i, f1 in enumerate(_F1)
    for j, f2 in enumerate(_F2)
    if f2 > 1.4 * f1
}
VOWEL_SYMBOLS = tuple(VOWELS)
SILENCE = "sil"

FORMANT_RANGES = ((350.0, 1000.0), (1100.0, 2300.0), (2500.0, 3800.0))
MIN_FORMANT_SEPARATION = 150.0
SPEAKER_GAIN_DB = 6.0
DURATION_RANGE = (2.5, 4.0)
# per-vowel random level offsets, as a fraction of the pitch range
OFFSET_SPREAD = 0.1


@dataclass
class SpeakerSpec:
    id: str
    base_pitch: float
    pitch_range: float  # semitones
    formants: tuple[float, float, float]
    bandwidths: tuple[float, float, float]
    contour_style: tuple[float, float, float, float]  # weights over CONTOUR_STYLES

    def __post_init__(self):
        self.formants = tuple(float(f) for f in self.formants)
        self.bandwidths = tuple(float(b) for b in self.bandwidths)
        self.contour_style = tuple(float(w) for w in self.contour_style)
        if not 80.0 <= self.base_pitch <= 400.0:
            raise ValueError(f"base_pitch {self.base_pitch} outside [80, 400] Hz")
        if not all(a < b for a, b in zip(self.formants, self.formants[1:])):
            raise ValueError(f"formants must ascend, got {self.formants}")
        if abs(sum(self.contour_style) - 1.0) > 1e-9:
            raise ValueError("contour_style weights must sum to 1")

    @classmethod
    def from_dict(cls, d: dict) -> "SpeakerSpec":
        return cls(**d)


@dataclass
class Segment:
    vowel: str
    duration: float
    gap_before: float
    offset: float  # semitones added to the speaker's vowel gesture


@dataclass
class UtteranceSpec:
    speaker: SpeakerSpec
    segments: list[Segment]
    tail: float
    seed: int

    @property
    def duration(self) -> float:
        return sum(s.gap_before + s.duration for s in self.segments) + self.tail

    def __post_init__(self):
        if any(s.duration <= 0 or s.gap_before < 0 for s in self.segments):
            raise ValueError("segment durations must be positive")


@dataclass
class Utterance:
    waveform: Waveform
    f0: np.ndarray  # per-sample Hz, 0 where unvoiced
    labels: np.ndarray  # per-sample vowel index, -1 for silence
    spec: UtteranceSpec | None = None

    def f0_track(self, frame_rate: float = 25.0) -> F0Track:
        """Ground-truth F0 sampled at the centre of each analysis interval."""
        hop = int(round(self.waveform.sample_rate / frame_rate))
        n = len(self.f0) // hop
        centers = np.arange(n) * hop + hop // 2
        f = self.f0[centers]
        return F0Track(f, f > 0, frame_rate)

    def frame_labels(self, hop: int = 256) -> np.ndarray:
        """Vowel index at each centered analysis frame (frame ``i`` at sample ``i * hop``)."""
        n = 1 + len(self.labels) // hop
        idx = np.minimum(np.arange(n) * hop, len(self.labels) - 1)
        return self.labels[idx]

    def frame_f0(self, hop: int = 256) -> np.ndarray:
        n = 1 + len(self.f0) // hop
        idx = np.minimum(np.arange(n) * hop, len(self.f0) - 1)
        return self.f0[idx]


# ---------------------------------------------------------------------------
# Speakers
# ---------------------------------------------------------------------------


def sample_speaker(seed: int, speaker_id: str | None = None, pitch_bounds=(100.0, 160.0)) -> SpeakerSpec:
    rng = numpy_rng(seed, "speaker")
    formants = [rng.uniform(lo, hi) for lo, hi in FORMANT_RANGES]
    bandwidths = [rng.uniform(250.0, 450.0) for _ in formants]
    weights = rng.dirichlet(np.ones(len(CONTOUR_STYLES)))
    weights = weights / weights.sum()
    return SpeakerSpec(
        id=speaker_id or f"spk{seed % 100000:05d}",
        base_pitch=float(rng.uniform(*pitch_bounds)),
        pitch_range=float(rng.uniform(1.0, 8.0)),
        formants=tuple(formants),
        bandwidths=tuple(bandwidths),
        contour_style=tuple(weights),
    )


def envelope_distance(a: SpeakerSpec, b: SpeakerSpec) -> float:
    """Largest formant-frequency difference between two speakers (Hz)."""
    return float(np.max(np.abs(np.subtract(a.formants, b.formants))))


def sample_speakers(n: int, seed: int, min_separation: float = MIN_FORMANT_SEPARATION) -> list[SpeakerSpec]:
    """``n`` speakers whose envelopes pairwise differ by at least ``min_separation`` Hz."""
    out: list[SpeakerSpec] = []
    attempt = 0
    while len(out) < n:
        if attempt > 1000 * (n + 1):
            raise RuntimeError(f"could not place {n} speakers {min_separation} Hz apart")
        cand = sample_speaker(seed * 100003 + attempt, speaker_id=f"spk{len(out):03d}")
        attempt += 1
        if all(envelope_distance(cand, s) >= min_separation for s in out):
            out.append(cand)
    return out


# ---------------------------------------------------------------------------
# Utterances
# ---------------------------------------------------------------------------


def sample_utterance_spec(speaker: SpeakerSpec, seed: int, duration_range=DURATION_RANGE) -> UtteranceSpec:
    rng = numpy_rng(seed, "utterance", speaker.id)
    target = rng.uniform(*duration_range)
    segments: list[Segment] = []
    elapsed = rng.uniform(0.04, 0.1)
    lead = elapsed
    tail = rng.uniform(0.04, 0.1)
    while True:
        dur = rng.uniform(0.16, 0.32)
        gap = 0.0 if not segments else rng.uniform(0.05, 0.12)
        if segments and elapsed + gap + dur + tail > target:
            break
        segments.append(
            Segment(
                vowel=VOWEL_SYMBOLS[rng.integers(len(VOWEL_SYMBOLS))],
                duration=float(dur),
                gap_before=float(lead if not segments else gap),
                offset=float(rng.uniform(-1.0, 1.0) * OFFSET_SPREAD * speaker.pitch_range),
            )
        )
        elapsed += gap + dur
    # stretch the tail so the total lands inside the requested range
    total = sum(s.gap_before + s.duration for s in segments)
    tail = max(tail, duration_range[0] - total + 1e-3)
    return UtteranceSpec(speaker, segments, float(tail), seed)


def _contour_shapes(u: np.ndarray) -> np.ndarray:
    """The CONTOUR_STYLES shapes at normalized times ``u`` in [0, 1], stacked ``[4, len(u)]``."""
    return np.stack([np.zeros_like(u), 2 * u - 1, 1 - 2 * u, np.sin(2 * np.pi * u)])


_GESTURE_GRID = np.linspace(0.0, 1.0, 1001)


def vowel_gesture(speaker: SpeakerSpec, u: np.ndarray) -> np.ndarray:
    """Speaker's pitch movement in semitones over a vowel at normalized times ``u``.

    The style weights blend the shapes; the blend is scaled to peak at half
    the pitch range, so it spans the whole range unless the style is purely
    flat.
    """
    w = np.asarray(speaker.contour_style)
    peak = np.max(np.abs(w @ _contour_shapes(_GESTURE_GRID)))
    if peak < 1e-9:
        return np.zeros_like(u)
    return (speaker.pitch_range / 2) * (w @ _contour_shapes(u)) / peak


def trimmed_std(v: np.ndarray, pct: float = 5.0) -> float:
    """Standard deviation of the values between the ``pct`` and ``100 - pct`` percentiles."""
    v = np.asarray(v, dtype=np.float64)
    if v.size < 2:
        return 0.0
    lo, hi = np.percentile(v, [pct, 100 - pct])
    return float(v[(v >= lo) & (v <= hi)].std())


def style_spread(speaker: SpeakerSpec) -> float:
    """Spread of the speaker's vowel gesture in natural-log F0 units.

    A single number summarizing range and contour mixture, on the same scale
    as the trimmed spread of an utterance's normalized log-F0.
    """
    return trimmed_std(vowel_gesture(speaker, _GESTURE_GRID) * np.log(2) / 12)


def _resonator(x: np.ndarray, freq: float, bw: float, sr: int) -> np.ndarray:
    # Klatt two-pole resonator with unit gain at DC
    c = -np.exp(-2 * np.pi * bw / sr)
    b = 2 * np.exp(-np.pi * bw / sr) * np.cos(2 * np.pi * freq / sr)
    a = 1.0 - b - c
    return lfilter([a], [1.0, -b, -c], x)


def _peaking(x: np.ndarray, freq: float, bw: float, sr: int, gain_db: float = SPEAKER_GAIN_DB) -> np.ndarray:
    # peaking EQ biquad: flat away from ``freq``, so its log response just adds
    a_lin = 10.0 ** (gain_db / 40.0)
    w0 = 2 * np.pi * freq / sr
    alpha = np.sin(w0) * np.sinh(np.log(2) / 2 * (bw / freq) * w0 / np.sin(w0))
    b = np.array([1 + alpha * a_lin, -2 * np.cos(w0), 1 - alpha * a_lin])
    a = np.array([1 + alpha / a_lin, -2 * np.cos(w0), 1 - alpha / a_lin])
    return lfilter(b / a[0], a / a[0], x)


def _harmonic_source(f0: np.ndarray, sr: int) -> np.ndarray:
    phase = 2 * np.pi * np.cumsum(f0) / sr
    f_lo = max(float(np.min(f0)), 40.0)
    n_harm = int(0.48 * sr / f_lo)
    out = np.zeros_like(f0)
    for k in range(1, n_harm + 1):
        alive = (k * f0) < 0.48 * sr
        out += alive * np.cos(k * phase) / k
    return out


def synth_utterance(spec: UtteranceSpec, sample_rate: int = 16000) -> Utterance:
    sr = sample_rate
    spk = spec.speaker
    total = int(round(spec.duration * sr))
    rng = numpy_rng(spec.seed, "synth", spk.id)
    wav = np.zeros(total)
    f0 = np.zeros(total)
    labels = -np.ones(total, dtype=np.int64)
    pos = 0
    for seg in spec.segments:
        pos += int(round(seg.gap_before * sr))
        n = int(round(seg.duration * sr))
        n = min(n, total - pos)
        st = vowel_gesture(spk, np.arange(n) / max(n - 1, 1)) + seg.offset
        f = spk.base_pitch * 2.0 ** (st / 12.0)
        src = _harmonic_source(f, sr) + 0.01 * rng.standard_normal(n)
        f1, f2, b1, b2 = VOWELS[seg.vowel]
        y = _resonator(_resonator(src, f1, b1, sr), f2, b2, sr)
        for freq, bw in zip(spk.formants, spk.bandwidths):
            y = _peaking(y, freq, bw, sr)
        ramp = min(int(0.015 * sr), n // 4)
        env = np.ones(n)
        if ramp > 0:
            r = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
            env[:ramp] = r
            env[-ramp:] = r[::-1]
        y = y * env
        y = y / (np.sqrt(np.mean(y**2)) + 1e-12)
        wav[pos : pos + n] = y
        f0[pos : pos + n] = f
        labels[pos : pos + n] = VOWEL_SYMBOLS.index(seg.vowel)
        pos += n
    peak = np.max(np.abs(wav))
    if peak > 0:
        wav *= 0.5 / peak
    return Utterance(Waveform(wav, sr), f0, labels, spec)


# ---------------------------------------------------------------------------
# Corpus on disk
# ---------------------------------------------------------------------------


def _split_speakers(speakers: list[SpeakerSpec], seed: int) -> dict[str, str]:
    order = sorted(speakers, key=lambda s: zlib.crc32(f"{seed}:{s.id}".encode()))
    n = len(order)
    n_test = max(1, int(round(0.1 * n))) if n >= 3 else 0
    n_dev = max(1, int(round(0.1 * n))) if n >= 3 else 0
    split = {}
    for i, s in enumerate(order):
        split[s.id] = "test" if i < n_test else "dev" if i < n_test + n_dev else "train"
    return split


@dataclass
class CorpusEntry:
    path: str
    speaker: str
    split: str
    seed: int


@dataclass
class Corpus:
    root: Path
    entries: list[CorpusEntry]
    speakers: dict[str, SpeakerSpec]
    seed: int = 0
    _cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def load(cls, root: str | Path) -> "Corpus":
        root = Path(root)
        meta = json.loads((root / "speakers.json").read_text())
        speakers = {d["id"]: SpeakerSpec.from_dict(d) for d in meta["speakers"]}
        seeds = meta["utterance_seeds"]
        entries = []
        for line in (root / "manifest.tsv").read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            path, spk, split = line.split("\t")
            entries.append(CorpusEntry(path, spk, split, int(seeds[path])))
        return cls(root, entries, speakers, int(meta["seed"]))

    def split(self, name: str) -> list[CorpusEntry]:
        return [e for e in self.entries if e.split == name]

    def speakers_in(self, split: str) -> list[str]:
        return sorted({e.speaker for e in self.entries if e.split == split})

    def by_speaker(self, split: str | None = None) -> dict[str, list[CorpusEntry]]:
        out: dict[str, list[CorpusEntry]] = {}
        for e in self.entries:
            if split is None or e.split == split:
                out.setdefault(e.speaker, []).append(e)
        return out

    def waveform(self, entry: CorpusEntry) -> Waveform:
        return read_wav(self.root / entry.path)

    def utterance(self, entry: CorpusEntry) -> Utterance:
        """Re-synthesize the utterance (bit-identical to the WAV before quantization)."""
        spec = sample_utterance_spec(self.speakers[entry.speaker], entry.seed)
        return synth_utterance(spec)


def build_corpus(n_speakers: int, n_utts_per_speaker: int, seed: int, out_dir: str | Path) -> Path:
    """Write WAVs, ground-truth sidecars, ``manifest.tsv`` and ``speakers.json``.

    Returns the manifest path. Splits are made at the speaker level so test
    speakers never appear in training.
    """
    out = Path(out_dir)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    speakers = sample_speakers(n_speakers, seed)
    split = _split_speakers(speakers, seed)
    lines = []
    seeds = {}
    for spk in speakers:
        for i in range(n_utts_per_speaker):
            useed = (seed * 1_000_003 + int(spk.id[3:]) * 1009 + i) & 0x7FFFFFFF
            utt = synth_utterance(sample_utterance_spec(spk, useed))
            rel = f"wav/{spk.id}_{i:03d}.wav"
            write_wav(utt.waveform, out / rel)
            with open(out / rel.replace(".wav", ".txt"), "w", encoding="utf-8") as fh:
                for f, lab in zip(utt.frame_f0(), utt.frame_labels()):
                    vowel = SILENCE if lab < 0 else VOWEL_SYMBOLS[lab]
                    fh.write(f"{f:.3f}\t{int(f > 0)}\t{vowel}\n")
            lines.append(f"{rel}\t{spk.id}\t{split[spk.id]}")
            seeds[rel] = useed
    manifest = out / "manifest.tsv"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    meta = {"seed": seed, "speakers": [asdict(s) for s in speakers], "utterance_seeds": seeds}
    (out / "speakers.json").write_text(json.dumps(meta, indent=1, sort_keys=True), encoding="utf-8")
    return manifest
