"""Evaluation of voice conversion on unseen speakers.

Metrics:

* content_match_rate: frame agreement of content tokens between source and
  converted audio.
* envelope_classification_accuracy: nearest-centroid speaker classification
  of the converted audio's spectral envelope among the test speakers.
* pitch_style_correlation: Pearson r between the prompt speaker's style
  spread (its vowel gesture's spread, set by range and contour mixture) and
  the spread of the converted audio's normalized log-F0.
* codebook_usage: fraction of pitch codes holding more than 0.1% of the
  training assignments.

The envelope of an utterance is its mean log-mel residual after removing
the content-dependent part (per-token mean spectra fitted on the training
speakers) and the overall level. Residuals are whitened with the pooled
within-speaker covariance of the training speakers, so the classifier
weighs the directions in which speakers actually differ.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .content import KMeansModel, frame_features, tokenize
from .corpus import Corpus, CorpusEntry, style_spread, trimmed_std
from .dsp import MelConfig, Waveform, mel_spectrogram
from .pipeline import Models, convert, estimate_track, mel_config
from .pitch import smn_logf0, utterance_log_mean
from .rng import numpy_rng

ACTIVE_GATE = 0.1


class EvalError(ValueError):
    pass


def content_tokens(w: Waveform, kmeans: KMeansModel, mc: MelConfig = MelConfig()) -> np.ndarray:
    return tokenize(frame_features(w, mc), kmeans).ids


def content_match(source: Waveform, converted: Waveform, kmeans: KMeansModel, mc: MelConfig = MelConfig()) -> float:
    a = content_tokens(source, kmeans, mc)
    b = content_tokens(converted, kmeans, mc)
    n = min(len(a), len(b))
    if n == 0:
        return 0.0
    return float(np.mean(a[:n] == b[:n]))


def pitch_spread(w: Waveform, cfg) -> float:
    """Trimmed standard deviation of the utterance-normalized log-F0 over voiced frames.

    Trimming to the 5-95 percentile band keeps isolated octave errors of the
    F0 tracker on resynthesized audio from dominating the statistic.
    """
    track = estimate_track(w, cfg)
    smn = smn_logf0(track, utterance_log_mean(track))
    return trimmed_std(smn.values[smn.voiced])


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size < 2 or x.std() == 0 or y.std() == 0:
        return 0.0
    return float(np.clip(np.corrcoef(x, y)[0, 1], -1.0, 1.0))


@dataclass
class EnvelopeModel:
    token_means: np.ndarray  # [K, n_mels]
    whitener: np.ndarray  # [n_mels, n_mels]
    kmeans: KMeansModel
    mel: MelConfig
    centroids: dict[str, np.ndarray] = field(default_factory=dict)

    def residual(self, w: Waveform) -> np.ndarray:
        logmel = mel_spectrogram(w, self.mel).data
        tokens = content_tokens(w, self.kmeans, self.mel)
        energy = np.exp(logmel).sum(1)
        active = energy > ACTIVE_GATE * energy.max()
        r = (logmel[active] - self.token_means[tokens[active]]).mean(0)
        return (r - r.mean()) @ self.whitener

    def set_centroids(self, groups: dict[str, list[Waveform]]) -> None:
        self.centroids = {spk: np.mean([self.residual(w) for w in ws], axis=0) for spk, ws in sorted(groups.items())}

    def classify(self, w: Waveform) -> str:
        if not self.centroids:
            raise EvalError("envelope model has no speaker centroids")
        r = self.residual(w)
        names = list(self.centroids)
        d = [np.sum((r - self.centroids[s]) ** 2) for s in names]
        return names[int(np.argmin(d))]


def fit_envelope_model(groups: dict[str, list[Waveform]], kmeans: KMeansModel, mc: MelConfig = MelConfig(), shrinkage: float = 0.05) -> EnvelopeModel:
    """Per-token mean spectra and the within-speaker whitener from training speakers."""
    k = kmeans.k
    sums = np.zeros((k, mc.n_mels))
    counts = np.zeros(k)
    cache = []
    for spk, ws in sorted(groups.items()):
        for w in ws:
            logmel = mel_spectrogram(w, mc).data
            tokens = content_tokens(w, kmeans, mc)
            energy = np.exp(logmel).sum(1)
            active = energy > ACTIVE_GATE * energy.max()
            np.add.at(sums, tokens[active], logmel[active])
            counts += np.bincount(tokens[active], minlength=k)
            cache.append((spk, logmel, tokens, active))
    if counts.sum() == 0:
        raise EvalError("no active frames to fit the envelope model")
    glob = sums.sum(0) / counts.sum()
    means = np.where(counts[:, None] > 0, sums / np.maximum(counts, 1)[:, None], glob)
    per_spk: dict[str, list[np.ndarray]] = {}
    for spk, logmel, tokens, active in cache:
        r = (logmel[active] - means[tokens[active]]).mean(0)
        per_spk.setdefault(spk, []).append(r - r.mean())
    dev = [r - np.mean(rs, axis=0) for rs in per_spk.values() for r in rs]
    cov = np.cov(np.asarray(dev).T, bias=True) if len(dev) > 1 else np.eye(mc.n_mels)
    cov = cov + shrinkage * np.trace(cov) / mc.n_mels * np.eye(mc.n_mels) + 1e-12 * np.eye(mc.n_mels)
    vals, vecs = np.linalg.eigh(cov)
    whitener = vecs @ np.diag(vals**-0.5) @ vecs.T
    return EnvelopeModel(means, whitener, kmeans, mc)


@dataclass
class EvalReport:
    pitch_style_correlation: float
    content_match_rate: float
    envelope_classification_accuracy: float
    codebook_usage: float
    rows: list[dict] = field(default_factory=list)
    sweep: list[dict] = field(default_factory=list)

    def __post_init__(self):
        for name in ("content_match_rate", "envelope_classification_accuracy", "codebook_usage"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise EvalError(f"{name} = {v} outside [0, 1]")
        if not -1.0 <= self.pitch_style_correlation <= 1.0:
            raise EvalError("pitch_style_correlation outside [-1, 1]")

    def summary_line(self) -> str:
        return (
            f"SUMMARY r={self.pitch_style_correlation:.4f} content={self.content_match_rate:.4f} "
            f"envelope={self.envelope_classification_accuracy:.4f} usage={self.codebook_usage:.4f}"
        )

    def to_tsv(self) -> str:
        lines = []
        if self.rows:
            cols = list(self.rows[0])
            lines.append("\t".join(cols))
            for r in self.rows:
                lines.append("\t".join(_cell(r[c]) for c in cols))
        if self.sweep:
            lines.append("")
            cols = list(self.sweep[0])
            lines.append("\t".join(cols))
            for r in self.sweep:
                lines.append("\t".join(_cell(r[c]) for c in cols))
        lines.append(self.summary_line())
        return "\n".join(lines) + "\n"


def _cell(v) -> str:
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def conversion_pairs(corpus: Corpus, n_pairs: int, seed: int) -> list[tuple[CorpusEntry, CorpusEntry]]:
    """Source and prompt utterances from two different test speakers."""
    groups = corpus.by_speaker("test")
    if not groups:
        raise EvalError("empty test set: the corpus has no test speakers")
    if len(groups) < 2:
        raise EvalError("evaluation needs at least two test speakers")
    speakers = sorted(groups)
    rng = numpy_rng(seed, "eval_pairs")
    pairs = []
    for _ in range(n_pairs):
        a, b = rng.choice(len(speakers), 2, replace=False)
        src = groups[speakers[a]][int(rng.integers(len(groups[speakers[a]])))]
        pr = groups[speakers[b]][int(rng.integers(len(groups[speakers[b]])))]
        pairs.append((src, pr))
    return pairs


def parse_steps(text: str) -> list[int]:
    steps = sorted({int(s) for s in str(text).replace(" ", "").split(",") if s}, reverse=True)
    if not steps or min(steps) < 1:
        raise EvalError(f"bad sweep step list {text!r}")
    return steps


def evaluate(corpus: Corpus, models: Models, n_pairs: int | None = None, sweep: bool = True, seed: int | None = None, log=None) -> EvalReport:
    cfg = models.cfg
    seed = cfg.seed if seed is None else seed
    n_pairs = cfg["eval.n_pairs"] if n_pairs is None else n_pairs
    mc = mel_config(cfg)
    pairs = conversion_pairs(corpus, n_pairs, seed)
    train_groups = {spk: [corpus.waveform(e) for e in es] for spk, es in corpus.by_speaker("train").items()}
    env = fit_envelope_model(train_groups, models.kmeans, mc)
    env.set_centroids({spk: [corpus.waveform(e) for e in es] for spk, es in corpus.by_speaker("test").items()})

    rows = []
    for i, (src_e, pr_e) in enumerate(pairs):
        src, pr = corpus.waveform(src_e), corpus.waveform(pr_e)
        res = convert(src, pr, models, seed=seed * 1000 + i)
        pred = env.classify(res.waveform)
        spk = corpus.speakers[pr_e.speaker]
        rows.append(
            {
                "pair": i,
                "source": src_e.path,
                "prompt": pr_e.path,
                "source_speaker": src_e.speaker,
                "target_speaker": pr_e.speaker,
                "content_match": content_match(src, res.waveform, models.kmeans, mc),
                "prompt_pitch_range": float(spk.pitch_range),
                "prompt_style_spread": style_spread(spk),
                "converted_smn_std": pitch_spread(res.waveform, cfg),
                "predicted_speaker": pred,
                "envelope_correct": int(pred == pr_e.speaker),
                "sample_seconds": res.sample_seconds,
            }
        )
        if log is not None and (i % 10 == 0 or i == len(pairs) - 1):
            log(f"eval pair {i}: content {rows[-1]['content_match']:.3f} predicted {pred} target {pr_e.speaker}")

    r = pearson([x["prompt_style_spread"] for x in rows], [x["converted_smn_std"] for x in rows])
    content = float(np.mean([x["content_match"] for x in rows]))
    envelope = float(np.mean([x["envelope_correct"] for x in rows]))
    usage = models.pitch.quantizer.usage_fraction()
    report = EvalReport(r, content, envelope, usage, rows)
    if sweep:
        report.sweep = step_sweep(corpus, models, pairs[: cfg["eval.sweep_pairs"]], parse_steps(cfg["eval.sweep_steps"]), seed)
    return report


def step_sweep(corpus: Corpus, models: Models, pairs, steps: list[int], seed: int) -> list[dict]:
    """Rows in descending step order: ODE wall-clock and content match per setting."""
    mc = mel_config(models.cfg)
    out = []
    for s in sorted(steps, reverse=True):
        secs, match = 0.0, []
        for i, (src_e, pr_e) in enumerate(pairs):
            src = corpus.waveform(src_e)
            res = convert(src, corpus.waveform(pr_e), models, seed=seed * 1000 + i, steps=s)
            secs += res.sample_seconds
            match.append(content_match(src, res.waveform, models.kmeans, mc))
        out.append({"ode_steps": s, "wall_clock_s": secs, "content_match": float(np.mean(match)) if match else math.nan})
    return out
