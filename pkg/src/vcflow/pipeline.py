"""Training stages, artifact bookkeeping and voice conversion."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .autodiff import Adam
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import PipelineConfig
from .content import KMeansModel, frame_features, kmeans_fit, tokenize
from .corpus import Corpus, CorpusEntry, build_corpus
from .dsp import F0Track, MelConfig, MelSpectrogram, Waveform, estimate_f0, griffin_lim, mel_spectrogram
from .flow import FlowConfig, FlowModel, align_pitch_to_frames, mask_pitch_spans, sample_ode, cfm_loss
from .pitch import (
    NULL_ID,
    PitchTrainConfig,
    PitchVQVAE,
    VQLossWeights,
    smn_logf0,
    speaker_log_mean,
    tokenize_track,
    train_pitch_vqvae,
    utterance_log_mean,
)
from .rng import derive_seed, numpy_rng, torch_generator

Log = Callable[[str], None]

PITCH_CKPT = "pitch.ckpt"
CONTENT_CKPT = "content.ckpt"
CFM_CKPT = "cfm.ckpt"
FRAMES_PER_PITCH_PAIR = 5  # 5 mel frames span exactly 2 pitch steps
MIN_PROMPT_SECONDS = 0.5


class StageError(RuntimeError):
    pass


class InsufficientPrompt(ValueError):
    pass


def _quiet(_msg: str) -> None:
    pass


# ---------------------------------------------------------------------------
# Config adapters
# ---------------------------------------------------------------------------


def mel_config(cfg: PipelineConfig) -> MelConfig:
    return MelConfig(sample_rate=cfg["dsp.sample_rate"], n_fft=cfg["dsp.n_fft"], hop=cfg["dsp.hop"], n_mels=cfg["dsp.n_mels"])


def flow_config(cfg: PipelineConfig) -> FlowConfig:
    f = cfg.section("flow")
    return FlowConfig(
        sigma_min=f["sigma_min"],
        ode_steps=f["ode_steps"],
        cfg_scale=f["cfg_scale"],
        cond_dropout_p=f["cond_dropout_p"],
        mask_ratio_range=(f["mask_ratio_min"], f["mask_ratio_max"]),
        mask_spans=(f["mask_spans_min"], f["mask_spans_max"]),
        full_mask_p=f["full_mask_p"],
        solver=f["solver"],
        n_mels=cfg["dsp.n_mels"],
        n_semantic=cfg["content.k"],
        d_model=f["d_model"],
        d_spk=cfg["timbre.d_spk"],
        hidden=f["hidden"],
        n_heads=f["n_heads"],
        n_semantic_blocks=f["n_semantic_blocks"],
        n_decoder_blocks=f["n_decoder_blocks"],
        downsample=f["downsample"],
        use_pitch=f["use_pitch"],
        use_timbre_tokens=f["use_timbre_tokens"],
    )


def train_dtype(cfg: PipelineConfig) -> torch.dtype:
    p = cfg["train.precision"]
    if p not in ("float32", "float64"):
        raise ValueError(f"train.precision must be float32 or float64, got {p!r}")
    return torch.float32 if p == "float32" else torch.float64


def estimate_track(w: Waveform, cfg: PipelineConfig) -> F0Track:
    return estimate_f0(w, f_min=cfg["dsp.f0_min"], f_max=cfg["dsp.f0_max"], frame_rate=25.0)


# ---------------------------------------------------------------------------
# Run directory and artifacts
# ---------------------------------------------------------------------------


@dataclass
class RunDir:
    root: Path
    cfg: PipelineConfig

    @property
    def corpus_dir(self) -> Path:
        p = self.cfg["paths.corpus"]
        return Path(p) if p else self.root / "corpus"

    def path(self, name: str) -> Path:
        return self.root / name

    def log(self, msg: str) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        with open(self.root / "run.log", "a", encoding="utf-8") as fh:
            fh.write(msg.rstrip("\n") + "\n")

    def require(self, stage: str, artifact: str, producer: str) -> Path:
        p = self.corpus_dir / "manifest.tsv" if artifact == "corpus" else self.path(artifact)
        if not p.exists():
            raise StageError(f"stage {stage} requires artifact {artifact} ({p}); run `vcflow {producer}` first")
        return p

    def corpus(self, stage: str) -> Corpus:
        self.require(stage, "corpus", "make-corpus")
        return Corpus.load(self.corpus_dir)


def stage_make_corpus(run: RunDir, log: Log = _quiet) -> Path:
    cfg = run.cfg
    manifest = build_corpus(cfg["corpus.n_speakers"], cfg["corpus.n_utts"], cfg.seed, run.corpus_dir)
    log(f"corpus: {cfg['corpus.n_speakers']} speakers x {cfg['corpus.n_utts']} utterances -> {manifest}")
    return manifest


# ---------------------------------------------------------------------------
# Pitch stage
# ---------------------------------------------------------------------------


def speaker_tracks(corpus: Corpus, entries: list[CorpusEntry], cfg: PipelineConfig) -> dict[str, list[F0Track]]:
    out: dict[str, list[F0Track]] = {}
    for e in entries:
        out.setdefault(e.speaker, []).append(estimate_track(corpus.waveform(e), cfg))
    return out


def pitch_model_from_config(cfg: PipelineConfig) -> PitchVQVAE:
    return PitchVQVAE(hidden=cfg["pitch.hidden"], decay=cfg["pitch.ema_decay"], dead_after=cfg["pitch.dead_after"])


def train_pitch_stage(tracks: dict[str, list[F0Track]], cfg: PipelineConfig, log: Log = _quiet):
    """Train on per-speaker normalized tracks; returns (model, speaker means)."""
    means = {spk: speaker_log_mean(ts) for spk, ts in sorted(tracks.items())}
    smn = [smn_logf0(t, means[spk]) for spk, ts in sorted(tracks.items()) for t in ts]
    torch.manual_seed(derive_seed(cfg.seed, "pitch_init"))
    model = pitch_model_from_config(cfg)
    weights = VQLossWeights(cfg["pitch.w_recon"], cfg["pitch.w_commit"], cfg["pitch.w_vq"])
    pcfg = PitchTrainConfig(cfg["pitch.steps"], cfg["pitch.batch_size"], cfg["pitch.lr"], cfg.seed)
    model = train_pitch_vqvae(smn, pcfg, model=model, log=log, weights=weights)
    return model, means


def save_pitch(path: Path, model: PitchVQVAE, means: dict[str, float], cfg: PipelineConfig) -> None:
    ckpt = Checkpoint(config_hash=cfg.hash("pitch"))
    ckpt.add_module("pitch", model)
    for spk, m in means.items():
        ckpt.add(f"speaker_log_mean.{spk}", np.float64(m))
    save_checkpoint(ckpt, path)


def load_pitch(path: Path, cfg: PipelineConfig) -> tuple[PitchVQVAE, dict[str, float]]:
    ckpt = load_checkpoint(path, cfg.hash("pitch"))
    model = pitch_model_from_config(cfg)
    ckpt.load_module("pitch", model)
    means = {k: float(v) for k, v in ckpt.section("speaker_log_mean").items()}
    return model, means


def stage_train_pitch(run: RunDir, log: Log = _quiet) -> Path:
    corpus = run.corpus("train-pitch")
    tracks = speaker_tracks(corpus, corpus.split("train"), run.cfg)
    model, means = train_pitch_stage(tracks, run.cfg, log)
    out = run.path(PITCH_CKPT)
    save_pitch(out, model, means, run.cfg)
    log(f"pitch: codebook usage {model.quantizer.usage_fraction():.3f} -> {out}")
    return out


# ---------------------------------------------------------------------------
# Content stage
# ---------------------------------------------------------------------------


def fit_content_stage(waves: list[Waveform], cfg: PipelineConfig, log: Log = _quiet) -> KMeansModel:
    mc = mel_config(cfg)
    feats = np.concatenate([frame_features(w, mc) for w in waves])
    limit = cfg["content.max_frames"]
    if limit and feats.shape[0] > limit:
        idx = np.sort(numpy_rng(cfg.seed, "content_subsample").choice(feats.shape[0], limit, replace=False))
        feats = feats[idx]
    log(f"content: k-means over {feats.shape[0]} frames, k={cfg['content.k']}")
    return kmeans_fit(feats, cfg["content.k"], seed=cfg.seed, max_iter=cfg["content.max_iter"], tol=cfg["content.tol"])


def save_content(path: Path, model: KMeansModel, cfg: PipelineConfig) -> None:
    ckpt = Checkpoint(config_hash=cfg.hash("content"))
    ckpt.add("content.centroids", model.centroids)
    ckpt.add("content.fit_seed", np.int64(model.fit_seed))
    save_checkpoint(ckpt, path)


def load_content(path: Path, cfg: PipelineConfig) -> KMeansModel:
    ckpt = load_checkpoint(path, cfg.hash("content"))
    return KMeansModel(ckpt["content.centroids"], int(ckpt["content.fit_seed"]))


def stage_fit_content(run: RunDir, log: Log = _quiet) -> Path:
    corpus = run.corpus("fit-content")
    model = fit_content_stage([corpus.waveform(e) for e in corpus.split("train")], run.cfg, log)
    out = run.path(CONTENT_CKPT)
    save_content(out, model, run.cfg)
    return out


# ---------------------------------------------------------------------------
# Flow stage
# ---------------------------------------------------------------------------


@dataclass
class UttFeatures:
    speaker: str
    mel: np.ndarray  # [T, n_mels] raw log-mel
    semantic: np.ndarray  # [T]
    pitch: np.ndarray  # [T25] conditioning ids


def utterance_features(w: Waveform, kmeans: KMeansModel, pitch_model: PitchVQVAE, log_mean: float | None, cfg: PipelineConfig, speaker: str = "") -> UttFeatures:
    mc = mel_config(cfg)
    mel = mel_spectrogram(w, mc).data
    sem = tokenize(frame_features(w, mc), kmeans).ids
    track = estimate_track(w, cfg)
    if log_mean is None:
        log_mean = utterance_log_mean(track)
    pitch = tokenize_track(pitch_model, smn_logf0(track, log_mean)).condition_ids()
    return UttFeatures(speaker, mel, sem, pitch)


def _crop(u: UttFeatures, start: int, length: int, rng=None, fcfg: FlowConfig | None = None):
    """Frame crop starting on a pitch-pair boundary; optionally masks its pitch."""
    p0 = start * 2 // FRAMES_PER_PITCH_PAIR
    p1 = (start + length) * 2 // FRAMES_PER_PITCH_PAIR
    pitch = u.pitch[p0:p1]
    if len(pitch) == 0:
        pitch = u.pitch[-1:]
    if rng is not None:
        if rng.random() < fcfg.full_mask_p:
            pitch = np.full(len(pitch), NULL_ID, dtype=np.int64)
        else:
            pitch, _ = mask_pitch_spans(pitch, fcfg, rng=rng)
    return u.mel[start : start + length], u.semantic[start : start + length], align_pitch_to_frames(pitch, length)


def _random_start(rng, n: int, length: int) -> int:
    slots = (n - length) // FRAMES_PER_PITCH_PAIR
    return FRAMES_PER_PITCH_PAIR * int(rng.integers(0, slots + 1))


def make_batch(data: dict[str, list[UttFeatures]], speakers: list[str], cfg: PipelineConfig, fcfg: FlowConfig, rng: np.random.Generator):
    """Prompt prefix from one utterance, target crop from another of the same speaker."""
    t = cfg.section("train")
    q = FRAMES_PER_PITCH_PAIR
    min_len = min(len(u.mel) for us in data.values() for u in us)
    P = q * int(rng.integers(t["prompt_min"] // q, t["prompt_max"] // q + 1))
    L = q * int(rng.integers(t["target_min"] // q, t["target_max"] // q + 1))
    P = min(P, q * (min_len // q))
    L = min(L, q * (min_len // q))
    B = max(2, int(round(t["batch_frames"] / (P + L))))
    mels, sems, pitches = [], [], []
    for _ in range(B):
        spk = speakers[int(rng.integers(len(speakers)))]
        utts = data[spk]
        a, b = rng.choice(len(utts), 2, replace=False)
        tgt, pr = utts[a], utts[b]
        pm, ps, pp = _crop(pr, _random_start(rng, len(pr.mel), P), P)
        tm, ts, tp = _crop(tgt, _random_start(rng, len(tgt.mel), L), L, rng, fcfg)
        mels.append(np.concatenate([pm, tm]))
        sems.append(np.concatenate([ps, ts]))
        pitches.append(np.concatenate([pp, tp]))
    return np.stack(mels), np.stack(sems), np.stack(pitches), P


def mel_statistics(data: dict[str, list[UttFeatures]]) -> tuple[np.ndarray, np.ndarray]:
    allm = np.concatenate([u.mel for us in data.values() for u in us])
    return allm.mean(0), allm.std(0) + 1e-3


def new_flow_model(cfg: PipelineConfig) -> FlowModel:
    torch.manual_seed(derive_seed(cfg.seed, "cfm_init"))
    return FlowModel(flow_config(cfg)).to(train_dtype(cfg))


def train_flow(data: dict[str, list[UttFeatures]], cfg: PipelineConfig, log: Log = _quiet) -> FlowModel:
    torch.use_deterministic_algorithms(True)
    dtype = train_dtype(cfg)
    fcfg = flow_config(cfg)
    speakers = sorted(s for s, us in data.items() if len(us) >= 2)
    if not speakers:
        raise ValueError("flow training needs speakers with at least two utterances")
    model = new_flow_model(cfg)
    mean, std = mel_statistics(data)
    model.mel_mean.copy_(torch.from_numpy(mean))
    model.mel_std.copy_(torch.from_numpy(std))
    t = cfg.section("train")
    opt = Adam(model, lr=t["lr"], grad_clip=t["grad_clip"])
    rng = numpy_rng(cfg.seed, "cfm_batches")
    gen = torch_generator(cfg.seed, "cfm_noise")
    steps = t["steps"]
    started = time.time()
    running = []
    for step in range(steps):
        mel, sem, pitch, P = make_batch(data, speakers, cfg, fcfg, rng)
        x1 = model.normalize(torch.from_numpy(mel).to(dtype))
        sem_t = torch.from_numpy(sem)
        pitch_t = torch.from_numpy(pitch)
        bundle = model.conditions(sem_t, pitch_t, x1[:, :P], P)
        null = model.null_conditions(x1.shape[0], x1.shape[1], P)
        loss = cfm_loss(model.field, x1, fcfg, gen, bundle.tensor(), null.tensor(), P)
        warm = min(1.0, (step + 1) / max(1, t["warmup"]))
        lr = t["lr"] * warm * 0.5 * (1 + math.cos(math.pi * step / steps))
        opt.step(loss, lr=lr)
        running.append(loss.item())
        if step % 250 == 0 or step == steps - 1:
            log(f"cfm step {step} loss {np.mean(running):.4f} ({time.time() - started:.0f}s)")
            running = []
    return model


def save_flow(path: Path, model: FlowModel, cfg: PipelineConfig) -> None:
    ckpt = Checkpoint(config_hash=cfg.hash("cfm"))
    ckpt.add_module("flow", model)
    save_checkpoint(ckpt, path)


def load_flow(path: Path, cfg: PipelineConfig) -> FlowModel:
    ckpt = load_checkpoint(path, cfg.hash("cfm"))
    model = FlowModel(flow_config(cfg)).to(train_dtype(cfg))
    ckpt.load_module("flow", model)
    return model


def flow_training_data(corpus: Corpus, kmeans: KMeansModel, pitch_model: PitchVQVAE, means: dict[str, float], cfg: PipelineConfig) -> dict[str, list[UttFeatures]]:
    data: dict[str, list[UttFeatures]] = {}
    for e in corpus.split("train"):
        if e.speaker not in means:
            raise CheckpointError(f"pitch checkpoint has no speaker mean for {e.speaker}; retrain the pitch stage")
        u = utterance_features(corpus.waveform(e), kmeans, pitch_model, means[e.speaker], cfg, e.speaker)
        data.setdefault(e.speaker, []).append(u)
    return data


def stage_train_cfm(run: RunDir, log: Log = _quiet) -> Path:
    corpus = run.corpus("train-cfm")
    pitch_path = run.require("train-cfm", PITCH_CKPT, "train-pitch")
    content_path = run.require("train-cfm", CONTENT_CKPT, "fit-content")
    pitch_model, means = load_pitch(pitch_path, run.cfg)
    kmeans = load_content(content_path, run.cfg)
    data = flow_training_data(corpus, kmeans, pitch_model, means, run.cfg)
    log(f"cfm: {sum(len(v) for v in data.values())} utterances from {len(data)} speakers")
    model = train_flow(data, run.cfg, log)
    out = run.path(CFM_CKPT)
    save_flow(out, model, run.cfg)
    return out


# ---------------------------------------------------------------------------
# Conversion
# ---------------------------------------------------------------------------


@dataclass
class Models:
    pitch: PitchVQVAE
    kmeans: KMeansModel
    flow: FlowModel
    cfg: PipelineConfig


def load_models(run: RunDir, stage: str = "convert") -> Models:
    pitch_model, _ = load_pitch(run.require(stage, PITCH_CKPT, "train-pitch"), run.cfg)
    kmeans = load_content(run.require(stage, CONTENT_CKPT, "fit-content"), run.cfg)
    flow = load_flow(run.require(stage, CFM_CKPT, "train-cfm"), run.cfg)
    return Models(pitch_model, kmeans, flow, run.cfg)


@dataclass
class ConversionResult:
    waveform: Waveform
    mel: np.ndarray  # generated source-part log-mel
    sample_seconds: float  # wall-clock spent integrating the ODE


@torch.no_grad()
def convert(source: Waveform, prompt: Waveform, models: Models, seed: int = 0, steps: int | None = None) -> ConversionResult:
    """Re-speak ``source`` in the voice and pitch style of ``prompt``.

    The prompt is cut to the longest prefix seen in training. Its streams
    are prepended to the source's; source pitch is all NULL and the output
    has exactly the source's frame count and sample length.
    """
    cfg = models.cfg
    if prompt.duration < MIN_PROMPT_SECONDS:
        raise InsufficientPrompt(f"insufficient prompt: {prompt.duration:.2f} s < {MIN_PROMPT_SECONDS} s")
    mc = mel_config(cfg)
    max_prompt = cfg["train.prompt_max"] * mc.hop
    if len(prompt) > max_prompt:
        prompt = Waveform(prompt.samples[:max_prompt], prompt.sample_rate)
    flow = models.flow
    fcfg = flow_config(cfg)
    dtype = flow.mel_mean.dtype
    pr = utterance_features(prompt, models.kmeans, models.pitch, None, cfg)
    src_mel = mel_spectrogram(source, mc).data
    src_sem = tokenize(frame_features(source, mc), models.kmeans).ids
    P, S = len(pr.mel), len(src_mel)
    sem = np.concatenate([pr.semantic, src_sem])[None]
    pitch = np.concatenate([align_pitch_to_frames(pr.pitch, P), np.full(S, NULL_ID)])[None]
    x_prompt = flow.normalize(torch.from_numpy(pr.mel).to(dtype))[None]
    bundle = flow.conditions(torch.from_numpy(sem), torch.from_numpy(pitch), x_prompt, P)
    null = flow.null_conditions(1, P + S, P)
    gen = torch_generator(seed, "convert_noise")
    t0 = time.perf_counter()
    x = sample_ode(flow.field, (1, P + S, fcfg.n_mels), fcfg, gen, bundle.tensor(), null.tensor(), x_prompt, steps=steps, dtype=dtype)
    elapsed = time.perf_counter() - t0
    mel = flow.denormalize(x[0, P:]).double().numpy()
    mel = np.maximum(mel, np.log(mc.log_floor))
    wav = griffin_lim(MelSpectrogram(mel, mc), iters=cfg["dsp.gl_iters"], seed=seed, length=len(source), momentum=cfg["dsp.gl_momentum"])
    return ConversionResult(wav, mel, elapsed)
