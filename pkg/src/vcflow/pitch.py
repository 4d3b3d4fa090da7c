"""Speaker-mean-normalized log-F0 and the pitch VQ-VAE tokenizer.

The normalized value of a voiced frame is ``log f - E[log f']`` where the
expectation runs over the speaker's voiced frames. A small conv VQ-VAE with an
EMA codebook turns the 25 Hz normalized track into discrete pitch tokens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .autodiff import Adam
from .dsp import F0Track, Waveform, estimate_f0
from .rng import numpy_rng, torch_generator

UNVOICED_VALUE = 0.0  # sentinel stored for unvoiced frames
CODEBOOK_SIZE = 64
CODE_DIM = 128
NULL_ID = CODEBOOK_SIZE  # conditioning-only ids past the codebook
UNVOICED_ID = CODEBOOK_SIZE + 1
PITCH_RATE = 25.0


class UndefinedSpeakerMean(ValueError):
    pass


class UntrainedModelError(RuntimeError):
    pass


@dataclass
class SmnF0Track:
    values: np.ndarray
    voiced: np.ndarray
    speaker_log_mean: float

    def __len__(self) -> int:
        return len(self.values)

    def model_input(self) -> np.ndarray:
        """``[T, 2]``: normalized value (0 when unvoiced) and the voicing flag."""
        v = np.where(self.voiced, self.values, 0.0)
        return np.stack([v, self.voiced.astype(np.float64)], axis=1)


@dataclass
class PitchTokenSeq:
    ids: np.ndarray  # codebook ids in [0, 63]
    voiced: np.ndarray
    rate: float = PITCH_RATE

    def __len__(self) -> int:
        return len(self.ids)

    def condition_ids(self) -> np.ndarray:
        """Ids for the decoder's embedding table: unvoiced steps map to ``UNVOICED_ID``."""
        return np.where(self.voiced, self.ids, UNVOICED_ID).astype(np.int64)

    def dump(self) -> str:
        return " ".join(f"{i}" if v else f"{i}U" for i, v in zip(self.ids, self.voiced))


def speaker_log_mean(tracks: Sequence[F0Track]) -> float:
    """Mean of ``log f`` over every voiced frame of the given tracks."""
    logs = [np.log(t.f0_hz[t.voiced]) for t in tracks]
    logs = np.concatenate(logs) if logs else np.zeros(0)
    if logs.size == 0:
        raise UndefinedSpeakerMean("undefined speaker mean: no voiced frames")
    return float(logs.mean())


def smn_logf0(track: F0Track, log_mean: float) -> SmnF0Track:
    if not np.isfinite(log_mean):
        raise UndefinedSpeakerMean("undefined speaker mean")
    values = np.full(len(track), UNVOICED_VALUE)
    v = track.voiced
    values[v] = np.log(track.f0_hz[v]) - log_mean
    return SmnF0Track(values, v.copy(), float(log_mean))


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


def _conv_stack(c_in: int, hidden: int, c_out: int, layers: int = 3, kernel: int = 5) -> nn.Sequential:
    mods: list[nn.Module] = []
    for i in range(layers):
        mods.append(nn.Conv1d(c_in if i == 0 else hidden, c_out if i == layers - 1 else hidden, kernel, padding=kernel // 2))
        if i < layers - 1:
            mods.append(nn.GELU())
    return nn.Sequential(*mods)


class EMAQuantizer(nn.Module):
    """Nearest-code quantizer whose codebook tracks EMA sufficient statistics."""

    def __init__(self, n_codes=CODEBOOK_SIZE, dim=CODE_DIM, decay=0.99, dead_after=200, min_count=1.0, eps=1e-5):
        super().__init__()
        self.decay = decay
        self.dead_after = dead_after
        self.min_count = min_count
        self.eps = eps
        self.register_buffer("codes", torch.zeros(n_codes, dim))
        self.register_buffer("ema_counts", torch.zeros(n_codes))
        self.register_buffer("ema_sums", torch.zeros(n_codes, dim))
        # assignments seen inside the current dead-code window, and window age
        self.register_buffer("window_counts", torch.zeros(n_codes))
        self.register_buffer("window_steps", torch.zeros((), dtype=torch.int64))
        self.register_buffer("usage", torch.zeros(n_codes))  # lifetime assignment counts
        self.register_buffer("initialized", torch.zeros((), dtype=torch.bool))

    @property
    def n_codes(self) -> int:
        return self.codes.shape[0]

    def nearest(self, z: torch.Tensor) -> torch.Tensor:
        """Index of the closest code (squared Euclidean; first index on ties)."""
        flat = z.reshape(-1, z.shape[-1])
        d = (flat[:, None, :] - self.codes[None, :, :]).pow(2).sum(-1)
        return torch.argmin(d, dim=1).reshape(z.shape[:-1])

    @torch.no_grad()
    def init_from(self, z: torch.Tensor, gen: torch.Generator) -> None:
        flat = z.reshape(-1, z.shape[-1])
        idx = torch.randint(0, flat.shape[0], (self.n_codes,), generator=gen)
        self.codes.copy_(flat[idx])
        self.ema_sums.copy_(self.codes)
        self.ema_counts.fill_(1.0)
        self.initialized.fill_(True)

    @torch.no_grad()
    def ema_update(self, z: torch.Tensor, ids: torch.Tensor, gen: torch.Generator | None = None) -> int:
        """One EMA step on flattened latents ``z`` with assignments ``ids``.

        Returns the number of restarted codes.
        """
        flat = z.reshape(-1, z.shape[-1])
        ids = ids.reshape(-1)
        onehot = F.one_hot(ids, self.n_codes).to(flat.dtype)
        counts = onehot.sum(0)
        sums = onehot.T @ flat
        g = self.decay
        self.ema_counts.mul_(g).add_((1 - g) * counts)
        self.ema_sums.mul_(g).add_((1 - g) * sums)
        live = self.ema_counts > self.eps
        self.codes[live] = self.ema_sums[live] / self.ema_counts[live, None]
        self.usage.add_(counts)
        self.window_counts.add_(counts)
        self.window_steps.add_(1)
        restarted = 0
        if self.dead_after and int(self.window_steps) >= self.dead_after:
            dead = torch.nonzero(self.window_counts < self.min_count).reshape(-1)
            if len(dead) and gen is not None:
                pick = torch.randint(0, flat.shape[0], (len(dead),), generator=gen)
                self.codes[dead] = flat[pick]
                self.ema_sums[dead] = flat[pick]
                self.ema_counts[dead] = 1.0
                restarted = len(dead)
            self.window_counts.zero_()
            self.window_steps.zero_()
        return restarted

    def forward(self, z: torch.Tensor, training: bool = False, gen: torch.Generator | None = None, mask=None):
        """Returns ``(ids, straight-through quantized latents, quantized)``.

        ``mask`` ([batch, time] bool) restricts EMA statistics to valid steps.
        """
        if training and not bool(self.initialized):
            sel = z.detach() if mask is None else z.detach()[mask]
            self.init_from(sel, gen)
        ids = self.nearest(z.detach())
        q = self.codes[ids]
        if training:
            if mask is None:
                self.ema_update(z.detach(), ids, gen)
            else:
                self.ema_update(z.detach()[mask], ids[mask], gen)
            q = self.codes[ids]
        st = z + (q - z).detach()
        return ids, st, q

    def usage_fraction(self, threshold: float = 1e-3) -> float:
        total = float(self.usage.sum())
        if total <= 0:
            return 0.0
        return float((self.usage / total > threshold).float().mean())


class PitchVQVAE(nn.Module):
    def __init__(self, hidden=128, code_dim=CODE_DIM, n_codes=CODEBOOK_SIZE, kernel=5, layers=3, decay=0.99, dead_after=200):
        super().__init__()
        self.encoder = _conv_stack(2, hidden, code_dim, layers, kernel)
        self.quantizer = EMAQuantizer(n_codes, code_dim, decay, dead_after)
        self.decoder = _conv_stack(code_dim, hidden, 2, layers, kernel)
        self.register_buffer("trained", torch.zeros((), dtype=torch.bool))

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """``x`` [batch, T, 2] -> latents [batch, T, code_dim]."""
        return self.encoder(x.transpose(1, 2)).transpose(1, 2)

    def decode(self, q: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Quantized latents -> (SMN reconstruction, voicing logits), each [batch, T]."""
        out = self.decoder(q.transpose(1, 2))
        return out[:, 0], out[:, 1]

    def forward(self, x, training=False, gen=None, mask=None):
        z = self.encode(x)
        ids, st, q = self.quantizer(z, training, gen, mask)
        recon, logits = self.decode(st)
        return {"latents": z, "ids": ids, "st": st, "quantized": q, "recon": recon, "voicing_logits": logits}


@dataclass(frozen=True)
class VQLossWeights:
    recon: float = 1.0
    commitment: float = 0.15
    vq: float = 0.05


def vqvae_loss(recon, voicing_logits, target, voiced, latents, quantized, weights=VQLossWeights(), ema=True, mask=None):
    """Weighted VQ-VAE objective; returns a dict with ``total`` and its terms.

    Reconstruction is the MSE over voiced steps plus voicing cross-entropy.
    The codebook (VQ) term only applies when the codebook is learned by
    gradient rather than EMA.
    """
    if recon.shape != target.shape or latents.shape != quantized.shape:
        raise ValueError(f"shape mismatch: recon {tuple(recon.shape)} vs target {tuple(target.shape)}")
    valid = torch.ones_like(target, dtype=torch.bool) if mask is None else mask
    vmask = (voiced & valid).to(recon.dtype)
    n_voiced = vmask.sum().clamp_min(1.0)
    mse = ((recon - target) ** 2 * vmask).sum() / n_voiced
    vf = valid.to(recon.dtype)
    ce = (F.binary_cross_entropy_with_logits(voicing_logits, voiced.to(recon.dtype), reduction="none") * vf).sum() / vf.sum()
    per_step = vf.sum() * latents.shape[-1]
    commit = (((latents - quantized.detach()) ** 2) * vf[..., None]).sum() / per_step
    if ema:
        vq = torch.zeros((), dtype=recon.dtype)
    else:
        vq = (((latents.detach() - quantized) ** 2) * vf[..., None]).sum() / per_step
    recon_term = mse + ce
    total = weights.recon * recon_term + weights.commitment * commit + weights.vq * vq
    return {"total": total, "recon": recon_term, "mse": mse, "voicing_ce": ce, "commitment": commit, "vq": vq}


# ---------------------------------------------------------------------------
# Training and tokenization
# ---------------------------------------------------------------------------


@dataclass
class PitchTrainConfig:
    steps: int = 1500
    batch_size: int = 16
    lr: float = 2e-3
    seed: int = 0


def _batch(tracks: Sequence[SmnF0Track], idx: np.ndarray):
    T = max(len(tracks[i]) for i in idx)
    x = np.zeros((len(idx), T, 2))
    mask = np.zeros((len(idx), T), bool)
    for b, i in enumerate(idx):
        n = len(tracks[i])
        x[b, :n] = tracks[i].model_input()
        mask[b, :n] = True
    x = torch.from_numpy(x).to(torch.get_default_dtype())
    return x, torch.from_numpy(mask)


def train_pitch_vqvae(
    tracks: Sequence[SmnF0Track],
    cfg: PitchTrainConfig = PitchTrainConfig(),
    model: PitchVQVAE | None = None,
    log=None,
    weights: VQLossWeights = VQLossWeights(),
) -> PitchVQVAE:
    tracks = [t for t in tracks if len(t) > 0]
    if not tracks:
        raise ValueError("no pitch tracks to train on")
    torch.manual_seed(cfg.seed)
    model = model or PitchVQVAE()
    opt = Adam(model, lr=cfg.lr, grad_clip=5.0)
    rng = numpy_rng(cfg.seed, "pitch_batches")
    gen = torch_generator(cfg.seed, "pitch_restart")
    for step in range(cfg.steps):
        idx = rng.integers(0, len(tracks), cfg.batch_size)
        x, mask = _batch(tracks, idx)
        out = model(x, training=True, gen=gen, mask=mask)
        losses = vqvae_loss(out["recon"], out["voicing_logits"], x[..., 0], x[..., 1] > 0.5, out["latents"], out["quantized"], weights, mask=mask)
        lr = cfg.lr * 0.5 * (1 + math.cos(math.pi * step / cfg.steps))
        opt.step(losses["total"], lr=lr)
        if log is not None and (step % 250 == 0 or step == cfg.steps - 1):
            log(f"pitch step {step} loss {losses['total'].item():.4f} mse {losses['mse'].item():.5f} usage {model.quantizer.usage_fraction():.2f}")
    model.trained.fill_(True)
    return model


@torch.no_grad()
def reconstruct(model: PitchVQVAE, smn: SmnF0Track) -> tuple[np.ndarray, np.ndarray]:
    x = torch.from_numpy(smn.model_input()[None]).to(next(model.parameters()).dtype)
    out = model(x)
    return out["recon"][0].double().numpy(), torch.sigmoid(out["voicing_logits"][0]).double().numpy()


@torch.no_grad()
def tokenize_track(model: PitchVQVAE, smn: SmnF0Track) -> PitchTokenSeq:
    if not bool(model.trained):
        raise UntrainedModelError("pitch VQ-VAE checkpoint is untrained; run train-pitch first")
    if len(smn) == 0:
        return PitchTokenSeq(np.zeros(0, np.int64), np.zeros(0, bool))
    x = torch.from_numpy(smn.model_input()[None]).to(next(model.parameters()).dtype)
    ids = model.quantizer.nearest(model.encode(x))[0].numpy().astype(np.int64)
    return PitchTokenSeq(ids, smn.voiced.copy())


def utterance_log_mean(track: F0Track) -> float:
    """Per-utterance stand-in for the speaker mean; falls back to 0 when nothing is voiced."""
    try:
        return speaker_log_mean([track])
    except UndefinedSpeakerMean:
        return 0.0


def tokenize_utterance(w: Waveform, log_mean: float | None, model: PitchVQVAE, f0_max: float = 300.0) -> PitchTokenSeq:
    """25 Hz pitch tokens of a waveform. ``log_mean=None`` uses the utterance's own voiced mean."""
    track = estimate_f0(w, f_max=f0_max, frame_rate=PITCH_RATE)
    if log_mean is None:
        log_mean = utterance_log_mean(track)
    return tokenize_track(model, smn_logf0(track, log_mean))
