"""Conditional flow matching decoder with prompt prefixing and masked pitch.

The data space is the normalized log-mel spectrogram. Conditions are the
semantic stream (content tokens encoded with timbre cross-attention), the
upsampled pitch-token stream and a global speaker embedding, concatenated
along channels. A prompt of target-speaker material is prepended: its mel
frames are known and clamped during sampling, and its pitch tokens give the
decoder the pitch style to continue into the NULL-masked source part.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .pitch import NULL_ID, PITCH_RATE, UNVOICED_ID, PitchTokenSeq
from .rng import numpy_rng
from .timbre import TimbreConfig, TimbreEncoder

MEL_RATE = 62.5
N_PITCH_IDS = UNVOICED_ID + 1


@dataclass
class FlowConfig:
    sigma_min: float = 1e-4
    ode_steps: int = 10
    cfg_scale: float = 1.0
    cond_dropout_p: float = 0.2
    mask_ratio_range: tuple[float, float] = (0.3, 0.7)
    mask_spans: tuple[int, int] = (1, 3)
    full_mask_p: float = 0.0  # chance a target crop's pitch is NULL throughout, as at conversion
    solver: str = "euler"
    n_mels: int = 80
    n_semantic: int = 64
    d_model: int = 128
    d_spk: int = 64
    hidden: int = 128
    n_heads: int = 2
    n_semantic_blocks: int = 2
    n_decoder_blocks: int = 4
    conv_kernel: int = 7
    downsample: bool = True
    use_pitch: bool = True
    use_timbre_tokens: bool = True

    def __post_init__(self):
        self.mask_ratio_range = tuple(float(v) for v in self.mask_ratio_range)
        self.mask_spans = tuple(int(v) for v in self.mask_spans)
        if not 0.0 <= self.sigma_min < 1.0:
            raise ValueError(f"sigma_min must lie in [0, 1), got {self.sigma_min}")
        if self.ode_steps < 1:
            raise ValueError(f"ode_steps must be >= 1, got {self.ode_steps}")
        lo, hi = self.mask_ratio_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError(f"mask_ratio_range must be a sub-interval of [0, 1], got {self.mask_ratio_range}")
        if not 1 <= self.mask_spans[0] <= self.mask_spans[1]:
            raise ValueError(f"mask_spans must satisfy 1 <= min <= max, got {self.mask_spans}")
        if not 0.0 <= self.cond_dropout_p <= 1.0:
            raise ValueError("cond_dropout_p must be a probability")
        if not 0.0 <= self.full_mask_p <= 1.0:
            raise ValueError("full_mask_p must be a probability")
        if self.solver not in ("euler", "midpoint"):
            raise ValueError(f"unknown solver {self.solver!r}")
        if self.n_decoder_blocks % 2:
            raise ValueError("n_decoder_blocks must be even (U-Net halves)")


# ---------------------------------------------------------------------------
# Flow math
# ---------------------------------------------------------------------------


def ot_flow(x0, x1, t, sigma_min: float = 1e-4):
    """phi_t = (1 - (1 - sigma_min) t) x0 + t x1; ``t`` broadcasts against the samples."""
    return (1 - (1 - sigma_min) * t) * x0 + t * x1


def ot_target(x0, x1, sigma_min: float = 1e-4):
    """d/dt phi_t, which does not depend on t."""
    return x1 - (1 - sigma_min) * x0


def cfg_combine(v_cond, v_uncond, alpha: float):
    if alpha == 0:
        return v_cond
    return (1 + alpha) * v_cond - alpha * v_uncond


# ---------------------------------------------------------------------------
# Pitch masking and alignment
# ---------------------------------------------------------------------------


def _compose(total: int, k: int, rng: np.random.Generator) -> list[int]:
    """Random split of ``total`` into ``k`` positive parts."""
    if k == 1:
        return [total]
    cuts = np.sort(rng.choice(np.arange(1, total), k - 1, replace=False))
    return list(np.diff(np.concatenate([[0], cuts, [total]])).astype(int))


def mask_pitch_spans(p, cfg: FlowConfig = FlowConfig(), seed: int = 0, rng: np.random.Generator | None = None):
    """Replace 1-3 contiguous spans (covering a fraction drawn from
    ``mask_ratio_range``) with ``NULL_ID``.

    ``p`` is a ``PitchTokenSeq`` or an array of conditioning ids. Returns
    ``(masked ids, mask)``.
    """
    ids = p.condition_ids() if isinstance(p, PitchTokenSeq) else np.asarray(p, dtype=np.int64)
    n = len(ids)
    if n < 1:
        raise ValueError("mask_pitch_spans needs at least one step")
    rng = rng if rng is not None else numpy_rng(seed, "pitch_mask")
    lo, hi = cfg.mask_ratio_range
    ratio = rng.uniform(lo, hi)
    k_lo, k_hi = math.ceil(lo * n - 1e-9), math.floor(hi * n + 1e-9)
    total = int(np.clip(round(ratio * n), k_lo, k_hi)) if k_lo <= k_hi else int(round(ratio * n))
    mask = np.zeros(n, bool)
    if total > 0:
        free = n - total
        k_max = min(cfg.mask_spans[1], total, free + 1)
        k = int(rng.integers(min(cfg.mask_spans[0], k_max), k_max + 1))
        spans = _compose(total, k, rng)
        # unmasked steps: k-1 mandatory separators, the rest spread over k+1 gaps
        extra = free - (k - 1)
        gaps = np.bincount(rng.integers(0, k + 1, extra), minlength=k + 1) if extra > 0 else np.zeros(k + 1, int)
        pos = int(gaps[0])
        for j, length in enumerate(spans):
            mask[pos : pos + length] = True
            pos += length + 1 + int(gaps[j + 1])
    out = ids.copy()
    out[mask] = NULL_ID
    return out, mask


def align_pitch_to_frames(pitch_ids: np.ndarray, n_frames: int, pitch_rate: float = PITCH_RATE, frame_rate: float = MEL_RATE) -> np.ndarray:
    """Nearest-neighbour repeat: frame ``i`` takes step ``floor(i * pitch_rate / frame_rate)``."""
    pitch_ids = np.asarray(pitch_ids, dtype=np.int64)
    if len(pitch_ids) == 0:
        return np.full(n_frames, NULL_ID, dtype=np.int64)
    j = np.floor(np.arange(n_frames) * pitch_rate / frame_rate + 1e-9).astype(np.int64)
    return pitch_ids[np.minimum(j, len(pitch_ids) - 1)]


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


def sinusoidal_embedding(t: torch.Tensor, dim: int, scale: float = 1000.0) -> torch.Tensor:
    """[B] times -> [B, dim] sin/cos features."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype) / max(half - 1, 1))
    arg = scale * t[:, None] * freqs[None]
    return torch.cat([torch.sin(arg), torch.cos(arg)], dim=-1)


def positional_encoding(n: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(n, dtype=dtype)
    return sinusoidal_embedding(pos, dim, scale=1.0)


class Attention(nn.Module):
    """Multi-head scaled dot-product attention (self or cross)."""

    def __init__(self, d: int, n_heads: int = 1, d_kv: int | None = None):
        super().__init__()
        if d % n_heads:
            raise ValueError(f"d_model {d} is not divisible by {n_heads} heads")
        d_kv = d_kv or d
        self.h = n_heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d_kv, d)
        self.v = nn.Linear(d_kv, d)
        self.o = nn.Linear(d, d)

    def forward(self, x, ctx=None, ctx_mask=None):
        ctx = x if ctx is None else ctx
        B, T, D = x.shape
        S = ctx.shape[1]
        dh = D // self.h
        q = self.q(x).view(B, T, self.h, dh).transpose(1, 2)
        k = self.k(ctx).view(B, S, self.h, dh).transpose(1, 2)
        v = self.v(ctx).view(B, S, self.h, dh).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
        if ctx_mask is not None:
            scores = scores.masked_fill(~ctx_mask[:, None, None, :], float("-inf"))
        w = torch.softmax(scores, dim=-1)
        return self.o((w @ v).transpose(1, 2).reshape(B, T, D))


class FeedForward(nn.Module):
    def __init__(self, d: int, mult: int = 2):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(d, mult * d), nn.GELU(), nn.Linear(mult * d, d))

    def forward(self, x):
        return self.net(x)


class ConvModule(nn.Module):
    """Pointwise -> GLU -> depthwise conv -> norm -> GELU -> pointwise."""

    def __init__(self, d: int, kernel: int = 7):
        super().__init__()
        self.pw1 = nn.Linear(d, 2 * d)
        self.dw = nn.Conv1d(d, d, kernel, padding=kernel // 2, groups=d)
        self.norm = nn.LayerNorm(d)
        self.pw2 = nn.Linear(d, d)

    def forward(self, x):
        y = F.glu(self.pw1(x), dim=-1)
        y = self.dw(y.transpose(1, 2)).transpose(1, 2)
        return self.pw2(F.gelu(self.norm(y)))


class ConformerBlock(nn.Module):
    """Self-attention -> cross-attention to timbre tokens -> conv -> feed-forward."""

    def __init__(self, d: int, n_heads: int = 2, kernel: int = 7, cross: bool = True):
        super().__init__()
        self.ln_sa = nn.LayerNorm(d)
        self.sa = Attention(d, n_heads)
        self.cross = cross
        if cross:
            self.ln_ca = nn.LayerNorm(d)
            self.ca = Attention(d, n_heads)
        self.ln_conv = nn.LayerNorm(d)
        self.conv = ConvModule(d, kernel)
        self.ln_ff = nn.LayerNorm(d)
        self.ff = FeedForward(d)
        self.ln_out = nn.LayerNorm(d)

    def forward(self, x, timbre=None):
        x = x + self.sa(self.ln_sa(x))
        if self.cross and timbre is not None:
            x = x + self.ca(self.ln_ca(x), timbre)
        x = x + self.conv(self.ln_conv(x))
        x = x + self.ff(self.ln_ff(x))
        return self.ln_out(x)


class SemanticEncoder(nn.Module):
    def __init__(self, n_tokens: int = 64, d: int = 128, n_blocks: int = 2, n_heads: int = 2, kernel: int = 7, cross: bool = True):
        super().__init__()
        self.d = d
        self.embed = nn.Embedding(n_tokens, d)
        self.blocks = nn.ModuleList([ConformerBlock(d, n_heads, kernel, cross) for _ in range(n_blocks)])

    def forward(self, ids: torch.Tensor, timbre: torch.Tensor | None = None) -> torch.Tensor:
        """``ids`` [B, T] -> [B, T, d]; ``timbre`` [B, 64, d] or None."""
        x = self.embed(ids) + positional_encoding(ids.shape[1], self.d, self.embed.weight.dtype)[None]
        for blk in self.blocks:
            x = blk(x, timbre)
        return x


class DecoderBlock(nn.Module):
    """Residual conv block with a time-embedding bias, then self-attention and feed-forward."""

    def __init__(self, d: int, d_time: int, n_heads: int = 2, kernel: int = 3):
        super().__init__()
        self.ln1 = nn.LayerNorm(d)
        self.conv1 = nn.Conv1d(d, d, kernel, padding=kernel // 2)
        self.time = nn.Linear(d_time, d)
        self.conv2 = nn.Conv1d(d, d, kernel, padding=kernel // 2)
        self.ln_att = nn.LayerNorm(d)
        self.att = Attention(d, n_heads)
        self.ln_ff = nn.LayerNorm(d)
        self.ff = FeedForward(d)

    def forward(self, h, temb):
        y = self.conv1(self.ln1(h).transpose(1, 2)).transpose(1, 2)
        y = F.gelu(y + self.time(temb)[:, None, :])
        h = h + self.conv2(y.transpose(1, 2)).transpose(1, 2)
        h = h + self.att(self.ln_att(h))
        return h + self.ff(self.ln_ff(h))


class VectorField(nn.Module):
    """U-Net style stack of conv-attention blocks over ``[x; cond]`` channels.

    The first half of the blocks runs on the way down, the second half on the
    way up with a skip connection from the mirrored down block. With
    ``downsample`` the inner blocks run at half the frame rate.
    """

    def __init__(self, n_feats: int = 80, cond_dim: int = 0, hidden: int = 128, n_blocks: int = 4, n_heads: int = 2, downsample: bool = True):
        super().__init__()
        if n_blocks % 2:
            raise ValueError("n_blocks must be even")
        self.n_feats = n_feats
        self.cond_dim = cond_dim
        self.downsample = downsample
        d_time = hidden
        self.time_mlp = nn.Sequential(nn.Linear(hidden, 2 * hidden), nn.GELU(), nn.Linear(2 * hidden, d_time))
        self.hidden = hidden
        self.inp = nn.Linear(n_feats + cond_dim, hidden)
        half = n_blocks // 2
        self.down = nn.ModuleList([DecoderBlock(hidden, d_time, n_heads) for _ in range(half)])
        self.up = nn.ModuleList([DecoderBlock(hidden, d_time, n_heads) for _ in range(half)])
        self.merge = nn.ModuleList([nn.Linear(2 * hidden, hidden) for _ in range(half)])
        self.ln_out = nn.LayerNorm(hidden)
        self.out = nn.Linear(hidden, n_feats)

    def forward(self, x: torch.Tensor, t: torch.Tensor, cond: torch.Tensor | None = None) -> torch.Tensor:
        """``x`` [B, T, F], ``t`` [B] or scalar, ``cond`` [B, T, C] -> velocity [B, T, F]."""
        B, T, _ = x.shape
        if cond is not None:
            if cond.shape[:2] != x.shape[:2]:
                raise ValueError(f"condition length {tuple(cond.shape[:2])} does not match x {tuple(x.shape[:2])}")
            x_in = torch.cat([x, cond], dim=-1)
        else:
            if self.cond_dim:
                raise ValueError("this vector field expects a condition")
            x_in = x
        t = torch.as_tensor(t, dtype=x.dtype).reshape(-1).expand(B)
        temb = self.time_mlp(sinusoidal_embedding(t, self.hidden))
        h = self.inp(x_in)
        skips = []
        for i, blk in enumerate(self.down):
            h = blk(h, temb)
            skips.append(h)
            if self.downsample and i == 0 and T > 1:
                h = F.avg_pool1d(h.transpose(1, 2), 2, ceil_mode=True).transpose(1, 2)
        for i, (blk, merge) in enumerate(zip(self.up, self.merge)):
            skip = skips[-1 - i]
            if self.downsample and i == len(self.up) - 1 and T > 1:
                h = h.repeat_interleave(2, dim=1)[:, :T]
            h = blk(merge(torch.cat([h, skip], dim=-1)), temb)
        return self.out(self.ln_out(h))


# ---------------------------------------------------------------------------
# Condition assembly
# ---------------------------------------------------------------------------


@dataclass
class ConditionBundle:
    semantic_emb: torch.Tensor  # [B, T, d_model]
    pitch_emb: torch.Tensor  # [B, T, d_model]
    speaker_emb: torch.Tensor  # [B, d_spk], broadcast over frames
    prompt_len: int = 0

    @property
    def length(self) -> int:
        return self.semantic_emb.shape[1]

    def __post_init__(self):
        if self.semantic_emb.shape[:2] != self.pitch_emb.shape[:2]:
            raise ValueError("semantic and pitch streams must share [B, T]")

    def tensor(self) -> torch.Tensor:
        T = self.length
        spk = self.speaker_emb[:, None, :].expand(-1, T, -1)
        return torch.cat([self.semantic_emb, self.pitch_emb, spk], dim=-1)


class FlowModel(nn.Module):
    """Timbre encoder, semantic encoder, pitch embedding, null condition and decoder."""

    def __init__(self, cfg: FlowConfig = FlowConfig()):
        super().__init__()
        self.cfg = cfg
        self.timbre = TimbreEncoder(TimbreConfig(n_mels=cfg.n_mels, d_model=cfg.d_model, d_spk=cfg.d_spk))
        self.semantic = SemanticEncoder(cfg.n_semantic, cfg.d_model, cfg.n_semantic_blocks, cfg.n_heads, cfg.conv_kernel, cross=cfg.use_timbre_tokens)
        self.pitch_embed = nn.Embedding(N_PITCH_IDS, cfg.d_model)
        self.null_semantic = nn.Parameter(torch.randn(cfg.d_model) * 0.02)
        cond_dim = 2 * cfg.d_model + cfg.d_spk
        self.decoder = VectorField(cfg.n_mels, cond_dim, cfg.hidden, cfg.n_decoder_blocks, cfg.n_heads, cfg.downsample)
        self.register_buffer("mel_mean", torch.zeros(cfg.n_mels))
        self.register_buffer("mel_std", torch.ones(cfg.n_mels))

    def normalize(self, mel: torch.Tensor) -> torch.Tensor:
        return (mel - self.mel_mean) / self.mel_std

    def denormalize(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.mel_std + self.mel_mean

    def _pitch(self, pitch_ids: torch.Tensor) -> torch.Tensor:
        if not self.cfg.use_pitch:
            pitch_ids = torch.full_like(pitch_ids, NULL_ID)
        return self.pitch_embed(pitch_ids)

    def conditions(self, sem_ids, pitch_ids, ref_mel, prompt_len: int = 0, ref_mask=None) -> ConditionBundle:
        """Token streams [B, T] and a normalized reference mel [B, Tr, n_mels] -> bundle."""
        tokens, spk = self.timbre(ref_mel, ref_mask)
        sem = self.semantic(sem_ids, tokens if self.cfg.use_timbre_tokens else None)
        return ConditionBundle(sem, self._pitch(pitch_ids), spk, prompt_len)

    def null_conditions(self, batch: int, length: int, prompt_len: int = 0) -> ConditionBundle:
        d = self.cfg.d_model
        sem = self.null_semantic.expand(batch, length, d)
        pitch = self.pitch_embed.weight[NULL_ID].expand(batch, length, d)
        spk = torch.zeros(batch, self.cfg.d_spk, dtype=sem.dtype)
        return ConditionBundle(sem, pitch, spk, prompt_len)

    def field(self, x, t, cond: torch.Tensor | None):
        return self.decoder(x, t, cond)


# ---------------------------------------------------------------------------
# Objective and sampling
# ---------------------------------------------------------------------------

FieldFn = Callable[[torch.Tensor, torch.Tensor, "torch.Tensor | None"], torch.Tensor]


def cfm_loss(
    field_fn: FieldFn,
    x1: torch.Tensor,
    cfg: FlowConfig = FlowConfig(),
    gen: torch.Generator | None = None,
    cond: torch.Tensor | None = None,
    null_cond: torch.Tensor | None = None,
    prompt_len: int = 0,
    x0: torch.Tensor | None = None,
    t: torch.Tensor | None = None,
) -> torch.Tensor:
    """OT-CFM regression loss on a batch ``x1`` [B, T, F].

    ``t`` ~ U[0, 1] and ``x0`` ~ N(0, I) per sample unless given. With
    probability ``cond_dropout_p`` a sample's condition is swapped for
    ``null_cond``. The first ``prompt_len`` frames are the known prompt: they
    enter the field clean and are excluded from the loss. Pitch masking is
    applied when batches are assembled, on the 25 Hz token streams.
    """
    B = x1.shape[0]
    if x0 is None:
        x0 = torch.randn(x1.shape, generator=gen, dtype=x1.dtype)
    if t is None:
        t = torch.rand(B, generator=gen, dtype=x1.dtype)
    tb = t.reshape(B, *([1] * (x1.dim() - 1)))
    xt = ot_flow(x0, x1, tb, cfg.sigma_min)
    u = ot_target(x0, x1, cfg.sigma_min)
    if prompt_len:
        xt = torch.cat([x1[:, :prompt_len], xt[:, prompt_len:]], dim=1)
    if cond is not None and null_cond is not None and cfg.cond_dropout_p > 0:
        drop = torch.rand(B, generator=gen) < cfg.cond_dropout_p
        cond = torch.where(drop.reshape(B, *([1] * (cond.dim() - 1))), null_cond, cond)
    v = field_fn(xt, t, cond)
    err = (v - u)[:, prompt_len:] ** 2
    return err.mean()


def sample_ode(
    field_fn: FieldFn,
    shape: tuple[int, ...],
    cfg: FlowConfig = FlowConfig(),
    gen: torch.Generator | None = None,
    cond: torch.Tensor | None = None,
    null_cond: torch.Tensor | None = None,
    prompt: torch.Tensor | None = None,
    x0: torch.Tensor | None = None,
    steps: int | None = None,
    solver: str | None = None,
    dtype=None,
) -> torch.Tensor:
    """Fixed-step integration of dx/dt = v from t=0 to 1.

    With ``null_cond`` and a nonzero ``cfg_scale`` every evaluation is
    ``cfg_combine(v(cond), v(null), alpha)``. ``prompt`` [B, P, F] is written
    over the first P frames at the start and after every step.
    """
    steps = cfg.ode_steps if steps is None else steps
    solver = solver or cfg.solver
    if steps < 1:
        raise ValueError("steps must be >= 1")
    dtype = dtype or (x0.dtype if x0 is not None else torch.get_default_dtype())
    x = torch.randn(shape, generator=gen, dtype=dtype) if x0 is None else x0.clone()
    P = 0 if prompt is None else prompt.shape[1]
    guided = null_cond is not None and cfg.cfg_scale != 0

    def clamp(z):
        if P:
            z = z.clone()
            z[:, :P] = prompt
        return z

    def velocity(z, tt):
        tv = torch.full((z.shape[0],), float(tt), dtype=z.dtype)
        if guided:
            v = field_fn(torch.cat([z, z]), torch.cat([tv, tv]), torch.cat([cond, null_cond]))
            vc, vu = v.chunk(2)
            return cfg_combine(vc, vu, cfg.cfg_scale)
        return field_fn(z, tv, cond)

    x = clamp(x)
    dt = 1.0 / steps
    for i in range(steps):
        t0 = i * dt
        if solver == "euler":
            x = x + dt * velocity(x, t0)
        elif solver == "midpoint":
            xm = clamp(x + 0.5 * dt * velocity(x, t0))
            x = x + dt * velocity(xm, t0 + 0.5 * dt)
        else:
            raise ValueError(f"unknown solver {solver!r}")
        x = clamp(x)
    return x
