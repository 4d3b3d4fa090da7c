"""Timbre encoder: frame encoder, 64 timbre tokens and a pooled speaker embedding."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

N_TIMBRE_TOKENS = 64


@dataclass
class TimbreConfig:
    n_mels: int = 80
    d_model: int = 128
    d_spk: int = 64
    dilations: tuple[int, ...] = (1, 2, 3)
    kernel: int = 3
    n_tokens: int = N_TIMBRE_TOKENS
    asp_hidden: int = 64
    asp_eps: float = 1e-6


class TDNNBlock(nn.Module):
    """Dilated conv + GELU + layer norm over channels, residual when shapes allow."""

    def __init__(self, c_in: int, c_out: int, kernel: int, dilation: int):
        super().__init__()
        self.conv = nn.Conv1d(c_in, c_out, kernel, dilation=dilation, padding=dilation * (kernel // 2))
        self.norm = nn.LayerNorm(c_out)
        self.residual = c_in == c_out

    def forward(self, x):  # [B, T, C]
        y = self.norm(F.gelu(self.conv(x.transpose(1, 2)).transpose(1, 2)))
        return x + y if self.residual else y


class TimbreFeatureEncoder(nn.Module):
    """TDNN stack; the outputs of every block are concatenated and projected (multilayer aggregation)."""

    def __init__(self, cfg: TimbreConfig):
        super().__init__()
        blocks = []
        c = cfg.n_mels
        for d in cfg.dilations:
            blocks.append(TDNNBlock(c, cfg.d_model, cfg.kernel, d))
            c = cfg.d_model
        self.blocks = nn.ModuleList(blocks)
        self.aggregate = nn.Linear(cfg.d_model * len(blocks), cfg.d_model)

    def forward(self, mel):  # [B, T, n_mels] -> [B, T, d_model]
        outs = []
        h = mel
        for blk in self.blocks:
            h = blk(h)
            outs.append(h)
        return self.aggregate(torch.cat(outs, dim=-1))


class TimbreTokenExtractor(nn.Module):
    """Single-head cross-attention from learned queries to the frame sequence."""

    def __init__(self, cfg: TimbreConfig):
        super().__init__()
        d = cfg.d_model
        self.queries = nn.Parameter(torch.randn(cfg.n_tokens, d) / math.sqrt(d))
        self.key = nn.Linear(d, d)
        self.value = nn.Linear(d, d)
        self.scale = 1.0 / math.sqrt(d)

    def forward(self, h, mask=None, return_weights: bool = False):
        """``h`` [B, T, d] -> tokens [B, n_tokens, d]. ``mask`` [B, T] marks valid frames."""
        if h.shape[1] == 0:
            raise ValueError("timbre token extraction needs a non-empty frame sequence")
        k = self.key(h)
        v = self.value(h)
        scores = torch.einsum("qd,btd->bqt", self.queries, k) * self.scale
        if mask is not None:
            scores = scores.masked_fill(~mask[:, None, :], float("-inf"))
        w = torch.softmax(scores, dim=-1)
        tokens = torch.einsum("bqt,btd->bqd", w, v)
        return (tokens, w) if return_weights else tokens


class AttentiveStatsPool(nn.Module):
    """Attention-weighted mean and standard deviation, projected and unit-normalized."""

    def __init__(self, cfg: TimbreConfig):
        super().__init__()
        self.score = nn.Sequential(nn.Linear(cfg.d_model, cfg.asp_hidden), nn.Tanh(), nn.Linear(cfg.asp_hidden, 1))
        self.proj = nn.Linear(2 * cfg.d_model, cfg.d_spk)
        self.eps = cfg.asp_eps

    def stats(self, h, mask=None):
        s = self.score(h).squeeze(-1)
        if mask is not None:
            s = s.masked_fill(~mask, float("-inf"))
        w = torch.softmax(s, dim=1)[..., None]
        mu = (w * h).sum(1)
        var = (w * h * h).sum(1) - mu * mu
        sigma = torch.sqrt(torch.clamp(var, min=self.eps))
        return mu, sigma, var

    def forward(self, h, mask=None):
        mu, sigma, _ = self.stats(h, mask)
        e = self.proj(torch.cat([mu, sigma], dim=-1))
        return F.normalize(e, dim=-1, eps=1e-12)


class TimbreEncoder(nn.Module):
    def __init__(self, cfg: TimbreConfig = TimbreConfig()):
        super().__init__()
        self.cfg = cfg
        self.features = TimbreFeatureEncoder(cfg)
        self.tokens = TimbreTokenExtractor(cfg)
        self.pool = AttentiveStatsPool(cfg)

    def forward(self, mel, mask=None):
        """Reference mel [B, T, n_mels] -> (timbre tokens [B, 64, d_model], speaker embedding [B, d_spk])."""
        if mel.shape[1] == 0:
            raise ValueError("timbre encoder needs a non-empty reference")
        h = self.features(mel)
        return self.tokens(h, mask), self.pool(h, mask)
