"""Finite-difference gradient checks for every differentiable block.

Each case builds a tiny double-precision instance of a block, a fixed
random input and a scalar loss, then compares autograd against central
differences with :func:`vcflow.autodiff.gradcheck`.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import torch
import torch.nn as nn

from . import autodiff as ad
from .flow import ConformerBlock, FlowConfig, FlowModel, SemanticEncoder, VectorField, Attention, cfm_loss
from .pitch import PitchVQVAE
from .rng import torch_generator
from .timbre import AttentiveStatsPool, TimbreConfig, TimbreEncoder

DT = torch.float64


@dataclass
class CaseResult:
    name: str
    report: ad.GradcheckReport
    seconds: float

    @property
    def passed(self) -> bool:
        return self.report.passed


def _rand(gen, *shape):
    return torch.randn(*shape, generator=gen, dtype=DT)


def _weighted(out: torch.Tensor, gen) -> torch.Tensor:
    # a random projection makes every output entry matter
    return (out * _rand(gen, *out.shape)).sum()


def _params(module: nn.Module, prefix: str = ""):
    return {f"{prefix}{n}": p for n, p in module.named_parameters()}


def case_ops(gen):
    a = _rand(gen, 3, 4).requires_grad_()
    b = _rand(gen, 4, 5).requires_grad_()
    table = _rand(gen, 6, 3).requires_grad_()
    ids = torch.tensor([0, 3, 3, 5])
    w = _rand(gen, 3, 5)

    def fn():
        h = ad.gelu(ad.matmul(a, b))
        s = ad.softmax(h, dim=-1)
        e = ad.embedding_lookup(table, ids)
        c = ad.concat([s, ad.mul(e[:3], e[1:])], dim=-1)
        return (ad.mean(c * torch.cat([w, w[:, :3]], -1)) + ad.variance(h)).reshape(())

    return fn, {"matmul.a": a, "matmul.b": b, "embedding.table": table}


def case_conv(gen):
    conv = nn.Conv1d(3, 4, 5, padding=2, dilation=1).to(DT)
    x = _rand(gen, 2, 3, 9).requires_grad_()
    proj = _rand(gen, 2, 4, 9)

    def fn():
        return (ad.conv1d(x, conv.weight, conv.bias, padding=2) * proj).sum()

    return fn, {"conv.weight": conv.weight, "conv.bias": conv.bias, "conv.input": x}


def case_layer_norm(gen):
    x = _rand(gen, 4, 6).requires_grad_()
    g = (1 + 0.1 * _rand(gen, 6)).requires_grad_()
    b = _rand(gen, 6).requires_grad_()
    proj = _rand(gen, 4, 6)

    def fn():
        return (ad.layer_norm(x, g, b) * proj).sum()

    return fn, {"layer_norm.input": x, "layer_norm.weight": g, "layer_norm.bias": b}


def case_attention(gen):
    att = Attention(8, 2).to(DT)
    x = _rand(gen, 2, 5, 8)
    ctx = _rand(gen, 2, 7, 8)
    proj = _rand(gen, 2, 5, 8)

    def fn():
        return (att(x, ctx) * proj).sum() + (att(x) * proj).sum()

    return fn, _params(att, "attention.")


def case_conformer(gen):
    blk = ConformerBlock(8, 2, kernel=3).to(DT)
    x = _rand(gen, 2, 6, 8)
    timbre = _rand(gen, 2, 4, 8).requires_grad_()
    proj = _rand(gen, 2, 6, 8)

    def fn():
        return (blk(x, timbre) * proj).sum()

    return fn, {**_params(blk, "conformer."), "conformer.timbre_tokens": timbre}


def case_semantic_encoder(gen):
    enc = SemanticEncoder(n_tokens=5, d=8, n_blocks=1, n_heads=2, kernel=3).to(DT)
    ids = torch.randint(0, 5, (2, 6), generator=gen)
    timbre = _rand(gen, 2, 4, 8)
    proj = _rand(gen, 2, 6, 8)

    def fn():
        return (enc(ids, timbre) * proj).sum()

    return fn, _params(enc, "semantic.")


def case_timbre(gen):
    cfg = TimbreConfig(n_mels=6, d_model=8, d_spk=4, n_tokens=5, asp_hidden=4)
    enc = TimbreEncoder(cfg).to(DT)
    mel = _rand(gen, 2, 7, 6)
    pt = _rand(gen, 2, 5, 8)
    ps = _rand(gen, 2, 4)

    def fn():
        tokens, spk = enc(mel)
        return (tokens * pt).sum() + (spk * ps).sum()

    return fn, _params(enc, "timbre.")


def case_asp(gen):
    cfg = TimbreConfig(d_model=6, d_spk=4, asp_hidden=5)
    pool = AttentiveStatsPool(cfg).to(DT)
    h = _rand(gen, 2, 7, 6).requires_grad_()
    proj = _rand(gen, 2, 4)

    def fn():
        return (pool(h) * proj).sum()

    return fn, {**_params(pool, "asp."), "asp.input": h}


def case_vq_straight_through(gen):
    """The straight-through path: decoder(z + c) with the code offset ``c = q - z`` frozen.

    The forward of ``z + stopgrad(q - z)`` is piecewise constant in ``z``, so
    differences would only see the frozen offset form; its gradient is the
    one the estimator defines.
    """
    vq = PitchVQVAE(hidden=6, code_dim=4, n_codes=5, layers=2, kernel=3).to(DT)
    with torch.no_grad():
        vq.quantizer.codes.copy_(_rand(gen, 5, 4))
    x = _rand(gen, 2, 8, 2)
    with torch.no_grad():
        z0 = vq.encode(x)
        q0 = vq.quantizer.codes[vq.quantizer.nearest(z0)]
        offset = q0 - z0
    pr, pv = _rand(gen, 2, 8), _rand(gen, 2, 8)

    def fn():
        z = vq.encode(x)
        recon, logits = vq.decode(z + offset)
        return (recon * pr).sum() + (logits * pv).sum() + 0.15 * ((z - q0) ** 2).mean()

    return fn, _params(vq, "pitch_vqvae.")


def case_decoder(gen):
    field = VectorField(n_feats=3, cond_dim=4, hidden=8, n_blocks=2, n_heads=2, downsample=True).to(DT)
    x = _rand(gen, 2, 7, 3)
    cond = _rand(gen, 2, 7, 4)
    t = torch.tensor([0.3, 0.8], dtype=DT)
    proj = _rand(gen, 2, 7, 3)

    def fn():
        return (field(x, t, cond) * proj).sum()

    return fn, _params(field, "decoder.")


def case_cfm_loss(gen):
    cfg = FlowConfig(n_mels=3, n_semantic=5, d_model=4, d_spk=2, hidden=4, n_heads=1, n_semantic_blocks=1, n_decoder_blocks=2, conv_kernel=3)
    model = FlowModel(cfg).to(DT)
    model.timbre = TimbreEncoder(TimbreConfig(n_mels=3, d_model=4, d_spk=2, n_tokens=3, asp_hidden=2)).to(DT)
    T, P = 6, 2
    x1 = _rand(gen, 2, T, 3)
    sem = torch.randint(0, 5, (2, T), generator=gen)
    pitch = torch.randint(0, 66, (2, T), generator=gen)
    x0 = _rand(gen, 2, T, 3)
    t = torch.tensor([0.25, 0.7], dtype=DT)
    cfg_nodrop = FlowConfig(**{**cfg.__dict__, "cond_dropout_p": 0.0})

    def fn():
        b = model.conditions(sem, pitch, x1[:, :P], P)
        return cfm_loss(model.field, x1, cfg_nodrop, None, b.tensor(), None, P, x0=x0, t=t)

    return fn, _params(model, "cfm.")


CASES: dict[str, tuple[Callable, int]] = {
    # name -> (builder, entries sampled per parameter block)
    "ops": (case_ops, 48),
    "conv1d": (case_conv, 48),
    "layer_norm": (case_layer_norm, 48),
    "attention": (case_attention, 24),
    "conformer_block": (case_conformer, 12),
    "semantic_encoder": (case_semantic_encoder, 6),
    "timbre_encoder": (case_timbre, 12),
    "asp": (case_asp, 24),
    "vq_straight_through": (case_vq_straight_through, 24),
    "flow_decoder": (case_decoder, 8),
    "cfm_loss": (case_cfm_loss, 4),
}


def run_suite(rtol: float = 1e-4, seed: int = 0, names=None, log=None) -> list[CaseResult]:
    results = []
    for name, (build, entries) in CASES.items():
        if names and name not in names:
            continue
        gen = torch_generator(seed, "gradsuite", name)
        torch.manual_seed(seed)
        t0 = time.time()
        fn, params = build(gen)
        report = ad.gradcheck(fn, params, rtol=rtol, max_entries=entries, seed=seed)
        res = CaseResult(name, report, time.time() - t0)
        results.append(res)
        if log is not None:
            log(f"{'PASS' if res.passed else 'FAIL'} {name} ({len(report.blocks)} blocks, worst {max(b.max_rel_error for b in report.blocks):.2e}, {res.seconds:.1f}s)")
    return results
