import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from vcflow.timbre import AttentiveStatsPool, TimbreConfig, TimbreEncoder, TimbreTokenExtractor

torch.set_default_dtype(torch.float32)


def small_cfg(**kw):
    base = dict(n_mels=10, d_model=16, d_spk=8, n_tokens=64, asp_hidden=8)
    base.update(kw)
    return TimbreConfig(**base)


class TestEncoder:
    def test_shapes(self):
        torch.manual_seed(0)
        enc = TimbreEncoder(small_cfg())
        tokens, spk = enc(torch.randn(3, 25, 10))
        assert tokens.shape == (3, 64, 16)
        assert spk.shape == (3, 8)

    def test_default_sizes(self):
        tokens, spk = TimbreEncoder()(torch.randn(1, 12, 80))
        assert tokens.shape == (1, 64, 128) and spk.shape == (1, 64)

    def test_unit_norm(self):
        torch.manual_seed(1)
        _, spk = TimbreEncoder(small_cfg())(torch.randn(4, 30, 10) * 5)
        assert torch.allclose(spk.norm(dim=-1), torch.ones(4), atol=1e-5)

    def test_sensitive_to_band_permutation(self):
        torch.manual_seed(2)
        enc = TimbreEncoder(small_cfg())
        mel = torch.randn(1, 20, 10)
        _, a = enc(mel)
        _, b = enc(mel[..., torch.randperm(10, generator=torch.Generator().manual_seed(0))])
        assert (a - b).abs().max() > 1e-3

    def test_batch_independent(self):
        torch.manual_seed(3)
        enc = TimbreEncoder(small_cfg())
        mel = torch.randn(2, 15, 10)
        t2, s2 = enc(mel)
        t1, s1 = enc(mel[1:])
        assert torch.allclose(t2[1:], t1, atol=1e-5) and torch.allclose(s2[1:], s1, atol=1e-5)

    def test_empty_sequence(self):
        with pytest.raises(ValueError, match="non-empty"):
            TimbreEncoder(small_cfg())(torch.zeros(1, 0, 10))


class TestTokens:
    def test_constant_sequence_gives_identical_tokens(self):
        torch.manual_seed(4)
        ext = TimbreTokenExtractor(small_cfg())
        h = torch.randn(1, 1, 16).expand(1, 9, 16)
        tokens = ext(h)
        assert torch.allclose(tokens, ext.value(h[:, :1]).expand(1, 64, 16), atol=1e-5)

    @given(seed=st.integers(0, 1000), T=st.integers(1, 40))
    @settings(max_examples=25, deadline=None)
    def test_weights_are_distributions(self, seed, T):
        torch.manual_seed(seed)
        ext = TimbreTokenExtractor(small_cfg())
        _, w = ext(torch.randn(2, T, 16) * 3, return_weights=True)
        assert w.shape == (2, 64, T)
        assert torch.all(w >= 0)
        assert torch.allclose(w.sum(-1), torch.ones(2, 64), atol=1e-5)

    def test_mask_excludes_frames(self):
        torch.manual_seed(5)
        ext = TimbreTokenExtractor(small_cfg())
        h = torch.randn(1, 8, 16)
        mask = torch.tensor([[True] * 5 + [False] * 3])
        assert torch.allclose(ext(h, mask), ext(h[:, :5]), atol=1e-6)


class TestPooling:
    @given(seed=st.integers(0, 1000))
    @settings(max_examples=25, deadline=None)
    def test_permutation_invariant(self, seed):
        g = torch.Generator().manual_seed(seed)
        torch.manual_seed(seed)
        pool = AttentiveStatsPool(small_cfg())
        h = torch.randn(2, 11, 16, generator=g)
        perm = torch.randperm(11, generator=g)
        assert torch.allclose(pool(h), pool(h[:, perm]), atol=1e-5)

    def test_constant_sequence_sigma_floor(self):
        cfg = small_cfg()
        pool = AttentiveStatsPool(cfg)
        h = torch.full((1, 6, 16), 0.7)
        mu, sigma, var = pool.stats(h)
        assert torch.allclose(mu, torch.full((1, 16), 0.7), atol=1e-6)
        assert torch.allclose(sigma, torch.full((1, 16), math.sqrt(cfg.asp_eps)), rtol=1e-3)
        assert torch.isfinite(pool(h)).all()

    def test_weighted_moments(self):
        pool = AttentiveStatsPool(small_cfg())
        with torch.no_grad():
            for p in pool.score.parameters():
                p.zero_()
        h = torch.randn(1, 7, 16)
        mu, sigma, _ = pool.stats(h)
        assert torch.allclose(mu, h.mean(1), atol=1e-5)
        assert torch.allclose(sigma, h.var(1, unbiased=False).clamp_min(1e-6).sqrt(), atol=1e-5)

    def test_mask(self):
        torch.manual_seed(6)
        pool = AttentiveStatsPool(small_cfg())
        h = torch.randn(1, 9, 16)
        mask = torch.tensor([[True] * 6 + [False] * 3])
        assert torch.allclose(pool(h, mask), pool(h[:, :6]), atol=1e-6)
