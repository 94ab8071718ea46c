import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mono3dvg.attention import reference_grid
from mono3dvg.backbones import level_offsets_for, level_shapes_for
from mono3dvg.fusion import (DepthAdapter, DepthEncoder, DualTextGuidedAdapter, ScoreHead, VisualAdapter,
                             VisualEncoder, attention_scores, cosine_map, expand_scores, modulate)

SHAPES = level_shapes_for(64, 192)
OFFSETS = level_offsets_for(SHAPES)
NV = sum(h * w for h, w in SHAPES)
C = 16


def text_inputs(b=2, n=6):
    mask = torch.zeros(b, n, dtype=torch.bool)
    mask[-1, n - 2:] = True
    return torch.randn(b, n, C), mask


def rows_sum_to_one(record):
    for tag, w in record:
        assert torch.allclose(w.sum(-1), torch.ones_like(w.sum(-1)), atol=1e-5), tag


class TestEncoders:
    def test_visual_encoder(self):
        enc = VisualEncoder(C, layers=2, heads=4, points=2, dropout=0.0).eval()
        text, mask = text_inputs()
        rec = []
        out = enc(torch.randn(2, NV, C), torch.randn(NV, C), SHAPES, text, mask, rec)
        assert out.shape == (2, NV, C) and len(rec) == 4
        rows_sum_to_one(rec)

    def test_text_padding_cannot_leak(self):
        enc = VisualEncoder(C, layers=1, heads=4, points=2, dropout=0.0).eval()
        text, mask = text_inputs()
        f, pos = torch.randn(2, NV, C), torch.randn(NV, C)
        other = text.clone()
        other[mask] = 0.0
        a = enc(f, pos, SHAPES, text, mask)
        b = enc(f, pos, SHAPES, other, mask)
        assert torch.allclose(a, b, atol=1e-6)

    def test_depth_encoder(self):
        enc = DepthEncoder(C, 1, heads=4, dropout=0.1).eval()
        f, pos = torch.randn(2, 48, C), torch.randn(48, C)
        rec = []
        a = enc(f, pos, rec)
        assert a.shape == (2, 48, C)
        assert torch.equal(enc(f, pos), enc(f, pos))
        assert torch.allclose(a, enc(f, pos), atol=1e-5)
        rows_sum_to_one(rec)


def layer_norm(x, ln):
    mu = x.mean(-1, keepdim=True)
    var = x.var(-1, unbiased=False, keepdim=True)
    return (x - mu) / torch.sqrt(var + ln.eps) * ln.weight + ln.bias


class TestDepthAdapter:
    def test_straight_line_oracle(self):
        ad = DepthAdapter(C, 4, 0.0).eval()
        p_g = torch.randn(2, 48, C)
        text, mask = text_inputs()
        rec = []
        out = ad(p_g, text, mask, rec)
        a, _ = ad.cross(p_g, text, text, mask)
        p1 = p_g + a
        b, _ = ad.self_attn(p1, p1, p_g)
        ref = layer_norm(p_g, ad.norm_in) + layer_norm(b, ad.norm_out)
        assert out.shape == (2, 48, C)
        assert torch.allclose(out, ref, atol=1e-5)
        rows_sum_to_one(rec)


class TestVisualAdapter:
    def test_only_stride16_segment_changes(self):
        ad = VisualAdapter(C, 4, 2, 0.0).eval()
        p_v = torch.randn(2, NV, C)
        text, mask = text_inputs()
        seen = {}
        orig = ad.msda.forward

        def spy(query, refs, value, shapes):
            seen["query"], seen["value"] = query, value
            return orig(query, refs, value, shapes)

        ad.msda.forward = spy
        pos = torch.zeros(NV, C)
        out, f_orig, f_text = ad(p_v, pos, SHAPES, OFFSETS, text, mask)
        s, e = OFFSETS[1], OFFSETS[2]
        q = seen["query"]
        assert torch.equal(q[:, :s], p_v[:, :s]) and torch.equal(q[:, e:], p_v[:, e:])
        assert not torch.allclose(q[:, s:e], p_v[:, s:e])
        assert torch.equal(seen["value"], p_v)
        assert out.shape == (2, NV, C) and f_orig.shape == f_text.shape == (2, C, 4, 12)

    def test_straight_line_oracle(self):
        ad = VisualAdapter(C, 4, 2, 0.0).eval()
        p_v, pos = torch.randn(1, NV, C), torch.randn(NV, C)
        text, mask = text_inputs(1)
        out, f_orig, f_text = ad(p_v, pos, SHAPES, OFFSETS, text, mask)
        s, e = OFFSETS[1], OFFSETS[2]
        a, _ = ad.cross(p_v[:, s:e], text, text, mask)
        p_prime = torch.cat([p_v[:, :s], p_v[:, s:e] + a, p_v[:, e:]], 1)
        m, _ = ad.msda(p_prime + pos, reference_grid(SHAPES)[None], p_v, SHAPES)
        ref = layer_norm(p_v, ad.norm_in) + layer_norm(m, ad.norm_out)
        assert torch.allclose(out, ref, atol=1e-5)
        assert torch.allclose(f_orig, ad.proj_orig(p_v[:, s:e]).transpose(1, 2).reshape(1, C, 4, 12), atol=1e-6)
        assert torch.allclose(f_text, ad.proj_text(a).transpose(1, 2).reshape(1, C, 4, 12), atol=1e-6)


class TestScores:
    def test_identical_features_give_alpha(self):
        f = torch.randn(1, C, 2, 2)
        assert torch.allclose(attention_scores(f, f, 0.7, 0.5), torch.full((1, 2, 2), 0.7), atol=1e-6)

    def test_orthogonal(self):
        a = torch.zeros(1, 2, 1, 1)
        b = torch.zeros(1, 2, 1, 1)
        a[0, 0], b[0, 1] = 1.0, 1.0
        assert attention_scores(a, b, 1.0, 0.5).item() == pytest.approx(math.exp(-2), abs=1e-6)

    def test_antiparallel(self):
        a = torch.randn(1, 4, 1, 1)
        assert attention_scores(a, -a, 1.0, 1.0).item() == pytest.approx(math.exp(-2), abs=1e-6)
        assert attention_scores(a, -a, 1.0, 1.0).item() == pytest.approx(0.13534, abs=1e-5)

    def test_zero_vector_guard(self):
        s = cosine_map(torch.zeros(1, 4, 1, 1), torch.randn(1, 4, 1, 1))
        assert torch.isfinite(s).all() and s.item() == 0.0

    @settings(max_examples=30)
    @given(st.integers(0, 10_000), st.floats(0.05, 3.0), st.floats(0.05, 3.0))
    def test_ranges(self, seed, alpha, sigma):
        g = torch.Generator().manual_seed(seed)
        # double precision: with small sigma the float32 exponential underflows to exactly 0
        a = torch.randn(2, 8, 3, 5, generator=g, dtype=torch.float64)
        b = torch.randn(2, 8, 3, 5, generator=g, dtype=torch.float64)
        cos = cosine_map(a, b)
        assert torch.all(cos.abs() <= 1 + 1e-6)
        s = attention_scores(a, b, alpha, sigma)
        assert torch.all(s > 0) and torch.all(s <= alpha + 1e-7)

    def test_score_head_init(self):
        h = ScoreHead()
        assert h.alpha.item() == 1.0 and h.sigma.item() == pytest.approx(0.5)


class TestExpand:
    def test_constant(self):
        out = expand_scores(torch.full((1, 4, 12), 0.3), SHAPES)
        assert out.shape == (1, NV) and torch.allclose(out, torch.full_like(out, 0.3))

    @given(st.integers(0, 10_000))
    def test_pooling_and_bounds(self, seed):
        g = torch.Generator().manual_seed(seed)
        s16 = torch.rand(2, 4, 12, generator=g)
        out = expand_scores(s16, SHAPES)
        lvl32 = out[:, OFFSETS[2]:OFFSETS[3]].view(2, 2, 6)
        for i in range(2):
            for j in range(6):
                assert torch.equal(lvl32[:, i, j], s16[:, 2 * i:2 * i + 2, 2 * j:2 * j + 2].amax((1, 2)))
        assert torch.equal(out[:, OFFSETS[1]:OFFSETS[2]], s16.flatten(1))
        lo, hi = s16.amin((1, 2), keepdim=True)[:, 0], s16.amax((1, 2), keepdim=True)[:, 0]
        assert torch.all(out >= lo - 1e-6) and torch.all(out <= hi + 1e-6)


class TestModulate:
    def test_identity_and_zero(self):
        f = torch.randn(1, 5, C)
        assert torch.equal(modulate(f, torch.ones(1, 5)), f)
        s = torch.ones(1, 5)
        s[0, 2] = 0
        assert torch.all(modulate(f, s)[0, 2] == 0)

    @given(st.integers(0, 10_000))
    def test_loop_oracle_and_permutation(self, seed):
        g = torch.Generator().manual_seed(seed)
        f, s = torch.randn(2, 7, 4, generator=g), torch.rand(2, 7, generator=g)
        out = modulate(f, s)
        for b in range(2):
            for n in range(7):
                assert torch.allclose(out[b, n], f[b, n] * s[b, n])
        perm = torch.randperm(7, generator=g)
        assert torch.allclose(modulate(f[:, perm], s[:, perm]), out[:, perm])


class TestDualAdapter:
    def test_full_and_ablated(self):
        text, mask = text_inputs()
        p_v, p_g, pos = torch.randn(2, NV, C), torch.randn(2, 48, C), torch.randn(NV, C)
        full = DualTextGuidedAdapter(C, 4, 2, 0.0).eval()
        out = full(p_v, p_g, pos, SHAPES, OFFSETS, text, mask)
        assert out.visual.shape == (2, NV, C) and out.geometry.shape == (2, 48, C)
        assert out.score.shape == (2, NV) and out.score16.shape == (2, 4, 12)
        off = DualTextGuidedAdapter(C, 4, 2, 0.0, visual=False, depth=False)
        bare = off(p_v, p_g, pos, SHAPES, OFFSETS, text, mask)
        assert torch.equal(bare.visual, p_v) and torch.equal(bare.geometry, p_g) and bare.score16 is None
