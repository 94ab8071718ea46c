import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from mono3dvg.backbones import level_shapes_for
from mono3dvg.datagen.scene import CameraIntrinsics
from mono3dvg.geometry3d import OrientedBox3D, iou3d, project_box, wrap_angle
from mono3dvg.grounding import (NUM_BINS, GroundingDecoder, GroundingDecoderLayer, GroundingHead, HeadValues,
                                assemble_box, bin_center, decode_orientation, encode_orientation, encode_target,
                                final_depth, target_to_head_values)

SHAPES = level_shapes_for(64, 192)
NV = sum(h * w for h, w in SHAPES)
C = 16


def head_values(xy=(0.5, 0.5), lrtb=(0.1, 0.1, 0.1, 0.1)):
    logits = np.zeros(NUM_BINS)
    logits[6] = 1.0
    res = np.tile([0.0, 1.0], (NUM_BINS, 1))
    return HeadValues(np.zeros(9), np.array(lrtb), np.array(xy), np.array([1.5, 1.6, 3.9]), logits, res, 10.0)


class TestOrientation:
    def test_bin_zero(self):
        logits = np.zeros(NUM_BINS)
        logits[0] = 5
        assert decode_orientation(logits, np.tile([0.0, 1.0], (NUM_BINS, 1))) == pytest.approx(wrap_angle(bin_center(0)))

    def test_roundtrip_360(self):
        for theta in np.linspace(-math.pi, math.pi, 360, endpoint=False):
            b, s, c = encode_orientation(theta)
            logits = np.zeros(NUM_BINS)
            logits[b] = 1
            res = np.zeros((NUM_BINS, 2))
            res[b] = (s, c)
            assert abs(wrap_angle(decode_orientation(logits, res) - theta)) <= 1e-6

    @given(st.floats(-math.pi, math.pi), st.floats(0.01, 100))
    def test_residual_scale_invariance(self, theta, k):
        b, s, c = encode_orientation(theta)
        logits = np.eye(NUM_BINS)[b]
        res = np.zeros((NUM_BINS, 2))
        res[b] = (s, c)
        assert decode_orientation(logits, res) == pytest.approx(decode_orientation(logits, res * k), abs=1e-9)

    @given(st.floats(-10, 10))
    def test_residual_within_half_bin(self, theta):
        _, s, c = encode_orientation(theta)
        assert abs(math.atan2(s, c)) <= math.pi / NUM_BINS + 1e-9


class TestAssemble:
    cam64 = CameraIntrinsics(100, 100, 32, 32, 64, 64)

    def test_center_backprojection(self):
        box, _ = assemble_box(head_values(), self.cam64, 10.0)
        assert (box.x, box.y, box.z) == pytest.approx((0.0, 0.0, 10.0))

    def test_lrtb_arithmetic(self):
        _, b2 = assemble_box(head_values(), self.cam64, 10.0)
        assert (b2.u_min, b2.v_min, b2.u_max, b2.v_max) == pytest.approx((25.6, 25.6, 38.4, 38.4))

    def test_degenerate_box(self):
        _, b2 = assemble_box(head_values(lrtb=(0, 0, 0, 0)), self.cam64, 10.0)
        assert b2.width == pytest.approx(1.0) and b2.height == pytest.approx(1.0)

    def test_clamped_to_image(self):
        _, b2 = assemble_box(head_values(xy=(0.95, 0.05), lrtb=(0.2, 0.5, 0.2, 0.2)), self.cam64, 10.0)
        assert b2.u_max == 64 and b2.v_min == 0

    def test_roundtrip_dataset(self, small_split):
        for r in small_split:
            t = encode_target(r.target.category, r.target.box3d, r.target.box2d, r.scene.camera)
            box, b2 = assemble_box(target_to_head_values(t), r.scene.camera, t.depth)
            assert iou3d(box, r.target.box3d) >= 0.999
            assert np.allclose([b2.u_min, b2.v_min, b2.u_max, b2.v_max],
                               [r.target.box2d.u_min, r.target.box2d.v_min, r.target.box2d.u_max, r.target.box2d.v_max])

    @given(st.floats(-8, 8), st.floats(8, 60), st.floats(-math.pi, math.pi))
    def test_roundtrip_property(self, x, z, ry):
        cam = CameraIntrinsics(112, 112, 96, 30, 192, 64)
        box = OrientedBox3D(x, 1.0, z, 1.5, 1.6, 3.9, ry)
        b2 = project_box(box, cam)
        if b2 is None:
            return
        t = encode_target("car", box, b2, cam)
        if not (0 <= t.xy3d[0] <= 1 and 0 <= t.xy3d[1] <= 1):
            return
        out, _ = assemble_box(target_to_head_values(t), cam, t.depth)
        assert iou3d(out, box) >= 0.999


class TestFinalDepth:
    def test_fixed_point(self):
        m = torch.full((1, 4, 12), 20.0)
        assert final_depth(torch.tensor([20.0]), m, torch.tensor([[0.3, 0.7]])).item() == pytest.approx(20.0)

    def test_constant_map(self):
        m = torch.full((1, 4, 12), 30.0)
        assert final_depth(torch.tensor([10.0]), m, torch.tensor([[0.5, 0.5]])).item() == pytest.approx(20.0)

    @given(st.integers(0, 10_000), st.floats(0, 1), st.floats(0, 1))
    def test_bilinear_oracle(self, seed, x, y):
        g = torch.Generator().manual_seed(seed)
        m = torch.rand(1, 4, 12, generator=g, dtype=torch.float64) * 50 + 1
        d = final_depth(torch.tensor([0.0], dtype=torch.float64), m, torch.tensor([[x, y]], dtype=torch.float64))
        # cell centers at (i + 0.5) / n; clamp to the border outside them
        px = min(max(x * 12 - 0.5, 0.0), 11.0)
        py = min(max(y * 4 - 0.5, 0.0), 3.0)
        x0, y0 = min(int(px), 10), min(int(py), 2)
        fx, fy = px - x0, py - y0
        mm = m[0].numpy()
        ref = ((1 - fx) * (1 - fy) * mm[y0, x0] + fx * (1 - fy) * mm[y0, x0 + 1]
               + (1 - fx) * fy * mm[y0 + 1, x0] + fx * fy * mm[y0 + 1, x0 + 1])
        assert 2 * d.item() == pytest.approx(ref, abs=1e-9)

    @given(st.integers(0, 10_000), st.floats(1, 100), st.floats(-0.5, 1.5), st.floats(-0.5, 1.5))
    def test_between(self, seed, d_reg, x, y):
        g = torch.Generator().manual_seed(seed)
        m = torch.rand(1, 4, 12, generator=g, dtype=torch.float64) * 100
        d = final_depth(torch.tensor([d_reg], dtype=torch.float64), m, torch.tensor([[x, y]], dtype=torch.float64))
        d_map = 2 * d.item() - d_reg
        assert m.min() - 1e-9 <= d_map <= m.max() + 1e-9
        assert min(d_reg, d_map) - 1e-9 <= d.item() <= max(d_reg, d_map) + 1e-9


class TestHead:
    def test_shapes_and_ranges(self):
        head = GroundingHead(C).eval()
        p = head(torch.randn(5, C) * 10)
        assert p.class_logits.shape == (5, 9) and p.lrtb.shape == (5, 4) and p.xy3d.shape == (5, 2)
        assert p.size3d.shape == (5, 3) and p.orient_logits.shape == (5, 12)
        assert p.orient_residuals.shape == (5, 12, 2) and p.d_reg.shape == (5,) and p.log_sigma.shape == (5,)
        assert torch.all(p.lrtb >= 0) and torch.all((p.xy3d >= 0) & (p.xy3d <= 1))
        assert torch.all(p.size3d > 0) and torch.all(p.d_reg > 0)
        q = torch.randn(2, C)
        assert torch.equal(head(q).lrtb_raw, head(q).lrtb_raw)

    def test_sample_matches_batch(self):
        head = GroundingHead(C)
        p = head(torch.randn(3, C))
        hv = p.sample(1)
        assert hv.d_reg == pytest.approx(float(p.d_reg[1].detach()))
        assert np.allclose(hv.lrtb, p.lrtb[1].detach().numpy(), atol=1e-6)


def decoder_inputs(b=2):
    text = torch.randn(b, 6, C)
    mask = torch.zeros(b, 6, dtype=torch.bool)
    mask[-1, 4:] = True
    return torch.randn(b, 48, C), torch.randn(1, 48, C), text, mask, torch.randn(b, NV, C)


class TestDecoder:
    def test_shape_and_rows(self):
        dec = GroundingDecoder(C, 2, heads=4, points=2, dropout=0.0).eval()
        rec = []
        q, ref = dec(*decoder_inputs(), SHAPES, rec)
        assert q.shape == (2, C) and ref.shape == (2, 2)
        assert [t for t, _ in rec] == ["decoder.depth", "decoder.text", "decoder.visual"] * 2
        for _, w in rec:
            assert torch.allclose(w.sum(-1), torch.ones_like(w.sum(-1)), atol=1e-5)

    def test_deterministic(self):
        dec = GroundingDecoder(C, 1, heads=4, points=2, dropout=0.5).eval()
        inp = decoder_inputs()
        assert torch.equal(dec(*inp, SHAPES)[0], dec(*inp, SHAPES)[0])

    @pytest.mark.parametrize("order", ["DTV", "TDV", "DVT", "VTD"])
    def test_branch_ablation_oracle(self, order):
        torch.manual_seed(3)
        layer = GroundingDecoderLayer(C, 4, 2, 0.0, order).eval()
        for lin in (layer.depth_attn.v_proj, layer.depth_attn.out_proj, layer.visual_attn.output_proj):
            torch.nn.init.normal_(lin.bias)
        _, _, text, mask, _ = decoder_inputs()
        zeros_g, zeros_v = torch.zeros(2, 48, C), torch.zeros(2, NV, C)
        query = torch.randn(1, 1, C).expand(2, -1, -1)
        out, _ = layer(query, zeros_g, torch.zeros(1, 48, C), text, mask, zeros_v, SHAPES)

        # with empty geometry and visual tokens, D and V collapse to constants
        da = layer.depth_attn
        d_const = da.out_proj(da.v_proj.bias)
        v_const = layer.visual_attn.output_proj.bias
        x = query
        for step in order:
            if step == "D":
                x = d_const.expand_as(x)
            elif step == "T":
                x, _ = layer.text_attn(x, text, text, mask)
            else:
                x = v_const.expand_as(x)
        x = layer.norm(query + x)
        ref = layer.norm_ffn(x + layer.ffn(x))
        assert torch.allclose(out, ref, atol=1e-5)

    def test_bad_order(self):
        with pytest.raises(ValueError):
            GroundingDecoderLayer(C, 4, 2, 0.0, "DDV")
