import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from mono3dvg.backbones import (DepthBins, DepthPredictor, ImageBackbone, TextEncoder, expected_depth,
                                ground_truth_depth_map, level_offsets_for, level_shapes_for, num_visual_tokens)
from mono3dvg.datagen.scene import ObjectRecord, default_camera
from mono3dvg.geometry3d import Box2D, OrientedBox3D

BINS = DepthBins()


@pytest.mark.parametrize("hw,n", [((64, 64), 85), ((64, 192), 255), ((384, 1280), 10200)])
def test_num_visual_tokens(hw, n):
    assert num_visual_tokens(*hw) == n


@given(st.integers(1, 8), st.integers(1, 20))
def test_token_formula(a, b):
    h, w = 64 * a, 64 * b
    hw = h * w
    assert num_visual_tokens(h, w) == hw // 64 + hw // 256 + hw // 1024 + hw // 4096
    shapes = level_shapes_for(h, w)
    assert shapes[1] == (h // 16, w // 16)
    offs = level_offsets_for(shapes)
    assert offs == [0] + list(np.cumsum([p * q for p, q in shapes])[:-1])


def test_indivisible_size():
    with pytest.raises(ValueError):
        level_shapes_for(60, 192)


class TestText:
    def setup_method(self):
        torch.manual_seed(0)
        self.enc = TextEncoder(30, 16, layers=2, heads=4, dropout=0.1).eval()

    def test_shape(self):
        ids = torch.randint(3, 30, (2, 7))
        out = self.enc(ids, torch.zeros(2, 7))
        assert out.features.shape == (2, 7, 16) and not out.mask.any()

    def test_deterministic_in_eval(self):
        ids = torch.randint(3, 30, (1, 5))
        a = self.enc(ids, torch.zeros(1, 5)).features
        assert torch.equal(a, self.enc(ids, torch.zeros(1, 5)).features)

    def test_position_sensitive(self):
        ids = torch.tensor([[5, 6, 7, 8]])
        swapped = torch.tensor([[6, 5, 7, 8]])
        a = self.enc(ids, torch.zeros(1, 4)).features
        b = self.enc(swapped, torch.zeros(1, 4)).features
        assert not torch.allclose(a[0, 2:], b[0, 2:], atol=1e-6)

    def test_numbers_change_features(self):
        ids = torch.tensor([[5, 2, 7]])
        a = self.enc(ids, torch.tensor([[0.0, 10.0, 0.0]])).features
        b = self.enc(ids, torch.tensor([[0.0, 40.0, 0.0]])).features
        assert not torch.allclose(a, b)

    def test_padding_mask(self):
        ids = torch.tensor([[5, 6, 0, 0]])
        out = self.enc(ids, torch.zeros(1, 4))
        assert out.mask.tolist() == [[False, False, True, True]]

    def test_empty(self):
        with pytest.raises(ValueError):
            self.enc(torch.zeros(1, 0, dtype=torch.long), torch.zeros(1, 0))


class TestImage:
    def test_pyramid(self):
        bb = ImageBackbone(16, (8, 16, 16, 16))
        vis, maps = bb(torch.randn(2, 3, 64, 192))
        assert vis.features.shape == (2, 255, 16)
        assert [m.shape[-2:] for m in maps] == [torch.Size(s) for s in vis.level_shapes]
        assert torch.equal(vis.level(1), maps[1].flatten(2).transpose(1, 2))

    def test_indivisible(self):
        with pytest.raises(ValueError):
            ImageBackbone(16, (8, 16, 16, 16))(torch.randn(1, 3, 64, 100))


class TestDepthBins:
    def test_edges(self):
        assert BINS.edges[0] == 1.0 and BINS.edges[-1] == pytest.approx(102.0)
        widths = np.diff(BINS.edges)
        assert np.all(widths > 0) and np.all(np.diff(widths) >= -1e-12)

    def test_ends(self):
        assert BINS.depth_to_bin(1.0) == 0
        assert BINS.depth_to_bin(102.0) == 79
        assert BINS.depth_to_bin(500.0) == 79 and BINS.depth_to_bin(0.1) == 0

    def test_roundtrip_all_bins(self):
        assert all(BINS.depth_to_bin(BINS.bin_to_depth(k)) == k for k in range(80))

    def test_invalid(self):
        with pytest.raises(ValueError):
            DepthBins(1)
        with pytest.raises(ValueError):
            DepthBins(10, 5.0, 5.0)


class TestExpectedDepth:
    centers = BINS.centers_tensor(torch.float64)

    def test_one_hot(self):
        logits = torch.full((1, 81, 1, 1), -1e4, dtype=torch.float64)
        logits[0, 17] = 0.0
        assert expected_depth(logits, self.centers).item() == pytest.approx(BINS.centers[17])

    def test_uniform(self):
        logits = torch.zeros(1, 81, 2, 2, dtype=torch.float64)
        assert torch.allclose(expected_depth(logits, self.centers), torch.tensor(BINS.centers.mean(), dtype=torch.float64))

    def test_background_logit_ignored(self):
        logits = torch.randn(1, 81, 1, 1, dtype=torch.float64)
        other = logits.clone()
        other[0, 80] = 50.0
        assert torch.equal(expected_depth(logits, self.centers), expected_depth(other, self.centers))

    @given(st.integers(0, 1000), st.floats(0.1, 30))
    def test_convex(self, seed, scale):
        g = torch.Generator().manual_seed(seed)
        e = expected_depth(torch.randn(2, 81, 3, 3, generator=g, dtype=torch.float64) * scale, self.centers)
        assert torch.all(e >= 1.0) and torch.all(e <= 102.0)

    def test_predictor_shapes(self):
        dp = DepthPredictor(16, BINS)
        geo, logits, exp = dp(torch.randn(2, 16, 4, 12))
        assert geo.shape == (2, 48, 16) and logits.shape == (2, 81, 4, 12) and exp.shape == (2, 4, 12)


def _obj(i, z, box2d):
    return ObjectRecord(i, "car", OrientedBox3D(0, 1, z, 1.5, 1.6, 3.9, 0), box2d, "red")


class TestGroundTruthDepthMap:
    cam = default_camera()

    def test_empty(self):
        assert np.all(ground_truth_depth_map([], self.cam, BINS) == 80)

    def test_single(self):
        m = ground_truth_depth_map([_obj(0, 10.0, Box2D(0, 0, 40, 40))], self.cam, BINS)
        assert m.shape == (4, 12)
        assert m[0, 0] == BINS.depth_to_bin(10.0) and m[3, 11] == 80

    def test_nearest_wins(self):
        objs = [_obj(0, 30.0, Box2D(0, 0, 64, 64)), _obj(1, 10.0, Box2D(0, 0, 40, 40))]
        m = ground_truth_depth_map(objs, self.cam, BINS)
        assert m[0, 0] == BINS.depth_to_bin(10.0) and m[3, 3] == BINS.depth_to_bin(30.0)

    def test_foreground_count_matches_union(self, small_split):
        for r in small_split[:10]:
            m = ground_truth_depth_map(r.scene.objects, r.scene.camera, BINS)
            cover = np.zeros_like(m, dtype=bool)
            for o in r.scene.objects:
                b = o.box2d
                for i in range(m.shape[0]):
                    for j in range(m.shape[1]):
                        u, v = 16 * j + 8, 16 * i + 8
                        cover[i, j] |= b.u_min <= u <= b.u_max and b.v_min <= v <= b.v_max
            assert (m < 80).sum() == cover.sum()
