import pytest
import torch

from mono3dvg.config import Config, ModelConfig
from mono3dvg.data import collate
from mono3dvg.model import Mono3DVG, count_parameters


@pytest.fixture
def batch(small_split, vocab):
    return collate(small_split[:3], vocab, Mono3DVG.build(ModelConfig(dim=16, heads=4), vocab).bins)


def build(vocab, **kw):
    base = dict(dim=16, encoder_layers=1, depth_encoder_layers=1, decoder_layers=1,
                backbone_channels=(8, 16, 16, 16), heads=4, dropout=0.0)
    return Mono3DVG.build(ModelConfig(**{**base, **kw}), vocab).eval()


class TestForward:
    def test_shapes(self, batch, vocab):
        out = build(vocab)(batch.images, batch.ids, batch.values, batch.text_mask)
        assert out.pred.class_logits.shape == (3, 9)
        assert out.depth_logits.shape == (3, 81, 4, 12) and out.expected_depth.shape == (3, 4, 12)
        assert out.score16.shape == (3, 4, 12) and out.ref.shape == (3, 2)
        assert out.d_pred.shape == (3,) and torch.all(out.d_pred > 0)
        assert out.attention is None

    def test_recorded_attention_is_normalized(self, batch, vocab):
        out = build(vocab, encoder_layers=2, decoder_layers=2)(batch.images, batch.ids, batch.values,
                                                                 batch.text_mask, record=True)
        tags = {t.split(".")[0] for t, _ in out.attention}
        assert {"decoder"} <= tags and len(out.attention) > 6
        for tag, w in out.attention:
            assert torch.allclose(w.sum(-1), torch.ones_like(w.sum(-1)), atol=1e-5), tag

    def test_eval_is_deterministic(self, batch, vocab):
        m = build(vocab, dropout=0.3)
        a = m(batch.images, batch.ids, batch.values, batch.text_mask)
        b = m(batch.images, batch.ids, batch.values, batch.text_mask)
        assert torch.equal(a.pred.xy3d, b.pred.xy3d) and torch.equal(a.d_pred, b.d_pred)

    def test_batch_independence(self, batch, vocab):
        m = build(vocab)
        full = m(batch.images, batch.ids, batch.values, batch.text_mask).pred.size3d
        one = m(batch.images[:1], batch.ids[:1], batch.values[:1], batch.text_mask[:1]).pred.size3d
        assert torch.allclose(full[:1], one, atol=1e-5)

    @pytest.mark.parametrize("kw", [dict(visual_adapter=False, depth_adapter=False), dict(use_encoders=False),
                                    dict(stacking_order="DVT", full_add_norm=True)])
    def test_variants_run(self, batch, vocab, kw):
        out = build(vocab, **kw)(batch.images, batch.ids, batch.values, batch.text_mask)
        assert torch.isfinite(out.pred.xy3d).all()
        if kw.get("visual_adapter") is False:
            assert out.score16 is None

    def test_gradients_reach_every_parameter(self, batch, vocab):
        m = build(vocab).train()
        out = m(batch.images, batch.ids, batch.values, batch.text_mask)
        (out.pred.class_logits.sum() + out.d_pred.sum() + out.pred.size3d.sum() + out.pred.lrtb.sum()
         + out.pred.orient_logits.sum() + out.depth_logits.sum()).backward()
        dead = [n for n, p in m.named_parameters() if p.grad is None]
        assert dead == []


def test_parameter_counts(vocab):
    desk = Mono3DVG.build(Config.desk().model, vocab)
    paper = Mono3DVG.build(Config.paper().model, vocab)
    assert 0 < count_parameters(desk) < count_parameters(paper)
    assert count_parameters(build(vocab)) < count_parameters(desk)
