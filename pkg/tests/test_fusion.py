import numpy as np
import pytest
import torch

from longcxr.model.fusion import CrossAttentionFusion

from conftest import check_gradients
from test_encoders import dense_attention_oracle


def identity_fusion(dim):
    fusion = CrossAttentionFusion(dim, n_heads=1)
    with torch.no_grad():
        for attn in (fusion.img_to_text, fusion.text_to_img):
            for lin in (attn.q, attn.k, attn.v):
                lin.weight.copy_(torch.eye(dim))
                lin.bias.zero_()
    return fusion


class TestCrossAttend:
    def test_single_row_each_side(self):
        fusion = identity_fusion(4)
        img = torch.randn(1, 4)
        rep = torch.randn(1, 4)
        out = fusion.cross_attend(img, rep, "image_to_text")
        torch.testing.assert_close(out, rep)

    def test_output_length_is_query_length(self):
        fusion = CrossAttentionFusion(512, n_heads=8)
        out = fusion.cross_attend(torch.randn(49, 512), torch.randn(12, 512), "image_to_text")
        assert out.shape == (49, 512)

    def test_matches_dense_oracle(self):
        fusion = identity_fusion(6).double()
        q = torch.randn(3, 6, dtype=torch.float64)
        kv = torch.randn(2, 6, dtype=torch.float64)
        with torch.no_grad():
            out = fusion.cross_attend(q, kv, "image_to_text")
        expected = dense_attention_oracle(q.numpy(), kv.numpy(), kv.numpy())
        np.testing.assert_allclose(out.numpy(), expected, atol=1e-10)

    def test_empty_kv_side_errors(self):
        fusion = CrossAttentionFusion(8, n_heads=2)
        with pytest.raises(ValueError):
            fusion.cross_attend(torch.randn(3, 8), torch.randn(0, 8), "image_to_text")

    def test_row_stochastic(self):
        fusion = CrossAttentionFusion(16, n_heads=4)
        fusion.cross_attend(torch.randn(5, 16), torch.randn(9, 16), "text_to_image")
        sums = fusion.text_to_img.last_weights.sum(dim=-1)
        torch.testing.assert_close(sums, torch.ones_like(sums), atol=1e-6, rtol=0)


class TestFuseLongitudinal:
    def test_concatenation_shape(self):
        fusion = CrossAttentionFusion(512, n_heads=8)
        h_long, _ = fusion(torch.randn(49, 512), torch.randn(12, 512))
        assert h_long.shape == (61, 512)

    def test_layout_image_rows_first(self):
        fusion = CrossAttentionFusion(16, n_heads=4)
        img, rep = torch.randn(5, 16), torch.randn(3, 16)
        h_long, _ = fusion(img, rep)
        expected_first = fusion.cross_attend(img, rep, "image_to_text")
        torch.testing.assert_close(h_long[:5], expected_first)

    def test_zero_value_projection_gives_zeros(self):
        fusion = CrossAttentionFusion(8, n_heads=2)
        with torch.no_grad():
            for attn in (fusion.img_to_text, fusion.text_to_img):
                attn.v.weight.zero_()
                attn.v.bias.zero_()
        h_long, _ = fusion(torch.randn(4, 8), torch.randn(3, 8))
        assert torch.all(h_long == 0)

    def test_width_mismatch_errors(self):
        fusion = CrossAttentionFusion(8, n_heads=2)
        with pytest.raises(ValueError):
            fusion(torch.randn(4, 8), torch.randn(3, 6))

    def test_mask_concatenation(self):
        fusion = CrossAttentionFusion(8, n_heads=2)
        rep_mask = torch.tensor([True, True, False])
        _, mask = fusion(torch.randn(4, 8), torch.randn(3, 8), rep_pad_mask=rep_mask)
        assert mask.tolist() == [True] * 4 + [True, True, False]


class TestFusionGradients:
    def test_matches_finite_differences(self, rng):
        torch.manual_seed(3)
        fusion = CrossAttentionFusion(16, n_heads=4).double()
        img = torch.randn(3, 16, dtype=torch.float64)
        rep = torch.randn(4, 16, dtype=torch.float64)

        def loss_fn():
            h_long, _ = fusion(img, rep)
            return (h_long ** 2).sum()

        check_gradients(loss_fn, fusion.named_parameters(), rng)
