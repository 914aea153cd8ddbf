"""Cross-attention fusion of the previous visit's image and report encodings.

Two attention passes (image queries report, report queries image) whose
outputs concatenate into one longitudinal representation. No residual or
feed-forward sublayers here: just the two attention directions.
"""

import torch
from torch import nn

from .attention import MultiHeadAttention


class CrossAttentionFusion(nn.Module):
    def __init__(self, dim, n_heads):
        super().__init__()
        self.img_to_text = MultiHeadAttention(dim, n_heads, out_proj=False)
        self.text_to_img = MultiHeadAttention(dim, n_heads, out_proj=False)

    def cross_attend(self, query_side, kv_side, direction, kv_mask=None):
        if kv_side.shape[-2] == 0:
            raise ValueError("empty key/value side in cross attention")
        attn = self.img_to_text if direction == "image_to_text" else self.text_to_img
        mask = None if kv_mask is None else kv_mask.unsqueeze(-2)
        return attn(query_side, kv_side, kv_side, mask=mask)

    def forward(self, h_img_prev, h_rep_prev, rep_pad_mask=None):
        """Returns (h_long (..., S+M, d), key mask for downstream attention)."""
        if h_img_prev.shape[-1] != h_rep_prev.shape[-1]:
            raise ValueError(
                f"width mismatch: image {h_img_prev.shape[-1]} vs report {h_rep_prev.shape[-1]}"
            )
        img_star = self.cross_attend(h_img_prev, h_rep_prev, "image_to_text", kv_mask=rep_pad_mask)
        rep_star = self.cross_attend(h_rep_prev, h_img_prev, "text_to_image")
        h_long = torch.cat([img_star, rep_star], dim=-2)
        if rep_pad_mask is None:
            return h_long, None
        img_mask = torch.ones(
            *h_img_prev.shape[:-1], dtype=torch.bool, device=h_img_prev.device
        )
        return h_long, torch.cat([img_mask, rep_pad_mask], dim=-1)
