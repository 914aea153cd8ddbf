"""Multi-head scaled dot-product attention shared by every model stage."""

import math

import torch
from torch import nn


class AttentionError(RuntimeError):
    pass


def split_heads(x, n_heads):
    # (..., L, d) -> (..., h, L, d/h)
    *lead, L, d = x.shape
    x = x.reshape(*lead, L, n_heads, d // n_heads)
    return x.transpose(-3, -2)


def merge_heads(x):
    # (..., h, L, d/h) -> (..., L, d)
    x = x.transpose(-3, -2)
    *lead, L, h, dh = x.shape
    return x.reshape(*lead, L, h * dh)


def scaled_attention(q, k, v, n_heads, mask=None):
    """Head-split softmax(QK^T / sqrt(d_head)) V.

    q: (..., Lq, d); k, v: (..., Lk, d); mask broadcastable to
    (..., Lq, Lk), True = attend. Returns (output (..., Lq, d),
    weights (..., h, Lq, Lk)).
    """
    if k.shape[-2] != v.shape[-2] or k.shape[-1] != v.shape[-1]:
        raise AttentionError(f"key/value shape mismatch: {tuple(k.shape)} vs {tuple(v.shape)}")
    if q.shape[-1] != k.shape[-1]:
        raise AttentionError(f"query width {q.shape[-1]} != key width {k.shape[-1]}")
    if q.shape[-1] % n_heads != 0:
        raise AttentionError(f"width {q.shape[-1]} not divisible by {n_heads} heads")

    d_head = q.shape[-1] // n_heads
    qh, kh, vh = (split_heads(x, n_heads) for x in (q, k, v))
    scores = qh @ kh.transpose(-2, -1) / math.sqrt(d_head)
    if mask is not None:
        if not bool(mask.any(dim=-1).all()):
            raise AttentionError("attention row with every position masked")
        scores = scores.masked_fill(~mask.unsqueeze(-3), float("-inf"))
    weights = torch.softmax(scores, dim=-1)
    return merge_heads(weights @ vh), weights


class MultiHeadAttention(nn.Module):
    """Learned q/k/v projections around scaled_attention.

    ``out_proj=False`` gives the bare projected attention used by the fusion
    and memory-alignment stages.
    """

    def __init__(self, dim, n_heads, out_proj=True):
        super().__init__()
        self.n_heads = n_heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim) if out_proj else None
        self.last_weights = None

    def forward(self, query, key, value, mask=None):
        out, weights = scaled_attention(
            self.q(query), self.k(key), self.v(value), self.n_heads, mask=mask
        )
        self.last_weights = weights
        if self.out is not None:
            out = self.out(out)
        return out


def causal_mask(length, device=None, dtype=torch.bool):
    return torch.ones(length, length, device=device, dtype=dtype).tril()
