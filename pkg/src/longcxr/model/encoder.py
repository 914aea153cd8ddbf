"""Transformer encoder stacks for image patches and report tokens.

Post-norm layers; the image encoder has no positional signal by default,
the text encoder adds learned positions. Previous and current images share
one parameter set; the text encoder has its own.
"""

import torch
from torch import nn

from .attention import MultiHeadAttention


class EncoderLayer(nn.Module):
    def __init__(self, dim, n_heads, ff_dim, dropout=0.0):
        super().__init__()
        self.attn = MultiHeadAttention(dim, n_heads)
        self.ff = nn.Sequential(nn.Linear(dim, ff_dim), nn.ReLU(), nn.Linear(ff_dim, dim))
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, key_mask=None):
        mask = None if key_mask is None else key_mask.unsqueeze(-2)
        x = self.norm1(x + self.drop(self.attn(x, x, x, mask=mask)))
        x = self.norm2(x + self.drop(self.ff(x)))
        return x


class TransformerEncoder(nn.Module):
    def __init__(self, dim, n_heads, n_layers, ff_dim, dropout=0.0):
        super().__init__()
        self.layers = nn.ModuleList(
            EncoderLayer(dim, n_heads, ff_dim, dropout) for _ in range(n_layers)
        )

    def forward(self, x, key_mask=None):
        if not torch.isfinite(x).all():
            raise ValueError("non-finite encoder input")
        for layer in self.layers:
            x = layer(x, key_mask=key_mask)
        return x


class TextEncoder(nn.Module):
    """Token + learned position embedding followed by an encoder stack."""

    def __init__(self, vocab_size, dim, n_heads, n_layers, ff_dim, max_len, dropout=0.0,
                 use_positions=True):
        super().__init__()
        self.embed = nn.Embedding(vocab_size, dim)
        self.positions = nn.Embedding(max_len, dim) if use_positions else None
        self.encoder = TransformerEncoder(dim, n_heads, n_layers, ff_dim, dropout)

    def forward(self, token_ids, pad_mask=None):
        if int(token_ids.max()) >= self.embed.num_embeddings:
            raise ValueError("token id out of vocabulary range")
        x = self.embed(token_ids)
        if self.positions is not None:
            pos = torch.arange(token_ids.shape[-1], device=token_ids.device)
            x = x + self.positions(pos)
        return self.encoder(x, key_mask=pad_mask)
