"""Relational memory and memory-conditional layer normalization.

A small slot matrix carries generation-pattern state across decoding
steps: each step it is updated by gated attention over itself and the last
generated token, then aligned against the current image's encoded states
before conditioning the decoder's layer norms.
"""

import torch
from torch import nn

from .attention import MultiHeadAttention, scaled_attention


class RelationalMemory(nn.Module):
    def __init__(self, n_slots, dim, n_heads):
        super().__init__()
        self.n_slots = n_slots
        self.dim = dim
        self.initial = nn.Parameter(torch.randn(n_slots, dim) * 0.1)
        self.attn = MultiHeadAttention(dim, n_heads)
        self.ff = nn.Sequential(nn.Linear(dim, dim), nn.ReLU(), nn.Linear(dim, dim))
        # one linear each from the token embedding and from tanh(M), split
        # into forget/input halves
        self.gate_from_token = nn.Linear(dim, 2 * dim)
        self.gate_from_mem = nn.Linear(dim, 2 * dim, bias=False)

    def initial_state(self, batch_shape=()):
        return self.initial.expand(*batch_shape, self.n_slots, self.dim)

    def step(self, mem, token_emb):
        """One gated update: M_t = g_f * M_{t-1} + g_i * candidate.

        mem: (..., n_slots, d); token_emb: (..., d).
        """
        if token_emb.shape[-1] != self.dim:
            raise ValueError(f"embedding width {token_emb.shape[-1]} != memory width {self.dim}")
        kv = torch.cat([mem, token_emb.unsqueeze(-2)], dim=-2)
        candidate = self.ff(self.attn(mem, kv, kv))
        gates = self.gate_from_token(token_emb).unsqueeze(-2) + self.gate_from_mem(torch.tanh(mem))
        g_forget, g_input = torch.sigmoid(gates).chunk(2, dim=-1)
        return g_forget * mem + g_input * candidate

    def sequence(self, token_embs):
        """Memory state after each position of a shifted-target embedding run.

        token_embs: (..., T, d) -> (..., T, n_slots, d); the state at
        position t has seen embeddings 0..t only.
        """
        mem = self.initial_state(token_embs.shape[:-2])
        states = []
        for t in range(token_embs.shape[-2]):
            mem = self.step(mem, token_embs[..., t, :])
            states.append(mem)
        return torch.stack(states, dim=-3)


class MemoryAligner(nn.Module):
    """Enhance the memory by attending over the current image encoding."""

    def __init__(self, dim, n_heads):
        super().__init__()
        self.n_heads = n_heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)

    def forward(self, mem, h_img_curr):
        if h_img_curr.shape[-2] == 0:
            raise ValueError("empty image encoding in memory alignment")
        out, _ = scaled_attention(
            self.q(mem), self.k(h_img_curr), self.v(h_img_curr), self.n_heads
        )
        return mem + out


class MemoryConditionalLayerNorm(nn.Module):
    """Layer norm whose gain/bias get additive offsets predicted from memory.

    With ``mem=None`` (or zeroed offset maps) this is exactly standard layer
    normalization.
    """

    def __init__(self, dim, mem_flat_dim, eps=1e-6):
        super().__init__()
        self.eps = eps
        self.gain = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))
        self.delta_gain = nn.Linear(mem_flat_dim, dim)
        self.delta_bias = nn.Linear(mem_flat_dim, dim)
        nn.init.zeros_(self.delta_gain.weight)
        nn.init.zeros_(self.delta_gain.bias)
        nn.init.zeros_(self.delta_bias.weight)
        nn.init.zeros_(self.delta_bias.bias)

    def forward(self, x, mem_flat=None):
        mean = x.mean(dim=-1, keepdim=True)
        var = x.var(dim=-1, keepdim=True, unbiased=False)
        x_hat = (x - mean) / torch.sqrt(var + self.eps)
        if mem_flat is None:
            return self.gain * x_hat + self.bias
        gain = self.gain + self.delta_gain(mem_flat)
        bias = self.bias + self.delta_bias(mem_flat)
        return gain * x_hat + bias
