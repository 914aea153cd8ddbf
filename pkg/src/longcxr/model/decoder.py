"""Hierarchical memory-driven decoder and the full report-prefill model.

Each decoder block holds two sub-blocks: the first attends the current
image encoding, the second the longitudinal representation; their outputs
are combined additively and layer-normalized. A beta-weighted fusion layer
mixes the block input with the first sub-block's output before it feeds
the second.
"""

import torch
from torch import nn

from .. import textproc
from ..config import ModelConfig
from ..vision import FeatureProjector
from .attention import MultiHeadAttention, causal_mask
from .encoder import TextEncoder, TransformerEncoder
from .fusion import CrossAttentionFusion
from .memory import MemoryAligner, MemoryConditionalLayerNorm, RelationalMemory


class DecoderSubBlock(nn.Module):
    """Self-attention, encoder-decoder attention over one context, feed-forward;
    residuals normalized with memory-conditional layer norm."""

    def __init__(self, dim, n_heads, ff_dim, mem_flat_dim, dropout=0.0):
        super().__init__()
        self.self_attn = MultiHeadAttention(dim, n_heads)
        self.cross_attn = MultiHeadAttention(dim, n_heads)
        self.ff = nn.Sequential(nn.Linear(dim, ff_dim), nn.ReLU(), nn.Linear(ff_dim, dim))
        self.norm1 = MemoryConditionalLayerNorm(dim, mem_flat_dim)
        self.norm2 = MemoryConditionalLayerNorm(dim, mem_flat_dim)
        self.norm3 = MemoryConditionalLayerNorm(dim, mem_flat_dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, context, mem_flat, self_mask, context_mask=None):
        x = self.norm1(x + self.drop(self.self_attn(x, x, x, mask=self_mask)), mem_flat)
        cmask = None if context_mask is None else context_mask.unsqueeze(-2)
        x = self.norm2(x + self.drop(self.cross_attn(x, context, context, mask=cmask)), mem_flat)
        x = self.norm3(x + self.drop(self.ff(x)), mem_flat)
        return x


class DecoderBlock(nn.Module):
    def __init__(self, dim, n_heads, ff_dim, mem_flat_dim, beta, dropout=0.0):
        super().__init__()
        self.beta = beta
        self.sub_image = DecoderSubBlock(dim, n_heads, ff_dim, mem_flat_dim, dropout)
        self.sub_long = DecoderSubBlock(dim, n_heads, ff_dim, mem_flat_dim, dropout)
        self.final_norm = nn.LayerNorm(dim)

    def fuse(self, h_in, h_dec_img):
        return (1.0 - self.beta) * h_in + self.beta * h_dec_img

    def forward(self, h_in, h_img_curr, h_long, mem_flat, self_mask,
                img_mask=None, long_mask=None):
        h_dec_img = self.sub_image(h_in, h_img_curr, mem_flat, self_mask, img_mask)
        h_fused = self.fuse(h_in, h_dec_img)
        if h_long is None:
            # baseline: a plain single-context transformer block
            return h_dec_img
        h_dec_long = self.sub_long(h_fused, h_long, mem_flat, self_mask, long_mask)
        return self.final_norm(h_dec_img + h_dec_long)


class LongitudinalReportModel(nn.Module):
    """End-to-end model: encoders, fusion, memory, hierarchical decoder.

    ``variant`` controls which inputs flow (ablations):
      baseline      current image only, no memory conditioning
      plus_image    current image + encoded previous image
      plus_report   current image + encoded previous report
      simple_fusion concatenated previous encodings, no cross-attention
      full          cross-attention fusion of previous image and report
    Every forward records the input tags it consumed in ``inputs_used``.
    """

    def __init__(self, config: ModelConfig, variant="full"):
        super().__init__()
        self.config = config
        self.variant = variant
        d, h = config.hidden, config.heads
        mem_flat = config.mem_slots * d

        self.projector = FeatureProjector(d, config.feat_dim)
        self.image_encoder = TransformerEncoder(d, h, config.enc_layers, config.ff_dim,
                                                config.dropout)
        self.text_encoder = TextEncoder(config.vocab_size, d, h, config.enc_layers,
                                        config.ff_dim, config.max_len, config.dropout,
                                        use_positions=config.text_positions)
        self.fusion = CrossAttentionFusion(d, h)
        self.memory = RelationalMemory(config.mem_slots, d, config.mem_heads)
        self.aligner = MemoryAligner(d, config.mem_heads)
        self.token_embed = nn.Embedding(config.vocab_size, d)
        self.dec_positions = nn.Embedding(config.max_len, d)
        self.blocks = nn.ModuleList(
            DecoderBlock(d, h, config.ff_dim, mem_flat, config.beta, config.dropout)
            for _ in range(config.dec_blocks)
        )
        self.out_proj = nn.Linear(d, config.vocab_size)
        self.inputs_used = set()

    # -- encoding ----------------------------------------------------------

    def encode_image(self, feats_2048):
        return self.image_encoder(self.projector(feats_2048))

    def _uses_prev_image(self):
        return self.variant in ("plus_image", "simple_fusion", "full")

    def _uses_prev_report(self):
        return self.variant in ("plus_report", "simple_fusion", "full")

    def encode_context(self, batch):
        """Encode whatever the active variant needs; returns a context dict."""
        self.inputs_used = {"image_curr"}
        h_img_curr = self.encode_image(batch["curr_feats"])
        h_long, long_mask = None, None

        h_img_prev = h_rep_prev = rep_mask = None
        if self._uses_prev_image():
            self.inputs_used.add("image_prev")
            h_img_prev = self.encode_image(batch["prev_feats"])
        if self._uses_prev_report():
            self.inputs_used.add("report_prev")
            rep_mask = batch.get("prev_report_mask")
            h_rep_prev = self.text_encoder(batch["prev_report_ids"], pad_mask=rep_mask)

        if self.variant == "plus_image":
            h_long = h_img_prev
        elif self.variant == "plus_report":
            h_long, long_mask = h_rep_prev, rep_mask
        elif self.variant == "simple_fusion":
            h_long = torch.cat([h_img_prev, h_rep_prev], dim=-2)
            if rep_mask is not None:
                ones = torch.ones(*h_img_prev.shape[:-1], dtype=torch.bool,
                                  device=h_img_prev.device)
                long_mask = torch.cat([ones, rep_mask], dim=-1)
        elif self.variant == "full":
            h_long, long_mask = self.fusion(h_img_prev, h_rep_prev, rep_pad_mask=rep_mask)
        return {"h_img_curr": h_img_curr, "h_long": h_long, "long_mask": long_mask}

    # -- decoding ----------------------------------------------------------

    def _aligned_memory_flat(self, input_embs, h_img_curr):
        """Per-position aligned memory, flattened for the conditional norms."""
        mem_seq = self.memory.sequence(input_embs)  # (..., T, slots, d)
        T = mem_seq.shape[-3]
        keys = h_img_curr.unsqueeze(-3).expand(*mem_seq.shape[:-2], h_img_curr.shape[-2],
                                               h_img_curr.shape[-1])
        aligned = self.aligner(mem_seq, keys)
        return aligned.flatten(-2)

    def decode(self, input_ids, context, target_pad_mask=None):
        """Teacher-forced decode of shifted-right input ids -> logits (..., T, |V|)."""
        T = input_ids.shape[-1]
        if T > self.config.max_len:
            raise ValueError(f"sequence length {T} exceeds max_len {self.config.max_len}")
        pos = torch.arange(T, device=input_ids.device)
        embs = self.token_embed(input_ids)
        x = embs + self.dec_positions(pos)

        mem_flat = None
        if self.variant != "baseline":
            mem_flat = self._aligned_memory_flat(embs, context["h_img_curr"])

        self_mask = causal_mask(T, device=input_ids.device)
        if target_pad_mask is not None:
            self_mask = self_mask & target_pad_mask.unsqueeze(-2)
        for block in self.blocks:
            x = block(x, context["h_img_curr"], context["h_long"], mem_flat, self_mask,
                      long_mask=context["long_mask"])
        return self.out_proj(x)

    def forward(self, batch):
        context = self.encode_context(batch)
        return self.decode(batch["target_in"], context,
                           target_pad_mask=batch.get("target_in_mask"))

    # -- generation --------------------------------------------------------

    @torch.no_grad()
    def generate(self, batch, mode="greedy", beam_size=3, max_len=None):
        """Autoregressive generation from BOS for a single sample (no batch dim)."""
        if max_len is None:
            max_len = self.config.max_len
        if max_len < 1:
            raise ValueError("max_len must be >= 1")
        self.eval()
        context = self.encode_context(batch)
        if mode == "greedy" or (mode == "beam" and beam_size == 1):
            return self._greedy(context, max_len)
        if mode == "beam":
            return self._beam(context, max_len, beam_size)
        raise ValueError(f"unknown decoding mode {mode!r}")

    def _step_logprobs(self, prefix, context):
        ids = torch.tensor(prefix, dtype=torch.long)
        logits = self.decode(ids, context)
        return torch.log_softmax(logits[-1], dim=-1)

    def _greedy(self, context, max_len):
        prefix = [textproc.BOS]
        while len(prefix) < max_len + 1:
            logp = self._step_logprobs(prefix, context)
            nxt = int(torch.argmax(logp))  # argmax takes the lowest id on ties
            prefix.append(nxt)
            if nxt == textproc.EOS:
                break
        return textproc.TokenSeq(ids=prefix[1:])

    def _beam(self, context, max_len, beam_size):
        # hypotheses: (ids tuple, logprob sum, finished)
        beams = [((textproc.BOS,), 0.0, False)]
        for _ in range(max_len):
            candidates = []
            for ids, score, done in beams:
                if done:
                    candidates.append((ids, score, True))
                    continue
                logp = self._step_logprobs(list(ids), context)
                top = torch.topk(logp, min(beam_size, logp.shape[-1]))
                for val, tok in zip(top.values.tolist(), top.indices.tolist()):
                    candidates.append((ids + (tok,), score + val, tok == textproc.EOS))
            # length-normalized score; ties broken toward lower token ids
            candidates.sort(key=lambda c: (-c[1] / max(len(c[0]) - 1, 1), c[0]))
            beams = candidates[:beam_size]
            if all(done for _, _, done in beams):
                break
        best = beams[0][0][1:]
        return textproc.TokenSeq(ids=list(best))
