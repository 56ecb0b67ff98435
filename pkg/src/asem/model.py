"""The ASEM network.

Stage one encodes the dialogue: a general encoder over the turn-weighted
context, a per-position sentiment distribution that mixes K sentiment-aware
expert encoders, and an emotion distribution over the fused representation.
Stage two decodes: M listener decoders, one per emotion, are mixed by the
emotion distribution and refined by a meta-decoder into vocabulary logits.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .corpus import Batch
from .layers import CrossBlock, DecoderBlock, EncoderBlock, masked_mean, sinusoid_positions


@dataclass
class ForwardTrace:
    """Every intermediate activation of one forward pass (context in model order)."""

    context_mask: torch.Tensor       # [B, L]
    G_h: torch.Tensor                # [B, L, d]
    sentiment_logits: torch.Tensor   # [B, L, K]
    S_att_pos: torch.Tensor          # [B, L, K]
    S_att_pooled: torch.Tensor       # [B, K]
    pooled_sentiment_logits: torch.Tensor  # [B, K]
    expert_out: torch.Tensor         # [B, K, d]
    W_att: torch.Tensor              # [B, L, d]
    S_h: torch.Tensor                # [B, L, d]
    E_att: torch.Tensor              # [B, M]
    emotion_logits: torch.Tensor     # [B, M]
    listener_out: Optional[torch.Tensor] = None  # [B, M, Lr, d]
    token_logits: Optional[torch.Tensor] = None  # [B, Lr, V]


@dataclass
class LossBundle:
    L1: torch.Tensor
    L2: torch.Tensor
    L3: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict:
        return {k: float(getattr(self, k)) for k in ("L1", "L2", "L3", "total")}


def attention_combine(S_att_pos: torch.Tensor, expert_out: torch.Tensor) -> torch.Tensor:
    """Per-position mixture of expert vectors: [B, L, K] x [B, K, d] -> [B, L, d]."""
    return torch.bmm(S_att_pos, expert_out)


def fuse(W_att: torch.Tensor, G_h: torch.Tensor) -> torch.Tensor:
    return W_att + G_h


class ASEM(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = c = config
        d = c.d_model
        self.embedding = nn.Embedding(c.vocab_size, c.embed_dim, padding_idx=0)
        self.embed_proj = nn.Linear(c.embed_dim, d, bias=False) if c.embed_dim != d else None
        self.dropout = nn.Dropout(c.dropout)

        self.encoder = nn.ModuleList(
            EncoderBlock(d, c.n_heads, c.ffn_dim, c.dropout) for _ in range(c.n_layers))
        self.encoder_norm = nn.LayerNorm(d)
        self.sentiment_proj = nn.Linear(d, c.n_sentiments)
        self.emotion_proj = nn.Linear(d, c.n_emotions)
        if not c.single_enc_dec:
            self.experts = nn.ModuleList(
                CrossBlock(d, c.n_heads, c.ffn_dim, c.dropout) for _ in range(c.n_sentiments))
            self.listeners = nn.ModuleList(
                DecoderBlock(d, c.n_heads, c.ffn_dim, c.dropout) for _ in range(c.n_emotions))
        self.meta_decoder = DecoderBlock(d, c.n_heads, c.ffn_dim, c.dropout)
        self.decoder_norm = nn.LayerNorm(d)
        self.output_proj = nn.Linear(d, c.vocab_size)

    # ------------------------------------------------------------ embedding

    def order_context(self, batch: Batch):
        """Context ids in model order, with the current-turn indicator.

        The corpus stores history followed by the current turn. With
        ``current_turn_first`` the current turn is rotated to the front of the
        non-PAD span; padding stays at the end either way.
        """
        ids, mask = batch.context_ids, batch.context_mask
        B, L = ids.shape
        pos = torch.arange(L).expand(B, L)
        start = batch.current_start.unsqueeze(1)
        end = batch.current_end.unsqueeze(1)
        if self.config.current_turn_first:
            n_cur = end - start
            src = torch.where(pos < n_cur, pos + start, torch.where(pos < end, pos - n_cur, pos))
            ids = ids.gather(1, src)
            is_current = pos < n_cur
        else:
            is_current = (pos >= start) & (pos < end)
        return ids, mask, is_current

    def _project(self, emb):
        return self.embed_proj(emb) if self.embed_proj is not None else emb

    def weighted_embeddings(self, ids, is_current):
        """Token embeddings with current-turn rows scaled by the turn weight (before positions)."""
        emb = self.embedding(ids)
        w = self.config.effective_turn_weight
        scale = torch.where(is_current, torch.tensor(w, dtype=emb.dtype), torch.tensor(1.0, dtype=emb.dtype))
        return self._project(emb * scale.unsqueeze(-1))

    def add_positions(self, x):
        return x + sinusoid_positions(x.shape[1], x.shape[2], x.dtype)

    def embed_and_weight(self, batch: Batch):
        ids, mask, is_current = self.order_context(batch)
        return self.add_positions(self.weighted_embeddings(ids, is_current)), mask

    def embed_response(self, ids):
        return self.add_positions(self._project(self.embedding(ids)))

    # ------------------------------------------------------------ stage one

    def general_encode(self, x, mask):
        x = self.dropout(x)
        for block in self.encoder:
            x = block(x, mask)
        return self.encoder_norm(x)

    def sentiment_head(self, G_h, mask):
        logits = self.sentiment_proj(G_h)
        # PAD rows get zero logits, hence a uniform distribution that nothing consumes.
        logits = logits.masked_fill(~mask.unsqueeze(-1), 0.0)
        S_att_pos = F.softmax(logits, dim=-1)
        pooled_logits = masked_mean(logits, mask)
        return logits, S_att_pos, F.softmax(pooled_logits, dim=-1), pooled_logits

    def expert_encode(self, G_h, context_emb, mask):
        pooled = [masked_mean(expert(G_h, context_emb, mask), mask) for expert in self.experts]
        return torch.stack(pooled, dim=1)

    def emotion_head(self, S_h, mask):
        logits = self.emotion_proj(masked_mean(S_h, mask))
        return F.softmax(logits, dim=-1), logits

    def encode(self, batch: Batch) -> ForwardTrace:
        c = self.config
        x, mask = self.embed_and_weight(batch)
        G_h = self.general_encode(x, mask)
        s_logits, S_att_pos, S_att_pooled, pooled_logits = self.sentiment_head(G_h, mask)
        B, L, d = G_h.shape
        if c.use_sae and not c.single_enc_dec:
            expert_out = self.expert_encode(G_h, x, mask)
            W_att = attention_combine(S_att_pos, expert_out)
            S_h = fuse(W_att, G_h)
        else:
            expert_out = G_h.new_zeros(B, c.n_sentiments, d)
            W_att = torch.zeros_like(G_h)
            S_h = G_h
        E_att, e_logits = self.emotion_head(S_h, mask)
        return ForwardTrace(mask, G_h, s_logits, S_att_pos, S_att_pooled, pooled_logits,
                            expert_out, W_att, S_h, E_att, e_logits)

    # ------------------------------------------------------------ stage two

    def listener_decode(self, resp_emb, resp_mask, S_h, ctx_mask):
        outs = [listener(resp_emb, resp_mask, S_h, ctx_mask) for listener in self.listeners]
        return torch.stack(outs, dim=1)

    def meta_decode(self, meta_in, resp_mask, S_h, ctx_mask):
        h = self.meta_decoder(meta_in, resp_mask, S_h, ctx_mask)
        return self.output_proj(self.decoder_norm(h))

    def decode(self, response_in, trace: ForwardTrace):
        """Token logits for a (SOS-started) response prefix given a stage-one trace."""
        resp_mask = response_in != 0
        emb = self.dropout(self.embed_response(response_in))
        if self.config.single_enc_dec:
            return self.meta_decode(emb, resp_mask, trace.S_h, trace.context_mask), None
        D = self.listener_decode(emb, resp_mask, trace.S_h, trace.context_mask)
        mixed = torch.einsum("bm,bmld->bld", trace.E_att, D)
        return self.meta_decode(mixed, resp_mask, trace.S_h, trace.context_mask), D

    def forward(self, batch: Batch) -> ForwardTrace:
        trace = self.encode(batch)
        trace.token_logits, trace.listener_out = self.decode(batch.response_ids[:, :-1], trace)
        return trace


def compute_losses(trace: ForwardTrace, batch: Batch, config: ModelConfig,
                   terms: tuple[str, ...] = ("L1", "L2", "L3")) -> LossBundle:
    """Sentiment, emotion and response losses. Terms not in ``terms`` contribute zero."""
    s_t, e_t = batch.sentiment_targets, batch.emotion_targets
    if s_t.numel() and (s_t.min() < 0 or s_t.max() >= config.n_sentiments):
        raise ValueError(f"sentiment target out of range [0, {config.n_sentiments})")
    if e_t.numel() and (e_t.min() < 0 or e_t.max() >= config.n_emotions):
        raise ValueError(f"emotion target out of range [0, {config.n_emotions})")
    zero = trace.G_h.new_zeros(())
    L1 = L2 = L3 = zero
    if "L1" in terms and config.use_sentiment_loss:
        L1 = F.cross_entropy(trace.pooled_sentiment_logits, s_t)
    if "L2" in terms:
        L2 = F.cross_entropy(trace.emotion_logits, e_t)
    if "L3" in terms and trace.token_logits is not None:
        targets = batch.response_ids[:, 1:]
        V = trace.token_logits.shape[-1]
        L3 = F.cross_entropy(trace.token_logits.reshape(-1, V), targets.reshape(-1), ignore_index=0)
    return LossBundle(L1, L2, L3, (L1 + L2) + L3)


def token_nll(trace: ForwardTrace, batch: Batch) -> tuple[float, int]:
    """Summed gold-token negative log-likelihood and the number of scored tokens.

    Accumulated in float64 so perplexity is not limited by float32 log-softmax rounding.
    """
    targets = batch.response_ids[:, 1:]
    V = trace.token_logits.shape[-1]
    nll = F.cross_entropy(trace.token_logits.double().reshape(-1, V), targets.reshape(-1),
                          ignore_index=0, reduction="sum")
    return float(nll), int((targets != 0).sum())
