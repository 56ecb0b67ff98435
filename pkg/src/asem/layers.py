"""Transformer building blocks: attention, feed-forward, pre-norm encoder/decoder blocks."""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def sinusoid_positions(length: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Fixed sinusoidal position table of shape [length, dim]."""
    pos = torch.arange(length, dtype=torch.float64).unsqueeze(1)
    i = torch.arange(dim, dtype=torch.float64)
    rates = torch.pow(10000.0, -(2 * torch.div(i, 2, rounding_mode="floor")) / dim)
    angles = pos * rates
    table = torch.where(i % 2 == 0, torch.sin(angles), torch.cos(angles))
    return table.to(dtype)


def causal_mask(length: int, device=None) -> torch.Tensor:
    """[L, L] bool, True where attention is allowed (key index <= query index)."""
    return torch.ones(length, length, dtype=torch.bool, device=device).tril()


def masked_mean(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean of x [B, L, d] over positions where mask [B, L] is True."""
    m = mask.unsqueeze(-1).to(x.dtype)
    return (x * m).sum(1) / m.sum(1).clamp_min(1.0)


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, dropout: float = 0.0):
        super().__init__()
        assert d_model % n_heads == 0
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, query, key, value, key_mask=None, attn_mask=None):
        """key_mask: [B, Lk] True on real keys. attn_mask: [Lq, Lk] True where allowed."""
        B, Lq, d = query.shape
        Lk = key.shape[1]
        q = self.q_proj(query).view(B, Lq, self.n_heads, self.d_head).transpose(1, 2)
        k = self.k_proj(key).view(B, Lk, self.n_heads, self.d_head).transpose(1, 2)
        v = self.v_proj(value).view(B, Lk, self.n_heads, self.d_head).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.d_head)
        allowed = torch.ones(B, 1, Lq, Lk, dtype=torch.bool, device=query.device)
        if key_mask is not None:
            allowed = allowed & key_mask[:, None, None, :]
        if attn_mask is not None:
            allowed = allowed & attn_mask[None, None]
        scores = scores.masked_fill(~allowed, float("-inf"))
        weights = self.dropout(F.softmax(scores, dim=-1))
        out = (weights @ v).transpose(1, 2).reshape(B, Lq, d)
        return self.out_proj(out)


class FeedForward(nn.Module):
    def __init__(self, d_model: int, ffn_dim: int, dropout: float = 0.0):
        super().__init__()
        self.fc1 = nn.Linear(d_model, ffn_dim)
        self.fc2 = nn.Linear(ffn_dim, d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x):
        return self.fc2(self.dropout(F.gelu(self.fc1(x))))


class EncoderBlock(nn.Module):
    """Pre-norm self-attention + feed-forward."""

    def __init__(self, d_model, n_heads, ffn_dim, dropout=0.0):
        super().__init__()
        self.norm_attn = nn.LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, n_heads, dropout)
        self.norm_ffn = nn.LayerNorm(d_model)
        self.ffn = FeedForward(d_model, ffn_dim, dropout)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, mask):
        h = self.norm_attn(x)
        x = x + self.dropout(self.attn(h, h, h, key_mask=mask))
        return x + self.dropout(self.ffn(self.norm_ffn(x)))


class CrossBlock(nn.Module):
    """Pre-norm cross-attention + feed-forward: queries from one sequence, keys/values from another."""

    def __init__(self, d_model, n_heads, ffn_dim, dropout=0.0):
        super().__init__()
        self.norm_query = nn.LayerNorm(d_model)
        self.norm_memory = nn.LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, n_heads, dropout)
        self.norm_ffn = nn.LayerNorm(d_model)
        self.ffn = FeedForward(d_model, ffn_dim, dropout)
        self.dropout = nn.Dropout(dropout)

    def forward(self, query, memory, memory_mask):
        mem = self.norm_memory(memory)
        x = query + self.dropout(self.attn(self.norm_query(query), mem, mem, key_mask=memory_mask))
        return x + self.dropout(self.ffn(self.norm_ffn(x)))


class DecoderBlock(nn.Module):
    """Pre-norm causal self-attention, cross-attention to the encoder, feed-forward."""

    def __init__(self, d_model, n_heads, ffn_dim, dropout=0.0):
        super().__init__()
        self.norm_self = nn.LayerNorm(d_model)
        self.self_attn = MultiHeadAttention(d_model, n_heads, dropout)
        self.norm_cross = nn.LayerNorm(d_model)
        self.cross_attn = MultiHeadAttention(d_model, n_heads, dropout)
        self.norm_ffn = nn.LayerNorm(d_model)
        self.ffn = FeedForward(d_model, ffn_dim, dropout)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, x_mask, memory, memory_mask):
        L = x.shape[1]
        h = self.norm_self(x)
        x = x + self.dropout(self.self_attn(h, h, h, key_mask=x_mask,
                                            attn_mask=causal_mask(L, x.device)))
        h = self.norm_cross(x)
        x = x + self.dropout(self.cross_attn(h, memory, memory, key_mask=memory_mask))
        return x + self.dropout(self.ffn(self.norm_ffn(x)))
