"""Attention blocks shared by the HCAM and MiSTER-E pipelines.

All modules accept either unbatched ``[T, d]`` or batched ``[B, T, d]``
inputs. Key masks are boolean with ``True`` marking valid positions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from erclab.errors import ConfigError


@dataclass
class AttentionConfig:
    model_dim: int = 120
    heads: int = 4
    dropout_rate: float = 0.1
    layers: int = 1

    def __post_init__(self):
        if self.model_dim <= 0 or self.heads <= 0 or self.layers <= 0:
            raise ConfigError("attention.model_dim, heads and layers must be positive")
        if self.model_dim % self.heads:
            raise ConfigError(f"attention.model_dim={self.model_dim} is not divisible by heads={self.heads}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"attention.dropout_rate must lie in [0, 1), got {self.dropout_rate}")


def _batched(x: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if x.dim() == 2:
        return x.unsqueeze(0), True
    if x.dim() == 3:
        return x, False
    raise ValueError(f"expected [T, d] or [B, T, d], got shape {tuple(x.shape)}")


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention over ``heads`` equal slices of ``d``."""

    def __init__(self, dim: int, heads: int = 1, dropout: float = 0.0):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.dim, self.heads, self.head_dim = dim, heads, dim // heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, q, k, v, key_mask=None):
        b, tq, _ = q.shape
        tk = k.shape[1]

        def split(x, t):
            return x.view(b, t, self.heads, self.head_dim).transpose(1, 2)

        qh = split(self.q_proj(q), tq)
        kh = split(self.k_proj(k), tk)
        vh = split(self.v_proj(v), tk)
        scores = qh @ kh.transpose(-1, -2) / math.sqrt(self.head_dim)
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        out = self.dropout(weights) @ vh
        out = out.transpose(1, 2).reshape(b, tq, self.dim)
        return self.out_proj(out), weights


class AttentionBlock(nn.Module):
    """``LayerNorm(Q + MultiHead(Q, K, V))``.

    Self-attention when ``k``/``v`` are omitted, cross-attention otherwise.
    """

    def __init__(self, cfg: AttentionConfig):
        super().__init__()
        self.cfg = cfg
        self.attn = MultiHeadAttention(cfg.model_dim, cfg.heads, cfg.dropout_rate)
        self.norm = nn.LayerNorm(cfg.model_dim, eps=1e-5)
        self.dropout = nn.Dropout(cfg.dropout_rate)

    def forward(self, q, k=None, v=None, key_mask=None, return_weights=False):
        k = q if k is None else k
        v = k if v is None else v
        qb, squeeze = _batched(q)
        kb, _ = _batched(k)
        vb, _ = _batched(v)
        d = self.cfg.model_dim
        if qb.shape[-1] != d or kb.shape[-1] != d or vb.shape[-1] != d:
            raise ValueError(f"feature dims {qb.shape[-1]}, {kb.shape[-1]}, {vb.shape[-1]} != model_dim {d}")
        if kb.shape[:2] != vb.shape[:2] or qb.shape[0] != kb.shape[0]:
            raise ValueError(f"shape mismatch: Q {tuple(q.shape)}, K {tuple(k.shape)}, V {tuple(v.shape)}")
        if key_mask is not None:
            key_mask = key_mask.to(torch.bool)
            if key_mask.dim() == 1:
                key_mask = key_mask.unsqueeze(0).expand(kb.shape[0], -1)
            if key_mask.shape != kb.shape[:2]:
                raise ValueError(f"key mask shape {tuple(key_mask.shape)} does not match keys {tuple(kb.shape[:2])}")
            if not key_mask.any(dim=1).all():
                raise ValueError("every key position is masked out")
        att, weights = self.attn(qb, kb, vb, key_mask)
        out = self.norm(qb + self.dropout(att))
        if squeeze:
            out, weights = out.squeeze(0), weights.squeeze(0)
        return (out, weights) if return_weights else out


class FeedForward(nn.Module):
    """Position-wise ``Linear -> ReLU -> Linear``."""

    def __init__(self, dim_in: int, hidden: int, dim_out: int | None = None, dropout: float = 0.0):
        super().__init__()
        self.fc1 = nn.Linear(dim_in, hidden)
        self.fc2 = nn.Linear(hidden, dim_out or dim_in)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x):
        return self.fc2(self.dropout(F.relu(self.fc1(x))))


class CoAttention(nn.Module):
    """Two cross-attention arms, each refined by self-attention, concatenated
    and passed through one shared position-wise feed-forward layer.

    ``tie_arms=True`` shares the cross and self blocks between the arms.
    """

    def __init__(self, cfg: AttentionConfig, ff_hidden: int | None = None, tie_arms: bool = False):
        super().__init__()
        self.cfg = cfg
        self.cross_s = AttentionBlock(cfg)
        self.self_s = AttentionBlock(cfg)
        if tie_arms:
            self.cross_t, self.self_t = self.cross_s, self.self_s
        else:
            self.cross_t = AttentionBlock(cfg)
            self.self_t = AttentionBlock(cfg)
        width = 2 * cfg.model_dim
        self.ff = FeedForward(width, ff_hidden or width, width, cfg.dropout_rate)

    def arms(self, speech, text, mask=None):
        if speech.shape[:-1] != text.shape[:-1]:
            raise ValueError(f"speech {tuple(speech.shape)} and text {tuple(text.shape)} are not utterance-aligned")
        arm_s = self.self_s(self.cross_s(speech, text, text, key_mask=mask), key_mask=mask)
        arm_t = self.self_t(self.cross_t(text, speech, speech, key_mask=mask), key_mask=mask)
        return torch.cat([arm_s, arm_t], dim=-1)

    def forward(self, speech, text, mask=None):
        return self.ff(self.arms(speech, text, mask))


def attentive_stats_pool(seq: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Concatenate the weighted mean and weighted standard deviation.

    ``seq`` is ``[T, D]`` (or ``[B, T, D]``) and ``weights`` a probability
    vector over ``T``. Variance is clamped at 0 before the square root.
    """
    if seq.shape[-2] == 0:
        raise ValueError("cannot pool an empty sequence")
    w = weights.unsqueeze(-1)
    mu = (w * seq).sum(dim=-2)
    second = (w * seq * seq).sum(dim=-2)
    var = torch.clamp(second - mu * mu, min=0.0)
    positive = var > 0
    # where() twice keeps the gradient finite at zero variance
    sigma = torch.where(positive, torch.sqrt(torch.where(positive, var, torch.ones_like(var))), torch.zeros_like(var))
    return torch.cat([mu, sigma], dim=-1)


class AttentiveStatsPooling(nn.Module):
    """Learned frame scorer followed by :func:`attentive_stats_pool`."""

    def __init__(self, dim: int, hidden: int = 128):
        super().__init__()
        self.score = nn.Sequential(nn.Linear(dim, hidden), nn.Tanh(), nn.Linear(hidden, 1))

    def frame_weights(self, seq, mask=None):
        s = self.score(seq).squeeze(-1)
        if mask is not None:
            s = s.masked_fill(~mask, float("-inf"))
        return torch.softmax(s, dim=-1)

    def forward(self, seq, mask=None):
        if seq.shape[-2] == 0:
            raise ValueError("cannot pool an empty sequence")
        return attentive_stats_pool(seq, self.frame_weights(seq, mask))
