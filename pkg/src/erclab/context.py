"""Conversation-level context encoders and the convex layer mixer."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from erclab.attention import AttentionBlock, AttentionConfig, FeedForward
from erclab.errors import ConfigError


@dataclass
class ContextConfig:
    hidden_dim: int = 512
    gru_layers: int = 3
    dropout: float = 0.2
    inception_kernels: list[int] = field(default_factory=lambda: [1, 3, 5])

    def __post_init__(self):
        if self.hidden_dim <= 0 or self.gru_layers <= 0:
            raise ConfigError("context.hidden_dim and context.gru_layers must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"context.dropout must lie in [0, 1), got {self.dropout}")
        if not self.inception_kernels or any(k <= 0 or k % 2 == 0 for k in self.inception_kernels):
            raise ConfigError(f"context.inception_kernels must be odd positive integers, got {self.inception_kernels}")


def _as_batch(x, mask):
    """Promote ``[N, D]`` to ``[1, N, D]`` with an all-valid mask."""
    squeeze = x.dim() == 2
    if squeeze:
        x = x.unsqueeze(0)
    if x.shape[1] == 0:
        raise ValueError("empty utterance sequence")
    if mask is None:
        mask = torch.ones(x.shape[:2], dtype=torch.bool, device=x.device)
    elif mask.dim() == 1:
        mask = mask.unsqueeze(0)
    return x, mask, squeeze


class BiGRU(nn.Module):
    """Bidirectional GRU that respects per-sequence lengths."""

    def __init__(self, in_dim: int, hidden: int, layers: int = 1, dropout: float = 0.0):
        super().__init__()
        self.gru = nn.GRU(in_dim, hidden, num_layers=layers, batch_first=True,
                          bidirectional=True, dropout=dropout if layers > 1 else 0.0)
        self.out_dim = 2 * hidden

    def forward(self, x, mask):
        lengths = mask.sum(dim=1)
        if bool((lengths == mask.shape[1]).all()):
            out, _ = self.gru(x)
            return out
        packed = pack_padded_sequence(x, lengths.cpu(), batch_first=True, enforce_sorted=False)
        out, _ = self.gru(packed)
        out, _ = pad_packed_sequence(out, batch_first=True, total_length=x.shape[1])
        return out


class ContextualGRU(nn.Module):
    """BiGRU over the utterances of a conversation, then self-attention and a
    position-wise ReLU feed-forward. Output width is ``2 * hidden_dim``."""

    def __init__(self, in_dim: int, cfg: ContextConfig, heads: int = 1):
        super().__init__()
        self.gru = BiGRU(in_dim, cfg.hidden_dim, cfg.gru_layers, cfg.dropout)
        self.out_dim = self.gru.out_dim
        self.attn = AttentionBlock(AttentionConfig(self.out_dim, heads, cfg.dropout))
        self.ff = FeedForward(self.out_dim, self.out_dim, self.out_dim, cfg.dropout)

    def forward(self, x, mask=None):
        x, mask, squeeze = _as_batch(x, mask)
        h = self.gru(x, mask)
        h = self.ff(self.attn(h, key_mask=mask))
        return h.squeeze(0) if squeeze else h


class TemporalInception(nn.Module):
    """Parallel same-length 1-D convolutions over the utterance axis,
    concatenated and linearly projected."""

    def __init__(self, in_dim: int, out_dim: int, kernels=(1, 3, 5), branch_dim: int | None = None):
        super().__init__()
        branch_dim = branch_dim or in_dim
        self.kernels = tuple(kernels)
        self.branches = nn.ModuleList(
            nn.Conv1d(in_dim, branch_dim, k, padding=k // 2) for k in self.kernels)
        self.proj = nn.Linear(branch_dim * len(self.kernels), out_dim)

    def forward(self, x, mask=None):
        x, mask, squeeze = _as_batch(x, mask)
        # zero the padding so it cannot leak into valid positions
        xc = (x * mask.unsqueeze(-1)).transpose(1, 2)
        h = torch.cat([conv(xc) for conv in self.branches], dim=1).transpose(1, 2)
        out = self.proj(h)
        return out.squeeze(0) if squeeze else out


class ContextAdditionNetwork(nn.Module):
    """TIN -> BiGRU, added to a projection of the input, then a linear classifier."""

    def __init__(self, in_dim: int, num_classes: int, cfg: ContextConfig):
        super().__init__()
        self.tin = TemporalInception(in_dim, in_dim, cfg.inception_kernels)
        self.gru = BiGRU(in_dim, cfg.hidden_dim, cfg.gru_layers, cfg.dropout)
        self.residual = nn.Linear(in_dim, self.gru.out_dim)
        self.dropout = nn.Dropout(cfg.dropout)
        self.classifier = nn.Linear(self.gru.out_dim, num_classes)
        self.out_dim = self.gru.out_dim

    def encode(self, x, mask=None):
        x, mask, squeeze = _as_batch(x, mask)
        h = self.gru(self.tin(x, mask), mask) + self.residual(x)
        return h.squeeze(0) if squeeze else h

    def forward(self, x, mask=None):
        return self.classifier(self.dropout(self.encode(x, mask)))


def convex_layer_mix(stack: torch.Tensor, raw_weights: torch.Tensor) -> torch.Tensor:
    """``sum_l softmax(raw_weights)[l] * stack[l]`` for a ``[L, T, D]`` stack.

    A leading batch axis (``[B, L, T, D]``) is also accepted.
    """
    if stack.dim() not in (3, 4):
        raise ValueError(f"layer stack must be [L, T, D] or [B, L, T, D], got {tuple(stack.shape)}")
    n_layers = stack.shape[-3]
    if raw_weights.shape != (n_layers,):
        raise ValueError(f"{raw_weights.numel()} mixing weights for {n_layers} layers")
    w = torch.softmax(raw_weights, dim=0)
    return torch.tensordot(w, stack, dims=([0], [stack.dim() - 3]))


class LayerMixer(nn.Module):
    def __init__(self, n_layers: int):
        super().__init__()
        if n_layers < 1:
            raise ValueError("need at least one layer")
        self.raw_weights = nn.Parameter(torch.zeros(n_layers))

    def weights(self) -> torch.Tensor:
        return torch.softmax(self.raw_weights, dim=0)

    def forward(self, stack):
        return convex_layer_mix(stack, self.raw_weights)


def tile_features(layer: torch.Tensor, times: int = 2) -> torch.Tensor:
    """Duplicate the feature axis ``times`` times (e.g. 768 -> 1536)."""
    return layer.tile((1,) * (layer.dim() - 1) + (times,))


def stack_layers(layers) -> torch.Tensor:
    """Stack per-layer ``[T, D]`` tensors, rejecting mismatched shapes."""
    shapes = {tuple(l.shape) for l in layers}
    if len(shapes) != 1:
        raise ValueError(f"layer shapes differ: {sorted(shapes)}")
    return torch.stack(list(layers))
