"""Torch wrappers around the NumPy losses.

Forward and backward both come from :mod:`erclab.losses`; torch only
chains the returned gradients into the model parameters.
"""
from __future__ import annotations

import numpy as np
import torch

from erclab import losses


class _NumpyLoss(torch.autograd.Function):
    @staticmethod
    def forward(ctx, fn, *tensors):
        arrays = [t.detach().to(torch.float64).cpu().numpy() for t in tensors]
        value, grads = fn(*arrays)
        if not isinstance(grads, tuple):
            grads = (grads,)
        ctx.grads = [torch.as_tensor(np.ascontiguousarray(g), dtype=t.dtype)
                     for g, t in zip(grads, tensors)]
        return tensors[0].new_tensor(value)

    @staticmethod
    def backward(ctx, grad_out):
        return (None, *[grad_out * g for g in ctx.grads])


def focal(logits: torch.Tensor, targets, gamma: float = 0.0, weights=None) -> torch.Tensor:
    t = np.asarray(targets)
    return _NumpyLoss.apply(lambda z: losses.focal_loss(z, t, gamma, weights), logits)


def vs(logits: torch.Tensor, targets, counts, gamma_vs: float, tau_vs: float, weights=None) -> torch.Tensor:
    t = np.asarray(targets)
    return _NumpyLoss.apply(lambda z: losses.vs_loss(z, t, counts, gamma_vs, tau_vs, weights), logits)


def supcon(embeddings: torch.Tensor, labels, tau: float, variant: str) -> torch.Tensor:
    y = np.asarray(labels)
    return _NumpyLoss.apply(lambda e: losses.supcon_loss(e, y, tau, variant), embeddings)


def supcon_or_zero(embeddings: torch.Tensor, labels, tau: float, variant: str) -> torch.Tensor:
    """Like :func:`supcon` but a batch without positive pairs contributes 0."""
    try:
        return supcon(embeddings, labels, tau, variant)
    except losses.NoPositivePairsError:
        return embeddings.sum() * 0.0


def kl(p_ref: torch.Tensor, p_other: torch.Tensor) -> torch.Tensor:
    return _NumpyLoss.apply(losses.kl_consistency, p_ref, p_other)


def ccc(gold, pred: torch.Tensor) -> torch.Tensor:
    g = np.asarray(gold, dtype=np.float64)
    return _NumpyLoss.apply(lambda p: losses.ccc_loss(g, p), pred)


def classification(logits: torch.Tensor, targets, cfg: losses.LossConfig, counts=None) -> torch.Tensor:
    """Batch-mean classification loss selected by ``cfg.objective``."""
    weights = None
    if cfg.objective in ("wce", "wfocal", "vs"):
        if cfg.class_weights is not None:
            weights = cfg.class_weights
        elif counts is not None:
            weights = losses.class_weights(counts)
    if cfg.objective in ("ce", "wce"):
        return focal(logits, targets, 0.0, weights)
    if cfg.objective in ("focal", "wfocal"):
        return focal(logits, targets, cfg.gamma_focal, weights)
    if counts is None:
        raise ValueError("VS loss needs training class counts")
    return vs(logits, targets, counts, cfg.gamma_vs, cfg.tau_vs, weights)
