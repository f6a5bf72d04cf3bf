"""Loss functions with exact analytic gradients (NumPy, float64).

Every loss returns ``(value, gradient)`` where the gradient has the shape of
the differentiable input(s). :mod:`erclab.autograd` wraps these as torch
autograd functions so training uses the same code path that the gradient
checks verify.

Batch reduction follows each objective's definition: the focal/VS family
averages over the batch, supervised contrastive and KL sum.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import NamedTuple, Sequence

import numpy as np

from erclab.errors import ConfigError, NoPositivePairsError

KL_EPS = 1e-12


@dataclass
class LossConfig:
    """Loss hyper-parameters.

    ``beta_hcam`` has no default on purpose: HCAM runs must set it.
    """

    gamma_focal: float = 2.0
    gamma_vs: float = 0.3
    tau_vs: float = 1.0
    tau_con: float = 1.0
    lambda_con: float = 2.0
    alpha_kl: float = 0.1
    beta_hcam: float | None = None
    lambda_care: float = 1.0
    class_weights: list[float] | None = None
    objective: str = "focal"

    def __post_init__(self):
        nonneg = ("gamma_focal", "gamma_vs", "tau_vs", "lambda_con", "alpha_kl", "lambda_care")
        for name in nonneg:
            if getattr(self, name) < 0:
                raise ConfigError(f"loss.{name} must be >= 0, got {getattr(self, name)}")
        if self.tau_con <= 0:
            raise ConfigError(f"loss.tau_con must be > 0, got {self.tau_con}")
        if self.beta_hcam is not None and not 0.0 <= self.beta_hcam <= 1.0:
            raise ConfigError(f"loss.beta_hcam must lie in [0, 1], got {self.beta_hcam}")
        if self.class_weights is not None and any(w <= 0 for w in self.class_weights):
            raise ConfigError("loss.class_weights entries must be > 0")
        if self.objective not in ("ce", "wce", "focal", "wfocal", "vs"):
            raise ConfigError(f"loss.objective must be one of ce/wce/focal/wfocal/vs, got {self.objective!r}")

    @classmethod
    def iemocap_style(cls, **overrides) -> "LossConfig":
        """MiSTER-E settings used for IEMOCAP (and MOSI)."""
        return cls(**{"lambda_con": 2.0, "alpha_kl": 0.1, "tau_con": 1.0, **overrides})

    @classmethod
    def meld_style(cls, **overrides) -> "LossConfig":
        return cls(**{"lambda_con": 1.0, "alpha_kl": 1e-3, "tau_con": 0.05, **overrides})

    @classmethod
    def abhinaya_wfl(cls, **overrides) -> "LossConfig":
        return cls(**{"objective": "wfocal", "gamma_focal": 2.0, **overrides})

    @classmethod
    def abhinaya_vs(cls, **overrides) -> "LossConfig":
        return cls(**{"objective": "vs", "gamma_vs": 0.3, "tau_vs": 1.0, **overrides})

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


# ---------------------------------------------------------------- helpers

def log_softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(z))


def _targets(targets, batch: int, num_classes: int) -> np.ndarray:
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.shape[0] != batch:
        raise ValueError(f"expected {batch} targets, got {t.shape[0]}")
    if t.size and (t.min() < 0 or t.max() >= num_classes):
        raise ValueError(f"target index out of range [0, {num_classes})")
    return t


def _weights(weights, num_classes: int) -> np.ndarray:
    if weights is None:
        return np.ones(num_classes)
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.shape[0] != num_classes:
        raise ValueError(f"expected {num_classes} class weights, got {w.shape[0]}")
    if np.any(w <= 0):
        raise ValueError("class weights must be positive")
    return w


# ---------------------------------------------------------------- class weights

def class_weights(counts: Sequence[int]) -> np.ndarray:
    """Inverse-frequency weights ``N / (N_c * C)``."""
    counts = np.asarray(counts, dtype=np.float64).reshape(-1)
    if counts.size == 0:
        raise ValueError("no classes")
    zero = np.flatnonzero(counts <= 0)
    if zero.size:
        raise ValueError(f"class weights undefined: zero count for class(es) {zero.tolist()}")
    return counts.sum() / (counts * counts.size)


# ---------------------------------------------------------------- focal family

def focal_loss(logits, targets, gamma: float = 0.0, weights=None) -> tuple[float, np.ndarray]:
    """Weighted focal loss, batch mean.

    ``l_i = -w[y_i] * (1 - p_i)**gamma * log p_i`` with ``p_i`` the softmax
    probability of the true class. ``gamma=0`` is weighted cross-entropy and
    ``weights=None`` means unit weights.
    """
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 2:
        raise ValueError(f"logits must be [B, C], got shape {z.shape}")
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    b, c = z.shape
    t = _targets(targets, b, c)
    w = _weights(weights, c)[t]

    logp_all = log_softmax(z)
    p_all = np.exp(logp_all)
    rows = np.arange(b)
    logp = logp_all[rows, t]
    # 1 - p summed from the other classes keeps precision when p is near 1
    others = p_all.copy()
    others[rows, t] = 0.0
    one_minus_p = others.sum(axis=1)
    p = p_all[rows, t]

    mod = one_minus_p ** gamma
    loss = -(w * mod * logp)

    # dl/dlogp_true, chaining through p = exp(logp): d(1-p)^g/dlogp = -g (1-p)^(g-1) p
    if gamma == 0:
        dmod = np.zeros(b)
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            dmod = np.where(one_minus_p > 0, -gamma * one_minus_p ** (gamma - 1.0) * p, 0.0)
    dl_dlogp = -w * (dmod * logp + mod)

    onehot = np.zeros_like(z)
    onehot[rows, t] = 1.0
    grad = dl_dlogp[:, None] * (onehot - p_all) / b
    return float(loss.mean()), grad


def weighted_cross_entropy(logits, targets, weights=None) -> tuple[float, np.ndarray]:
    return focal_loss(logits, targets, gamma=0.0, weights=weights)


def vs_adjust(logits, counts, gamma_vs: float, tau_vs: float) -> tuple[np.ndarray, np.ndarray]:
    """Return adjusted logits and the per-class multiplicative scale."""
    counts = np.asarray(counts, dtype=np.float64).reshape(-1)
    if np.any(counts <= 0):
        raise ValueError(f"VS loss undefined: zero count for class(es) {np.flatnonzero(counts <= 0).tolist()}")
    scale = (counts / counts.max()) ** gamma_vs
    bias = tau_vs * np.log(counts / counts.sum())
    return np.asarray(logits, dtype=np.float64) * scale + bias, scale


def vs_loss(logits, targets, counts, gamma_vs: float = 0.3, tau_vs: float = 1.0,
            weights=None) -> tuple[float, np.ndarray]:
    """Vector-scaling loss: weighted CE on class-rescaled, class-shifted logits."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 2:
        raise ValueError(f"logits must be [B, C], got shape {z.shape}")
    if len(counts) != z.shape[1]:
        raise ValueError(f"expected {z.shape[1]} class counts, got {len(counts)}")
    if gamma_vs < 0 or tau_vs < 0:
        raise ValueError("gamma_vs and tau_vs must be >= 0")
    z_hat, scale = vs_adjust(z, counts, gamma_vs, tau_vs)
    loss, g_hat = focal_loss(z_hat, targets, gamma=0.0, weights=weights)
    return loss, g_hat * scale


# ---------------------------------------------------------------- supervised contrastive

SUPCON_VARIANTS = ("exclude_anchor", "include_anchor")


def supcon_loss(embeddings, labels, tau: float = 1.0,
                variant: str = "exclude_anchor") -> tuple[float, np.ndarray]:
    """Supervised contrastive loss (sum over anchors) on L2-normalised rows.

    ``exclude_anchor``: positives and denominator both skip the anchor.
    ``include_anchor``: the anchor is part of its own positive set and of the
    denominator, exactly as in HCAM's formulation.

    Anchors without positives are skipped; if every anchor is skipped
    :class:`NoPositivePairsError` is raised. The gradient is taken w.r.t. the
    un-normalised ``embeddings``.
    """
    if variant not in SUPCON_VARIANTS:
        raise ValueError(f"variant must be one of {SUPCON_VARIANTS}, got {variant!r}")
    if tau <= 0:
        raise ValueError("tau must be > 0")
    e = np.asarray(embeddings, dtype=np.float64)
    if e.ndim != 2 or e.shape[0] < 2:
        raise ValueError(f"embeddings must be [B>=2, D], got shape {e.shape}")
    y = np.asarray(labels).reshape(-1)
    if y.shape[0] != e.shape[0]:
        raise ValueError("labels and embeddings disagree on batch size")
    b = e.shape[0]

    norms = np.linalg.norm(e, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("zero embedding cannot be normalised")
    x = e / norms
    s = x @ x.T / tau

    eye = np.eye(b, dtype=bool)
    pos = y[:, None] == y[None, :]
    denom = np.ones((b, b), dtype=bool)
    if variant == "exclude_anchor":
        pos &= ~eye
        denom &= ~eye
    n_pos = pos.sum(axis=1)
    valid = n_pos > 0
    if not valid.any():
        raise NoPositivePairsError("no anchor in the batch has a positive partner")

    masked = np.where(denom, s, -np.inf)
    row_max = masked.max(axis=1, keepdims=True)
    expd = np.where(denom, np.exp(masked - row_max), 0.0)
    z_sum = expd.sum(axis=1, keepdims=True)
    lse = (row_max + np.log(z_sum)).ravel()
    attn = expd / z_sum

    safe_n = np.maximum(n_pos, 1)
    mean_pos = np.where(pos, s, 0.0).sum(axis=1) / safe_n
    per_anchor = np.where(valid, lse - mean_pos, 0.0)
    loss = per_anchor.sum()

    # dL/dS[j, k] = softmax_j(k) - [k in P_j] / |P_j| for valid anchors j
    g_s = (attn - pos / safe_n[:, None]) * valid[:, None]
    g_x = (g_s + g_s.T) @ x / tau
    # back through x = e / ||e||
    g_e = (g_x - x * (g_x * x).sum(axis=1, keepdims=True)) / norms
    return float(loss), g_e


# ---------------------------------------------------------------- KL consistency

def kl_consistency(p_ref, p_other, eps: float = KL_EPS,
                   simplex_tol: float = 1e-6) -> tuple[float, tuple[np.ndarray, np.ndarray]]:
    """Sum over rows of KL(p_ref || p_other).

    Probabilities are clamped to ``eps`` inside the logarithms only. Returns
    gradients w.r.t. both inputs; clamped entries receive zero gradient
    through their logarithm.
    """
    p = np.asarray(p_ref, dtype=np.float64)
    q = np.asarray(p_other, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 2:
        raise ValueError(f"probability matrices must share a [B, C] shape, got {p.shape} and {q.shape}")
    for name, m in (("p_ref", p), ("p_other", q)):
        if np.any(m < -simplex_tol) or np.any(np.abs(m.sum(axis=1) - 1.0) > simplex_tol):
            raise ValueError(f"{name} rows are not on the probability simplex")
    pc = np.maximum(p, eps)
    qc = np.maximum(q, eps)
    log_ratio = np.log(pc) - np.log(qc)
    loss = float((p * log_ratio).sum())
    g_p = log_ratio + np.where(p > eps, 1.0, 0.0)
    g_q = -np.where(q > eps, p / qc, 0.0)
    return loss, (g_p, g_q)


# ---------------------------------------------------------------- CARE distillation

@dataclass
class CareTargets:
    """Batched distillation targets: semantic [B, D_t], acoustic [B, T, D_a]."""

    semantic: np.ndarray
    acoustic: np.ndarray

    def __post_init__(self):
        self.semantic = np.asarray(self.semantic, dtype=np.float64)
        self.acoustic = np.asarray(self.acoustic, dtype=np.float64)
        if not (np.isfinite(self.semantic).all() and np.isfinite(self.acoustic).all()):
            raise ValueError("CARE targets must be finite")


class CareLoss(NamedTuple):
    semantic: float
    acoustic: float
    total: float
    grad_semantic: np.ndarray
    grad_acoustic: np.ndarray


def care_distillation_loss(sem_pred, targets: CareTargets, ac_pred, lambda_care: float = 1.0) -> CareLoss:
    """Utterance-level semantic MSE plus frame-level acoustic MSE.

    Gradients are those of the total ``L_sem + lambda * L_acoust``.
    """
    sp = np.asarray(sem_pred, dtype=np.float64)
    ap = np.asarray(ac_pred, dtype=np.float64)
    if sp.shape != targets.semantic.shape or sp.ndim != 2:
        raise ValueError(f"semantic prediction shape {sp.shape} != target {targets.semantic.shape}")
    if ap.shape != targets.acoustic.shape or ap.ndim != 3:
        raise ValueError(f"acoustic prediction shape {ap.shape} != target {targets.acoustic.shape}")
    if ap.shape[0] != sp.shape[0]:
        raise ValueError("semantic and acoustic batches differ in size")
    b, t = ap.shape[:2]
    d_sem = sp - targets.semantic
    d_ac = ap - targets.acoustic
    l_sem = float((d_sem ** 2).sum() / b)
    l_ac = float((d_ac ** 2).sum() / (b * t))
    return CareLoss(l_sem, l_ac, l_sem + lambda_care * l_ac,
                    2.0 * d_sem / b, lambda_care * 2.0 * d_ac / (b * t))


# ---------------------------------------------------------------- CCC objective

def ccc_loss(gold, pred) -> tuple[float, np.ndarray]:
    """``sum_d (1 - CCC_d)`` over output columns, with gradient w.r.t. ``pred``.

    Population moments throughout. A column with zero variance in gold or
    prediction has CCC 0 (the closed form already evaluates to 0 there).
    """
    g = np.asarray(gold, dtype=np.float64)
    p = np.asarray(pred, dtype=np.float64)
    if g.ndim == 1:
        g, p = g[:, None], p[:, None]
    if g.shape != p.shape:
        raise ValueError(f"gold {g.shape} and pred {p.shape} differ")
    n = g.shape[0]
    if n < 2:
        raise ValueError("CCC needs at least 2 samples")
    gc = g - g.mean(axis=0)
    pc = p - p.mean(axis=0)
    cov = (gc * pc).mean(axis=0)
    den = (gc ** 2).mean(axis=0) + (pc ** 2).mean(axis=0) + (g.mean(axis=0) - p.mean(axis=0)) ** 2
    safe = np.where(den > 0, den, 1.0)
    ccc = np.where(den > 0, 2.0 * cov / safe, 0.0)
    # d den / d p_i = 2 pc_i / n - 2 (mg - mp) / n  = 2 (p_i - mg) / n
    d_cov = gc / n
    d_den = 2.0 * (p - g.mean(axis=0)) / n
    d_ccc = np.where(den > 0, 2.0 * d_cov / safe - 2.0 * cov * d_den / safe ** 2, 0.0)
    return float((1.0 - ccc).sum()), -d_ccc
