"""MiSTER-E: per-modality context networks, bidirectional cross-modal fusion
and a decision-level mixture-of-experts gate, trained jointly.

Three experts each emit logits per utterance: speech (its CAN classifier),
text (likewise) and multimodal (the fusion network). A single affine layer
maps the concatenated logits to three mixing weights.
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from erclab import autograd as ag
from erclab.attention import AttentionBlock, AttentionConfig
from erclab.config import ExperimentConfig
from erclab.context import ContextAdditionNetwork
from erclab.datamodel import Dataset, EmotionLabelSet, split_class_counts
from erclab.losses import LossConfig
from erclab.metrics import MetricReport
from erclab.training import (ConvBatch, batches, fit, load_records, require_labeled,
                             require_modalities, score, seed_everything)

log = logging.getLogger(__name__)

EXPERTS = ("speech", "text", "multimodal")


class FusionNetwork(nn.Module):
    """Bidirectional cross-attention, per-modality self-attention, then a
    linear classifier on the concatenated streams."""

    def __init__(self, in_dim_s: int, in_dim_t: int, cfg: AttentionConfig, num_classes: int):
        super().__init__()
        d = cfg.model_dim
        one = AttentionConfig(d, cfg.heads, cfg.dropout_rate)
        self.proj_s = nn.Linear(in_dim_s, d)
        self.proj_t = nn.Linear(in_dim_t, d)
        self.cross_ts = AttentionBlock(one)  # speech queries attend to text
        self.cross_st = AttentionBlock(one)  # text queries attend to speech
        self.self_s = nn.ModuleList(AttentionBlock(one) for _ in range(cfg.layers))
        self.self_t = nn.ModuleList(AttentionBlock(one) for _ in range(cfg.layers))
        self.classifier = nn.Linear(2 * d, num_classes)
        self.model_dim = d

    def cross(self, e_s, e_t, mask=None):
        if e_s.shape[:-1] != e_t.shape[:-1]:
            raise ValueError(f"speech and text sequences differ in length: {tuple(e_s.shape)} vs {tuple(e_t.shape)}")
        p_s, p_t = self.proj_s(e_s), self.proj_t(e_t)
        return self.cross_ts(p_s, p_t, key_mask=mask), self.cross_st(p_t, p_s, key_mask=mask)

    def forward(self, e_s, e_t, mask=None):
        m_s, m_t = self.cross(e_s, e_t, mask)
        for blk in self.self_s:
            m_s = blk(m_s, key_mask=mask)
        for blk in self.self_t:
            m_t = blk(m_t, key_mask=mask)
        return m_s, m_t, self.classifier(torch.cat([m_s, m_t], dim=-1))


def gate_fuse(gate: nn.Linear, y_s, y_t, y_m):
    """Softmax-gated convex combination of the three expert logit vectors."""
    if not (y_s.shape == y_t.shape == y_m.shape):
        raise ValueError(f"expert logits differ in shape: {tuple(y_s.shape)}, {tuple(y_t.shape)}, {tuple(y_m.shape)}")
    beta = torch.softmax(gate(torch.cat([y_s, y_t, y_m], dim=-1)), dim=-1)
    fused = beta[..., 0:1] * y_s + beta[..., 1:2] * y_t + beta[..., 2:3] * y_m
    return beta, fused


class MoEGate(nn.Module):
    def __init__(self, num_classes: int):
        super().__init__()
        self.affine = nn.Linear(3 * num_classes, 3)

    def forward(self, y_s, y_t, y_m):
        return gate_fuse(self.affine, y_s, y_t, y_m)


@dataclass
class MisterOutputs:
    y_s: torch.Tensor | None
    y_t: torch.Tensor | None
    y_m: torch.Tensor
    fused: torch.Tensor
    beta: torch.Tensor
    m_s: torch.Tensor
    m_t: torch.Tensor


class MisterModel(nn.Module):
    """With ``monolithic=True`` the expert heads and the gate are dropped:
    the contextual streams go straight into fusion and ``y_m`` is the answer."""

    def __init__(self, in_dim_s: int, in_dim_t: int, cfg: ExperimentConfig, num_classes: int,
                 monolithic: bool = False):
        super().__init__()
        self.monolithic = monolithic
        self.can_s = ContextAdditionNetwork(in_dim_s, num_classes, cfg.context)
        self.can_t = ContextAdditionNetwork(in_dim_t, num_classes, cfg.context)
        self.fusion = FusionNetwork(self.can_s.out_dim, self.can_t.out_dim, cfg.attention, num_classes)
        self.gate = None if monolithic else MoEGate(num_classes)

    def forward(self, x_s, x_t, mask=None) -> MisterOutputs:
        e_s = self.can_s.encode(x_s, mask)
        e_t = self.can_t.encode(x_t, mask)
        m_s, m_t, y_m = self.fusion(e_s, e_t, mask)
        if self.monolithic:
            beta = torch.zeros(y_m.shape[:-1] + (3,), dtype=y_m.dtype)
            beta[..., 2] = 1.0
            return MisterOutputs(None, None, y_m, y_m, beta, m_s, m_t)
        y_s = self.can_s.classifier(self.can_s.dropout(e_s))
        y_t = self.can_t.classifier(self.can_t.dropout(e_t))
        beta, fused = self.gate(y_s, y_t, y_m)
        return MisterOutputs(y_s, y_t, y_m, fused, beta, m_s, m_t)


def _probs(z):
    return torch.softmax(z.to(torch.float64), dim=-1)


def mister_objective(out: MisterOutputs, labels: torch.Tensor, mask: torch.Tensor,
                     cfg: LossConfig, counts=None) -> torch.Tensor:
    """Sum over the conversations in the batch (per-conversation losses are
    not normalised by length). ``labels`` is ``[B, N]`` with -1 for padding."""
    valid = mask & (labels >= 0)
    targets = labels[valid].numpy()
    n = len(targets)
    if n == 0:
        return out.y_m.sum() * 0.0

    def cls(z):
        return ag.classification(z[valid], targets, cfg, counts) * n

    total = cls(out.y_m)
    if out.y_s is not None:
        total = total + cls(out.y_s) + cls(out.y_t) + cls(out.fused)
        if cfg.alpha_kl > 0:
            p_m = _probs(out.y_m[valid])
            total = total + cfg.alpha_kl * (ag.kl(p_m, _probs(out.y_s[valid])) + ag.kl(p_m, _probs(out.y_t[valid])))
    if cfg.lambda_con > 0:
        for i in range(labels.shape[0]):
            keep = valid[i]
            if int(keep.sum()) == 0:
                continue
            z = torch.cat([out.m_s[i][keep], out.m_t[i][keep]], dim=0)
            y = np.concatenate([labels[i][keep].numpy()] * 2)
            total = total + cfg.lambda_con * ag.supcon_or_zero(z, y, cfg.tau_con, "exclude_anchor")
    return total


@dataclass
class MisterResult:
    model: MisterModel
    best_epoch: int
    reports: dict
    history: list


def _forward(model: MisterModel, batch: ConvBatch, modalities) -> MisterOutputs:
    ms, mt = modalities
    return model(batch.feats[ms], batch.feats[mt], batch.mask)


def collect(model: MisterModel, records, modalities, num_classes: int) -> dict:
    """Reports for the fused output and each expert, plus mean gate weights."""
    gold, preds, betas = [], {k: [] for k in ("fused",) + EXPERTS}, []
    model.eval()
    with torch.no_grad():
        for batch in batches(records, 16):
            out = _forward(model, batch, modalities)
            valid = batch.valid
            gold.append(batch.labels[valid].numpy())
            preds["fused"].append(out.fused[valid].argmax(-1).numpy())
            preds["multimodal"].append(out.y_m[valid].argmax(-1).numpy())
            if out.y_s is not None:
                preds["speech"].append(out.y_s[valid].argmax(-1).numpy())
                preds["text"].append(out.y_t[valid].argmax(-1).numpy())
            betas.append(out.beta[valid].numpy())
    g = np.concatenate(gold)
    reports = {k: score(g, np.concatenate(v), num_classes) for k, v in preds.items() if v}
    return {"reports": reports, "mean_gate": np.concatenate(betas).mean(axis=0)}


def mister_train(ds: Dataset, cfg: ExperimentConfig) -> MisterResult:
    require_labeled(ds)
    modalities = list(cfg.modalities)
    require_modalities(ds, modalities)
    rng = seed_everything(cfg.seed)
    train = load_records(ds, ds.split("train"), modalities)
    val = load_records(ds, ds.split("val"), modalities)
    counts = split_class_counts(ds, "train")
    ms, mt = modalities
    model = MisterModel(train[0].feats[ms].shape[1], train[0].feats[mt].shape[1], cfg,
                        ds.num_classes, cfg.mister.monolithic)

    def loss_fn(batch):
        return mister_objective(_forward(model, batch, modalities), batch.labels, batch.mask, cfg.loss, counts)

    def evaluate() -> MetricReport:
        return collect(model, val, modalities, ds.num_classes)["reports"]["fused"]

    res = fit(model, loss_fn, train, evaluate, cfg.optim, rng, cfg.selection_metric)
    reports = {}
    for split, recs in (("train", train), ("val", val)):
        c = collect(model, recs, modalities, ds.num_classes)
        reports[split] = {"fused": c["reports"]["fused"].to_dict(),
                          "experts": {k: v.to_dict() for k, v in c["reports"].items() if k != "fused"},
                          "mean_gate": [float(b) for b in c["mean_gate"]]}
    return MisterResult(model, res.best_epoch, reports, res.history)


def mister_predict(model: MisterModel, records, modalities) -> dict[str, tuple[int, np.ndarray]]:
    """utt_id -> (label index, gate weights [3]); argmax of the fused logits."""
    out = {}
    model.eval()
    with torch.no_grad():
        for batch in batches(records, 16):
            o = _forward(model, batch, modalities)
            for i, ids in enumerate(batch.utt_ids):
                for k, utt in enumerate(ids):
                    out[utt] = (int(torch.argmax(o.fused[i, k])), o.beta[i, k].numpy().astype(np.float64))
    return out


def predictions_csv(preds: dict, labelset: EmotionLabelSet) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["utt_id", "pred_label", "beta_s", "beta_t", "beta_m"])
    for utt in sorted(preds):
        label, beta = preds[utt]
        w.writerow([utt, labelset.names[label]] + [f"{b:.6f}" for b in beta])
    return buf.getvalue()
