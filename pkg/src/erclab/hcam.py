"""Hierarchical cross-attention model (HCAM) over precomputed features.

Training runs in three stages; each consumes only the frozen outputs of the
previous one:

I.   a context-free utterance classifier per modality; its penultimate
     activations are cached to ``<run>/stage1/cache/<modality>/<conv>.emf``
II.  a contextual GRU per modality, trained on the stage-I cache
III. co-attention fusion of the two stage-II sequences

Every stage minimises ``beta * CE + (1 - beta) * SupCon`` and keeps the
parameters with the best validation score.
"""
from __future__ import annotations

import io
import logging
from pathlib import Path

import numpy as np
import torch
from torch import nn

from erclab import autograd as ag
from erclab._io import atomic_write_bytes
from erclab.attention import AttentionConfig, CoAttention
from erclab.config import ExperimentConfig
from erclab.context import ContextualGRU
from erclab.datamodel import Dataset, load_feature_matrix, save_feature_matrix
from erclab.errors import StageOrderError
from erclab.losses import LossConfig, focal_loss, supcon_loss
from erclab.metrics import MetricReport
from erclab.training import (ConvRecord, batches, fit, load_records, require_labeled,
                             require_modalities, score, seed_everything, state_checksum)

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- objective

def hcam_loss(logits, targets, embeddings, labels, cfg: LossConfig):
    """NumPy reference of the combined objective.

    Returns ``(value, grad_logits, grad_embeddings)``. At ``beta=1`` the
    contrastive term is not evaluated at all; at ``beta=0`` the CE term is
    skipped.
    """
    beta = cfg.beta_hcam
    if beta is None or not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta_hcam must lie in [0, 1], got {beta}")
    logits = np.asarray(logits, dtype=np.float64)
    embeddings = np.asarray(embeddings, dtype=np.float64)
    value = 0.0
    g_logits = np.zeros_like(logits)
    g_emb = np.zeros_like(embeddings)
    if beta > 0:
        ce, g = focal_loss(logits, targets, gamma=0.0)
        value += beta * ce
        g_logits += beta * g
    if beta < 1:
        con, g = supcon_loss(embeddings, labels, cfg.tau_con, "include_anchor")
        value += (1 - beta) * con
        g_emb += (1 - beta) * g
    return value, g_logits, g_emb


def hcam_objective(logits: torch.Tensor, embeddings: torch.Tensor, targets: np.ndarray,
                   cfg: LossConfig) -> torch.Tensor:
    beta = cfg.beta_hcam
    total = logits.sum() * 0.0
    if beta > 0:
        total = total + beta * ag.focal(logits, targets, 0.0)
    if beta < 1 and len(targets) >= 2:
        total = total + (1 - beta) * ag.supcon_or_zero(embeddings, targets, cfg.tau_con, "include_anchor")
    return total


# ---------------------------------------------------------------- stage models

class UtteranceClassifier(nn.Module):
    """Stage I: context-free, position-wise ``Linear -> ReLU -> Linear``."""

    def __init__(self, in_dim: int, embed_dim: int, num_classes: int, dropout: float = 0.0):
        super().__init__()
        self.fc = nn.Linear(in_dim, embed_dim)
        self.dropout = nn.Dropout(dropout)
        self.out = nn.Linear(embed_dim, num_classes)

    def embed(self, x):
        return torch.relu(self.fc(x))

    def forward(self, x):
        return self.out(self.dropout(self.embed(x)))


class ContextStage(nn.Module):
    """Stage II: contextual GRU plus a linear classifier."""

    def __init__(self, in_dim: int, cfg: ExperimentConfig, num_classes: int):
        super().__init__()
        self.encoder = ContextualGRU(in_dim, cfg.context, heads=_heads_for(2 * cfg.context.hidden_dim, cfg))
        self.classifier = nn.Linear(self.encoder.out_dim, num_classes)

    def encode(self, x, mask=None):
        return self.encoder(x, mask)

    def forward(self, x, mask=None):
        h = self.encode(x, mask)
        return self.classifier(h), h


class FusionStage(nn.Module):
    """Stage III: co-attention over the stage-II sequences plus a classifier."""

    def __init__(self, dim: int, cfg: ExperimentConfig, num_classes: int):
        super().__init__()
        acfg = AttentionConfig(dim, _heads_for(dim, cfg), cfg.attention.dropout_rate)
        self.coattention = CoAttention(acfg)
        self.classifier = nn.Linear(2 * dim, num_classes)

    def forward(self, speech, text, mask=None):
        h = self.coattention(speech, text, mask)
        return self.classifier(h), h


def _heads_for(dim: int, cfg: ExperimentConfig) -> int:
    heads = cfg.attention.heads
    return heads if dim % heads == 0 else 1


class _JointStages(nn.Module):
    """Stages II and III trained together (ablation of the hierarchy)."""

    def __init__(self, stage2: nn.ModuleDict, stage3: FusionStage, modalities):
        super().__init__()
        self.stage2 = stage2
        self.stage3 = stage3
        self.modalities = list(modalities)

    def forward(self, batch):
        ms, mt = self.modalities
        hs = self.stage2[ms].encode(batch.feats[ms], batch.mask)
        ht = self.stage2[mt].encode(batch.feats[mt], batch.mask)
        return self.stage3(hs, ht, batch.mask)


# ---------------------------------------------------------------- persistence

def _save_params(path: Path, payload: dict) -> None:
    buf = io.BytesIO()
    torch.save(payload, buf)
    atomic_write_bytes(path, buf.getvalue())


def _load_params(path: Path) -> dict:
    return torch.load(path, map_location="cpu", weights_only=False)


# ---------------------------------------------------------------- the run

class HcamRun:
    """Holds one hierarchical training run and its artifacts on disk."""

    def __init__(self, ds: Dataset, cfg: ExperimentConfig, run_dir):
        self.ds = ds
        self.cfg = cfg
        self.run_dir = Path(run_dir)
        self.modalities = list(cfg.modalities)
        self.num_classes = ds.num_classes
        require_modalities(ds, self.modalities)
        self.split_names = [s for s in ("train", "val", "test") if s in ds.splits and ds.split(s)]
        self.raw = {s: load_records(ds, ds.split(s), self.modalities) for s in self.split_names}
        self.in_dims = {m: self.raw["train"][0].feats[m].shape[1] for m in self.modalities} \
            if "train" in self.raw else {}
        self.stage1: nn.ModuleDict | None = None
        self.stage2: nn.ModuleDict | None = None
        self.stage3: FusionStage | None = None
        self.reports: dict = {}
        self.rng = seed_everything(cfg.seed)

    # -- helpers
    def _stage_dir(self, k: int) -> Path:
        return self.run_dir / f"stage{k}"

    def _cache_path(self, modality: str, conv_id: str) -> Path:
        return self._stage_dir(1) / "cache" / modality / f"{conv_id}.emf"

    def _eval(self, records, logits_fn) -> MetricReport:
        gold, pred = [], []
        for batch in batches(records, max(self.cfg.optim.batch_size, 1)):
            logits = logits_fn(batch)
            valid = batch.valid
            gold.append(batch.labels[valid].numpy())
            pred.append(torch.argmax(logits[valid], dim=-1).numpy())
        return score(np.concatenate(gold), np.concatenate(pred), self.num_classes)

    def _objective(self, logits, emb, batch):
        valid = batch.valid
        return hcam_objective(logits[valid], emb[valid], batch.labels[valid].numpy(), self.cfg.loss)

    # -- stage I
    def train_stage1(self) -> dict:
        require_labeled(self.ds)
        cfg = self.cfg
        models = nn.ModuleDict()
        reports = {}
        for m in self.modalities:
            model = UtteranceClassifier(self.in_dims[m], cfg.hcam.embed_dim, self.num_classes, cfg.context.dropout)

            def loss_fn(batch, model=model, m=m):
                x = batch.feats[m]
                return self._objective(model(x), model.embed(x), batch)

            def logits_fn(batch, model=model, m=m):
                return model(batch.feats[m])

            res = fit(model, loss_fn, self.raw["train"], lambda: self._eval(self.raw["val"], logits_fn),
                      cfg.optim, self.rng, cfg.selection_metric)
            models[m] = model
            reports[m] = {"best_epoch": res.best_epoch, "val": res.best_report.to_dict(),
                          "train": self._eval(self.raw["train"], logits_fn).to_dict()}
        self.stage1 = models
        _save_params(self._stage_dir(1) / "params.bin", {"stage": 1, "state": models.state_dict()})
        self._write_cache()
        self.reports["stage1"] = reports
        return reports

    def _write_cache(self):
        with torch.no_grad():
            for split in self.split_names:
                for rec in self.raw[split]:
                    for m in self.modalities:
                        x = torch.from_numpy(rec.feats[m].astype(np.float32))
                        save_feature_matrix(self._cache_path(m, rec.conv_id), self.stage1[m].embed(x).numpy())

    def _cached_records(self, split: str) -> list[ConvRecord]:
        out = []
        for rec in self.raw[split]:
            feats = {}
            for m in self.modalities:
                path = self._cache_path(m, rec.conv_id)
                if not path.is_file():
                    raise StageOrderError(f"stage-I cache missing for {m}/{rec.conv_id}; run stage I first")
                feats[m] = load_feature_matrix(path).values.astype(np.float64)
            out.append(ConvRecord(rec.conv_id, rec.utt_ids, feats, rec.labels))
        return out

    # -- stage II
    def train_stage2(self) -> dict:
        if self.stage1 is None:
            raise StageOrderError("stage II needs stage-I artifacts; run stage I first")
        cfg = self.cfg
        cache = {s: self._cached_records(s) for s in self.split_names}
        self._cache = cache
        models = nn.ModuleDict()
        reports = {}
        for m in self.modalities:
            model = ContextStage(cfg.hcam.embed_dim, cfg, self.num_classes)

            def loss_fn(batch, model=model, m=m):
                logits, h = model(batch.feats[m], batch.mask)
                return self._objective(logits, h, batch)

            def logits_fn(batch, model=model, m=m):
                return model(batch.feats[m], batch.mask)[0]

            res = fit(model, loss_fn, cache["train"], lambda: self._eval(cache["val"], logits_fn),
                      cfg.optim, self.rng, cfg.selection_metric)
            models[m] = model
            reports[m] = {"best_epoch": res.best_epoch, "val": res.best_report.to_dict(),
                          "train": self._eval(cache["train"], logits_fn).to_dict()}
        self.stage2 = models
        _save_params(self._stage_dir(2) / "params.bin", {"stage": 2, "state": models.state_dict()})
        self.reports["stage2"] = reports
        return reports

    def _stage2_records(self, split: str) -> list[ConvRecord]:
        out = []
        with torch.no_grad():
            for rec in self._cache[split]:
                feats = {m: self.stage2[m].encode(torch.from_numpy(rec.feats[m].astype(np.float32))).numpy()
                         for m in self.modalities}
                out.append(ConvRecord(rec.conv_id, rec.utt_ids, feats, rec.labels))
        return out

    # -- stage III
    def train_stage3(self) -> dict:
        if self.stage2 is None:
            raise StageOrderError("stage III needs stage-II artifacts; run stage II first")
        cfg = self.cfg
        ms, mt = self.modalities
        recs = {s: self._stage2_records(s) for s in self.split_names}
        dim = self.stage2[ms].encoder.out_dim
        model = FusionStage(dim, cfg, self.num_classes)

        def loss_fn(batch):
            logits, h = model(batch.feats[ms], batch.feats[mt], batch.mask)
            return self._objective(logits, h, batch)

        def logits_fn(batch):
            return model(batch.feats[ms], batch.feats[mt], batch.mask)[0]

        res = fit(model, loss_fn, recs["train"], lambda: self._eval(recs["val"], logits_fn),
                  cfg.optim, self.rng, cfg.selection_metric)
        self.stage3 = model
        _save_params(self._stage_dir(3) / "params.bin", {"stage": 3, "state": model.state_dict()})
        report = {"best_epoch": res.best_epoch, "val": res.best_report.to_dict(),
                  "train": self._eval(recs["train"], logits_fn).to_dict()}
        self.reports["stage3"] = report
        return report

    def train_joint(self) -> dict:
        """Stages II and III as one optimisation (hierarchy ablation)."""
        if self.stage1 is None:
            raise StageOrderError("joint training needs stage-I artifacts; run stage I first")
        cfg = self.cfg
        cache = {s: self._cached_records(s) for s in self.split_names}
        self._cache = cache
        stage2 = nn.ModuleDict({m: ContextStage(cfg.hcam.embed_dim, cfg, self.num_classes)
                                for m in self.modalities})
        stage3 = FusionStage(stage2[self.modalities[0]].encoder.out_dim, cfg, self.num_classes)
        joint = _JointStages(stage2, stage3, self.modalities)

        def loss_fn(batch):
            logits, h = joint(batch)
            return self._objective(logits, h, batch)

        def logits_fn(batch):
            return joint(batch)[0]

        res = fit(joint, loss_fn, cache["train"], lambda: self._eval(cache["val"], logits_fn),
                  cfg.optim, self.rng, cfg.selection_metric)
        self.stage2, self.stage3 = stage2, stage3
        _save_params(self._stage_dir(2) / "params.bin", {"stage": 2, "joint": True, "state": stage2.state_dict()})
        _save_params(self._stage_dir(3) / "params.bin", {"stage": 3, "joint": True, "state": stage3.state_dict()})
        report = {"best_epoch": res.best_epoch, "val": res.best_report.to_dict(),
                  "train": self._eval(cache["train"], logits_fn).to_dict()}
        self.reports["stage2"] = {"joint": True}
        self.reports["stage3"] = report
        return report

    def train_all(self) -> dict:
        self.train_stage1()
        if self.cfg.hcam.joint:
            self.train_joint()
        else:
            self.train_stage2()
            self.train_stage3()
        return self.reports

    # -- inference
    def modules(self) -> nn.ModuleDict:
        if self.stage1 is None or self.stage2 is None or self.stage3 is None:
            raise StageOrderError("prediction needs all three stages trained")
        return nn.ModuleDict({"stage1": self.stage1, "stage2": self.stage2, "stage3": self.stage3})

    def forward(self, records):
        """Stage-III logits ``[B, N, C]`` for a list of raw-feature records."""
        batch = next(batches(records, len(records)))
        return hcam_logits(self.modules(), batch, self.modalities), batch

    def checksums(self) -> dict:
        out = {}
        for k, mod in ((1, self.stage1), (2, self.stage2), (3, self.stage3)):
            if mod is not None:
                out[f"stage{k}"] = state_checksum(mod)
        return out

    def load(self) -> None:
        """Rebuild all stages from ``<run>/stage{1,2,3}/params.bin``."""
        stages = build_stages(self.in_dims, self.cfg, self.num_classes)
        for k in (1, 2, 3):
            stages[f"stage{k}"].load_state_dict(_load_params(self._stage_dir(k) / "params.bin")["state"])
        stages.eval()
        self.stage1, self.stage2, self.stage3 = stages["stage1"], stages["stage2"], stages["stage3"]


def build_stages(in_dims: dict, cfg: ExperimentConfig, num_classes: int) -> nn.ModuleDict:
    """Freshly initialised stage modules, keyed ``stage1``..``stage3``."""
    s1 = nn.ModuleDict({m: UtteranceClassifier(in_dims[m], cfg.hcam.embed_dim, num_classes, cfg.context.dropout)
                        for m in cfg.modalities})
    s2 = nn.ModuleDict({m: ContextStage(cfg.hcam.embed_dim, cfg, num_classes) for m in cfg.modalities})
    s3 = FusionStage(s2[cfg.modalities[0]].encoder.out_dim, cfg, num_classes)
    return nn.ModuleDict({"stage1": s1, "stage2": s2, "stage3": s3})


def hcam_logits(stages: nn.ModuleDict, batch, modalities) -> torch.Tensor:
    """Full three-stage forward pass from raw features to ``[B, N, C]`` logits."""
    ms, mt = modalities
    with torch.no_grad():
        emb = {m: stages["stage1"][m].embed(batch.feats[m]) for m in modalities}
        h = {m: stages["stage2"][m].encode(emb[m], batch.mask) for m in modalities}
        logits, _ = stages["stage3"](h[ms], h[mt], batch.mask)
    return logits


def hcam_train(ds: Dataset, cfg: ExperimentConfig, run_dir) -> HcamRun:
    run = HcamRun(ds, cfg, run_dir)
    run.train_all()
    return run


def hcam_predict(run: HcamRun, records) -> dict[str, tuple[int, np.ndarray]]:
    """Map utt_id to ``(label, logits)``; ties go to the lowest class index."""
    out = {}
    for start in range(0, len(records), 64):
        chunk = records[start:start + 64]
        logits, batch = run.forward(chunk)
        for i, ids in enumerate(batch.utt_ids):
            for k, utt in enumerate(ids):
                z = logits[i, k].numpy()
                out[utt] = (int(np.argmax(z)), z)
    return out
