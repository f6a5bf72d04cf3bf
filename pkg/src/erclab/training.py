"""Shared training plumbing: determinism, conversation batches, the epoch loop."""
from __future__ import annotations

import copy
import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from erclab.config import OptimConfig
from erclab.datamodel import Conversation, Dataset, load_feature_matrix
from erclab.errors import TrainingDivergedError, ValidationError
from erclab.metrics import MetricReport, classification_report

log = logging.getLogger(__name__)


def seed_everything(seed: int) -> np.random.Generator:
    """Single-threaded, deterministic torch; returns the data-order RNG."""
    torch.manual_seed(seed)
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
    return np.random.default_rng(seed)


def state_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@dataclass
class ConvRecord:
    conv_id: str
    utt_ids: list[str]
    feats: dict[str, np.ndarray]  # modality -> [N, D]
    labels: np.ndarray  # [N], -1 where unlabeled


@dataclass
class ConvBatch:
    conv_ids: list[str]
    utt_ids: list[list[str]]
    feats: dict[str, torch.Tensor]  # modality -> [B, N_max, D]
    mask: torch.Tensor  # [B, N_max] bool
    labels: torch.Tensor  # [B, N_max] long, -1 on padding / unlabeled

    @property
    def valid(self) -> torch.Tensor:
        return self.mask & (self.labels >= 0)

    def flat_labels(self) -> np.ndarray:
        return self.labels[self.valid].numpy()

    def flat_utt_ids(self) -> list[str]:
        out = []
        for ids in self.utt_ids:
            out.extend(ids)
        return out


def utterance_vector(path) -> np.ndarray:
    """Mean over the rows of an utterance's feature matrix."""
    return load_feature_matrix(path).values.astype(np.float64).mean(axis=0)


def load_records(ds: Dataset, convs: Sequence[Conversation], modalities: Sequence[str]) -> list[ConvRecord]:
    records = []
    for conv in convs:
        feats = {}
        for m in modalities:
            feats[m] = np.stack([utterance_vector(ds.feature_path(u, m)) for u in conv.utterances])
        labels = np.array([-1 if u.label_index is None else u.label_index for u in conv.utterances])
        records.append(ConvRecord(conv.conv_id, [u.utt_id for u in conv.utterances], feats, labels))
    return records


def collate(records: Sequence[ConvRecord]) -> ConvBatch:
    n_max = max(len(r.labels) for r in records)
    b = len(records)
    feats = {}
    for m in records[0].feats:
        d = records[0].feats[m].shape[1]
        arr = np.zeros((b, n_max, d), dtype=np.float32)
        for i, r in enumerate(records):
            arr[i, : len(r.labels)] = r.feats[m]
        feats[m] = torch.from_numpy(arr)
    mask = torch.zeros((b, n_max), dtype=torch.bool)
    labels = torch.full((b, n_max), -1, dtype=torch.long)
    for i, r in enumerate(records):
        mask[i, : len(r.labels)] = True
        labels[i, : len(r.labels)] = torch.from_numpy(r.labels)
    return ConvBatch([r.conv_id for r in records], [r.utt_ids for r in records], feats, mask, labels)


def batches(records: Sequence[ConvRecord], batch_size: int, rng: np.random.Generator | None = None):
    order = np.arange(len(records)) if rng is None else rng.permutation(len(records))
    for start in range(0, len(order), batch_size):
        yield collate([records[i] for i in order[start:start + batch_size]])


def require_labeled(ds: Dataset, splits=("train", "val")) -> None:
    for split in splits:
        if split not in ds.splits or not ds.split(split):
            raise ValidationError(f"split {split!r} is missing or empty")
        if not ds.is_labeled(split):
            raise ValidationError(f"split {split!r} has unlabeled utterances; training needs labels")


def require_modalities(ds: Dataset, modalities: Sequence[str]) -> None:
    for split, convs in ds.splits.items():
        for conv in convs:
            for u in conv.utterances:
                missing = [m for m in modalities if m not in u.features]
                if missing:
                    raise ValidationError(f"utterance {u.utt_id!r} ({split}) lacks modality {missing[0]!r}")


def make_optimizer(params, cfg: OptimConfig) -> torch.optim.Optimizer:
    params = [p for p in params if p.requires_grad]
    if cfg.optimizer == "adamw":
        return torch.optim.AdamW(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    return torch.optim.Adam(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)


@dataclass
class FitResult:
    best_state: dict
    best_epoch: int
    best_report: MetricReport
    history: list[dict] = field(default_factory=list)


def fit(module: nn.Module, loss_fn: Callable[[ConvBatch], torch.Tensor], train: Sequence[ConvRecord],
        evaluate: Callable[[], MetricReport], cfg: OptimConfig, rng: np.random.Generator,
        selection_metric: str = "weighted_f1", params=None, batcher=batches) -> FitResult:
    """Minimise ``loss_fn`` over conversation batches; keep the parameters
    with the best validation ``selection_metric`` (first epoch wins ties).

    ``batcher(train, batch_size, rng)`` yields whatever ``loss_fn`` consumes;
    by default, padded conversation batches.
    """
    opt = make_optimizer(module.parameters() if params is None else params, cfg)
    clip_params = [p for g in opt.param_groups for p in g["params"]]
    best = None
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        module.train()
        total, n = 0.0, 0
        for batch in batcher(train, cfg.batch_size, rng):
            loss = loss_fn(batch)
            value = float(loss.detach())
            if not math.isfinite(value):
                raise TrainingDivergedError(step, value)
            opt.zero_grad()
            loss.backward()
            if cfg.grad_clip is not None:
                nn.utils.clip_grad_norm_(clip_params, cfg.grad_clip)
            opt.step()
            total += value
            n += 1
            step += 1
        module.eval()
        with torch.no_grad():
            report = evaluate()
        score = report.metric(selection_metric)
        history.append({"epoch": epoch, "train_loss": total / max(n, 1), selection_metric: score})
        if best is None or score > best.best_report.metric(selection_metric):
            best = FitResult(copy.deepcopy(module.state_dict()), epoch, report)
    module.load_state_dict(best.best_state)
    module.eval()
    best.history = history
    log.info("best epoch %d, val %s=%.4f", best.best_epoch, selection_metric,
             best.best_report.metric(selection_metric))
    return best


def score(gold: Sequence[int], pred: Sequence[int], num_classes: int) -> MetricReport:
    return classification_report(np.asarray(gold), np.asarray(pred), num_classes)
