"""Downstream evaluation head for frozen layer-wise speech representations.

A learned convex mix over encoder layers, a mean over frames and a small
two-layer ReLU network. Categorical tasks read logits; attribute tasks
(valence, arousal, dominance) are trained against ``sum_d (1 - CCC_d)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from erclab import autograd as ag
from erclab.config import ExperimentConfig
from erclab.context import LayerMixer, tile_features
from erclab.datamodel import Dataset, load_feature_matrix
from erclab.errors import ConfigError, ValidationError
from erclab.training import fit, require_labeled, score, seed_everything


@dataclass
class DownstreamHeadConfig:
    in_dim: int
    n_outputs: int
    hidden_dim: int = 256
    n_layers: int = 1

    def __post_init__(self):
        if min(self.in_dim, self.n_outputs, self.hidden_dim, self.n_layers) < 1:
            raise ConfigError(f"head dimensions must be positive: {self}")


class DownstreamHead(nn.Module):
    def __init__(self, in_dim: int, hidden_dim: int, n_outputs: int):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden_dim)
        self.fc2 = nn.Linear(hidden_dim, n_outputs)

    def forward(self, x):
        return self.fc2(torch.relu(self.fc1(x)))


class CareHead(nn.Module):
    def __init__(self, cfg: DownstreamHeadConfig):
        super().__init__()
        self.cfg = cfg
        self.mixer = LayerMixer(cfg.n_layers)
        self.head = DownstreamHead(cfg.in_dim, cfg.hidden_dim, cfg.n_outputs)

    def pooled(self, stack: torch.Tensor) -> torch.Tensor:
        """``[L, T, D]`` -> ``[D]`` (mix layers, then average frames)."""
        if stack.dim() != 3 or stack.shape[0] != self.cfg.n_layers or stack.shape[2] != self.cfg.in_dim:
            raise ValueError(f"expected a [{self.cfg.n_layers}, T, {self.cfg.in_dim}] stack, got {tuple(stack.shape)}")
        if stack.shape[1] == 0:
            raise ValueError("layer stack has no frames")
        return self.mixer(stack).mean(dim=0)

    def forward(self, stacks) -> torch.Tensor:
        """A single ``[L, T, D]`` stack or a list of them (frame counts may differ)."""
        if isinstance(stacks, torch.Tensor) and stacks.dim() == 3:
            return self.head(self.pooled(stacks))
        return self.head(torch.stack([self.pooled(s) for s in stacks]))


def downstream_classify(stack, model: CareHead) -> torch.Tensor:
    return model(stack)


def downstream_regress(stacks, model: CareHead, gold) -> tuple[torch.Tensor, torch.Tensor]:
    """Predictions ``[B, 3]`` and the loss ``3 - sum_d CCC_d``."""
    gold = np.asarray(gold, dtype=np.float64)
    if gold.ndim != 2 or gold.shape[0] < 2:
        raise ValueError(f"regression needs gold of shape [B >= 2, dims], got {gold.shape}")
    pred = model(stacks)
    if tuple(pred.shape) != gold.shape:
        raise ValueError(f"prediction shape {tuple(pred.shape)} does not match gold {gold.shape}")
    return pred, ag.ccc(gold, pred)


def layer_stack(values: np.ndarray, n_layers: int, tile: int = 1) -> torch.Tensor:
    """Reshape a layer-major ``[L*T, D]`` matrix into ``[L, T, D]``."""
    rows, cols = values.shape
    if rows % n_layers:
        raise ValidationError(f"{rows} rows do not split into {n_layers} layers")
    stack = torch.from_numpy(np.array(values, dtype=np.float32)).reshape(n_layers, rows // n_layers, cols)
    return tile_features(stack, tile) if tile > 1 else stack


@dataclass
class UtteranceItem:
    utt_id: str
    stack: torch.Tensor
    label: int


def load_items(ds: Dataset, split: str, cfg: ExperimentConfig) -> list[UtteranceItem]:
    items = []
    for _, u in ds.utterances(split):
        if cfg.care.modality not in u.features:
            raise ValidationError(f"utterance {u.utt_id!r} lacks modality {cfg.care.modality!r}")
        values = load_feature_matrix(ds.feature_path(u, cfg.care.modality)).values
        label = -1 if u.label_index is None else u.label_index
        items.append(UtteranceItem(u.utt_id, layer_stack(values, cfg.care.n_layers, cfg.care.tile), label))
    return items


def item_batches(items, batch_size: int, rng: np.random.Generator | None = None):
    order = np.arange(len(items)) if rng is None else rng.permutation(len(items))
    for start in range(0, len(order), batch_size):
        yield [items[i] for i in order[start:start + batch_size]]


@dataclass
class CareResult:
    model: CareHead
    best_epoch: int
    reports: dict
    history: list


def care_predict(model: CareHead, items) -> dict[str, tuple[int, np.ndarray]]:
    model.eval()
    out = {}
    with torch.no_grad():
        for batch in item_batches(items, 64):
            logits = model([it.stack for it in batch])
            for it, z in zip(batch, logits):
                out[it.utt_id] = (int(torch.argmax(z)), z.numpy())
    return out


def _report(model, items, num_classes):
    preds = care_predict(model, items)
    return score([it.label for it in items], [preds[it.utt_id][0] for it in items], num_classes)


def care_train(ds: Dataset, cfg: ExperimentConfig) -> CareResult:
    """Categorical training of the head on ``cfg.care.modality`` layer stacks."""
    require_labeled(ds)
    rng = seed_everything(cfg.seed)
    train = load_items(ds, "train", cfg)
    val = load_items(ds, "val", cfg)
    head_cfg = DownstreamHeadConfig(train[0].stack.shape[2], ds.num_classes, cfg.care.hidden_dim, cfg.care.n_layers)
    model = CareHead(head_cfg)
    counts = np.bincount([it.label for it in train], minlength=ds.num_classes)

    def loss_fn(batch):
        return ag.classification(model([it.stack for it in batch]), [it.label for it in batch], cfg.loss, counts)

    res = fit(model, loss_fn, train, lambda: _report(model, val, ds.num_classes), cfg.optim, rng,
              cfg.selection_metric, batcher=item_batches)
    reports = {"train": _report(model, train, ds.num_classes).to_dict(), "val": res.best_report.to_dict(),
               "mix_weights": [float(w) for w in model.mixer.weights().detach()]}
    return CareResult(model, res.best_epoch, reports, res.history)
