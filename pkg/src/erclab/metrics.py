"""Classification and regression metrics.

Conventions for absent classes (frozen in the tests):

* F1 is 0 when precision and recall are both 0/0.
* Weighted F1 weights each class by its gold support, so classes with no
  gold instances drop out.
* Macro F1 averages over classes that appear in gold *or* predictions.
* UAR averages recall over classes with gold support.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np


@dataclass
class MetricReport:
    confusion: list[list[int]]
    per_class_f1: list[float]
    weighted_f1: float
    macro_f1: float
    uar: float
    n_samples: int

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(**{k: d[k] for k in ("confusion", "per_class_f1", "weighted_f1",
                                        "macro_f1", "uar", "n_samples")})

    def metric(self, name: str) -> float:
        if name not in ("weighted_f1", "macro_f1", "uar"):
            raise KeyError(name)
        return getattr(self, name)


def confusion_matrix(gold, pred, num_classes: int) -> np.ndarray:
    gold = np.asarray(gold, dtype=np.int64).reshape(-1)
    pred = np.asarray(pred, dtype=np.int64).reshape(-1)
    if gold.shape != pred.shape:
        raise ValueError(f"gold has {gold.size} items, pred has {pred.size}")
    if gold.size == 0:
        raise ValueError("no samples to score")
    for name, a in (("gold", gold), ("pred", pred)):
        if a.min() < 0 or a.max() >= num_classes:
            raise ValueError(f"{name} index out of range [0, {num_classes})")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (gold, pred), 1)
    return cm


def classification_report(gold, pred, num_classes: int) -> MetricReport:
    cm = confusion_matrix(gold, pred, num_classes)
    tp = np.diag(cm).astype(np.float64)
    support = cm.sum(axis=1).astype(np.float64)
    predicted = cm.sum(axis=0).astype(np.float64)
    denom = support + predicted
    f1 = np.divide(2.0 * tp, denom, out=np.zeros(num_classes), where=denom > 0)
    recall = np.divide(tp, support, out=np.zeros(num_classes), where=support > 0)

    has_gold = support > 0
    seen = has_gold | (predicted > 0)
    return MetricReport(
        confusion=cm.tolist(),
        per_class_f1=f1.tolist(),
        weighted_f1=float((support * f1).sum() / support.sum()),
        macro_f1=float(f1[seen].mean()),
        uar=float(recall[has_gold].mean()),
        n_samples=int(cm.sum()),
    )


@dataclass
class RegressionPair:
    gold: np.ndarray
    pred: np.ndarray

    def __post_init__(self):
        self.gold = np.asarray(self.gold, dtype=np.float64).reshape(-1)
        self.pred = np.asarray(self.pred, dtype=np.float64).reshape(-1)
        if self.gold.shape != self.pred.shape:
            raise ValueError(f"length mismatch: gold {self.gold.size}, pred {self.pred.size}")
        if self.gold.size < 2:
            raise ValueError("CCC needs at least 2 samples")

    @property
    def mean_gold(self) -> float:
        return float(self.gold.mean())

    @property
    def mean_pred(self) -> float:
        return float(self.pred.mean())

    @property
    def var_gold(self) -> float:
        return float(self.gold.var())

    @property
    def var_pred(self) -> float:
        return float(self.pred.var())

    @property
    def pearson(self) -> float:
        sg, sp = np.sqrt(self.var_gold), np.sqrt(self.var_pred)
        if sg == 0 or sp == 0:
            return 0.0
        cov = ((self.gold - self.mean_gold) * (self.pred - self.mean_pred)).mean()
        return float(cov / (sg * sp))


def ccc(gold, pred=None) -> float:
    """Concordance correlation coefficient with population moments.

    Accepts either a :class:`RegressionPair` or two vectors. Returns 0 when
    either side has zero variance.
    """
    pair = gold if isinstance(gold, RegressionPair) else RegressionPair(gold, pred)
    vg, vp = pair.var_gold, pair.var_pred
    if vg == 0 or vp == 0:
        return 0.0
    num = 2.0 * pair.pearson * np.sqrt(vg) * np.sqrt(vp)
    return float(num / (vp + vg + (pair.mean_gold - pair.mean_pred) ** 2))
