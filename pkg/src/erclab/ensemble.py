"""Majority voting over expert predictions with a designated tiebreaker."""
from __future__ import annotations

import csv
import logging
from collections import Counter
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from erclab.datamodel import EmotionLabelSet
from erclab.errors import ValidationError
from erclab.metrics import MetricReport, classification_report

log = logging.getLogger(__name__)

PredictionTable = Mapping[str, Mapping[str, int]]


def _check_table(table: PredictionTable) -> list[str]:
    if not table:
        raise ValidationError("prediction table is empty")
    experts = sorted(table)
    ref = set(table[experts[0]])
    for e in experts[1:]:
        got = set(table[e])
        if got != ref:
            diff = sorted(got ^ ref)
            raise ValidationError(f"expert {e!r} covers a different utt_id set than {experts[0]!r} "
                                  f"(e.g. {diff[:3]})")
    return experts


def _leaders(labels: Sequence[int]) -> list[int]:
    counts = Counter(labels)
    top = max(counts.values())
    return [lab for lab, n in counts.items() if n == top]


def vote(labels: Sequence[int], tiebreak_label: int) -> int:
    leaders = _leaders(labels)
    if len(leaders) == 1:
        return leaders[0]
    if tiebreak_label in leaders:
        return tiebreak_label
    return min(leaders)


def majority_vote(table: PredictionTable, tiebreaker: str) -> dict[str, int]:
    """Per-utterance modal label.

    Ties among the leading labels go to the tiebreaker's prediction when it
    is one of them, otherwise to the lowest tied label index.
    """
    experts = _check_table(table)
    if len(experts) < 2:
        raise ValidationError("majority voting needs at least 2 experts")
    if tiebreaker not in table:
        raise ValidationError(f"unknown tiebreaker {tiebreaker!r}; experts are {experts}")
    out = {}
    fallbacks = 0
    for utt in sorted(table[tiebreaker]):
        labels = [table[e][utt] for e in experts]
        out[utt] = vote(labels, table[tiebreaker][utt])
        leaders = _leaders(labels)
        if len(leaders) > 1 and table[tiebreaker][utt] not in leaders:
            fallbacks += 1
    if fallbacks:
        log.info("tiebreaker %r was outside the tied leaders for %d utterances; used lowest index",
                 tiebreaker, fallbacks)
    return out


def ablate_combinations(table: PredictionTable, subsets: Iterable[Iterable[str]],
                        gold: Mapping[str, int], tiebreakers: Sequence[str],
                        num_classes: int) -> list[MetricReport]:
    """Score the majority vote of each expert subset against ``gold``."""
    _check_table(table)
    subsets = [tuple(s) for s in subsets]
    if len(subsets) != len(tiebreakers):
        raise ValidationError("need one tiebreaker per subset")
    reports = []
    for subset, tb in zip(subsets, tiebreakers):
        unknown = [e for e in subset if e not in table]
        if unknown:
            raise ValidationError(f"subset references unknown experts {unknown}")
        if tb not in subset:
            raise ValidationError(f"tiebreaker {tb!r} is not in subset {list(subset)}")
        sub = {e: table[e] for e in subset}
        voted = dict(sub[subset[0]]) if len(sub) == 1 else majority_vote(sub, tb)
        utts = sorted(voted)
        missing = [u for u in utts if gold.get(u) is None]
        if missing:
            raise ValidationError(f"no gold label for utterances {missing[:3]}")
        reports.append(classification_report([gold[u] for u in utts], [voted[u] for u in utts], num_classes))
    return reports


def read_prediction_table(path, labelset: EmotionLabelSet) -> dict[str, dict[str, int]]:
    """Parse ``utt_id,expert_id,pred_label`` CSV into a prediction table."""
    table: dict[str, dict[str, int]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        need = {"utt_id", "expert_id", "pred_label"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise ValidationError(f"{path}: header must contain {sorted(need)}, got {reader.fieldnames}")
        for lineno, row in enumerate(reader, start=2):
            try:
                label = labelset.index(row["pred_label"])
            except KeyError:
                raise ValidationError(f"{path}:{lineno}: unknown label {row['pred_label']!r}") from None
            preds = table.setdefault(row["expert_id"], {})
            if row["utt_id"] in preds:
                raise ValidationError(f"{path}:{lineno}: duplicate prediction for "
                                      f"({row['expert_id']!r}, {row['utt_id']!r})")
            preds[row["utt_id"]] = label
    return table


def write_prediction_table(path, table: PredictionTable, labelset: EmotionLabelSet) -> None:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["utt_id", "expert_id", "pred_label"])
        for expert in sorted(table):
            for utt in sorted(table[expert]):
                w.writerow([utt, expert, labelset.names[table[expert][utt]]])


def random_table(rng: np.random.Generator, n_experts: int, n_utts: int, num_classes: int) -> dict:
    """Random prediction table, handy for demos and property tests."""
    return {f"e{i}": {f"u{j}": int(rng.integers(num_classes)) for j in range(n_utts)}
            for i in range(n_experts)}
