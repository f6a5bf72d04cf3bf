"""Deterministic synthetic corpora for desk-scale checks.

``context_dependent``
    Two classes. Each utterance carries a binary cue ``s_k`` (the sign of a
    projection of its features) and ``label_k = s_k XOR label_{k-1}`` with
    ``label_0 = 0``. Features alone say almost nothing about the label; the
    running parity of the cues recovers it exactly.
``modality_imbalanced``
    Text features sit near per-class means (about 95% separable); speech
    features are pure noise.
``separable``
    Both modalities carry well separated class means.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from erclab.datamodel import (Conversation, Dataset, EmotionLabelSet, Utterance,
                              save_feature_matrix, save_manifest)

KINDS = ("context_dependent", "modality_imbalanced", "separable")
MODALITIES = ("speech", "text")


def _unit(rng, dim):
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def _split_names(n_conv, fractions):
    n_train = int(round(fractions[0] * n_conv))
    n_val = int(round(fractions[1] * n_conv))
    names = ["train"] * n_train + ["val"] * n_val
    return names + ["test"] * (n_conv - len(names))


def _context_dependent(rng, n_conv, n_utt, dim, cue_strength, noise):
    mu = {m: cue_strength * _unit(rng, dim) for m in MODALITIES}
    convs = []
    for _ in range(n_conv):
        cues = rng.integers(0, 2, size=n_utt)
        labels = np.bitwise_xor.accumulate(cues)
        feats = {m: (2.0 * cues[:, None] - 1.0) * mu[m] + noise * rng.standard_normal((n_utt, dim))
                 for m in MODALITIES}
        convs.append((labels, feats))
    return ["even", "odd"], convs


def _modality_imbalanced(rng, n_conv, n_utt, dim, num_classes, noise):
    # norm 3 under unit noise: ~95% nearest-mean accuracy for 4 classes in 16 dims
    means = 3.0 * np.stack([_unit(rng, dim) for _ in range(num_classes)])
    convs = []
    for _ in range(n_conv):
        labels = rng.integers(0, num_classes, size=n_utt)
        text = means[labels] + noise * rng.standard_normal((n_utt, dim))
        speech = noise * rng.standard_normal((n_utt, dim))
        convs.append((labels, {"speech": speech, "text": text}))
    return [f"c{i}" for i in range(num_classes)], convs


def _separable(rng, n_conv, n_utt, dim, num_classes, noise):
    means = {m: 4.0 * np.stack([_unit(rng, dim) for _ in range(num_classes)]) for m in MODALITIES}
    convs = []
    for _ in range(n_conv):
        labels = rng.integers(0, num_classes, size=n_utt)
        feats = {m: means[m][labels] + 0.3 * noise * rng.standard_normal((n_utt, dim)) for m in MODALITIES}
        convs.append((labels, feats))
    return [f"c{i}" for i in range(num_classes)], convs


def generate_synthetic_corpus(kind: str, out_dir, seed: int = 0, n_conversations: int = 200,
                              n_utterances: int = 8, dim: int = 16, num_classes: int = 4,
                              fractions=(0.7, 0.15, 0.15), noise: float = 1.0,
                              cue_strength: float = 3.0) -> Path:
    """Write ``manifest.json`` plus one EMF1 file per utterance and modality.

    Returns the manifest path. Output is byte-identical for a given seed.
    """
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}, got {kind!r}")
    rng = np.random.default_rng(seed)
    if kind == "context_dependent":
        labels, convs = _context_dependent(rng, n_conversations, n_utterances, dim, cue_strength, noise)
    elif kind == "modality_imbalanced":
        labels, convs = _modality_imbalanced(rng, n_conversations, n_utterances, dim, num_classes, noise)
    else:
        labels, convs = _separable(rng, n_conversations, n_utterances, dim, num_classes, noise)

    out_dir = Path(out_dir)
    splits: dict[str, list[Conversation]] = {"train": [], "val": [], "test": []}
    for ci, ((ys, feats), split) in enumerate(zip(convs, _split_names(n_conversations, fractions))):
        conv_id = f"conv{ci:04d}"
        utts = []
        for k, y in enumerate(ys):
            utt_id = f"{conv_id}_u{k:02d}"
            paths = {}
            for m in MODALITIES:
                rel = f"features/{m}/{utt_id}.emf"
                save_feature_matrix(out_dir / rel, feats[m][k:k + 1].astype(np.float32))
                paths[m] = rel
            utts.append(Utterance(utt_id, speaker=f"spk{k % 2}", label_index=int(y), features=paths))
        splits[split].append(Conversation(conv_id, tuple(utts)))
    ds = Dataset(EmotionLabelSet(tuple(labels)), {k: tuple(v) for k, v in splits.items()}, out_dir)
    manifest = out_dir / "manifest.json"
    save_manifest(ds, manifest)
    return manifest
