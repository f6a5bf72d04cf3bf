"""Conversation data model, JSON manifests and the EMF1 feature format.

A manifest lists conversations per split; each utterance points at one
feature file per modality. Feature files are only referenced when the
manifest is loaded. :func:`validate_dataset` opens every one of them.

EMF1 layout (all little-endian)::

    bytes 0-3    b"EMF1"
    bytes 4-7    uint32 row count
    bytes 8-11   uint32 column count
    bytes 12-    rows * cols float32, row-major
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from erclab._io import atomic_write_bytes, atomic_write_text
from erclab.errors import FeatureFormatError, ManifestError

EMF_MAGIC = b"EMF1"
_HEADER = struct.Struct("<4sII")

TRAINING_SPLITS = ("train", "val")


@dataclass(frozen=True)
class EmotionLabelSet:
    names: tuple[str, ...]

    def __post_init__(self):
        names = tuple(self.names)
        object.__setattr__(self, "names", names)
        if not names:
            raise ManifestError("label set is empty")
        if len(set(names)) != len(names):
            dup = sorted({n for n in names if names.count(n) > 1})
            raise ManifestError(f"duplicate label names: {dup}")

    def __len__(self):
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(name) from None


@dataclass(frozen=True)
class Utterance:
    utt_id: str
    speaker: str | None = None
    label_index: int | None = None
    features: Mapping[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class Conversation:
    conv_id: str
    utterances: tuple[Utterance, ...]

    def __post_init__(self):
        object.__setattr__(self, "utterances", tuple(self.utterances))
        if not self.utterances:
            raise ManifestError(f"conversation {self.conv_id!r} has no utterances")

    def __len__(self):
        return len(self.utterances)

    @property
    def labels(self) -> list[int | None]:
        return [u.label_index for u in self.utterances]


@dataclass(frozen=True)
class Dataset:
    labelset: EmotionLabelSet
    splits: Mapping[str, tuple[Conversation, ...]]
    root: Path = Path(".")

    @property
    def num_classes(self) -> int:
        return len(self.labelset)

    def split(self, name: str) -> tuple[Conversation, ...]:
        try:
            return self.splits[name]
        except KeyError:
            raise KeyError(f"unknown split {name!r}; have {sorted(self.splits)}") from None

    def utterances(self, split: str) -> Iterator[tuple[Conversation, Utterance]]:
        for conv in self.split(split):
            for utt in conv.utterances:
                yield conv, utt

    def is_labeled(self, split: str) -> bool:
        return all(u.label_index is not None for _, u in self.utterances(split))

    def modalities(self) -> set[str]:
        mods = set()
        for convs in self.splits.values():
            for conv in convs:
                for utt in conv.utterances:
                    mods.update(utt.features)
        return mods

    def feature_path(self, utt: Utterance, modality: str) -> Path:
        try:
            rel = utt.features[modality]
        except KeyError:
            raise ManifestError(f"utterance {utt.utt_id!r} has no {modality!r} features") from None
        return self.root / rel

    def gold_labels(self) -> dict[str, int | None]:
        """Map every utt_id in every split to its label index."""
        return {u.utt_id: u.label_index for convs in self.splits.values()
                for conv in convs for u in conv.utterances}


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    values: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype="<f4")
        if v.ndim != 2:
            raise FeatureFormatError(f"feature matrix must be 2-D, got shape {v.shape}")
        if v.shape[0] < 1 or v.shape[1] < 1:
            raise FeatureFormatError(f"feature matrix needs rows>=1 and cols>=1, got {v.shape}")
        _check_finite(v, "feature matrix")
        v = v.copy()
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    def __eq__(self, other):
        if not isinstance(other, FeatureMatrix):
            return NotImplemented
        return self.values.shape == other.values.shape and self.values.tobytes() == other.values.tobytes()


def _check_finite(values: np.ndarray, where: str) -> None:
    bad = ~np.isfinite(values)
    if bad.any():
        r, c = np.argwhere(bad)[0]
        raise FeatureFormatError(f"{where}: non-finite value {values[r, c]!r} at (row {r}, col {c})")


# ---------------------------------------------------------------- EMF1 I/O

def encode_feature_matrix(fm: FeatureMatrix | np.ndarray) -> bytes:
    if not isinstance(fm, FeatureMatrix):
        fm = FeatureMatrix(np.asarray(fm))
    return _HEADER.pack(EMF_MAGIC, fm.rows, fm.cols) + fm.values.tobytes(order="C")


def decode_feature_matrix(data: bytes, where: str = "<bytes>") -> FeatureMatrix:
    if len(data) < _HEADER.size:
        raise FeatureFormatError(f"{where}: truncated header ({len(data)} bytes)")
    magic, rows, cols = _HEADER.unpack_from(data)
    if magic != EMF_MAGIC:
        raise FeatureFormatError(f"{where}: bad magic {magic!r}, expected {EMF_MAGIC!r}")
    payload = len(data) - _HEADER.size
    expected = rows * cols * 4
    if payload != expected:
        raise FeatureFormatError(
            f"{where}: header declares {rows}x{cols} ({rows * cols} values) "
            f"but payload holds {payload / 4:g} values")
    values = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(rows, cols)
    _check_finite(values, where)
    return FeatureMatrix(values)


def save_feature_matrix(path, fm: FeatureMatrix | np.ndarray) -> None:
    atomic_write_bytes(path, encode_feature_matrix(fm))


def load_feature_matrix(path) -> FeatureMatrix:
    path = Path(path)
    return decode_feature_matrix(path.read_bytes(), where=str(path))


def read_feature_header(path) -> tuple[int, int]:
    """Return (rows, cols) from the header without reading the payload."""
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
    if len(head) < _HEADER.size:
        raise FeatureFormatError(f"{path}: truncated header")
    magic, rows, cols = _HEADER.unpack(head)
    if magic != EMF_MAGIC:
        raise FeatureFormatError(f"{path}: bad magic {magic!r}")
    return rows, cols


# ---------------------------------------------------------------- manifests

def _require(record: Mapping, key: str, where: str):
    if not isinstance(record, Mapping):
        raise ManifestError(f"{where}: expected an object, got {type(record).__name__}")
    if key not in record:
        raise ManifestError(f"{where}: missing required field {key!r}")
    return record[key]


def dataset_from_dict(doc: Mapping, root=".") -> Dataset:
    labels = _require(doc, "labels", "manifest")
    if not isinstance(labels, list) or not all(isinstance(x, str) for x in labels):
        raise ManifestError("manifest: 'labels' must be a list of strings")
    labelset = EmotionLabelSet(tuple(labels))
    splits_doc = _require(doc, "splits", "manifest")
    if not isinstance(splits_doc, Mapping):
        raise ManifestError("manifest: 'splits' must be an object")

    seen_conv: dict[str, str] = {}
    seen_utt: dict[str, str] = {}
    splits = {}
    for split_name, convs_doc in splits_doc.items():
        if not isinstance(convs_doc, list):
            raise ManifestError(f"split {split_name!r}: expected a list of conversations")
        convs = []
        for ci, cdoc in enumerate(convs_doc):
            conv_id = _require(cdoc, "conv_id", f"split {split_name!r} conversation #{ci}")
            conv_where = f"conversation {conv_id!r}"
            if conv_id in seen_conv:
                raise ManifestError(f"{conv_where}: duplicate conv_id (also in split {seen_conv[conv_id]!r})")
            seen_conv[conv_id] = split_name
            utts = []
            for ui, udoc in enumerate(_require(cdoc, "utterances", conv_where)):
                utt_id = _require(udoc, "utt_id", f"{conv_where} utterance #{ui}")
                where = f"utterance {utt_id!r}"
                if utt_id in seen_utt:
                    raise ManifestError(f"{where}: duplicate utt_id (also in conversation {seen_utt[utt_id]!r})")
                seen_utt[utt_id] = conv_id
                label = udoc.get("label")
                if label is None:
                    label_index = None
                else:
                    try:
                        label_index = labelset.index(label)
                    except KeyError:
                        raise ManifestError(f"{where}: unknown label {label!r}; labels are {list(labelset.names)}") from None
                feats = _require(udoc, "features", where)
                if not isinstance(feats, Mapping) or not all(isinstance(v, str) for v in feats.values()):
                    raise ManifestError(f"{where}: 'features' must map modality names to paths")
                utts.append(Utterance(utt_id=utt_id, speaker=udoc.get("speaker"),
                                      label_index=label_index, features=dict(feats)))
            if not utts:
                raise ManifestError(f"{conv_where}: has no utterances")
            convs.append(Conversation(conv_id, tuple(utts)))
        splits[split_name] = tuple(convs)
    return Dataset(labelset=labelset, splits=splits, root=Path(root))


def dataset_to_dict(ds: Dataset) -> dict:
    names = ds.labelset.names
    return {
        "labels": list(names),
        "splits": {
            split: [
                {"conv_id": conv.conv_id,
                 "utterances": [
                     {"utt_id": u.utt_id,
                      "speaker": u.speaker,
                      "label": None if u.label_index is None else names[u.label_index],
                      "features": dict(u.features)}
                     for u in conv.utterances]}
                for conv in convs]
            for split, convs in ds.splits.items()
        },
    }


def load_manifest(path) -> Dataset:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: not valid JSON ({exc})") from None
    return dataset_from_dict(doc, root=path.parent)


def save_manifest(ds: Dataset, path) -> None:
    """Write ``ds`` as a manifest. Feature paths are written verbatim, so
    they stay valid only if ``path`` lives in ``ds.root``."""
    atomic_write_text(path, json.dumps(dataset_to_dict(ds), indent=2) + "\n")


# ---------------------------------------------------------------- validation

@dataclass
class Finding:
    split: str
    conv_id: str
    utt_id: str | None
    kind: str
    message: str


@dataclass
class SplitSummary:
    n_conversations: int
    n_utterances: int
    n_unlabeled: int
    class_counts: list[int]


@dataclass
class ValidationReport:
    splits: dict[str, SplitSummary]
    findings: list[Finding]

    @property
    def ok(self) -> bool:
        return not self.findings


def split_class_counts(ds: Dataset, split: str) -> np.ndarray:
    counts = np.zeros(ds.num_classes, dtype=np.int64)
    for _, utt in ds.utterances(split):
        if utt.label_index is not None:
            counts[utt.label_index] += 1
    return counts


def validate_dataset(ds: Dataset) -> ValidationReport:
    """Open every referenced feature file and report problems as data."""
    findings: list[Finding] = []
    summaries = {}
    dims: dict[str, dict[int, tuple[str, str]]] = {}
    for split, convs in ds.splits.items():
        n_unlabeled = 0
        for conv in convs:
            for utt in conv.utterances:
                if utt.label_index is None:
                    n_unlabeled += 1
                    if split in TRAINING_SPLITS:
                        findings.append(Finding(split, conv.conv_id, utt.utt_id, "unlabeled",
                                                f"utterance {utt.utt_id!r} in training split {split!r} has no label"))
                for mod, rel in sorted(utt.features.items()):
                    path = ds.root / rel
                    if not path.is_file():
                        findings.append(Finding(split, conv.conv_id, utt.utt_id, "missing_file",
                                                f"utterance {utt.utt_id!r}: {mod} file {rel!r} not found"))
                        continue
                    try:
                        fm = load_feature_matrix(path)
                    except FeatureFormatError as exc:
                        findings.append(Finding(split, conv.conv_id, utt.utt_id, "bad_file",
                                                f"utterance {utt.utt_id!r}: {exc}"))
                        continue
                    dims.setdefault(mod, {}).setdefault(fm.cols, (split, utt.utt_id))
        summaries[split] = SplitSummary(
            n_conversations=len(convs),
            n_utterances=sum(len(c) for c in convs),
            n_unlabeled=n_unlabeled,
            class_counts=split_class_counts(ds, split).tolist(),
        )
    for mod, by_dim in sorted(dims.items()):
        if len(by_dim) > 1:
            detail = ", ".join(f"{d} (first at {u!r})" for d, (_, u) in sorted(by_dim.items()))
            findings.append(Finding("*", "*", None, "dim_mismatch",
                                    f"modality {mod!r} has inconsistent feature dims: {detail}"))
    return ValidationReport(splits=summaries, findings=findings)


def load_conversation_features(ds: Dataset, conv: Conversation, modality: str) -> list[FeatureMatrix]:
    return [load_feature_matrix(ds.feature_path(u, modality)) for u in conv.utterances]


def pad_sequences(mats: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Stack variable-length [T_i, D] arrays into [N, T_max, D] plus a validity mask."""
    t_max = max(m.shape[0] for m in mats)
    d = mats[0].shape[1]
    out = np.zeros((len(mats), t_max, d), dtype=np.float32)
    mask = np.zeros((len(mats), t_max), dtype=bool)
    for i, m in enumerate(mats):
        out[i, : m.shape[0]] = m
        mask[i, : m.shape[0]] = True
    return out, mask
