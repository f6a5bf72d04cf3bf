"""Experiment orchestration: one config in, one self-describing run directory out.

Run directory contents::

    config.lock.json   resolved config (absolute paths)
    seed.json          seed + manifest sha256
    checkpoint.pt      best parameters, dims, config snapshot, val report
    predictions.csv    test split (val if there is no test split)
    report.json        val/test reports, seed, manifest hash; no timestamps
    stage{1,2,3}/      HCAM stage artifacts (hcam only)
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import statistics
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn

from erclab._io import atomic_write_bytes, atomic_write_text, dump_json, sha256_file
from erclab.care import CareHead, DownstreamHeadConfig, care_predict, care_train, load_items
from erclab.config import ExperimentConfig, config_from_dict, load_config
from erclab.datamodel import Dataset, EmotionLabelSet, load_manifest, read_feature_header, validate_dataset
from erclab.errors import ConfigError, ValidationError
from erclab.hcam import HcamRun, build_stages, hcam_predict
from erclab.metrics import MetricReport, classification_report
from erclab.moe import MisterModel, mister_predict, mister_train, predictions_csv
from erclab.training import load_records

log = logging.getLogger(__name__)

REPORT_METRICS = ("weighted_f1", "macro_f1", "uar")


@dataclass
class Trained:
    module: nn.Module
    best_epoch: int
    val: dict
    details: dict
    dims: dict
    predict: Callable[[str], str]  # split -> predictions CSV text


@dataclass
class RunResult:
    run_dir: Path
    report: dict
    module: nn.Module


def _labels_csv(preds: dict, labelset: EmotionLabelSet) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["utt_id", "pred_label"])
    for utt in sorted(preds):
        w.writerow([utt, labelset.names[preds[utt][0]]])
    return buf.getvalue()


def _train_hcam(ds: Dataset, cfg: ExperimentConfig, out: Path) -> Trained:
    run = HcamRun(ds, cfg, out)
    reports = run.train_all()

    def predict(split):
        return _labels_csv(hcam_predict(run, run.raw[split]), ds.labelset)

    final = reports["stage3"]
    return Trained(run.modules(), final["best_epoch"], final["val"], reports, run.in_dims, predict)


def _train_mister(ds: Dataset, cfg: ExperimentConfig, out: Path) -> Trained:
    res = mister_train(ds, cfg)
    ms, mt = cfg.modalities
    first = ds.split("train")[0].utterances[0]
    dims = {m: _feature_cols(ds, first, m) for m in (ms, mt)}

    def predict(split):
        recs = load_records(ds, ds.split(split), cfg.modalities)
        return predictions_csv(mister_predict(res.model, recs, cfg.modalities), ds.labelset)

    details = {"reports": res.reports, "history": res.history}
    return Trained(res.model, res.best_epoch, res.reports["val"]["fused"], details, dims, predict)


def _train_care(ds: Dataset, cfg: ExperimentConfig, out: Path) -> Trained:
    res = care_train(ds, cfg)

    def predict(split):
        return _labels_csv(care_predict(res.model, load_items(ds, split, cfg)), ds.labelset)

    dims = {"in_dim": res.model.cfg.in_dim}
    return Trained(res.model, res.best_epoch, res.reports["val"], {"reports": res.reports, "history": res.history},
                   dims, predict)


_TRAINERS = {"hcam": _train_hcam, "mister": _train_mister, "care_head": _train_care}


def _feature_cols(ds, utt, modality) -> int:
    return read_feature_header(ds.feature_path(utt, modality))[1]


def build_module(cfg: ExperimentConfig, dims: dict, num_classes: int) -> nn.Module:
    """Fresh module with the same structure a run of ``cfg`` checkpoints."""
    if cfg.pipeline == "hcam":
        return build_stages(dims, cfg, num_classes)
    if cfg.pipeline == "mister":
        ms, mt = cfg.modalities
        return MisterModel(dims[ms], dims[mt], cfg, num_classes, cfg.mister.monolithic)
    return CareHead(DownstreamHeadConfig(dims["in_dim"], num_classes, cfg.care.hidden_dim, cfg.care.n_layers))


def _check_dataset(ds: Dataset) -> None:
    report = validate_dataset(ds)
    if not report.ok:
        shown = "; ".join(f.message for f in report.findings[:5])
        more = f" (+{len(report.findings) - 5} more)" if len(report.findings) > 5 else ""
        raise ValidationError(f"dataset failed validation: {shown}{more}")


def _locked(cfg: ExperimentConfig, manifest: Path, out: Path) -> ExperimentConfig:
    return replace(cfg, manifest=str(manifest.resolve()), output_dir=str(out.resolve()))


def run_experiment(cfg: ExperimentConfig, base_dir=None) -> RunResult:
    """Train ``cfg.pipeline`` and persist everything needed to audit the run.

    Relative paths in ``cfg`` resolve against ``base_dir`` (normally the
    directory holding the config file).
    """
    base = Path(base_dir) if base_dir is not None else None
    manifest = cfg.resolved_path("manifest", base)
    out = cfg.resolved_path("output_dir", base)
    if not manifest.is_file():
        raise ConfigError(f"manifest: file {manifest} not found")
    ds = load_manifest(manifest)
    _check_dataset(ds)
    manifest_sha = sha256_file(manifest)
    locked = _locked(cfg, manifest, out)
    out.mkdir(parents=True, exist_ok=True)
    dump_json(out / "config.lock.json", locked.to_dict())
    dump_json(out / "seed.json", {"seed": cfg.seed, "manifest_sha256": manifest_sha})

    trained = _TRAINERS[cfg.pipeline](ds, cfg, out)

    pred_split = "test" if ds.splits.get("test") else "val"
    pred_text = trained.predict(pred_split)
    atomic_write_text(out / "predictions.csv", pred_text)
    test_report = None
    if ds.splits.get("test") and ds.is_labeled("test"):
        test_report = evaluate_text(pred_text, ds).to_dict()

    buf = io.BytesIO()
    torch.save({"pipeline": cfg.pipeline, "state": trained.module.state_dict(), "dims": trained.dims,
                "num_classes": ds.num_classes, "config": locked.to_dict(), "val_report": trained.val,
                "epoch": trained.best_epoch, "seed": cfg.seed, "manifest_sha256": manifest_sha}, buf)
    atomic_write_bytes(out / "checkpoint.pt", buf.getvalue())

    report = {
        "pipeline": cfg.pipeline,
        "seed": cfg.seed,
        "manifest_sha256": manifest_sha,
        "selection_metric": cfg.selection_metric,
        "best_epoch": trained.best_epoch,
        "val": trained.val,
        "test": test_report,
        "predictions_split": pred_split,
        "predictions_sha256": _sha_text(pred_text),
        "details": _jsonable(trained.details),
    }
    dump_json(out / "report.json", report)
    log.info("run written to %s", out)
    return RunResult(out, report, trained.module)


def _sha_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


@dataclass
class Checkpoint:
    pipeline: str
    module: nn.Module
    config: ExperimentConfig
    val_report: dict
    epoch: int
    seed: int
    manifest_sha256: str


def load_checkpoint(run_dir) -> Checkpoint:
    blob = torch.load(Path(run_dir) / "checkpoint.pt", map_location="cpu", weights_only=False)
    cfg = config_from_dict(blob["config"])
    module = build_module(cfg, blob["dims"], blob["num_classes"])
    module.load_state_dict(blob["state"])
    module.eval()
    return Checkpoint(blob["pipeline"], module, cfg, blob["val_report"], blob["epoch"], blob["seed"],
                      blob["manifest_sha256"])


def run_from_file(path, repeats: int = 1) -> dict:
    cfg, base = load_config(path)
    if repeats < 1:
        raise ConfigError("--repeats must be >= 1")
    if repeats == 1:
        return run_experiment(cfg, base).report
    return run_repeats(cfg, base, repeats)


def run_repeats(cfg: ExperimentConfig, base_dir, repeats: int) -> dict:
    """Seeds ``seed .. seed+repeats-1`` into ``<out>/repeat_<k>``; mean and
    sample standard deviation of each headline metric."""
    out = cfg.resolved_path("output_dir", Path(base_dir) if base_dir is not None else None)
    runs = []
    for k in range(repeats):
        sub = replace(cfg, seed=cfg.seed + k, output_dir=str(out / f"repeat_{k}"))
        runs.append(run_experiment(sub, base_dir).report)
    summary = {"repeats": repeats, "seeds": [r["seed"] for r in runs],
               "manifest_sha256": runs[0]["manifest_sha256"], "stdev": "sample"}
    for split in ("val", "test"):
        if any(r[split] is None for r in runs):
            continue
        summary[split] = {}
        for name in REPORT_METRICS:
            vals = [r[split][name] for r in runs]
            summary[split][name] = {"mean": statistics.fmean(vals), "stdev": statistics.stdev(vals), "values": vals}
    dump_json(out / "summary.json", summary)
    return summary


def read_predictions(text: str, ds: Dataset, where: str = "predictions") -> dict[str, int]:
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None or not {"utt_id", "pred_label"} <= set(reader.fieldnames):
        raise ValidationError(f"{where}: header must contain utt_id and pred_label, got {reader.fieldnames}")
    gold = ds.gold_labels()
    preds = {}
    for lineno, row in enumerate(reader, start=2):
        utt = row["utt_id"]
        if utt not in gold:
            raise ValidationError(f"{where}:{lineno}: unknown utt_id {utt!r}")
        if gold[utt] is None:
            raise ValidationError(f"{where}:{lineno}: utterance {utt!r} has no gold label")
        if utt in preds:
            raise ValidationError(f"{where}:{lineno}: duplicate prediction for {utt!r}")
        try:
            preds[utt] = ds.labelset.index(row["pred_label"])
        except KeyError:
            raise ValidationError(f"{where}:{lineno}: unknown label {row['pred_label']!r}") from None
    if not preds:
        raise ValidationError(f"{where}: no predictions")
    return preds


def evaluate_text(text: str, ds: Dataset, where: str = "predictions") -> MetricReport:
    preds = read_predictions(text, ds, where)
    gold = ds.gold_labels()
    utts = sorted(preds)
    return classification_report([gold[u] for u in utts], [preds[u] for u in utts], ds.num_classes)


def evaluate(predictions_path, manifest_path) -> MetricReport:
    """Join a predictions CSV to the manifest's gold labels and score it."""
    ds = load_manifest(manifest_path)
    path = Path(predictions_path)
    return evaluate_text(path.read_text(encoding="utf-8"), ds, str(path))


def lock_to_config(path) -> ExperimentConfig:
    return config_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
