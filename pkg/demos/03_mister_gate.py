"""
Where does the gate look? MiSTER-E on an imbalanced-modality corpus
===================================================================

Text features carry the class; speech features are noise. The
mixture-of-experts gate should learn to lean away from the speech expert.
"""

import tempfile
from pathlib import Path

import numpy as np

from erclab.config import config_from_dict
from erclab.datamodel import load_manifest
from erclab.moe import mister_predict, mister_train
from erclab.synth import generate_synthetic_corpus
from erclab.training import load_records

work = Path(tempfile.mkdtemp(prefix="erclab-mister-"))
manifest = generate_synthetic_corpus("modality_imbalanced", work / "data", seed=0,
                                     n_conversations=120)
ds = load_manifest(manifest)

doc = {
    "pipeline": "mister", "manifest": str(manifest), "output_dir": str(work / "run"), "seed": 0,
    "loss": {"objective": "focal", "lambda_con": 2.0, "alpha_kl": 0.1, "tau_con": 1.0},
    "context": {"hidden_dim": 32, "gru_layers": 1, "dropout": 0.1},
    "attention": {"model_dim": 32, "heads": 4, "dropout_rate": 0.1, "layers": 1},
    "optim": {"learning_rate": 3e-3, "epochs": 30, "batch_size": 8, "grad_clip": 1.0},
}
result = mister_train(ds, config_from_dict(doc))
val = result.reports["val"]
print("best epoch", result.best_epoch)
print("fused WF1  ", round(val["fused"]["weighted_f1"], 4))
for name, rep in val["experts"].items():
    print(f"  {name:10s} expert WF1 {rep['weighted_f1']:.4f}")
print("mean gate (speech, text, multimodal):", np.round(val["mean_gate"], 3))

# Per-utterance gate weights are part of the prediction output.
test = load_records(ds, ds.split("test"), ["speech", "text"])
preds = mister_predict(result.model, test, ["speech", "text"])
for utt in sorted(preds)[:5]:
    label, beta = preds[utt]
    print(utt, ds.labelset.names[label], np.round(beta, 3))
