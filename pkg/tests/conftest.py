import numpy as np
import pytest
import torch

from erclab.datamodel import Conversation, Dataset, EmotionLabelSet, Utterance, save_feature_matrix, save_manifest

FD_STEP = 1e-5


def central_diff(f, x, step=FD_STEP):
    """Central finite-difference gradient of scalar ``f`` at float64 array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + step
        fp = f(x)
        x[i] = old - step
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * step)
    return g


def rel_err(a, b, floor=1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def torch_param_fd(loss_of_params, params, rng, n=32, step=1e-4):
    """Compare autograd and central differences on ``n`` sampled scalar
    parameter entries (float64 model). Returns (analytic, numeric)."""
    loss = loss_of_params()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    flat = [(pi, idx) for pi, p in enumerate(params) for idx in np.ndindex(*p.shape)]
    picks = rng.choice(len(flat), size=min(n, len(flat)), replace=False)
    analytic, numeric = [], []
    with torch.no_grad():
        for k in picks:
            pi, idx = flat[k]
            p = params[pi]
            old = p[idx].item()
            p[idx] = old + step
            fp = loss_of_params().item()
            p[idx] = old - step
            fm = loss_of_params().item()
            p[idx] = old
            numeric.append((fp - fm) / (2 * step))
            g = grads[pi]
            analytic.append(0.0 if g is None else g[idx].item())
    return np.array(analytic), np.array(numeric)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


def write_corpus(root, splits, labels=("neutral", "angry"), dims=None, rows=1, seed=0):
    """Small on-disk corpus. ``splits`` maps split -> list of label lists
    (one list per conversation; None marks an unlabeled utterance)."""
    dims = dims or {"speech": 4, "text": 3}
    r = np.random.default_rng(seed)
    convs = {}
    n = 0
    for split, conv_labels in splits.items():
        out = []
        for ys in conv_labels:
            cid = f"c{n:03d}"
            n += 1
            utts = []
            for k, y in enumerate(ys):
                uid = f"{cid}_{k}"
                feats = {}
                for m, d in dims.items():
                    rel = f"feat/{m}/{uid}.emf"
                    save_feature_matrix(root / rel, r.standard_normal((rows, d)).astype(np.float32))
                    feats[m] = rel
                utts.append(Utterance(uid, f"s{k % 2}", y, feats))
            out.append(Conversation(cid, tuple(utts)))
        convs[split] = tuple(out)
    ds = Dataset(EmotionLabelSet(tuple(labels)), convs, root)
    save_manifest(ds, root / "manifest.json")
    return root / "manifest.json"
