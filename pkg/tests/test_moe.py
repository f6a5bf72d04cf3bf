import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from erclab.attention import AttentionConfig
from erclab.config import config_from_dict
from erclab.datamodel import load_manifest
from erclab.errors import ValidationError
from erclab.losses import LossConfig, focal_loss, kl_consistency, softmax, supcon_loss
from erclab.moe import (FusionNetwork, MisterModel, MisterOutputs, MoEGate, gate_fuse, mister_objective,
                        mister_predict, mister_train, predictions_csv)
from erclab.synth import generate_synthetic_corpus
from erclab.training import load_records

from conftest import central_diff, rel_err, torch_param_fd, write_corpus


def _cfg(manifest="m.json", out="o", **over):
    doc = {
        "pipeline": "mister", "manifest": str(manifest), "output_dir": str(out), "seed": 2,
        "loss": {"objective": "focal", "lambda_con": 2.0, "alpha_kl": 0.1, "tau_con": 1.0},
        "context": {"hidden_dim": 3, "gru_layers": 1, "dropout": 0.0, "inception_kernels": [1, 3]},
        "attention": {"model_dim": 4, "heads": 2, "dropout_rate": 0.0, "layers": 1},
        "optim": {"learning_rate": 1e-2, "epochs": 3, "batch_size": 4},
    }
    for key, value in over.items():
        doc[key] = {**doc.get(key, {}), **value} if isinstance(value, dict) else value
    return config_from_dict(doc)


# ---------------------------------------------------------------- gate

def test_saturated_gate(rng):
    gate = MoEGate(3).double()
    with torch.no_grad():
        gate.affine.weight.zero_()
        gate.affine.bias.copy_(torch.tensor([30.0, -30.0, -30.0]))
    ys, yt, ym = (torch.tensor(rng.normal(size=(5, 3))) for _ in range(3))
    beta, fused = gate(ys, yt, ym)
    assert torch.allclose(beta[:, 0], torch.ones(5, dtype=torch.float64), atol=1e-12)
    assert torch.allclose(fused, ys, atol=1e-6)


def test_uniform_gate_hand_average():
    gate = MoEGate(2).double()
    with torch.no_grad():
        gate.affine.weight.zero_()
        gate.affine.bias.zero_()
    t = lambda *v: torch.tensor([v], dtype=torch.float64)
    beta, fused = gate(t(1.0, 0.0), t(0.0, 1.0), t(0.5, 0.5))
    assert torch.allclose(beta, torch.full((1, 3), 1 / 3, dtype=torch.float64), atol=1e-15)
    assert torch.allclose(fused, t(0.5, 0.5), atol=1e-15)


def test_gate_simplex_1000(rng):
    gate = MoEGate(4).double()
    with torch.no_grad():
        gate.affine.weight.copy_(torch.tensor(rng.normal(scale=3, size=(3, 12))))
    ys, yt, ym = (torch.tensor(rng.normal(scale=5, size=(1000, 4))) for _ in range(3))
    beta, _ = gate(ys, yt, ym)
    assert (beta >= 0).all()
    assert torch.allclose(beta.sum(-1), torch.ones(1000, dtype=torch.float64), atol=1e-6)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_fused_in_expert_hull(seed):
    r = np.random.default_rng(seed)
    lin = torch.nn.Linear(9, 3).double()
    with torch.no_grad():
        lin.weight.copy_(torch.tensor(r.normal(scale=4, size=(3, 9))))
    experts = [torch.tensor(r.normal(scale=3, size=(4, 3))) for _ in range(3)]
    _, fused = gate_fuse(lin, *experts)
    stacked = torch.stack(experts)
    assert (fused >= stacked.min(0).values - 1e-12).all()
    assert (fused <= stacked.max(0).values + 1e-12).all()
    _, same = gate_fuse(lin, experts[0], experts[0], experts[0])
    assert torch.allclose(same, experts[0], atol=1e-12)


def test_gate_shape_mismatch():
    with pytest.raises(ValueError, match="differ in shape"):
        gate_fuse(torch.nn.Linear(6, 3), torch.zeros(1, 2), torch.zeros(1, 2), torch.zeros(1, 3))


# ---------------------------------------------------------------- fusion

def _fusion(layers=1):
    return FusionNetwork(5, 3, AttentionConfig(4, 2, 0.0, layers), 3).double().eval()


def test_fusion_zero_values_residual(rng):
    f = _fusion()
    with torch.no_grad():
        for blk in (f.cross_ts, f.cross_st):
            blk.attn.v_proj.weight.zero_(); blk.attn.v_proj.bias.zero_(); blk.attn.out_proj.bias.zero_()
    e_s, e_t = torch.tensor(rng.normal(size=(4, 5))), torch.tensor(rng.normal(size=(4, 3)))
    m_s, m_t = f.cross(e_s, e_t)
    assert torch.allclose(m_s, F.layer_norm(f.proj_s(e_s), (4,), eps=1e-5), atol=1e-12)
    assert torch.allclose(m_t, F.layer_norm(f.proj_t(e_t), (4,), eps=1e-5), atol=1e-12)


def test_fusion_shapes_and_errors():
    f = _fusion(layers=2)
    for n in (1, 3, 8):
        m_s, m_t, logits = f(torch.randn(n, 5, dtype=torch.float64), torch.randn(n, 3, dtype=torch.float64))
        assert m_s.shape == m_t.shape == (n, 4) and logits.shape == (n, 3)
    with pytest.raises(ValueError, match="differ in length"):
        f.cross(torch.zeros(2, 5, dtype=torch.float64), torch.zeros(3, 3, dtype=torch.float64))


def test_fusion_input_gradient(rng):
    f = _fusion()
    e_s, e_t = rng.normal(size=(3, 5)), rng.normal(size=(3, 3))
    proj = torch.tensor(rng.normal(size=(3, 3)))
    xs = torch.tensor(e_s, requires_grad=True)
    (f(xs, torch.tensor(e_t))[2] * proj).sum().backward()
    num = central_diff(lambda a: (f(torch.tensor(a), torch.tensor(e_t))[2] * proj).sum().item(), e_s)
    assert rel_err(xs.grad.numpy(), num) <= 1e-4


# ---------------------------------------------------------------- objective

def _outputs(rng, b=2, n=4, c=3, d=4):
    t = lambda *shape: torch.tensor(rng.normal(size=shape))
    return MisterOutputs(t(b, n, c), t(b, n, c), t(b, n, c), t(b, n, c), None, t(b, n, d), t(b, n, d))


def _reference(out, labels, mask, cfg):
    """Objective rebuilt from the NumPy losses, one term at a time."""
    valid = (mask & (labels >= 0)).numpy()
    y = labels.numpy()[valid]
    n = len(y)
    arr = lambda z: z.detach().numpy()[valid]
    parts = {"cls": sum(focal_loss(arr(z), y, cfg.gamma_focal)[0] * n for z in (out.y_s, out.y_t, out.y_m, out.fused))}
    p_m = softmax(arr(out.y_m))
    parts["kl"] = kl_consistency(p_m, softmax(arr(out.y_s)))[0] + kl_consistency(p_m, softmax(arr(out.y_t)))[0]
    con = 0.0
    for i in range(labels.shape[0]):
        keep = valid[i]
        z = np.concatenate([out.m_s[i].detach().numpy()[keep], out.m_t[i].detach().numpy()[keep]])
        con += supcon_loss(z, np.concatenate([labels[i].numpy()[keep]] * 2), cfg.tau_con, "exclude_anchor")[0]
    parts["con"] = con
    return parts


def test_objective_endpoints(rng):
    out = _outputs(rng)
    labels = torch.tensor([[0, 1, 2, 1], [2, 2, 0, -1]])
    mask = labels >= 0
    for alpha, lam in ((0.0, 0.0), (0.0, 2.0), (0.1, 0.0), (0.1, 2.0)):
        cfg = LossConfig(objective="focal", alpha_kl=alpha, lambda_con=lam)
        ref = _reference(out, labels, mask, cfg)
        got = mister_objective(out, labels, mask, cfg).item()
        assert got == pytest.approx(ref["cls"] + alpha * ref["kl"] + lam * ref["con"], abs=1e-9)
    # alpha = lambda = 0 leaves only the classification terms
    cfg = LossConfig(objective="focal", alpha_kl=0.0, lambda_con=0.0)
    assert mister_objective(out, labels, mask, cfg).item() == pytest.approx(_reference(out, labels, mask, cfg)["cls"])


def test_objective_monolithic_terms(rng):
    out = _outputs(rng)
    mono = MisterOutputs(None, None, out.y_m, out.y_m, None, out.m_s, out.m_t)
    labels = torch.tensor([[0, 1, 2, 1], [2, 2, 0, 1]])
    cfg = LossConfig(objective="ce", alpha_kl=0.5, lambda_con=0.0)
    expect = focal_loss(out.y_m.numpy().reshape(-1, 3), labels.numpy().reshape(-1), 0.0)[0] * 8
    assert mister_objective(mono, labels, labels >= 0, cfg).item() == pytest.approx(expect, abs=1e-10)


def test_presets_recorded():
    iem, meld = LossConfig.iemocap_style(), LossConfig.meld_style()
    assert (iem.lambda_con, iem.alpha_kl) == (2.0, 0.1)
    assert (meld.lambda_con, meld.alpha_kl) == (1.0, 1e-3)


def test_objective_parameter_gradients(rng):
    cfg = _cfg()
    model = MisterModel(3, 2, cfg, 3).double().eval()
    x_s = torch.tensor(rng.normal(size=(2, 4, 3)))
    x_t = torch.tensor(rng.normal(size=(2, 4, 2)))
    labels = torch.tensor([[0, 1, 2, 0], [1, 1, 2, -1]])
    mask = labels >= 0
    counts = np.array([3, 3, 2])

    def loss():
        return mister_objective(model(x_s, x_t, mask), labels, mask, cfg.loss, counts)

    analytic, numeric = torch_param_fd(loss, list(model.parameters()), rng, n=32, step=1e-5)
    assert rel_err(analytic, numeric) <= 1e-3


# ---------------------------------------------------------------- training

@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    return generate_synthetic_corpus("modality_imbalanced", tmp_path_factory.mktemp("mi"), seed=4,
                                     n_conversations=16, n_utterances=4, dim=5)


def test_training_is_deterministic(corpus):
    ds = load_manifest(corpus)
    a, b = mister_train(ds, _cfg(corpus)), mister_train(ds, _cfg(corpus))
    assert a.reports == b.reports and a.history == b.history
    test = load_records(ds, ds.split("test"), ["speech", "text"])
    pa, pb = mister_predict(a.model, test, ["speech", "text"]), mister_predict(b.model, test, ["speech", "text"])
    assert {u: (y, g.tolist()) for u, (y, g) in pa.items()} == {u: (y, g.tolist()) for u, (y, g) in pb.items()}
    for _, beta in pa.values():
        assert beta.sum() == pytest.approx(1.0, abs=1e-6)
    text = predictions_csv(pa, ds.labelset)
    assert text.splitlines()[0] == "utt_id,pred_label,beta_s,beta_t,beta_m"
    assert len(text.splitlines()) == len(pa) + 1


def test_monolithic_flag(corpus):
    res = mister_train(load_manifest(corpus), _cfg(corpus, mister={"monolithic": True}))
    assert res.model.gate is None
    assert res.reports["val"]["mean_gate"] == [0.0, 0.0, 1.0]
    assert set(res.reports["val"]["experts"]) == {"multimodal"}


def test_missing_modality(tmp_path):
    man = write_corpus(tmp_path, {"train": [[0, 1]], "val": [[0, 1]]}, dims={"text": 3})
    with pytest.raises(ValidationError, match="lacks modality 'speech'"):
        mister_train(load_manifest(man), _cfg(man))
