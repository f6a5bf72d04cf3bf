import numpy as np
import pytest
import torch

from erclab.care import (CareHead, DownstreamHeadConfig, care_predict, care_train, downstream_classify,
                         downstream_regress, layer_stack, load_items)
from erclab.config import config_from_dict
from erclab.context import convex_layer_mix
from erclab.datamodel import load_manifest, save_feature_matrix
from erclab.errors import ConfigError, ValidationError

from conftest import central_diff, rel_err, write_corpus


def _head(in_dim=4, n_out=3, hidden=8, layers=1):
    return CareHead(DownstreamHeadConfig(in_dim, n_out, hidden, layers)).double()


def test_config_defaults_and_validation():
    assert DownstreamHeadConfig(768, 4).hidden_dim == 256
    with pytest.raises(ConfigError):
        DownstreamHeadConfig(0, 3)


def test_single_layer_is_pool_then_head(rng):
    model = _head()
    stack = torch.tensor(rng.normal(size=(1, 6, 4)))
    assert torch.allclose(downstream_classify(stack, model), model.head(stack[0].mean(0)), atol=1e-14)


def test_constant_in_time(rng):
    model = _head(layers=3)
    frame = torch.tensor(rng.normal(size=4))
    stack = frame.expand(3, 5, 4)
    assert torch.allclose(model.pooled(stack), frame, atol=1e-14)


def test_shape_errors():
    model = _head(layers=2)
    with pytest.raises(ValueError, match="stack"):
        model.pooled(torch.zeros(3, 4, 4, dtype=torch.float64))
    with pytest.raises(ValueError, match="no frames"):
        model.pooled(torch.zeros(2, 0, 4, dtype=torch.float64))


def test_classify_gradient(rng):
    model = _head(layers=2)
    stack = rng.normal(size=(2, 3, 4))
    proj = torch.tensor(rng.normal(size=3))
    x = torch.tensor(stack, requires_grad=True)
    (downstream_classify(x, model) * proj).sum().backward()
    num = central_diff(lambda a: (downstream_classify(torch.tensor(a), model) * proj).sum().item(), stack)
    assert rel_err(x.grad.numpy(), num) <= 1e-4


def test_regress_loss_examples(rng):
    model = _head(in_dim=3, hidden=3)
    gold = rng.normal(size=(5, 3))
    # identity head on positive inputs: shift by +10 through the ReLU and back
    with torch.no_grad():
        model.head.fc1.weight.copy_(torch.eye(3)); model.head.fc1.bias.fill_(10.0)
        model.head.fc2.weight.copy_(torch.eye(3)); model.head.fc2.bias.fill_(-10.0)
    stacks = [torch.tensor(g).reshape(1, 1, 3) for g in gold]
    pred, loss = downstream_regress(stacks, model, gold)
    assert torch.allclose(pred, torch.tensor(gold), atol=1e-12)
    assert loss.item() == pytest.approx(0.0, abs=1e-12)
    centered = gold - gold.mean(0)
    _, loss = downstream_regress([torch.tensor(-g).reshape(1, 1, 3) for g in centered], model, centered)
    assert loss.item() == pytest.approx(6.0, abs=1e-12)
    with torch.no_grad():
        model.head.fc2.weight.zero_()
    _, loss = downstream_regress(stacks, model, gold)
    assert loss.item() == pytest.approx(3.0, abs=1e-12)


def test_regress_needs_two(rng):
    model = _head()
    with pytest.raises(ValueError, match="B >= 2"):
        downstream_regress([torch.zeros(1, 2, 4, dtype=torch.float64)], model, np.zeros((1, 3)))


def test_regress_loss_decreases_monotonically():
    torch.manual_seed(0)
    r = np.random.default_rng(0)
    mapping = r.normal(size=(4, 3))
    stacks = [torch.tensor(r.normal(size=(2, int(r.integers(3, 7)), 4))) for _ in range(32)]
    gold = np.stack([s.mean(dim=(0, 1)).numpy() @ mapping for s in stacks])
    model = _head(in_dim=4, hidden=16, layers=2)
    opt = torch.optim.Adam(model.parameters(), lr=1e-3)
    values = []
    for _ in range(50):
        _, loss = downstream_regress(stacks, model, gold)
        opt.zero_grad()
        loss.backward()
        opt.step()
        values.append(loss.item())
    assert all(b < a for a, b in zip(values, values[1:]))


def test_mixed_stays_in_layer_hull(rng):
    model = _head(layers=4)
    with torch.no_grad():
        model.mixer.raw_weights.copy_(torch.tensor(rng.normal(scale=3, size=4)))
    stack = torch.tensor(rng.normal(size=(4, 5, 4)))
    mixed = convex_layer_mix(stack, model.mixer.raw_weights)
    assert (mixed >= stack.min(0).values - 1e-12).all() and (mixed <= stack.max(0).values + 1e-12).all()


def test_layer_stack_layout():
    values = np.arange(12, dtype=np.float32).reshape(6, 2)  # 3 layers x 2 frames, layer-major
    stack = layer_stack(values, 3)
    assert stack.shape == (3, 2, 2)
    assert stack[1].tolist() == [[4, 5], [6, 7]]
    assert layer_stack(values, 3, tile=2).shape == (3, 2, 4)
    with pytest.raises(ValidationError, match="do not split"):
        layer_stack(values, 4)


def _care_corpus(tmp_path, n_layers=2):
    man = write_corpus(tmp_path, {"train": [[0, 1, 0, 1]] * 4, "val": [[1, 0]] * 2}, dims={"text": 2})
    ds = load_manifest(man)
    r = np.random.default_rng(0)
    mapping = {}
    for split in ds.splits:
        for _, u in ds.utterances(split):
            rel = f"layers/{u.utt_id}.emf"
            frames = int(r.integers(2, 5))
            mean = 3.0 if u.label_index else -3.0
            save_feature_matrix(tmp_path / rel, (mean + r.normal(size=(n_layers * frames, 3))).astype(np.float32))
            mapping[u.utt_id] = rel
    doc = man.read_text()
    for uid, rel in mapping.items():
        doc = doc.replace(f'"text": "feat/text/{uid}.emf"', f'"layers": "{rel}", "text": "feat/text/{uid}.emf"')
    man.write_text(doc)
    return man


def test_care_train_end_to_end(tmp_path):
    man = _care_corpus(tmp_path)
    cfg = config_from_dict({"pipeline": "care_head", "manifest": str(man), "output_dir": "o",
                            "care": {"n_layers": 2, "hidden_dim": 8, "tile": 2},
                            "loss": {"objective": "ce"},
                            "optim": {"learning_rate": 1e-2, "epochs": 20, "batch_size": 4}})
    ds = load_manifest(man)
    res = care_train(ds, cfg)
    assert res.reports["val"]["weighted_f1"] == 1.0
    assert sum(res.reports["mix_weights"]) == pytest.approx(1.0)
    preds = care_predict(res.model, load_items(ds, "val", cfg))
    assert len(preds) == 4
    again = care_train(ds, cfg)
    assert again.reports == res.reports


def test_care_missing_modality(tmp_path):
    man = write_corpus(tmp_path, {"train": [[0, 1]], "val": [[0]]})
    cfg = config_from_dict({"pipeline": "care_head", "manifest": str(man), "output_dir": "o"})
    with pytest.raises(ValidationError, match="lacks modality 'layers'"):
        care_train(load_manifest(man), cfg)
