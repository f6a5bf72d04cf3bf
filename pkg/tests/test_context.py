import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from erclab.context import (ContextAdditionNetwork, ContextConfig, ContextualGRU, LayerMixer, TemporalInception,
                            convex_layer_mix, stack_layers, tile_features)
from erclab.errors import ConfigError

from conftest import central_diff, rel_err

SMALL = ContextConfig(hidden_dim=3, gru_layers=2, dropout=0.0)


def _fd(module, x, proj):
    xt = torch.tensor(x, requires_grad=True)
    (module(xt) * proj).sum().backward()

    def f(a):
        with torch.no_grad():
            return (module(torch.tensor(a)) * proj).sum().item()

    return rel_err(xt.grad.numpy(), central_diff(f, x))


def test_config_validation():
    with pytest.raises(ConfigError, match="odd"):
        ContextConfig(inception_kernels=[1, 2])
    with pytest.raises(ConfigError):
        ContextConfig(hidden_dim=0)


# ---------------------------------------------------------------- contextual GRU

def test_gru_length_preserved():
    m = ContextualGRU(5, SMALL).eval()
    for n in (1, 2, 7, 32):
        assert m(torch.randn(n, 5)).shape == (n, 6)
    with pytest.raises(ValueError, match="empty"):
        m(torch.zeros(0, 5))


def test_gru_respects_padding():
    m = ContextualGRU(4, SMALL).eval()
    x = torch.randn(2, 6, 4)
    mask = torch.tensor([[True] * 6, [True] * 3 + [False] * 3])
    batched = m(x, mask)
    alone = m(x[1, :3])
    assert torch.allclose(batched[1, :3], alone, atol=1e-6)


def _passthrough_gru():
    """hidden=1: forward direction h_t = tanh(x_t), backward direction 0,
    attention contributes nothing and the feed-forward is the identity on
    positive inputs (shifted into range by its biases)."""
    m = ContextualGRU(1, ContextConfig(hidden_dim=1, gru_layers=1, dropout=0.0)).double().eval()
    with torch.no_grad():
        for p in m.gru.parameters():
            p.zero_()
        g = m.gru.gru
        g.bias_ih_l0[1] = -40.0            # update gate closed: h_t = n_t
        g.bias_ih_l0_reverse[1] = -40.0
        g.weight_ih_l0[2, 0] = 1.0         # n_t = tanh(x_t)
        a = m.attn.attn
        a.v_proj.weight.zero_(); a.v_proj.bias.zero_(); a.out_proj.bias.zero_()
        m.ff.fc1.weight.copy_(torch.eye(2)); m.ff.fc1.bias.fill_(5.0)
        m.ff.fc2.weight.copy_(torch.eye(2)); m.ff.fc2.bias.fill_(-5.0)
    return m


def test_gru_monotone_passthrough_dim1():
    m = _passthrough_gru()
    x = torch.linspace(-0.003, 0.003, 9, dtype=torch.float64)[:, None]
    out = m(x)[:, 0]
    h = torch.tanh(x[:, 0])
    # brute force of the crafted forward pass: LayerNorm over [h, 0]
    expect = (h / 2) / torch.sqrt(h * h / 4 + 1e-5)
    assert torch.allclose(out, expect, atol=1e-12)
    assert (out[1:] > out[:-1]).all()


def test_gru_gradient(rng):
    m = ContextualGRU(3, SMALL).double().eval()
    x = rng.normal(size=(4, 3))
    assert _fd(m, x, torch.tensor(rng.normal(size=(4, 6)))) <= 1e-4


def test_deterministic_bitwise():
    m = ContextualGRU(4, SMALL).eval()
    x = torch.randn(5, 4)
    assert torch.equal(m(x), m(x))


# ---------------------------------------------------------------- TIN

def test_tin_identity_branch(rng):
    d = 3
    tin = TemporalInception(d, d, (1, 3, 5)).double()
    with torch.no_grad():
        for conv in tin.branches:
            conv.weight.zero_(); conv.bias.zero_()
        tin.branches[0].weight[:, :, 0] = torch.eye(d)
        tin.proj.weight.zero_(); tin.proj.bias.zero_()
        tin.proj.weight[:, :d] = torch.eye(d)
    x = torch.tensor(rng.normal(size=(6, d)))
    assert torch.allclose(tin(x), x, atol=1e-12)


def test_tin_hand_convolution():
    tin = TemporalInception(1, 1, (3,), branch_dim=1).double()
    with torch.no_grad():
        tin.branches[0].weight[:] = torch.tensor([[[2.0, 3.0, 5.0]]])
        tin.branches[0].bias.zero_()
        tin.proj.weight.fill_(1.0); tin.proj.bias.zero_()
    impulse = torch.tensor([[0.0], [1.0], [0.0]], dtype=torch.float64)
    # cross-correlation: out[t] = w0 x[t-1] + w1 x[t] + w2 x[t+1]
    assert tin(impulse)[:, 0].tolist() == [5.0, 3.0, 2.0]


def test_tin_shapes():
    tin = TemporalInception(4, 7)
    for n in range(1, 17):
        assert tin(torch.randn(n, 4)).shape == (n, 7)


# ---------------------------------------------------------------- CAN

def test_can_zero_branch_is_residual(rng):
    can = ContextAdditionNetwork(4, 3, SMALL).double().eval()
    with torch.no_grad():
        for p in can.gru.parameters():
            p.zero_()
    x = torch.tensor(rng.normal(size=(5, 4)))
    assert torch.allclose(can(x), can.classifier(can.residual(x)), atol=1e-12)


def test_can_shapes_and_gradient(rng):
    for n, c in ((1, 2), (4, 3), (9, 7)):
        assert ContextAdditionNetwork(5, c, SMALL).eval()(torch.randn(n, 5)).shape == (n, c)
    can = ContextAdditionNetwork(3, 4, SMALL).double().eval()
    x = rng.normal(size=(4, 3))

    class MeanLogit(torch.nn.Module):
        def forward(self, a):
            return can(a).mean()

    assert _fd(MeanLogit(), x, torch.tensor(1.0, dtype=torch.float64)) <= 1e-4


# ---------------------------------------------------------------- layer mixing

def test_mix_examples(rng):
    stack = torch.tensor(rng.normal(size=(4, 3, 2)))
    raw = torch.zeros(4, dtype=torch.float64)
    raw[2] = 30.0
    assert torch.allclose(convex_layer_mix(stack, raw), stack[2], atol=1e-6)
    same = stack[:1].expand(4, 3, 2)
    assert torch.allclose(convex_layer_mix(same, torch.tensor(rng.normal(size=4))), stack[0], atol=1e-12)
    a, b = stack[0], stack[1]
    assert torch.allclose(convex_layer_mix(stack[:2], torch.zeros(2, dtype=torch.float64)), (a + b) / 2, atol=1e-15)


def test_mix_errors():
    with pytest.raises(ValueError, match="layer shapes differ"):
        stack_layers([torch.zeros(2, 3), torch.zeros(3, 3)])
    with pytest.raises(ValueError, match="mixing weights"):
        convex_layer_mix(torch.zeros(2, 3, 4), torch.zeros(3))
    with pytest.raises(ValueError):
        LayerMixer(0)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_mix_convex_hull(seed):
    r = np.random.default_rng(seed)
    n_layers = int(r.integers(1, 6))
    stack = torch.tensor(r.normal(size=(n_layers, 3, 4)))
    out = convex_layer_mix(stack, torch.tensor(r.normal(size=n_layers) * 5))
    assert (out >= stack.min(dim=0).values - 1e-12).all()
    assert (out <= stack.max(dim=0).values + 1e-12).all()


def test_mixer_weights_and_gradient(rng):
    mixer = LayerMixer(3).double()
    assert torch.allclose(mixer.weights().sum(), torch.tensor(1.0, dtype=torch.float64))
    stack = torch.tensor(rng.normal(size=(3, 2, 2)))
    raw = rng.normal(size=3)
    proj = torch.tensor(rng.normal(size=(2, 2)))
    rt = torch.tensor(raw, requires_grad=True)
    (convex_layer_mix(stack, rt) * proj).sum().backward()
    num = central_diff(lambda w: (convex_layer_mix(stack, torch.tensor(w)) * proj).sum().item(), raw)
    assert rel_err(rt.grad.numpy(), num) <= 1e-4


def test_tile_features():
    x = torch.arange(6.0).reshape(2, 3)
    assert tile_features(x).tolist() == [[0, 1, 2, 0, 1, 2], [3, 4, 5, 3, 4, 5]]
