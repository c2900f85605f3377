import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import tiny_config
from oracles import gate_oracle, gradient_errors, mlp_oracle
from scing.errors import ShapeError
from scing.model import ScingModel
from scing.svip import SVIP, MetaNet, cocoop_fuse, fuse, gate, visual_condition

D, d, M = 16, 8, 2


def make_svip(seed=0):
    torch.manual_seed(seed)
    return SVIP(D, d, M).double()


def test_zero_parameters_give_zero_condition():
    s = make_svip()
    with torch.no_grad():
        for p in s.mlp.parameters():
            p.zero_()
    C = visual_condition(s, torch.randn(D, dtype=torch.float64))
    assert C.shape == (M, d)
    assert torch.equal(C, torch.zeros(M, d, dtype=torch.float64))


def test_constant_second_layer_bias():
    s = make_svip()
    b = torch.randn(M * d, dtype=torch.float64)
    with torch.no_grad():
        s.mlp[2].weight.zero_()
        s.mlp[2].bias.copy_(b)
    for seed in range(3):
        V = torch.randn(D, dtype=torch.float64, generator=torch.Generator().manual_seed(seed))
        assert torch.equal(visual_condition(s, V), b.reshape(M, d))


def test_condition_matches_straight_line_oracle():
    s = make_svip(4)
    V = torch.randn(D, dtype=torch.float64)
    expect = mlp_oracle(V.tolist(), s.mlp[0].weight.tolist(), s.mlp[0].bias.tolist(),
                        s.mlp[2].weight.tolist(), s.mlp[2].bias.tolist())
    got = visual_condition(s, V).detach().numpy().reshape(-1)
    assert np.max(np.abs(got - expect)) < 1e-10


def test_gate_constant_cases():
    s = make_svip()
    with torch.no_grad():
        s.gate_W.zero_()
        s.gate_b.zero_()
    V = torch.randn(D, dtype=torch.float64)
    assert torch.equal(gate(s, V), torch.full((M, d), 0.5, dtype=torch.float64))
    with torch.no_grad():
        s.gate_b.fill_(20.0)
    assert (gate(s, V) > 0.999999).all()


def test_gate_matches_sigmoid_affine_oracle():
    s = make_svip(5)
    V = torch.randn(D, dtype=torch.float64)
    expect = gate_oracle(V.tolist(), s.gate_W.tolist(), s.gate_b.tolist())
    assert np.max(np.abs(gate(s, V).detach().numpy().reshape(-1) - expect)) < 1e-10


def test_shapes_are_checked():
    s = make_svip()
    with pytest.raises(ShapeError):
        visual_condition(s, torch.randn(D + 1, dtype=torch.float64))
    with pytest.raises(ShapeError):
        gate(s, torch.randn(D - 1, dtype=torch.float64))
    with pytest.raises(ShapeError):
        fuse(torch.zeros(M, d), torch.zeros(M, d), torch.zeros(M + 1, d))
    with pytest.raises(ShapeError):
        cocoop_fuse(MetaNet(D, d + 1), torch.zeros(4, d), torch.zeros(D))


def test_fuse_identities_and_hand_case():
    P, C = torch.randn(M, d), torch.randn(M, d)
    assert torch.equal(fuse(P, C, torch.zeros(M, d)), P)
    assert torch.equal(fuse(P, C, torch.ones(M, d)), P + C)
    out = fuse(torch.tensor([[1.0, 2.0]]), torch.tensor([[3.0, 4.0]]), torch.tensor([[0.5, 0.25]]))
    assert out.tolist() == [[2.5, 3.0]]


def test_cocoop_fuse_cases():
    net = MetaNet(D, d).double()
    P = torch.randn(4, d, dtype=torch.float64)
    x = torch.randn(D, dtype=torch.float64)
    with torch.no_grad():
        net.net[2].weight.zero_()
        net.net[2].bias.zero_()
    assert torch.equal(cocoop_fuse(net, P, x), P)
    with torch.no_grad():
        net.net[2].bias.fill_(1.0)
    assert torch.equal(cocoop_fuse(net, P, x), P + 1)
    torch.manual_seed(1)
    net = MetaNet(D, d).double()
    c = mlp_oracle(x.tolist(), net.net[0].weight.tolist(), net.net[0].bias.tolist(),
                   net.net[2].weight.tolist(), net.net[2].bias.tolist())
    expect = P.numpy() + c[None, :]
    assert np.max(np.abs(cocoop_fuse(net, P, x).detach().numpy() - expect)) < 1e-10


@settings(max_examples=50, deadline=None)
@given(st.integers(min_value=0, max_value=2**31 - 1), st.floats(min_value=0.1, max_value=50))
def test_gate_strictly_inside_unit_interval(seed, scale):
    s = make_svip(0)
    V = torch.from_numpy(np.random.default_rng(seed).normal(size=(64, D)) * scale)
    A = gate(s, V)
    assert A.shape == (64, M, d)
    assert ((A > 0) & (A < 1)).all()


def tiny_model(**svip):
    cfg = tiny_config(svip=svip, run={"dtype": "float64"})
    return ScingModel(cfg, 3, seed=0).double(), cfg


def test_zero_condition_reduces_to_static_prompt():
    model, _ = tiny_model()
    with torch.no_grad():
        model.svip.mlp[2].weight.zero_()
        model.svip.mlp[2].bias.zero_()
    img = np.random.default_rng(0).random((32, 16, 3))
    w = model.svip_text_embedding(1, img)
    static = model.text_features([1], None, "none")[0]
    assert torch.equal(w, static)


def test_suppressed_gate_makes_embedding_image_invariant():
    model, _ = tiny_model()
    with torch.no_grad():
        model.svip.gate_W.zero_()
        model.svip.gate_b.fill_(-1e4)
    rng = np.random.default_rng(1)
    a = model.svip_text_embedding(0, rng.random((32, 16, 3)))
    b = model.svip_text_embedding(0, rng.random((32, 16, 3)))
    assert torch.equal(a, b)


def test_distinct_images_give_distinct_text_embeddings():
    model, _ = tiny_model()
    rng = np.random.default_rng(2)
    a = model.svip_text_embedding(2, rng.random((32, 16, 3)))
    b = model.svip_text_embedding(2, rng.random((32, 16, 3)))
    assert (a - b).norm().item() > 0


def test_fusion_leaves_tail_tokens_bitwise():
    model, _ = tiny_model()
    V = torch.randn(5, model.image_encoder.width, dtype=torch.float64)
    y = torch.tensor([0, 1, 2, 0, 1])
    fused = model.prompt_sequences(y, V, "svip")
    raw = model.prompt_sequences(y, None, "none")
    p, m = model.prompts.prefix_len, model.prompts.n_fused
    assert torch.equal(fused[:, p + m:], raw[:, p + m:])
    assert torch.equal(fused[:, :p], raw[:, :p])
    assert not torch.equal(fused[:, p:p + m], raw[:, p:p + m])


def test_svip_text_embedding_gradients():
    """Finite-difference check of the image -> condition/gate -> fuse -> text path."""
    model, _ = tiny_model()
    img = np.random.default_rng(3).random((32, 16, 3))

    def loss():
        w = model.svip_text_embedding(1, img)
        return (w * torch.linspace(-1, 1, w.numel(), dtype=torch.float64)).sum()

    params = [model.prompts.tokens, model.svip.gate_W, model.svip.gate_b,
              model.svip.mlp[0].weight, model.svip.mlp[2].weight, model.svip.mlp[2].bias]
    errs = gradient_errors(loss, params)
    assert max(errs.values()) < 1e-4, errs
