import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from ctdiag.attention import SASBlock, SymmetricSearchAttention, bilinear_sample, mirror_coordinate, sample_bilinear
from oracles import attention_forward, fd_check, four_point


def randomize(module, scale=0.3, seed=0):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)
    return module


def numpy_weights(block):
    a = block.attention
    w = lambda conv: conv.weight.detach().numpy()[:, :, 0, 0]  # noqa: E731
    b = lambda conv: conv.bias.detach().numpy()  # noqa: E731
    return {"M": a.heads, "K": a.points, "symmetric": a.symmetric,
            "ox": w(a.offset_x), "ox_b": b(a.offset_x), "oy": w(a.offset_y), "oy_b": b(a.offset_y),
            "att": w(a.attn), "att_b": b(a.attn), "value": w(a.value), "value_b": b(a.value),
            "proj": w(a.proj), "proj_b": b(a.proj), "mlp1": w(block.mlp1), "mlp1_b": b(block.mlp1),
            "mlp2": w(block.mlp2), "mlp2_b": b(block.mlp2)}


def test_mirror_examples():
    assert mirror_coordinate(0, 16) == 15
    assert mirror_coordinate(7.5, 16) == 7.5
    # 3.2 has no exact binary form: the round trip is within one ulp of the width
    assert abs(mirror_coordinate(mirror_coordinate(3.2, 16), 16) - 3.2) <= math.ulp(15.0)
    assert mirror_coordinate(mirror_coordinate(3.25, 16), 16) == 3.25


@given(st.integers(-2 ** 36, 2 ** 36), st.integers(1, 4096))
def test_mirror_involution_exact_on_lattice(k, w):
    x = k / 2 ** 16
    assert mirror_coordinate(mirror_coordinate(x, w), w) == x
    c = (w - 1) / 2
    assert mirror_coordinate(c, w) == c


@given(st.floats(-1e3, 1e3), st.integers(1, 512))
def test_mirror_involution_any_float(x, w):
    assert abs(mirror_coordinate(mirror_coordinate(x, w), w) - x) <= math.ulp(max(abs(x), w))


def test_bilinear_examples():
    m = torch.tensor([[[1.0, 2.0], [3.0, 4.0]]], dtype=torch.float64)
    assert float(bilinear_sample(m, 0.5, 0.5)) == 2.5
    assert float(bilinear_sample(m, 1, 0)) == 3.0
    assert float(bilinear_sample(m, -5, -5)) == 0.0


def test_bilinear_matches_oracle_10k():
    rng = np.random.default_rng(0)
    value = rng.standard_normal((3, 7, 9))
    y = rng.uniform(-2, 9, 10000)
    x = rng.uniform(-2, 11, 10000)
    got = sample_bilinear(torch.from_numpy(value)[None], torch.from_numpy(y)[None], torch.from_numpy(x)[None])[0]
    want = np.stack([four_point(value, a, b) for a, b in zip(y, x)], axis=1)
    assert np.abs(got.numpy() - want).max() <= 1e-9


def test_offsets_zero_at_init_and_linear():
    att = SymmetricSearchAttention(8, 2, 3).double()
    F = torch.randn(1, 8, 4, 5, dtype=torch.float64)
    dx, dy = att.predict_offsets(F)
    assert dx.shape == (1, 2, 3, 4, 5) and float(dx.detach().abs().max()) == 0 and float(dy.detach().abs().max()) == 0
    with torch.no_grad():
        att.offset_x.weight.zero_()
        att.offset_x.weight[:, 0] = 1.0
    dx, _ = att.predict_offsets(F)
    assert torch.equal(dx[0, 1, 2], F[0, 0])
    randomize(att)
    dx, dy = att.predict_offsets(F)
    Wx = att.offset_x.weight.detach()[:, :, 0, 0].numpy()
    bx = att.offset_x.bias.detach().numpy()
    want = np.einsum("oc,chw->ohw", Wx, F[0].numpy()) + bx[:, None, None]
    assert np.abs(dx[0].reshape(6, 4, 5).detach().numpy() - want).max() <= 1e-9


def test_softmax_examples():
    att = SymmetricSearchAttention(8, 2, 4).double()
    with torch.no_grad():
        att.attn.weight.zero_()
        att.attn.bias.zero_()
    F = torch.randn(1, 8, 3, 3, dtype=torch.float64)
    assert torch.allclose(att.predict_attention(F), torch.full((1, 2, 4, 3, 3), 0.25, dtype=torch.float64))
    with torch.no_grad():
        att.attn.bias[0] = 1.0
    a = att.predict_attention(F)[0, 0, :, 0, 0]
    e = math.e
    want = [e / (e + 3), 1 / (e + 3), 1 / (e + 3), 1 / (e + 3)]
    assert np.allclose(a.detach().numpy(), want, atol=1e-12)
    assert abs(want[0] - 0.4754) < 1e-4 and abs(want[1] - 0.1749) < 1e-4


def test_softmax_sums_to_one():
    att = randomize(SymmetricSearchAttention(16, 4, 4).double(), scale=2.0)
    a = att.predict_attention(torch.randn(2, 16, 5, 6, dtype=torch.float64))
    assert (a.sum(dim=2) - 1).abs().max() <= 1e-6


def test_zero_offset_mirror_aggregation_by_hand():
    # one head, K=1, value/proj identity, zero MLP on a 1 x 4 x 4 map
    block = SASBlock(4, heads=1, points=1, encoding="none").double()
    a = block.attention
    with torch.no_grad():
        a.value.weight.copy_(torch.eye(4, dtype=torch.float64)[:, :, None, None])
        a.proj.weight.copy_(torch.eye(4, dtype=torch.float64)[:, :, None, None])
    F = torch.arange(64, dtype=torch.float64).view(1, 4, 4, 4)
    out = block(F).detach()
    want = torch.flip(F, dims=[-1]) + F
    assert (out - want).abs().max() <= 1e-9
    assert float(out[0, 0, 1, 0]) == float(F[0, 0, 1, 3] + F[0, 0, 1, 0])


def test_vanilla_samples_reference_point():
    block = SASBlock(4, heads=1, points=1, attention="vanilla", encoding="none").double()
    with torch.no_grad():
        block.attention.value.weight.copy_(torch.eye(4, dtype=torch.float64)[:, :, None, None])
        block.attention.proj.weight.copy_(torch.eye(4, dtype=torch.float64)[:, :, None, None])
    F = torch.randn(1, 4, 3, 4, dtype=torch.float64)
    assert (block(F) - 2 * F).abs().max() <= 1e-12


def test_identity_at_init():
    torch.manual_seed(0)
    for enc in ("none", "ape", "rpe", "spe"):
        block = SASBlock(16, 8, 4, encoding=enc)
        levels = [torch.randn(2, 16, s, s) for s in (16, 8, 4, 2)]
        for f, o in zip(levels, block.forward_pyramid(levels)):
            assert (o - f).abs().max() <= 1e-6


def test_symmetric_input_gives_symmetric_output():
    block = SASBlock(8, 2, 4, encoding="none").double()
    randomize(block)
    with torch.no_grad():
        block.attention.offset_x.weight.zero_()
        block.attention.offset_x.bias.zero_()
        block.attention.offset_y.weight.zero_()
        block.attention.offset_y.bias.zero_()
    half = torch.randn(1, 8, 5, 3, dtype=torch.float64)
    F = torch.cat([half, torch.flip(half, dims=[-1])], dim=-1)
    out = block(F).detach()
    assert (out - torch.flip(out, dims=[-1])).abs().max() <= 1e-6
    assert np.abs(out[0].numpy() - attention_forward(F[0].numpy(), F[0].numpy(), numpy_weights(block))).max() <= 1e-9


@pytest.mark.parametrize("attention", ["symmetric", "vanilla"])
def test_forward_matches_per_location_oracle(attention):
    block = randomize(SASBlock(8, 2, 3, attention=attention, encoding="ape").double(), seed=3)
    F = torch.randn(1, 8, 4, 6, dtype=torch.float64)
    Fr = block.encoding(F)
    got = block(F).detach()[0].numpy()
    want = attention_forward(F[0].numpy(), Fr[0].detach().numpy(), numpy_weights(block))
    assert np.abs(got - want).max() <= 1e-9


def test_pyramid_contract():
    block = SASBlock(8, 2, 2)
    levels = [torch.randn(1, 8, s, s) for s in (8, 4, 2)]
    outs = block.forward_pyramid(levels)
    assert [o.shape for o in outs] == [f.shape for f in levels]
    rev = block.forward_pyramid(levels[::-1])[::-1]
    assert all(torch.equal(a, b) for a, b in zip(outs, rev))
    with pytest.raises(ValueError):
        block.forward_pyramid([torch.randn(1, 8, 4, 4), torch.randn(1, 16, 2, 2)])
    with pytest.raises(ValueError):
        SymmetricSearchAttention(10, 4)


def test_rpe_bias_changes_logits():
    att = SymmetricSearchAttention(8, 2, 2, relative_bias=True).double()
    F = torch.randn(1, 8, 3, 4, dtype=torch.float64)
    dx, dy = att.predict_offsets(F)
    base = att.attention_logits(F, dx, dy).detach().clone()
    with torch.no_grad():
        att.rpe_table[:, 4, 4] = 2.0  # zero offsets index the centre of the table
    assert torch.allclose(att.attention_logits(F, dx, dy) - base, torch.full_like(base, 2.0))


def sas_gradcheck_instance(seed, attention="symmetric", encoding="spe"):
    torch.manual_seed(seed)
    block = SASBlock(8, heads=2, points=2, attention=attention, encoding=encoding, stn_pool=2).double()
    randomize(block, scale=0.4, seed=seed)
    with torch.no_grad():
        if block.encoding.stn is not None:
            block.encoding.stn.fc2.bias.copy_(torch.tensor([1.0, 0, 0, 0, 1.0, 0], dtype=torch.float64)
                                             + 0.05 * torch.randn(6, dtype=torch.float64))
            block.encoding.stn.fc2.weight.mul_(0.1)
    F = torch.randn(1, 8, 6, 6, dtype=torch.float64, requires_grad=True)
    r = torch.randn(1, 8, 6, 6, dtype=torch.float64)
    return block, F, r


def test_sas_gradients_small():
    block, F, r = sas_gradcheck_instance(0)
    tensors = [F] + list(block.parameters())
    errs = fd_check(lambda: (block(F) * r).sum(), tensors)
    assert max(errs.values()) <= 1e-4, errs
