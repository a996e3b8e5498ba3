import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import gcn_reference, windowed_attention_reference
from vadclip.adapter import (
    AdapterConfig, LGTAdapter, LocalAttention, TemporalGCN, build_adjacency, distance_logits, window_starts,
)


@pytest.fixture(autouse=True)
def _double():
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(torch.float32)


def _weights(att):
    return [t.detach().numpy() for t in (att.qkv.weight, att.qkv.bias, att.proj.weight, att.proj.bias)]


def test_window_layout():
    assert window_starts(10, 4, 2) == [0, 2, 4, 6]
    assert window_starts(4, 8, 4) == [0]
    assert window_starts(9, 4, 2) == [0, 2, 4, 6]  # last window [6, 10) is padded


def test_single_window_equals_full_attention():
    torch.manual_seed(0)
    att = LocalAttention(6, window=8)
    x = torch.randn(5, 6)
    expected = windowed_attention_reference(x.numpy(), *_weights(att), window=5, stride=5)
    np.testing.assert_allclose(att(x).detach().numpy(), expected, atol=1e-12)


@pytest.mark.parametrize("n, window, overlap", [(10, 4, 0.5), (9, 4, 0.5), (13, 5, 0.4), (7, 3, 0.0)])
def test_windowed_attention_matches_reference(n, window, overlap):
    torch.manual_seed(n)
    att = LocalAttention(4, window=window, overlap=overlap)
    x = torch.randn(n, 4)
    expected = windowed_attention_reference(x.numpy(), *_weights(att), window, att.stride)
    np.testing.assert_allclose(att(x).detach().numpy(), expected, atol=1e-12)


def test_padding_mask_matches_unpadded():
    torch.manual_seed(1)
    att = LocalAttention(4, window=4)
    x = torch.randn(6, 4)
    padded = torch.cat([x, torch.zeros(2, 4)])
    mask = torch.tensor([True] * 6 + [False] * 2)
    # windows of the padded sequence: [0,4), [2,6), [4,8); frames 4,5 also sit in the third window
    out = att(padded, mask)[:6]
    ref = windowed_attention_reference(x.numpy(), *_weights(att), 4, 2)
    np.testing.assert_allclose(out[:4].detach().numpy(), ref[:4], atol=1e-12)
    assert torch.isfinite(att(padded, mask)).all()


def test_equal_rows_give_equal_outputs():
    torch.manual_seed(2)
    att = LocalAttention(5, window=4)
    x = torch.randn(1, 5).expand(11, 5)
    out = att(x)
    assert torch.allclose(out, out[:1].expand_as(out), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(9, 30))
def test_locality(seed, n):
    torch.manual_seed(seed)
    att = LocalAttention(4, window=4)
    x = torch.randn(n, 4)
    i, j = 0, n - 1  # frame 0 only lives in window [0, 4)
    y = x.clone()
    y[j] += torch.randn(4)
    base, pert = att(x) - x, att(y) - y
    assert torch.equal(base[i], pert[i])


def test_adjacency_single_frame():
    h_sim, h_dis = build_adjacency(torch.randn(1, 3))
    assert h_sim.tolist() == [[1.0]] and h_dis.tolist() == [[1.0]]


def test_distance_adjacency_row():
    _, h_dis = build_adjacency(torch.randn(3, 4), sigma=1.0)
    z = 1 + math.exp(-1) + math.exp(-2)
    np.testing.assert_allclose(h_dis[0].numpy(), [1 / z, math.exp(-1) / z, math.exp(-2) / z], atol=1e-12)
    np.testing.assert_allclose(h_dis[0].numpy(), [0.6652, 0.2447, 0.0900], atol=5e-5)


def test_identical_rows_give_uniform_similarity():
    h_sim, _ = build_adjacency(torch.ones(4, 3) * 2.5)
    assert torch.allclose(h_sim, torch.full((4, 4), 0.25), atol=1e-12)


def test_zero_rows_only_link_to_themselves():
    x = torch.randn(4, 3)
    x[2] = 0
    h_sim, _ = build_adjacency(x, sim_threshold=0.1)
    assert h_sim[2].tolist() == [0.0, 0.0, 1.0, 0.0]
    assert torch.isfinite(h_sim).all()


def test_threshold_filters_weak_relations():
    x = torch.tensor([[1.0, 0.0], [0.0, 1.0], [1.0, 0.1]])
    h_sim, _ = build_adjacency(x, sim_threshold=0.7)
    assert h_sim[0, 1] == 0 and h_sim[0, 2] > 0


def test_masked_columns_never_aggregated():
    x = torch.randn(5, 3)
    mask = torch.tensor([True, True, True, False, False])
    h_sim, h_dis = build_adjacency(x, sim_threshold=0.0, mask=mask)
    assert (h_sim[:3, 3:] == 0).all() and (h_dis[:3, 3:] == 0).all()


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 20), st.floats(0.0, 0.95), st.floats(0.1, 5.0))
def test_adjacency_rows_stochastic(seed, n, thr, sigma):
    g = torch.Generator().manual_seed(seed)
    h_sim, h_dis = build_adjacency(torch.randn(n, 5, generator=g), thr, sigma)
    for h in (h_sim, h_dis):
        assert (h >= 0).all()
        assert torch.allclose(h.sum(1), torch.ones(n), atol=1e-6)
    raw = distance_logits(n, sigma)
    assert torch.equal(raw, raw.T)


def test_gcn_zero_weight_is_identity():
    gcn = TemporalGCN(4)
    with torch.no_grad():
        gcn.weight.zero_()
    x = torch.randn(6, 4)
    assert torch.equal(gcn(x, *build_adjacency(x)), x)


def test_gcn_single_frame():
    gcn = TemporalGCN(3)
    x = torch.randn(1, 3)
    expected = x + torch.nn.functional.gelu(torch.cat([x, x], -1) @ gcn.weight)
    assert torch.allclose(gcn(x, *build_adjacency(x)), expected, atol=1e-12)


def test_gcn_matches_straight_line_reference():
    g = torch.Generator().manual_seed(4)
    base = torch.randn(8, generator=g)
    x = base + 0.5 * torch.randn(4, 8, generator=g)
    gcn = TemporalGCN(8)
    with torch.no_grad():
        gcn.weight.copy_(torch.randn(16, 8, generator=g) * 0.3)
    out = gcn(x, *build_adjacency(x, 0.7, 1.0))
    expected, h_sim, _ = gcn_reference(x.numpy(), gcn.weight.detach().numpy(), 0.7, 1.0)
    assert (h_sim > 0).sum() > 4  # some off-diagonal edges survive the threshold
    np.testing.assert_allclose(out.detach().numpy(), expected, atol=1e-10)


def test_adapter_gradients_against_finite_differences():
    torch.manual_seed(5)
    adapter = LGTAdapter(4, AdapterConfig(window=4, sim_threshold=0.3))
    x = (torch.randn(4) + 0.5 * torch.randn(6, 4)).requires_grad_()
    assert torch.autograd.gradcheck(lambda inp: adapter(inp), (x,), eps=1e-6, atol=1e-6)


@pytest.mark.parametrize("use_local, use_gcn", [(False, False), (True, False), (False, True), (True, True)])
def test_ablation_toggles(use_local, use_gcn):
    torch.manual_seed(6)
    adapter = LGTAdapter(4, AdapterConfig(window=4, use_local=use_local, use_gcn=use_gcn))
    x = torch.randn(7, 4)
    expected = x
    if use_local:
        expected = adapter.local(expected)
    if use_gcn:
        expected = adapter.gcn(expected, *build_adjacency(expected, 0.7, 1.0))
    assert torch.equal(adapter(x), expected)
    if not (use_local or use_gcn):
        assert torch.equal(adapter(x), x)


@pytest.mark.parametrize("kw", [dict(window=0), dict(overlap=1.0), dict(sigma=0.0), dict(sim_threshold=1.0)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        AdapterConfig(**kw)
