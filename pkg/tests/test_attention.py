import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from maskjscc.attention import (
    GatedResidualNetwork, MaskStrategyNet, WindowAttention, attention_weights, build_mask,
    masked_count, mask_strategy, mha, ni_cfma, scores_to_ranks, semantic_importance,
    straight_through_mask,
)
from maskjscc.errors import InputError, ParameterError, ShapeError


def _qkv(seed, d=4, c=8, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    return [torch.randn(2, d, c, generator=g, dtype=dtype) for _ in range(3)]


def test_all_ones_mask_reduces_to_mha():
    q, k, v = _qkv(0)
    out = ni_cfma(q, k, v, torch.ones(4, 4, dtype=torch.float64), math.sqrt(8))
    torch.testing.assert_close(out, mha(q, k, v, 8), atol=1e-12, rtol=0)


def test_attention_rows_are_stochastic_masked_or_not():
    q, k, _ = _qkv(1, d=16)
    ranks = scores_to_ranks(torch.rand(2, 16, 16))
    for mode in ("literal", "neg_inf"):
        a = attention_weights(q, k, 2.0, build_mask(ranks, 0.3).double(), mask_mode=mode)
        torch.testing.assert_close(a.sum(-1), torch.ones(2, 16, dtype=torch.float64))


def test_value_path_untouched():
    # output rows are convex combinations of V rows
    q, k, v = _qkv(2)
    mask = torch.tensor([[1, 0, 1, 1]] * 4, dtype=torch.float64)
    a = attention_weights(q, k, 3.0, mask)
    torch.testing.assert_close(ni_cfma(q, k, v, mask, 3.0), a @ v)
    assert torch.all(a >= 0)


def test_literal_masking_zeroes_logits():
    q = torch.tensor([[[1.0, 0.0], [0.0, 1.0]]], dtype=torch.float64)
    k = torch.tensor([[[5.0, 0.0], [0.0, 5.0]]], dtype=torch.float64)
    mask = torch.tensor([[0.0, 1.0], [1.0, 1.0]], dtype=torch.float64)
    a = attention_weights(q, k, 1.0, mask)
    # row 0: logits (0, 0) after masking -> uniform
    torch.testing.assert_close(a[0, 0], torch.tensor([0.5, 0.5], dtype=torch.float64))
    b = attention_weights(q, k, 1.0, mask, mask_mode="neg_inf")
    assert b[0, 0, 0] < 1e-100
    with pytest.raises(ParameterError):
        attention_weights(q, k, 1.0, mask, mask_mode="other")


def test_mha_errors():
    q, k, v = _qkv(3)
    with pytest.raises(ParameterError):
        mha(q, k, v, 0)
    with pytest.raises(ShapeError):
        mha(q, k[..., :4], v, 8)


@pytest.mark.parametrize("m,d,expected", [(0.0, 4, 0), (1.0, 4, 16), (0.5, 4, 8), (0.009, 16, 2),
                                          (0.015, 16, 3), (0.1, 10, 10), (0.3, 10, 30)])
def test_masked_count(m, d, expected):
    assert masked_count(m, d) == expected


def test_scores_to_ranks_is_permutation_with_stable_ties():
    s = torch.tensor([[0.3, 0.1], [0.1, 0.5]])
    assert scores_to_ranks(s).tolist() == [[3, 1], [2, 4]]
    r = scores_to_ranks(torch.rand(5, 4, 4))
    assert torch.equal(r.reshape(5, -1).sort(-1).values, torch.arange(1, 17).expand(5, 16))


@settings(max_examples=60, deadline=None)
@given(st.floats(0, 1), st.sampled_from([1, 2, 4, 16, 64]), st.integers(0, 1000))
def test_build_mask_cardinality(m, d, seed):
    ranks = scores_to_ranks(torch.rand(d, d, generator=torch.Generator().manual_seed(seed)))
    mask = build_mask(ranks, m)
    assert int((mask == 0).sum()) == math.floor(m * d * d + 1e-9)


def test_build_mask_numpy_batch_and_errors():
    ranks = np.stack([np.arange(1, 17).reshape(4, 4)] * 2)
    mask = build_mask(ranks, np.array([0.25, 0.5]))
    assert isinstance(mask, np.ndarray)
    assert (mask[0] == 0).sum() == 4 and (mask[1] == 0).sum() == 8
    for bad in (-0.1, 1.1, float("nan")):
        with pytest.raises(ParameterError):
            build_mask(ranks, bad)


def test_grn_shapes_and_nan():
    grn = GatedResidualNetwork(12)
    assert semantic_importance(torch.randn(3, 16, 12), grn).shape == (3, 16)
    with pytest.raises(InputError):
        grn(torch.full((1, 4, 12), float("nan")))


def test_mask_strategy_outputs():
    net = MaskStrategyNet(2, 2)
    probs = net(torch.randn(3, 16), torch.randn(3, 2, 2, 2))
    assert probs.shape == (3, 16, 16)
    torch.testing.assert_close(probs.sum((-1, -2)), torch.ones(3))
    ranks = mask_strategy(torch.randn(3, 16), torch.randn(3, 2, 2, 2), net)
    assert ranks.dtype == torch.int64 and int(ranks.min()) == 1 and int(ranks.max()) == 256
    with pytest.raises(ShapeError):
        net(torch.randn(3, 16), torch.randn(2, 2, 2, 2))


def test_straight_through_forward_is_hard_and_ratio_gets_gradient():
    probs = torch.softmax(torch.randn(2, 256), -1).reshape(2, 16, 16).requires_grad_()
    m = torch.tensor([0.009, 0.015], requires_grad=True)
    mask = straight_through_mask(probs, m)
    assert set(mask.detach().unique().tolist()) <= {0.0, 1.0}
    assert (mask[0] == 0).sum() == 2 and (mask[1] == 0).sum() == 3
    (mask * torch.randn(2, 16, 16)).sum().backward()
    assert probs.grad is not None and m.grad is not None and torch.all(m.grad != 0)


def test_window_attention_masked_equals_plain_at_init_without_ratio():
    torch.manual_seed(0)
    plain = WindowAttention(24, 4, 2)
    torch.manual_seed(0)
    masked = WindowAttention(24, 4, 2, masked=True)
    shared = {k: v for k, v in masked.state_dict().items() if k in plain.state_dict()}
    for k, v in plain.state_dict().items():
        assert torch.equal(v, shared[k])
    x = torch.randn(3, 16, 24)
    assert torch.equal(plain(x), masked(x))
    # m = 0 with the initial rho is also the plain path
    csi = torch.randn(3, 2, 2, 2)
    assert torch.equal(plain(x), masked(x, csi=csi, ratio=torch.zeros(3)))
    assert float(masked.rho.detach()) == pytest.approx(math.sqrt(12))


def test_window_attention_records_mask():
    attn = WindowAttention(24, 4, 2, masked=True)
    attn.record = True
    attn(torch.randn(2, 16, 24), csi=torch.randn(2, 2, 2, 2), ratio=torch.tensor([0.015, 0.5]))
    assert attn.last["attn"].shape == (2, 2, 16, 16)
    zeros = (attn.last["mask"] == 0).flatten(1).sum(1).tolist()
    assert zeros == [3, 128]
