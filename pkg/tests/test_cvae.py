import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from maskjscc.cvae import (
    DEFAULT_M_BAR, MaskRatioCVAE, ProxyEncoder, generate_mask_ratio, sample_latent,
)
from maskjscc.errors import InputError, ShapeError, StateError


@pytest.fixture
def cvae():
    torch.manual_seed(0)
    return MaskRatioCVAE(184, latent=16)


def test_forward_shapes_and_ranges(cvae):
    y = torch.randn(5, 184)
    y_tilde, lat, beta, m_star = cvae(y, 0.009, torch.Generator().manual_seed(0))
    assert y_tilde.shape == y.shape and lat.z.shape == (5, 16)
    torch.testing.assert_close(beta.sum(-1), torch.ones(5))
    assert torch.all(beta >= 0)
    assert torch.all(m_star >= min(DEFAULT_M_BAR)) and torch.all(m_star <= max(DEFAULT_M_BAR))


@settings(max_examples=30, deadline=None)
@given(st.floats(-1e3, 1e3), st.integers(0, 1000))
def test_m_star_always_in_range(scale, seed):
    torch.manual_seed(seed)
    net = MaskRatioCVAE(8, latent=4)
    z = torch.randn(16, 4) * scale
    state = generate_mask_ratio(z, net)
    assert np.all(state.m_star >= 0.001 - 1e-9) and np.all(state.m_star <= 0.015 + 1e-9)
    np.testing.assert_allclose(state.beta.sum(-1), 1.0, atol=1e-6)


def test_posterior_mean_without_sampling(cvae):
    y = torch.randn(3, 184)
    _, lat, _, _ = cvae(y, 0.009, sample=False)
    assert torch.equal(lat.z, lat.mu_post)


def test_sample_latent_reparameterization():
    mu = torch.zeros(20000, 2)
    z = sample_latent(mu, torch.log(torch.full((20000, 2), 2.0)), seed=1)
    assert float(z.std()) == pytest.approx(2.0, rel=0.02)
    assert torch.equal(sample_latent(mu[:3], mu[:3], seed=4), sample_latent(mu[:3], mu[:3], seed=4))


def test_prior_variants():
    torch.manual_seed(0)
    net = MaskRatioCVAE(8, latent=4, prior_condition="y_and_m")
    with pytest.raises(ShapeError):
        net.prior(0.009)
    mu, ls = net.prior(0.009, torch.randn(2, 8))
    assert mu.shape == (2, 4)
    with pytest.raises(ValueError):
        MaskRatioCVAE(8, prior_condition="other")


def test_nan_input_rejected(cvae):
    with pytest.raises(InputError):
        cvae(torch.full((1, 184), float("nan")), 0.009)
    with pytest.raises(ShapeError):
        cvae.reconstruct(torch.zeros(1, 3), 0.009)


def test_proxy_encoder_snapshot_is_frozen():
    enc = torch.nn.Linear(4, 4)
    chan = lambda x, snr: x  # noqa: E731
    proxy = ProxyEncoder()
    with pytest.raises(StateError):
        proxy(torch.zeros(1, 4), torch.zeros(1, 2, 2, 2), 0.009, torch.zeros(1))

    class Enc(torch.nn.Module):
        def __init__(self):
            super().__init__()
            self.lin = enc

        def forward(self, s, csi, m):
            return self.lin(s)

    class Chan(torch.nn.Module):
        def forward(self, x, snr):
            return chan(x, snr)

    e = Enc()
    proxy.refresh(e, Chan())
    s = torch.randn(2, 4)
    before = proxy(s, torch.zeros(2, 2, 2, 2), 0.009, torch.zeros(2))
    with torch.no_grad():
        enc.weight.add_(1.0)
    after = proxy(s, torch.zeros(2, 2, 2, 2), 0.009, torch.zeros(2))
    assert torch.equal(before, after) and not before.requires_grad
