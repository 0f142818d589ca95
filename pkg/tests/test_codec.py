import numpy as np
import pytest
import torch

from maskjscc.codec import (
    ChannelModNet, EncoderConfig, PatchEmbed, SemanticDecoder, SemanticEncoder, patch_embed,
    window_partition, window_reverse,
)
from maskjscc.errors import InputError, ShapeError


@pytest.fixture(scope="module")
def cfg():
    return EncoderConfig()


def test_encoder_config_geometry(cfg):
    assert cfg.resolutions[0] == 16 and cfg.resolutions[cfg.ni_cfma_stage] == 4
    assert cfg.latent_dim == 192
    assert isinstance(cfg.fingerprint(), str)


def test_window_partition_roundtrip():
    x = torch.randn(2, 8, 8, 5)
    w = window_partition(x, 4)
    assert w.shape == (8, 16, 5)
    assert torch.equal(window_reverse(w, 4, 8, 8), x)


def test_patch_embed_shapes_and_error():
    pe = PatchEmbed(2, 24)
    tokens = patch_embed(np.random.rand(32, 32, 3), pe)
    assert tokens.shape == (256, 24)
    with pytest.raises(ShapeError):
        patch_embed(np.random.rand(31, 32, 3), pe)


def test_encoder_decoder_shapes_and_range(cfg):
    torch.manual_seed(0)
    enc, dec = SemanticEncoder(cfg), SemanticDecoder(cfg)
    s = torch.rand(2, 3, 32, 32)
    x = enc(s, torch.randn(2, 2, 2, 2), torch.tensor([0.009, 0.015]))
    assert x.shape == (2, 192)
    out = dec(x)
    assert out.shape == s.shape and float(out.detach().min()) >= 0 and float(out.detach().max()) <= 1
    assert len(enc.masked_blocks()) == 3
    assert len(enc.attention_site_blocks()) == 3


def test_encoder_rejects_nan(cfg):
    enc = SemanticEncoder(cfg)
    with pytest.raises(InputError):
        enc(torch.full((1, 3, 32, 32), float("nan")))


def test_zero_ratio_matches_unmasked_encoder(cfg):
    torch.manual_seed(3)
    plain = SemanticEncoder(cfg, use_masking=False)
    torch.manual_seed(3)
    masked = SemanticEncoder(cfg, use_masking=True)
    s = torch.rand(2, 3, 32, 32)
    assert torch.equal(plain(s), masked(s, torch.randn(2, 2, 2, 2), torch.zeros(2)))


def test_masking_changes_output(cfg):
    torch.manual_seed(3)
    enc = SemanticEncoder(cfg)
    s = torch.rand(2, 3, 32, 32)
    csi = torch.randn(2, 2, 2, 2)
    assert not torch.equal(enc(s, csi, torch.zeros(2)), enc(s, csi, torch.full((2,), 0.2)))


def test_channel_modnet_snr_dependence_and_nan():
    net = ChannelModNet(192, 184)
    x = torch.randn(3, 192)
    a = net(x, torch.zeros(3))
    b = net(x, torch.full((3,), 10.0))
    assert a.shape == (3, 184) and not torch.allclose(a, b)
    with pytest.raises(InputError):
        net(torch.full((1, 192), float("nan")), torch.zeros(1))
