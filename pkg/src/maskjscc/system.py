"""End-to-end transmission link: estimator, codecs, MIMO channel and mask-ratio generator."""
from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn

from .channel import csi_to_image, image_to_csi, torch_ls_pilots, torch_mimo_link
from .codec import ChannelModNet, SemanticDecoder, SemanticEncoder
from .config import ExperimentConfig
from .cvae import MaskRatioCVAE, ProxyEncoder
from .estimator import NoisePurifiedNet, NPNConfig


class LinkModel(nn.Module):
    """All trainable parts of one configured link.

    Codec modules are created first from ``cfg.seed`` so their initial
    weights do not depend on the mode.
    """

    def __init__(self, cfg: ExperimentConfig):
        super().__init__()
        self.cfg = cfg
        enc_cfg = cfg.encoder_config()
        torch.manual_seed(cfg.seed)
        self.encoder = SemanticEncoder(enc_cfg, use_masking=cfg.mode != "baseline_m0")
        self.decoder = SemanticDecoder(enc_cfg)
        self.channel_encoder = ChannelModNet(cfg.latent_dim, cfg.c_l, cfg.codec_hidden)
        self.channel_decoder = ChannelModNet(cfg.c_l, cfg.latent_dim, cfg.codec_hidden)
        torch.manual_seed(cfg.seed + 1)
        self.npn = NoisePurifiedNet(NPNConfig(n_r=cfg.n_r, n_t=cfg.n_t))
        torch.manual_seed(cfg.seed + 2)
        self.cvae = (MaskRatioCVAE(cfg.c_l, cfg.cvae_latent, m_bar=cfg.m_bar,
                                   prior_condition=cfg.prior_condition)
                     if cfg.mode == "lcfsc" else None)
        self.proxy = ProxyEncoder()
        self.npn_pretrained = False
        self.trained = False

    def codec_modules(self):
        return [self.encoder, self.decoder, self.channel_encoder, self.channel_decoder]

    def refresh_proxy(self) -> None:
        self.proxy.refresh(self.encoder, self.channel_encoder)

    def estimate_csi(self, h: torch.Tensor, sigma2: torch.Tensor, generator=None) -> torch.Tensor:
        """Pilot pass + LS + NPN refinement; returns the real/imag CSI image [B, 2, n_r, n_t]."""
        p = self.cfg.pilot_p
        h_ls = torch_ls_pilots(h, sigma2, p, generator)
        return self.npn(csi_to_image(h_ls).float(), torch.sqrt(sigma2 / p).float())

    def forward(self, s, h, snr_db, noise_gen=None, latent_gen=None, m=None, sample_latent=True):
        """s: [B, 3, H, W]; h: [B, n_r, n_t] complex; snr_db: [B].

        ``m`` overrides the mode's mask ratio (scalar or [B]).  Returns a
        dict with the reconstruction and intermediate quantities.
        """
        cfg = self.cfg
        b = s.shape[0]
        snr_db = torch.as_tensor(snr_db, dtype=torch.float32).reshape(-1).expand(b)
        sigma2 = 10.0 ** (-snr_db / 10.0)
        csi = self.estimate_csi(h, sigma2, noise_gen)
        out = {"csi": csi}

        ratio = None
        if m is not None:
            ratio = torch.as_tensor(m, dtype=torch.float32).reshape(-1).expand(b).clone()
        elif cfg.mode == "cfsc_fixed_m" and cfg.masking_enabled:
            ratio = torch.full((b,), float(cfg.m_fixed))
        elif cfg.mode == "lcfsc" and cfg.masking_enabled:
            if not self.proxy.ready:
                self.refresh_proxy()
            y_bar = self.proxy(s, csi, cfg.m_stable, snr_db)
            y_tilde, latent, beta, m_star = self.cvae(y_bar, cfg.m_stable, latent_gen, sample_latent)
            out.update(y_bar=y_bar, y_tilde=y_tilde, latent=latent, beta=beta)
            ratio = m_star if cfg.ratio_grad else m_star.detach()
        out["m"] = ratio

        x = self.encoder(s, csi, ratio)
        y = self.channel_encoder(x, snr_db)
        h_est = image_to_csi(csi)
        y_hat = torch_mimo_link(y, h.to(torch.complex64), h_est.to(torch.complex64), sigma2, noise_gen)
        x_hat = self.channel_decoder(y_hat, snr_db)
        out.update(x=x, y=y, y_hat=y_hat, x_hat=x_hat, s_hat=self.decoder(x_hat))
        return out


def set_recording(model: LinkModel, flag: bool) -> None:
    for mod in model.modules():
        if hasattr(mod, "record"):
            mod.record = flag
            mod.last = {}
