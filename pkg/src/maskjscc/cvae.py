"""
Conditional VAE that turns a proxy codeword and a stable mask ratio into a
learned mask ratio m* = M_bar . softmax(head(z)).
"""
from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .errors import InputError, ShapeError, StateError

DEFAULT_M_BAR = (0.001, 0.003, 0.005, 0.007, 0.009, 0.012, 0.014, 0.015)
DEFAULT_M_STABLE = 0.009


@dataclass
class MaskRatioState:
    m_stable: float
    m_bar: np.ndarray
    beta: np.ndarray
    m_star: np.ndarray


@dataclass
class LatentState:
    z: torch.Tensor
    mu_post: torch.Tensor
    logsig_post: torch.Tensor
    mu_prior: torch.Tensor
    logsig_prior: torch.Tensor
    epsilon: torch.Tensor


def _mlp(din, hidden, dout):
    return nn.Sequential(nn.Linear(din, hidden), nn.ReLU(), nn.Linear(hidden, hidden), nn.ReLU(),
                         nn.Linear(hidden, dout))


def _check_finite(*xs):
    for x in xs:
        if not torch.all(torch.isfinite(x)):
            raise InputError("CVAE input contains NaN or Inf")


def _cond(m, like: torch.Tensor) -> torch.Tensor:
    if not torch.is_tensor(m):
        m = torch.full((like.shape[0],), float(m))
    return m.reshape(-1, 1).to(like.dtype).expand(like.shape[0], 1)


class MaskRatioCVAE(nn.Module):
    """Posterior d_a(y, m), prior d_s(m), decoder d_p(z, m) and ratio head d_q(z).

    ``prior_condition="m"`` conditions the prior on the stable ratio only;
    ``"y_and_m"`` also feeds the proxy codeword.
    """

    def __init__(self, c_l: int, latent: int = 16, hidden: int = 128,
                 m_bar=DEFAULT_M_BAR, prior_condition: str = "m"):
        super().__init__()
        if prior_condition not in ("m", "y_and_m"):
            raise ValueError(f"prior_condition must be 'm' or 'y_and_m', got {prior_condition!r}")
        self.c_l, self.latent = c_l, latent
        self.prior_condition = prior_condition
        self.register_buffer("m_bar", torch.as_tensor(m_bar, dtype=torch.float32))
        self.posterior_net = _mlp(c_l + 1, hidden, 2 * latent)
        prior_in = 1 if prior_condition == "m" else c_l + 1
        self.prior_net = _mlp(prior_in, 32 if prior_condition == "m" else hidden, 2 * latent)
        self.decoder_net = _mlp(latent + 1, hidden, c_l)
        self.ratio_head = nn.Sequential(nn.Linear(latent, 32), nn.ReLU(), nn.Linear(32, len(m_bar)))

    # the condition is scaled so that the tiny ratios sit near unit range
    @staticmethod
    def _scaled(m_col):
        return m_col * 100.0

    def posterior(self, y_bar, m):
        _check_finite(y_bar)
        out = self.posterior_net(torch.cat([y_bar, self._scaled(_cond(m, y_bar))], dim=-1))
        return out[:, :self.latent], out[:, self.latent:]

    def prior(self, m, y_bar=None):
        if self.prior_condition == "m":
            ref = y_bar if y_bar is not None else torch.as_tensor(m, dtype=torch.float32).reshape(-1, 1)
            inp = self._scaled(_cond(m, ref))
        else:
            if y_bar is None:
                raise ShapeError("prior conditioned on y needs the proxy codeword")
            inp = torch.cat([y_bar, self._scaled(_cond(m, y_bar))], dim=-1)
        out = self.prior_net(inp)
        return out[:, :self.latent], out[:, self.latent:]

    def reconstruct(self, z, m):
        if z.shape[-1] != self.latent:
            raise ShapeError(f"latent of length {self.latent} expected, got {z.shape[-1]}")
        return self.decoder_net(torch.cat([z, self._scaled(_cond(m, z))], dim=-1))

    def ratio_weights(self, z):
        _check_finite(z)
        return torch.softmax(self.ratio_head(z), dim=-1)

    def mask_ratio(self, z):
        """beta [B, K] and m* [B] = M_bar . beta."""
        beta = self.ratio_weights(z)
        return beta, beta @ self.m_bar.to(beta.dtype)

    def forward(self, y_bar, m, generator: torch.Generator | None = None, sample: bool = True):
        mu_q, ls_q = self.posterior(y_bar, m)
        mu_p, ls_p = self.prior(m, y_bar)
        if sample:
            eps = torch.randn(mu_q.shape, generator=generator, dtype=mu_q.dtype)
        else:
            eps = torch.zeros_like(mu_q)
        z = mu_q + torch.exp(ls_q) * eps
        y_tilde = self.reconstruct(z, m)
        beta, m_star = self.mask_ratio(z)
        latent = LatentState(z, mu_q, ls_q, mu_p, ls_p, eps)
        return y_tilde, latent, beta, m_star


def sample_latent(mu, logsig, seed: int | None = None, generator: torch.Generator | None = None):
    """z = mu + exp(logsig) * eps with eps ~ N(0, I)."""
    mu = torch.as_tensor(mu)
    logsig = torch.as_tensor(logsig)
    if generator is None:
        generator = torch.Generator().manual_seed(0 if seed is None else seed)
    eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
    return mu + torch.exp(logsig) * eps


def generate_mask_ratio(z, cvae: MaskRatioCVAE, m_stable: float = DEFAULT_M_STABLE) -> MaskRatioState:
    with torch.no_grad():
        beta, m_star = cvae.mask_ratio(torch.as_tensor(z, dtype=torch.float32).reshape(-1, cvae.latent))
    return MaskRatioState(m_stable, cvae.m_bar.numpy().copy(), beta.numpy(), m_star.numpy())


class ProxyEncoder:
    """Frozen snapshot of the semantic encoder + channel encoder producing y_bar."""

    def __init__(self):
        self.encoder = None
        self.channel_encoder = None

    def refresh(self, encoder: nn.Module, channel_encoder: nn.Module) -> None:
        self.encoder = copy.deepcopy(encoder)
        self.channel_encoder = copy.deepcopy(channel_encoder)
        for mod in (self.encoder, self.channel_encoder):
            mod.eval()
            for p in mod.parameters():
                p.requires_grad_(False)

    @property
    def ready(self) -> bool:
        return self.encoder is not None

    def __call__(self, s, csi, m_stable, snr_db):
        if not self.ready:
            raise StateError("proxy encoder snapshot missing")
        if not torch.is_tensor(m_stable):
            m_stable = torch.full((s.shape[0],), float(m_stable))
        with torch.no_grad():
            return self.channel_encoder(self.encoder(s, csi.detach(), m_stable), snr_db)


def proxy_encode(s, csi, m_stable, snr_db, proxy: ProxyEncoder):
    return proxy(s, csi, m_stable, snr_db)
