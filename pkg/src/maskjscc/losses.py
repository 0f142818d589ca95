"""Training objectives and the (differentiable) MS-SSIM metric."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ParameterError, ShapeError

# standard five-scale MS-SSIM exponents
_MS_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


@dataclass
class LossBreakdown:
    l1: float
    l_rec: float
    l_reg: float
    l_c: float
    l2: float
    lam: float


def _gaussian_window(size: int, sigma: float, dtype) -> torch.Tensor:
    x = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-x ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def ms_ssim_plan(min_side: int) -> tuple[int, int]:
    """(window size, number of scales) for an image whose short side is ``min_side``.

    Below 160 px the 11-tap window and five scales no longer fit, so the
    window drops to 7 taps and the scale count to what keeps the coarsest
    level at least one window wide.
    """
    win = 11 if min_side >= 160 else 7
    scales = min(5, int(math.floor(math.log2(min_side / win))) + 1)
    if scales < 1:
        raise ShapeError(f"image side {min_side} too small for MS-SSIM")
    return win, scales


def _ssim_terms(x, y, win1d, data_range=1.0):
    c = x.shape[1]
    k = win1d.shape[0]
    wh = win1d.view(1, 1, 1, k).repeat(c, 1, 1, 1)
    wv = win1d.view(1, 1, k, 1).repeat(c, 1, 1, 1)

    def blur(t):
        return F.conv2d(F.conv2d(t, wh, groups=c), wv, groups=c)

    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mx, my = blur(x), blur(y)
    sxx = blur(x * x) - mx ** 2
    syy = blur(y * y) - my ** 2
    sxy = blur(x * y) - mx * my
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    lum = (2 * mx * my + c1) / (mx ** 2 + my ** 2 + c1)
    return (lum * cs).flatten(1).mean(1), cs.flatten(1).mean(1)


def ms_ssim(x: torch.Tensor, y: torch.Tensor, data_range: float = 1.0) -> torch.Tensor:
    """Per-image MS-SSIM for [B, C, H, W] tensors in [0, data_range]."""
    if x.shape != y.shape:
        raise ShapeError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    win, scales = ms_ssim_plan(min(x.shape[-2:]))
    weights = torch.tensor(_MS_WEIGHTS[:scales], dtype=x.dtype)
    weights = weights / weights.sum()
    win1d = _gaussian_window(win, 1.5, x.dtype)
    mcs = []
    for i in range(scales):
        ssim, cs = _ssim_terms(x, y, win1d, data_range)
        if i < scales - 1:
            mcs.append(cs.clamp(min=1e-6))
            x = F.avg_pool2d(x, 2)
            y = F.avg_pool2d(y, 2)
    vals = torch.stack(mcs + [ssim.clamp(min=1e-6)], dim=0)
    return torch.prod(vals ** weights.view(-1, 1), dim=0)


def loss_l1(s: torch.Tensor, s_hat: torch.Tensor, metric: str = "mse") -> torch.Tensor:
    """Mean reconstruction distortion over the batch; ms_ssim mode gives 1 - MS-SSIM."""
    if s.shape != s_hat.shape:
        raise ShapeError(f"shape mismatch {tuple(s.shape)} vs {tuple(s_hat.shape)}")
    if metric == "mse":
        return F.mse_loss(s_hat, s)
    if metric == "ms_ssim":
        return 1.0 - ms_ssim(s_hat, s).mean()
    raise ParameterError(f"unknown metric {metric!r}")


def gaussian_kl(mu_q, logsig_q, mu_p, logsig_p, variant: str = "standard") -> torch.Tensor:
    """Per-sample KL(q || p) between diagonal Gaussians parameterized by log std.

    ``variant="no_offset"`` drops the constant -1/2 per dimension, which makes the
    value equal L/2 rather than 0 at coincidence.
    """
    var_ratio = torch.exp(2 * (logsig_q - logsig_p))
    mean_term = (mu_q - mu_p) ** 2 * torch.exp(-2 * logsig_p)
    log_term = 2 * (logsig_p - logsig_q)
    inner = log_term + var_ratio + mean_term
    if variant == "standard":
        inner = inner - 1.0
    elif variant != "no_offset":
        raise ParameterError(f"unknown KL variant {variant!r}")
    return 0.5 * inner.sum(-1)


def loss_cvae(y_bar, y_tilde, posterior, prior, kl_variant: str = "standard"):
    """(l_rec, l_reg, l_c): batch means of ||y_tilde - y_bar||^2 and the KL term."""
    if y_bar.shape != y_tilde.shape:
        raise ShapeError(f"shape mismatch {tuple(y_bar.shape)} vs {tuple(y_tilde.shape)}")
    l_rec = ((y_tilde - y_bar) ** 2).sum(-1).mean()
    l_reg = gaussian_kl(*posterior, *prior, variant=kl_variant).mean()
    return l_rec, l_reg, l_rec + l_reg


def loss_total(l1, l_c, lam: float):
    if lam < 0:
        raise ParameterError("lambda must be non-negative")
    return l1 + lam * l_c
