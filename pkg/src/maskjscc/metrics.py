"""Image quality metrics reported by the harness."""
from __future__ import annotations

import numpy as np
import torch

from .errors import ShapeError
from .losses import ms_ssim as _ms_ssim_torch


def psnr(s, s_hat) -> float:
    """10 log10(1 / MSE) for images in [0, 1]; ``inf`` when identical."""
    s = np.asarray(s, dtype=np.float64)
    s_hat = np.asarray(s_hat, dtype=np.float64)
    if s.shape != s_hat.shape:
        raise ShapeError(f"shape mismatch {s.shape} vs {s_hat.shape}")
    mse = float(np.mean((s - s_hat) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(1.0 / mse)


def psnr_batch(s: torch.Tensor, s_hat: torch.Tensor) -> np.ndarray:
    mse = ((s.double() - s_hat.double()) ** 2).flatten(1).mean(1).numpy()
    with np.errstate(divide="ignore"):
        return np.where(mse == 0, np.inf, 10.0 * np.log10(1.0 / np.where(mse == 0, 1.0, mse)))


def ms_ssim(s, s_hat) -> float:
    """MS-SSIM of two [H, W, 3] images in [0, 1]."""
    a = torch.as_tensor(np.asarray(s), dtype=torch.float64)
    b = torch.as_tensor(np.asarray(s_hat), dtype=torch.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return float(_ms_ssim_torch(a.permute(2, 0, 1)[None], b.permute(2, 0, 1)[None])[0])
