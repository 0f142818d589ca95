"""
Noise-purified channel estimator.

A small U-Net refines a coarse LS channel estimate.  Each skip connection
passes through a subspace-attention (SSA) unit that builds K basis vectors
from the encoder/decoder feature pair and orthogonally projects the noisy
encoder feature onto their span.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .channel import PilotBlock, csi_to_image, image_to_csi, snr_to_sigma2
from .errors import DegenerateBasisError, InputError, ParameterError, ShapeError

GRAM_RIDGE = 1e-6
GRAM_COND_LIMIT = 1e8


def complex_to_csi_image(h: np.ndarray) -> np.ndarray:
    """Complex [n_r, n_t] -> real [n_r, n_t, 2] (channel-last CsiImage)."""
    h = np.asarray(h)
    return np.stack([h.real, h.imag], axis=-1)


def csi_image_to_complex(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.shape[-1] != 2:
        raise ShapeError("CSI image needs a trailing real/imag axis of size 2")
    return x[..., 0] + 1j * x[..., 1]


def subspace_project(x1: torch.Tensor, v_b: torch.Tensor, check: bool = True) -> torch.Tensor:
    """Orthogonal projection of ``x1`` onto span(v_b).

    x1 is flattened per sample to length N; v_b is [N, K] or [B, N, K].
    With ``check`` the Gram matrix condition number is verified first and
    the projection is exact; without it a small relative ridge is added.
    """
    batched = v_b.dim() == 3
    vb = v_b if batched else v_b.unsqueeze(0)
    b = vb.shape[0]
    n, k = vb.shape[-2:]
    xf = x1.reshape(b, n, -1)
    gram = vb.transpose(-1, -2) @ vb
    if check:
        cond = torch.linalg.cond(gram.detach())
        if not torch.all(torch.isfinite(cond)) or torch.any(cond > GRAM_COND_LIMIT):
            raise DegenerateBasisError()
    if not check:
        # unchecked (training) path: a ridge relative to the Gram scale keeps
        # the solve finite for nearly collinear learned bases
        eye = torch.eye(k, dtype=vb.dtype, device=vb.device)
        scale = gram.diagonal(dim1=-2, dim2=-1).mean(-1).detach().clamp_min(1e-12)
        gram = gram + GRAM_RIDGE * scale[:, None, None] * eye
    coef = torch.linalg.solve(gram, vb.transpose(-1, -2) @ xf)
    y = (vb @ coef).reshape(x1.shape)
    return y


class BasisGenerator(nn.Module):
    """Residual conv stack mapping a feature pair to K basis vectors of length 2*H*W."""

    def __init__(self, in_ch: int = 2, hidden: int = 16, k: int = 4):
        super().__init__()
        self.k = k
        self.body = nn.Sequential(
            nn.Conv2d(2 * in_ch, hidden, 3, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(hidden, hidden, 3, padding=1), nn.LeakyReLU(0.2),
        )
        self.skip = nn.Conv2d(2 * in_ch, hidden, 1)
        self.head = nn.Conv2d(hidden, 2 * k, 1)

    def forward(self, x1: torch.Tensor, x2: torch.Tensor) -> torch.Tensor:
        if x1.shape != x2.shape:
            raise ShapeError(f"feature pair shapes differ: {tuple(x1.shape)} vs {tuple(x2.shape)}")
        x = torch.cat([x1, x2], dim=1)
        feat = self.head(self.body(x) + self.skip(x))
        b, _, h, w = feat.shape
        # [B, K, 2, H, W] -> [B, N=2HW, K]
        return feat.reshape(b, self.k, 2 * h * w).transpose(1, 2)


def generate_basis(x1: torch.Tensor, x2: torch.Tensor, net: BasisGenerator) -> torch.Tensor:
    return net(x1, x2)


class SubspaceAttention(nn.Module):
    """Skip-connection unit: reduce to a 2-plane feature, project, lift back."""

    def __init__(self, enc_ch: int, dec_ch: int, k: int):
        super().__init__()
        self.reduce_enc = nn.Conv2d(enc_ch, 2, 1)
        self.reduce_dec = nn.Conv2d(dec_ch, 2, 1)
        self.basis = BasisGenerator(2, 16, k)
        self.lift = nn.Conv2d(2, enc_ch, 1)

    def forward(self, enc: torch.Tensor, dec: torch.Tensor) -> torch.Tensor:
        x1 = self.reduce_enc(enc)
        x2 = self.reduce_dec(dec)
        v_b = self.basis(x1, x2)
        return self.lift(subspace_project(x1, v_b, check=False))


def _conv_block(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1), nn.LeakyReLU(0.2),
        nn.Conv2d(cout, cout, 3, padding=1), nn.LeakyReLU(0.2),
    )


@dataclass
class NPNConfig:
    n_r: int = 2
    n_t: int = 2
    widths: tuple = (16, 32)
    k: int | None = None  # defaults to min(4, 2*n_r*n_t)

    def basis_dim(self) -> int:
        return self.k if self.k is not None else min(4, 2 * self.n_r * self.n_t)


class NoisePurifiedNet(nn.Module):
    """Two-level U-Net with SSA on every skip; predicts a residual correction to h_LS."""

    def __init__(self, cfg: NPNConfig | None = None):
        super().__init__()
        cfg = cfg or NPNConfig()
        self.cfg = cfg
        w1, w2 = cfg.widths
        strides = []
        h, w = cfg.n_r, cfg.n_t
        for _ in range(2):
            s = 2 if min(h, w) >= 4 else 1
            strides.append(s)
            h, w = math.ceil(h / s), math.ceil(w / s)
        self.strides = strides

        self.enc1 = _conv_block(3, w1)
        self.down1 = nn.Conv2d(w1, w1, 3, stride=strides[0], padding=1)
        self.enc2 = _conv_block(w1, w2)
        self.down2 = nn.Conv2d(w2, w2, 3, stride=strides[1], padding=1)
        self.bottleneck = _conv_block(w2, w2)

        self.up2 = nn.Conv2d(w2, w2, 3, padding=1)
        self.ssa2 = SubspaceAttention(w2, w2, self._k_at(1))
        self.dec2 = _conv_block(2 * w2, w2)
        self.up1 = nn.Conv2d(w2, w1, 3, padding=1)
        self.ssa1 = SubspaceAttention(w1, w1, self._k_at(0))
        self.dec1 = _conv_block(2 * w1, w1)
        self.out = nn.Conv2d(w1, 2, 1)

    def _k_at(self, level: int) -> int:
        h, w = self.cfg.n_r, self.cfg.n_t
        for s in self.strides[:level]:
            h, w = math.ceil(h / s), math.ceil(w / s)
        return min(self.cfg.basis_dim(), 2 * h * w)

    @staticmethod
    def _upsample(x, like):
        if x.shape[-2:] == like.shape[-2:]:
            return x
        return F.interpolate(x, size=like.shape[-2:], mode="nearest")

    def forward(self, x: torch.Tensor, noise_std: torch.Tensor | None = None) -> torch.Tensor:
        """x: [B, 2, n_r, n_t] real/imag planes of h_LS.

        noise_std: [B] per-entry std of the LS error, fed as a constant plane
        (zeros when unknown).
        """
        if noise_std is None:
            plane = torch.zeros_like(x[:, :1])
        else:
            plane = noise_std.reshape(-1, 1, 1, 1).to(x.dtype).expand_as(x[:, :1])
        e1 = self.enc1(torch.cat([x, plane], dim=1))
        e2 = self.enc2(self.down1(e1))
        b = self.bottleneck(self.down2(e2))
        u2 = self.up2(self._upsample(b, e2))
        d2 = self.dec2(torch.cat([u2, self.ssa2(e2, u2)], dim=1))
        u1 = self.up1(self._upsample(d2, e1))
        d1 = self.dec1(torch.cat([u1, self.ssa1(e1, u1)], dim=1))
        return x + self.out(d1)


def ls_noise_std(sigma2, tau: np.ndarray) -> np.ndarray:
    """Per-entry std of the LS error n @ inv(tau), averaged over columns."""
    tau_inv = np.linalg.inv(np.asarray(tau))
    gain = np.sum(np.abs(tau_inv) ** 2) / tau_inv.shape[1]
    return np.sqrt(np.asarray(sigma2, dtype=float) * gain)


def refine_csi(h_ls, model: NoisePurifiedNet, noise_std=None):
    """Refine a coarse estimate.

    Accepts a complex [n_r, n_t] matrix or a real [n_r, n_t, 2] CSI image
    (numpy, optionally with a leading batch axis) and returns the same form.
    ``noise_std`` is the LS error std (scalar or per sample), see
    :func:`ls_noise_std`.
    """
    arr = np.asarray(h_ls)
    is_complex = np.iscomplexobj(arr)
    img = complex_to_csi_image(arr) if is_complex else arr
    if not np.all(np.isfinite(img)):
        raise InputError("h_ls contains NaN or Inf")
    single = img.ndim == 3
    t = torch.as_tensor(img if not single else img[None], dtype=torch.float32)
    t = t.permute(0, 3, 1, 2)
    ns = None
    if noise_std is not None:
        ns = torch.as_tensor(np.broadcast_to(np.asarray(noise_std, dtype=float), (t.shape[0],)).copy(),
                             dtype=torch.float32)
    with torch.no_grad():
        out = model(t, ns).permute(0, 2, 3, 1).double().numpy()
    out = out[0] if single else out
    return csi_image_to_complex(out) if is_complex else out


def _ls_batch(h: torch.Tensor, tau: torch.Tensor, tau_inv: torch.Tensor, sigma2: torch.Tensor,
              generator: torch.Generator) -> torch.Tensor:
    rx = h @ tau
    std = torch.sqrt(sigma2 / 2).reshape(-1, 1, 1)
    noise = torch.complex(std * torch.randn(rx.shape, generator=generator, dtype=std.dtype),
                          std * torch.randn(rx.shape, generator=generator, dtype=std.dtype))
    return (rx + noise) @ tau_inv


def _balanced_snrs(snr_list, n: int, rng: np.random.Generator) -> np.ndarray:
    reps = int(np.ceil(n / len(snr_list)))
    pool = np.tile(np.asarray(snr_list, dtype=float), reps)[:n]
    return rng.permutation(pool)


def npn_mse(model: NoisePurifiedNet, channels: np.ndarray, snr_db: float,
            pilot: PilotBlock | None = None, seed: int = 0) -> tuple[float, float]:
    """Mean squared Frobenius error of (NPN, LS) estimates on a channel set at one SNR."""
    pilot = pilot or PilotBlock.orthogonal(channels.shape[-1])
    gen = torch.Generator().manual_seed(seed)
    h = torch.as_tensor(channels, dtype=torch.complex64)
    tau = torch.as_tensor(pilot.tau, dtype=torch.complex64)
    sigma2 = torch.full((h.shape[0],), snr_to_sigma2(snr_db), dtype=torch.float32)
    h_ls = _ls_batch(h, tau, torch.linalg.inv(tau), sigma2, gen)
    ns = torch.full_like(sigma2, float(ls_noise_std(snr_to_sigma2(snr_db), pilot.tau)))
    with torch.no_grad():
        h_e = image_to_csi(model(csi_to_image(h_ls), ns))
    err = lambda a: float(torch.mean(torch.sum(torch.abs(a - h) ** 2, dim=(-1, -2))))
    return err(h_e), err(h_ls)


@dataclass
class PretrainResult:
    model: NoisePurifiedNet
    history: list = field(default_factory=list)  # rows (epoch, split, mse)


def pretrain_npn(channel_samples: np.ndarray, pilot: PilotBlock | None = None,
                 snr_list=(0.0, 5.0, 10.0), epochs: int = 100, batch_size: int = 32,
                 lr: float = 1e-3, seed: int = 0, val_channels: np.ndarray | None = None,
                 model: NoisePurifiedNet | None = None) -> PretrainResult:
    """Supervised NPN pretraining on pilot passes over a channel pool.

    Per batch: draw channels, send pilots at a drawn SNR, LS-estimate, refine
    and regress onto the true channel with MSE.
    """
    channel_samples = np.asarray(channel_samples)
    if channel_samples.size == 0 or channel_samples.ndim != 3:
        raise ParameterError("channel sample set is empty")
    n, n_r, n_t = channel_samples.shape
    pilot = pilot or PilotBlock.orthogonal(n_t)
    if model is None:
        torch.manual_seed(seed)
        model = NoisePurifiedNet(NPNConfig(n_r=n_r, n_t=n_t))
    result = PretrainResult(model)
    if epochs <= 0:
        return result

    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    tau = torch.as_tensor(pilot.tau, dtype=torch.complex64)
    tau_inv = torch.linalg.inv(tau)
    h_all = torch.as_tensor(channel_samples, dtype=torch.complex64)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    std_gain = float(ls_noise_std(1.0, pilot.tau))

    def validate(epoch):
        if val_channels is None:
            return
        errs = [npn_mse(model, val_channels, s, pilot, seed=10_000 + i)[0]
                for i, s in enumerate(snr_list)]
        result.history.append((epoch, "val", float(np.mean(errs))))

    validate(0)
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n)
        snrs = _balanced_snrs(snr_list, n, rng)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            h = h_all[idx]
            sigma2 = torch.as_tensor(10.0 ** (-snrs[idx] / 10.0), dtype=torch.float32)
            h_ls = _ls_batch(h, tau, tau_inv, sigma2, gen)
            pred = model(csi_to_image(h_ls), torch.sqrt(sigma2) * std_gain)
            loss = F.mse_loss(pred, csi_to_image(h))
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        result.history.append((epoch, "train", total / n))
        validate(epoch)
    return result
