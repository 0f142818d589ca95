"""
Windowed attention with CSI-driven binary masking of the Q/K logits.

The plain path is ``softmax(QK^T / sqrt(d)) V``.  The masked path scores
every one of the D*D attention-weight elements from per-patch semantic
importance (GRN) and the estimated CSI, ranks them, zeroes the logits of the
floor(m * D^2) lowest ranked elements and rescales with a learnable
temperature rho.  V is never touched.
"""
from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InputError, ParameterError, ShapeError

# logit used for masked entries in "neg_inf" mode
_NEG_LOGIT = -1e4


def attention_weights(q, k, rho, mask=None, bias=None, mask_mode: str = "literal"):
    """Row-stochastic attention weights for [..., D, C] queries/keys."""
    qk = q @ k.transpose(-2, -1)
    if mask is None:
        logits = qk / rho
    elif mask_mode == "literal":
        logits = (mask * qk) / rho
    elif mask_mode == "neg_inf":
        logits = (mask * qk) / rho + (1.0 - mask) * _NEG_LOGIT
    else:
        raise ParameterError(f"unknown mask_mode {mask_mode!r}")
    if bias is not None:
        logits = logits + bias
    return torch.softmax(logits, dim=-1)


def mha(q, k, v, d, bias=None):
    """softmax(Q K^T / sqrt(d)) V."""
    if d <= 0:
        raise ParameterError("d must be positive")
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError("inconsistent q/k/v shapes")
    return attention_weights(q, k, math.sqrt(d), bias=bias) @ v


def ni_cfma(q, k, v, mask, rho, bias=None, mask_mode: str = "literal"):
    """softmax((M * Q K^T) / rho) V with masked logits set to zero (literal mode)."""
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError("inconsistent q/k/v shapes")
    return attention_weights(q, k, rho, mask=mask, bias=bias, mask_mode=mask_mode) @ v


def masked_count(m: float, d: int) -> int:
    """Number of masked elements floor(m * D^2); the 1e-9 guard absorbs binary rounding."""
    return int(math.floor(float(m) * d * d + 1e-9))


def scores_to_ranks(scores: torch.Tensor) -> torch.Tensor:
    """Ascending stable sort of the D*D scores; the lowest score gets rank 1.

    Ties resolve by ascending flat index.  Returns int64 ranks with the input shape.
    """
    shape = scores.shape
    flat = scores.reshape(*shape[:-2], -1)
    order = torch.argsort(flat, dim=-1, stable=True)
    ranks = torch.empty_like(order)
    ranks.scatter_(-1, order, torch.arange(1, flat.shape[-1] + 1).expand_as(order).contiguous())
    return ranks.reshape(shape)


def build_mask(ranks, m):
    """Binary mask: 0 where rank <= floor(m*D^2), 1 elsewhere.

    ``ranks`` is [..., D, D]; ``m`` a scalar or one ratio per leading batch
    entry.  Works on numpy arrays and torch tensors alike.
    """
    is_np = isinstance(ranks, np.ndarray)
    r = torch.as_tensor(ranks)
    d = r.shape[-1]
    m_arr = np.atleast_1d(np.asarray(m.detach().cpu() if torch.is_tensor(m) else m, dtype=np.float64))
    if np.any(m_arr < 0) or np.any(m_arr > 1) or not np.all(np.isfinite(m_arr)):
        raise ParameterError("mask ratio must lie in [0, 1]")
    counts = torch.as_tensor(np.floor(m_arr * d * d + 1e-9).astype(np.int64), dtype=r.dtype)
    if counts.numel() == 1:
        thr = counts.reshape(())
    else:
        thr = counts.reshape(-1, *([1] * (r.dim() - 1)))
    mask = (r > thr).to(torch.float32)
    return mask.numpy() if is_np else mask


class GatedResidualNetwork(nn.Module):
    """Per-patch importance: gated direct path plus a linear skip projection."""

    def __init__(self, dim: int, hidden: int = 16):
        super().__init__()
        self.fc_in = nn.Linear(dim, hidden)
        self.fc_hidden = nn.Linear(hidden, hidden)
        self.gate = nn.Linear(hidden, 1)
        self.value = nn.Linear(hidden, 1)
        self.skip = nn.Linear(dim, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """x: [..., D, C] -> importance [..., D]."""
        if not torch.all(torch.isfinite(x)):
            raise InputError("GRN input contains NaN or Inf")
        eta = self.fc_hidden(F.elu(self.fc_in(x)))
        glu = torch.sigmoid(self.gate(eta)) * self.value(eta)
        return (self.skip(x) + glu).squeeze(-1)


def semantic_importance(features: torch.Tensor, grn: GatedResidualNetwork) -> torch.Tensor:
    return grn(features)


class MaskStrategyNet(nn.Module):
    """Scores the D x D attention-weight elements from importance and CSI.

    The importance link turns the [D] vector into a pairwise [2, D, D] map
    (row and column importance) and convolves it; the CSI link convolves the
    [2, n_r, n_t] channel image and pools it to a vector that is broadcast
    over the map.  Concatenation and 1x1 nonlinear layers give one logit per
    element, normalized by a softmax over all D^2 elements.
    """

    def __init__(self, n_r: int, n_t: int, hidden: int = 8):
        super().__init__()
        self.imp_link = nn.Sequential(
            nn.Conv2d(2, hidden, 3, padding=1), nn.GELU(),
            nn.Conv2d(hidden, hidden, 3, padding=1),
        )
        self.csi_link = nn.Sequential(
            nn.Conv2d(2, hidden, 3, padding=1), nn.GELU(),
            nn.Conv2d(hidden, hidden, 3, padding=1),
        )
        self.csi_fc = nn.Linear(hidden * n_r * n_t, hidden)
        self.fuse = nn.Sequential(
            nn.Conv2d(2 * hidden, hidden, 1), nn.GELU(),
            nn.Conv2d(hidden, 1, 1),
        )

    def forward(self, importance: torch.Tensor, csi: torch.Tensor) -> torch.Tensor:
        """importance [N, D], csi [N, 2, n_r, n_t] -> probabilities [N, D, D]."""
        if importance.shape[0] != csi.shape[0] or csi.dim() != 4 or csi.shape[1] != 2:
            raise ShapeError("importance / CSI batch mismatch")
        n, d = importance.shape
        pair = torch.stack([importance[:, :, None].expand(n, d, d),
                            importance[:, None, :].expand(n, d, d)], dim=1)
        f_imp = self.imp_link(pair)
        f_csi = self.csi_fc(self.csi_link(csi).reshape(n, -1))
        f_csi = f_csi[:, :, None, None].expand(-1, -1, d, d)
        logits = self.fuse(torch.cat([f_imp, f_csi], dim=1)).reshape(n, d * d)
        return torch.softmax(logits, dim=-1).reshape(n, d, d)


def mask_strategy(importance: torch.Tensor, csi: torch.Tensor, net: MaskStrategyNet) -> torch.Tensor:
    """Integer rank map [N, D, D], a permutation of 1..D^2 per sample."""
    with torch.no_grad():
        return scores_to_ranks(net(importance, csi))


def straight_through_mask(probs: torch.Tensor, m: torch.Tensor, temperature: float = 1.0):
    """Hard mask in the forward pass, gradients via the continuous scores.

    probs: [N, D, D] softmax scores; m: [N] mask ratios (may carry grad).
    The forward value is exactly the hard mask.  Backward treats the mask as
    the identity of ``probs`` plus a sigmoid relaxation of the rank threshold
    in ``m``.
    """
    d = probs.shape[-1]
    ranks = scores_to_ranks(probs.detach())
    hard = build_mask(ranks, m.detach())
    thr = (m.to(probs.dtype) * d * d).reshape(-1, 1, 1)
    soft = torch.sigmoid((ranks.to(probs.dtype) - thr - 0.5) / temperature)
    return hard + (probs - probs.detach()) + (soft - soft.detach())


def relative_position_index(win: int) -> torch.Tensor:
    coords = torch.stack(torch.meshgrid(torch.arange(win), torch.arange(win), indexing="ij")).flatten(1)
    rel = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0) + (win - 1)
    return rel[..., 0] * (2 * win - 1) + rel[..., 1]


class WindowAttention(nn.Module):
    """Multi-head window attention; ``masked=True`` turns it into the CSI-masked variant."""

    def __init__(self, dim: int, window: int, heads: int, masked: bool = False,
                 n_r: int = 2, n_t: int = 2, mask_mode: str = "literal"):
        super().__init__()
        self.dim, self.window, self.heads = dim, window, heads
        self.head_dim = dim // heads
        self.masked = masked
        self.mask_mode = mask_mode
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.bias_table = nn.Parameter(torch.zeros((2 * window - 1) ** 2, heads))
        nn.init.trunc_normal_(self.bias_table, std=0.02)
        self.register_buffer("rel_index", relative_position_index(window), persistent=False)
        self.register_buffer("sqrt_d", torch.tensor(math.sqrt(self.head_dim)), persistent=False)
        if masked:
            # forked RNG: the shared attention weights initialize identically
            # whether or not the masking branch exists
            with torch.random.fork_rng():
                self.grn = GatedResidualNetwork(dim)
                self.scorer = MaskStrategyNet(n_r, n_t)
            # rho = sqrt(d) * exp(log_gain); exactly sqrt(d) at init
            self.log_gain = nn.Parameter(torch.zeros(()))
        self.record = False
        self.last = {}

    @property
    def rho(self) -> torch.Tensor:
        if not self.masked:
            return self.sqrt_d
        return self.sqrt_d * torch.exp(self.log_gain)

    def forward(self, x, shift_mask=None, csi=None, ratio=None):
        """x: [N, D, C] windows; csi: [N, 2, n_r, n_t]; ratio: [N] mask ratios."""
        n, d, c = x.shape
        qkv = self.qkv(x).reshape(n, d, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        bias = self.bias_table[self.rel_index.reshape(-1)].reshape(d, d, -1).permute(2, 0, 1)
        bias = bias.unsqueeze(0)
        if shift_mask is not None:
            nw = shift_mask.shape[0]
            bias = bias + shift_mask.repeat(n // nw, 1, 1).unsqueeze(1)

        mask = None
        rho = self.sqrt_d
        if self.masked and csi is not None and ratio is not None:
            probs = self.scorer(self.grn(x), csi)
            mask = straight_through_mask(probs, ratio).unsqueeze(1)  # shared across heads
            rho = self.rho
        attn = attention_weights(q, k, rho, mask=mask, bias=bias, mask_mode=self.mask_mode)
        if self.record:
            self.last = {"attn": attn.detach(), "mask": None if mask is None else mask.detach()[:, 0]}
        out = (attn @ v).transpose(1, 2).reshape(n, d, c)
        return self.proj(out)
