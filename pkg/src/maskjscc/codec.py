"""
Hierarchical window-attention image codec and the SNR-adaptive channel codec.

Encoder: patch embedding, then stages of patch merging + transformer blocks.
Blocks come in pairs; in the stage selected by ``ni_cfma_stage`` the second
block of each pair uses CSI-masked attention, elsewhere it is a shifted-window
block.  The decoder mirrors the encoder with patch expansion.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .attention import WindowAttention
from .errors import InputError, ShapeError


@dataclass
class EncoderConfig:
    image_size: int = 32
    patch_size: int = 2
    block_depths: tuple = (2, 2, 6, 2)
    embed_dims: tuple = (24, 48, 96, 192)
    heads: tuple = (2, 4, 6, 8)
    window_size: int = 4
    ni_cfma_stage: int = 2  # zero-based: the third stage
    mlp_ratio: float = 4.0
    latent_dim: int = 192  # C_H
    n_r: int = 2
    n_t: int = 2
    mask_mode: str = "literal"

    def __post_init__(self):
        self.block_depths = tuple(self.block_depths)
        self.embed_dims = tuple(self.embed_dims)
        self.heads = tuple(self.heads)
        if len(self.block_depths) != len(self.embed_dims) or len(self.heads) != len(self.embed_dims):
            raise ValueError("block_depths, embed_dims and heads must have equal length")
        if not (-1 <= self.ni_cfma_stage < len(self.embed_dims)):
            raise ValueError(f"ni_cfma_stage {self.ni_cfma_stage} out of range")
        if self.latent_dim % self.final_tokens:
            raise ValueError("latent_dim must be divisible by the number of final tokens")

    @property
    def resolutions(self) -> list[int]:
        r = self.image_size // self.patch_size
        return [r // 2 ** i for i in range(len(self.embed_dims))]

    @property
    def final_tokens(self) -> int:
        return self.resolutions[-1] ** 2

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


def window_partition(x: torch.Tensor, win: int) -> torch.Tensor:
    """[B, H, W, C] -> [B * nW, win*win, C]."""
    b, h, w, c = x.shape
    x = x.view(b, h // win, win, w // win, win, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, win * win, c)


def window_reverse(windows: torch.Tensor, win: int, h: int, w: int) -> torch.Tensor:
    c = windows.shape[-1]
    x = windows.view(-1, h // win, w // win, win, win, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, h, w, c)


def _shift_attn_mask(res: int, win: int, shift: int) -> torch.Tensor:
    img = torch.zeros(1, res, res, 1)
    cnt = 0
    for hs in (slice(0, -win), slice(-win, -shift), slice(-shift, None)):
        for ws in (slice(0, -win), slice(-win, -shift), slice(-shift, None)):
            img[:, hs, ws, :] = cnt
            cnt += 1
    mw = window_partition(img, win).squeeze(-1)
    diff = mw.unsqueeze(1) - mw.unsqueeze(2)
    return diff.masked_fill(diff != 0, -100.0).masked_fill(diff == 0, 0.0)


class Mlp(nn.Sequential):
    def __init__(self, dim, ratio):
        hidden = int(dim * ratio)
        super().__init__(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))


class TransformerBlock(nn.Module):
    def __init__(self, dim, res, heads, window, shift, masked, cfg: EncoderConfig):
        super().__init__()
        self.res = res
        self.window = min(window, res)
        self.shift = 0 if res <= window else shift
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, self.window, heads, masked=masked,
                                    n_r=cfg.n_r, n_t=cfg.n_t, mask_mode=cfg.mask_mode)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, cfg.mlp_ratio)
        if self.shift:
            self.register_buffer("shift_mask", _shift_attn_mask(res, self.window, self.shift),
                                 persistent=False)
        else:
            self.shift_mask = None

    def forward(self, x, csi=None, ratio=None):
        b, l, c = x.shape
        h = self.norm1(x).view(b, self.res, self.res, c)
        if self.shift:
            h = torch.roll(h, (-self.shift, -self.shift), dims=(1, 2))
        win = window_partition(h, self.window)
        nw = win.shape[0] // b
        csi_w = ratio_w = None
        if self.attn.masked and csi is not None and ratio is not None:
            csi_w = csi.repeat_interleave(nw, dim=0)
            ratio_w = ratio.repeat_interleave(nw, dim=0)
        win = self.attn(win, self.shift_mask, csi_w, ratio_w)
        h = window_reverse(win, self.window, self.res, self.res)
        if self.shift:
            h = torch.roll(h, (self.shift, self.shift), dims=(1, 2))
        x = x + h.reshape(b, l, c)
        return x + self.mlp(self.norm2(x))


class PatchEmbed(nn.Module):
    def __init__(self, patch: int, dim: int):
        super().__init__()
        self.patch = patch
        self.proj = nn.Conv2d(3, dim, patch, stride=patch)
        self.norm = nn.LayerNorm(dim)

    def forward(self, s: torch.Tensor) -> torch.Tensor:
        """s: [B, 3, H, W] -> [B, (H/p)(W/p), dim]."""
        if s.shape[-1] % self.patch or s.shape[-2] % self.patch:
            raise ShapeError(f"image {tuple(s.shape[-2:])} not divisible by patch {self.patch}")
        return self.norm(self.proj(s).flatten(2).transpose(1, 2))


def patch_embed(s, module: PatchEmbed) -> torch.Tensor:
    """Embed a single [H, W, 3] image (numpy or torch) to [l1, c] patch embeddings."""
    t = torch.as_tensor(np.asarray(s), dtype=torch.float32)
    if t.dim() != 3 or t.shape[-1] != 3:
        raise ShapeError("expected an [H, W, 3] image")
    return module(t.permute(2, 0, 1)[None])[0]


class PatchMerging(nn.Module):
    def __init__(self, res, dim_in, dim_out):
        super().__init__()
        self.res = res
        self.norm = nn.LayerNorm(4 * dim_in)
        self.reduce = nn.Linear(4 * dim_in, dim_out, bias=False)

    def forward(self, x):
        b, _, c = x.shape
        x = x.view(b, self.res, self.res, c)
        x = torch.cat([x[:, 0::2, 0::2], x[:, 1::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 1::2]], -1)
        return self.reduce(self.norm(x.view(b, -1, 4 * c)))


class PatchExpand(nn.Module):
    """Doubles resolution: [B, r*r, dim_in] -> [B, 4*r*r, dim_out]."""

    def __init__(self, res, dim_in, dim_out):
        super().__init__()
        self.res = res
        self.dim_out = dim_out
        self.expand = nn.Linear(dim_in, 4 * dim_out)
        self.norm = nn.LayerNorm(dim_out)

    def forward(self, x):
        b = x.shape[0]
        r, c = self.res, self.dim_out
        x = self.expand(x).view(b, r, r, 2, 2, c).permute(0, 1, 3, 2, 4, 5).reshape(b, 4 * r * r, c)
        return self.norm(x)


def _stage_blocks(cfg, dim, res, heads, depth, masked_stage):
    return nn.ModuleList(
        TransformerBlock(dim, res, heads, cfg.window_size,
                         shift=0 if i % 2 == 0 else cfg.window_size // 2,
                         masked=masked_stage and i % 2 == 1, cfg=cfg)
        for i in range(depth)
    )


class SemanticEncoder(nn.Module):
    """Image [B, 3, H, W] (+ CSI image, mask ratio) -> semantics [B, C_H]."""

    def __init__(self, cfg: EncoderConfig, use_masking: bool = True):
        super().__init__()
        self.cfg = cfg
        self.use_masking = use_masking
        res = cfg.resolutions
        dims = cfg.embed_dims
        self.patch_embed = PatchEmbed(cfg.patch_size, dims[0])
        self.merges = nn.ModuleList(
            [nn.Identity()] + [PatchMerging(res[i - 1], dims[i - 1], dims[i]) for i in range(1, len(dims))]
        )
        self.stages = nn.ModuleList(
            _stage_blocks(cfg, dims[i], res[i], cfg.heads[i], cfg.block_depths[i],
                          use_masking and i == cfg.ni_cfma_stage)
            for i in range(len(dims))
        )
        self.norm = nn.LayerNorm(dims[-1])
        self.head = nn.Linear(dims[-1], cfg.latent_dim // cfg.final_tokens)

    def masked_blocks(self):
        return [blk for stage in self.stages for blk in stage if blk.attn.masked]

    def attention_site_blocks(self):
        """Blocks that hold (or, without masking, would hold) the CSI-masked attention."""
        return [blk for i, blk in enumerate(self.stages[self.cfg.ni_cfma_stage]) if i % 2 == 1]

    def forward(self, s, csi=None, ratio=None):
        """csi: [B, 2, n_r, n_t] real/imag of h_e; ratio: [B] mask ratios."""
        if not torch.all(torch.isfinite(s)):
            raise InputError("image contains NaN or Inf")
        if ratio is not None and not torch.is_tensor(ratio):
            ratio = torch.full((s.shape[0],), float(ratio))
        x = self.patch_embed(s)
        for merge, blocks in zip(self.merges, self.stages):
            x = merge(x)
            for blk in blocks:
                x = blk(x, csi, ratio)
        return self.head(self.norm(x)).reshape(s.shape[0], -1)


class SemanticDecoder(nn.Module):
    """Semantics [B, C_H] -> image [B, 3, H, W] in [0, 1]."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        res = cfg.resolutions[::-1]
        dims = cfg.embed_dims[::-1]
        depths = cfg.block_depths[::-1]
        heads = cfg.heads[::-1]
        self.inp = nn.Linear(cfg.latent_dim // cfg.final_tokens, dims[0])
        self.stages = nn.ModuleList(
            _stage_blocks(cfg, dims[i], res[i], heads[i], depths[i], False) for i in range(len(dims))
        )
        self.expands = nn.ModuleList(
            [PatchExpand(res[i], dims[i], dims[i + 1]) for i in range(len(dims) - 1)]
        )
        p = cfg.patch_size
        self.norm = nn.LayerNorm(dims[-1])
        self.to_pixels = nn.Linear(dims[-1], p * p * 3)

    def forward(self, x):
        cfg = self.cfg
        b = x.shape[0]
        if x.shape[-1] != cfg.latent_dim:
            raise ShapeError(f"expected semantics of length {cfg.latent_dim}, got {x.shape[-1]}")
        h = self.inp(x.view(b, cfg.final_tokens, -1))
        for i, blocks in enumerate(self.stages):
            for blk in blocks:
                h = blk(h)
            if i < len(self.expands):
                h = self.expands[i](h)
        r = cfg.resolutions[0]
        p = cfg.patch_size
        pix = self.to_pixels(self.norm(h)).view(b, r, r, p, p, 3)
        img = pix.permute(0, 5, 1, 3, 2, 4).reshape(b, 3, r * p, r * p)
        return torch.sigmoid(img)


class SNRModulation(nn.Module):
    """Channel-wise gating of a feature vector by an MLP of the SNR."""

    def __init__(self, dim, hidden=32):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(1, hidden), nn.ReLU(), nn.Linear(hidden, dim))

    def forward(self, x, snr_db):
        return x * torch.sigmoid(self.net(snr_db.reshape(-1, 1).to(x.dtype) / 20.0))


class ChannelModNet(nn.Module):
    """Stacked FC modulation blocks conditioned on the SNR; maps in_dim -> out_dim."""

    def __init__(self, in_dim, out_dim, hidden=256, blocks=2):
        super().__init__()
        self.fcs = nn.ModuleList()
        self.mods = nn.ModuleList()
        d = in_dim
        for _ in range(blocks):
            self.fcs.append(nn.Linear(d, hidden))
            self.mods.append(SNRModulation(hidden))
            d = hidden
        self.out = nn.Linear(d, out_dim)

    def forward(self, x, snr_db):
        if not torch.all(torch.isfinite(x)):
            raise InputError("channel codec input contains NaN or Inf")
        if not torch.is_tensor(snr_db):
            snr_db = torch.full((x.shape[0],), float(snr_db))
        for fc, mod in zip(self.fcs, self.mods):
            x = mod(nn.functional.gelu(fc(x)), snr_db)
        return self.out(x)
