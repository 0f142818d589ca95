"""
Two-step training: NPN pretraining on pilot passes, then joint end-to-end
optimization of codec, mask-ratio CVAE and NPN with L2 = L1 + lambda * Lc.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .channel import generate_channels
from .config import ExperimentConfig
from .estimator import PilotBlock, pretrain_npn
from .errors import ParameterError, StateError
from .losses import LossBreakdown, loss_cvae, loss_l1, loss_total, ms_ssim
from .metrics import psnr_batch
from .system import LinkModel

log = logging.getLogger(__name__)


@dataclass
class TrainSchedule:
    stage: str = "joint"
    lr_start: float = 1e-4
    lr_end: float = 2e-5
    batch: int = 16
    epochs: int = 30
    steps: int = 4

    def lr_at(self, epoch: int) -> float:
        """Piecewise-constant geometric decay from lr_start to lr_end over ``steps`` levels."""
        if self.epochs <= 1 or self.steps <= 1:
            return self.lr_start
        level = min(self.steps - 1, (epoch * self.steps) // self.epochs)
        ratio = (self.lr_end / self.lr_start) ** (level / (self.steps - 1))
        return self.lr_start * ratio


@dataclass
class ChannelPools:
    train: np.ndarray
    test: np.ndarray

    @classmethod
    def from_config(cls, cfg: ExperimentConfig) -> "ChannelPools":
        h = generate_channels(cfg.n_r, cfg.n_t, cfg.correlation_rho,
                              cfg.channel_pool_train + cfg.channel_pool_test, cfg.channel_seed)
        return cls(h[:cfg.channel_pool_train], h[cfg.channel_pool_train:])


@dataclass
class TrainResult:
    model: LinkModel
    history: list = field(default_factory=list)  # dict rows
    npn_history: list = field(default_factory=list)
    snr_counts: list = field(default_factory=list)  # per epoch {snr: count}


def balanced_snrs(snr_list, n: int, rng: np.random.Generator) -> np.ndarray:
    """n SNR values whose histogram over ``snr_list`` is as flat as possible, shuffled."""
    levels = np.asarray(snr_list, dtype=float)
    reps, rem = divmod(n, len(levels))
    extra = levels[rng.choice(len(levels), rem, replace=False)]
    return rng.permutation(np.concatenate([np.tile(levels, reps), extra]))


def _to_tensor_images(images: np.ndarray) -> torch.Tensor:
    return torch.as_tensor(np.asarray(images), dtype=torch.float32).permute(0, 3, 1, 2).contiguous()


def pretrain_stage(cfg: ExperimentConfig, pools: ChannelPools, model: LinkModel) -> list:
    res = pretrain_npn(pools.train, PilotBlock.orthogonal(cfg.n_t, cfg.pilot_p), cfg.npn_snr_list,
                       epochs=cfg.npn_epochs, batch_size=cfg.npn_batch, lr=cfg.npn_lr,
                       seed=cfg.seed, val_channels=pools.test, model=model.npn)
    model.npn_pretrained = True
    return res.history


@torch.no_grad()
def evaluate(model: LinkModel, images: np.ndarray, channels: np.ndarray, snr_db: float,
             seed: int = 0, batch: int = 50, m=None, record: bool = False) -> dict:
    """Per-image PSNR / MS-SSIM / mask ratio with image i sent over channels[i % len]."""
    model.eval()
    s_all = _to_tensor_images(images)
    noise_gen = torch.Generator().manual_seed(seed)
    psnrs, msssims, ratios, recons = [], [], [], []
    for start in range(0, len(s_all), batch):
        s = s_all[start:start + batch]
        idx = np.arange(start, start + len(s)) % len(channels)
        h = torch.as_tensor(channels[idx], dtype=torch.complex64)
        out = model(s, h, torch.full((len(s),), float(snr_db)), noise_gen, None, m=m,
                    sample_latent=False)
        psnrs.append(psnr_batch(s, out["s_hat"]))
        msssims.append(ms_ssim(out["s_hat"], s).numpy())
        r = out["m"]
        ratios.append(np.zeros(len(s)) if r is None else r.numpy().astype(float))
        if record:
            recons.append(out["s_hat"].permute(0, 2, 3, 1).numpy())
    model.train()
    res = {"psnr": np.concatenate(psnrs), "ms_ssim": np.concatenate(msssims),
           "m_star": np.concatenate(ratios)}
    if record:
        res["recon"] = np.concatenate(recons)
    return res


def _finite_mean(x):
    x = np.asarray(x, dtype=float)
    x = x[np.isfinite(x)]
    return float(x.mean()) if x.size else float("nan")


def train(cfg: ExperimentConfig, train_images: np.ndarray, pools: ChannelPools | None = None,
          val_images: np.ndarray | None = None, stage: str = "all", model: LinkModel | None = None,
          npn_state: dict | None = None) -> TrainResult:
    """Run the training strategy.

    stage: ``"pretrain_npn"`` (step 1 only), ``"joint"`` (step 2, needs a
    pretrained NPN via ``npn_state`` or ``model``) or ``"all"``.
    """
    if stage not in ("pretrain_npn", "joint", "all"):
        raise ParameterError(f"unknown stage {stage!r}")
    if cfg.lam < 0:
        raise ParameterError("lambda must be non-negative")
    pools = pools or ChannelPools.from_config(cfg)
    model = model or LinkModel(cfg)
    if npn_state is not None:
        model.npn.load_state_dict(npn_state)
        model.npn_pretrained = True
    result = TrainResult(model)

    if stage in ("pretrain_npn", "all"):
        result.npn_history = pretrain_stage(cfg, pools, model)
        if stage == "pretrain_npn":
            return result
    if not getattr(model, "npn_pretrained", False):
        raise StateError("joint stage needs a pretrained NPN checkpoint")

    if cfg.freeze_npn:
        for p in model.npn.parameters():
            p.requires_grad_(False)
    sched = TrainSchedule("joint", cfg.lr_start, cfg.lr_end, cfg.batch_size, cfg.epochs, cfg.lr_steps)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=sched.lr_start)
    # the CVAE loss lives on the codeword scale, far above the image loss;
    # clipping it separately keeps it from throttling the transmission chain
    cvae_ids = {id(p) for p in model.cvae.parameters()} if model.cvae is not None else set()
    clip_groups = [[p for p in params if id(p) not in cvae_ids],
                   [p for p in params if id(p) in cvae_ids]]
    rng = np.random.default_rng(cfg.seed)
    noise_gen = torch.Generator().manual_seed(cfg.seed)
    latent_gen = torch.Generator().manual_seed(cfg.seed + 17)
    s_all = _to_tensor_images(train_images)
    n = len(s_all)

    def log_row(epoch, agg):
        row = {"epoch": epoch, "stage": "joint", **agg}
        if val_images is not None:
            ev = evaluate(model, val_images, pools.test, cfg.val_snr_db, seed=cfg.seed + 99)
            row.update(psnr=_finite_mean(ev["psnr"]), ms_ssim=float(np.mean(ev["ms_ssim"])),
                       mean_m_star=float(np.mean(ev["m_star"])))
        result.history.append(row)
        log.info("epoch %d %s", epoch, {k: (round(v, 5) if isinstance(v, float) else v)
                                        for k, v in row.items()})

    log_row(0, {})
    for epoch in range(1, sched.epochs + 1):
        for g in opt.param_groups:
            g["lr"] = sched.lr_at(epoch - 1)
        if cfg.mode == "lcfsc":
            model.refresh_proxy()
        order = rng.permutation(n)
        snrs = balanced_snrs(cfg.snr_list_db, n, rng)
        chan_idx = rng.integers(0, len(pools.train), size=n)
        vals, steps = {"l1": 0.0, "l_rec": 0.0, "l_reg": 0.0, "l_c": 0.0, "l2": 0.0}, 0
        ratio_sum, ratio_n = 0.0, 0
        for start in range(0, n, sched.batch):
            idx = order[start:start + sched.batch]
            s = s_all[idx]
            h = torch.as_tensor(pools.train[chan_idx[idx]], dtype=torch.complex64)
            snr = torch.as_tensor(snrs[idx], dtype=torch.float32)
            out = model(s, h, snr, noise_gen, latent_gen)
            l1 = loss_l1(s, out["s_hat"], cfg.loss_metric)
            if "y_bar" in out:
                lat = out["latent"]
                l_rec, l_reg, l_c = loss_cvae(out["y_bar"], out["y_tilde"],
                                              (lat.mu_post, lat.logsig_post),
                                              (lat.mu_prior, lat.logsig_prior), cfg.kl_variant)
            else:
                l_rec = l_reg = l_c = torch.zeros(())
            l2 = loss_total(l1, l_c, cfg.lam)
            opt.zero_grad()
            l2.backward()
            if cfg.grad_clip > 0:
                for group in clip_groups:
                    if group:
                        torch.nn.utils.clip_grad_norm_(group, cfg.grad_clip)
            opt.step()
            bd = LossBreakdown(l1.item(), l_rec.item(), l_reg.item(), l_c.item(), l2.item(), cfg.lam)
            for k in vals:
                vals[k] += getattr(bd, k)
            steps += 1
            if out["m"] is not None:
                ratio_sum += float(out["m"].detach().sum())
                ratio_n += len(idx)
        agg = {k: v / steps for k, v in vals.items()}
        agg["lam"] = cfg.lam
        agg["lr"] = sched.lr_at(epoch - 1)
        agg["train_m_star"] = ratio_sum / ratio_n if ratio_n else 0.0
        result.snr_counts.append({float(k): int(v) for k, v in zip(*np.unique(snrs, return_counts=True))})
        log_row(epoch, agg)
    model.trained = True
    return result
