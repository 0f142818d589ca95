"""Evaluation sweeps, mask-ratio statistics and attention inspection on trained links."""
from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from scipy.stats import spearmanr

from .attention import masked_count
from .channel import cbr as cbr_of
from .errors import ParameterError, StateError
from .system import LinkModel, set_recording
from .training import evaluate

MASK_BINS = ((0.0, 0.005), (0.005, 0.009), (0.009, 0.015))
REPORT_FIELDS = ("mode", "snr_db", "cbr", "psnr", "ms_ssim", "mean_m_star", "n_images", "n_inf")


def _require_trained(model: LinkModel, name: str = "model") -> None:
    if not getattr(model, "trained", False):
        raise StateError(f"{name} has not been trained")


def summarize(mode: str, snr_db: float, cbr_value: float, ev: dict) -> dict:
    """Aggregate row; infinite PSNRs are left out of the mean and counted in ``n_inf``."""
    p = np.asarray(ev["psnr"], dtype=float)
    finite = p[np.isfinite(p)]
    return {
        "mode": mode, "snr_db": float(snr_db), "cbr": float(cbr_value),
        "psnr": float(finite.mean()) if finite.size else float("inf"),
        "ms_ssim": float(np.mean(ev["ms_ssim"])),
        "mean_m_star": float(np.mean(ev["m_star"])),
        "n_images": int(p.size), "n_inf": int(p.size - finite.size),
    }


def link_cbr(model: LinkModel) -> float:
    c = model.cfg
    return cbr_of(c.c_l, c.image_size, c.image_size)


def sweep_snr(models: dict, images, channels, snr_list, seed: int = 0) -> list[dict]:
    """Rows for every (mode, SNR); ``models`` maps mode name -> trained LinkModel."""
    rows = []
    for mode, model in models.items():
        _require_trained(model, mode)
        for snr in snr_list:
            ev = evaluate(model, images, channels, snr, seed=seed)
            rows.append(summarize(mode, snr, link_cbr(model), ev))
    return rows


def sweep_cbr(models: dict, images, channels, snr_db: float = 8.0, seed: int = 0) -> list[dict]:
    """``models`` maps (mode, cbr) -> trained LinkModel (one checkpoint per CBR)."""
    rows = []
    for (mode, _), model in sorted(models.items(), key=lambda kv: (kv[0][0], kv[0][1])):
        _require_trained(model, mode)
        ev = evaluate(model, images, channels, snr_db, seed=seed)
        rows.append(summarize(mode, snr_db, link_cbr(model), ev))
    return rows


def bin_fractions(m_star) -> list[float]:
    m = np.asarray(m_star, dtype=float)
    if m.size == 0:
        return [0.0] * len(MASK_BINS)
    counts = []
    for i, (lo, hi) in enumerate(MASK_BINS):
        upper = m <= hi if i == len(MASK_BINS) - 1 else m < hi
        counts.append(int(np.sum((m >= lo) & upper)))
    return [c / m.size for c in counts]


def mask_ratio_report(model: LinkModel, images, channels, snr_list, seed: int = 0):
    """Per-SNR mean m* and bin fractions, per-image m*, and Spearman(mean m*, SNR).

    Returns ``(summary_rows, per_image_rows, spearman_rho)``.
    """
    if model.cfg.mode != "lcfsc":
        raise ParameterError("mask-ratio report needs an lcfsc model")
    _require_trained(model)
    summary, per_image = [], []
    for snr in snr_list:
        ev = evaluate(model, images, channels, snr, seed=seed)
        m = ev["m_star"]
        fr = bin_fractions(m)
        summary.append({"snr_db": float(snr), "mean_m_star": float(m.mean()),
                        "min_m_star": float(m.min()), "max_m_star": float(m.max()),
                        **{f"bin{i}": f for i, f in enumerate(fr)}})
        per_image += [{"image_id": i, "snr_db": float(snr), "m_star": float(v)} for i, v in enumerate(m)]
    means = [r["mean_m_star"] for r in summary]
    rho = float(spearmanr(list(snr_list), means).statistic) if len(snr_list) > 1 else float("nan")
    return summary, per_image, rho


def row_entropy(attn: torch.Tensor) -> torch.Tensor:
    """Shannon entropy (nats) of each softmax row; attn [..., D, D] -> [..., D]."""
    p = attn.double().clamp_min(1e-30)
    return -(attn.double() * p.log()).sum(-1)


@torch.no_grad()
def attention_capture(model: LinkModel, images, channels, snr_db: float, seed: int = 0, m=None):
    """Attention weights and masks at the CSI-masked sites for every image.

    Returns a list (one per site block) of dicts with ``attn`` [N, heads, D, D]
    and ``mask`` [N, D, D] (None without masking) plus the eval dict.
    """
    blocks = model.encoder.attention_site_blocks()
    set_recording(model, False)
    for blk in blocks:
        blk.attn.record = True
    captured = [{"attn": [], "mask": []} for _ in blocks]
    ev_all = {"psnr": [], "ms_ssim": [], "m_star": [], "recon": []}
    batch = 25
    for start in range(0, len(images), batch):
        chunk = images[start:start + batch]
        idx = (np.arange(start, start + len(chunk)) % len(channels))
        ev = evaluate(model, chunk, channels[idx], snr_db, seed=seed + start, m=m, record=True)
        for k in ev_all:
            ev_all[k].append(ev[k])
        for cap, blk in zip(captured, blocks):
            cap["attn"].append(blk.attn.last["attn"])
            cap["mask"].append(blk.attn.last["mask"])
    set_recording(model, False)
    out = []
    for cap in captured:
        masks = cap["mask"]
        out.append({"attn": torch.cat(cap["attn"]),
                    "mask": None if masks[0] is None else torch.cat(masks)})
    return out, {k: np.concatenate(v) for k, v in ev_all.items()}


def entropy_statistic(model: LinkModel, images, channels, snr_db: float, seed: int = 0, m=None) -> dict:
    """Mean attention-row entropy over all windows of the masked sites."""
    caps, ev = attention_capture(model, images, channels, snr_db, seed, m)
    ent = torch.cat([row_entropy(c["attn"]).flatten() for c in caps])
    windows = sum(c["attn"].shape[0] for c in caps)
    return {"mean_entropy": float(ent.mean()), "n_windows": int(windows), "n_rows": int(ent.numel()),
            "mean_m_star": float(np.mean(ev["m_star"]))}


def _to_png(arr: np.ndarray, path: Path, scale: int = 8) -> None:
    a = np.asarray(arr, dtype=np.float64)
    lo, hi = float(a.min()), float(a.max())
    if a.ndim == 2:
        a = (a - lo) / (hi - lo) if hi > lo else np.ones_like(a) * (1.0 if lo > 0 else 0.0)
    a = np.clip(a, 0, 1)
    img = Image.fromarray((a * 255).round().astype(np.uint8))
    img = img.resize((img.width * scale, img.height * scale), Image.NEAREST)
    img.save(path)


def attention_visualize(model: LinkModel, image: np.ndarray, h: np.ndarray, snr_db: float, out_dir,
                        seed: int = 0, m=None) -> dict:
    """Write residual, per-window mask maps and attention heatmaps for one image.

    ``image`` [H, W, 3]; ``h`` [n_r, n_t].  Also writes ``entropy.csv`` with the
    mean row entropy per site.  Returns a dict of written paths and stats.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    caps, ev = attention_capture(model, image[None], np.asarray(h)[None], snr_db, seed, m)
    recon = ev["recon"][0]
    paths = {"residual": out_dir / "residual.png", "input": out_dir / "input.png",
             "recon": out_dir / "recon.png"}
    _to_png(image, paths["input"])
    _to_png(recon, paths["recon"])
    _to_png(np.abs(image - recon).mean(-1), paths["residual"])
    rows, counts = [], []
    d = caps[0]["attn"].shape[-1]
    m_star = float(ev["m_star"][0])
    for si, cap in enumerate(caps):
        attn = cap["attn"]
        mask = cap["mask"] if cap["mask"] is not None else torch.ones(attn.shape[0], d, d)
        for w in range(attn.shape[0]):
            mp = out_dir / f"mask_site{si}_win{w}.png"
            ap = out_dir / f"attn_site{si}_win{w}.png"
            _to_png(mask[w].numpy(), mp, scale=16)
            _to_png(attn[w].mean(0).numpy(), ap, scale=16)
            zeros = int((mask[w] == 0).sum())
            counts.append(zeros)
            rows.append({"site": si, "window": w, "masked_entries": zeros,
                         "expected_masked": masked_count(m_star, d) if cap["mask"] is not None else 0,
                         "mean_row_entropy": float(row_entropy(attn[w]).mean())})
    write_csv(out_dir / "entropy.csv", rows)
    return {"paths": paths, "rows": rows, "m_star": m_star, "psnr": float(ev["psnr"][0])}


def write_csv(path, rows: list[dict], fields=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = list(fields or (rows[0].keys() if rows else []))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k, "")) for k in fields})
    return path


def _fmt(v):
    if isinstance(v, float):
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    return v


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k, v in r.items():
            try:
                r[k] = float(v)
            except ValueError:
                pass
    return rows
