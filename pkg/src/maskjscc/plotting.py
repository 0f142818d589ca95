"""Figures drawn purely from the CSV tables written by the harness."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .experiments import MASK_BINS, read_csv  # noqa: E402

_SAVE = {"dpi": 100, "metadata": {"Software": None}}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, format="png", **_SAVE)
    plt.close(fig)
    return path


def _by_mode(rows, x_key, y_key):
    series = {}
    for r in rows:
        series.setdefault(str(r["mode"]), []).append((float(r[x_key]), float(r[y_key])))
    return {k: sorted(v) for k, v in sorted(series.items())}


def plot_sweep(csv_path, png_path, x_key: str = "snr_db", y_key: str = "psnr") -> Path:
    rows = read_csv(csv_path)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for mode, pts in _by_mode(rows, x_key, y_key).items():
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=mode)
    ax.set_xlabel({"snr_db": "SNR (dB)", "cbr": "CBR"}.get(x_key, x_key))
    ax.set_ylabel({"psnr": "PSNR (dB)", "ms_ssim": "MS-SSIM"}.get(y_key, y_key))
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    return _save(fig, png_path)


def plot_mask_report(csv_path, png_path) -> Path:
    """Stacked bin fractions (bars) with the mean m* per SNR (line)."""
    rows = sorted(read_csv(csv_path), key=lambda r: float(r["snr_db"]))
    snr = [float(r["snr_db"]) for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    bottom = [0.0] * len(rows)
    for i, (lo, hi) in enumerate(MASK_BINS):
        vals = [float(r[f"bin{i}"]) for r in rows]
        ax.bar(snr, vals, bottom=bottom, width=1.2, label=f"[{lo}, {hi})", alpha=0.6)
        bottom = [b + v for b, v in zip(bottom, vals)]
    ax.set_xlabel("SNR (dB)")
    ax.set_ylabel("fraction of images")
    ax2 = ax.twinx()
    ax2.plot(snr, [float(r["mean_m_star"]) for r in rows], color="k", marker="o", label="mean m*")
    ax2.set_ylabel("mean mask ratio")
    ax.legend(loc="upper left", fontsize=7)
    fig.tight_layout()
    return _save(fig, png_path)


def plot_history(csv_path, png_path) -> Path:
    rows = read_csv(csv_path)
    fig, ax = plt.subplots(1, 2, figsize=(8, 3.2))
    tr = [r for r in rows if r.get("l2") not in ("", None)]
    ax[0].plot([float(r["epoch"]) for r in tr], [float(r["l2"]) for r in tr], label="L2")
    ax[0].plot([float(r["epoch"]) for r in tr], [float(r["l1"]) for r in tr], label="L1")
    ax[0].set_xlabel("epoch")
    ax[0].set_yscale("log")
    ax[0].legend()
    va = [r for r in rows if r.get("psnr") not in ("", None)]
    ax[1].plot([float(r["epoch"]) for r in va], [float(r["psnr"]) for r in va], marker=".")
    ax[1].set_xlabel("epoch")
    ax[1].set_ylabel("validation PSNR (dB)")
    fig.tight_layout()
    return _save(fig, png_path)
