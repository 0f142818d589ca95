"""Command-line entry point: ``maskjscc <subcommand> [--config FILE] [--out DIR] ...``."""
from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .checkpoint import file_hash, load_checkpoint, load_npn, save_checkpoint, save_npn
from .config import ExperimentConfig, MODES, dump_config, load_config
from .data import load_dataset, load_image_folder
from .estimator import PilotBlock, npn_mse
from .experiments import (REPORT_FIELDS, attention_visualize, entropy_statistic, mask_ratio_report,
                          summarize, sweep_cbr, sweep_snr, write_csv, link_cbr)
from .plotting import plot_history, plot_mask_report, plot_sweep
from .system import LinkModel
from .training import ChannelPools, evaluate, train

log = logging.getLogger("maskjscc")


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="maskjscc", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--snr", help="SNR in dB (comma list for sweeps)")
        sp.add_argument("--cbr", type=float, help="channel bandwidth ratio")
        sp.add_argument("--mode", choices=MODES)
        sp.add_argument("--out", default="runs/latest", help="output directory")
        sp.add_argument("-v", "--verbose", action="store_true")
        return sp

    common(sub.add_parser("pretrain-npn", help="step 1: pretrain the channel estimator"))
    sp = common(sub.add_parser("train", help="step 2: joint training (runs step 1 if --npn is absent)"))
    sp.add_argument("--npn", help="pretrained NPN checkpoint")
    sp = common(sub.add_parser("eval", help="evaluate one checkpoint at one SNR"))
    sp.add_argument("--checkpoint", required=True)
    for name, helptext in (("sweep-snr", "PSNR/MS-SSIM over the SNR grid"),
                           ("sweep-cbr", "PSNR/MS-SSIM over CBRs (one checkpoint per CBR)")):
        sp = common(sub.add_parser(name, help=helptext))
        sp.add_argument("--checkpoint", action="append", required=True,
                        help="repeat for several modes or CBRs")
    sp = common(sub.add_parser("mask-report", help="learned mask-ratio statistics"))
    sp.add_argument("--checkpoint", required=True)
    sp = common(sub.add_parser("viz", help="residual, mask maps and attention heatmaps"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--image", help="image file (default: first test image)")
    sp.add_argument("--index", type=int, default=0, help="test-image index when --image is absent")
    return p


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    kw = {}
    if args.seed is not None:
        kw["seed"] = args.seed
    if args.cbr is not None:
        kw["cbr"] = args.cbr
    if args.mode is not None:
        kw["mode"] = args.mode
    if args.snr is not None:
        snrs = _floats(args.snr)
        kw["snr_list_db"] = snrs
        kw["val_snr_db"] = snrs[0]
    return cfg.replace(**kw) if kw else cfg


class Run:
    """Output directory plus the manifest written at the end of every command."""

    def __init__(self, args, cfg: ExperimentConfig):
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.cfg = cfg
        self.started = time.time()
        self.manifest = {
            "command": args.command, "argv": sys.argv[1:], "version": __version__,
            "config_hash": cfg.fingerprint(), "arch_hash": cfg.architecture_fingerprint(),
            "seeds": {"seed": cfg.seed, "channel_seed": cfg.channel_seed, "image_seed": cfg.image_seed},
            "inputs": {}, "outputs": {},
            "python": platform.python_version(), "torch": torch.__version__,
        }
        (self.out / "config.txt").write_text(dump_config(cfg))
        self.output("config.txt")

    def input(self, path) -> None:
        self.manifest["inputs"][str(path)] = file_hash(path)

    def output(self, name) -> Path:
        path = self.out / name
        self.manifest["outputs"][name] = None
        return path

    def finish(self, **info) -> Path:
        self.manifest.update(info)
        self.manifest["seconds"] = round(time.time() - self.started, 2)
        for name in self.manifest["outputs"]:
            path = self.out / name
            if path.is_file():
                self.manifest["outputs"][name] = file_hash(path)
        path = self.out / "manifest.json"
        path.write_text(json.dumps(self.manifest, indent=2, sort_keys=True, default=str))
        return path


def _load(run: Run, path, cfg=None):
    run.input(path)
    model, stored = load_checkpoint(path, cfg)
    return model, stored


def cmd_pretrain_npn(args, cfg, run: Run) -> dict:
    pools = ChannelPools.from_config(cfg)
    res = train(cfg, np.zeros((0, cfg.image_size, cfg.image_size, 3), np.float32), pools,
                stage="pretrain_npn")
    write_csv(run.output("npn_history.csv"),
              [{"epoch": e, "split": s, "mse": m} for e, s, m in res.npn_history])
    pilot = PilotBlock.orthogonal(cfg.n_t, cfg.pilot_p)
    rows = []
    for snr in cfg.npn_snr_list:
        npn, ls = npn_mse(res.model.npn, pools.test, snr, pilot, seed=cfg.seed + 1000)
        rows.append({"snr_db": snr, "ls_mse": ls, "npn_mse": npn, "reduction": 1 - npn / ls})
    write_csv(run.output("npn_vs_ls.csv"), rows)
    save_npn(run.output("npn.pt"), res.model.npn, cfg)
    return {"npn_vs_ls": rows}


def cmd_train(args, cfg, run: Run) -> dict:
    train_imgs, test_imgs = load_dataset(cfg)
    pools = ChannelPools.from_config(cfg)
    npn_state = None
    if args.npn:
        run.input(args.npn)
        npn_state = load_npn(args.npn, cfg)
    res = train(cfg, train_imgs, pools, val_images=test_imgs,
                stage="joint" if npn_state is not None else "all", npn_state=npn_state)
    fields = ["epoch", "stage", "l1", "l_rec", "l_reg", "l_c", "l2", "lam", "lr", "psnr", "ms_ssim",
              "mean_m_star", "train_m_star"]
    for r, counts in zip(res.history[1:], res.snr_counts):
        for snr, c in counts.items():
            r[f"n_snr_{snr:g}"] = c
    fields += sorted({k for r in res.history for k in r if k.startswith("n_snr_")})
    write_csv(run.output("history.csv"), res.history, fields)
    plot_history(run.out / "history.csv", run.output("history.png"))
    if res.npn_history:
        write_csv(run.output("npn_history.csv"),
                  [{"epoch": e, "split": s, "mse": m} for e, s, m in res.npn_history])
    ckpt = save_checkpoint(run.output("checkpoint.pt"), res.model, cfg)
    return {"checkpoint_hash": ckpt, "final": res.history[-1]}


def cmd_eval(args, cfg, run: Run) -> dict:
    model, stored = _load(run, args.checkpoint)
    _, test_imgs = load_dataset(stored)
    pools = ChannelPools.from_config(stored)
    snr = cfg.val_snr_db if args.snr else stored.val_snr_db
    ev = evaluate(model, test_imgs, pools.test, snr, seed=cfg.seed)
    per = [{"image_id": i, "snr_db": snr, "psnr": float(p), "ms_ssim": float(s), "m_star": float(m)}
           for i, (p, s, m) in enumerate(zip(ev["psnr"], ev["ms_ssim"], ev["m_star"]))]
    write_csv(run.output("eval_per_image.csv"), per)
    row = summarize(stored.mode, snr, link_cbr(model), ev)
    write_csv(run.output("eval.csv"), [row], REPORT_FIELDS)
    return {"checkpoint_hash": file_hash(args.checkpoint), "report": row}


def _models(run: Run, paths):
    out = []
    for path in paths:
        model, stored = _load(run, path)
        out.append((stored, model))
    return out


def cmd_sweep_snr(args, cfg, run: Run) -> dict:
    loaded = _models(run, args.checkpoint)
    base = loaded[0][0]
    _, test_imgs = load_dataset(base)
    pools = ChannelPools.from_config(base)
    snrs = cfg.snr_list_db if args.snr else base.snr_list_db
    rows = sweep_snr({s.mode: m for s, m in loaded}, test_imgs, pools.test, snrs, seed=cfg.seed)
    write_csv(run.output("sweep_snr.csv"), rows, REPORT_FIELDS)
    plot_sweep(run.out / "sweep_snr.csv", run.output("sweep_snr_psnr.png"), "snr_db", "psnr")
    plot_sweep(run.out / "sweep_snr.csv", run.output("sweep_snr_msssim.png"), "snr_db", "ms_ssim")
    return {"rows": len(rows)}


def cmd_sweep_cbr(args, cfg, run: Run) -> dict:
    loaded = _models(run, args.checkpoint)
    base = loaded[0][0]
    _, test_imgs = load_dataset(base)
    pools = ChannelPools.from_config(base)
    snr = cfg.val_snr_db if args.snr else 8.0
    rows = sweep_cbr({(s.mode, s.cbr): m for s, m in loaded}, test_imgs, pools.test, snr, seed=cfg.seed)
    write_csv(run.output("sweep_cbr.csv"), rows, REPORT_FIELDS)
    plot_sweep(run.out / "sweep_cbr.csv", run.output("sweep_cbr_psnr.png"), "cbr", "psnr")
    return {"rows": len(rows)}


def cmd_mask_report(args, cfg, run: Run) -> dict:
    model, stored = _load(run, args.checkpoint)
    _, test_imgs = load_dataset(stored)
    pools = ChannelPools.from_config(stored)
    snrs = cfg.snr_list_db if args.snr else stored.snr_list_db
    summary, per_image, rho = mask_ratio_report(model, test_imgs, pools.test, snrs, seed=cfg.seed)
    write_csv(run.output("mask_report.csv"), summary)
    write_csv(run.output("mask_ratio_per_image.csv"), per_image)
    plot_mask_report(run.out / "mask_report.csv", run.output("mask_report.png"))
    return {"spearman_m_star_vs_snr": rho}


def cmd_viz(args, cfg, run: Run) -> dict:
    model, stored = _load(run, args.checkpoint)
    pools = ChannelPools.from_config(stored)
    if args.image:
        run.input(args.image)
        image = load_image_folder(Path(args.image).parent, stored.image_size,
                                  names=[Path(args.image).name])[0]
    else:
        image = load_dataset(stored)[1][args.index]
    snr = cfg.val_snr_db if args.snr else stored.val_snr_db
    res = attention_visualize(model, image, pools.test[args.index % len(pools.test)], snr, run.out / "viz",
                              seed=cfg.seed)
    for p in sorted((run.out / "viz").iterdir()):
        run.output(f"viz/{p.name}")
    _, test_imgs = load_dataset(stored)
    stat = entropy_statistic(model, test_imgs, pools.test, snr, seed=cfg.seed)
    write_csv(run.output("entropy_summary.csv"), [{"mode": stored.mode, "snr_db": snr, **stat}])
    return {"psnr": res["psnr"], "m_star": res["m_star"], "entropy": stat}


COMMANDS = {
    "pretrain-npn": cmd_pretrain_npn, "train": cmd_train, "eval": cmd_eval,
    "sweep-snr": cmd_sweep_snr, "sweep-cbr": cmd_sweep_cbr, "mask-report": cmd_mask_report,
    "viz": cmd_viz,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    cfg = resolve_config(args)
    torch.manual_seed(cfg.seed)
    run = Run(args, cfg)
    info = COMMANDS[args.command](args, cfg, run)
    path = run.finish(result=info)
    print(json.dumps({"out": str(run.out), "manifest": str(path), **info}, default=str))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
