import json

import numpy as np
import pytest
import torch

from conftest import tiny_config
from maskjscc import cli
from maskjscc.attention import masked_count
from maskjscc.checkpoint import load_checkpoint, load_npn, save_checkpoint, save_npn
from maskjscc.config import dump_config
from maskjscc.errors import ParameterError, StateError
from maskjscc.experiments import (
    attention_visualize, bin_fractions, entropy_statistic, mask_ratio_report, read_csv, row_entropy,
    sweep_cbr, sweep_snr, write_csv,
)
from maskjscc.plotting import plot_mask_report, plot_sweep
from maskjscc.system import LinkModel
from maskjscc.training import ChannelPools, train


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    from maskjscc.data import builtin_images

    imgs = builtin_images(16, 32, "train", 0)
    out = {}
    for mode in ("lcfsc", "baseline_m0"):
        cfg = tiny_config(mode=mode, epochs=1)
        out[mode] = train(cfg, imgs).model
    return out


@pytest.fixture(scope="module")
def test_set():
    from maskjscc.data import builtin_images

    return builtin_images(8, 32, "test", 0), ChannelPools.from_config(tiny_config()).test


def test_checkpoint_roundtrip_and_mismatch(tmp_path, trained):
    model = trained["lcfsc"]
    cfg = model.cfg
    save_checkpoint(tmp_path / "c.pt", model, cfg)
    back, stored = load_checkpoint(tmp_path / "c.pt", cfg)
    assert stored == cfg and back.trained
    for (n, p), q in zip(model.state_dict().items(), back.state_dict().values()):
        assert torch.equal(p, q), n
    with pytest.raises(StateError):
        load_checkpoint(tmp_path / "c.pt", cfg.replace(cbr=0.02))
    save_checkpoint(tmp_path / "u.pt", LinkModel(cfg), cfg)
    with pytest.raises(StateError):
        load_checkpoint(tmp_path / "u.pt")
    save_npn(tmp_path / "n.pt", model.npn, cfg)
    assert set(load_npn(tmp_path / "n.pt", cfg)) == set(model.npn.state_dict())
    with pytest.raises(StateError):
        load_npn(tmp_path / "n.pt", cfg.replace(n_r=4))
    with pytest.raises(StateError):
        load_checkpoint(tmp_path / "n.pt")


def test_sweep_snr_rows_and_untrained(trained, test_set):
    imgs, chans = test_set
    rows = sweep_snr(trained, imgs, chans, [0.0, 12.0])
    assert len(rows) == 2 * 2
    assert {r["mode"] for r in rows} == {"lcfsc", "baseline_m0"}
    assert all(r["cbr"] == pytest.approx(184 / 3072) for r in rows)
    with pytest.raises(StateError):
        sweep_snr({"x": LinkModel(tiny_config())}, imgs, chans, [0.0])


def test_sweep_cbr_rows(trained, test_set):
    imgs, chans = test_set
    rows = sweep_cbr({("lcfsc", 0.06): trained["lcfsc"]}, imgs, chans, 8.0)
    assert len(rows) == 1 and rows[0]["snr_db"] == 8.0


def test_bin_fractions():
    fr = bin_fractions([0.001, 0.0049, 0.005, 0.009, 0.015])
    assert fr == [0.4, 0.2, 0.4] and sum(fr) == pytest.approx(1.0)


def test_mask_ratio_report(trained, test_set):
    imgs, chans = test_set
    summary, per_image, rho = mask_ratio_report(trained["lcfsc"], imgs, chans, [0, 4, 8, 12, 16])
    assert len(summary) == 5 and len(per_image) == 5 * len(imgs)
    for row in summary:
        assert sum(row[f"bin{i}"] for i in range(3)) == pytest.approx(1.0)
        assert 0.001 <= row["min_m_star"] <= row["max_m_star"] <= 0.015
    assert -1.0 <= rho <= 1.0
    with pytest.raises(ParameterError):
        mask_ratio_report(trained["baseline_m0"], imgs, chans, [0, 4])


def test_row_entropy_bounds():
    d = 16
    uniform = torch.full((1, d, d), 1.0 / d)
    assert float(row_entropy(uniform).mean()) == pytest.approx(np.log(d))
    assert float(row_entropy(torch.eye(d)[None]).mean()) == pytest.approx(0.0)


def test_attention_visualize_counts(tmp_path, trained, test_set):
    imgs, chans = test_set
    res = attention_visualize(trained["lcfsc"], imgs[0], chans[0], 6.0, tmp_path / "v")
    d = 16
    for row in res["rows"]:
        assert row["masked_entries"] == row["expected_masked"] == masked_count(res["m_star"], d)
    assert (tmp_path / "v" / "residual.png").exists() and (tmp_path / "v" / "entropy.csv").exists()
    zero = attention_visualize(trained["lcfsc"], imgs[0], chans[0], 6.0, tmp_path / "z", m=0.0)
    assert all(r["masked_entries"] == 0 for r in zero["rows"])
    base = attention_visualize(trained["baseline_m0"], imgs[0], chans[0], 6.0, tmp_path / "b")
    assert all(r["masked_entries"] == 0 for r in base["rows"])


def test_entropy_statistic_window_count(trained, test_set):
    imgs, chans = test_set
    stat = entropy_statistic(trained["baseline_m0"], imgs, chans, 6.0)
    # one masked-stage block per image with a single 4x4 window at this depth
    assert stat["n_windows"] == len(imgs)
    assert 0 < stat["mean_entropy"] <= np.log(16) + 1e-9


def test_csv_roundtrip_with_inf(tmp_path):
    rows = [{"mode": "lcfsc", "snr_db": 0.0, "psnr": float("inf")}]
    write_csv(tmp_path / "t.csv", rows)
    back = read_csv(tmp_path / "t.csv")
    assert back[0]["mode"] == "lcfsc" and back[0]["psnr"] == float("inf")


def test_plots_are_pure_functions_of_csv(tmp_path, trained, test_set):
    imgs, chans = test_set
    write_csv(tmp_path / "s.csv", sweep_snr(trained, imgs, chans, [0.0, 6.0]))
    a = plot_sweep(tmp_path / "s.csv", tmp_path / "a.png").read_bytes()
    b = plot_sweep(tmp_path / "s.csv", tmp_path / "b.png").read_bytes()
    assert a == b and a[:4] == b"\x89PNG"
    summary, _, _ = mask_ratio_report(trained["lcfsc"], imgs, chans, [0, 6])
    write_csv(tmp_path / "m.csv", summary)
    a = plot_mask_report(tmp_path / "m.csv", tmp_path / "ma.png").read_bytes()
    assert a == plot_mask_report(tmp_path / "m.csv", tmp_path / "mb.png").read_bytes()


def test_cli_end_to_end(tmp_path):
    cfg_path = tmp_path / "tiny.cfg"
    cfg_path.write_text(dump_config(tiny_config(epochs=1)))
    c = str(cfg_path)
    assert cli.main(["pretrain-npn", "--config", c, "--out", str(tmp_path / "npn")]) == 0
    assert cli.main(["train", "--config", c, "--npn", str(tmp_path / "npn" / "npn.pt"),
                     "--out", str(tmp_path / "lc")]) == 0
    ckpt = str(tmp_path / "lc" / "checkpoint.pt")
    assert cli.main(["eval", "--config", c, "--checkpoint", ckpt, "--snr", "4",
                     "--out", str(tmp_path / "ev")]) == 0
    assert cli.main(["sweep-snr", "--config", c, "--checkpoint", ckpt, "--out", str(tmp_path / "ss")]) == 0
    assert cli.main(["mask-report", "--config", c, "--checkpoint", ckpt, "--out", str(tmp_path / "mr")]) == 0
    assert cli.main(["viz", "--config", c, "--checkpoint", ckpt, "--out", str(tmp_path / "vz")]) == 0
    assert cli.main(["sweep-cbr", "--config", c, "--checkpoint", ckpt, "--out", str(tmp_path / "sc")]) == 0

    man = json.loads((tmp_path / "lc" / "manifest.json").read_text())
    assert man["config_hash"] == tiny_config(epochs=1).fingerprint()
    assert man["seeds"]["seed"] == 0
    assert man["outputs"]["checkpoint.pt"] and str(tmp_path / "npn" / "npn.pt") in man["inputs"]
    hist = read_csv(tmp_path / "lc" / "history.csv")
    for key in ("epoch", "stage", "l1", "l_rec", "l_reg", "l2", "psnr", "ms_ssim", "mean_m_star"):
        assert key in hist[0]
    assert len(read_csv(tmp_path / "ss" / "sweep_snr.csv")) == 3
    assert (tmp_path / "ss" / "sweep_snr_psnr.png").exists()
    assert (tmp_path / "mr" / "mask_ratio_per_image.csv").exists()
    for sub in ("ev", "ss", "mr", "vz", "sc", "npn"):
        assert (tmp_path / sub / "manifest.json").exists()


def test_cli_overrides():
    args = cli.build_parser().parse_args(["train", "--seed", "4", "--cbr", "0.04", "--mode",
                                          "cfsc_fixed_m", "--snr", "2,4"])
    cfg = cli.resolve_config(args)
    assert (cfg.seed, cfg.cbr, cfg.mode, cfg.snr_list_db) == (4, 0.04, "cfsc_fixed_m", [2.0, 4.0])
