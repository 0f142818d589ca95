import numpy as np
import pytest

from maskjscc.config import ExperimentConfig, dump_config, load_config, parse_config_text
from maskjscc.data import builtin_images, load_dataset, load_image_folder


def test_defaults():
    cfg = ExperimentConfig()
    assert (cfg.channel_pool_train, cfg.channel_pool_test) == (1000, 100)
    assert cfg.snr_list_db == [0, 2, 4, 6, 8, 10, 12]
    assert cfg.c_l == 184 and cfg.pilot_p == 2.0


def test_parse_and_dump_roundtrip(tmp_path):
    text = """
    # comment
    mode = baseline_m0
    seed = 3
    snr_list_db = 0, 5, 10   # trailing comment
    freeze_npn = yes
    block_depths = 2, 2, 2, 2
    """
    cfg = parse_config_text(text)
    assert cfg.mode == "baseline_m0" and cfg.seed == 3 and cfg.freeze_npn is True
    assert cfg.snr_list_db == [0.0, 5.0, 10.0] and cfg.block_depths == [2, 2, 2, 2]
    path = tmp_path / "c.cfg"
    path.write_text(dump_config(cfg))
    assert load_config(path) == cfg
    assert load_config(path).fingerprint() == cfg.fingerprint()


@pytest.mark.parametrize("text", ["nokey", "unknown = 1", "mode = other", "metric = l1",
                                  "freeze_npn = maybe"])
def test_bad_config_rejected(text):
    with pytest.raises(ValueError):
        parse_config_text(text)


def test_architecture_fingerprint_ignores_training_keys():
    a = ExperimentConfig()
    assert a.architecture_fingerprint() == a.replace(epochs=3, seed=9).architecture_fingerprint()
    assert a.architecture_fingerprint() != a.replace(cbr=0.02).architecture_fingerprint()


def test_builtin_images_are_deterministic_and_split():
    a = builtin_images(6, 32, "train", seed=1)
    assert a.shape == (6, 32, 32, 3) and a.dtype == np.float32
    assert 0.0 <= a.min() and a.max() <= 1.0
    np.testing.assert_array_equal(a, builtin_images(6, 32, "train", seed=1))
    assert not np.array_equal(a, builtin_images(6, 32, "test", seed=1))
    with pytest.raises(ValueError):
        builtin_images(1, 32, "val")


def test_image_folder(tmp_path):
    from PIL import Image

    for i in range(3):
        Image.fromarray((np.random.default_rng(i).random((40, 60, 3)) * 255).astype(np.uint8)).save(
            tmp_path / f"{i}.png")
    imgs = load_image_folder(tmp_path, 32)
    assert imgs.shape == (3, 32, 32, 3)
    assert load_image_folder(tmp_path, 32, names=["1.png"]).shape == (1, 32, 32, 3)
    tr, te = load_dataset(ExperimentConfig(data_dir=str(tmp_path)))
    assert len(tr) + len(te) == 3
    with pytest.raises(FileNotFoundError):
        load_image_folder(tmp_path, names=["nope.png"])
