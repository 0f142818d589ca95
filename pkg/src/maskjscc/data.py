"""Small-image datasets: a folder of RGB files or crops of bundled sample photos."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

_SAMPLE_NAMES = ("astronaut", "chelsea", "coffee", "rocket", "immunohistochemistry",
                 "retina", "hubble_deep_field")
_EXTS = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".webp"}


def _sample_photos() -> list[np.ndarray]:
    import skimage.data
    from sklearn.datasets import load_sample_images

    photos = [getattr(skimage.data, n)() for n in _SAMPLE_NAMES]
    photos += list(load_sample_images().images)
    return [p[..., :3] for p in photos]


def _resize(arr: np.ndarray, size: int) -> np.ndarray:
    img = Image.fromarray(arr).resize((size, size), Image.BICUBIC)
    return np.asarray(img, dtype=np.float32) / 255.0


def builtin_images(n: int, size: int = 32, split: str = "train", seed: int = 0) -> np.ndarray:
    """Random crops (resized to ``size``) of bundled photos, [n, size, size, 3] in [0, 1].

    The top 75% of every photo feeds ``train``, the bottom 25% ``test``, so
    the two splits never share pixels.
    """
    if split not in ("train", "test"):
        raise ValueError("split must be train or test")
    rng = np.random.default_rng(seed + (0 if split == "train" else 1))
    photos = []
    for p in _sample_photos():
        cut = int(p.shape[0] * 0.75)
        photos.append(p[:cut] if split == "train" else p[cut:])
    out = np.empty((n, size, size, 3), dtype=np.float32)
    for i in range(n):
        p = photos[rng.integers(len(photos))]
        c = int(rng.integers(size * 2, min(p.shape[0], p.shape[1], size * 5) + 1))
        y0 = int(rng.integers(0, p.shape[0] - c + 1))
        x0 = int(rng.integers(0, p.shape[1] - c + 1))
        crop = p[y0:y0 + c, x0:x0 + c]
        if rng.random() < 0.5:
            crop = crop[:, ::-1]
        out[i] = _resize(np.ascontiguousarray(crop), size)
    return out


def load_image_folder(path, size: int = 32, limit: int | None = None, names=None) -> np.ndarray:
    """Center-crop and resize every RGB image in ``path`` (or only ``names``)."""
    files = sorted(f for f in Path(path).iterdir() if f.suffix.lower() in _EXTS)
    if names is not None:
        files = [f for f in files if f.name in set(names)]
    if limit is not None:
        files = files[:limit]
    if not files:
        raise FileNotFoundError(f"no images in {path}")
    out = []
    for f in files:
        arr = np.asarray(Image.open(f).convert("RGB"))
        h, w = arr.shape[:2]
        c = min(h, w)
        arr = arr[(h - c) // 2:(h - c) // 2 + c, (w - c) // 2:(w - c) // 2 + c]
        out.append(_resize(np.ascontiguousarray(arr), size))
    return np.stack(out)


def load_dataset(cfg) -> tuple[np.ndarray, np.ndarray]:
    """(train, test) image arrays for an ExperimentConfig."""
    if cfg.data_dir:
        imgs = load_image_folder(cfg.data_dir, cfg.image_size)
        n_test = min(cfg.n_test_images, len(imgs) // 3)
        return imgs[n_test:][:cfg.n_train_images], imgs[:n_test]
    return (builtin_images(cfg.n_train_images, cfg.image_size, "train", cfg.image_seed),
            builtin_images(cfg.n_test_images, cfg.image_size, "test", cfg.image_seed))
