"""
Experiment configuration.

Config files are flat ``key = value`` text.  Lines starting with ``#`` are
comments; list values are comma separated.  Unknown keys are rejected.  See
README.md for the full key list.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .channel import codeword_length
from .codec import EncoderConfig
from .cvae import DEFAULT_M_BAR, DEFAULT_M_STABLE

MODES = ("lcfsc", "cfsc_fixed_m", "baseline_m0")


@dataclass
class ExperimentConfig:
    mode: str = "lcfsc"
    seed: int = 0
    # link
    image_size: int = 32
    n_r: int = 2
    n_t: int = 2
    correlation_rho: float = 0.9
    pilot_power: float = 0.0  # 0 -> n_t (pilots sqrt(n_t) * I)
    cbr: float = 0.06
    snr_list_db: list = field(default_factory=lambda: [0.0, 2.0, 4.0, 6.0, 8.0, 10.0, 12.0])
    cbr_list: list = field(default_factory=lambda: [0.02, 0.04, 0.06])
    channel_pool_train: int = 1000
    channel_pool_test: int = 100
    channel_seed: int = 1234
    # codec
    block_depths: list = field(default_factory=lambda: [2, 2, 6, 2])
    embed_dims: list = field(default_factory=lambda: [24, 48, 96, 192])
    heads: list = field(default_factory=lambda: [2, 4, 6, 8])
    window_size: int = 4
    ni_cfma_stage: int = 2
    mlp_ratio: float = 4.0
    latent_dim: int = 192
    mask_mode: str = "literal"
    codec_hidden: int = 256
    # mask ratio
    m_fixed: float = DEFAULT_M_STABLE
    m_stable: float = DEFAULT_M_STABLE
    m_bar: list = field(default_factory=lambda: list(DEFAULT_M_BAR))
    cvae_latent: int = 16
    prior_condition: str = "m"
    kl_variant: str = "standard"
    ratio_grad: bool = False
    masking_enabled: bool = True
    # training
    lam: float = 0.1
    loss_metric: str = "mse"
    metric: str = "psnr"
    epochs: int = 30
    batch_size: int = 16
    lr_start: float = 1e-4
    lr_end: float = 2e-5
    lr_steps: int = 4
    grad_clip: float = 1.0
    val_snr_db: float = 8.0
    freeze_npn: bool = False
    npn_epochs: int = 60
    npn_lr: float = 1e-3
    npn_batch: int = 32
    npn_snr_list: list = field(default_factory=lambda: [0.0, 5.0, 10.0])
    # data
    data_dir: str = ""
    n_train_images: int = 200
    n_test_images: int = 100
    image_seed: int = 7

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.metric not in ("psnr", "ms_ssim"):
            raise ValueError("metric must be psnr or ms_ssim")

    @property
    def pilot_p(self) -> float:
        return float(self.pilot_power) if self.pilot_power > 0 else float(self.n_t)

    @property
    def c_l(self) -> int:
        return codeword_length(self.cbr, self.image_size, self.image_size, self.n_t)

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            image_size=self.image_size, block_depths=tuple(self.block_depths),
            embed_dims=tuple(self.embed_dims), heads=tuple(self.heads),
            window_size=self.window_size, ni_cfma_stage=self.ni_cfma_stage,
            mlp_ratio=self.mlp_ratio, latent_dim=self.latent_dim,
            n_r=self.n_r, n_t=self.n_t, mask_mode=self.mask_mode,
        )

    def replace(self, **kw) -> "ExperimentConfig":
        d = asdict(self)
        d.update(kw)
        return ExperimentConfig(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def architecture_fingerprint(self) -> str:
        """Hash of the keys that determine parameter shapes."""
        keys = ("mode", "image_size", "n_r", "n_t", "cbr", "block_depths", "embed_dims", "heads",
                "window_size", "ni_cfma_stage", "mlp_ratio", "latent_dim", "codec_hidden",
                "m_bar", "cvae_latent", "prior_condition")
        d = {k: getattr(self, k) for k in keys}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def _convert(raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, list):
        items = [x.strip() for x in raw.split(",") if x.strip()]
        proto = default[0] if default else 0.0
        return [type(proto)(float(x)) if isinstance(proto, int) else float(x) for x in items]
    return raw


def parse_config_text(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    base = base or ExperimentConfig()
    known = {f.name: getattr(base, f.name) for f in fields(ExperimentConfig)}
    updates = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value")
        key, val = (x.strip() for x in line.split("=", 1))
        if key not in known:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        updates[key] = _convert(val, known[key])
    return base.replace(**updates)


def load_config(path) -> ExperimentConfig:
    return parse_config_text(Path(path).read_text())


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for k, v in cfg.to_dict().items():
        if isinstance(v, (list, tuple)):
            v = ", ".join(str(x) for x in v)
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"
