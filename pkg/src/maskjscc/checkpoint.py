"""Versioned checkpoint archives tied to a config fingerprint."""
from __future__ import annotations

import hashlib
from pathlib import Path

import torch

from .config import ExperimentConfig
from .errors import StateError

FORMAT_VERSION = 1


def save_checkpoint(path, model, cfg: ExperimentConfig, extra: dict | None = None) -> str:
    """Write the full link (codec, mask scorer, rho, NPN, CVAE) and return its sha256."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    archive = {
        "format": "maskjscc-link",
        "version": FORMAT_VERSION,
        "arch_fingerprint": cfg.architecture_fingerprint(),
        "config": cfg.to_dict(),
        "npn_pretrained": bool(getattr(model, "npn_pretrained", False)),
        "trained": bool(getattr(model, "trained", False)),
        "state": model.state_dict(),
        "extra": extra or {},
    }
    torch.save(archive, path)
    return file_hash(path)


def save_npn(path, npn, cfg: ExperimentConfig) -> str:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"format": "maskjscc-npn", "version": FORMAT_VERSION,
                "n_r": cfg.n_r, "n_t": cfg.n_t, "state": npn.state_dict()}, path)
    return file_hash(path)


def load_npn(path, cfg: ExperimentConfig) -> dict:
    arc = torch.load(path, map_location="cpu", weights_only=False)
    if arc.get("format") != "maskjscc-npn" or arc.get("version") != FORMAT_VERSION:
        raise StateError(f"{path} is not an NPN checkpoint of version {FORMAT_VERSION}")
    if (arc["n_r"], arc["n_t"]) != (cfg.n_r, cfg.n_t):
        raise StateError("NPN checkpoint antenna configuration does not match the config")
    return arc["state"]


def read_archive(path) -> dict:
    arc = torch.load(path, map_location="cpu", weights_only=False)
    if arc.get("format") != "maskjscc-link":
        raise StateError(f"{path} is not a link checkpoint")
    if arc.get("version") != FORMAT_VERSION:
        raise StateError(f"unsupported checkpoint version {arc.get('version')}")
    return arc


def load_checkpoint(path, cfg: ExperimentConfig | None = None, require_trained: bool = True):
    """Rebuild a LinkModel.  ``cfg`` (if given) must match the stored architecture."""
    from .system import LinkModel

    arc = read_archive(path)
    stored = ExperimentConfig(**arc["config"])
    if cfg is not None and cfg.architecture_fingerprint() != arc["arch_fingerprint"]:
        raise StateError("checkpoint was written for a different configuration "
                         f"({arc['arch_fingerprint']} != {cfg.architecture_fingerprint()})")
    if require_trained and not arc["trained"]:
        raise StateError("checkpoint holds untrained weights")
    model = LinkModel(cfg or stored)
    model.load_state_dict(arc["state"])
    model.npn_pretrained = arc["npn_pretrained"]
    model.trained = arc["trained"]
    return model, stored


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
