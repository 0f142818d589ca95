"""
MIMO block-fading link simulation.

Numpy functions implement the reference operations (channel sampling,
power normalization, noisy transmission, pilots and LS estimation).  The
``torch_*`` helpers below are the batched, differentiable counterparts used
inside the end-to-end training graph.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import ParameterError, ShapeError

# tau is treated as singular beyond this condition number
_PILOT_COND_LIMIT = 1e12


@dataclass
class ChannelMatrix:
    h: np.ndarray
    seed: int | None = None
    correlation_rho: float = 0.0

    @property
    def n_r(self) -> int:
        return self.h.shape[0]

    @property
    def n_t(self) -> int:
        return self.h.shape[1]


@dataclass
class NoiseSpec:
    snr_db: float
    sigma2: float

    @classmethod
    def from_snr(cls, snr_db: float, signal_power: float = 1.0) -> "NoiseSpec":
        return cls(float(snr_db), snr_to_sigma2(snr_db, signal_power))

    @classmethod
    def noiseless(cls) -> "NoiseSpec":
        return cls(float("inf"), 0.0)


@dataclass
class PilotBlock:
    tau: np.ndarray
    tau_hat: np.ndarray | None = None

    @classmethod
    def orthogonal(cls, n_t: int, power: float | None = None) -> "PilotBlock":
        """Scaled identity pilots; ``power`` defaults to ``n_t`` (sqrt(n_t) * I)."""
        p = float(n_t) if power is None else float(power)
        if p <= 0:
            raise ParameterError("pilot power must be positive")
        return cls(np.sqrt(p) * np.eye(n_t, dtype=np.complex128))


@dataclass
class StreamCodeword:
    y: np.ndarray  # complex [n_t, c_l // (2 n_t)], unit average power
    c_l: int
    scale: float  # rms of the unnormalized complex symbols


def snr_to_sigma2(snr_db: float, signal_power: float = 1.0) -> float:
    return float(signal_power / 10.0 ** (snr_db / 10.0))


def cbr(c_l: int, height: int, width: int) -> float:
    """Channel bandwidth ratio: real channel uses per source value."""
    if c_l <= 0 or height <= 0 or width <= 0:
        raise ParameterError("cbr needs positive dimensions")
    return c_l / (height * width * 3)


def codeword_length(ratio: float, height: int, width: int, n_t: int) -> int:
    """Largest C_L <= ratio*H*W*3 that splits evenly into n_t complex streams."""
    unit = 2 * n_t
    c_l = int(np.floor(ratio * height * width * 3 / unit)) * unit
    if c_l < unit:
        raise ParameterError(f"ratio {ratio} too small for {n_t} streams")
    return c_l


def _check_rho(rho: float) -> None:
    if not (0.0 <= rho < 1.0):
        raise ParameterError(f"correlation_rho must be in [0, 1), got {rho}")


def correlation_sqrt(n: int, rho: float) -> np.ndarray:
    """Symmetric square root of the exponential correlation matrix rho^|i-j|."""
    idx = np.arange(n)
    r = rho ** np.abs(idx[:, None] - idx[None, :])
    w, v = np.linalg.eigh(r)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def generate_channels(n_r: int, n_t: int, correlation_rho: float, count: int,
                      seed: int) -> np.ndarray:
    """Draw ``count`` Kronecker-correlated Rayleigh channels, shape [count, n_r, n_t]."""
    if n_r < 1 or n_t < 1:
        raise ParameterError("antenna counts must be >= 1")
    if count < 1:
        raise ParameterError("count must be >= 1")
    _check_rho(correlation_rho)
    rng = np.random.default_rng(seed)
    g = (rng.standard_normal((count, n_r, n_t))
         + 1j * rng.standard_normal((count, n_r, n_t))) / np.sqrt(2.0)
    if correlation_rho == 0.0:
        return g
    rr = correlation_sqrt(n_r, correlation_rho)
    rt = correlation_sqrt(n_t, correlation_rho)
    return rr @ g @ rt


def generate_channel(n_r: int, n_t: int, correlation_rho: float = 0.0,
                     seed: int = 0) -> ChannelMatrix:
    h = generate_channels(n_r, n_t, correlation_rho, 1, seed)[0]
    return ChannelMatrix(h=h, seed=seed, correlation_rho=correlation_rho)


def power_normalize(y_real: np.ndarray, n_t: int) -> StreamCodeword:
    """Pair reals into I/Q symbols, split into n_t rows and scale to unit power."""
    y_real = np.asarray(y_real, dtype=np.float64).reshape(-1)
    c_l = y_real.size
    if c_l == 0 or c_l % (2 * n_t) != 0:
        raise ShapeError(f"codeword length {c_l} not divisible by 2*n_t={2 * n_t}")
    sym = y_real[0::2] + 1j * y_real[1::2]
    scale = float(np.sqrt(np.mean(np.abs(sym) ** 2)))
    if scale == 0.0:
        raise ParameterError("zero-power codeword")
    return StreamCodeword(y=(sym / scale).reshape(n_t, -1), c_l=c_l, scale=scale)


def power_denormalize(y: np.ndarray, scale: float) -> np.ndarray:
    """Inverse of :func:`power_normalize` applied to a (possibly received) stream matrix."""
    sym = np.asarray(y).reshape(-1) * scale
    out = np.empty(2 * sym.size)
    out[0::2] = sym.real
    out[1::2] = sym.imag
    return out


def complex_noise(shape, sigma2: float, rng: np.random.Generator) -> np.ndarray:
    std = np.sqrt(sigma2 / 2.0)
    return std * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def _as_matrix(h) -> np.ndarray:
    return h.h if isinstance(h, ChannelMatrix) else np.asarray(h)


def _exact_matmul(h: np.ndarray, y: np.ndarray) -> np.ndarray:
    """h @ y with every real product and sum rounded in textbook order.

    BLAS and vectorized complex multiply reassociate or fuse operations; this
    keeps the result bit-identical to a scalar triple loop.
    """
    hr, hi = np.real(h).astype(np.float64), np.imag(h).astype(np.float64)
    yr, yi = np.real(y).astype(np.float64), np.imag(y).astype(np.float64)
    re = np.zeros((h.shape[0], y.shape[1]))
    im = np.zeros_like(re)
    for k in range(h.shape[1]):
        re = re + (hr[:, k, None] * yr[None, k, :] - hi[:, k, None] * yi[None, k, :])
        im = im + (hr[:, k, None] * yi[None, k, :] + hi[:, k, None] * yr[None, k, :])
    return re + 1j * im


def apply_channel(y, h, noise: NoiseSpec, seed: int | None = None) -> np.ndarray:
    """Received block h @ y + n with n ~ CN(0, sigma2) per entry."""
    y = y.y if isinstance(y, StreamCodeword) else np.asarray(y)
    hm = _as_matrix(h)
    if hm.ndim != 2 or y.ndim != 2 or hm.shape[1] != y.shape[0]:
        raise ShapeError(f"cannot apply {hm.shape} channel to {y.shape} block")
    out = _exact_matmul(hm, y)
    if noise.sigma2 > 0:
        out = out + complex_noise(out.shape, noise.sigma2, np.random.default_rng(seed))
    return out


def _check_pilots(tau: np.ndarray) -> None:
    if tau.ndim != 2 or tau.shape[0] != tau.shape[1]:
        raise ParameterError("pilot matrix must be square")
    if not np.isfinite(np.linalg.cond(tau)) or np.linalg.cond(tau) > _PILOT_COND_LIMIT:
        raise ParameterError("pilot matrix is singular")


def transmit_pilots(tau, h, noise: NoiseSpec, seed: int | None = None) -> np.ndarray:
    tau = tau.tau if isinstance(tau, PilotBlock) else np.asarray(tau)
    _check_pilots(tau)
    return apply_channel(tau, h, noise, seed)


def ls_estimate(tau, tau_hat) -> np.ndarray:
    tau = tau.tau if isinstance(tau, PilotBlock) else np.asarray(tau)
    _check_pilots(tau)
    return np.asarray(tau_hat) @ np.linalg.inv(tau)


# ---------------------------------------------------------------------------
# channel pool files

def save_channels(path, channels: np.ndarray, seed: int, correlation_rho: float = 0.0) -> None:
    """Text file: one header line, then one realization per row as re/im pairs."""
    channels = np.asarray(channels)
    count, n_r, n_t = channels.shape
    flat = channels.reshape(count, -1)
    rows = np.empty((count, 2 * n_r * n_t))
    rows[:, 0::2] = flat.real
    rows[:, 1::2] = flat.imag
    header = f"n_r={n_r} n_t={n_t} count={count} seed={seed} rho={correlation_rho}"
    np.savetxt(path, rows, header=header, fmt="%.17g")


def load_channels(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    with path.open() as f:
        first = f.readline().lstrip("#").split()
    meta = dict(kv.split("=", 1) for kv in first)
    n_r, n_t, count = int(meta["n_r"]), int(meta["n_t"]), int(meta["count"])
    rows = np.loadtxt(path, ndmin=2)
    if rows.shape != (count, 2 * n_r * n_t):
        raise ShapeError(f"{path}: expected {count} rows of {2 * n_r * n_t} values")
    h = (rows[:, 0::2] + 1j * rows[:, 1::2]).reshape(count, n_r, n_t)
    info = {"n_r": n_r, "n_t": n_t, "count": count, "seed": int(meta["seed"]),
            "rho": float(meta.get("rho", 0.0))}
    return h, info


# ---------------------------------------------------------------------------
# batched torch path (differentiable)

def csi_to_image(h: torch.Tensor) -> torch.Tensor:
    """Complex [..., n_r, n_t] -> real [..., 2, n_r, n_t] (real/imag planes)."""
    return torch.stack([h.real, h.imag], dim=-3)


def image_to_csi(x: torch.Tensor) -> torch.Tensor:
    return torch.complex(x[..., 0, :, :], x[..., 1, :, :])


def torch_ls_pilots(h: torch.Tensor, sigma2: torch.Tensor, pilot_power: float,
                    generator: torch.Generator | None = None) -> torch.Tensor:
    """Orthogonal-pilot pass + LS estimate for a batch of channels [B, n_r, n_t].

    With tau = sqrt(p) I the LS estimate is h + n / sqrt(p).
    """
    noise = _torch_noise(h.shape, sigma2, h.real.dtype, generator)
    return h + noise / np.sqrt(pilot_power)


def _torch_noise(shape, sigma2: torch.Tensor, dtype, generator) -> torch.Tensor:
    std = torch.sqrt(sigma2 / 2.0).reshape(-1, *([1] * (len(shape) - 1))).to(dtype)
    re = torch.randn(shape, generator=generator, dtype=dtype)
    im = torch.randn(shape, generator=generator, dtype=dtype)
    return torch.complex(std * re, std * im)


def torch_to_streams(y: torch.Tensor, n_t: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Real codewords [B, C_L] -> unit-power complex streams [B, n_t, C_L/(2 n_t)] and scale [B]."""
    b, c_l = y.shape
    if c_l % (2 * n_t):
        raise ShapeError(f"codeword length {c_l} not divisible by 2*n_t={2 * n_t}")
    sym = torch.complex(y[:, 0::2], y[:, 1::2])
    scale = torch.sqrt(torch.mean(sym.real ** 2 + sym.imag ** 2, dim=1) + 1e-12)
    return (sym / scale[:, None]).reshape(b, n_t, -1), scale


def torch_from_streams(s: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    sym = s.reshape(s.shape[0], -1) * scale[:, None]
    return torch.stack([sym.real, sym.imag], dim=-1).reshape(s.shape[0], -1)


def mmse_equalize(y_hat: torch.Tensor, h_est: torch.Tensor, sigma2: torch.Tensor) -> torch.Tensor:
    """Linear MMSE detection (h^H h + sigma2 I)^-1 h^H y_hat using the estimated channel."""
    n_t = h_est.shape[-1]
    hh = h_est.conj().transpose(-1, -2)
    eye = torch.eye(n_t, dtype=h_est.dtype)
    gram = hh @ h_est + sigma2.reshape(-1, 1, 1).to(h_est.dtype) * eye
    return torch.linalg.solve(gram, hh @ y_hat)


def torch_mimo_link(y: torch.Tensor, h: torch.Tensor, h_est: torch.Tensor, sigma2: torch.Tensor,
                    generator: torch.Generator | None = None) -> torch.Tensor:
    """Real codewords through a MIMO block-fading channel and MMSE receiver.

    y: [B, C_L] real; h, h_est: [B, n_r, n_t] complex; sigma2: [B].
    Returns the detected real codewords [B, C_L].
    """
    n_t = h.shape[-1]
    streams, scale = torch_to_streams(y, n_t)
    rx = h.to(streams.dtype) @ streams
    rx = rx + _torch_noise(rx.shape, sigma2, y.dtype, generator)
    det = mmse_equalize(rx, h_est.to(streams.dtype), sigma2)
    return torch_from_streams(det, scale)
