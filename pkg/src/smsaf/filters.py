"""Linear frequency-domain filters: multi-delay (MDF) echo filter and GSC beamformer.

Every function here is written against the array protocol shared by numpy
and torch (elementwise arithmetic, ``conj`` and ``sum``), so the same code
runs inside the autograd-traced adaptation loop and in plain numpy checks.
Shapes carry any number of leading batch axes; the last axis is frequency.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .signal import FrameConfig


def _rank_check(name, arr, ndim_tail):
    if arr.ndim < ndim_tail:
        raise ValueError(f"{name} needs at least {ndim_tail} axes, got shape {tuple(arr.shape)}")


def mdf_forward(theta, U, d_spec):
    """Apply the multi-delay filter.

    ``theta`` and ``U`` are ``[..., B, K]`` (``U[..., 0, :]`` is the newest
    far-end frame), ``d_spec`` is ``[..., K]``. Returns ``(y_spec, e_spec)``
    with ``y = sum_b theta[b] * U[b]`` and ``e = d - y``.
    """
    _rank_check("theta", theta, 2)
    if tuple(theta.shape[-2:]) != tuple(U.shape[-2:]) or U.shape[-1] != d_spec.shape[-1]:
        raise ValueError(
            f"shape mismatch: theta {tuple(theta.shape)}, U {tuple(U.shape)}, d {tuple(d_spec.shape)}"
        )
    y = (theta * U).sum(-2)
    return y, d_spec - y


def push_far_end(U, u_spec):
    """Shift the delay line by one block and insert ``u_spec`` as the newest entry."""
    if U.shape[-1] != u_spec.shape[-1]:
        raise ValueError(f"bin mismatch: {tuple(U.shape)} vs {tuple(u_spec.shape)}")
    if isinstance(U, np.ndarray):
        return np.concatenate([u_spec[..., None, :], U[..., :-1, :]], axis=-2)
    import torch

    return torch.cat([u_spec.unsqueeze(-2), U[..., :-1, :]], dim=-2)


def block_partition(w: np.ndarray, n_blocks: int, cfg: FrameConfig) -> np.ndarray:
    """MDF weights that reproduce the time-domain FIR ``w`` exactly.

    Block ``b`` holds taps ``w[b*R:(b+1)*R]`` zero-padded to N samples, so the
    last R samples of each circular block convolution are alias free.
    """
    w = np.asarray(w, dtype=np.float64)
    r = cfg.hop
    if w.shape[-1] > n_blocks * r:
        raise ValueError(f"{w.shape[-1]} taps do not fit {n_blocks} blocks of {r}")
    padded = np.zeros(w.shape[:-1] + (n_blocks * r,))
    padded[..., : w.shape[-1]] = w
    blocks = np.zeros(w.shape[:-1] + (n_blocks, cfg.fft_len))
    blocks[..., :r] = padded.reshape(w.shape[:-1] + (n_blocks, r))
    return np.fft.rfft(blocks, axis=-1)


@dataclass
class MdfParams:
    weights: np.ndarray  # [B, K] complex

    def __post_init__(self):
        w = np.asarray(self.weights)
        if w.ndim != 2:
            raise ValueError(f"MDF weights must be [B, K], got {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ValueError("MDF weights must be finite")

    @classmethod
    def zeros(cls, n_blocks: int = 8, cfg: FrameConfig = FrameConfig()):
        return cls(np.zeros((n_blocks, cfg.bins), dtype=np.complex128))


def steering_vector(delays, cfg: FrameConfig = FrameConfig(), sample_rate: int = 16000):
    """Far-field steering vector ``v[m, k] = exp(-2j pi f_k delay_m)``.

    ``delays`` are in seconds (relative to the array reference point). Every
    entry has unit modulus, hence ``v^H v = M`` per bin.
    """
    delays = np.asarray(delays, dtype=np.float64)
    freqs = np.fft.rfftfreq(cfg.fft_len, 1.0 / sample_rate)
    return np.exp(-2j * np.pi * delays[..., :, None] * freqs)


def fixed_beam(v, U):
    """Delay-and-sum beam ``v^H U / M`` per bin."""
    m = v.shape[-2]
    return (v.conj() * U).sum(-2) / m


def blocking_projection(v, U):
    """``(I - v v^H / M) U``: removes the component along the steering direction."""
    return U - v * fixed_beam(v, U)[..., None, :]


def gsc_forward(theta, U_mics, v):
    """Single-block frequency-domain GSC output ``y_fb - theta^H Z`` per bin.

    ``theta``, ``U_mics`` and ``v`` are ``[..., M, K]``. The adaptive branch
    filters all M projected channels; one of them is linearly redundant.
    """
    _rank_check("U_mics", U_mics, 2)
    if tuple(theta.shape[-2:]) != tuple(U_mics.shape[-2:]) or tuple(v.shape[-2:]) != tuple(U_mics.shape[-2:]):
        raise ValueError(
            f"shape mismatch: theta {tuple(theta.shape)}, U {tuple(U_mics.shape)}, v {tuple(v.shape)}"
        )
    y_fb = fixed_beam(v, U_mics)
    z = U_mics - v * y_fb[..., None, :]
    return y_fb - (theta.conj() * z).sum(-2)


@dataclass
class GscParams:
    weights: np.ndarray  # [M, K] complex
    steering: np.ndarray  # [M, K] complex

    def __post_init__(self):
        v = np.asarray(self.steering)
        if np.asarray(self.weights).shape != v.shape:
            raise ValueError("weights and steering vector must share shape [M, K]")
        norm = np.sum(np.abs(v) ** 2, axis=0)
        if not np.allclose(norm, v.shape[0], atol=1e-6):
            raise ValueError("steering vector must satisfy v^H v = M in every bin")

    @property
    def mics(self) -> int:
        return self.steering.shape[0]
