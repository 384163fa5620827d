"""Block-streaming primitives: framing, one-sided DFT, Hann synthesis and WAV I/O."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile

SAMPLE_RATE = 16000


@dataclass(frozen=True)
class FrameConfig:
    """Frame geometry shared by every stage of the pipeline.

    ``fft_len`` samples are analysed per frame, ``hop`` new samples arrive per
    frame and the one-sided spectrum has ``fft_len // 2 + 1`` bins.
    """

    fft_len: int = 512
    hop: int = 256

    def __post_init__(self):
        n, r = self.fft_len, self.hop
        if n < 2 or n & (n - 1):
            raise ValueError(f"fft_len must be a power of two, got {n}")
        if r < 1 or n % r:
            raise ValueError(f"hop {r} must divide fft_len {n}")

    @property
    def bins(self) -> int:
        return self.fft_len // 2 + 1

    @property
    def overlap(self) -> int:
        return self.fft_len - self.hop

    @property
    def latency(self) -> int:
        """Delay in samples between an input sample and its synthesized output."""
        return self.overlap


def push_frame(buffer: np.ndarray, new_samples: np.ndarray) -> np.ndarray:
    """Shift ``new_samples`` into a length-N buffer and return the new frame.

    The input buffer is not modified.
    """
    buffer = np.asarray(buffer)
    new_samples = np.asarray(new_samples)
    n, r = buffer.shape[-1], new_samples.shape[-1]
    if r > n or buffer.shape[:-1] != new_samples.shape[:-1]:
        raise ValueError(f"cannot push {new_samples.shape} samples into buffer {buffer.shape}")
    return np.concatenate([buffer[..., r:], new_samples], axis=-1)


class StreamBuffer:
    """Overlap-save input buffer holding the most recent ``fft_len`` samples."""

    def __init__(self, cfg: FrameConfig, channels: int | None = None, dtype=np.float64):
        self.cfg = cfg
        shape = (cfg.fft_len,) if channels is None else (channels, cfg.fft_len)
        self.frame = np.zeros(shape, dtype=dtype)

    def push(self, new_samples) -> np.ndarray:
        new_samples = np.asarray(new_samples, dtype=self.frame.dtype)
        if new_samples.shape[-1] != self.cfg.hop:
            raise ValueError(f"expected {self.cfg.hop} samples, got {new_samples.shape[-1]}")
        self.frame = push_frame(self.frame, new_samples)
        return self.frame.copy()


def dft_forward(frame: np.ndarray) -> np.ndarray:
    """One-sided DFT ``X_k = sum_n x[n] exp(-2j pi k n / N)`` along the last axis."""
    frame = np.asarray(frame)
    if np.iscomplexobj(frame):
        raise ValueError("time frames must be real")
    n = frame.shape[-1]
    if n < 2 or n & (n - 1):
        raise ValueError(f"frame length must be a power of two, got {n}")
    return np.fft.rfft(frame, axis=-1)


def dft_inverse(spec: np.ndarray, atol: float = 1e-9) -> np.ndarray:
    """Inverse of :func:`dft_forward`. The DC and Nyquist bins must be real."""
    spec = np.asarray(spec)
    scale = max(1.0, float(np.max(np.abs(spec), initial=0.0)))
    ends = np.abs(spec[..., 0].imag).max(initial=0.0), np.abs(spec[..., -1].imag).max(initial=0.0)
    if max(ends) > atol * scale:
        raise ValueError("DC and Nyquist bins of a real signal's spectrum must be real")
    n = 2 * (spec.shape[-1] - 1)
    return np.fft.irfft(spec, n=n, axis=-1)


def hann(n: int) -> np.ndarray:
    """Periodic Hann window; sums to exactly one at hop ``n // 2``."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def ola_synthesize(out_frame: np.ndarray, ola_buffer: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Window a finished frame, overlap-add it, and emit ``N - len(ola_buffer)`` samples.

    Returns ``(samples, new_ola_buffer)``.
    """
    out_frame = np.asarray(out_frame)
    n = out_frame.shape[-1]
    tail = ola_buffer.shape[-1]
    acc = out_frame * hann(n)
    acc[..., :tail] += ola_buffer
    hop = n - tail
    return acc[..., :hop], acc[..., hop:].copy()


class OlaBuffer:
    """Stateful wrapper around :func:`ola_synthesize`."""

    def __init__(self, cfg: FrameConfig, channels: int | None = None, dtype=np.float64):
        if cfg.fft_len != 2 * cfg.hop:
            raise ValueError("Hann overlap-add needs 50% overlap")
        shape = (cfg.overlap,) if channels is None else (channels, cfg.overlap)
        self.tail = np.zeros(shape, dtype=dtype)

    def __call__(self, out_frame) -> np.ndarray:
        emitted, self.tail = ola_synthesize(out_frame, self.tail)
        return emitted


def frame_signal(x: np.ndarray, cfg: FrameConfig) -> np.ndarray:
    """All overlap-save frames of ``x`` as produced by repeated :func:`push_frame`.

    ``x`` is zero-padded to a whole number of hops; frame ``t`` ends at sample
    ``(t + 1) * hop``.
    """
    x = np.asarray(x)
    t = -(-x.shape[-1] // cfg.hop)
    padded = np.zeros(x.shape[:-1] + (cfg.overlap + t * cfg.hop,), dtype=x.dtype)
    padded[..., cfg.overlap: cfg.overlap + x.shape[-1]] = x
    idx = np.arange(t)[:, None] * cfg.hop + np.arange(cfg.fft_len)[None, :]
    return padded[..., idx]


def read_wav(path, *, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Read a 16-bit PCM or float WAV as float64, shape ``(channels, samples)``."""
    rate, data = wavfile.read(path)
    if rate != sample_rate:
        raise ValueError(f"{path}: sample rate {rate} != {sample_rate} (no resampling)")
    if data.dtype == np.int16:
        data = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        data = data.astype(np.float64) / 2147483648.0
    elif data.dtype.kind == "f":
        data = data.astype(np.float64)
    else:
        raise ValueError(f"{path}: unsupported sample format {data.dtype}")
    return np.atleast_2d(data.T) if data.ndim > 1 else data[None, :]


def write_wav(path, data: np.ndarray, *, sample_rate: int = SAMPLE_RATE, pcm16: bool = False):
    """Write ``(channels, samples)`` or ``(samples,)`` data; float32 unless ``pcm16``."""
    data = np.asarray(data, dtype=np.float64)
    out = data.T if data.ndim > 1 else data
    if pcm16:
        out = np.clip(np.round(out * 32768.0), -32768, 32767).astype(np.int16)
    else:
        out = out.astype(np.float32)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(path, sample_rate, out)
