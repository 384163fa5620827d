"""Analytic FLOP counts and single-core real-time-factor measurement.

Counting conventions: one real FFT of length N costs ``5 N log2 N``; a complex
multiply-add costs 8 flops, a complex add 2, a real multiply or add 1; a
transcendental (asinh, sigmoid, tanh) counts as 4. Every filter pass is
counted, including the duplicated final pass of the update modes.
"""

from __future__ import annotations

import math
import platform
import statistics
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .loop import StepMode, run_sequence
from .neural import GROUP, SIZES
from .signal import FrameConfig

CMAC = 8
CADD = 2
TRANSC = 4


def fft_flops(n: int) -> float:
    return 5.0 * n * math.log2(n)


@dataclass
class CostBreakdown:
    stages: dict[str, float] = field(default_factory=dict)

    def add(self, stage: str, flops: float):
        self.stages[stage] = self.stages.get(stage, 0.0) + float(flops)

    @property
    def flops(self) -> float:
        return sum(self.stages.values())

    @property
    def mflops(self) -> float:
        return self.flops / 1e6


def learned_flops(hidden: int, n_in: int, n_out: int, bins: int) -> float:
    """One learned-optimizer step over all bands (encode, down, 2 GRU layers, up, theta update)."""
    h, f, p = hidden, n_in, n_out
    groups = -(-bins // GROUP)
    encode = bins * f * 2 * TRANSC
    down = h * GROUP * f * CMAC + h * CADD
    # per layer: two 3H x H products, bias adds, gates, candidate and blend
    gru = 2 * 3 * h * h * CMAC + 2 * 3 * h * CADD + 2 * h * (2 + TRANSC) + h * (6 + CADD + 2 * TRANSC) + h * (3 * 6)
    up = GROUP * p * h * CMAC + GROUP * p * CADD
    return encode + groups * (down + 2 * gru + up)


def _classic_flops(name: str, task: str, n_w: int, bins: int) -> float:
    bk = n_w * bins
    if name == "nlms":
        return bk * (4 + 6 + 2) + bins * 4
    if name == "kf":
        return bk * (3 + 4 + 4 + 4 + 6 + 6 + 4) + bins * 6
    if name == "rls":
        m = n_w
        per_bin = 3 * m * m * CMAC + 2 * m * CMAC + 6 * m + 4 * m * m + 2 * m**3 * CMAC
        return bins * per_bin
    if name == "null":
        return 0.0
    raise ValueError(f"unknown optimizer {name!r}")


def count_flops(task: str, optimizer: str, mode, *, cfg: FrameConfig = FrameConfig(),
                n_blocks: int = 8, mics: int = 4, u_feature: str = "line") -> CostBreakdown:
    """Per-frame cost of ``optimizer`` (``S``/``M``/``L`` or a baseline name) on ``task`` in ``mode``."""
    mode = StepMode.parse(mode) if isinstance(mode, str) else mode
    k, n = cfg.bins, cfg.fft_len
    c = CostBreakdown()
    if task == "aec":
        n_w = n_blocks
        n_feat = 2 * n_blocks + 1 if u_feature == "line" else 2 + n_blocks
        c.add("analysis", 2 * fft_flops(n))
        filt = n_w * k * CMAC + k * CADD
        predict = filt + 2 * fft_flops(n)  # residual to time domain and masked error back
        final = filt + fft_flops(n)
        output = n_w * k * CMAC + fft_flops(n) + cfg.hop  # older half re-filtered with current weights
    elif task == "gsc":
        n_w, n_feat = mics, 2 * mics + 1
        c.add("analysis", mics * fft_flops(n))
        c.add("fixed_beam", 2 * mics * k * CMAC + mics * k * CADD)
        predict = mics * k * CMAC + k * CADD
        final = predict
        output = fft_flops(n)
    else:
        raise ValueError(f"unknown task {task!r}")
    if optimizer in SIZES:
        opt = learned_flops(SIZES[optimizer], n_feat, n_w, k)
    else:
        opt = _classic_flops(optimizer, task, n_w, k)
    c.add("predict", mode.predict_iters * predict)
    c.add("optimizer", mode.predict_iters * (opt + n_w * k * CADD))
    if mode.final_update:
        c.add("update_pass", final)
    c.add("synthesis", output + n + cfg.hop)
    return c


def cpu_identifier() -> str:
    try:
        for line in open("/proc/cpuinfo"):
            if line.startswith("model name"):
                return line.split(":", 1)[1].strip()
    except OSError:
        pass
    return platform.processor() or platform.machine()


def measure_rtf(task, optimizer, mode, x, *, runs: int = 5, warmup: int = 1,
                sample_rate: int = 16000, dtype=torch.float32) -> float:
    """Median over ``runs`` of wall-clock time / audio duration, single thread, warm-up excluded."""
    mode = StepMode.parse(mode) if isinstance(mode, str) else mode
    x = torch.as_tensor(np.asarray(x))
    if x.ndim == 2:
        x = x.unsqueeze(0)
    duration = x.shape[-1] / sample_rate
    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        times = []
        with torch.no_grad():
            for i in range(warmup + runs):
                t0 = time.perf_counter()
                run_sequence(task, optimizer, mode, x, dtype=dtype, check_finite=False)
                if i >= warmup:
                    times.append(time.perf_counter() - t0)
    finally:
        torch.set_num_threads(threads)
    return statistics.median(times) / duration


@dataclass
class CostReport:
    mflops_per_frame: float
    rtf: float | None
    params: int
    cpu: str = field(default_factory=cpu_identifier)
