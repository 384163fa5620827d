"""Per-frame multi-step predict/update orchestration.

A frame runs ``C`` predict iterations (filter, features, optimizer, ``theta += delta``)
followed, in update modes, by one more filter pass with the freshest weights.
The frame's output is windowed with a periodic Hann window and overlap-added.

For the echo canceller the output frame covers the 2R most recent samples and
is alias free: its newer half is the usual overlap-save segment and its older
half re-filters the previous frame's delay line with the *current* weights.
Overlap-adding two consecutive frames therefore cross-fades between the old
and the new weights on identical samples instead of splicing hard at block
boundaries. With fixed weights the output equals the exact linear residual.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from typing import Any, NamedTuple

import numpy as np
import torch

from .filters import fixed_beam, mdf_forward
from .neural import NonFiniteError
from .signal import FrameConfig


@dataclass(frozen=True)
class StepMode:
    """``predict_iters`` optimizer steps per frame, plus an optional final update pass."""

    predict_iters: int = 1
    final_update: bool = False

    def __post_init__(self):
        if self.predict_iters < 1:
            raise ValueError("at least one predict iteration per frame is required")

    @classmethod
    def parse(cls, name: str) -> "StepMode":
        m = re.fullmatch(r"(P|PU)(?:x(\d+))?", name.strip())
        if not m:
            raise ValueError(f"unknown step mode {name!r} (expected P, PU, PUx<C> or Px<C>)")
        return cls(int(m.group(2) or 1), m.group(1) == "PU")

    @property
    def name(self) -> str:
        base = "PU" if self.final_update else "P"
        return base if self.predict_iters == 1 else f"{base}x{self.predict_iters}"

    def __str__(self):
        return self.name


class FrameView(NamedTuple):
    """What an optimizer sees during one predict iteration."""

    x: torch.Tensor  # regressor: MDF delay line [b, B, K] or blocked channels [b, M, K]
    u: torch.Tensor  # input feature [b, n_u, K]
    e: torch.Tensor  # error spectrum [b, K]
    theta: torch.Tensor  # current weights [b, P, K]
    hermitian: bool


class NullOptimizer:
    """Emits zero updates; the filter keeps its initial weights."""

    name = "null"

    def init_state(self, task, batch, dtype, device=None):
        return ()

    def step(self, state, view):
        return torch.zeros_like(view.theta), state


@dataclass
class StreamState:
    theta: torch.Tensor
    opt_state: tuple
    history: torch.Tensor  # [b, channels, N - R] raw input tail
    spectra: torch.Tensor  # [b, B, K] previous far-end spectra, newest first (empty for GSC)
    ola: torch.Tensor  # [b, N - R]
    frame_index: int = 0

    def detach(self) -> "StreamState":
        det = lambda t: t.detach() if isinstance(t, torch.Tensor) else t
        return replace(self, theta=det(self.theta), opt_state=tuple(det(s) for s in self.opt_state),
                       history=det(self.history), spectra=det(self.spectra), ola=det(self.ola))

    def clone(self) -> "StreamState":
        cl = lambda t: t.clone() if isinstance(t, torch.Tensor) else t
        return replace(self, theta=cl(self.theta), opt_state=tuple(cl(s) for s in self.opt_state),
                       history=cl(self.history), spectra=cl(self.spectra), ola=cl(self.ola))

    def to_dict(self) -> dict[str, Any]:
        out = {"theta": self.theta, "history": self.history, "spectra": self.spectra,
               "ola": self.ola, "frame_index": self.frame_index}
        for i, s in enumerate(self.opt_state):
            out[f"opt_state.{i}"] = s
        return {k: (v.detach().cpu().numpy() if isinstance(v, torch.Tensor) else v) for k, v in out.items()}

    @classmethod
    def from_dict(cls, d) -> "StreamState":
        t = lambda v: torch.from_numpy(np.array(v))
        n_opt = sum(1 for k in d if k.startswith("opt_state."))
        return cls(t(d["theta"]), tuple(t(d[f"opt_state.{i}"]) for i in range(n_opt)),
                   t(d["history"]), t(d["spectra"]), t(d["ola"]), int(d["frame_index"]))


class _Task:
    cfg: FrameConfig
    hermitian: bool
    n_channels: int
    n_weights: int
    n_features: int
    n_delay: int = 0

    def __init__(self, cfg: FrameConfig):
        if cfg.fft_len != 2 * cfg.hop:
            raise ValueError("the Hann overlap-add synthesis needs fft_len == 2 * hop")
        self.cfg = cfg
        self._win = {}

    def window(self, dtype, device=None):
        key = (dtype, device)
        if key not in self._win:
            n = self.cfg.fft_len
            self._win[key] = (0.5 - 0.5 * torch.cos(2 * torch.pi * torch.arange(n, dtype=torch.float64) / n)).to(dtype=dtype, device=device)
        return self._win[key]

    def init_state(self, optimizer, batch: int, dtype=torch.float32, theta0=None, device=None) -> StreamState:
        cdtype = torch.complex128 if dtype == torch.float64 else torch.complex64
        cfg = self.cfg
        if theta0 is None:
            theta = torch.zeros((batch, self.n_weights, cfg.bins), dtype=cdtype, device=device)
        else:
            theta = torch.as_tensor(theta0).to(dtype=cdtype, device=device)
            theta = theta.expand(batch, self.n_weights, cfg.bins).clone()
        return StreamState(
            theta=theta,
            opt_state=tuple(optimizer.init_state(self, batch, cdtype, device)),
            history=torch.zeros((batch, self.n_channels, cfg.overlap), dtype=dtype, device=device),
            spectra=torch.zeros((batch, self.n_delay, cfg.bins), dtype=cdtype, device=device),
            ola=torch.zeros((batch, cfg.overlap), dtype=dtype, device=device),
        )

    def _frames(self, state: StreamState, x: torch.Tensor):
        """Overlap-save frames and their spectra for the new samples ``x [b, C, T]``."""
        cfg = self.cfg
        if x.shape[-1] % cfg.hop:
            raise ValueError(f"signal length {x.shape[-1]} is not a multiple of the hop {cfg.hop}")
        if x.shape[1] != self.n_channels:
            raise ValueError(f"expected {self.n_channels} input channels, got {x.shape[1]}")
        full = torch.cat([state.history, x.to(state.history.dtype)], dim=-1)
        frames = full.unfold(-1, cfg.fft_len, cfg.hop)  # [b, C, T/R, N]
        return frames, torch.fft.rfft(frames, dim=-1), full[..., -cfg.overlap:]


class AecTask(_Task):
    """Multi-delay echo canceller: channels ``[far_end, mixture]``.

    ``u_feature`` picks what the optimizer sees of the far end: the whole
    per-bin delay line (``"line"``, B values, so the update for every block
    sees its own regressor) or only the newest frame (``"newest"``).
    """

    hermitian = False
    n_channels = 2
    U_FEATURES = ("line", "newest")

    def __init__(self, cfg: FrameConfig = FrameConfig(), n_blocks: int = 8, u_feature: str = "line"):
        super().__init__(cfg)
        if u_feature not in self.U_FEATURES:
            raise ValueError(f"u_feature must be one of {self.U_FEATURES}, got {u_feature!r}")
        self.n_blocks = self.n_weights = self.n_delay = n_blocks
        self.u_feature = u_feature
        self.n_features = (2 * n_blocks + 1) if u_feature == "line" else (2 + n_blocks)

    def prepare(self, state: StreamState, x: torch.Tensor):
        frames, spec, history = self._frames(state, x)
        b = self.n_blocks
        # oldest first: previous spectra reversed, then the new far-end spectra
        line = torch.cat([state.spectra.flip(1), spec[:, 0]], dim=1)
        new_spectra = line[:, -b:].flip(1)
        return {"line": line, "D": spec[:, 1], "d": frames[:, 1]}, history, new_spectra

    def frame(self, pre, t):
        b = self.n_blocks
        U = pre["line"][:, t: t + b + 1].flip(1)  # newest first, B + 1 entries
        return {"U": U, "D": pre["D"][:, t], "d": pre["d"][:, t]}

    def view(self, fr, e, theta):
        U = fr["U"][:, : self.n_blocks]
        return FrameView(U, U if self.u_feature == "line" else U[:, :1], e, theta, False)

    def predict(self, theta, fr):
        cfg = self.cfg
        _, e = mdf_forward(theta, fr["U"][:, : self.n_blocks], fr["D"])
        valid = torch.fft.irfft(e, n=cfg.fft_len, dim=-1)[..., cfg.hop:]
        e_feat = torch.fft.rfft(torch.nn.functional.pad(valid, (cfg.hop, 0)), dim=-1)
        return e_feat, valid

    def output(self, theta, fr, cache=None):
        cfg = self.cfg
        y_old = torch.fft.irfft((theta * fr["U"][:, 1:]).sum(-2), n=cfg.fft_len, dim=-1)[..., cfg.hop:]
        first = fr["d"][..., : cfg.hop] - y_old
        if cache is None:
            _, cache = self.predict(theta, fr)
        return torch.cat([first, cache], dim=-1)


class GscTask(_Task):
    """Single-block frequency-domain GSC beamformer over ``M`` microphones."""

    hermitian = True

    def __init__(self, steering, cfg: FrameConfig = FrameConfig()):
        super().__init__(cfg)
        self.steering = torch.as_tensor(steering)
        if self.steering.ndim == 2:
            self.steering = self.steering.unsqueeze(0)
        self.n_channels = self.n_weights = self.steering.shape[-2]
        self.n_features = 2 * self.n_channels + 1

    def prepare(self, state: StreamState, x: torch.Tensor):
        _, spec, history = self._frames(state, x)
        U = spec.transpose(1, 2)  # [b, T, M, K]
        v = self.steering.to(U.dtype)[:, None]
        y_fb = fixed_beam(v, U)
        Z = U - v * y_fb[..., None, :]
        return {"y": y_fb, "Z": Z}, history, state.spectra

    def frame(self, pre, t):
        return {"y": pre["y"][:, t], "Z": pre["Z"][:, t]}

    def view(self, fr, e, theta):
        return FrameView(fr["Z"], fr["Z"], e, theta, True)

    def predict(self, theta, fr):
        e = fr["y"] - (theta.conj() * fr["Z"]).sum(-2)
        return e, e

    def output(self, theta, fr, cache=None):
        if cache is None:
            cache, _ = self.predict(theta, fr)
        return torch.fft.irfft(cache, n=self.cfg.fft_len, dim=-1)


def frame_step(task, optimizer, mode: StepMode, theta, opt_state, ola, fr):
    """Algorithm core for one frame. Returns ``(samples [b, R], theta, opt_state, ola)``."""
    cache = None
    used = theta
    for _ in range(mode.predict_iters):
        e, cache = task.predict(theta, fr)
        delta, opt_state = optimizer.step(opt_state, task.view(fr, e, theta))
        used = theta
        theta = theta + delta
    if mode.final_update:
        out = task.output(theta, fr)
    else:
        out = task.output(used, fr, cache)
    hop = task.cfg.hop
    acc = out * task.window(out.dtype, out.device)
    return acc[..., :hop] + ola, theta, opt_state, acc[..., hop:]


def _finite(*tensors) -> bool:
    for t in tensors:
        if t.is_complex():
            t = torch.view_as_real(t)
        if not bool(torch.isfinite(t).all()):
            return False
    return True


def _state_before(task, state, x, pre, t, theta, opt_state, ola) -> StreamState:
    """The stream state right before frame ``t`` of the current call: the last good state."""
    hop, overlap = task.cfg.hop, task.cfg.overlap
    history = torch.cat([state.history, x.to(state.history.dtype)], dim=-1)[..., t * hop: t * hop + overlap]
    spectra = state.spectra
    if task.n_delay:
        spectra = pre["line"][:, t: t + task.n_delay].flip(1)
    return StreamState(theta, opt_state, history, spectra, ola, state.frame_index + t)


def run_frames(task, optimizer, mode: StepMode, state: StreamState, x: torch.Tensor, *, check_finite: bool = True):
    """Stream ``x [b, C, T]`` (T a multiple of the hop) from ``state``.

    Returns ``(output [b, T], new_state)``. On a non-finite frame a
    :class:`NonFiniteError` is raised; its ``state`` attribute holds the last
    good state.
    """
    pre, history, spectra = task.prepare(state, x)
    n_frames = x.shape[-1] // task.cfg.hop
    theta, opt_state, ola = state.theta, state.opt_state, state.ola
    chunks = []
    for t in range(n_frames):
        fr = task.frame(pre, t)
        try:
            out, theta_n, opt_n, ola_n = frame_step(task, optimizer, mode, theta, opt_state, ola, fr)
        except NonFiniteError as err:
            err.frame = state.frame_index + t
            err.state = _state_before(task, state, x, pre, t, theta, opt_state, ola)
            raise
        if check_finite and not _finite(out, theta_n):
            err = NonFiniteError("non-finite filter weights or output", state.frame_index + t)
            err.state = _state_before(task, state, x, pre, t, theta, opt_state, ola)
            raise err
        theta, opt_state, ola = theta_n, opt_n, ola_n
        chunks.append(out)
    out = torch.cat(chunks, dim=-1) if chunks else x.new_zeros(x.shape[0], 0)
    new_state = StreamState(theta, opt_state, history, spectra, ola, state.frame_index + n_frames)
    return out, new_state


def process_frame(task, state: StreamState, optimizer, mode: StepMode, *samples):
    """Consume one hop of samples per input channel; returns ``(samples [b, R], state')``.

    AEC takes ``(u_samples, d_samples)``; GSC takes one ``[b, M, R]`` block.
    """
    if len(samples) == 1:
        x = torch.as_tensor(samples[0])
    else:
        x = torch.stack([torch.as_tensor(s) for s in samples], dim=-2)
    if x.ndim == 2:
        x = x.unsqueeze(0)
    if x.shape[-1] != task.cfg.hop:
        raise ValueError(f"expected {task.cfg.hop} samples per channel, got {x.shape[-1]}")
    return run_frames(task, optimizer, mode, state, x)


def run_sequence(task, optimizer, mode: StepMode, x, *, state: StreamState | None = None,
                 theta0=None, dtype=torch.float64, check_finite: bool = True):
    """Process whole signals ``x [b, C, T]`` from a zero state (or ``state``).

    ``T`` is zero-padded up to a multiple of the hop and the output trimmed
    back to ``T``; to resume bit-exactly, split only at multiples of the hop.
    The output lags the input by ``task.cfg.latency`` samples.
    """
    x = torch.as_tensor(x)
    if x.ndim == 2:
        x = x.unsqueeze(0)
    if state is None:
        state = task.init_state(optimizer, x.shape[0], dtype=dtype, theta0=theta0)
    x = x.to(state.history.dtype)
    t = x.shape[-1]
    pad = (-t) % task.cfg.hop
    if pad:
        x = torch.nn.functional.pad(x, (0, pad))
    out, state = run_frames(task, optimizer, mode, state, x, check_finite=check_finite)
    return out[..., :t], state
