"""Hand-derived baseline optimizers: NLMS, diagonal frequency-domain Kalman, per-bin RLS.

The ``*_step`` functions are written with elementwise array arithmetic only,
so they accept numpy arrays or torch tensors. The classes wrap them in the
optimizer protocol used by :mod:`smsaf.loop`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np
import torch

log = logging.getLogger(__name__)


def _where(cond, a, b):
    if isinstance(cond, torch.Tensor):
        return torch.where(cond, a, b)
    return np.where(cond, a, b)


def _eye_like(pinv):
    m = pinv.shape[-1]
    if isinstance(pinv, torch.Tensor):
        return torch.eye(m, dtype=pinv.dtype, device=pinv.device)
    return np.eye(m, dtype=pinv.dtype)


@dataclass(frozen=True)
class NlmsState:
    step_size: float = 0.5
    eps: float = 1e-6

    def __post_init__(self):
        if not 0.0 < self.step_size < 2.0:
            raise ValueError(f"NLMS step size must lie in (0, 2), got {self.step_size}")
        if self.eps < 0:
            raise ValueError("NLMS regularizer must be non-negative")


def nlms_step(s: NlmsState, U, e_spec):
    """``delta[b, k] = step * conj(U[b, k]) e[k] / (sum_b |U[b, k]|^2 + eps)``."""
    power = (abs(U) ** 2).sum(-2)
    return s.step_size * U.conj() * (e_spec / (power + s.eps))[..., None, :]


@dataclass(frozen=True)
class KalmanState:
    """Diagonal state-space echo-path tracker, one variance per block and bin."""

    P: object  # [..., B, K] real
    psi_s: object  # [..., K] real, running estimate of |e|^2
    A: float = 0.999
    q_min: float = 1e-10
    ema: float = 0.9
    eps: float = 1e-12


def kalman_step(s: KalmanState, U, e_spec, theta):
    """One predict/correct cycle; returns ``(delta, new_state)``."""
    a2 = s.A * s.A
    P = a2 * s.P + (1.0 - a2) * abs(theta) ** 2 + s.q_min
    psi_s = s.ema * s.psi_s + (1.0 - s.ema) * abs(e_spec) ** 2
    u2 = abs(U) ** 2
    denom = (u2 * P).sum(-2) + psi_s + s.eps
    gain = P * U.conj() / denom[..., None, :]
    delta = gain * e_spec[..., None, :]
    # G U = P |U|^2 / denom is real and in [0, 1], so P stays non-negative
    P = (1.0 - P * u2 / denom[..., None, :]) * P
    return delta, replace(s, P=P, psi_s=psi_s)


@dataclass(frozen=True)
class RlsState:
    """Per-bin inverse correlation matrices ``[..., K, M, M]``."""

    Pinv: object
    gamma: float = 0.99
    delta: float = 1e-2

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"forgetting factor must lie in (0, 1), got {self.gamma}")

    @classmethod
    def initial(cls, shape, gamma=0.99, delta=1e-2, *, like=None):
        """``Pinv = I / delta`` for a leading ``shape`` of ``[..., K]``."""
        *lead, m = shape
        if isinstance(like, torch.Tensor):
            eye = torch.eye(m, dtype=like.dtype, device=like.device)
            pinv = eye.expand(*lead, m, m).clone() / delta
        else:
            pinv = np.broadcast_to(np.eye(m, dtype=np.complex128), (*lead, m, m)) / delta
        return cls(pinv, gamma=gamma, delta=delta)


def rls_step(s: RlsState, Z, e_spec):
    """Exponentially weighted RLS for outputs of the form ``d - theta^H z``.

    ``Z`` is ``[..., M, K]``. Returns ``(delta [..., M, K], new_state)``.
    Bins whose inverse correlation loses positive definiteness are reset to
    ``I / delta``.
    """
    z = Z.swapaxes(-1, -2)  # [..., K, M]
    pz = (s.Pinv * z[..., None, :]).sum(-1)
    denom = s.gamma + (z.conj() * pz).sum(-1)
    g = pz / denom[..., None]
    delta = (g * e_spec[..., :, None].conj()).swapaxes(-1, -2)
    zhp = (z.conj()[..., :, None] * s.Pinv).sum(-2)
    pinv = (s.Pinv - g[..., :, None] * zhp[..., None, :]) / s.gamma
    pinv = 0.5 * (pinv + pinv.swapaxes(-1, -2).conj())

    if isinstance(pinv, torch.Tensor):
        min_diag = pinv.diagonal(0, -2, -1).real.amin(-1)
    else:
        min_diag = np.diagonal(pinv, 0, -2, -1).real.min(-1)
    finite = abs(pinv).sum((-2, -1))
    bad = (min_diag <= 0) | ~(finite < float("inf"))
    if bool(bad.any()):
        log.warning("RLS: reset %d bin(s) that lost positive definiteness", int(bad.sum()))
        pinv = _where(bad[..., None, None], _eye_like(pinv) / s.delta, pinv)
    return delta, replace(s, Pinv=pinv)


class NLMS:
    """Normalized LMS over the MDF delay line (or GSC blocked channels)."""

    name = "nlms"

    def __init__(self, step_size: float = 0.5, eps: float = 1e-6):
        self.cfg = NlmsState(step_size, eps)

    def init_state(self, task, batch, dtype, device=None):
        return ()

    def step(self, state, view):
        delta = nlms_step(self.cfg, view.x, view.e)
        return (delta.conj() if view.hermitian else delta), state


class Kalman:
    """Diagonal frequency-domain Kalman filter for the MDF echo canceller."""

    name = "kf"

    def __init__(self, A: float = 0.999, q_min: float = 1e-10, ema: float = 0.9, p_init: float = 1.0):
        if not 0.0 < A <= 1.0:
            raise ValueError(f"transition factor must lie in (0, 1], got {A}")
        self.A, self.q_min, self.ema, self.p_init = A, q_min, ema, p_init

    def init_state(self, task, batch, dtype, device=None):
        real = torch.empty((), dtype=dtype).real.dtype
        P = torch.full((batch, task.n_weights, task.cfg.bins), self.p_init, dtype=real, device=device)
        psi = torch.zeros((batch, task.cfg.bins), dtype=real, device=device)
        return (P, psi)

    def step(self, state, view):
        s = KalmanState(state[0], state[1], A=self.A, q_min=self.q_min, ema=self.ema)
        # hermitian tasks filter with conj(theta); adapt w = conj(theta) instead
        theta = view.theta.conj() if view.hermitian else view.theta
        delta, s = kalman_step(s, view.x, view.e, theta)
        if view.hermitian:
            delta = delta.conj()
        return delta, (s.P, s.psi_s)


class RLS:
    """Per-bin recursive least squares over the GSC blocked channels.

    The blocked channels never excite the steering direction, so plain RLS
    lets ``Pinv`` grow like ``gamma**-t`` along ``v`` until round-off mixes it
    into the update. With ``pin_null=True`` (and a task that exposes a
    steering vector) that direction is held at its initial ``I / delta``
    value after every step.
    """

    name = "rls"

    def __init__(self, gamma: float = 0.99, delta: float = 1e-2, pin_null: bool = True):
        self.gamma, self.delta, self.pin_null = gamma, delta, pin_null
        RlsState(None, gamma, delta)

    def init_state(self, task, batch, dtype, device=None):
        # the inverse-correlation recursion is too fragile for single precision
        dtype = torch.complex128
        like = torch.zeros((), dtype=dtype, device=device)
        s = RlsState.initial((batch, task.cfg.bins, task.n_weights), self.gamma, self.delta, like=like)
        steering = getattr(task, "steering", None)
        if not self.pin_null or steering is None:
            return (s.Pinv,)
        v = torch.as_tensor(steering).to(dtype=dtype, device=device)
        v = v.expand(batch, *v.shape[-2:]).transpose(-1, -2)  # [b, K, M]
        vvh = v[..., :, None] * v.conj()[..., None, :] / v.shape[-1]
        return (s.Pinv, vvh)

    def step(self, state, view):
        s = RlsState(state[0], self.gamma, self.delta)
        wide = state[0].dtype
        delta, s = rls_step(s, view.x.to(wide), view.e.to(wide))
        delta = delta.to(view.theta.dtype)
        pinv = s.Pinv
        if len(state) > 1:
            vvh = state[1]
            proj = torch.eye(vvh.shape[-1], dtype=vvh.dtype, device=vvh.device) - vvh
            pinv = proj @ pinv @ proj + vvh / self.delta
        return (delta if view.hermitian else delta.conj()), (pinv,) + tuple(state[1:])
