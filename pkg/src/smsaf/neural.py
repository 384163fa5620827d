"""Learned higher-order optimizer: banded down-coupling, two gated recurrent layers, banded up-coupling.

The network is complex valued. Each complex weight counts as one parameter,
which is the convention behind the nominal 5K / 16K / 57K model sizes.

Per frame and band of ``GROUP`` adjacent bins::

    x   = W_down . vec(encode(features of the 5 bins)) + b_down        (H)
    h1' = cgru(x,   h1)                                               (H)
    h2' = cgru(h1', h2)                                               (H)
    dlt = W_up . h2' + b_up                                           (5 bins x P weights)

with a complex GRU cell whose gates are ``sigmoid(Re a + Im a)`` and whose
candidate uses a split ``tanh`` on real and imaginary parts. Weights are
shared across bands, so nothing mixes between bands inside one step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

GROUP = 5
SIZES = {"S": 16, "M": 32, "L": 64}


class NonFiniteError(FloatingPointError):
    """A non-finite value appeared in the adaptation loop."""

    def __init__(self, message, frame=None):
        super().__init__(message if frame is None else f"frame {frame}: {message}")
        self.frame = frame


@dataclass(frozen=True)
class ModelSize:
    tag: str = "S"

    def __post_init__(self):
        if self.tag not in SIZES:
            raise ValueError(f"model size must be one of {sorted(SIZES)}, got {self.tag!r}")

    @property
    def hidden(self) -> int:
        return SIZES[self.tag]


@dataclass(frozen=True)
class NetShape:
    """Everything that fixes the parameter tensor shapes."""

    hidden: int
    n_inputs: int  # complex features per bin
    n_outputs: int  # complex updates per bin (B blocks or M channels)
    bins: int

    @property
    def groups(self) -> int:
        return -(-self.bins // GROUP)

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        h, f, p = self.hidden, self.n_inputs, self.n_outputs
        shapes = {"down.weight": (h, GROUP * f), "down.bias": (h,)}
        for layer in (1, 2):
            shapes[f"gru{layer}.weight_ih"] = (3 * h, h)
            shapes[f"gru{layer}.weight_hh"] = (3 * h, h)
            shapes[f"gru{layer}.bias_ih"] = (3 * h,)
            shapes[f"gru{layer}.bias_hh"] = (3 * h,)
        shapes["up.weight"] = (GROUP * p, h)
        shapes["up.bias"] = (p,)
        return shapes

    @property
    def n_params(self) -> int:
        return sum(math.prod(s) for s in self.param_shapes().values())


def param_count(hidden: int, n_inputs: int, n_outputs: int) -> int:
    """Closed form of :attr:`NetShape.n_params`."""
    h, f, p = hidden, n_inputs, n_outputs
    return 12 * h * h + (GROUP * f + 1 + 12 + GROUP * p) * h + p


def _unitary(n: int, gen: torch.Generator, dtype) -> torch.Tensor:
    a = torch.randn(n, n, generator=gen, dtype=torch.float64) + 1j * torch.randn(n, n, generator=gen, dtype=torch.float64)
    q, r = torch.linalg.qr(a)
    d = torch.diagonal(r)
    q = q * (d / d.abs())
    return q.to(dtype)


def _uniform(shape, bound, gen, dtype) -> torch.Tensor:
    re = (torch.rand(shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound
    im = (torch.rand(shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound
    return torch.complex(re, im).to(dtype)


def init_params(shape: NetShape, seed: int = 0, *, dtype=torch.complex64, out_scale: float = 0.01) -> dict[str, torch.Tensor]:
    """Deterministic initialization.

    Recurrent kernels are unitary per gate, input kernels uniform in
    ``+-1/sqrt(fan_in)`` (real and imaginary parts), biases zero. The
    up-coupling kernel is additionally scaled by ``out_scale`` so the first
    updates are small compared with typical echo-path weights.
    """
    gen = torch.Generator().manual_seed(int(seed))
    h = shape.hidden
    params = {}
    for name, shp in shape.param_shapes().items():
        if "bias" in name:
            params[name] = torch.zeros(shp, dtype=dtype)
        elif name.endswith("weight_hh"):
            params[name] = torch.cat([_unitary(h, gen, dtype) for _ in range(3)], dim=0)
        else:
            bound = 1.0 / math.sqrt(shp[1])
            if name == "up.weight":
                bound *= out_scale
            params[name] = _uniform(shp, bound, gen, dtype)
    return params


def flatten(params: dict[str, torch.Tensor]) -> torch.Tensor:
    """All parameters as one complex vector in a stable (sorted-name) order."""
    return torch.cat([params[k].reshape(-1) for k in sorted(params)])


def unflatten(flat: torch.Tensor, shape: NetShape) -> dict[str, torch.Tensor]:
    shapes = shape.param_shapes()
    expected = sum(math.prod(v) for v in shapes.values())
    if flat.numel() != expected:
        raise ValueError(f"flat vector has {flat.numel()} entries, expected {expected}")
    out, i = {}, 0
    for k in sorted(shapes):
        n = math.prod(shapes[k])
        out[k] = flat[i: i + n].reshape(shapes[k])
        i += n
    return out


def build_features(u_spec, e_spec, theta):
    """Stack ``[u_k, e_k, theta_k]`` per bin: ``[..., K, n_u + 1 + P]``.

    ``u_spec`` is ``[..., n_u, K]`` (the newest far-end spectrum for AEC, the
    blocked channels for GSC), ``e_spec`` ``[..., K]`` and ``theta`` ``[..., P, K]``.
    """
    return torch.cat([u_spec, e_spec.unsqueeze(-2), theta], dim=-2).transpose(-1, -2)


def encode(xi):
    """Map each complex value to ``[asinh(Re), asinh(Im)]`` (trailing axis of 2)."""
    return torch.stack([torch.asinh(xi.real), torch.asinh(xi.imag)], dim=-1)


def decode(enc):
    return torch.complex(torch.sinh(enc[..., 0]), torch.sinh(enc[..., 1]))


def _gate(a):
    return torch.sigmoid(a.real + a.imag)


def _ctanh(a):
    return torch.complex(torch.tanh(a.real), torch.tanh(a.imag))


def gru_cell(x, h, w_ih, w_hh, b_ih, b_hh):
    """Complex GRU cell; ``x`` and ``h`` are ``[..., H]``."""
    gi = x @ w_ih.transpose(0, 1) + b_ih
    gh = h @ w_hh.transpose(0, 1) + b_hh
    n_h = h.shape[-1]
    r = _gate(gi[..., :n_h] + gh[..., :n_h])
    z = _gate(gi[..., n_h: 2 * n_h] + gh[..., n_h: 2 * n_h])
    n = _ctanh(gi[..., 2 * n_h:] + r * gh[..., 2 * n_h:])
    return (1 - z) * n + z * h


def init_state(shape: NetShape, batch: int, dtype=torch.complex64, device=None) -> torch.Tensor:
    """Zero hidden state ``[batch, 2, groups, H]``."""
    return torch.zeros((batch, 2, shape.groups, shape.hidden), dtype=dtype, device=device)


def optimizer_step(params, psi, xi, *, check_finite: bool = True):
    """One learned-optimizer step.

    ``xi`` is ``[batch, K, F]`` raw (unencoded) features, ``psi`` the hidden
    state ``[batch, 2, groups, H]``. Returns ``(delta [batch, P, K], psi')``.
    """
    batch, k, f = xi.shape
    n_groups = psi.shape[-2]
    if params["down.weight"].shape[1] != GROUP * f:
        raise ValueError(f"network expects {params['down.weight'].shape[1] // GROUP} features per bin, got {f}")
    enc = torch.view_as_complex(encode(xi).contiguous())
    if params["down.weight"].dtype != enc.dtype:
        # run the net at stream precision, e.g. complex64 weights on a float64 stream
        params = {name: v.to(enc.dtype) for name, v in params.items()}
    pad = n_groups * GROUP - k
    if pad:
        enc = torch.nn.functional.pad(enc, (0, 0, 0, pad))
    x = enc.reshape(batch, n_groups, GROUP * f)
    x = x @ params["down.weight"].transpose(0, 1) + params["down.bias"]
    h1 = gru_cell(x, psi[:, 0], params["gru1.weight_ih"], params["gru1.weight_hh"],
                  params["gru1.bias_ih"], params["gru1.bias_hh"])
    h2 = gru_cell(h1, psi[:, 1], params["gru2.weight_ih"], params["gru2.weight_hh"],
                  params["gru2.bias_ih"], params["gru2.bias_hh"])
    if check_finite and not bool(torch.isfinite(torch.view_as_real(h2)).all() & torch.isfinite(torch.view_as_real(h1)).all()):
        bad = (~torch.isfinite(torch.view_as_real(torch.stack([h1, h2], 1)))).sum().item()
        raise NonFiniteError(f"learned optimizer hidden state has {bad} non-finite entries")
    p = params["up.bias"].shape[0]
    out = h2 @ params["up.weight"].transpose(0, 1)
    out = out.reshape(batch, n_groups * GROUP, p) + params["up.bias"]
    delta = out[:, :k].transpose(1, 2)
    return delta, torch.stack([h1, h2], dim=1)


class LearnedOptimizer:
    """Adapter exposing the learned network through the optimizer protocol."""

    name = "learned"

    def __init__(self, params: dict[str, torch.Tensor], shape: NetShape, *, check_finite: bool = True):
        self.params = params
        self.shape = shape
        self.check_finite = check_finite

    @classmethod
    def create(cls, size: str, task, seed: int = 0, dtype=torch.complex64, **kw):
        shape = net_shape_for(size, task)
        return cls(init_params(shape, seed, dtype=dtype, **kw), shape)

    @property
    def n_params(self) -> int:
        return self.shape.n_params

    def init_state(self, task, batch, dtype, device=None):
        return (init_state(self.shape, batch, dtype=dtype, device=device),)

    def step(self, state, view):
        xi = build_features(view.u, view.e, view.theta)
        delta, psi = optimizer_step(self.params, state[0], xi, check_finite=self.check_finite)
        return delta, (psi,)


def net_shape_for(size, task) -> NetShape:
    hidden = size if isinstance(size, int) else ModelSize(size).hidden
    return NetShape(hidden, task.n_features, task.n_weights, task.cfg.bins)


def size_tag(hidden: int) -> str:
    for tag, h in SIZES.items():
        if h == hidden:
            return tag
    return "X"


def to_numpy(params) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy() for k, v in params.items()}
