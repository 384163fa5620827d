"""Input validation for user-facing entry points."""

from __future__ import annotations

import numpy as np


def check_signals(X, *, n_channels: int | None = None, name: str = "X") -> np.ndarray:
    """Coerce to a finite float64 array ``[n_signals, channels, samples]``.

    A single ``[channels, samples]`` array is promoted to a batch of one.
    """
    X = np.asarray(X)
    if X.dtype.kind == "c":
        raise TypeError(f"{name} must be real-valued")
    X = X.astype(np.float64, copy=False)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3:
        raise ValueError(f"{name} must be [n, channels, samples], got shape {X.shape}")
    if X.shape[-1] == 0:
        raise ValueError(f"{name} has no samples")
    if n_channels is not None and X.shape[1] != n_channels:
        raise ValueError(f"{name} needs {n_channels} channels, got {X.shape[1]}")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains NaN or infinity")
    return X


def check_targets(y, X: np.ndarray, *, name: str = "y") -> np.ndarray:
    """Targets ``[n_signals, samples]`` matching ``X``."""
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[None]
    if y.shape != (X.shape[0], X.shape[-1]):
        raise ValueError(f"{name} must have shape {(X.shape[0], X.shape[-1])}, got {y.shape}")
    if not np.all(np.isfinite(y)):
        raise ValueError(f"{name} contains NaN or infinity")
    return y


def check_steering(v, mics: int, bins: int, n_signals: int | None = None) -> np.ndarray:
    """Steering vectors ``[M, K]`` or ``[n, M, K]`` with ``v^H v = M`` per bin."""
    if v is None:
        raise ValueError("the beamforming task needs a steering vector")
    v = np.asarray(v, dtype=np.complex128)
    if v.shape[-2:] != (mics, bins):
        raise ValueError(f"steering vector must end in {(mics, bins)}, got {v.shape}")
    if v.ndim == 3 and n_signals is not None and v.shape[0] != n_signals:
        raise ValueError(f"got {v.shape[0]} steering vectors for {n_signals} signals")
    if not np.allclose(np.sum(np.abs(v) ** 2, axis=-2), mics, atol=1e-6):
        raise ValueError("steering vector must satisfy v^H v = M in every bin")
    return v


def check_choice(value, choices, name: str):
    if value not in choices:
        raise ValueError(f"{name} must be one of {sorted(choices)}, got {value!r}")
    return value
