"""Evaluation metrics: ERLE, SI-SDR and projection-based SIR/SAR. All values in dB, clamped to +-100."""

from __future__ import annotations

import numpy as np

CAP_DB = 100.0
GATE_DB = -40.0


def _clamp(db: float) -> float:
    return float(np.clip(db, -CAP_DB, CAP_DB))


def _ratio_db(num: float, den: float) -> float:
    if den <= 0.0:
        return CAP_DB if num > 0 else 0.0
    if num <= 0.0:
        return -CAP_DB
    return _clamp(10.0 * np.log10(num / den))


def align(reference, estimate, latency: int):
    """Drop the pipeline latency: pair ``reference[t]`` with ``estimate[t + latency]``."""
    reference = np.asarray(reference, dtype=np.float64)
    estimate = np.asarray(estimate, dtype=np.float64)
    if latency:
        n = min(reference.shape[-1], estimate.shape[-1] - latency)
        return reference[..., :n], estimate[..., latency: latency + n]
    n = min(reference.shape[-1], estimate.shape[-1])
    return reference[..., :n], estimate[..., :n]


def activity_mask(x, frame: int = 256, gate_db: float = GATE_DB) -> np.ndarray:
    """Per-sample mask of frames whose energy lies within ``gate_db`` of the loudest frame."""
    x = np.asarray(x, dtype=np.float64)
    n = -(-x.size // frame) * frame
    energy = (np.pad(x, (0, n - x.size)) ** 2).reshape(-1, frame).sum(1)
    peak = energy.max()
    if peak <= 0:
        return np.zeros(x.size, dtype=bool)
    active = energy >= peak * 10.0 ** (gate_db / 10.0)
    return np.repeat(active, frame)[: x.size]


def erle(d, e, *, latency: int = 0, far_end=None, exclude=None, frame: int = 256, gate_db: float = GATE_DB) -> float:
    """Echo return loss enhancement ``10 log10(mean d^2 / mean e^2)`` over far-end-active frames.

    ``e`` may lag ``d`` by ``latency`` samples. The activity gate is computed
    on ``far_end`` when given (else on ``d``); ``exclude`` masks out samples
    (e.g. near-end speech, for single-talk ERLE), indexed like ``d``.
    """
    d, e = align(d, e, latency)
    if not np.any(d):
        raise ValueError("ERLE is undefined for a silent mixture")
    gate_src = d if far_end is None else np.asarray(far_end, dtype=np.float64)[: d.size]
    mask = activity_mask(gate_src, frame, gate_db)[: d.size]
    if exclude is not None:
        mask &= ~np.asarray(exclude, dtype=bool)[: d.size]
    if not mask.any():
        raise ValueError("no far-end-active samples left to evaluate ERLE on")
    return _ratio_db(np.mean(d[mask] ** 2), np.mean(e[mask] ** 2))


def erle_ungated(d, e, *, latency: int = 0) -> float:
    d, e = align(d, e, latency)
    if not np.any(d):
        raise ValueError("ERLE is undefined for a silent mixture")
    return _ratio_db(np.mean(d**2), np.mean(e**2))


def si_sdr(s, e) -> float:
    """Scale-invariant SDR of estimate ``e`` against reference ``s``."""
    s = np.asarray(s, dtype=np.float64)
    e = np.asarray(e, dtype=np.float64)
    if s.shape != e.shape:
        raise ValueError(f"length mismatch: {s.shape} vs {e.shape}")
    ss = float(s @ s)
    if ss <= 0:
        raise ValueError("SI-SDR needs a nonzero reference")
    target = (float(e @ s) / ss) * s
    return _ratio_db(float(target @ target), float(np.sum((e - target) ** 2)))


def sir_sar(s, interference, e) -> tuple[float, float]:
    """Projection-based SIR and SAR.

    ``e`` is projected onto ``span{s}`` (target part) and onto
    ``span{s, interference...}``; the difference of the two projections is
    the interference part and what remains outside the joint span is the
    artifact part.
    """
    s = np.asarray(s, dtype=np.float64)
    e = np.asarray(e, dtype=np.float64)
    refs = np.atleast_2d(np.asarray(interference, dtype=np.float64))
    if not np.any(s) or not np.all(np.any(refs, axis=1)):
        raise ValueError("target and interference references must be nonzero")
    target = (float(e @ s) / float(s @ s)) * s
    basis = np.vstack([s, refs]).T
    coef, *_ = np.linalg.lstsq(basis, e, rcond=None)
    joint = basis @ coef
    e_interf = joint - target
    e_artif = e - joint
    t2 = float(target @ target)
    return _ratio_db(t2, float(e_interf @ e_interf)), _ratio_db(t2, float(e_artif @ e_artif))
