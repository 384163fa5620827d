"""Tuned classical baselines and the model/baseline registry used by the CLI and the estimators.

The tuned values come from exhaustive grids over 60 validation AEC scenes and
30 validation GSC scenes (seeds 100000+), mode P, ranking by mean ERLE or
SI-SDR; grids were widened until the optimum sat strictly inside.
``NLMS`` regularizers are absolute and assume the generator's signal level
(far-end RMS 0.1).
"""

from __future__ import annotations

from .classic import NLMS, RLS, Kalman

TUNED = {
    "aec": {
        "nlms": {"step_size": 1.0, "eps": 30.0},
        "kf": {"A": 0.97, "q_min": 1e-3, "ema": 0.9, "p_init": 0.1},
    },
    "gsc": {
        "nlms": {"step_size": 0.05, "eps": 10.0},
        "rls": {"gamma": 0.999, "delta": 100.0},
    },
}

_CLASSES = {"nlms": NLMS, "kf": Kalman, "rls": RLS}
BASELINES = tuple(_CLASSES)
MODEL_SIZES = ("S", "M", "L")


def allowed(task: str) -> tuple[str, ...]:
    """Optimizers valid for ``task``: KF is AEC-only, RLS GSC-only, NLMS and learned both."""
    return tuple(TUNED[task]) + MODEL_SIZES


def make_baseline(task: str, name: str, **overrides):
    if task not in TUNED:
        raise ValueError(f"unknown task {task!r}")
    if name not in TUNED[task]:
        raise ValueError(f"baseline {name!r} is not available for {task} (choose from {sorted(TUNED[task])})")
    kwargs = {**TUNED[task][name], **overrides}
    return _CLASSES[name](**kwargs)
