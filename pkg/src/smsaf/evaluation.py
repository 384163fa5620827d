"""Batch processing of scene sets and per-scene metrics."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass

import numpy as np
import torch

from .loop import AecTask, GscTask, StepMode, run_sequence
from .metrics import erle, si_sdr, sir_sar
from .scenes import Scene
from .signal import FrameConfig

log = logging.getLogger(__name__)


def make_task(kind: str, scene: Scene | None = None, *, mics: int = 4, cfg: FrameConfig = FrameConfig(), steering=None):
    """Task object for ``"aec"`` or ``"gsc"``; GSC takes its steering vector from ``scene`` or ``steering``."""
    if kind == "aec":
        return AecTask(cfg)
    if kind == "gsc":
        if steering is None:
            if scene is None:
                raise ValueError("a GSC task needs a steering vector")
            steering = scene.v
        return GscTask(steering, cfg)
    raise ValueError(f"unknown task {kind!r}")


def scene_inputs(scene: Scene) -> np.ndarray:
    """Input channels ``[C, T]``: ``[u, d]`` for AEC, the microphones for GSC."""
    if scene.kind == "aec":
        return np.stack([scene.u, scene.d])
    return np.asarray(scene.mics)


def process(kind: str, optimizer, mode: StepMode, scenes: list[Scene], *, batch: int = 32,
            dtype=torch.float32, cfg: FrameConfig = FrameConfig()) -> list[np.ndarray]:
    """Run every scene through the adaptive filter; returns one output signal per scene.

    Scenes of equal length are batched. GSC scenes in one batch may have
    different steering vectors.
    """
    outputs: list[np.ndarray | None] = [None] * len(scenes)
    order = sorted(range(len(scenes)), key=lambda i: scene_inputs(scenes[i]).shape)
    with torch.no_grad():
        for _, group in itertools.groupby(order, key=lambda i: scene_inputs(scenes[i]).shape):
            group = list(group)
            for start in range(0, len(group), batch):
                idx = group[start: start + batch]
                x = torch.from_numpy(np.stack([scene_inputs(scenes[i]) for i in idx]))
                if kind == "gsc":
                    task = make_task(kind, steering=np.stack([scenes[i].v for i in idx]), cfg=cfg)
                else:
                    task = make_task(kind, cfg=cfg)
                e, _ = run_sequence(task, optimizer, mode, x, dtype=dtype)
                for j, i in enumerate(idx):
                    outputs[i] = e[j].double().numpy()
    return outputs


def scene_metrics(scene: Scene, e: np.ndarray, latency: int) -> dict[str, float]:
    if scene.kind == "aec":
        return {
            "erle": erle(scene.d, e, latency=latency, far_end=scene.u, exclude=scene.near_end_active),
        }
    n = scene.s.size - latency
    s, out = scene.s[:n], e[latency: latency + n]
    sir, sar = sir_sar(s, scene.n[:, :n], out)
    return {"si_sdr": si_sdr(s, out), "sir": sir, "sar": sar}


@dataclass
class EvalResult:
    per_scene: list[dict[str, float]]

    def mean(self, key: str) -> float:
        return float(np.mean([m[key] for m in self.per_scene]))

    def summary(self) -> dict[str, float]:
        keys = self.per_scene[0].keys() if self.per_scene else []
        return {k: self.mean(k) for k in keys}


def evaluate(kind: str, optimizer, mode: StepMode, scenes: list[Scene], *, batch: int = 32,
             dtype=torch.float32, cfg: FrameConfig = FrameConfig()) -> EvalResult:
    outs = process(kind, optimizer, mode, scenes, batch=batch, dtype=dtype, cfg=cfg)
    return EvalResult([scene_metrics(s, e, cfg.latency) for s, e in zip(scenes, outs)])


def headline(kind: str) -> str:
    return "erle" if kind == "aec" else "si_sdr"


def grid_search(kind: str, factory, grid: dict[str, list], mode: StepMode, scenes: list[Scene], **kw):
    """Exhaustive search; returns ``(best_kwargs, rows)`` ranked by the headline metric."""
    keys = sorted(grid)
    rows = []
    for values in itertools.product(*(grid[k] for k in keys)):
        params = dict(zip(keys, values))
        score = evaluate(kind, factory(**params), mode, scenes, **kw).mean(headline(kind))
        log.info("grid %s -> %.3f", params, score)
        rows.append((params, score))
    rows.sort(key=lambda r: -r[1])
    return rows[0][0], rows
