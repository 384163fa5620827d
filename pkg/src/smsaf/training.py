"""Losses, truncated-BPTT gradients, Adam, and the training loop for the learned optimizer."""

from __future__ import annotations

import csv
import enum
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .evaluation import evaluate, headline, make_task, scene_inputs
from .loop import StepMode, StreamState, run_frames
from .neural import LearnedOptimizer, NetShape, NonFiniteError, flatten, init_params, net_shape_for
from .scenes import Scene
from .signal import FrameConfig

log = logging.getLogger(__name__)

EPS_LOSS = 1e-12
SI_SDR_CAP = 100.0


class TrainingDiverged(RuntimeError):
    """Loss or gradient became non-finite; the last good checkpoint has been kept."""


# --- losses ---------------------------------------------------------------

def _check_pair(a, b):
    if a.shape[-1] == 0 or b.shape[-1] == 0:
        raise ValueError("empty segment")
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def loss_unsup(e):
    """``ln(mean(e^2) + eps)`` over the last axis."""
    if e.shape[-1] == 0:
        raise ValueError("empty segment")
    return torch.log((e**2).mean(-1) + EPS_LOSS)


def loss_sup_echo(d_u, e):
    """``ln(mean((d_u - e)^2) + eps)``: log-MSE between the true echo and ``e``."""
    _check_pair(d_u, e)
    return torch.log(((d_u - e) ** 2).mean(-1) + EPS_LOSS)


def loss_neg_si_sdr(s, e, *, eps: float = 0.0):
    """Negative SI-SDR in dB, clamped to +-100. ``eps > 0`` regularizes silent references."""
    _check_pair(s, e)
    ss = (s * s).sum(-1)
    if eps == 0.0 and bool((ss <= 0).any()):
        raise ValueError("SI-SDR needs a nonzero reference")
    alpha = (e * s).sum(-1) / (ss + eps)
    target = alpha[..., None] * s
    num = (target**2).sum(-1) + eps
    den = ((e - target) ** 2).sum(-1) + eps
    ratio = 10.0 * (torch.log10(num + 1e-300) - torch.log10(den + 1e-300))
    return -torch.clamp(ratio, -SI_SDR_CAP, SI_SDR_CAP)


class LossKind(enum.Enum):
    UNSUP = "unsup"
    SUP_ECHO = "sup_echo"
    NEG_SI_SDR = "neg_si_sdr"

    @classmethod
    def resolve(cls, name: str, task: str) -> "LossKind":
        """Accepts ``U``/``S`` shorthands (supervised means echo log-MSE for AEC, SI-SDR for GSC)."""
        key = name.strip().lower()
        if key in ("u", "unsup", "unsupervised"):
            return cls.UNSUP
        if key in ("s", "sup", "supervised"):
            return cls.SUP_ECHO if task == "aec" else cls.NEG_SI_SDR
        kind = cls(key)
        if (kind is cls.SUP_ECHO and task != "aec") or (kind is cls.NEG_SI_SDR and task != "gsc"):
            raise ValueError(f"loss {kind.value} does not apply to task {task}")
        return kind

    @property
    def tag(self) -> str:
        return "U" if self is LossKind.UNSUP else "S"


def segment_loss(kind: LossKind, out, targets: dict):
    """Batch-mean loss of the output segment ``out [b, T]``.

    ``targets`` holds latency-aligned references for the same samples:
    ``d`` (mixture) and ``d_u`` (echo) for AEC, ``s`` for GSC. The echo loss
    compares ``d_u`` with the echo estimate ``d - out``.
    """
    if kind is LossKind.UNSUP:
        return loss_unsup(out).mean()
    if kind is LossKind.SUP_ECHO:
        return loss_sup_echo(targets["d_u"], targets["d"] - out).mean()
    s = targets["s"]
    live = (s * s).sum(-1) > 1e-10
    if not bool(live.any()):
        return out.sum() * 0.0
    return loss_neg_si_sdr(s[live], out[live], eps=1e-8).mean()


# --- gradients and Adam ---------------------------------------------------

def grad_wrt_params(kind: LossKind, params: dict, shape: NetShape, task, mode: StepMode,
                    state: StreamState, x, targets: dict):
    """Exact reverse-mode gradient of one segment loss w.r.t. every entry of ``params``.

    The incoming ``state`` is detached (truncation boundary). Returns
    ``(flat_grad, loss, new_state)``; for complex parameters ``flat_grad``
    holds ``dL/dRe + 1j dL/dIm``.
    """
    leaves = {k: v.detach().clone().requires_grad_(True) for k, v in params.items()}
    opt = LearnedOptimizer(leaves, shape)
    out, new_state = run_frames(task, opt, mode, state.detach(), x)
    loss = segment_loss(kind, out, targets)
    if not loss.requires_grad:
        # e.g. a one-frame segment in P mode: its output only sees the carried, detached weights
        grads = [None] * len(leaves)
    else:
        grads = torch.autograd.grad(loss, [leaves[k] for k in sorted(leaves)], allow_unused=True)
    flat = torch.cat([(g if g is not None else torch.zeros_like(leaves[k])).reshape(-1)
                      for g, k in zip(grads, sorted(leaves))])
    bad = ~torch.isfinite(torch.view_as_real(flat) if flat.is_complex() else flat)
    if bool(bad.any()):
        raise NonFiniteError(f"non-finite gradient in {int(bad.sum())} entries", state.frame_index)
    return flat, loss.detach(), new_state.detach()


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0


def adam_init(params: dict) -> AdamState:
    real = lambda p: torch.zeros_like(torch.view_as_real(p) if p.is_complex() else p)
    return AdamState({k: real(p) for k, p in params.items()}, {k: real(p) for k, p in params.items()}, 0)


def adam_step(state: AdamState, params: dict, grads: dict, lr: float,
              betas=(0.9, 0.999), eps: float = 1e-8):
    """Bias-corrected Adam; complex entries are treated as (re, im) pairs of real parameters."""
    b1, b2 = betas
    t = state.t + 1
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        g = torch.view_as_real(g) if g.is_complex() else g
        m = b1 * state.m[k] + (1 - b1) * g
        v = b2 * state.v[k] + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        step = lr * m_hat / (torch.sqrt(v_hat) + eps)
        pr = torch.view_as_real(p) if p.is_complex() else p
        upd = pr - step
        new_p[k] = torch.view_as_complex(upd.contiguous()) if p.is_complex() else upd
        new_m[k], new_v[k] = m, v
    return new_p, AdamState(new_m, new_v, t)


def clip_grad_norm(grads: dict, max_norm: float):
    """Scale all gradients jointly so the global norm is at most ``max_norm``; returns ``(grads, pre_norm)``."""
    norm = math.sqrt(sum(float((g.abs() ** 2).sum()) for g in grads.values()))
    if norm > max_norm > 0:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


# --- data -----------------------------------------------------------------

class SceneSource:
    """Indexable, deterministic scene collection (generated on demand or held in memory)."""

    def __init__(self, generator=None, seeds=None, scenes: list[Scene] | None = None):
        if scenes is None and (generator is None or seeds is None):
            raise ValueError("give either scenes or a generator with seeds")
        self.generator, self.seeds, self.scenes = generator, seeds, scenes

    def __len__(self):
        return len(self.scenes) if self.scenes is not None else len(self.seeds)

    def __getitem__(self, i) -> Scene:
        if self.scenes is not None:
            return self.scenes[i]
        return self.generator(int(self.seeds[i]))

    def all(self) -> list[Scene]:
        return [self[i] for i in range(len(self))]


def batch_arrays(kind: str, scenes: list[Scene], latency: int, dtype=torch.float32):
    """Stacked inputs ``[b, C, T]`` plus latency-aligned loss targets ``[b, T]``."""
    x = torch.from_numpy(np.stack([scene_inputs(s) for s in scenes])).to(dtype)
    delay = lambda a: torch.from_numpy(np.pad(np.asarray(a), ((0, 0), (latency, 0)))[:, : x.shape[-1]]).to(dtype)
    if kind == "aec":
        targets = {"d": delay([s.d for s in scenes]), "d_u": delay([s.d_u for s in scenes])}
    else:
        targets = {"s": delay([s.s for s in scenes])}
    steering = np.stack([s.v for s in scenes]) if kind == "gsc" else None
    return x, targets, steering


# --- training loop --------------------------------------------------------

@dataclass
class TrainConfig:
    batch: int = 16
    lr: float = 1e-4
    l_max: int = 128
    l_min: int = 8
    clip: float = 5.0
    patience: int = 10
    stop_after: int = 30
    seed: int = 0
    max_epochs: int | None = None
    max_seconds: float | None = None
    threads: int | None = None
    out_scale: float = 0.01

    def __post_init__(self):
        if self.batch < 1 or self.lr < 0 or self.clip <= 0 or self.patience < 1 or self.stop_after < 1:
            raise ValueError(f"invalid training configuration: {self}")
        if not 1 <= self.l_min <= self.l_max:
            raise ValueError("need 1 <= l_min <= l_max")

    def digest(self, extra: dict | None = None) -> str:
        blob = json.dumps({**asdict(self), **(extra or {})}, sort_keys=True, default=str)
        return hashlib.sha1(blob.encode()).hexdigest()[:12]


LOG_FIELDS = ("epoch", "step", "loss", "val_metric", "lr", "grad_norm")


@dataclass
class TrainResult:
    params: dict
    shape: NetShape
    best_metric: float
    history: list[dict] = field(default_factory=list)
    epochs: int = 0
    stopped: str = ""


def _resume_path(ckpt: Path) -> Path:
    return ckpt.with_name(ckpt.name + ".resume.pt")


def train_loop(kind: str, train: SceneSource, val: SceneSource, size: str, mode: StepMode,
               loss: LossKind, cfg: TrainConfig = TrainConfig(), *, ckpt_path=None, log_path=None,
               resume: bool = False, frame: FrameConfig = FrameConfig()) -> TrainResult:
    """Truncated-BPTT training of a learned optimizer on ``train``; validation on ``val`` after every epoch.

    Within an utterance, segments of random length ``L`` are processed in
    order and ``(theta, psi)`` carries over (detached) between them.
    """
    if cfg.threads:
        torch.set_num_threads(cfg.threads)
    rng = np.random.default_rng(cfg.seed)
    task0 = make_task(kind, train[0], cfg=frame)
    shape = net_shape_for(size, task0)
    params = init_params(shape, cfg.seed, out_scale=cfg.out_scale)
    adam = adam_init(params)
    lr = cfg.lr
    val_scenes = val.all()
    metric_key = headline(kind)
    ckpt_path = Path(ckpt_path) if ckpt_path else None
    meta = {"task": kind, "mode": mode.name, "loss": loss.value, "size": size, "config": asdict(cfg),
            "n_train": len(train), "n_val": len(val), "u_feature": getattr(task0, "u_feature", None)}

    def validate(p):
        return evaluate(kind, LearnedOptimizer(p, shape), mode, val_scenes, cfg=frame).mean(metric_key)

    start_epoch, step, best, best_params, stagnant = 0, 0, -math.inf, None, 0
    resumed_elapsed = 0.0
    history: list[dict] = []
    if resume and ckpt_path and _resume_path(ckpt_path).exists():
        saved = torch.load(_resume_path(ckpt_path), weights_only=False)
        params, adam, lr = saved["params"], saved["adam"], saved["lr"]
        start_epoch, step, best, stagnant = saved["epoch"], saved["step"], saved["best"], saved["stagnant"]
        best_params = saved["best_params"]
        rng.bit_generator.state = saved["rng"]
        resumed_elapsed = saved.get("elapsed", 0.0)
        log.info("resumed at epoch %d (best %.3f)", start_epoch, best)

    writer = None
    if log_path:
        log_path = Path(log_path)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        append = resume and log_path.exists() and start_epoch > 0
        fh = open(log_path, "a" if append else "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        if not append:
            writer.writeheader()

    def emit(row):
        history.append(row)
        if writer:
            writer.writerow(row)
            fh.flush()

    def save_best():
        if ckpt_path and best_params is not None:
            save_checkpoint(ckpt_path, best_params, shape,
                            {**meta, "val_metric": best, "epoch": epoch, "elapsed_seconds": elapsed()})

    clock0 = time.monotonic()
    elapsed_before = resumed_elapsed
    epoch = start_epoch

    def elapsed():
        return elapsed_before + time.monotonic() - clock0

    if start_epoch == 0:
        best = validate(params)
        best_params = {k: v.clone() for k, v in params.items()}
        emit({"epoch": 0, "step": 0, "loss": "", "val_metric": best, "lr": lr, "grad_norm": ""})
        save_best()

    stopped = "max_epochs"
    try:
        while cfg.max_epochs is None or epoch < cfg.max_epochs:
            epoch += 1
            order = rng.permutation(len(train))
            losses = []
            for b0 in range(0, len(order) - cfg.batch + 1, cfg.batch):
                scenes = [train[int(i)] for i in order[b0: b0 + cfg.batch]]
                x, targets, steering = batch_arrays(kind, scenes, frame.latency)
                task = make_task(kind, steering=steering, cfg=frame)
                opt = LearnedOptimizer(params, shape)
                state = task.init_state(opt, x.shape[0], dtype=torch.float32)
                n_frames = x.shape[-1] // frame.hop
                pos = 0
                while pos < n_frames:
                    seg = min(int(rng.integers(cfg.l_min, cfg.l_max + 1)), n_frames - pos)
                    sl = slice(pos * frame.hop, (pos + seg) * frame.hop)
                    try:
                        flat, seg_loss, state = grad_wrt_params(
                            loss, params, shape, task, mode, state, x[..., sl],
                            {k: v[..., sl] for k, v in targets.items()})
                    except NonFiniteError as err:
                        raise TrainingDiverged(f"epoch {epoch} step {step}: {err}") from err
                    if not math.isfinite(float(seg_loss)):
                        raise TrainingDiverged(f"epoch {epoch} step {step}: loss is {float(seg_loss)}")
                    grads = _unflatten_like(flat, params)
                    grads, norm = clip_grad_norm(grads, cfg.clip)
                    params, adam = adam_step(adam, params, grads, lr)
                    step += 1
                    losses.append(float(seg_loss))
                    emit({"epoch": epoch, "step": step, "loss": float(seg_loss), "val_metric": "",
                          "lr": lr, "grad_norm": norm})
                    pos += seg
                if cfg.max_seconds and elapsed() > cfg.max_seconds:
                    break
            metric = validate(params)
            if not math.isfinite(metric):
                raise TrainingDiverged(f"epoch {epoch}: validation metric is {metric}")
            emit({"epoch": epoch, "step": step, "loss": float(np.mean(losses)) if losses else "",
                  "val_metric": metric, "lr": lr, "grad_norm": ""})
            log.info("epoch %d: loss %.4f, val %s %.3f, lr %.2e", epoch,
                     float(np.mean(losses)) if losses else float("nan"), metric_key, metric, lr)
            if metric > best:
                best, best_params, stagnant = metric, {k: v.clone() for k, v in params.items()}, 0
                save_best()
            else:
                stagnant += 1
                if stagnant % cfg.patience == 0:
                    lr *= 0.5
            if ckpt_path:
                torch.save({"params": params, "adam": adam, "lr": lr, "epoch": epoch, "step": step,
                            "best": best, "best_params": best_params, "stagnant": stagnant,
                            "rng": rng.bit_generator.state, "elapsed": elapsed()}, _resume_path(ckpt_path))
            if stagnant >= cfg.stop_after:
                stopped = "no_improvement"
                break
            if cfg.max_seconds and elapsed() > cfg.max_seconds:
                stopped = "time_budget"
                break
    finally:
        if writer:
            fh.close()
    return TrainResult(best_params, shape, best, history, epoch, stopped)


def _unflatten_like(flat, params: dict) -> dict:
    out, i = {}, 0
    for k in sorted(params):
        n = params[k].numel()
        out[k] = flat[i: i + n].reshape(params[k].shape)
        i += n
    return out


def load_trained(path, kind: str, size: str | None = None, task=None):
    """Learned optimizer from a checkpoint, shape-checked against ``task`` when given."""
    expect = net_shape_for(size, task) if (size and task is not None) else None
    params, shape, meta = load_checkpoint(path, expect=expect)
    if meta.get("task") not in (None, kind):
        raise ValueError(f"checkpoint was trained for {meta['task']}, not {kind}")
    return LearnedOptimizer(params, shape), meta
