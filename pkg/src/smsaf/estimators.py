"""scikit-learn style wrapper: ``fit`` trains (or loads) an optimizer, ``transform`` runs the adaptive filter."""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .baselines import BASELINES, MODEL_SIZES, make_baseline
from .evaluation import make_task
from .loop import StepMode, run_sequence
from .metrics import erle, si_sdr
from .scenes import Scene
from .signal import FrameConfig
from .training import LossKind, SceneSource, TrainConfig, load_trained, train_loop
from .validation import check_choice, check_signals, check_steering, check_targets


class AdaptiveFilter(BaseEstimator, TransformerMixin):
    """Streaming echo canceller (``task="aec"``, X channels ``[u, d]``) or GSC beamformer
    (``task="gsc"``, X channels = microphones).

    ``optimizer`` is a baseline name (``nlms``, ``kf``, ``rls``) or a model
    size (``S``, ``M``, ``L``). Learned models are trained in ``fit`` from
    ``y`` (true echo for AEC, clean target for GSC) unless ``checkpoint``
    points at a trained model. ``transform`` returns latency-compensated
    outputs of the same length as the input.
    """

    def __init__(self, task="aec", optimizer="nlms", mode="P", loss="S", steering=None, checkpoint=None,
                 lr=1e-3, batch=16, max_epochs=5, max_seconds=None, validation_fraction=0.1, seed=0):
        self.task = task
        self.optimizer = optimizer
        self.mode = mode
        self.loss = loss
        self.steering = steering
        self.checkpoint = checkpoint
        self.lr = lr
        self.batch = batch
        self.max_epochs = max_epochs
        self.max_seconds = max_seconds
        self.validation_fraction = validation_fraction
        self.seed = seed

    def _n_channels(self, X):
        return 2 if self.task == "aec" else X.shape[1]

    def _steering_for(self, X):
        if self.task != "gsc":
            return None
        return check_steering(self.steering, X.shape[1], FrameConfig().bins, X.shape[0])

    def fit(self, X, y=None):
        check_choice(self.task, ("aec", "gsc"), "task")
        check_choice(self.optimizer, BASELINES + MODEL_SIZES, "optimizer")
        self.mode_ = StepMode.parse(self.mode)
        X = check_signals(X, n_channels=2 if self.task == "aec" else None)
        v = self._steering_for(X)
        self.n_channels_ = X.shape[1]
        self.latency_ = FrameConfig().latency
        if self.optimizer in BASELINES:
            self.optimizer_ = make_baseline(self.task, self.optimizer)
            self.history_ = []
            return self
        task = make_task(self.task, steering=v if v is None or v.ndim == 2 else v[0])
        if self.checkpoint:
            self.optimizer_, _ = load_trained(self.checkpoint, self.task, self.optimizer, task)
            self.history_ = []
            return self
        if y is None:
            raise ValueError("training a learned optimizer needs targets y")
        y = check_targets(y, X)
        scenes = [self._scene(X[i], y[i], None if v is None else (v if v.ndim == 2 else v[i])) for i in range(X.shape[0])]
        n_val = max(1, int(round(self.validation_fraction * len(scenes)))) if len(scenes) > 1 else 0
        train, val = scenes[n_val:] or scenes, scenes[:n_val] or scenes
        cfg = TrainConfig(batch=min(self.batch, len(train)), lr=self.lr, seed=self.seed,
                          max_epochs=self.max_epochs, max_seconds=self.max_seconds)
        result = train_loop(self.task, SceneSource(scenes=train), SceneSource(scenes=val), self.optimizer,
                            self.mode_, LossKind.resolve(self.loss, self.task), cfg)
        from .neural import LearnedOptimizer

        self.optimizer_ = LearnedOptimizer(result.params, result.shape)
        self.history_ = result.history
        return self

    def _scene(self, x, y, v):
        if self.task == "aec":
            return Scene("aec", s=np.zeros_like(y), n=x[1] - y, u=x[0], d=x[1], d_u=y)
        return Scene("gsc", s=y, n=x - x.mean(0), mics=x, v=v)

    def transform(self, X):
        check_is_fitted(self, "optimizer_")
        X = check_signals(X, n_channels=self.n_channels_)
        v = self._steering_for(X)
        task = make_task(self.task, steering=v)
        with torch.no_grad():
            e, _ = run_sequence(task, self.optimizer_, self.mode_, torch.from_numpy(X), dtype=torch.float32)
        e = e.double().numpy()
        out = np.zeros_like(e)
        out[:, : e.shape[-1] - self.latency_] = e[:, self.latency_:]
        return out

    def score(self, X, y=None):
        """Mean ERLE (AEC) or mean SI-SDR against ``y`` (GSC), in dB."""
        X = check_signals(X)
        n = X.shape[-1] - self.latency_  # the tail beyond the pipeline latency is never emitted
        out = self.transform(X)[:, :n]
        if self.task == "aec":
            return float(np.mean([erle(X[i, 1, :n], out[i], far_end=X[i, 0, :n]) for i in range(X.shape[0])]))
        y = check_targets(y, X)[:, :n]
        return float(np.mean([si_sdr(y[i], out[i]) for i in range(X.shape[0])]))
