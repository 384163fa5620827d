import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from smsaf.checkpoint import save_checkpoint
from smsaf.estimators import AdaptiveFilter
from smsaf.neural import init_params, net_shape_for
from smsaf.loop import AecTask
from smsaf.scenes import AecSceneConfig, GscSceneConfig, gen_aec_scene, gen_gsc_scene


def aec_batch(seeds, duration=1.0):
    cfg = AecSceneConfig(duration=duration, near_end=False)
    scenes = [gen_aec_scene(s, cfg) for s in seeds]
    return np.stack([np.stack([s.u, s.d]) for s in scenes]), np.stack([s.d_u for s in scenes])


def test_params_and_clone():
    est = AdaptiveFilter(optimizer="kf", mode="PU")
    assert est.get_params()["mode"] == "PU"
    c = clone(est).set_params(mode="P")
    assert c.mode == "P" and est.mode == "PU"


def test_baseline_cancels_echo():
    X, _ = aec_batch([0, 1], duration=3.0)
    est = AdaptiveFilter(optimizer="kf", mode="PU").fit(X)
    out = est.transform(X)
    assert out.shape == (2, X.shape[-1])
    assert np.all(out[:, -256:] == 0)
    assert est.score(X) > 6.0


def test_transform_is_latency_compensated():
    X, _ = aec_batch([3])
    X[:, 0] = 0.0  # no far end: the canceller passes the mixture through
    out = AdaptiveFilter(optimizer="nlms").fit(X).transform(X)
    np.testing.assert_allclose(out[0, :-256], X[0, 1, :-256], atol=1e-6)


def test_input_validation():
    est = AdaptiveFilter()
    with pytest.raises(NotFittedError):
        est.transform(np.zeros((1, 2, 512)))
    with pytest.raises(ValueError):
        AdaptiveFilter(optimizer="lms").fit(np.zeros((1, 2, 512)))
    with pytest.raises(ValueError):
        AdaptiveFilter().fit(np.zeros((1, 3, 512)))
    with pytest.raises(ValueError):
        AdaptiveFilter().fit(np.full((1, 2, 512), np.nan))
    with pytest.raises(ValueError):
        AdaptiveFilter(task="gsc").fit(np.zeros((1, 4, 512)))
    with pytest.raises(ValueError):
        AdaptiveFilter(optimizer="S").fit(np.zeros((2, 2, 512)))  # learned model without targets


def test_gsc_with_steering():
    sc = gen_gsc_scene(2, GscSceneConfig(duration=2.0))
    est = AdaptiveFilter(task="gsc", optimizer="rls", mode="P", steering=sc.v).fit(sc.mics[None])
    assert est.transform(sc.mics[None]).shape == (1, sc.s.size)
    assert np.isfinite(est.score(sc.mics[None], sc.s[None]))


def test_learned_model_from_checkpoint(tmp_path):
    task = AecTask()
    shape = net_shape_for("S", task)
    save_checkpoint(tmp_path / "m.smaf", init_params(shape, 0), shape, {"task": "aec"})
    X, _ = aec_batch([4])
    est = AdaptiveFilter(optimizer="S", checkpoint=str(tmp_path / "m.smaf")).fit(X)
    assert np.all(np.isfinite(est.transform(X)))


def test_learned_model_trains_briefly():
    X, y = aec_batch([5, 6, 7], duration=0.5)
    est = AdaptiveFilter(optimizer="S", max_epochs=1, batch=2, seed=0).fit(X, y)
    assert est.history_ and est.history_[0]["epoch"] == 0
    assert np.isfinite(est.score(X))
