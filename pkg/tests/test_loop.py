import numpy as np
import pytest
import scipy.signal
import torch

from smsaf.classic import NLMS
from smsaf.filters import block_partition, steering_vector
from smsaf.loop import AecTask, GscTask, NullOptimizer, StepMode, StreamState, process_frame, run_sequence
from smsaf.neural import NonFiniteError
from smsaf.signal import FrameConfig

CFG = FrameConfig()
R = CFG.hop
LAT = CFG.latency


class ConstantStep:
    """Adds the same delta on every predict iteration."""

    def __init__(self, delta):
        self.delta = delta

    def init_state(self, task, batch, dtype, device=None):
        return ()

    def step(self, state, view):
        return self.delta.to(view.theta.dtype).expand_as(view.theta), state


class PoisonAt:
    """NLMS that returns NaN from a given call onwards."""

    def __init__(self, call):
        self.inner, self.call, self.n = NLMS(0.5, 1e-3), call, 0

    def init_state(self, task, batch, dtype, device=None):
        return ()

    def step(self, state, view):
        self.n += 1
        delta, state = self.inner.step(state, view)
        if self.n > self.call:
            delta = delta * float("nan")
        return delta, state


def echo_scene(rng, n=16000, taps=700):
    u = rng.standard_normal(n)
    w = rng.standard_normal(taps) * np.exp(-np.arange(taps) / 150) * 0.3
    d = scipy.signal.lfilter(w, 1, u) + 1e-3 * rng.standard_normal(n)
    return u, d, w


def test_mode_parsing():
    assert StepMode.parse("P") == StepMode(1, False)
    assert StepMode.parse("PUx3") == StepMode(3, True)
    assert StepMode.parse("Px2").name == "Px2"
    with pytest.raises(ValueError):
        StepMode.parse("U")
    with pytest.raises(ValueError):
        StepMode(0, False)


def test_null_aec_passes_mixture_with_latency(rng):
    u, d = rng.standard_normal(4000), rng.standard_normal(4000)
    out, _ = run_sequence(AecTask(), NullOptimizer(), StepMode.parse("PU"), np.stack([u, d]))
    out = out[0].numpy()
    assert np.all(out[:LAT] == 0)
    np.testing.assert_allclose(out[LAT:], d[:-LAT], atol=1e-12)


def test_null_gsc_is_delay_and_sum(rng):
    x = rng.standard_normal((4, 4000))
    out, _ = run_sequence(GscTask(steering_vector(np.zeros(4))), NullOptimizer(), StepMode.parse("P"), x)
    np.testing.assert_allclose(out[0, LAT:].numpy(), x.mean(0)[:-LAT], atol=1e-12)


def test_fixed_weights_give_exact_linear_residual(rng):
    u, d, w = echo_scene(rng, 6000)
    theta0 = torch.from_numpy(block_partition(w, 8, CFG))
    out, _ = run_sequence(AecTask(), NullOptimizer(), StepMode.parse("P"), np.stack([u, d]), theta0=theta0)
    residual = d - scipy.signal.lfilter(w, 1, u)
    np.testing.assert_allclose(out[0, LAT:].numpy(), residual[:-LAT], atol=1e-10)


def test_update_pass_is_one_step_ahead(rng):
    # with a constant update, PU from theta0 equals P from theta0 + delta
    x = rng.standard_normal((2, 5 * R))
    delta = torch.from_numpy(0.01 * (rng.standard_normal((8, CFG.bins)) + 1j * rng.standard_normal((8, CFG.bins))))
    opt = ConstantStep(delta)
    pu, _ = run_sequence(AecTask(), opt, StepMode.parse("PU"), x)
    p, _ = run_sequence(AecTask(), opt, StepMode.parse("P"), x, theta0=delta)
    np.testing.assert_allclose(pu.numpy(), p.numpy(), atol=1e-10)


def test_mode_nesting_px2(rng):
    # two constant steps per frame: output uses theta after the first step, then moves by 2 delta per frame
    x = rng.standard_normal((2, 5 * R))
    delta = torch.from_numpy(0.01 * (rng.standard_normal((8, CFG.bins)) + 1j * rng.standard_normal((8, CFG.bins))))
    px2, st2 = run_sequence(AecTask(), ConstantStep(delta), StepMode.parse("Px2"), x)
    p, st1 = run_sequence(AecTask(), ConstantStep(2 * delta), StepMode.parse("P"), x, theta0=delta)
    np.testing.assert_allclose(px2.numpy(), p.numpy(), atol=1e-10)
    np.testing.assert_allclose(st2.theta.numpy(), (st1.theta - delta).numpy(), atol=1e-10)


@pytest.mark.parametrize("mode", ["P", "PU", "PUx2"])
def test_split_resume_is_bit_exact(rng, mode):
    u, d, _ = echo_scene(rng, 20 * R)
    x = np.stack([u, d])
    m = StepMode.parse(mode)
    whole, _ = run_sequence(AecTask(), NLMS(0.5, 1e-3), m, x)
    a, st = run_sequence(AecTask(), NLMS(0.5, 1e-3), m, x[:, : 7 * R])
    b, _ = run_sequence(AecTask(), NLMS(0.5, 1e-3), m, x[:, 7 * R:], state=st)
    assert torch.equal(whole, torch.cat([a, b], -1))


def test_state_serialization_round_trip(rng):
    u, d, _ = echo_scene(rng, 12 * R)
    x = np.stack([u, d])
    m = StepMode.parse("PU")
    _, st = run_sequence(AecTask(), NLMS(0.5, 1e-3), m, x[:, : 6 * R])
    restored = StreamState.from_dict(st.to_dict())
    assert restored.frame_index == 6
    a, _ = run_sequence(AecTask(), NLMS(0.5, 1e-3), m, x[:, 6 * R:], state=st)
    b, _ = run_sequence(AecTask(), NLMS(0.5, 1e-3), m, x[:, 6 * R:], state=restored)
    assert torch.equal(a, b)


def test_process_frame_matches_batch_run(rng):
    u, d, _ = echo_scene(rng, 6 * R)
    task, m = AecTask(), StepMode.parse("PU")
    whole, _ = run_sequence(task, NLMS(0.5, 1e-3), m, np.stack([u, d]))
    st = task.init_state(NLMS(), 1, dtype=torch.float64)
    chunks = []
    for t in range(6):
        sl = slice(t * R, (t + 1) * R)
        out, st = process_frame(task, st, NLMS(0.5, 1e-3), m, torch.from_numpy(u[sl])[None], torch.from_numpy(d[sl])[None])
        chunks.append(out)
    assert torch.equal(whole, torch.cat(chunks, -1))
    with pytest.raises(ValueError):
        process_frame(task, st, NLMS(), m, torch.zeros(1, R - 1), torch.zeros(1, R - 1))


@pytest.mark.parametrize("task", ["aec", "gsc"])
def test_causality(rng, task):
    n = 12 * R
    if task == "aec":
        u, d, _ = echo_scene(rng, n)
        x, t = np.stack([u, d]), AecTask()
    else:
        x, t = rng.standard_normal((4, n)), GscTask(steering_vector(np.array([0, 1e-4, 2e-4, 3e-4])))
    cut = 5 * R
    y = x.copy()
    y[:, cut:] = rng.standard_normal((x.shape[0], n - cut))
    m = StepMode.parse("PUx2")
    a, _ = run_sequence(t, NLMS(0.5, 1e-3), m, x)
    b, _ = run_sequence(t, NLMS(0.5, 1e-3), m, y)
    assert torch.equal(a[:, :cut], b[:, :cut])
    assert not torch.equal(a[:, cut:], b[:, cut:])


def test_two_iterations_converge_faster(rng):
    gains = []
    for seed in range(4):
        r = np.random.default_rng([seed, 7])
        u, d, _ = echo_scene(r, 16000)
        x = np.stack([u, d])
        early = slice(LAT + 4 * R, LAT + 24 * R)
        res = {}
        for mode in ("P", "Px2"):
            out, _ = run_sequence(AecTask(), NLMS(0.3, 1e-3), StepMode.parse(mode), x)
            e = out[0].numpy()[early]
            res[mode] = 10 * np.log10(np.mean(d[early.start - LAT: early.stop - LAT] ** 2) / np.mean(e**2))
        gains.append(res["Px2"] - res["P"])
    assert all(g > 0 for g in gains), gains


def test_nonfinite_frame_rolls_back(rng):
    u, d, _ = echo_scene(rng, 10 * R)
    x = torch.from_numpy(np.stack([u, d]))[None]
    task, m = AecTask(), StepMode.parse("P")
    with pytest.raises(NonFiniteError) as info:
        run_sequence(task, PoisonAt(5), m, x)
    err = info.value
    assert err.frame == 5 and err.state.frame_index == 5
    _, good = run_sequence(task, NLMS(0.5, 1e-3), m, x[..., : 5 * R])
    for name in ("theta", "history", "spectra", "ola"):
        assert torch.equal(getattr(err.state, name), getattr(good, name)), name
    # resuming from the rolled-back state with a sane optimizer matches an uninterrupted run
    whole, _ = run_sequence(task, NLMS(0.5, 1e-3), m, x)
    tail, _ = run_sequence(task, NLMS(0.5, 1e-3), m, x[..., 5 * R:], state=err.state)
    assert torch.equal(whole[..., 5 * R:], tail)
