import numpy as np
import pytest
import torch

from smsaf.classic import NLMS, RLS, Kalman, KalmanState, NlmsState, RlsState, kalman_step, nlms_step, rls_step
from smsaf.loop import AecTask, GscTask, StepMode, run_sequence
from smsaf.scenes import gen_echo_path
from smsaf.signal import FrameConfig

K = FrameConfig().bins


def crand(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def test_nlms_state_validation():
    with pytest.raises(ValueError):
        NlmsState(step_size=2.0)
    with pytest.raises(ValueError):
        NlmsState(step_size=0.0)


def test_nlms_zero_error_gives_zero_update(rng):
    assert np.all(nlms_step(NlmsState(), crand(rng, 8, K), np.zeros(K)) == 0)


def test_nlms_closed_form():
    delta = nlms_step(NlmsState(0.5, 0.0), np.ones((1, 1), complex), np.ones(1, complex))
    assert delta[0, 0] == pytest.approx(0.5)


def test_nlms_formula(rng):
    U, e = crand(rng, 8, 5), crand(rng, 5)
    s = NlmsState(0.3, 1e-3)
    expect = np.empty((8, 5), complex)
    for b in range(8):
        for k in range(5):
            expect[b, k] = 0.3 * np.conj(U[b, k]) * e[k] / (np.sum(abs(U[:, k]) ** 2) + 1e-3)
    np.testing.assert_allclose(nlms_step(s, U, e), expect)


def test_nlms_converges_on_static_white_scene(rng):
    """10 s of white far-end through a static echo path: last-second ERLE >= 20 dB."""
    from scipy.signal import fftconvolve

    t = 160000
    u = rng.standard_normal(t)
    d = fftconvolve(u, gen_echo_path(3, 0.3))[:t]
    e, _ = run_sequence(AecTask(), NLMS(0.5, 1e-6), StepMode.parse("P"), np.stack([u, d]))
    e = e[0].numpy()
    d_lag = np.r_[np.zeros(256), d][:t]
    assert 10 * np.log10(np.mean(d_lag[-16000:] ** 2) / np.mean(e[-16000:] ** 2)) >= 20


def test_kalman_zero_covariance_no_update(rng):
    s = KalmanState(np.zeros((8, K)), np.ones(K), q_min=0.0, A=1.0)
    delta, _ = kalman_step(s, crand(rng, 8, K), crand(rng, K), np.zeros((8, K)))
    assert np.all(delta == 0)


def test_kalman_matches_scalar_recursion(rng):
    """Single bin, one block, real signals: same sequence as a textbook scalar Kalman filter."""
    A, q_min, ema = 0.99, 1e-4, 0.9
    w_true = 0.7
    u = rng.standard_normal(100)
    d = w_true * u + 0.05 * rng.standard_normal(100)
    # oracle: plain floats
    P, psi, th = 1.0, 0.0, 0.0
    ref = []
    for ut, dt in zip(u, d):
        e = dt - th * ut
        P = A * A * P + (1 - A * A) * th * th + q_min
        psi = ema * psi + (1 - ema) * e * e
        gain = P * ut / (P * ut * ut + psi)
        th += gain * e
        P = (1 - gain * ut) * P
        ref.append(th)
    s = KalmanState(np.ones((1, 1)), np.zeros(1), A=A, q_min=q_min, ema=ema, eps=0.0)
    theta = np.zeros((1, 1))
    ours = []
    for ut, dt in zip(u, d):
        e = np.array([dt - theta[0, 0] * ut])
        delta, s = kalman_step(s, np.array([[ut]]), e, theta)
        theta = theta + delta
        ours.append(theta[0, 0])
    np.testing.assert_allclose(ours, ref, rtol=1e-10, atol=1e-12)


def test_kalman_covariance_nonnegative_fuzz(rng):
    s = KalmanState(np.ones((2, 3)), np.zeros(3))
    theta = np.zeros((2, 3), complex)
    for i in range(10_000):
        scale = 10.0 ** rng.uniform(-8, 4)
        U = crand(rng, 2, 3) * scale * (rng.uniform() > 0.1)
        e = crand(rng, 3) * 10.0 ** rng.uniform(-8, 4)
        delta, s = kalman_step(s, U, e, theta)
        theta = np.clip(theta.real + delta.real, -1e3, 1e3) + 1j * np.clip(theta.imag + delta.imag, -1e3, 1e3)
        assert np.all(s.P >= 0) and np.all(np.isfinite(s.P)), i


def test_zero_inputs_are_safe():
    U, e = np.zeros((8, K), complex), np.zeros(K, complex)
    assert np.all(nlms_step(NlmsState(), U, e) == 0)
    delta, s = kalman_step(KalmanState(np.zeros((8, K)), np.zeros(K)), U, e, np.zeros((8, K)))
    assert np.all(np.isfinite(delta)) and np.all(np.isfinite(s.P))
    delta, s = rls_step(RlsState.initial((K, 4)), np.zeros((4, K), complex), e)
    assert np.all(delta == 0) and np.all(np.isfinite(s.Pinv))


def test_rls_zero_error_still_updates_correlation(rng):
    s = RlsState.initial((K, 3))
    delta, s2 = rls_step(s, crand(rng, 3, K), np.zeros(K))
    assert np.all(delta == 0)
    assert not np.allclose(s2.Pinv, s.Pinv)


@pytest.mark.parametrize("m", [1, 3])
def test_rls_matches_weighted_least_squares(rng, m):
    """theta_t minimizes sum gamma^(t-i) |d_i - theta^H z_i|^2 + delta gamma^t |theta|^2."""
    gamma, delta, steps = 0.95, 1e-2, 60
    z = crand(rng, steps, m)
    d = z @ np.conj(np.linspace(0.5, -0.5, m) + 0.2j) + 0.1 * crand(rng, steps)
    s = RlsState.initial((1, m), gamma, delta)
    theta = np.zeros((m, 1), complex)
    for t in range(steps):
        e = d[t] - (theta[:, 0].conj() @ z[t])
        dlt, s = rls_step(s, z[t][:, None], np.array([e]))
        theta = theta + dlt
        w = gamma ** (t - np.arange(t + 1))
        phi = (z[: t + 1].T * w) @ z[: t + 1].conj() + delta * gamma ** (t + 1) * np.eye(m)
        rhs = (z[: t + 1].T * w) @ d[: t + 1].conj()
        np.testing.assert_allclose(theta[:, 0], np.linalg.solve(phi, rhs), rtol=1e-6, atol=1e-8)


def test_rls_stays_hermitian(rng):
    s = RlsState.initial((K, 4), 0.99, 1e-2)
    for _ in range(200):
        _, s = rls_step(s, crand(rng, 4, K), crand(rng, K))
        herm = np.abs(s.Pinv - np.conj(np.swapaxes(s.Pinv, -1, -2))).max()
        assert herm <= 1e-8 * max(1.0, np.abs(s.Pinv).max())


def test_rls_resets_broken_bins(caplog):
    pinv = np.broadcast_to(np.eye(2, dtype=complex), (3, 2, 2)).copy()
    pinv[1] = -np.eye(2)
    s = RlsState(pinv, 0.99, 0.5)
    with caplog.at_level("WARNING"):
        _, s = rls_step(s, np.zeros((2, 3), complex), np.zeros(3, complex))
    np.testing.assert_allclose(s.Pinv[1], np.eye(2) / 0.5)
    assert "reset" in caplog.text


def test_rls_gamma_validation():
    with pytest.raises(ValueError):
        RlsState(None, gamma=1.0)


def test_steps_accept_torch(rng):
    U, e = crand(rng, 8, K), crand(rng, K)
    ref = nlms_step(NlmsState(), U, e)
    out = nlms_step(NlmsState(), torch.from_numpy(U), torch.from_numpy(e))
    np.testing.assert_allclose(out.numpy(), ref)
    s = RlsState.initial((K, 4), like=torch.zeros((), dtype=torch.complex128))
    dl, s2 = rls_step(s, torch.from_numpy(crand(rng, 4, K)), torch.from_numpy(e))
    assert isinstance(s2.Pinv, torch.Tensor) and dl.shape == (4, K)


def test_rls_wrapper_pins_steering_direction(rng):
    from smsaf.filters import steering_vector

    v = steering_vector(rng.uniform(-2e-4, 2e-4, 4))
    task = GscTask(v)
    mics = rng.standard_normal((4, 256 * 40))
    run_a, st_a = run_sequence(task, RLS(0.9, 1.0), StepMode.parse("P"), mics)
    pinv = st_a.opt_state[0]
    vt = torch.from_numpy(v.T)  # [K, M]
    along = torch.einsum("km,bkmn,kn->bk", vt.conj(), pinv, vt).real
    np.testing.assert_allclose(along.numpy(), 4.0, rtol=1e-6)  # v^H (v v^H / M / delta) v = M / delta
    assert np.all(np.isfinite(run_a.numpy()))
