import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from conftest import naive_dft, naive_idft
from smsaf.signal import (FrameConfig, OlaBuffer, StreamBuffer, dft_forward, dft_inverse, frame_signal, hann,
                          ola_synthesize, push_frame, read_wav, write_wav)

CFG = FrameConfig()
N, R, K = CFG.fft_len, CFG.hop, CFG.bins


def test_frame_config_defaults():
    assert (N, R, K) == (512, 256, 257)


@pytest.mark.parametrize("n, r", [(500, 250), (512, 200), (512, 0), (1, 1)])
def test_frame_config_rejects_bad_geometry(n, r):
    with pytest.raises(ValueError):
        FrameConfig(n, r)


def test_push_ones_into_zero_buffer():
    frame = push_frame(np.zeros(N), np.ones(R))
    np.testing.assert_array_equal(frame, np.r_[np.zeros(N - R), np.ones(R)])


def test_push_twice_keeps_block_order():
    a, b = np.full(R, 2.0), np.full(R, 3.0)
    frame = push_frame(push_frame(np.zeros(N), a), b)
    np.testing.assert_array_equal(frame[-2 * R: -R], a)
    np.testing.assert_array_equal(frame[-R:], b)


def test_stream_buffer_rejects_wrong_length():
    with pytest.raises(ValueError):
        StreamBuffer(CFG).push(np.ones(R + 1))


def test_ramp_reconstructs_from_frame_tails():
    x = np.arange(16000, dtype=np.float64) / 16000
    x = x[: len(x) // R * R]
    buf = StreamBuffer(CFG)
    rebuilt = np.concatenate([buf.push(x[i: i + R])[-R:] for i in range(0, len(x), R)])
    np.testing.assert_array_equal(rebuilt, x)


@given(arrays(np.float64, 3 * R, elements=st.floats(-1e3, 1e3)), st.integers(0, 3 * R))
@settings(max_examples=40, deadline=None)
def test_push_is_split_invariant(x, cut):
    """Pushing a signal in two arbitrary pieces gives the same final frame as one push."""
    whole = push_frame(np.zeros(N), x[-N:]) if x.size >= N else push_frame(np.zeros(N), x)
    split = push_frame(push_frame(np.zeros(N), x[:cut][-N:]), x[cut:][-N:])
    np.testing.assert_array_equal(whole, split)


def test_frame_signal_matches_repeated_push(rng):
    x = rng.standard_normal(5 * R)
    buf = StreamBuffer(CFG)
    pushed = np.array([buf.push(x[i: i + R]) for i in range(0, x.size, R)])
    np.testing.assert_array_equal(frame_signal(x, CFG), pushed)


def test_dft_impulse_and_constant():
    imp = np.zeros(N)
    imp[0] = 1
    np.testing.assert_allclose(dft_forward(imp), np.ones(K))
    spec = dft_forward(np.full(N, 0.7))
    assert spec[0] == pytest.approx(0.7 * N)
    np.testing.assert_allclose(spec[1:], 0, atol=1e-12)


def test_dft_matches_naive_sum(rng):
    x = rng.standard_normal(N)
    ref = naive_dft(x)
    np.testing.assert_allclose(dft_forward(x), ref, rtol=0, atol=1e-9 * np.abs(ref).max())


def test_dft_rejects_complex_and_odd_lengths():
    with pytest.raises(ValueError):
        dft_forward(np.ones(N, dtype=complex))
    with pytest.raises(ValueError):
        dft_forward(np.ones(500))


def test_dft_inverse_examples(rng):
    imp = dft_inverse(np.ones(K))
    np.testing.assert_allclose(imp, np.r_[1.0, np.zeros(N - 1)], atol=1e-15)
    x = rng.standard_normal(N)
    np.testing.assert_allclose(dft_inverse(dft_forward(x)), x, atol=1e-9)


def test_dft_inverse_matches_naive(rng):
    spec = rng.standard_normal(K) + 1j * rng.standard_normal(K)
    spec[0], spec[-1] = spec[0].real, spec[-1].real
    np.testing.assert_allclose(dft_inverse(spec), naive_idft(spec, N), atol=1e-9)


def test_dft_inverse_rejects_complex_endpoints():
    spec = np.ones(K, dtype=complex)
    spec[0] = 1 + 1j
    with pytest.raises(ValueError):
        dft_inverse(spec)
    spec[0], spec[-1] = 1, 1 - 0.5j
    with pytest.raises(ValueError):
        dft_inverse(spec)


@given(arrays(np.float64, N, elements=st.floats(-1e6, 1e6)))
@settings(max_examples=50, deadline=None)
def test_parseval(x):
    X = dft_forward(x)
    energy = (abs(X[0]) ** 2 + abs(X[-1]) ** 2 + 2 * np.sum(abs(X[1:-1]) ** 2)) / N
    assert energy == pytest.approx(np.sum(x**2), rel=1e-9, abs=1e-300)


def test_hann_cola_exact():
    w = hann(N)
    total = w[:R] + w[R:]
    np.testing.assert_allclose(total, 1.0, rtol=0, atol=1e-12)


def test_ola_zero_and_constant_frames():
    ola = OlaBuffer(CFG)
    for _ in range(3):
        np.testing.assert_array_equal(ola(np.zeros(N)), 0.0)
    ola = OlaBuffer(CFG)
    outs = [ola(np.ones(N)) for _ in range(4)]
    np.testing.assert_allclose(outs[-1], 1.0, atol=1e-12)


def test_ola_synthesize_returns_fresh_tail():
    emitted, tail = ola_synthesize(np.ones(N), np.zeros(N - R))
    assert emitted.shape == (R,) and tail.shape == (N - R,)


def test_passthrough_reconstructs_delayed_input(rng):
    """analysis (no window) -> identity spectrum -> synthesis equals the input delayed by N - R."""
    x = rng.standard_normal(40 * R)
    buf, ola = StreamBuffer(CFG), OlaBuffer(CFG)
    out = np.concatenate([ola(dft_inverse(dft_forward(buf.push(x[i: i + R])))) for i in range(0, x.size, R)])
    lat = CFG.latency
    np.testing.assert_allclose(out[lat:], x[:-lat], atol=1e-6)


@pytest.mark.parametrize("pcm16", [False, True])
def test_wav_round_trip(tmp_path, rng, pcm16):
    x = 0.5 * rng.uniform(-1, 1, (3, 1000))
    write_wav(tmp_path / "a.wav", x, pcm16=pcm16)
    y = read_wav(tmp_path / "a.wav")
    assert y.shape == x.shape
    np.testing.assert_allclose(y, x, atol=1 / 32768 if pcm16 else 1e-7)


def test_wav_rejects_other_rates(tmp_path):
    write_wav(tmp_path / "a.wav", np.zeros(10), sample_rate=8000)
    with pytest.raises(ValueError):
        read_wav(tmp_path / "a.wav")
