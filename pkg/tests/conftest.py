import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def naive_dft(x):
    n = x.shape[-1]
    k = np.arange(n // 2 + 1)[:, None]
    return (x[None, :] * np.exp(-2j * np.pi * k * np.arange(n)[None, :] / n)).sum(-1)


def naive_idft(spec, n):
    full = np.concatenate([spec, np.conj(spec[1:-1][::-1])])
    k = np.arange(n)[None, :]
    t = np.arange(n)[:, None]
    return (full[None, :] * np.exp(2j * np.pi * k * t / n)).sum(-1).real / n
