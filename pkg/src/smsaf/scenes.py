"""Synthetic AEC and beamforming scenes with full ground truth, plus directory serialization."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy import signal as sps

from .filters import steering_vector
from .signal import SAMPLE_RATE, FrameConfig, read_wav, write_wav

ECHO_TAPS = 2048
SPEED_OF_SOUND = 343.0


def _db_gain(ref_power, sig_power, ratio_db):
    """Gain that puts ``sig`` at ``ratio_db`` below ``ref`` (power ratio ref/sig)."""
    if sig_power <= 0:
        return 0.0
    return np.sqrt(ref_power / (sig_power * 10.0 ** (ratio_db / 10.0)))


def pink_noise(rng: np.random.Generator, n: int) -> np.ndarray:
    """1/f noise by spectral shaping of white noise, unit RMS."""
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.arange(spec.size, dtype=np.float64)
    f[0] = 1.0
    x = np.fft.irfft(spec / np.sqrt(f), n=n)
    return x / np.sqrt(np.mean(x**2))


def speech_like(rng: np.random.Generator, n: int, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Modulated, formant-coloured noise with syllable-rate envelope and pauses; unit RMS."""
    x = rng.standard_normal(n)
    # two or three random resonances plus a mild low-pass tilt
    for _ in range(rng.integers(2, 4)):
        f0 = rng.uniform(250.0, 3200.0)
        bw = rng.uniform(80.0, 400.0)
        r = np.exp(-np.pi * bw / sample_rate)
        a = [1.0, -2.0 * r * np.cos(2 * np.pi * f0 / sample_rate), r * r]
        x = x + 0.7 * sps.lfilter([1.0 - r], a, x)
    x = sps.lfilter([1.0], [1.0, -rng.uniform(0.5, 0.9)], x)

    t = np.arange(n) / sample_rate
    rate = rng.uniform(3.0, 6.0)
    env = 0.55 + 0.45 * np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi))
    # word-level gating: 0.3-1.2 s talk spurts separated by 0.1-0.4 s pauses
    gate = np.zeros(n)
    pos = int(rng.uniform(0.0, 0.2) * sample_rate)
    while pos < n:
        on = int(rng.uniform(0.3, 1.2) * sample_rate)
        gate[pos: pos + on] = 1.0
        pos += on + int(rng.uniform(0.1, 0.4) * sample_rate)
    gate = np.convolve(gate, np.hanning(161) / np.hanning(161).sum(), mode="same")
    x = x * env * gate
    rms = np.sqrt(np.mean(x**2))
    return x / rms if rms > 0 else x


def gen_echo_path(seed: int, rt60: float, taps: int = ECHO_TAPS, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Exponentially decaying noise impulse response with a 0-4 ms direct-path delay, unit norm.

    The amplitude envelope ``exp(-6.9 t / rt60)`` is 60 dB down at ``t = rt60``
    (``t`` measured from the direct path).
    """
    if not 0.1 <= rt60 <= 0.5:
        raise ValueError(f"rt60 must lie in [0.1, 0.5] s, got {rt60}")
    rng = np.random.default_rng(seed)
    delay = int(rng.integers(0, int(0.004 * sample_rate) + 1))
    n = taps - delay
    t = np.arange(n) / sample_rate
    h = np.zeros(taps)
    h[delay:] = rng.standard_normal(n) * np.exp(-6.9 * t / rt60)
    return h / np.linalg.norm(h)


def loudspeaker_nonlinearity(x: np.ndarray) -> np.ndarray:
    """Hard clip at the 80th-percentile magnitude followed by ``(0.5 x + 0.3 x^3) / 0.8``.

    The cubic acts on the clip-normalized signal and is scaled back so that the
    clip level maps to itself.
    """
    level = np.percentile(np.abs(x), 80)
    if level <= 0:
        return x.copy()
    xn = np.clip(x, -level, level) / level
    return level * (0.5 * xn + 0.3 * xn**3) / 0.8


@dataclass
class AecSceneConfig:
    duration: float = 4.0
    ser_db: tuple[float, float] = (-10.0, 10.0)
    snr_db: tuple[float, float] = (10.0, 30.0)
    rt60: tuple[float, float] = (0.1, 0.5)
    nonlinear: float = 0.5  # probability of the loudspeaker nonlinearity
    double_talk: float = 0.7  # probability that near-end speech is present at all
    near_end: bool = True
    noise: bool = True
    source_dir: str | None = None

    def __post_init__(self):
        for name, lo, hi in (("ser_db", -10, 10), ("snr_db", 0, 30), ("rt60", 0.1, 0.5)):
            a, b = _as_range(getattr(self, name))
            if a < lo or b > hi or a > b:
                raise ValueError(f"{name} range {a, b} outside [{lo}, {hi}]")
            setattr(self, name, (a, b))


@dataclass
class GscSceneConfig:
    duration: float = 4.0
    mics: int = 4
    spacing: float = 0.05
    sir_db: tuple[float, float] = (-5.0, 5.0)  # target vs directional interferer at the mics
    snr_db: tuple[float, float] = (15.0, 30.0)  # target vs diffuse noise
    tail_db: float = -30.0  # reverberant tail level relative to the direct path
    tail_rt60: float = 0.2
    tail_taps: int = 512
    interferer: bool = True
    diffuse: bool = True
    tails: bool = True
    source_dir: str | None = None


def _as_range(v):
    if np.isscalar(v):
        return float(v), float(v)
    a, b = v
    return float(a), float(b)


def _draw(rng, rng_range):
    a, b = _as_range(rng_range)
    return a if a == b else float(rng.uniform(a, b))


@dataclass
class Scene:
    """Ground-truth bundle. AEC scenes fill ``u, d, d_u, s, n, w``; GSC scenes fill ``mics, s, n, v``."""

    kind: str
    s: np.ndarray
    n: np.ndarray
    u: np.ndarray | None = None
    d: np.ndarray | None = None
    d_u: np.ndarray | None = None
    w: np.ndarray | None = None
    mics: np.ndarray | None = None
    rirs: np.ndarray | None = None
    v: np.ndarray | None = None
    interference: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def near_end_active(self) -> np.ndarray:
        """Sample mask of near-end speech activity (AEC)."""
        return np.abs(self.s) > 0

    def check(self, atol: float = 1e-12):
        if self.kind == "aec":
            if not np.allclose(self.d, self.d_u + self.s + self.n, rtol=0, atol=atol):
                raise AssertionError("d != d_u + s + n")
            lengths = {len(self.u), len(self.d), len(self.d_u), len(self.s), len(self.n)}
        else:
            lengths = {self.mics.shape[-1], self.s.shape[-1], self.n.shape[-1]}
            norm = np.sum(np.abs(self.v) ** 2, axis=0)
            if not np.allclose(norm, self.v.shape[0], atol=1e-6):
                raise AssertionError("steering vector not normalized")
        if len(lengths) != 1:
            raise AssertionError(f"signal lengths differ: {lengths}")
        return self


def _source(rng, n, source_dir):
    if source_dir:
        files = sorted(Path(source_dir).glob("*.wav"))
        if files:
            x = read_wav(files[int(rng.integers(len(files)))])[0]
            if x.size < n:
                x = np.tile(x, -(-n // x.size))
            start = int(rng.integers(0, x.size - n + 1))
            x = x[start: start + n]
            rms = np.sqrt(np.mean(x**2))
            return x / rms if rms > 0 else x
    return speech_like(rng, n)


def gen_aec_scene(seed: int, cfg: AecSceneConfig = AecSceneConfig()) -> Scene:
    rng = np.random.default_rng([seed, 0xAEC])
    n = int(round(cfg.duration * SAMPLE_RATE))
    rt60 = _draw(rng, cfg.rt60)
    path_seed = int(rng.integers(2**31))
    w = gen_echo_path(path_seed, rt60)
    u = 0.1 * _source(rng, n, cfg.source_dir)
    nonlinear = bool(rng.uniform() < cfg.nonlinear)
    drive = loudspeaker_nonlinearity(u) if nonlinear else u
    d_u = sps.fftconvolve(drive, w)[:n]
    echo_power = np.mean(d_u**2)

    ser = _draw(rng, cfg.ser_db)
    snr = _draw(rng, cfg.snr_db)
    s = np.zeros(n)
    talk = cfg.near_end and rng.uniform() < cfg.double_talk
    if talk:
        raw = _source(rng, n, cfg.source_dir)
        length = int(rng.uniform(0.25, 0.5) * n)
        start = int(rng.integers(0, n - length + 1))
        s[start: start + length] = raw[start: start + length] * np.hanning(length) ** 0.1
        s *= _db_gain(echo_power, np.mean(s**2), ser)
    noise = np.zeros(n)
    if cfg.noise:
        mix = rng.uniform()
        noise = mix * rng.standard_normal(n) + (1 - mix) * pink_noise(rng, n)
        noise *= _db_gain(echo_power, np.mean(noise**2), snr)
    d = d_u + s + noise
    meta = {"kind": "aec", "seed": seed, "rt60": rt60, "ser": ser if talk else None, "snr": snr,
            "nonlinear": nonlinear, "duration": cfg.duration}
    return Scene("aec", s=s, n=noise, u=u, d=d, d_u=d_u, w=w, meta=meta)


def _fractional_delay(x: np.ndarray, delay: float) -> np.ndarray:
    """Exact band-limited delay by ``delay`` samples via a zero-padded FFT phase ramp."""
    n = x.shape[-1]
    pad = 1 << int(np.ceil(np.log2(n + 256)))
    spec = np.fft.rfft(x, n=pad)
    k = np.fft.rfftfreq(pad)
    return np.fft.irfft(spec * np.exp(-2j * np.pi * k * delay), n=pad)[:n]


def array_delays(doa_deg: float, mics: int, spacing: float) -> np.ndarray:
    """Far-field plane-wave delays in seconds, relative to the array centre."""
    pos = (np.arange(mics) - (mics - 1) / 2.0) * spacing
    return pos * np.sin(np.deg2rad(doa_deg)) / SPEED_OF_SOUND


def _tail(rng, cfg: GscSceneConfig):
    t = np.arange(cfg.tail_taps) / SAMPLE_RATE
    h = rng.standard_normal(cfg.tail_taps) * np.exp(-6.9 * t / cfg.tail_rt60)
    h[:32] = 0.0  # tail starts 2 ms after the direct path
    return h / np.linalg.norm(h) * 10.0 ** (cfg.tail_db / 20.0)


def _image(rng, src, delays, cfg: GscSceneConfig, tails: bool):
    out, rirs = [], []
    for tau in delays:
        direct = _fractional_delay(src, tau * SAMPLE_RATE)
        if tails:
            tail = _tail(rng, cfg)
            out.append(direct + sps.fftconvolve(src, tail)[: src.size])
            rirs.append(tail)
        else:
            out.append(direct)
            rirs.append(np.zeros(cfg.tail_taps))
    return np.array(out), np.array(rirs)


def gen_gsc_scene(seed: int, cfg: GscSceneConfig = GscSceneConfig(), frame: FrameConfig = FrameConfig()) -> Scene:
    rng = np.random.default_rng([seed, 0x65C])
    n = int(round(cfg.duration * SAMPLE_RATE))
    doa = float(rng.uniform(-60.0, 60.0))
    delays = array_delays(doa, cfg.mics, cfg.spacing)
    s = 0.1 * _source(rng, n, cfg.source_dir)
    target, rirs = _image(rng, s, delays, cfg, cfg.tails)
    target_power = np.mean(target**2)

    interference = np.zeros_like(target)
    doa_i = None
    if cfg.interferer:
        doa_i = doa
        while abs(doa_i - doa) < 20.0:
            doa_i = float(rng.uniform(-80.0, 80.0))
        src_i = _source(rng, n, cfg.source_dir)
        interference, _ = _image(rng, src_i, array_delays(doa_i, cfg.mics, cfg.spacing), cfg, cfg.tails)
        interference *= _db_gain(target_power, np.mean(interference**2), _draw(rng, cfg.sir_db))
    diffuse = np.zeros_like(target)
    if cfg.diffuse:
        diffuse = np.array([pink_noise(rng, n) + 0.5 * rng.standard_normal(n) for _ in range(cfg.mics)])
        diffuse *= _db_gain(target_power, np.mean(diffuse**2), _draw(rng, cfg.snr_db))
    noise = interference + diffuse
    mics = target + noise
    v = steering_vector(delays, frame)
    meta = {"kind": "gsc", "seed": seed, "doa": doa, "doa_interferer": doa_i, "mics": cfg.mics,
            "spacing": cfg.spacing, "duration": cfg.duration}
    return Scene("gsc", s=s, n=noise, mics=mics, rirs=rirs, v=v, interference=interference, meta=meta)


# --- serialization -------------------------------------------------------

_AEC_FILES = ("u", "d", "s", "n", "d_u")


def _fmt(v):
    return "none" if v is None else repr(v)


def write_meta(path, meta: dict):
    Path(path).write_text("".join(f"{k} = {_fmt(v)}\n" for k, v in meta.items()))


def read_meta(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, value = line.partition("=")
        out[key.strip()] = _parse_value(value.strip())
    return out


def _parse_value(v: str):
    if v.lower() == "none":
        return None
    if v in ("True", "False"):
        return v == "True"
    for cast in (int, float):
        try:
            return cast(v)
        except ValueError:
            pass
    return v.strip("'\"")


def save_scene(scene: Scene, directory, config=None):
    """Write WAVs (float32) plus ``meta.txt`` with everything needed to regenerate."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if scene.kind == "aec":
        for name in _AEC_FILES:
            write_wav(directory / f"{name}.wav", getattr(scene, name))
        np.save(directory / "w.npy", scene.w)
    else:
        write_wav(directory / "s.wav", scene.s)
        for m in range(scene.mics.shape[0]):
            write_wav(directory / "mics" / f"{m}.wav", scene.mics[m])
            write_wav(directory / "noise" / f"{m}.wav", scene.n[m])
    meta = dict(scene.meta)
    if config is not None:
        meta.update({f"cfg.{f.name}": getattr(config, f.name) for f in fields(config)})
    write_meta(directory / "meta.txt", meta)


def load_scene(directory) -> Scene:
    """Read a scene directory written by :func:`save_scene` (float32 precision)."""
    directory = Path(directory)
    meta = read_meta(directory / "meta.txt")
    scene_meta = {k: v for k, v in meta.items() if not k.startswith("cfg.")}
    if meta["kind"] == "aec":
        sig = {name: read_wav(directory / f"{name}.wav")[0] for name in _AEC_FILES}
        w = np.load(directory / "w.npy") if (directory / "w.npy").exists() else None
        return Scene("aec", w=w, meta=scene_meta, **sig)
    mics = np.array([read_wav(p)[0] for p in sorted((directory / "mics").glob("*.wav"), key=lambda p: int(p.stem))])
    noise = np.array([read_wav(p)[0] for p in sorted((directory / "noise").glob("*.wav"), key=lambda p: int(p.stem))])
    delays = array_delays(meta["doa"], meta["mics"], meta["spacing"])
    return Scene("gsc", s=read_wav(directory / "s.wav")[0], n=noise, mics=mics,
                 v=steering_vector(delays), meta=scene_meta)


def regenerate(directory) -> Scene:
    """Rebuild a scene bit-exactly from its metadata alone."""
    meta = read_meta(Path(directory) / "meta.txt")
    cfg_items = {k[4:]: v for k, v in meta.items() if k.startswith("cfg.")}
    if meta["kind"] == "aec":
        cfg = AecSceneConfig(**_restore(AecSceneConfig, cfg_items))
        return gen_aec_scene(meta["seed"], cfg)
    cfg = GscSceneConfig(**_restore(GscSceneConfig, cfg_items))
    return gen_gsc_scene(meta["seed"], cfg)


def _restore(cls, items):
    out = {}
    for f in fields(cls):
        if f.name in items:
            v = items[f.name]
            if isinstance(v, str) and v.startswith("("):
                v = tuple(float(x) for x in v.strip("()").split(",") if x.strip())
            out[f.name] = v
    return out
