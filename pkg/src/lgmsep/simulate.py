"""Synthetic reverberant multichannel scenes with ground-truth source images.

Stand-in for measured-RIR corpora: exponentially decaying stochastic tails
after a (fractional) direct-path impulse per microphone, speech-like test
sources, and white sensor noise at a requested SNR.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from scipy.signal import fftconvolve

from .signal import SAMPLE_RATE, MultichannelWave, read_wav, write_wav

SPEED_OF_SOUND = 343.0
RT60_CHOICES = (0.36, 0.61)
# Nominal inter-mic spacings (cm) of the three array presets.
ARRAY_SPACINGS_CM = {
    "3-3-3-8-3-3-3": (3, 3, 3, 8, 3, 3, 3),
    "4-4-4-8-4-4-4": (4, 4, 4, 8, 4, 4, 4),
    "8-8-8-8-8-8-8": (8, 8, 8, 8, 8, 8, 8),
}


@dataclass
class RirSpec:
    rt60: float
    delays: Sequence[float]
    taps: Optional[int] = None
    tail_gain: float = 0.05
    coherence: float = 0.2
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.rt60 <= 0:
            raise ValueError("rt60 must be positive")
        self.delays = [float(d) for d in self.delays]
        if min(self.delays) < 0:
            raise ValueError("delays must be non-negative")
        if self.taps is None:
            self.taps = int(np.ceil(max(self.delays) + 8 + self.rt60 * self.sample_rate))
        if self.taps <= max(self.delays):
            raise ValueError("taps must exceed the direct-path delay")

    @property
    def n_mics(self) -> int:
        return len(self.delays)


def decay_envelope(t: np.ndarray, rt60: float) -> np.ndarray:
    """Amplitude envelope reaching -60 dB energy at t = rt60 (seconds)."""
    return np.exp(-3.0 * np.log(10.0) * t / rt60)


def _fractional_impulse(n: int, delay: float, half_width: int = 8) -> np.ndarray:
    h = np.zeros(n)
    if float(delay).is_integer():
        h[int(delay)] = 1.0
        return h
    t = np.arange(n) - delay
    support = np.abs(t) <= half_width
    h[support] = np.sinc(t[support]) * (0.5 + 0.5 * np.cos(np.pi * t[support] / (half_width + 1)))
    return h


def synth_rir(spec: RirSpec, seed: int) -> np.ndarray:
    """Impulse responses (n_mics, taps)."""
    rng = np.random.default_rng(seed)
    fs = spec.sample_rate
    shared = rng.standard_normal(spec.taps)
    out = np.zeros((spec.n_mics, spec.taps))
    for m, delay in enumerate(spec.delays):
        own = rng.standard_normal(spec.taps)
        noise = np.sqrt(spec.coherence) * shared + np.sqrt(1.0 - spec.coherence) * own
        start = int(np.floor(delay)) + 1
        t = (np.arange(spec.taps) - start) / fs
        tail = np.zeros(spec.taps)
        tail[start:] = spec.tail_gain * noise[start:] * decay_envelope(t[start:], spec.rt60)
        out[m] = _fractional_impulse(spec.taps, delay) + tail
    return out


def array_delays(
    spacing_m: Sequence[float], azimuth: float, distance: float = 1.0, fs: int = SAMPLE_RATE
) -> List[float]:
    """Far-field direct-path delays (samples) for a linear array."""
    positions = np.concatenate([[0.0], np.cumsum(spacing_m)])
    positions -= positions.mean()
    base = distance / SPEED_OF_SOUND * fs
    return [base - p * np.cos(azimuth) / SPEED_OF_SOUND * fs for p in positions]


def synth_speech(duration: float, seed: int, fs: int = SAMPLE_RATE) -> np.ndarray:
    """Speech-like signal: voiced harmonic syllables, fricative bursts and pauses."""
    rng = np.random.default_rng(seed)
    n = int(round(duration * fs))
    out = np.zeros(n)
    pos = int(rng.uniform(0.0, 0.15) * fs)
    f0_base = rng.uniform(90.0, 240.0)
    while pos < n:
        seg = int(rng.uniform(0.08, 0.3) * fs)
        seg = min(seg, n - pos)
        t = np.arange(seg) / fs
        env = np.sin(np.pi * np.arange(seg) / max(seg, 1)) ** 2
        if rng.random() < 0.75:
            f0 = f0_base * rng.uniform(0.8, 1.25) * (1.0 + rng.uniform(-0.2, 0.2) * t / max(t[-1], 1e-3))
            phase = 2 * np.pi * np.cumsum(f0) / fs
            formants = rng.uniform([300, 900, 2000], [900, 2200, 3200])
            sig = np.zeros(seg)
            for h in range(1, int(3800 / f0.max()) + 1):
                fh = h * f0.mean()
                gain = sum(np.exp(-0.5 * ((fh - f) / 150.0) ** 2) for f in formants) + 0.05
                sig += gain / np.sqrt(h) * np.sin(h * phase + rng.uniform(0, 2 * np.pi))
        else:
            white = rng.standard_normal(seg)
            sig = np.diff(white, prepend=0.0) * 0.7
        out[pos : pos + seg] += env * sig
        pos += seg + int(rng.uniform(0.02, 0.2) * fs)
    return out / (np.sqrt(np.mean(out**2)) + 1e-12) * 0.1


def power(x: np.ndarray) -> float:
    return float(np.mean(np.asarray(x, dtype=float) ** 2))


@dataclass
class MixtureScene:
    """x = sum_i images[i] + noise, all float32-exact arrays (n_mics, T)."""

    sources: np.ndarray
    rirs: np.ndarray
    images: np.ndarray
    noise: np.ndarray
    mixture: np.ndarray
    sample_rate: int = SAMPLE_RATE
    meta: dict = field(default_factory=dict)

    def check_identity(self) -> bool:
        return bool(np.array_equal(mix_images(self.images, self.noise), self.mixture))


def mix_images(images: np.ndarray, noise: np.ndarray) -> np.ndarray:
    """Fixed-order float32 sum; the same call reproduces stored mixtures bit-exactly."""
    total = np.zeros(noise.shape, dtype=np.float32)
    for img in images.astype(np.float32):
        total = total + img
    return total + noise.astype(np.float32)


def make_scene(
    sources: Sequence[np.ndarray],
    rirspecs: Sequence[RirSpec],
    sir_db: float = 0.0,
    snr_db: float = np.inf,
    seed: int = 0,
    sample_rate: int = SAMPLE_RATE,
) -> MixtureScene:
    """Convolve, scale source 2.. to ``sir_db`` below source 1, add white noise."""
    if len(sources) != len(rirspecs):
        raise ValueError("one RirSpec per source required")
    rng = np.random.default_rng(seed)
    n = min(len(s) for s in sources)
    rirs = []
    images = []
    for i, (src, rs) in enumerate(zip(sources, rirspecs)):
        src = np.asarray(src, dtype=float)[:n]
        if power(src) == 0.0:
            raise ValueError(f"source {i} is silent")
        h = synth_rir(rs, int(rng.integers(2**31)))
        rirs.append(h)
        images.append(np.stack([fftconvolve(src, hm)[:n] for hm in h]))
    images = np.stack(images)
    ref_power = power(images[0])
    for i in range(1, len(images)):
        images[i] *= np.sqrt(ref_power / power(images[i]) / 10 ** (sir_db / 10))
    images = images.astype(np.float32)
    noise = np.zeros(images.shape[1:], dtype=np.float32)
    if np.isfinite(snr_db):
        target = power(np.sum(images.astype(float), axis=0)) / 10 ** (snr_db / 10)
        noise = rng.standard_normal(images.shape[1:])
        noise = (noise * np.sqrt(target / power(noise))).astype(np.float32)
    max_len = max(h.shape[1] for h in rirs)
    rir_arr = np.zeros((len(rirs), rirs[0].shape[0], max_len))
    for i, h in enumerate(rirs):
        rir_arr[i, :, : h.shape[1]] = h
    return MixtureScene(
        sources=np.stack([np.asarray(s, dtype=float)[:n] for s in sources]),
        rirs=rir_arr,
        images=images,
        noise=noise,
        mixture=mix_images(images, noise),
        sample_rate=sample_rate,
        meta={"seed": seed, "sir_db": sir_db, "snr_db": snr_db},
    )


def _draw(rng: np.random.Generator, bounds) -> float:
    lo, hi = bounds
    return float(lo) if lo == hi else float(rng.uniform(lo, hi))


def random_scene(
    seed: int,
    n_sources: int = 2,
    n_mics: int = 2,
    duration: float = 2.0,
    rt60_choices: Sequence[float] = RT60_CHOICES,
    snr_range=(20.0, 30.0),
    sir_range=(-5.0, 5.0),
    array: Optional[str] = None,
) -> MixtureScene:
    """Scene with randomly drawn geometry, RT60, SIR and SNR, all from ``seed``."""
    rng = np.random.default_rng(seed)
    preset = array or list(ARRAY_SPACINGS_CM)[rng.integers(len(ARRAY_SPACINGS_CM))]
    gaps = np.array(ARRAY_SPACINGS_CM[preset]) / 100.0
    mics = np.sort(rng.choice(len(gaps) + 1, size=n_mics, replace=False))
    positions = np.concatenate([[0.0], np.cumsum(gaps)])[mics]
    spacing = np.diff(positions)
    rt60 = float(rng.choice(rt60_choices))
    azimuths = rng.uniform(np.deg2rad(15), np.deg2rad(165), size=n_sources)
    while n_sources > 1 and np.min(np.diff(np.sort(azimuths))) < np.deg2rad(20):
        azimuths = rng.uniform(np.deg2rad(15), np.deg2rad(165), size=n_sources)
    coherence = float(np.exp(-np.mean(spacing) / 0.05)) if n_mics > 1 else 1.0
    rirspecs = [
        RirSpec(rt60, array_delays(spacing, az), coherence=coherence) for az in azimuths
    ]
    sources = [synth_speech(duration, int(rng.integers(2**31))) for _ in range(n_sources)]
    sir = _draw(rng, sir_range)
    snr = _draw(rng, snr_range)
    scene = make_scene(sources, rirspecs, sir, snr, int(rng.integers(2**31)))
    scene.meta.update(
        {
            "seed": seed,
            "rt60": rt60,
            "array": preset,
            "mics": mics.tolist(),
            "spacing_m": spacing.tolist(),
            "azimuth_deg": np.rad2deg(azimuths).tolist(),
        }
    )
    return scene


def write_scene(scene: MixtureScene, directory: str | os.PathLike):
    os.makedirs(directory, exist_ok=True)
    fs = scene.sample_rate
    write_wav(os.path.join(directory, "mixture.wav"), MultichannelWave(scene.mixture, fs))
    for i, img in enumerate(scene.images):
        write_wav(os.path.join(directory, f"source_{i}_image.wav"), MultichannelWave(img, fs))
    write_wav(os.path.join(directory, "noise.wav"), MultichannelWave(scene.noise, fs))
    meta = dict(scene.meta)
    meta["n_sources"] = len(scene.images)
    with open(os.path.join(directory, "scene.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True, default=float)


def read_scene(directory: str | os.PathLike) -> MixtureScene:
    with open(os.path.join(directory, "scene.json")) as fh:
        meta = json.load(fh)
    mix = read_wav(os.path.join(directory, "mixture.wav"))
    images = np.stack(
        [
            read_wav(os.path.join(directory, f"source_{i}_image.wav")).samples
            for i in range(meta["n_sources"])
        ]
    ).astype(np.float32)
    noise = read_wav(os.path.join(directory, "noise.wav")).samples.astype(np.float32)
    return MixtureScene(
        sources=np.zeros((0,)),
        rirs=np.zeros((0,)),
        images=images,
        noise=noise,
        mixture=mix.samples.astype(np.float32),
        sample_rate=mix.sample_rate,
        meta=meta,
    )
