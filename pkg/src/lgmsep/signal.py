"""Waveform containers, STFT analysis/synthesis, WAV I/O and mask-net features."""

from __future__ import annotations

import itertools
import logging
import os
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy.io import wavfile

logger = logging.getLogger(__name__)

FRAME_SIZE = 256
HOP = 64
SAMPLE_RATE = 8000
EPS_MAG = 1e-10

SPEC_KINDS = ("mixture", "dereverberated", "source_image")


@dataclass
class MultichannelWave:
    """Time-domain signal, shape (n_channels, n_samples)."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=float)
        if samples.ndim == 1:
            samples = samples[None, :]
        if samples.ndim != 2:
            raise ValueError("samples must be (channels, samples)")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        self.samples = samples

    @property
    def n_channels(self) -> int:
        return self.samples.shape[0]

    def __len__(self) -> int:
        return self.samples.shape[1]


@dataclass
class Spectrogram:
    """Complex multichannel STFT, bins shaped (n_mics, n_frames, n_freq).

    ``pad`` is the number of leading zeros inserted before framing and
    ``length`` the original sample count; both are only needed by
    :func:`istft` to trim the synthesized signal.
    """

    bins: np.ndarray
    frame_size: int = FRAME_SIZE
    hop: int = HOP
    kind: str = "mixture"
    sample_rate: int = SAMPLE_RATE
    pad: int = 0
    length: Optional[int] = None

    def __post_init__(self):
        bins = np.asarray(self.bins)
        if bins.ndim != 3:
            raise ValueError("bins must be (mics, frames, freqs)")
        if bins.shape[2] != self.frame_size // 2 + 1:
            raise ValueError(
                f"K={bins.shape[2]} inconsistent with frame_size={self.frame_size}"
            )
        if self.kind not in SPEC_KINDS:
            raise ValueError(f"unknown spectrogram kind {self.kind!r}")
        if not np.all(np.isfinite(bins)):
            raise ValueError("spectrogram has non-finite entries")
        self.bins = bins.astype(complex, copy=False)

    @property
    def n_mics(self) -> int:
        return self.bins.shape[0]

    @property
    def n_frames(self) -> int:
        return self.bins.shape[1]

    @property
    def n_freq(self) -> int:
        return self.bins.shape[2]

    def with_bins(self, bins: np.ndarray, kind: Optional[str] = None) -> "Spectrogram":
        return Spectrogram(
            bins,
            frame_size=self.frame_size,
            hop=self.hop,
            kind=kind or self.kind,
            sample_rate=self.sample_rate,
            pad=self.pad,
            length=self.length,
        )

    def frames(self, start: int, stop: int) -> "Spectrogram":
        """Frame slice; drops time-domain metadata since it no longer applies."""
        return Spectrogram(
            self.bins[:, start:stop],
            frame_size=self.frame_size,
            hop=self.hop,
            kind=self.kind,
            sample_rate=self.sample_rate,
        )


def sqrt_hann(frame_size: int) -> np.ndarray:
    n = np.arange(frame_size)
    return np.sqrt(0.5 - 0.5 * np.cos(2 * np.pi * n / frame_size))


def _synthesis_window(frame_size: int, hop: int) -> np.ndarray:
    win = sqrt_hann(frame_size)
    overlap = np.zeros(frame_size)
    for shift in range(0, frame_size, hop):
        overlap += np.roll(win**2, shift)
    if np.ptp(overlap) > 1e-12 * overlap.max():
        raise ValueError(f"hop={hop} violates COLA for frame_size={frame_size}")
    return win / overlap[0]


def _check_framing(frame_size: int, hop: int):
    if frame_size < 2 or frame_size & (frame_size - 1):
        raise ValueError("frame_size must be a power of two")
    if hop <= 0 or frame_size % hop:
        raise ValueError("hop must divide frame_size")


def stft(wave: MultichannelWave, frame_size: int = FRAME_SIZE, hop: int = HOP) -> Spectrogram:
    _check_framing(frame_size, hop)
    _synthesis_window(frame_size, hop)
    x = wave.samples
    n = x.shape[1]
    if n < frame_size:
        raise ValueError("input too short")
    pad = frame_size - hop
    n_frames = -(-(n + pad) // hop)
    total = (n_frames - 1) * hop + frame_size
    padded = np.zeros((x.shape[0], total))
    padded[:, pad : pad + n] = x
    frames = np.lib.stride_tricks.sliding_window_view(padded, frame_size, axis=1)[:, ::hop]
    bins = np.fft.rfft(frames * sqrt_hann(frame_size), axis=-1)
    return Spectrogram(
        bins,
        frame_size=frame_size,
        hop=hop,
        kind="mixture",
        sample_rate=wave.sample_rate,
        pad=pad,
        length=n,
    )


def istft(spec: Spectrogram) -> MultichannelWave:
    _check_framing(spec.frame_size, spec.hop)
    if spec.pad < 0 or (spec.length is not None and spec.length < 0):
        raise ValueError("inconsistent spectrogram metadata")
    n_fft, hop = spec.frame_size, spec.hop
    frames = np.fft.irfft(spec.bins, n=n_fft, axis=-1) * _synthesis_window(n_fft, hop)
    n_mics, n_frames, _ = frames.shape
    total = (n_frames - 1) * hop + n_fft
    if spec.length is not None and spec.pad + spec.length > total:
        raise ValueError("inconsistent spectrogram metadata")
    out = np.zeros((n_mics, total))
    for l in range(n_frames):
        out[:, l * hop : l * hop + n_fft] += frames[:, l]
    stop = total if spec.length is None else spec.pad + spec.length
    return MultichannelWave(out[:, spec.pad : stop], sample_rate=spec.sample_rate)


@dataclass
class FeatureFrameSeq:
    """Per-frame features: [log|x_0| (K) | cos,sin IPD per mic pair (2K each)]."""

    features: np.ndarray
    n_freq: int
    pairs: List[Tuple[int, int]] = field(default_factory=list)

    @property
    def logmag(self) -> np.ndarray:
        return self.features[:, : self.n_freq]

    def ipd(self, pair: int) -> Tuple[np.ndarray, np.ndarray]:
        k = self.n_freq
        base = k + 2 * k * pair
        return self.features[:, base : base + k], self.features[:, base + k : base + 2 * k]


def mic_pairs(n_mics: int) -> List[Tuple[int, int]]:
    return list(itertools.combinations(range(n_mics), 2))


def extract_features(spec: Spectrogram, eps_mag: float = EPS_MAG) -> FeatureFrameSeq:
    x = spec.bins
    pairs = mic_pairs(spec.n_mics)
    if not pairs:
        logger.warning("single-channel input: phase-difference features are empty")
    cols = [np.log(np.abs(x[0]) + eps_mag)]
    for a, b in pairs:
        phase = np.angle(x[a] * np.conj(x[b]))
        cols += [np.cos(phase), np.sin(phase)]
    return FeatureFrameSeq(np.concatenate(cols, axis=1), spec.n_freq, pairs)


def feature_dim(n_freq: int, n_mics: int) -> int:
    return n_freq + 2 * n_freq * len(mic_pairs(n_mics))


def read_wav(path: str | os.PathLike) -> MultichannelWave:
    """Read 16-bit PCM or 32-bit float WAV into floats in [-1, 1]."""
    rate, data = wavfile.read(path)
    if data.dtype == np.int16:
        data = data.astype(float) / 32768.0
    elif data.dtype == np.int32:
        data = data.astype(float) / 2147483648.0
    elif data.dtype.kind == "f":
        data = data.astype(float)
    else:
        raise ValueError(f"unsupported WAV sample format {data.dtype}")
    if data.ndim == 1:
        data = data[:, None]
    return MultichannelWave(data.T, sample_rate=rate)


def write_wav(path: str | os.PathLike, wave: MultichannelWave, pcm16: bool = False):
    data = wave.samples.T
    if pcm16:
        data = np.clip(np.round(data * 32767.0), -32768, 32767).astype(np.int16)
    else:
        data = data.astype(np.float32)
    if data.shape[1] == 1:
        data = data[:, 0]
    wavfile.write(path, int(wave.sample_rate), data)
