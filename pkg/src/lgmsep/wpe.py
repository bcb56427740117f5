"""Weighted prediction error (WPE) dereverberation, batch MIMO variant."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List

import numpy as np

from ._linalg import TINY, eigvalsh, hermitize
from .signal import Spectrogram

DELAY = 2
TAPS = 16
ITERS = 3
LAMBDA_FLOOR = 1e-8
GRAM_LOADING = 1e-6


@dataclass
class WpeFilter:
    """Prediction filter W_k, shape (K, N_m, N_m * (taps - delay)).

    Column ``(d - delay) * N_m + m`` multiplies mic ``m`` delayed by ``d``
    frames, ``delay <= d < taps``.
    """

    W: np.ndarray
    delay: int = DELAY
    taps: int = TAPS
    objective: List[float] = field(default_factory=list)

    def __post_init__(self):
        if self.delay < 1 or self.taps <= self.delay:
            raise ValueError("need 1 <= delay < taps")
        if not np.all(np.isfinite(self.W)):
            raise ValueError("non-finite WPE filter")

    @property
    def n_mics(self) -> int:
        return self.W.shape[1]


def _regressor(x: np.ndarray, delay: int, taps: int) -> np.ndarray:
    """x: (K, L, M) -> stacked delayed frames (K, L, M * (taps - delay))."""
    n_freq, n_frames, n_mics = x.shape
    out = np.zeros((n_freq, n_frames, n_mics * (taps - delay)), dtype=complex)
    for j, d in enumerate(range(delay, taps)):
        if d < n_frames:
            out[:, d:, j * n_mics : (j + 1) * n_mics] = x[:, : n_frames - d]
    return out


def _objective(y: np.ndarray, lam: np.ndarray) -> float:
    n_mics = y.shape[-1]
    return float(np.sum(np.sum(np.abs(y) ** 2, axis=-1) / lam + n_mics * np.log(lam)))


def _variance(y: np.ndarray, floor: np.ndarray) -> np.ndarray:
    return np.maximum(np.mean(np.abs(y) ** 2, axis=-1), floor)


def _solve_weighted(x, big_x, lam):
    w = 1.0 / lam
    gram = np.einsum("kl,klm,kln->kmn", w, big_x, np.conj(big_x))
    cross = np.einsum("kl,kla,klm->kam", w, x, np.conj(big_x))
    gram = hermitize(gram)
    dim = gram.shape[-1]
    load = GRAM_LOADING * np.real(np.trace(gram, axis1=1, axis2=2)) / dim + TINY
    singular = eigvalsh(gram)[:, 0] < load
    if np.any(singular):
        gram[singular] += load[singular, None, None] * np.eye(dim)
    # W G^T = C  with G = sum X X^H / lam  (rows of X as regressors)
    return np.swapaxes(np.linalg.solve(np.swapaxes(gram, 1, 2), np.swapaxes(cross, 1, 2)), 1, 2)


def wpe_fit(
    spec: Spectrogram, delay: int = DELAY, taps: int = TAPS, iters: int = ITERS
) -> WpeFilter:
    """Alternate per-frame variance estimation and weighted least squares.

    The recorded ``objective`` is sum(|y|^2 / lam + N_m log lam) after each
    filter update and is non-increasing.
    """
    if delay < 1 or taps <= delay:
        raise ValueError("need 1 <= delay < taps")
    if spec.n_frames < taps + 8:
        raise ValueError(f"need at least {taps + 8} frames for WPE, got {spec.n_frames}")
    x = np.transpose(spec.bins, (2, 1, 0))
    big_x = _regressor(x, delay, taps)
    power = np.mean(np.abs(x) ** 2, axis=(1, 2))
    floor = (LAMBDA_FLOOR * power + TINY)[:, None]
    y = x
    history = []
    W = np.zeros((x.shape[0], x.shape[2], big_x.shape[2]), dtype=complex)
    for _ in range(iters):
        lam = _variance(y, floor)
        W = _solve_weighted(x, big_x, lam)
        y = x - np.einsum("kam,klm->kla", W, big_x)
        history.append(_objective(y, lam))
    return WpeFilter(W, delay, taps, history)


def wpe_apply(spec: Spectrogram, filt: WpeFilter) -> Spectrogram:
    if filt.W.shape[0] != spec.n_freq or filt.n_mics != spec.n_mics:
        raise ValueError("WPE filter shape does not match spectrogram")
    if filt.W.shape[2] != spec.n_mics * (filt.taps - filt.delay):
        raise ValueError("WPE filter tap count inconsistent")
    x = np.transpose(spec.bins, (2, 1, 0))
    big_x = _regressor(x, filt.delay, filt.taps)
    y = x - np.einsum("kam,klm->kla", filt.W, big_x)
    return spec.with_bins(np.transpose(y, (2, 1, 0)), kind="dereverberated")


def dereverberate(
    spec: Spectrogram, delay: int = DELAY, taps: int = TAPS, iters: int = ITERS
) -> Spectrogram:
    return wpe_apply(spec, wpe_fit(spec, delay, taps, iters))
