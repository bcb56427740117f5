"""Local Gaussian model separation with reverberation and noise submodels.

The mixture covariance at frame ``l`` and frequency ``k`` is

    R_x(l, k) = sum_i v[i, l, k] R[i, k]
              + sum_{i, d=1..L_r} v[i, l - d, k] H[i, d - 1, k]
              + R_n[k]

and every additive term is a zero-mean complex Gaussian component. The
parameters are fitted per frequency by EM, sources are aligned across
frequencies from their activity envelopes, and each source is extracted
with the multichannel Wiener filter.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from ._linalg import (
    TINY,
    eigvalsh,
    floor_eigenvalues,
    hermitize,
    inv_loaded,
    outer,
    relative_floor,
    trace,
)
from .signal import Spectrogram

N_EM = 20
V_FLOOR = 1e-8
EIG_FLOOR = 1e-7
LOADING = 1e-6
PERM_PASSES = 10


@dataclass
class ScmParams:
    """Spatial covariance model parameters.

    Shapes: ``v`` (N_s, L, K); ``R`` (N_s, K, M, M); ``H`` (N_s, L_r, K, M, M)
    where ``H[:, d - 1]`` is the tap with delay ``d``; ``Rn`` (K, M, M).
    """

    v: np.ndarray
    R: np.ndarray
    H: np.ndarray
    Rn: np.ndarray

    @property
    def n_sources(self) -> int:
        return self.v.shape[0]

    @property
    def n_frames(self) -> int:
        return self.v.shape[1]

    @property
    def n_freq(self) -> int:
        return self.v.shape[2]

    @property
    def n_reverb(self) -> int:
        return self.H.shape[1]

    @property
    def n_mics(self) -> int:
        return self.R.shape[-1]

    def copy(self) -> "ScmParams":
        return ScmParams(self.v.copy(), self.R.copy(), self.H.copy(), self.Rn.copy())

    def check(self, tol: float = 1e-10):
        """Raise ValueError if a covariance is non-Hermitian or non-PSD."""
        for name in ("R", "H", "Rn"):
            a = getattr(self, name)
            if a.size == 0:
                continue
            if not np.allclose(a, np.conj(np.swapaxes(a, -1, -2)), atol=1e-12 * max(1.0, np.abs(a).max())):
                raise ValueError(f"{name} not Hermitian")
            if np.any(eigvalsh(hermitize(a))[..., 0] < -tol * np.abs(trace(a)) - TINY):
                raise ValueError(f"{name} not PSD")
        if np.any(self.v < 0) or not np.all(np.isfinite(self.v)):
            raise ValueError("v must be finite and non-negative")


@dataclass
class GaussianPosterior:
    """Per-source posterior mean (N_s, L, K, M) and covariance (N_s, L, K, M, M)."""

    mu: np.ndarray
    V: np.ndarray


def _bins(spec: Spectrogram) -> np.ndarray:
    """(M, L, K) -> (L, K, M)."""
    return np.transpose(spec.bins, (1, 2, 0))


def frequency_power(x: np.ndarray) -> np.ndarray:
    """Mean power per frequency of (L, K, M) bins."""
    return np.mean(np.abs(x) ** 2, axis=(0, 2))


def delayed(v: np.ndarray, d: int) -> np.ndarray:
    """v[..., l - d, :] along the frame axis with zeros before the start."""
    out = np.zeros_like(v)
    if d < v.shape[-2]:
        out[..., d:, :] = v[..., : v.shape[-2] - d, :]
    return out


def assemble_scm(params: ScmParams, l: Optional[int] = None, k: Optional[int] = None) -> np.ndarray:
    """Mixture covariance for all (l, k), or for a single bin when both are given."""
    total = params.Rn[None] + np.einsum("ilk,ikab->lkab", params.v, params.R)
    for d in range(1, params.n_reverb + 1):
        total = total + np.einsum("ilk,ikab->lkab", delayed(params.v, d), params.H[:, d - 1])
    total = hermitize(total)
    if l is not None and k is not None:
        return total[l, k]
    return total


def wiener(x: np.ndarray, C: np.ndarray, Rx_inv: np.ndarray):
    """Posterior moments of a component with covariance C given observation x."""
    W = C @ Rx_inv
    mu = np.einsum("...ab,...b->...a", W, x)
    V = hermitize(C - W @ C)
    return mu, V, W


def mwf_posterior(x: np.ndarray, params: ScmParams, i: int, l: int, k: int):
    """Wiener-filter posterior (mu, V) of source ``i`` at one bin."""
    x = np.asarray(x)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite observation")
    C = params.v[i, l, k] * params.R[i, k]
    Rx_inv = inv_loaded(assemble_scm(params, l, k), LOADING)
    mu, V, _ = wiener(x, C, Rx_inv)
    return mu, V


def posterior(spec: Spectrogram, params: ScmParams) -> GaussianPosterior:
    """Speech posteriors for every source and bin."""
    x = _bins(spec)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite observation")
    Rx_inv = inv_loaded(assemble_scm(params), LOADING)
    mus, Vs = [], []
    for i in range(params.n_sources):
        C = params.v[i][..., None, None] * params.R[i][None]
        mu, V, _ = wiener(x, C, Rx_inv)
        mus.append(mu)
        Vs.append(V)
    return GaussianPosterior(np.stack(mus), np.stack(Vs))


def log_likelihood(spec: Spectrogram, params: ScmParams) -> float:
    """sum_{l,k} log N(x | 0, R_x) with the exact (unloaded) model covariance."""
    x = _bins(spec)
    Rx = assemble_scm(params)
    sign, logdet = np.linalg.slogdet(Rx)
    quad = np.real(np.einsum("lka,lka->lk", np.conj(x), np.linalg.solve(Rx, x[..., None])[..., 0]))
    return float(-np.sum(x.shape[-1] * np.log(np.pi) + logdet + quad))


def init_params(
    spec: Spectrogram, n_sources: int = 2, n_reverb: int = 1, seed: int = 0
) -> ScmParams:
    rng = np.random.default_rng(seed)
    x = _bins(spec)
    n_frames, n_freq, n_mics = x.shape
    power = frequency_power(x)
    v_floor = V_FLOOR * power + TINY
    v = np.sum(np.abs(x) ** 2, axis=-1) / (n_mics * n_sources)
    v = np.maximum(np.broadcast_to(v, (n_sources, n_frames, n_freq)), v_floor)
    A = rng.standard_normal((n_sources, n_freq, n_mics, n_mics)) + 1j * rng.standard_normal(
        (n_sources, n_freq, n_mics, n_mics)
    )
    R = np.eye(n_mics) + 0.1 * (A + np.conj(np.swapaxes(A, -1, -2)))
    R = floor_eigenvalues(R, relative_floor(R, EIG_FLOOR))
    H = np.broadcast_to(0.05 * np.eye(n_mics), (n_sources, n_reverb, n_freq, n_mics, n_mics)).astype(complex)
    Rn = (0.01 * power + TINY)[:, None, None] * np.eye(n_mics)
    return ScmParams(v.copy(), R, H.copy(), Rn.astype(complex))


def _floor_cov(a: np.ndarray) -> np.ndarray:
    return floor_eigenvalues(a, relative_floor(hermitize(a), EIG_FLOOR))


def em_iterate(spec: Spectrogram, params: ScmParams) -> ScmParams:
    """One EM sweep: Wiener moments of all components, then closed-form M-step.

    ``v`` is updated from the speech moments with the previous ``R``; ``R``,
    ``H`` and ``R_n`` are then re-estimated with the new ``v``.
    """
    x = _bins(spec)
    n_frames, n_freq, n_mics = x.shape
    v_floor = V_FLOOR * frequency_power(x) + TINY
    Rx_inv = inv_loaded(assemble_scm(params), LOADING)

    new_v = np.empty_like(params.v)
    speech_moments = []
    for i in range(params.n_sources):
        C = params.v[i][..., None, None] * params.R[i][None]
        mu, V, _ = wiener(x, C, Rx_inv)
        moment = V + outer(mu)
        speech_moments.append(moment)
        R_inv = inv_loaded(params.R[i], LOADING)
        new_v[i] = np.maximum(trace(R_inv[None] @ moment) / n_mics, v_floor)

    new_R = np.empty_like(params.R)
    for i in range(params.n_sources):
        new_R[i] = np.mean(speech_moments[i] / new_v[i][..., None, None], axis=0)
    del speech_moments

    new_H = np.empty_like(params.H)
    for i in range(params.n_sources):
        for d in range(1, params.n_reverb + 1):
            C = delayed(params.v[i], d)[..., None, None] * params.H[i, d - 1][None]
            mu, V, _ = wiener(x[d:], C[d:], Rx_inv[d:])
            moment = V + outer(mu)
            if len(moment):
                new_H[i, d - 1] = np.mean(moment / new_v[i, : n_frames - d][..., None, None], axis=0)
            else:
                new_H[i, d - 1] = params.H[i, d - 1]

    Rn = np.broadcast_to(params.Rn[None], (n_frames,) + params.Rn.shape)
    mu, V, _ = wiener(x, Rn, Rx_inv)
    new_Rn = np.mean(V + outer(mu), axis=0)

    return ScmParams(new_v, _floor_cov(new_R), _floor_cov(new_H), _floor_cov(new_Rn))


def _corr(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    den = np.sqrt(np.sum(a * a) * np.sum(b * b))
    return float(np.sum(a * b) / den) if den > 0 else 0.0


def _best_order(env_k: np.ndarray, centroid: np.ndarray, candidates) -> Tuple[int, ...]:
    best, best_score = candidates[0], -np.inf
    for p in candidates:
        score = sum(_corr(env_k[p[j]], centroid[j]) for j in range(len(p)))
        if score > best_score:
            best, best_score = p, score
    return best


def solve_permutation(params: ScmParams, refine_passes: int = PERM_PASSES) -> np.ndarray:
    """Per-frequency source order aligning activity envelopes.

    Returns an int array (K, N_s): aligned source ``j`` at frequency ``k`` is
    the input source ``perm[k, j]``. Envelopes are log-compressed normalized
    variances. A greedy pass visits frequencies from the most to the least
    powerful and matches each to the running sum of aligned envelopes; the
    refinement passes then re-match every frequency against the sum of all
    others until nothing changes.
    """
    n_sources, _, n_freq = params.v.shape
    perm = np.tile(np.arange(n_sources), (n_freq, 1))
    if n_sources < 2:
        return perm
    env = np.log(params.v / (np.sum(params.v, axis=1, keepdims=True) + TINY) + TINY)
    env = np.transpose(env, (2, 0, 1))
    power = np.einsum("ilk,ik->k", params.v, trace(params.R) / params.n_mics)
    order = np.argsort(-power, kind="stable")
    candidates = list(itertools.permutations(range(n_sources)))

    aligned = env.copy()
    centroid = env[order[0]].copy()
    for k in order[1:]:
        perm[k] = _best_order(env[k], centroid, candidates)
        aligned[k] = env[k][perm[k]]
        centroid += aligned[k]

    total = aligned.sum(axis=0)
    for _ in range(refine_passes):
        changed = False
        for k in order:
            best = _best_order(env[k], total - aligned[k], candidates)
            if tuple(perm[k]) != best:
                changed = True
                perm[k] = best
                total += env[k][list(best)] - aligned[k]
                aligned[k] = env[k][list(best)]
        if not changed:
            break
    return perm


def apply_permutation(params: ScmParams, perm: np.ndarray) -> ScmParams:
    k = np.arange(params.n_freq)
    v = np.stack([params.v[perm[:, j], :, k].T for j in range(params.n_sources)])
    R = np.stack([params.R[perm[:, j], k] for j in range(params.n_sources)])
    H = np.stack([np.swapaxes(params.H[perm[:, j], :, k], 0, 1) for j in range(params.n_sources)])
    return ScmParams(v, R, H, params.Rn.copy())


def fit(
    spec: Spectrogram,
    params: ScmParams,
    n_iter: int = N_EM,
    history: Optional[List[float]] = None,
) -> ScmParams:
    """Run ``n_iter`` EM sweeps; appends log-likelihoods to ``history`` if given."""
    if history is not None:
        history.append(log_likelihood(spec, params))
    for _ in range(n_iter):
        params = em_iterate(spec, params)
        if history is not None:
            history.append(log_likelihood(spec, params))
    return params


def pcsg_separate(
    spec: Spectrogram,
    n_sources: int = 2,
    n_reverb: int = 1,
    n_em: int = N_EM,
    seed: int = 0,
    history: Optional[List[float]] = None,
) -> Tuple[GaussianPosterior, ScmParams]:
    """Unsupervised separation: init, EM, permutation alignment, Wiener posteriors."""
    params = init_params(spec, n_sources, n_reverb, seed)
    params = fit(spec, params, n_em, history)
    params = apply_permutation(params, solve_permutation(params))
    return posterior(spec, params), params
