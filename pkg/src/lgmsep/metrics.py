"""Separation and enhancement scores: BSS-Eval SDR/SIR, cepstral distance, FWSegSNR."""

from __future__ import annotations

import csv
import io
import itertools
import json
from dataclasses import asdict, dataclass
from typing import Dict, List, Sequence

import numpy as np
from scipy.linalg import solve_toeplitz, toeplitz
from scipy.signal import fftconvolve

from .signal import SAMPLE_RATE

FILTER_LEN = 512
DB_CAP = 100.0
CD_ORDER = 10
CD_CLAMP = (0.0, 10.0)
FWSEG_CLAMP = (-10.0, 35.0)
FWSEG_GAMMA = 0.2
FWSEG_BANDS = 25


def _db(num: float, den: float) -> float:
    if den <= num * 10 ** (-DB_CAP / 10):
        return DB_CAP
    return float(np.clip(10 * np.log10(num / den), -DB_CAP, DB_CAP))


def _xcorr(a: np.ndarray, b: np.ndarray, lags: int) -> np.ndarray:
    """sum_t a[t + tau] b[t] for tau = 0..lags-1."""
    n = len(a)
    nfft = int(2 ** np.ceil(np.log2(n + lags)))
    c = np.fft.irfft(np.fft.rfft(a, nfft) * np.conj(np.fft.rfft(b, nfft)), nfft)
    return c[:lags]


def _gram(refs: np.ndarray, L: int) -> np.ndarray:
    n_src = len(refs)
    G = np.zeros((n_src * L, n_src * L))
    for i in range(n_src):
        for j in range(i, n_src):
            # <ref_i delayed by p, ref_j delayed by q> depends on p - q
            pos = _xcorr(refs[j], refs[i], L)
            neg = _xcorr(refs[i], refs[j], L)
            block = toeplitz(pos, neg)
            G[i * L : (i + 1) * L, j * L : (j + 1) * L] = block
            G[j * L : (j + 1) * L, i * L : (i + 1) * L] = block.T
    return G


def _project(refs: np.ndarray, est: np.ndarray, G: np.ndarray, L: int) -> np.ndarray:
    n_src, n = refs.shape
    D = np.concatenate([_xcorr(est, r, L) for r in refs])
    try:
        coef = np.linalg.solve(G, D)
    except np.linalg.LinAlgError:
        coef = np.linalg.lstsq(G, D, rcond=None)[0]
    out = np.zeros(n + L - 1)
    for i in range(n_src):
        out += fftconvolve(refs[i], coef[i * L : (i + 1) * L])
    return out[:n]


def _decompose(refs, est, j, G_all, G_own, L):
    target = _project(refs[j : j + 1], est, G_own, L)
    both = _project(refs, est, G_all, L)
    return target, both - target, est - both


def bss_eval(est: np.ndarray, ref: np.ndarray, filter_len: int = FILTER_LEN) -> Dict:
    """SDR/SIR per reference with the best (max mean SDR) estimate assignment.

    ``est`` and ``ref`` are (N_s, T) single-channel signals. Returns a dict
    with ``sdr``, ``sir`` (lists indexed by reference) and ``perm`` where
    ``perm[j]`` is the estimate scored against reference ``j``.
    """
    est = np.atleast_2d(np.asarray(est, dtype=float))
    ref = np.atleast_2d(np.asarray(ref, dtype=float))
    if est.shape != ref.shape:
        raise ValueError("estimates and references must have equal shapes")
    n_src = ref.shape[0]
    if n_src > 4:
        raise ValueError("at most 4 sources supported")
    if np.any(np.sum(ref**2, axis=1) == 0):
        raise ValueError("zero reference signal")
    L = filter_len
    G_all = _gram(ref, L)
    sdr = np.zeros((n_src, n_src))
    sir = np.zeros((n_src, n_src))
    for j in range(n_src):
        G_own = G_all[j * L : (j + 1) * L, j * L : (j + 1) * L]
        for e in range(n_src):
            if np.sum(est[e] ** 2) == 0:
                sdr[j, e] = sir[j, e] = -DB_CAP
                continue
            target, interf, artif = _decompose(ref, est[e], j, G_all, G_own, L)
            t_pow = np.sum(target**2)
            sdr[j, e] = _db(t_pow, np.sum((interf + artif) ** 2))
            sir[j, e] = _db(t_pow, np.sum(interf**2))
    best = max(
        itertools.permutations(range(n_src)),
        key=lambda p: np.mean([sdr[j, p[j]] for j in range(n_src)]),
    )
    return {
        "sdr": [float(sdr[j, best[j]]) for j in range(n_src)],
        "sir": [float(sir[j, best[j]]) for j in range(n_src)],
        "perm": list(best),
    }


def _frames(x: np.ndarray, size: int, hop: int) -> np.ndarray:
    if len(x) < size:
        x = np.pad(x, (0, size - len(x)))
    n = 1 + (len(x) - size) // hop
    return np.lib.stride_tricks.sliding_window_view(x, size)[::hop][:n]


def lpc(frame: np.ndarray, order: int) -> np.ndarray:
    """Autocorrelation-method LPC polynomial [1, a_1, ..., a_p]."""
    r = np.correlate(frame, frame, "full")[len(frame) - 1 : len(frame) + order]
    if r[0] <= 0:
        return np.concatenate([[1.0], np.zeros(order)])
    r = r.copy()
    r[0] *= 1.0 + 1e-9
    a = solve_toeplitz(r[:order], -r[1 : order + 1])
    return np.concatenate([[1.0], a])


def lpc_cepstrum(a: np.ndarray, n_coef: int) -> np.ndarray:
    """Cepstrum c_1..c_n of the all-pole model 1 / A(z) (c_0 excluded)."""
    p = len(a) - 1
    c = np.zeros(n_coef + 1)
    for n in range(1, n_coef + 1):
        acc = -a[n] if n <= p else 0.0
        for k in range(1, n):
            if n - k <= p:
                acc -= (k / n) * c[k] * a[n - k]
        c[n] = acc
    return c[1:]


def cepstral_distance(
    est: np.ndarray,
    ref: np.ndarray,
    order: int = CD_ORDER,
    frame: int = 256,
    hop: int = 64,
) -> float:
    """Mean LPC-cepstral distance (dB) over speech-active reference frames."""
    est = np.asarray(est, dtype=float)
    ref = np.asarray(ref, dtype=float)
    if est.shape != ref.shape:
        raise ValueError("equal lengths required")
    if not np.any(ref) or not np.any(est):
        raise ValueError("silent signal")
    win = np.hanning(frame)
    fe = _frames(est, frame, hop) * win
    fr = _frames(ref, frame, hop) * win
    energy = np.sum(fr**2, axis=1)
    active = energy > energy.max() * 1e-4
    dists = []
    for a, b in zip(fe[active], fr[active]):
        ce = lpc_cepstrum(lpc(a, order), order)
        cr = lpc_cepstrum(lpc(b, order), order)
        d = 10.0 / np.log(10.0) * np.sqrt(2.0 * np.sum((ce - cr) ** 2))
        dists.append(np.clip(d, *CD_CLAMP))
    return float(np.mean(dists))


def mel_filterbank(n_bands: int, n_fft: int, fs: int) -> np.ndarray:
    def mel(f):
        return 2595.0 * np.log10(1.0 + f / 700.0)

    def hz(m):
        return 700.0 * (10 ** (m / 2595.0) - 1.0)

    edges = hz(np.linspace(mel(0.0), mel(fs / 2), n_bands + 2))
    freqs = np.linspace(0, fs / 2, n_fft // 2 + 1)
    fb = np.zeros((n_bands, len(freqs)))
    for b in range(n_bands):
        lo, mid, hi = edges[b : b + 3]
        rise = (freqs - lo) / (mid - lo)
        fall = (hi - freqs) / (hi - mid)
        fb[b] = np.maximum(0.0, np.minimum(rise, fall))
    return fb


def fwseg_snr(
    est: np.ndarray,
    ref: np.ndarray,
    fs: int = SAMPLE_RATE,
    frame: int = 256,
    hop: int = 64,
    n_bands: int = FWSEG_BANDS,
) -> float:
    """Frequency-weighted segmental SNR (dB) with complex-spectrum error."""
    est = np.asarray(est, dtype=float)
    ref = np.asarray(ref, dtype=float)
    if est.shape != ref.shape:
        raise ValueError("equal lengths required")
    if not np.any(ref):
        raise ValueError("silent reference")
    win = np.hanning(frame)
    R = np.fft.rfft(_frames(ref, frame, hop) * win, axis=1)
    E = np.fft.rfft(_frames(est, frame, hop) * win, axis=1)
    fb = mel_filterbank(n_bands, frame, fs)
    sig = np.abs(R) ** 2 @ fb.T
    err = np.abs(R - E) ** 2 @ fb.T
    weight = np.sqrt(sig) ** FWSEG_GAMMA
    with np.errstate(divide="ignore", invalid="ignore"):
        band_snr = 10 * np.log10(sig / err)
    # 0/0 only occurs where the band weight is zero as well
    band_snr = np.clip(np.nan_to_num(band_snr, nan=0.0), *FWSEG_CLAMP)
    total = np.sum(weight, axis=1)
    active = total > 0  # all-zero reference frames carry no weight
    frame_snr = np.sum(weight[active] * band_snr[active], axis=1) / total[active]
    return float(np.mean(np.clip(frame_snr, *FWSEG_CLAMP)))


@dataclass
class MetricReport:
    utterance: str
    sdr: List[float]
    sir: List[float]
    cd: List[float]
    fwsegsnr: List[float]
    perm: List[int]

    @property
    def mean_sdr(self) -> float:
        return float(np.mean(self.sdr))

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def score(utterance: str, est: np.ndarray, ref: np.ndarray, fs: int = SAMPLE_RATE) -> MetricReport:
    """Score single-channel estimates (N_s, T) against references (N_s, T)."""
    res = bss_eval(est, ref)
    cd, fw = [], []
    for j, e in enumerate(res["perm"]):
        cd.append(cepstral_distance(est[e], ref[j]) if np.any(est[e]) else CD_CLAMP[1])
        fw.append(fwseg_snr(est[e], ref[j], fs))
    return MetricReport(utterance, res["sdr"], res["sir"], cd, fw, res["perm"])


def summary_table(reports: Sequence[MetricReport]) -> str:
    rows = [("utterance", "SDR", "SIR", "CD", "FWSegSNR")]
    for r in reports:
        rows.append(
            (
                r.utterance,
                f"{np.mean(r.sdr):.2f}",
                f"{np.mean(r.sir):.2f}",
                f"{np.mean(r.cd):.2f}",
                f"{np.mean(r.fwsegsnr):.2f}",
            )
        )
    if reports:
        rows.append(
            (
                "mean",
                f"{np.mean([np.mean(r.sdr) for r in reports]):.2f}",
                f"{np.mean([np.mean(r.sir) for r in reports]):.2f}",
                f"{np.mean([np.mean(r.cd) for r in reports]):.2f}",
                f"{np.mean([np.mean(r.fwsegsnr) for r in reports]):.2f}",
            )
        )
    widths = [max(len(row[c]) for row in rows) for c in range(len(rows[0]))]
    return "\n".join("  ".join(cell.rjust(w) for cell, w in zip(row, widths)) for row in rows)


def reports_csv(reports: Sequence[MetricReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["utterance", "source", "sdr", "sir", "cd", "fwsegsnr", "perm"])
    for r in reports:
        for j in range(len(r.sdr)):
            writer.writerow([r.utterance, j, r.sdr[j], r.sir[j], r.cd[j], r.fwsegsnr[j], r.perm[j]])
    return buf.getvalue()
