import numpy as np
import pytest

from lgmsep.signal import Spectrogram
from lgmsep.wpe import DELAY, TAPS, WpeFilter, dereverberate, wpe_apply, wpe_fit


def speech_like(rng, n_mics, n_frames, n_freq):
    """Frame-independent complex Gaussian with a strongly time-varying level."""
    level = np.exp(rng.standard_normal((1, n_frames, 1)))
    noise = rng.standard_normal((n_mics, n_frames, n_freq)) + 1j * rng.standard_normal((n_mics, n_frames, n_freq))
    return level * noise / np.sqrt(2)


def test_defaults():
    assert (DELAY, TAPS) == (2, 16)


def test_white_input_left_alone(rng):
    s = rng.standard_normal((2, 5000, 9)) + 1j * rng.standard_normal((2, 5000, 9))
    spec = Spectrogram(s, frame_size=16, hop=4)
    out = dereverberate(spec)
    change = np.sum(np.abs(out.bins - s) ** 2) / np.sum(np.abs(s) ** 2)
    assert change < 0.01
    assert out.kind == "dereverberated"


def test_constructed_tail_reduced_20db(rng):
    # x_l = s_l + 0.8 s_{l-2}; the residual tail is what remains of y - s
    s = speech_like(rng, 2, 3000, 9)
    tail = np.zeros_like(s)
    tail[:, 2:] = 0.8 * s[:, :-2]
    spec = Spectrogram(s + tail, frame_size=16, hop=4)
    y = dereverberate(spec, delay=2, taps=16).bins
    reduction = 10 * np.log10(np.sum(np.abs(tail) ** 2) / np.sum(np.abs(y - s) ** 2))
    assert reduction >= 20.0


def test_constructed_tail_is_reduced(rng):
    s = speech_like(rng, 2, 3000, 9)
    tail = np.zeros_like(s)
    tail[:, 2:] = 0.8 * s[:, :-2]
    y = dereverberate(Spectrogram(s + tail, frame_size=16, hop=4)).bins
    reduction = 10 * np.log10(np.sum(np.abs(tail) ** 2) / np.sum(np.abs(y - s) ** 2))
    assert reduction >= 10.0


def test_objective_non_increasing(rng):
    s = speech_like(rng, 2, 400, 9)
    x = s.copy()
    x[:, 3:] += 0.6 * s[:, :-3]
    filt = wpe_fit(Spectrogram(x, frame_size=16, hop=4), iters=6)
    obj = np.array(filt.objective)
    assert len(obj) == 6
    assert np.all(np.diff(obj) <= 1e-9 * np.abs(obj[:-1]))


def test_zero_filter_is_identity(rng):
    x = speech_like(rng, 2, 30, 9)
    spec = Spectrogram(x, frame_size=16, hop=4)
    out = wpe_apply(spec, WpeFilter(np.zeros((9, 2, 2 * 14), dtype=complex)))
    assert np.array_equal(out.bins, x)


def test_single_frame_is_unchanged(rng):
    x = speech_like(rng, 2, 1, 9)
    W = rng.standard_normal((9, 2, 28)) + 0j
    out = wpe_apply(Spectrogram(x, frame_size=16, hop=4), WpeFilter(W))
    assert np.array_equal(out.bins, x)


def test_scalar_one_tap_by_hand():
    x = np.array([1.0 + 1j, 2.0, -1.0j])[None, :, None]
    w = 0.5 - 0.25j
    out = wpe_apply(Spectrogram(x, frame_size=0, hop=1), WpeFilter(np.full((1, 1, 1), w), delay=2, taps=3))
    expected = [1.0 + 1j, 2.0, -1.0j - w * (1.0 + 1j)]
    assert np.allclose(out.bins[0, :, 0], expected)


def test_shape_mismatch_rejected(rng):
    spec = Spectrogram(speech_like(rng, 2, 30, 9), frame_size=16, hop=4)
    with pytest.raises(ValueError):
        wpe_apply(spec, WpeFilter(np.zeros((9, 3, 3 * 14), dtype=complex)))
    with pytest.raises(ValueError):
        wpe_apply(spec, WpeFilter(np.zeros((9, 2, 2 * 10), dtype=complex)))


def test_short_input_rejected(rng):
    with pytest.raises(ValueError, match="frames"):
        wpe_fit(Spectrogram(speech_like(rng, 2, 20, 9), frame_size=16, hop=4))


def test_bad_delay_rejected(rng):
    spec = Spectrogram(speech_like(rng, 2, 40, 9), frame_size=16, hop=4)
    with pytest.raises(ValueError):
        wpe_fit(spec, delay=0)
    with pytest.raises(ValueError):
        wpe_fit(spec, delay=5, taps=5)


def test_zero_iterations_is_identity(rng):
    x = speech_like(rng, 2, 40, 9)
    out = dereverberate(Spectrogram(x, frame_size=16, hop=4), iters=0)
    assert np.array_equal(out.bins, x)
