import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lgmsep.signal import (
    MultichannelWave,
    Spectrogram,
    _synthesis_window,
    extract_features,
    feature_dim,
    istft,
    mic_pairs,
    read_wav,
    sqrt_hann,
    stft,
    write_wav,
)

from conftest import snr_db


def test_bin_count_for_default_framing():
    spec = stft(MultichannelWave(np.ones((2, 1000))))
    assert spec.n_freq == 129
    assert spec.n_mics == 2


def test_zero_wave_gives_zero_spectrogram():
    spec = stft(MultichannelWave(np.zeros((2, 800))))
    assert not np.any(spec.bins)
    assert not np.any(istft(spec).samples)


def test_round_trip_noise(rng):
    x = rng.standard_normal((2, 8000))
    y = istft(stft(MultichannelWave(x))).samples
    assert y.shape == x.shape
    assert snr_db(x, y) >= 100


@settings(max_examples=20, deadline=None)
@given(n=st.integers(256, 3000), seed=st.integers(0, 2**31 - 1))
def test_round_trip_any_length(n, seed):
    x = np.random.default_rng(seed).standard_normal((1, n))
    y = istft(stft(MultichannelWave(x))).samples
    assert snr_db(x, y) >= 100


@pytest.mark.parametrize("frame,hop", [(256, 64), (256, 128), (64, 16)])
def test_round_trip_other_framings(rng, frame, hop):
    x = rng.standard_normal((1, 4000))
    y = istft(stft(MultichannelWave(x), frame, hop)).samples
    assert snr_db(x, y) >= 100


def test_single_frame_inverse_is_windowed_idft(rng):
    bins = np.fft.rfft(rng.standard_normal(256))[None, None, :]
    spec = Spectrogram(bins)
    out = istft(spec).samples[0]
    expected = np.fft.irfft(bins[0, 0], n=256) * _synthesis_window(256, 64)
    assert np.allclose(out, expected, atol=1e-12)


def test_too_short_input_rejected():
    with pytest.raises(ValueError, match="too short"):
        stft(MultichannelWave(np.zeros((1, 100))))


def test_window_is_periodic_sqrt_hann():
    w = sqrt_hann(256)
    n = np.arange(256)
    assert np.allclose(w**2, 0.5 - 0.5 * np.cos(2 * np.pi * n / 256))


def test_bad_bin_count_rejected():
    with pytest.raises(ValueError):
        Spectrogram(np.zeros((1, 3, 100)))


def test_non_finite_rejected():
    bins = np.zeros((1, 2, 129), dtype=complex)
    bins[0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        Spectrogram(bins)


def test_identical_channels_have_zero_ipd(rng):
    ch = rng.standard_normal((1, 5, 129)) + 1j * rng.standard_normal((1, 5, 129))
    feats = extract_features(Spectrogram(np.concatenate([ch, ch])))
    cos, sin = feats.ipd(0)
    assert np.allclose(cos, 1) and np.allclose(sin, 0)


def test_quarter_turn_ipd(rng):
    a = rng.standard_normal((1, 5, 129)) + 1j * rng.standard_normal((1, 5, 129))
    feats = extract_features(Spectrogram(np.concatenate([a, 1j * a])))
    cos, sin = feats.ipd(0)
    assert np.allclose(cos, 0, atol=1e-12) and np.allclose(sin, -1)


def test_zero_bin_log_floor():
    feats = extract_features(Spectrogram(np.zeros((2, 3, 129))))
    assert np.allclose(feats.logmag, np.log(1e-10))


def test_feature_layout():
    assert mic_pairs(3) == [(0, 1), (0, 2), (1, 2)]
    assert feature_dim(129, 3) == 129 * 7
    feats = extract_features(Spectrogram(np.ones((3, 4, 129))))
    assert feats.features.shape == (4, 129 * 7)


def test_mono_warns(caplog):
    with caplog.at_level(logging.WARNING):
        feats = extract_features(Spectrogram(np.ones((1, 4, 129))))
    assert feats.features.shape == (4, 129)
    assert "single-channel" in caplog.text


@pytest.mark.parametrize("pcm16", [False, True])
def test_wav_round_trip(tmp_path, rng, pcm16):
    x = 0.5 * rng.uniform(-1, 1, (2, 1000))
    write_wav(tmp_path / "a.wav", MultichannelWave(x, 16000), pcm16=pcm16)
    back = read_wav(tmp_path / "a.wav")
    assert back.sample_rate == 16000
    assert np.allclose(back.samples, x, atol=1e-4 if pcm16 else 1e-7)
