import io
import math
import struct
from pathlib import Path

import numpy as np
import pytest

from lambdakws import frontend as F
from lambdakws.errors import ConfigurationError, DecodeError, DimensionError

DATA = Path(__file__).parent / "data"


def _wav(samples, rate=16000, channels=1, bits=16, fmt=1):
    pcm = np.asarray(samples, dtype="<i2").tobytes()
    return (b"RIFF" + struct.pack("<I", 36 + len(pcm)) + b"WAVE"
            + b"fmt " + struct.pack("<IHHIIHH", 16, fmt, channels, rate, rate * 2, 2, bits)
            + b"data" + struct.pack("<I", len(pcm)) + pcm)


def test_decode_scaling_and_padding():
    clip = F.decode_wav(_wav([16384, -32768] + [0] * 7998))
    assert clip.samples.shape == (16000,)
    assert clip.samples[0] == 0.5 and clip.samples[1] == -1.0
    assert not clip.samples[8000:].any()


def test_decode_centre_crop():
    x = np.arange(20000) % 1000
    clip = F.decode_wav(_wav(x))
    np.testing.assert_array_equal(clip.samples, x[2000:18000] / 32768.0)


@pytest.mark.parametrize("kwargs,field", [
    ({"rate": 8000}, "sample_rate"), ({"channels": 2}, "channels"), ({"bits": 8}, "bits_per_sample"),
    ({"fmt": 3}, "audio_format"),
])
def test_decode_errors_name_the_field(kwargs, field):
    with pytest.raises(DecodeError, match=field):
        F.decode_wav(_wav([0] * 100, **kwargs))


def test_decode_rejects_garbage():
    with pytest.raises(DecodeError, match="header"):
        F.decode_wav(b"not a wav file at all")
    with pytest.raises(DecodeError, match="data"):
        F.decode_wav(_wav([0] * 10)[:36])


def test_encode_decode_round_trip():
    x = np.round(np.random.default_rng(0).uniform(-1, 1, 16000) * 32767) / 32768.0
    np.testing.assert_array_equal(F.decode_wav(F.encode_wav(x)).samples, x)


def test_htk_mel_scale():
    for f in (0.0, 700.0, 1000.0, 8000.0):
        assert math.isclose(F.hz_to_mel(f), 2595 * math.log10(1 + f / 700), rel_tol=1e-12)
    np.testing.assert_allclose(F.mel_to_hz(F.hz_to_mel([20.0, 440.0, 8000.0])), [20.0, 440.0, 8000.0])


def test_filterbank_shape_and_peaks():
    fb = F.mel_filterbank()
    assert fb.shape == (40, 257)
    assert np.all(fb >= 0) and np.all(fb <= 1)
    centres = F.band_edges()[:, 1]
    freqs = np.arange(257) * 16000 / 512
    # each filter peaks at the FFT bin nearest its centre frequency
    for row, c in zip(fb, centres):
        assert abs(freqs[np.argmax(row)] - c) <= 16000 / 512
    assert not fb.flags.writeable


def test_filterbank_rejects_bad_edges():
    with pytest.raises(ConfigurationError):
        F.mel_filterbank(f_lo=9000, f_hi=8000)


@pytest.mark.parametrize("length", [4000, 16000, 23000])
def test_feature_shape(length):
    rng = np.random.default_rng(length)
    clip = F.decode_wav(_wav(rng.integers(-20000, 20000, length)))
    assert F.mel_spectrogram(clip).shape == (40, 100)


def test_silence_is_log_floor():
    feats = F.mel_spectrogram(np.zeros(16000))
    assert np.all(feats == np.log(1e-6))


def test_tone_lands_in_matching_band():
    t = np.arange(16000) / 16000
    feats = F.mel_spectrogram(0.5 * np.sin(2 * np.pi * 1000 * t))
    centres = F.band_edges()[:, 1]
    assert np.argmax(feats[:, 50]) == np.argmin(np.abs(centres - 1000))


def test_peak_normalization_makes_features_gain_invariant():
    x = np.random.default_rng(3).normal(size=16000) * 0.1
    np.testing.assert_allclose(F.mel_spectrogram(x), F.mel_spectrogram(3 * x), atol=1e-12)


def test_rejects_wrong_length():
    with pytest.raises(DimensionError):
        F.mel_spectrogram(np.zeros(15999))


def test_golden_csv_is_bit_stable():
    feats = F.mel_spectrogram(F.read_wav(DATA / "clip.wav"))
    buf = io.StringIO(newline="")
    F.features_to_csv(feats, buf)
    assert buf.getvalue() == open(DATA / "clip_features.csv", newline="").read()
    again = io.StringIO(newline="")
    F.features_to_csv(F.mel_spectrogram(F.read_wav(DATA / "clip.wav")), again)
    assert again.getvalue() == buf.getvalue()
