"""WAV decoding and log-mel features.

Feature contract (all values pinned so features are bit-reproducible):

* 16 kHz mono, exactly 16000 samples, peak-normalised to max |x| = 1
* 320-sample periodic Hann window, 160-sample hop, 80 samples of reflect
  padding on each side -> 100 frames
* 512-point FFT power spectrum
* 40 triangular HTK-mel filters spanning 20 Hz - 8 kHz
* natural log of (energy + 1e-6)
"""
from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ConfigurationError, DecodeError, DimensionError

SAMPLE_RATE = 16000
CLIP_SAMPLES = 16000
WIN_LENGTH = 320
HOP_LENGTH = 160
N_FFT = 512
N_MELS = 40
N_FRAMES = 100
F_LO = 20.0
F_HI = 8000.0
LOG_FLOOR = 1e-6


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE
    label: str | None = None


def fit_length(samples, length=CLIP_SAMPLES):
    """Zero-pad at the end, or centre-crop, to exactly ``length`` samples."""
    samples = np.asarray(samples, dtype=np.float64)
    n = len(samples)
    if n < length:
        return np.concatenate([samples, np.zeros(length - n)])
    if n > length:
        start = (n - length) // 2
        return samples[start : start + length].copy()
    return samples


def _chunks(data):
    pos = 12
    while pos + 8 <= len(data):
        cid, size = struct.unpack_from("<4sI", data, pos)
        yield cid, data[pos + 8 : pos + 8 + size], pos + 8 + size > len(data)
        pos += 8 + size + (size & 1)


def decode_wav(data: bytes, label=None, fit=True) -> AudioClip:
    """Decode a PCM-16 mono 16 kHz RIFF/WAVE file."""
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise DecodeError("header: not a RIFF/WAVE file")
    fmt = pcm = None
    for cid, body, truncated in _chunks(data):
        if cid == b"fmt ":
            if len(body) < 16:
                raise DecodeError("fmt: chunk shorter than 16 bytes")
            fmt = struct.unpack_from("<HHIIHH", body)
        elif cid == b"data":
            pcm = body
            break
    if fmt is None:
        raise DecodeError("fmt: chunk missing")
    if pcm is None:
        raise DecodeError("data: chunk missing")
    audio_format, channels, rate, _, _, bits = fmt
    if audio_format != 1:
        raise DecodeError(f"audio_format: expected PCM (1), got {audio_format}")
    if bits != 16:
        raise DecodeError(f"bits_per_sample: expected 16, got {bits}")
    if channels != 1:
        raise DecodeError(f"channels: expected mono, got {channels}")
    if rate != SAMPLE_RATE:
        raise DecodeError(f"sample_rate: expected {SAMPLE_RATE}, got {rate}")
    if len(pcm) % 2:
        pcm = pcm[:-1]
    samples = np.frombuffer(pcm, dtype="<i2").astype(np.float64) / 32768.0
    return AudioClip(fit_length(samples) if fit else samples, SAMPLE_RATE, label)


def read_wav(path, label=None, fit=True) -> AudioClip:
    with open(path, "rb") as fh:
        return decode_wav(fh.read(), label, fit)


def encode_wav(samples, sample_rate=SAMPLE_RATE) -> bytes:
    """PCM-16 mono WAV bytes; samples are clipped to [-1, 1)."""
    pcm = np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2").tobytes()
    buf = io.BytesIO()
    buf.write(b"RIFF" + struct.pack("<I", 36 + len(pcm)) + b"WAVE")
    buf.write(b"fmt " + struct.pack("<IHHIIHH", 16, 1, 1, sample_rate, 2 * sample_rate, 2, 16))
    buf.write(b"data" + struct.pack("<I", len(pcm)) + pcm)
    return buf.getvalue()


def write_wav(path, samples, sample_rate=SAMPLE_RATE):
    with open(path, "wb") as fh:
        fh.write(encode_wav(samples, sample_rate))


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def band_edges(n_mels=N_MELS, f_lo=F_LO, f_hi=F_HI):
    """(lower, centre, upper) frequency in Hz of every filter."""
    pts = mel_to_hz(np.linspace(hz_to_mel(f_lo), hz_to_mel(f_hi), n_mels + 2))
    return np.stack([pts[:-2], pts[1:-1], pts[2:]], axis=1)


@lru_cache(maxsize=8)
def _filterbank(n_mels, n_fft, f_lo, f_hi, sample_rate):
    if n_mels < 1 or not (0 <= f_lo < f_hi <= sample_rate / 2):
        raise ConfigurationError(f"invalid mel band edges: n_mels={n_mels}, f_lo={f_lo}, f_hi={f_hi}")
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    fb = np.zeros((n_mels, len(freqs)))
    for i, (lo, c, hi) in enumerate(band_edges(n_mels, f_lo, f_hi)):
        rise = (freqs - lo) / (c - lo)
        fall = (hi - freqs) / (hi - c)
        fb[i] = np.maximum(0.0, np.minimum(rise, fall))
    fb.flags.writeable = False
    return fb


def mel_filterbank(n_mels=N_MELS, n_fft=N_FFT, f_lo=F_LO, f_hi=F_HI, sample_rate=SAMPLE_RATE):
    """Triangular HTK-mel filters, [n_mels, n_fft // 2 + 1]."""
    return _filterbank(int(n_mels), int(n_fft), float(f_lo), float(f_hi), int(sample_rate))


@lru_cache(maxsize=1)
def _window():
    n = np.arange(WIN_LENGTH)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / WIN_LENGTH)


def peak_normalize(samples):
    samples = np.asarray(samples, dtype=np.float64)
    peak = np.max(np.abs(samples)) if len(samples) else 0.0
    return samples / peak if peak > 0 else samples


def power_frames(samples):
    """Framed power spectrum [N_FRAMES, N_FFT // 2 + 1] of a 1 s clip."""
    pad = (N_FRAMES - 1) * HOP_LENGTH + WIN_LENGTH - CLIP_SAMPLES
    x = np.pad(samples, (pad // 2, pad - pad // 2), mode="reflect")
    frames = np.lib.stride_tricks.sliding_window_view(x, WIN_LENGTH)[::HOP_LENGTH][:N_FRAMES]
    spec = np.fft.rfft(frames * _window(), n=N_FFT, axis=1)
    return spec.real**2 + spec.imag**2


def mel_spectrogram(clip) -> np.ndarray:
    """Log-mel features [40, 100] of a 16000-sample clip."""
    samples = clip.samples if isinstance(clip, AudioClip) else np.asarray(clip)
    if samples.shape != (CLIP_SAMPLES,):
        raise DimensionError(f"mel_spectrogram expects {CLIP_SAMPLES} samples, got {samples.shape}")
    power = power_frames(peak_normalize(samples))
    energies = mel_filterbank() @ power.T
    return np.log(energies + LOG_FLOOR)


def features_to_csv(features, path_or_file):
    """One row per mel band, values written with full float64 precision."""
    own = isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__")
    fh = open(path_or_file, "w", newline="") if own else path_or_file
    try:
        w = csv.writer(fh)
        for row in np.asarray(features):
            w.writerow([repr(float(v)) for v in row])
    finally:
        if own:
            fh.close()
