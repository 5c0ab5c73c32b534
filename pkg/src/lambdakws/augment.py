"""Waveform augmentation for training clips.

Seven disturbances, each fired independently with its own probability and
applied in a fixed order when several fire:

    stretch -> pitch -> shift -> crop -> noise -> clip -> volume

Default probabilities and ranges:

=============  ====  ==========================================
disturbance     p    parameter
=============  ====  ==========================================
noise          0.7   SNR 0-15 dB
clip           0.2   percentile threshold 0.2-0.4
crop           0.5   zeroed span of 10-100 ms
pitch          0.3   +-4 semitones
shift          0.3   +-200 ms
stretch        0.3   rate 0.75-1.25
volume         0.5   gain +-5 dB
=============  ====  ==========================================
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import signal

from .errors import ConfigurationError
from .frontend import CLIP_SAMPLES, SAMPLE_RATE, AudioClip, fit_length, read_wav

ORDER = ("stretch", "pitch", "shift", "crop", "noise", "clip", "volume")
SILENT_REFERENCE_POWER = 1e-4


@dataclass(frozen=True)
class Disturbance:
    p: float
    low: float
    high: float

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ConfigurationError(f"probability must lie in [0, 1], got {self.p}")
        if self.low > self.high:
            raise ConfigurationError(f"empty parameter range [{self.low}, {self.high}]")


DEFAULTS = {
    "noise": Disturbance(0.7, 0.0, 15.0),
    "clip": Disturbance(0.2, 0.2, 0.4),
    "crop": Disturbance(0.5, 10.0, 100.0),
    "pitch": Disturbance(0.3, -4.0, 4.0),
    "shift": Disturbance(0.3, -200.0, 200.0),
    "stretch": Disturbance(0.3, 0.75, 1.25),
    "volume": Disturbance(0.5, -5.0, 5.0),
}


@dataclass(frozen=True)
class AugmentationPolicy:
    entries: dict = field(default_factory=lambda: dict(DEFAULTS))
    seed: int = 0

    def __post_init__(self):
        unknown = set(self.entries) - set(ORDER)
        if unknown:
            raise ConfigurationError(f"unknown disturbances: {sorted(unknown)}")
        if self.entries["stretch"].low <= 0:
            raise ConfigurationError("stretch rate must be positive")

    @classmethod
    def disabled(cls, seed=0):
        return cls({k: replace(v, p=0.0) for k, v in DEFAULTS.items()}, seed)

    @classmethod
    def only(cls, name, p=1.0, low=None, high=None, seed=0):
        entries = {k: replace(v, p=0.0) for k, v in DEFAULTS.items()}
        d = DEFAULTS[name]
        entries[name] = Disturbance(p, d.low if low is None else low, d.high if high is None else high)
        return cls(entries, seed)

    def with_overrides(self, **values):
        """Override e.g. ``noise_p=0.5`` or ``stretch_high=1.1``."""
        entries = dict(self.entries)
        for key, value in values.items():
            name, _, attr = key.rpartition("_")
            if name not in entries or attr not in ("p", "low", "high"):
                raise ConfigurationError(f"unknown augmentation override {key!r}")
            entries[name] = replace(entries[name], **{attr: float(value)})
        return AugmentationPolicy(entries, self.seed)

    def check(self, noise_bank):
        if self.entries["noise"].p > 0 and (noise_bank is None or len(noise_bank) == 0):
            raise ConfigurationError("background noise is enabled but the noise bank is empty")


class NoiseBank:
    """Long background-noise recordings to draw 1 s segments from."""

    def __init__(self, waveforms):
        self.waveforms = [np.asarray(w, dtype=np.float64) for w in waveforms]
        for w in self.waveforms:
            if len(w) < CLIP_SAMPLES:
                raise ConfigurationError(f"noise recording of {len(w)} samples is shorter than 1 s")

    def __len__(self):
        return len(self.waveforms)

    @classmethod
    def from_dir(cls, path):
        files = sorted(Path(path).glob("*.wav"))
        return cls([read_wav(f, fit=False).samples for f in files])

    def segment(self, rng, length=CLIP_SAMPLES):
        if not self.waveforms:
            raise ConfigurationError("noise bank is empty")
        w = self.waveforms[rng.integers(len(self.waveforms))]
        start = rng.integers(len(w) - length + 1)
        return w[start : start + length]


def clip_rng(seed, *keys):
    """Generator for one clip, derived from the run seed and clip identity.

    Independent of the order in which clips are processed.
    """
    words = [int(seed) & 0xFFFFFFFF]
    for k in keys:
        words.append(zlib.crc32(str(k).encode()) if not isinstance(k, (int, np.integer)) else int(k) & 0xFFFFFFFF)
    return np.random.default_rng(np.random.SeedSequence(words))


# ---------------------------------------------------------------------------
# individual disturbances
# ---------------------------------------------------------------------------


def _stft(x, n_fft, hop):
    window = signal.get_window("hann", n_fft)
    xp = np.pad(x, n_fft // 2, mode="reflect")
    frames = np.lib.stride_tricks.sliding_window_view(xp, n_fft)[::hop]
    return np.fft.rfft(frames * window, axis=1), window


def _istft(spec, window, hop, length):
    n_fft = len(window)
    frames = np.fft.irfft(spec, n=n_fft, axis=1) * window
    total = n_fft + hop * (len(frames) - 1)
    out = np.zeros(total)
    norm = np.zeros(total)
    for i, f in enumerate(frames):
        out[i * hop : i * hop + n_fft] += f
        norm[i * hop : i * hop + n_fft] += window**2
    out /= np.where(norm > 1e-10, norm, 1.0)
    out = out[n_fft // 2 :]
    if len(out) < length:
        out = np.concatenate([out, np.zeros(length - len(out))])
    return out[:length]


def time_stretch(samples, rate, n_fft=512, hop=128):
    """Phase-vocoder stretch: output has round(len / rate) samples, same pitch."""
    if rate <= 0:
        raise ConfigurationError(f"stretch rate must be positive, got {rate}")
    x = np.asarray(samples, dtype=np.float64)
    spec, window = _stft(x, n_fft, hop)
    steps = np.arange(0, len(spec) - 1e-9, rate)
    expected = 2.0 * np.pi * hop * np.arange(spec.shape[1]) / n_fft
    padded = np.concatenate([spec, np.zeros((1, spec.shape[1]))])
    phase = np.angle(spec[0])
    out = np.empty((len(steps), spec.shape[1]), dtype=complex)
    for i, t in enumerate(steps):
        j = int(t)
        frac = t - j
        left, right = padded[j], padded[j + 1]
        mag = (1.0 - frac) * np.abs(left) + frac * np.abs(right)
        out[i] = mag * np.exp(1j * phase)
        dphi = np.angle(right) - np.angle(left) - expected
        dphi -= 2.0 * np.pi * np.round(dphi / (2.0 * np.pi))
        phase = phase + expected + dphi
    return _istft(out, window, hop, int(round(len(x) / rate)))


def pitch_shift(samples, semitones):
    """Shift pitch by stretching by 2**(s/12) and resampling back to the original length."""
    x = np.asarray(samples, dtype=np.float64)
    factor = 2.0 ** (semitones / 12.0)
    stretched = time_stretch(x, 1.0 / factor)
    return signal.resample(stretched, len(x))


def time_shift(samples, shift):
    """Delay (shift > 0) or advance the signal by ``shift`` samples, zero-filling."""
    x = np.asarray(samples, dtype=np.float64)
    out = np.zeros_like(x)
    if shift >= 0:
        out[shift:] = x[: len(x) - shift]
    else:
        out[:shift] = x[-shift:]
    return out


def crop(samples, start, length):
    """Zero a contiguous span."""
    out = np.array(samples, dtype=np.float64)
    out[start : start + length] = 0.0
    return out


def noise_scale(clean, noise, snr_db):
    """Gain for ``noise`` so that 10 log10(P_clean / P_noise) = snr_db."""
    p_clean = float(np.mean(np.square(clean)))
    if p_clean <= 0:
        p_clean = SILENT_REFERENCE_POWER
    p_noise = float(np.mean(np.square(noise)))
    if p_noise <= 0:
        return 0.0
    return float(np.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0))))


def mix_at_snr(clean, noise, snr_db, rng=None):
    """Add noise at the given SNR; a random 1 s segment is used when noise is longer."""
    clean = np.asarray(clean.samples if isinstance(clean, AudioClip) else clean, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if len(noise) > len(clean):
        rng = rng or np.random.default_rng()
        start = rng.integers(len(noise) - len(clean) + 1)
        noise = noise[start : start + len(clean)]
    elif len(noise) < len(clean):
        raise ConfigurationError("noise segment is shorter than the clean clip")
    return clean + noise_scale(clean, noise, snr_db) * noise


def clip_distortion(samples, threshold):
    """Hard-clip at the (1 - threshold) quantile of |x|."""
    x = np.asarray(samples, dtype=np.float64)
    level = np.quantile(np.abs(x), 1.0 - threshold)
    if level <= 0:
        return x.copy()
    return np.clip(x, -level, level)


def apply_gain(samples, gain_db):
    return np.asarray(samples, dtype=np.float64) * 10.0 ** (gain_db / 20.0)


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------


def sample_plan(policy: AugmentationPolicy, rng) -> dict:
    """Decide which disturbances fire and draw their parameters."""
    plan = {}
    for name in ORDER:
        d = policy.entries[name]
        fires = rng.random() < d.p
        value = rng.uniform(d.low, d.high)
        if fires:
            plan[name] = value
    return plan


def augment(clip, policy: AugmentationPolicy, noise_bank, rng) -> AudioClip:
    """Apply a randomly drawn set of disturbances; output is 16000 samples in [-1, 1]."""
    policy.check(noise_bank)
    samples = clip.samples if isinstance(clip, AudioClip) else np.asarray(clip)
    label = clip.label if isinstance(clip, AudioClip) else None
    x = np.asarray(samples, dtype=np.float64)
    plan = sample_plan(policy, rng)
    if not plan:
        return AudioClip(x.copy(), SAMPLE_RATE, label)
    if "stretch" in plan:
        x = fit_length(time_stretch(x, plan["stretch"]))
    if "pitch" in plan:
        x = fit_length(pitch_shift(x, plan["pitch"]))
    if "shift" in plan:
        x = time_shift(x, int(round(plan["shift"] * SAMPLE_RATE / 1000.0)))
    if "crop" in plan:
        length = int(round(plan["crop"] * SAMPLE_RATE / 1000.0))
        x = crop(x, int(rng.integers(len(x) - length + 1)), length)
    if "noise" in plan:
        x = mix_at_snr(x, noise_bank.segment(rng), plan["noise"])
    if "clip" in plan:
        x = clip_distortion(x, plan["clip"])
    if "volume" in plan:
        x = apply_gain(x, plan["volume"])
    return AudioClip(np.clip(fit_length(x), -1.0, 1.0), SAMPLE_RATE, label)
