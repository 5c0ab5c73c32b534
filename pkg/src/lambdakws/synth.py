"""Synthetic stand-in corpus in the Speech Commands directory layout.

Each word is a fixed recipe of voiced syllables (two formant targets, a
pitch glide, a duration) and optional fricative bursts.  Speakers vary the
fundamental frequency, vocal-tract scale, speaking rate, onset and loudness,
so a classifier has to learn spectro-temporal shape rather than a fixed
template.  Splits follow the dataset's own speaker-hash rule and are written
to ``validation_list.txt`` / ``testing_list.txt``.
"""
from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np

from .dataset import ALL_WORDS, CORE_WORDS, NOISE_DIR, which_set
from .frontend import CLIP_SAMPLES, SAMPLE_RATE, write_wav

_VOWELS = [(300, 2300), (400, 2000), (550, 1800), (700, 1200), (750, 1100),
           (500, 900), (350, 800), (450, 1500), (650, 1700), (300, 1000)]
_FRICATIVES = [(6000, 1500), (4000, 1200), (2500, 800), None, None]


def _word_rng(word):
    return np.random.default_rng(int(hashlib.sha1(word.encode()).hexdigest()[:12], 16))


def word_recipe(word):
    """Deterministic syllable recipe of a word."""
    rng = _word_rng(word)
    n_syl = int(rng.integers(1, 4))
    syllables = []
    for _ in range(n_syl):
        f1, f2 = _VOWELS[rng.integers(len(_VOWELS))]
        g1, g2 = _VOWELS[rng.integers(len(_VOWELS))]
        syllables.append({
            "formants": (f1, f2),
            "glide_to": (g1, g2),
            "duration": float(rng.uniform(0.12, 0.25)),
            "pitch_slope": float(rng.uniform(-0.3, 0.3)),
            "onset": _FRICATIVES[rng.integers(len(_FRICATIVES))],
            "coda": _FRICATIVES[rng.integers(len(_FRICATIVES))],
        })
    return syllables


def _fricative(rng, centre, width, n, scale):
    noise = rng.normal(size=n)
    spec = np.fft.rfft(noise)
    freqs = np.fft.rfftfreq(n, 1.0 / SAMPLE_RATE)
    spec *= np.exp(-0.5 * ((freqs - centre * scale) / width) ** 2)
    out = np.fft.irfft(spec, n=n)
    return out * np.hanning(n) / (np.std(out) + 1e-12)


def _voiced(rng, syl, n, f0, scale):
    t = np.linspace(0.0, 1.0, n)
    pitch = f0 * (1.0 + syl["pitch_slope"] * t)
    phase = 2 * np.pi * np.cumsum(pitch) / SAMPLE_RATE
    f1 = scale * (syl["formants"][0] + (syl["glide_to"][0] - syl["formants"][0]) * t)
    f2 = scale * (syl["formants"][1] + (syl["glide_to"][1] - syl["formants"][1]) * t)
    out = np.zeros(n)
    for k in range(1, int(4000 / f0) + 1):
        fk = k * pitch
        amp = np.exp(-0.5 * ((fk - f1) / 90.0) ** 2) + 0.6 * np.exp(-0.5 * ((fk - f2) / 120.0) ** 2)
        out += amp * np.sin(k * phase + rng.uniform(0, 2 * np.pi)) / np.sqrt(k)
    env = np.sin(np.pi * np.linspace(0, 1, n)) ** 0.5
    return out * env / (np.std(out) + 1e-12)


def synthesize(word, rng, speaker=None):
    """One second of a synthetic utterance of ``word``."""
    speaker = speaker or {}
    f0 = speaker.get("f0", rng.uniform(90, 250)) * rng.uniform(0.95, 1.05)
    scale = speaker.get("scale", rng.uniform(0.85, 1.2))
    rate = speaker.get("rate", rng.uniform(0.8, 1.2)) * rng.uniform(0.9, 1.1)
    parts = []
    for syl in word_recipe(word):
        if syl["onset"]:
            centre, width = syl["onset"]
            parts.append(0.5 * _fricative(rng, centre, width, int(0.06 * SAMPLE_RATE / rate), scale))
        parts.append(_voiced(rng, syl, int(syl["duration"] * SAMPLE_RATE / rate), f0, scale))
        if syl["coda"]:
            centre, width = syl["coda"]
            parts.append(0.4 * _fricative(rng, centre, width, int(0.08 * SAMPLE_RATE / rate), scale))
        parts.append(np.zeros(int(rng.uniform(0.01, 0.04) * SAMPLE_RATE)))
    utter = np.concatenate(parts)[: CLIP_SAMPLES - 800]
    out = np.zeros(CLIP_SAMPLES)
    start = int(rng.integers(0, CLIP_SAMPLES - len(utter) + 1))
    out[start : start + len(utter)] = utter
    out *= rng.uniform(0.1, 0.6) / (np.max(np.abs(out)) + 1e-12)
    snr_db = rng.uniform(10, 30)
    noise = rng.normal(size=CLIP_SAMPLES)
    out += noise * np.sqrt(np.mean(out**2) / 10 ** (snr_db / 10))
    return np.clip(out, -1, 1)


def noise_recordings(rng, seconds=10):
    n = seconds * SAMPLE_RATE
    white = rng.normal(size=n)
    spec = np.fft.rfft(rng.normal(size=n))
    f = np.maximum(np.fft.rfftfreq(n, 1.0 / SAMPLE_RATE), 1.0)
    pink = np.fft.irfft(spec / np.sqrt(f), n=n)
    brown = np.fft.irfft(spec / f, n=n)
    t = np.arange(n) / SAMPLE_RATE
    hum = sum(np.sin(2 * np.pi * 50 * k * t) / k for k in range(1, 8)) + 0.3 * white
    out = {}
    for name, w in (("white_noise", white), ("pink_noise", pink), ("brown_noise", brown), ("hum", hum)):
        out[name] = 0.3 * w / np.max(np.abs(w))
    return out


def make_corpus(root, clips_per_word=None, words=ALL_WORDS, seed=0, speakers=400):
    """Write a synthetic corpus; returns the number of utterances written.

    ``clips_per_word`` is an int or a {word: count} mapping.  By default the
    ten core keywords get 60 clips each and the remaining words 15.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    pool = [{
        "id": f"{int(rng.integers(0, 2**32)):08x}",
        "f0": float(rng.uniform(90, 250)),
        "scale": float(rng.uniform(0.85, 1.2)),
        "rate": float(rng.uniform(0.8, 1.2)),
    } for _ in range(speakers)]
    if clips_per_word is None:
        clips_per_word = {w: (60 if w in CORE_WORDS else 15) for w in words}
    elif isinstance(clips_per_word, int):
        clips_per_word = {w: clips_per_word for w in words}
    lists = {"validation": [], "test": []}
    written = 0
    for word in words:
        folder = root / word
        folder.mkdir(exist_ok=True)
        counts = {}
        for _ in range(clips_per_word.get(word, 0)):
            spk = pool[int(rng.integers(len(pool)))]
            i = counts.get(spk["id"], 0)
            counts[spk["id"]] = i + 1
            name = f"{spk['id']}_nohash_{i}.wav"
            write_wav(folder / name, synthesize(word, rng, spk))
            written += 1
            split = which_set(name)
            if split in lists:
                lists[split].append(f"{word}/{name}")
    (root / "validation_list.txt").write_text("".join(p + "\n" for p in sorted(lists["validation"])))
    (root / "testing_list.txt").write_text("".join(p + "\n" for p in sorted(lists["test"])))
    noise_dir = root / NOISE_DIR
    noise_dir.mkdir(exist_ok=True)
    for name, w in noise_recordings(rng).items():
        write_wav(noise_dir / f"{name}.wav", w)
    return written
