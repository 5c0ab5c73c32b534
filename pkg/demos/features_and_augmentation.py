"""
From waveform to log-mel features
=================================

Every clip becomes a 40 x 100 array: 40 mel bands by 100 frames of 10 ms.
Augmentation works on the waveform before features are computed.
"""

from pathlib import Path

import numpy as np

from lambdakws import augment as A
from lambdakws import frontend as F

clip = F.read_wav(Path(__file__).parent.parent / "tests" / "data" / "clip.wav")
feats = F.mel_spectrogram(clip)
print("features", feats.shape, "range", feats.min().round(2), feats.max().round(2))

# the loudest frame and the band that carries most energy there
frame = int(np.argmax(feats.sum(axis=0)))
band = int(np.argmax(feats[:, frame]))
lo, centre, hi = F.band_edges()[band]
print(f"loudest frame {frame}, strongest band {band} ({lo:.0f}-{hi:.0f} Hz)")

# one noisy copy per seed; the same seed always gives the same copy
bank = A.NoiseBank([np.random.default_rng(1).normal(size=48000) * 0.1])
policy = A.AugmentationPolicy()
for seed in range(3):
    rng = A.clip_rng(seed, "clip.wav")
    plan = A.sample_plan(policy, A.clip_rng(seed, "clip.wav"))
    out = A.augment(clip, policy, bank, rng)
    drift = np.abs(F.mel_spectrogram(out) - feats).mean()
    fired = ", ".join(f"{k}={v:.2f}" for k, v in plan.items()) or "none"
    print(f"seed {seed}: {fired}  mean feature change {drift:.2f}")
