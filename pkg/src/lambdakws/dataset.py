"""Speech Commands v2 ingestion, subtask vocabularies, splits and batching."""
from __future__ import annotations

import csv
import hashlib
import logging
import re
import shutil
import tarfile
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .augment import AugmentationPolicy, NoiseBank, augment, clip_rng
from .errors import ConfigurationError, IngestionError
from .frontend import CLIP_SAMPLES, AudioClip, mel_spectrogram, read_wav

log = logging.getLogger(__name__)

ARCHIVE_URL = "http://download.tensorflow.org/data/speech_commands_v0.02.tar.gz"
ARCHIVE_BYTES = 2428923189

CORE_WORDS = ("yes", "no", "up", "down", "left", "right", "on", "off", "stop", "go")
DIGITS = ("zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine")
ALL_WORDS = tuple(sorted(CORE_WORDS + DIGITS + (
    "backward", "bed", "bird", "cat", "dog", "follow", "forward", "happy", "house",
    "learn", "marvin", "sheila", "tree", "visual", "wow",
)))
UNKNOWN = "unknown"
SILENCE = "silence"
NOISE_DIR = "_background_noise_"
SPLITS = ("train", "validation", "test")

_MAX_PER_CLASS = 2**27 - 1


def which_set(filename, validation_percentage=10.0, testing_percentage=10.0):
    """Split of a file under the dataset's speaker-hash rule.

    Everything after ``_nohash_`` is ignored, so all recordings of one
    speaker land in the same split.
    """
    base = Path(filename).name
    speaker = re.sub(r"_nohash_.*$", "", base)
    digest = int(hashlib.sha1(speaker.encode()).hexdigest(), 16)
    pct = (digest % (_MAX_PER_CLASS + 1)) * (100.0 / _MAX_PER_CLASS)
    if pct < validation_percentage:
        return "validation"
    if pct < testing_percentage + validation_percentage:
        return "test"
    return "train"


@dataclass(frozen=True)
class SubtaskVocabulary:
    keywords: tuple
    aux: tuple = ()

    @property
    def classes(self):
        return self.keywords + self.aux

    @classmethod
    def for_subtask(cls, subtask, available=ALL_WORDS):
        if subtask == 10:
            return cls(CORE_WORDS, (UNKNOWN, SILENCE))
        if subtask == 20:
            return cls(CORE_WORDS + DIGITS, (UNKNOWN,))
        if subtask == 35:
            return cls(tuple(sorted(available)))
        if isinstance(subtask, (tuple, list)) and subtask:
            return cls(tuple(subtask))
        raise ConfigurationError(f"subtask must be 10, 20, 35 or a keyword list, got {subtask!r}")


@dataclass(frozen=True)
class Entry:
    path: str  # relative to the dataset root
    label: str
    speaker: str
    split: str


@dataclass
class DatasetManifest:
    root: Path
    subtask: object
    classes: tuple
    entries: list = field(default_factory=list)

    def split(self, name):
        return [e for e in self.entries if e.split == name]

    def class_index(self, label):
        return self.classes.index(label)

    @property
    def has_silence(self):
        return SILENCE in self.classes

    def histogram(self, split=None):
        out = {}
        for e in self.entries:
            if split is None or e.split == split:
                out[e.label] = out.get(e.label, 0) + 1
        return out

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["path", "label", "split"])
            for e in self.entries:
                w.writerow([e.path, e.label, e.split])


def _read_list(path):
    if not path.is_file():
        raise IngestionError(f"missing split list: {path}")
    return {line.strip() for line in path.read_text().splitlines() if line.strip()}


def build_manifest(root, subtask=35) -> DatasetManifest:
    """Index an extracted dataset directory.

    Splits come from ``validation_list.txt`` and ``testing_list.txt``; all
    other files are training data.  For the 10- and 20-keyword subtasks,
    words outside the vocabulary are relabelled ``unknown``; a custom
    keyword tuple keeps only those words.
    """
    root = Path(root)
    if not root.is_dir():
        raise IngestionError(f"dataset root does not exist: {root}")
    val = _read_list(root / "validation_list.txt")
    test = _read_list(root / "testing_list.txt")
    folders = sorted(p for p in root.iterdir() if p.is_dir() and not p.name.startswith("_"))
    vocab = SubtaskVocabulary.for_subtask(subtask, [p.name for p in folders])
    names = {p.name for p in folders}
    missing = [w for w in vocab.keywords if w not in names]
    if missing:
        raise IngestionError(f"keyword folders missing under {root}: {missing}")
    entries = []
    for folder in folders:
        word = folder.name
        if word in vocab.keywords:
            label = word
        elif UNKNOWN in vocab.aux:
            label = UNKNOWN
        else:
            continue
        files = sorted(folder.glob("*.wav"))
        if not files:
            raise IngestionError(f"empty keyword folder: {folder}")
        for f in files:
            rel = f"{word}/{f.name}"
            split = "test" if rel in test else "validation" if rel in val else "train"
            speaker = re.sub(r"_nohash_.*$", "", f.name)
            entries.append(Entry(rel, label, speaker, split))
    return DatasetManifest(root, subtask, vocab.classes, entries)


def load_noise_bank(root) -> NoiseBank:
    return NoiseBank.from_dir(Path(root) / NOISE_DIR)


def sample_silence(noise_bank: NoiseBank, rng) -> AudioClip:
    """A random 1 s crop of a random noise file at a random gain in [0, 1]."""
    if noise_bank is None or len(noise_bank) == 0:
        raise ConfigurationError("cannot sample silence from an empty noise bank")
    segment = noise_bank.segment(rng, CLIP_SAMPLES)
    gain = rng.uniform(0.0, 1.0)
    return AudioClip(np.clip(segment * gain, -1.0, 1.0), label=SILENCE)


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BatchItem:
    path: str | None  # None for an injected silence clip
    label: int
    key: str  # stable identity for per-clip seeding


def epoch_items(manifest: DatasetManifest, split, rng, unknown_fraction=0.1, silence_fraction=0.1):
    """One epoch worth of items for ``split``.

    Keywords are all kept.  When the vocabulary has an ``unknown`` class its
    entries are subsampled to ``unknown_fraction`` of the epoch, and
    ``silence_fraction`` of the epoch is injected silence.
    """
    entries = manifest.split(split)
    if not entries:
        raise ConfigurationError(f"split {split!r} is empty")
    has_unknown = UNKNOWN in manifest.classes
    known = [e for e in entries if e.label != UNKNOWN]
    unknown = [e for e in entries if e.label == UNKNOWN]
    u = unknown_fraction if has_unknown else 0.0
    s = silence_fraction if manifest.has_silence else 0.0
    if u + s >= 1.0:
        raise ConfigurationError("unknown and silence fractions must sum below 1")
    share = len(known) / (1.0 - u - s)
    picked = known
    if has_unknown:
        n_unknown = min(len(unknown), int(round(share * u)))
        idx = rng.choice(len(unknown), size=n_unknown, replace=False) if n_unknown else []
        picked = known + [unknown[i] for i in sorted(idx)]
    items = [BatchItem(e.path, manifest.class_index(e.label), e.path) for e in picked]
    if manifest.has_silence:
        sil = manifest.class_index(SILENCE)
        items += [BatchItem(None, sil, f"{SILENCE}/{split}/{i}") for i in range(int(round(share * s)))]
    return items


def make_batches(manifest: DatasetManifest, split, batch_size, rng, **fractions):
    """Shuffle one epoch of items into batches; the last short batch is kept."""
    if batch_size < 1:
        raise ConfigurationError(f"batch_size must be at least 1, got {batch_size}")
    items = epoch_items(manifest, split, rng, **fractions)
    order = rng.permutation(len(items))
    items = [items[i] for i in order]
    return [items[i : i + batch_size] for i in range(0, len(items), batch_size)]


class FeatureLoader:
    """Turns batches of items into feature arrays.

    Augmentation happens on the waveform, then log-mel features are
    computed.  Clean features are cached per file.
    """

    def __init__(self, root, noise_bank=None, policy: AugmentationPolicy | None = None, seed=0, dtype=np.float32):
        self.root = Path(root)
        self.noise_bank = noise_bank
        self.policy = policy
        self.seed = seed
        self.dtype = dtype
        self._waves = {}
        self._features = {}
        if policy is not None:
            policy.check(noise_bank)

    def waveform(self, path):
        w = self._waves.get(path)
        if w is None:
            w = self._waves[path] = read_wav(self.root / path).samples
        return w

    def features(self, item: BatchItem, epoch=0, augmented=False):
        rng = clip_rng(self.seed, epoch, item.key)
        if item.path is None:
            clip = sample_silence(self.noise_bank, rng)
        elif not augmented or self.policy is None:
            f = self._features.get(item.path)
            if f is None:
                f = self._features[item.path] = mel_spectrogram(self.waveform(item.path)).astype(self.dtype)
            return f
        else:
            clip = AudioClip(self.waveform(item.path))
        if augmented and self.policy is not None:
            clip = augment(clip, self.policy, self.noise_bank, rng)
        return mel_spectrogram(clip).astype(self.dtype)

    def load(self, batch, epoch=0, augmented=False):
        x = np.stack([self.features(it, epoch, augmented) for it in batch])
        y = np.array([it.label for it in batch], dtype=np.int64)
        return x, y


# ---------------------------------------------------------------------------
# download
# ---------------------------------------------------------------------------


def download(root, url=ARCHIVE_URL, expected_bytes=ARCHIVE_BYTES, keep_archive=False):
    """Fetch the dataset archive, check its size and extract it under ``root``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    archive = root / Path(url.split("?")[0]).name
    log.info("downloading %s", url)
    with urllib.request.urlopen(url) as resp, open(archive, "wb") as out:
        shutil.copyfileobj(resp, out)
    size = archive.stat().st_size
    if expected_bytes is not None and size != expected_bytes:
        archive.unlink()
        raise IngestionError(f"archive size {size} does not match expected {expected_bytes}")
    with tarfile.open(archive) as tar:
        tar.extractall(root, filter="data")
    if not keep_archive:
        archive.unlink()
    return root
