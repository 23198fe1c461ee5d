"""Synthetic keyword-spotting corpus used as the reference desk dataset.

Each class is a short "word": a fixed sequence of vowel and consonant
segments. Vowels are glottal pulse trains through formant resonators,
consonants are band-passed noise bursts. Speaker pitch, formant scale,
tempo, onset, loudness and background noise vary per clip, so the task is
learnable but not trivial.
"""

from __future__ import annotations

import numpy as np
from scipy.signal import butter, lfilter, sosfilt

from .dataset import Item, LabeledDataset
from .audio_dsp import AudioClip

# (F1, F2, F3) in Hz
VOWELS = {
    "a": (730, 1090, 2440),
    "i": (270, 2290, 3010),
    "u": (300, 870, 2240),
    "e": (530, 1840, 2480),
    "o": (570, 840, 2410),
    "ae": (660, 1720, 2410),
    "er": (490, 1350, 1690),
}

# band-pass noise (low Hz, high Hz, relative level)
CONSONANTS = {
    "s": (4000, 7500, 0.5),
    "sh": (2000, 4500, 0.6),
    "f": (1200, 7000, 0.25),
    "k": (1500, 3500, 0.7),
    "t": (3000, 6000, 0.6),
}

# background noise level below the word's RMS, dB
NOISE_DB = (55.0, 75.0)

WORDS = (
    (("s", 0.10), ("i", 0.25)),
    (("a", 0.20), ("i", 0.15)),
    (("k", 0.05), ("u", 0.30)),
    (("e", 0.15), ("s", 0.12), ("o", 0.15)),
    (("sh", 0.12), ("o", 0.25)),
    (("f", 0.10), ("ae", 0.20), ("t", 0.05)),
    (("t", 0.05), ("er", 0.15), ("i", 0.15)),
    (("o", 0.15), ("u", 0.10), ("a", 0.15)),
    (("k", 0.05), ("ae", 0.12), ("s", 0.08), ("e", 0.12)),
    (("i", 0.12), ("sh", 0.10), ("a", 0.20)),
)


def _resonator(freq: float, bw: float, sr: int):
    r = np.exp(-np.pi * bw / sr)
    theta = 2 * np.pi * freq / sr
    a = [1.0, -2 * r * np.cos(theta), r * r]
    b = [1.0 - r]
    return b, a


def _envelope(n: int, sr: int) -> np.ndarray:
    ramp = max(1, min(n // 4, int(0.02 * sr)))
    env = np.ones(n)
    env[:ramp] = np.linspace(0.0, 1.0, ramp)
    env[-ramp:] = np.linspace(1.0, 0.0, ramp)
    return env


def _vowel(n, sr, formants, f0, f0_slope, formant_scale, rng):
    f0_track = f0 * (1 + f0_slope * np.linspace(-1, 1, n)) * (1 + 0.01 * rng.standard_normal())
    phase = np.cumsum(f0_track / sr)
    pulses = np.diff(np.floor(phase), prepend=0.0)
    src = np.convolve(pulses, np.exp(-np.arange(40) / 8.0))[:n]
    src += 0.02 * rng.standard_normal(n)
    y = src
    for f, bw in zip(formants, (80, 110, 160)):
        b, a = _resonator(min(f * formant_scale, sr / 2 - 200), bw, sr)
        y = lfilter(b, a, y)
    return y * _envelope(n, sr)


def _consonant(n, sr, band, rng):
    lo, hi, level = band
    sos = butter(4, [lo, min(hi, sr / 2 - 100)], btype="band", fs=sr, output="sos")
    y = sosfilt(sos, rng.standard_normal(n)) * level
    return y * _envelope(n, sr)


def synth_word(
    label: int,
    rng: np.random.Generator,
    sr: int = 16000,
    duration: float = 1.0,
    noise_db: tuple[float, float] = NOISE_DB,
) -> np.ndarray:
    n_total = int(round(sr * duration))
    tempo = rng.uniform(0.8, 1.25)
    f0 = rng.uniform(90, 250)
    f0_slope = rng.uniform(-0.15, 0.15)
    fscale = rng.uniform(0.9, 1.12)
    segments = []
    for name, seg_dur in WORDS[label]:
        n = max(64, int(seg_dur * tempo * rng.uniform(0.85, 1.15) * sr))
        if name in VOWELS:
            seg = _vowel(n, sr, VOWELS[name], f0, f0_slope, fscale, rng)
            seg /= np.max(np.abs(seg)) + 1e-12
        else:
            seg = _consonant(n, sr, CONSONANTS[name], rng)
            seg /= np.max(np.abs(seg)) + 1e-12
            seg *= CONSONANTS[name][2]
        segments.append(seg)
    word = np.concatenate(segments)[: n_total - 1]
    out = np.zeros(n_total)
    onset = rng.integers(0, n_total - len(word))
    out[onset : onset + len(word)] = word
    out *= rng.uniform(0.3, 0.9) / (np.max(np.abs(out)) + 1e-12)
    noise_rms = np.sqrt(np.mean(out**2)) * 10 ** (-rng.uniform(*noise_db) / 20)
    out += noise_rms * rng.standard_normal(n_total)
    return np.clip(out, -1.0, 1.0)


def make_desk_dataset(
    n_train: int = 5000,
    n_validation: int = 1000,
    num_classes: int = 10,
    seed: int = 0,
    sample_rate: int = 16000,
    duration: float = 1.0,
    noise_db: tuple[float, float] = NOISE_DB,
) -> LabeledDataset:
    """Balanced synthetic corpus with ``n_train + n_validation`` clips.

    Ids are ``tr00000``/``va00000``-style; labels cycle through the classes.
    """
    if not 2 <= num_classes <= len(WORDS):
        raise ValueError(f"num_classes must be in [2, {len(WORDS)}]")
    seeds = np.random.SeedSequence(seed).spawn(2)
    items = []
    for split, count, ss in (("train", n_train, seeds[0]), ("validation", n_validation, seeds[1])):
        rng = np.random.default_rng(ss)
        labels = np.arange(count) % num_classes
        for i, y in enumerate(labels):
            x = synth_word(int(y), rng, sample_rate, duration, noise_db).astype(np.float32)
            items.append(Item(f"{split[:2]}{i:05d}", AudioClip(x, sample_rate), int(y), split))
    items.sort(key=lambda it: it.id)
    return LabeledDataset(tuple(items), num_classes)
