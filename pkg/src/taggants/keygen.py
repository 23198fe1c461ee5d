"""Secret key generation.

A key starts as a small random ``d x d`` matrix that is resized to the
classifier's mel grid, read as a mel magnitude spectrogram and turned into a
waveform with Griffin-Lim. Labels are drawn uniformly at random.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .audio_dsp import (
    AudioClip,
    MelMatrix,
    SpectroConfig,
    fit_length,
    griffin_lim,
    mel_spectrogram,
    mel_to_linear,
    read_float_wav,
    resize_matrix,
    write_float_wav,
)

DISTRIBUTIONS = ("bernoulli", "uniform")
INTERPOLATIONS = ("nearest", "bilinear")


class KeySetExistsError(FileExistsError):
    pass


@dataclass(frozen=True)
class KeyGenConfig:
    d: int = 8
    distribution: str = "bernoulli"
    interpolation: str = "nearest"
    K: int = 10
    C: int = 10
    seed: int = 0
    spectro: SpectroConfig = field(default_factory=lambda: SpectroConfig(n_mels=64))
    gl_iterations: int = 60
    target_shape: tuple[int, int] | None = None
    clip_length: int = 16000
    mel_level: float = 1.0

    def __post_init__(self):
        if self.d < 1 or self.K < 1 or self.C < 2 or self.gl_iterations < 1:
            raise ValueError("need d >= 1, K >= 1, C >= 2, gl_iterations >= 1")
        if self.distribution not in DISTRIBUTIONS:
            raise ValueError(f"distribution must be one of {DISTRIBUTIONS}")
        if self.interpolation not in INTERPOLATIONS:
            raise ValueError(f"interpolation must be one of {INTERPOLATIONS}")
        if self.mel_level <= 0:
            raise ValueError("mel_level must be positive")
        if self.target_shape is None:
            shape = (self.spectro.n_mels, self.spectro.n_frames(self.clip_length))
            object.__setattr__(self, "target_shape", shape)
        object.__setattr__(self, "target_shape", tuple(int(v) for v in self.target_shape))
        if self.target_shape[0] != self.spectro.n_mels:
            raise ValueError("target_shape rows must equal n_mels")

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "distribution": self.distribution,
            "interpolation": self.interpolation,
            "K": self.K,
            "C": self.C,
            "seed": self.seed,
            "spectro": self.spectro.to_dict(),
            "gl_iterations": self.gl_iterations,
            "target_shape": list(self.target_shape),
            "clip_length": self.clip_length,
            "mel_level": self.mel_level,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KeyGenConfig":
        d = dict(d)
        d["spectro"] = SpectroConfig.from_dict(d["spectro"])
        d["target_shape"] = tuple(d["target_shape"])
        return cls(**d)


@dataclass(frozen=True)
class KeyEntry:
    clip: AudioClip
    label: int
    source_matrix: np.ndarray


@dataclass(frozen=True)
class KeySet:
    keys: tuple[KeyEntry, ...]
    config: KeyGenConfig

    def __post_init__(self):
        object.__setattr__(self, "keys", tuple(self.keys))
        if len(self.keys) != self.config.K:
            raise ValueError(f"expected {self.config.K} keys, got {len(self.keys)}")
        for e in self.keys:
            if not 0 <= e.label < self.config.C:
                raise ValueError(f"key label {e.label} outside [0, {self.config.C})")

    def __len__(self) -> int:
        return len(self.keys)

    @property
    def labels(self) -> list[int]:
        return [e.label for e in self.keys]

    @property
    def ids(self) -> list[str]:
        return [key_id(i) for i in range(len(self.keys))]

    @property
    def clips(self) -> list[AudioClip]:
        return [e.clip for e in self.keys]


def key_id(i: int) -> str:
    return f"key_{i:03d}"


def matrix_hash(m: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(m, dtype="<f8").tobytes()).hexdigest()


def sample_key_matrix(d: int, distribution: str, rng: np.random.Generator) -> np.ndarray:
    if d < 1:
        raise ValueError("d must be >= 1")
    if distribution == "bernoulli":
        return rng.integers(0, 2, size=(d, d)).astype(np.float64)
    if distribution == "uniform":
        return rng.random((d, d))
    raise ValueError(f"unknown distribution {distribution!r}")


def assign_key_labels(K: int, C: int, rng: np.random.Generator) -> list[int]:
    """K labels drawn uniformly from [0, C), with replacement."""
    if K < 1 or C < 2:
        raise ValueError("need K >= 1 and C >= 2")
    return [int(v) for v in rng.integers(0, C, size=K)]


def key_mel(m: np.ndarray, cfg: KeyGenConfig) -> MelMatrix:
    """Resize a source matrix onto the mel grid and scale its peak to ``cfg.mel_level``."""
    m = np.asarray(m, dtype=np.float64)
    if not np.all(np.isfinite(m)) or np.any(m < 0):
        raise ValueError("key matrix must be finite and non-negative")
    grid = resize_matrix(m, cfg.target_shape[0], cfg.target_shape[1], cfg.interpolation)
    peak = grid.max()
    if peak > 0:
        grid = grid * (cfg.mel_level / peak)
    return MelMatrix(grid, cfg.spectro)


def synthesize_key(m: np.ndarray, cfg: KeyGenConfig, seed: int | None = None) -> AudioClip:
    """Render a source matrix to a waveform of ``cfg.clip_length`` samples."""
    mel = key_mel(m, cfg)
    if not np.any(mel.values):
        return AudioClip(np.zeros(cfg.clip_length, dtype=np.float32), cfg.spectro.sample_rate)
    mag = mel_to_linear(mel)
    clip = griffin_lim(mag, cfg.spectro, cfg.gl_iterations, seed=cfg.seed if seed is None else seed)
    samples = fit_length(clip.samples, cfg.clip_length).astype(np.float32)
    return AudioClip(samples, cfg.spectro.sample_rate)


def _streams(seed: int):
    matrix_ss, label_ss, phase_ss = np.random.SeedSequence(seed).spawn(3)
    return np.random.default_rng(matrix_ss), np.random.default_rng(label_ss), np.random.default_rng(phase_ss)


def source_matrices(cfg: KeyGenConfig) -> list[np.ndarray]:
    rng, _, _ = _streams(cfg.seed)
    return [sample_key_matrix(cfg.d, cfg.distribution, rng) for _ in range(cfg.K)]


def generate_keyset(cfg: KeyGenConfig) -> KeySet:
    """All randomness (matrices, labels, Griffin-Lim phases) flows from ``cfg.seed``."""
    m_rng, l_rng, p_rng = _streams(cfg.seed)
    matrices = [sample_key_matrix(cfg.d, cfg.distribution, m_rng) for _ in range(cfg.K)]
    labels = assign_key_labels(cfg.K, cfg.C, l_rng)
    phase_seeds = p_rng.integers(0, 2**31 - 1, size=cfg.K)
    keys = [
        KeyEntry(synthesize_key(m, cfg, seed=int(s)), y, m)
        for m, y, s in zip(matrices, labels, phase_seeds)
    ]
    return KeySet(tuple(keys), cfg)


def reference_mel_level(
    clips, spectro: SpectroConfig, n: int = 100, seed: int = 0, percentile: float = 95.0
) -> float:
    """The given percentile of mel magnitudes over a random sample of clips."""
    clips = list(clips)
    rng = np.random.default_rng(seed)
    pick = rng.choice(len(clips), size=min(n, len(clips)), replace=False)
    vals = np.concatenate([mel_spectrogram(clips[i], spectro).values.ravel() for i in sorted(pick)])
    return float(np.percentile(vals, percentile))


def save_keyset(ks: KeySet, out_dir: str | Path, force: bool = False) -> Path:
    """Write one float WAV per key plus ``keyset.json``; refuses to overwrite unless forced."""
    out = Path(out_dir)
    meta_path = out / "keyset.json"
    if meta_path.exists() and not force:
        raise KeySetExistsError(f"{out} already holds a key set; pass force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, e in enumerate(ks.keys):
        name = f"{key_id(i)}.wav"
        write_float_wav(out / name, e.clip.samples, e.clip.sample_rate)
        entries.append(
            {"id": key_id(i), "file": name, "label": e.label, "matrix_sha256": matrix_hash(e.source_matrix)}
        )
    meta = {"format": "taggants-keyset/1", "config": ks.config.to_dict(), "keys": entries}
    meta_path.write_text(json.dumps(meta, indent=2))
    return meta_path


def load_keyset(in_dir: str | Path) -> KeySet:
    src = Path(in_dir)
    meta = json.loads((src / "keyset.json").read_text())
    cfg = KeyGenConfig.from_dict(meta["config"])
    matrices = source_matrices(cfg)
    keys = []
    for i, entry in enumerate(meta["keys"]):
        if matrix_hash(matrices[i]) != entry["matrix_sha256"]:
            raise ValueError(f"{entry['id']}: source matrix does not match the recorded seed")
        samples, sr = read_float_wav(src / entry["file"])
        keys.append(KeyEntry(AudioClip(samples, sr), int(entry["label"]), matrices[i]))
    return KeySet(tuple(keys), cfg)


def with_level(cfg: KeyGenConfig, level: float) -> KeyGenConfig:
    return replace(cfg, mel_level=float(level))
