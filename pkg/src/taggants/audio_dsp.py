"""Signal-processing kernels: STFT, mel features, Griffin-Lim, resizing, SNR, WAV I/O.

Everything here is a pure numpy function of its inputs. The differentiable
feature path used by the classifier lives in :mod:`taggants.model` and reuses
the filterbank built here so both paths agree.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.optimize import nnls
from scipy.signal import get_window, resample_poly

PCM_SCALE = 32767.0


class InvalidInputError(ValueError):
    """Raised when a DSP kernel receives inputs outside its domain."""


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        x = np.asarray(self.samples)
        if not np.issubdtype(x.dtype, np.floating):
            x = x.astype(np.float64)
        if x.ndim != 1 or x.size == 0:
            raise InvalidInputError("AudioClip needs a non-empty mono waveform")
        if self.sample_rate <= 0:
            raise InvalidInputError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > 1.0:
            raise InvalidInputError("AudioClip samples must be finite and lie in [-1, 1]")
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class SpectroConfig:
    sample_rate: int = 16000
    n_fft: int = 400
    hop: int = 160
    n_mels: int = 128
    fmin: float = 0.0
    fmax: float | None = None
    window: str = "hann"

    def __post_init__(self):
        fmax = self.sample_rate / 2 if self.fmax is None else float(self.fmax)
        object.__setattr__(self, "fmax", fmax)
        if not 0 < self.hop <= self.n_fft:
            raise InvalidInputError("need 0 < hop <= n_fft")
        if not 0 < self.n_mels <= self.n_bins:
            raise InvalidInputError("need 0 < n_mels <= n_fft/2 + 1")
        if not 0 <= self.fmin < fmax <= self.sample_rate / 2:
            raise InvalidInputError("need 0 <= fmin < fmax <= sample_rate/2")

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1

    def n_frames(self, n_samples: int) -> int:
        if n_samples < self.n_fft:
            return 0
        return (n_samples - self.n_fft) // self.hop + 1

    def n_samples(self, n_frames: int) -> int:
        return (n_frames - 1) * self.hop + self.n_fft

    def to_dict(self) -> dict:
        return {
            "sample_rate": self.sample_rate,
            "n_fft": self.n_fft,
            "hop": self.hop,
            "n_mels": self.n_mels,
            "fmin": self.fmin,
            "fmax": self.fmax,
            "window": self.window,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SpectroConfig":
        return cls(**d)


@dataclass(frozen=True)
class MelMatrix:
    values: np.ndarray
    config: SpectroConfig = field(default_factory=SpectroConfig)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != self.config.n_mels:
            raise InvalidInputError(
                f"mel matrix must be n_mels x n_frames, got {v.shape} for n_mels={self.config.n_mels}"
            )
        if np.any(v < 0):
            raise InvalidInputError("mel magnitudes must be non-negative")
        object.__setattr__(self, "values", v)


@lru_cache(maxsize=16)
def _window(name: str, n: int) -> np.ndarray:
    # periodic (DFT-even) taper, the usual STFT convention
    w = get_window(name, n, fftbins=True).astype(np.float64)
    w.setflags(write=False)
    return w


def window_array(cfg: SpectroConfig) -> np.ndarray:
    return _window(cfg.window, cfg.n_fft)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_centers(cfg: SpectroConfig) -> np.ndarray:
    """Center frequencies (Hz) of the triangular mel bands."""
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    return edges[1:-1]


@lru_cache(maxsize=16)
def _filterbank(cfg: SpectroConfig) -> np.ndarray:
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    freqs = np.arange(cfg.n_bins) * cfg.sample_rate / cfg.n_fft
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lower) / (center - lower)
    falling = (upper - freqs[None, :]) / (upper - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb.setflags(write=False)
    return fb


def mel_filterbank(cfg: SpectroConfig) -> np.ndarray:
    """Triangular HTK-scale filterbank, shape ``(n_mels, n_fft // 2 + 1)``, peak 1 per band."""
    return _filterbank(cfg)


def stft(clip: AudioClip, cfg: SpectroConfig) -> np.ndarray:
    """Unpadded STFT, shape ``(n_fft // 2 + 1, n_frames)``."""
    x = np.asarray(clip.samples, dtype=np.float64)
    n_frames = cfg.n_frames(x.shape[0])
    if n_frames < 1:
        raise InvalidInputError(f"clip of {x.shape[0]} samples is shorter than n_fft={cfg.n_fft}")
    return _stft_raw(x, cfg)


def istft(spec: np.ndarray, cfg: SpectroConfig) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft` (least-squares synthesis)."""
    spec = np.asarray(spec)
    n_frames = spec.shape[1]
    w = window_array(cfg)
    frames = np.fft.irfft(spec.T, n=cfg.n_fft, axis=-1) * w
    n = cfg.n_samples(n_frames)
    out = np.zeros(n)
    norm = np.zeros(n)
    for t in range(n_frames):
        s = t * cfg.hop
        out[s : s + cfg.n_fft] += frames[t]
        norm[s : s + cfg.n_fft] += w * w
    # the first/last few samples are barely covered by the taper; floor the
    # normaliser there instead of amplifying them
    return out / np.maximum(norm, 1e-2 * norm.max())


def mel_spectrogram(clip: AudioClip, cfg: SpectroConfig) -> MelMatrix:
    return MelMatrix(mel_filterbank(cfg) @ np.abs(stft(clip, cfg)), cfg)


def mel_to_linear(mel: MelMatrix, filterbank: np.ndarray | None = None) -> np.ndarray:
    """Non-negative least-squares inversion of the filterbank, column by column.

    ``filterbank`` overrides the one implied by ``mel.config`` (shape
    ``n_mels x n_bins``).
    """
    fb = mel_filterbank(mel.config) if filterbank is None else np.asarray(filterbank, dtype=np.float64)
    out = np.zeros((fb.shape[1], mel.values.shape[1]))
    active = np.flatnonzero(fb.sum(axis=0) > 0)
    A = fb[:, active]
    solved: dict[bytes, np.ndarray] = {}
    for t in range(mel.values.shape[1]):
        col = mel.values[:, t]
        if not np.any(col):
            continue
        key = col.tobytes()
        if key not in solved:
            solved[key], _ = nnls(A, col, maxiter=50 * A.shape[1])
        out[active, t] = solved[key]
    return np.maximum(out, 0.0)


def spectral_convergence(clip: AudioClip, mag: np.ndarray, cfg: SpectroConfig) -> float:
    """``|| |stft(clip)| - mag || / ||mag||`` over the frames both share."""
    est = np.abs(stft(clip, cfg))
    n = min(est.shape[1], mag.shape[1])
    ref = np.linalg.norm(mag[:, :n])
    if ref == 0:
        return 0.0
    return float(np.linalg.norm(est[:, :n] - mag[:, :n]) / ref)


def griffin_lim(
    mag: np.ndarray,
    cfg: SpectroConfig,
    iterations: int = 60,
    seed: int = 0,
    momentum: float = 0.99,
) -> AudioClip:
    """Phase retrieval by alternating projections (fast Griffin-Lim).

    The phase starts from a seeded uniform draw. ``momentum=0`` gives the
    classic algorithm. The result is scaled down only if its peak exceeds 1.
    """
    mag = np.asarray(mag, dtype=np.float64)
    if iterations < 0:
        raise InvalidInputError("iterations must be >= 0")
    if np.any(mag < 0):
        raise InvalidInputError("magnitudes must be non-negative")
    rng = np.random.default_rng(seed)
    angles = np.exp(2j * np.pi * rng.random(mag.shape))
    prev = np.zeros_like(angles)
    for _ in range(iterations):
        wav = istft(mag * angles, cfg)
        rebuilt = _stft_raw(wav, cfg)
        angles = rebuilt - (momentum / (1 + momentum)) * prev if momentum else rebuilt
        prev = rebuilt
        angles = angles / np.maximum(np.abs(angles), 1e-16)
    wav = istft(mag * angles, cfg)
    peak = np.max(np.abs(wav)) if wav.size else 0.0
    if peak > 1.0:
        wav = wav / peak
    return AudioClip(wav, cfg.sample_rate)


def _stft_raw(x: np.ndarray, cfg: SpectroConfig) -> np.ndarray:
    n_frames = cfg.n_frames(x.shape[0])
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.n_fft)[:: cfg.hop][:n_frames]
    return np.fft.rfft(frames * window_array(cfg), axis=-1).T


def resize_matrix(m: np.ndarray, out_rows: int, out_cols: int, mode: str = "nearest") -> np.ndarray:
    """Resize a 2-D array with nearest or bilinear (align_corners=False) sampling.

    Output cell ``i`` samples the source at ``(i + 0.5) * in / out - 0.5``.
    Nearest rounds half-way cases toward the lower index; bilinear clamps
    coordinates to the source edges.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.size == 0:
        raise InvalidInputError("resize_matrix needs a non-empty 2-D matrix")
    if out_rows < 1 or out_cols < 1:
        raise InvalidInputError("output shape must be at least 1x1")
    if mode == "nearest":
        r = _nearest_index(m.shape[0], out_rows)
        c = _nearest_index(m.shape[1], out_cols)
        return m[np.ix_(r, c)]
    if mode == "bilinear":
        r0, r1, wr = _linear_weights(m.shape[0], out_rows)
        c0, c1, wc = _linear_weights(m.shape[1], out_cols)
        top = m[np.ix_(r0, c0)] * (1 - wc) + m[np.ix_(r0, c1)] * wc
        bottom = m[np.ix_(r1, c0)] * (1 - wc) + m[np.ix_(r1, c1)] * wc
        out = top * (1 - wr)[:, None] + bottom * wr[:, None]
        return np.clip(out, m.min(), m.max())
    raise InvalidInputError(f"unknown interpolation mode {mode!r}")


def _source_coords(n_in: int, n_out: int) -> np.ndarray:
    return (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5


def _nearest_index(n_in: int, n_out: int) -> np.ndarray:
    # ceil(x - 0.5) sends exact halves down
    idx = np.ceil(_source_coords(n_in, n_out) - 0.5).astype(np.int64)
    return np.clip(idx, 0, n_in - 1)


def _linear_weights(n_in: int, n_out: int):
    x = np.clip(_source_coords(n_in, n_out), 0.0, n_in - 1)
    lo = np.floor(x).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, x - lo


def snr_db(clean: AudioClip, perturbed: AudioClip) -> float:
    """Signal-to-noise ratio in dB; ``inf`` when the two clips are identical."""
    if len(clean) != len(perturbed) or clean.sample_rate != perturbed.sample_rate:
        raise InvalidInputError("clips must share length and sample rate")
    x = np.asarray(clean.samples, dtype=np.float64)
    noise = np.asarray(perturbed.samples, dtype=np.float64) - x
    signal_energy = float(np.dot(x, x))
    if signal_energy == 0.0:
        raise InvalidInputError("clean signal has zero energy")
    noise_energy = float(np.dot(noise, noise))
    if noise_energy == 0.0:
        return math.inf
    return 10.0 * math.log10(signal_energy / noise_energy)


def fit_length(x: np.ndarray, n: int) -> np.ndarray:
    """Trim or zero-pad a waveform to exactly ``n`` samples."""
    if x.shape[0] >= n:
        return x[:n]
    return np.concatenate([x, np.zeros(n - x.shape[0], dtype=x.dtype)])


def resample(x: np.ndarray, sr_in: int, sr_out: int) -> np.ndarray:
    if sr_in == sr_out:
        return x
    g = math.gcd(sr_in, sr_out)
    return resample_poly(x, sr_out // g, sr_in // g)


def read_wav(path: str | Path) -> AudioClip:
    """Read a mono WAV (int16/int32/float) as an AudioClip in [-1, 1]."""
    sr, data = wavfile.read(str(path))
    if data.ndim > 1:
        data = data.mean(axis=1)
    if data.dtype == np.int16:
        x = data.astype(np.float64) / PCM_SCALE
    elif data.dtype == np.int32:
        x = data.astype(np.float64) / 2147483647.0
    elif data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 127.0
    else:
        x = data.astype(np.float64)
    return AudioClip(np.clip(x, -1.0, 1.0), sr)


def write_wav(path: str | Path, clip: AudioClip) -> None:
    """Write 16-bit PCM; round-trip error is at most half a quantization step."""
    pcm = np.round(np.clip(clip.samples, -1.0, 1.0) * PCM_SCALE).astype(np.int16)
    wavfile.write(str(path), clip.sample_rate, pcm)


def write_float_wav(path: str | Path, samples: np.ndarray, sample_rate: int) -> None:
    wavfile.write(str(path), sample_rate, np.asarray(samples, dtype=np.float32))


def read_float_wav(path: str | Path) -> tuple[np.ndarray, int]:
    sr, data = wavfile.read(str(path))
    return np.asarray(data, dtype=np.float32), sr
