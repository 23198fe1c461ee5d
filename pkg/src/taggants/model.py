"""Desk-scale spectrogram classifier: training, gradients and a top-k facade.

The network consumes raw waveforms; the log-mel front end is written in
torch so gradients flow back to the samples (needed for crafting).
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .audio_dsp import AudioClip, MelMatrix, SpectroConfig, mel_filterbank, window_array
from .dataset import LabeledDataset

log = logging.getLogger(__name__)

ARCH_NAME = "spectro-cnn"
ARCH_VERSION = 1
CHECKPOINT_FORMAT = "taggants-checkpoint/1"


class TrainingError(RuntimeError):
    pass


class NumericalError(RuntimeError):
    pass


class CheckpointMismatchError(ValueError):
    pass


DESK_SPECTRO = SpectroConfig(sample_rate=16000, n_fft=400, hop=160, n_mels=64)


@dataclass
class TrainConfig:
    epochs: int = 12
    batch_size: int = 64
    lr: float = 2e-3
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0
    mixup_alpha: float = 0.2
    time_mask: int = 12
    freq_mask: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs >= 0, batch_size >= 1 and lr > 0 required")
        if self.mixup_alpha < 0:
            raise ValueError("mixup_alpha must be >= 0")
        self.betas = tuple(self.betas)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


def default_descriptor(num_classes: int, spectro: SpectroConfig = DESK_SPECTRO) -> dict:
    return {
        "arch": ARCH_NAME,
        "version": ARCH_VERSION,
        "num_classes": int(num_classes),
        "channels": [16, 32, 64, 128],
        "pool": "time",
        "spectro": spectro.to_dict(),
        "log_offset": 1e-5,
        "feature_mean": 0.0,
        "feature_std": 1.0,
    }


class LogMel(nn.Module):
    """Differentiable ``log(mel_filterbank @ |stft| + offset)``, shape ``(B, n_mels, frames)``."""

    def __init__(self, spectro: SpectroConfig, log_offset: float):
        super().__init__()
        self.n_fft = spectro.n_fft
        self.hop = spectro.hop
        self.log_offset = log_offset
        self.register_buffer("window", torch.from_numpy(np.array(window_array(spectro))).float())
        self.register_buffer("fb", torch.from_numpy(np.array(mel_filterbank(spectro))).float())

    def magnitude(self, wav: torch.Tensor) -> torch.Tensor:
        frames = wav.unfold(-1, self.n_fft, self.hop) * self.window
        spec = torch.fft.rfft(frames, dim=-1)
        # smooth at zero so second derivatives stay finite
        return torch.sqrt(spec.real**2 + spec.imag**2 + 1e-20)

    def mel(self, wav: torch.Tensor) -> torch.Tensor:
        return (self.magnitude(wav) @ self.fb.T).transpose(-1, -2)

    def forward(self, wav: torch.Tensor) -> torch.Tensor:
        return torch.log(self.mel(wav) + self.log_offset)


class SpectroCNN(nn.Module):
    def __init__(self, descriptor: dict):
        super().__init__()
        self.descriptor = dict(descriptor)
        spectro = SpectroConfig.from_dict(descriptor["spectro"])
        c1, c2, c3, c4 = descriptor["channels"]
        self.frontend = LogMel(spectro, descriptor["log_offset"])
        self.register_buffer("feat_mean", torch.tensor(float(descriptor["feature_mean"])))
        self.register_buffer("feat_std", torch.tensor(float(descriptor["feature_std"])))
        self.body = nn.Sequential(
            nn.Conv2d(1, c1, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(c1, c2, 3, padding=1),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(c2, c3, 3, padding=1),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(c3, c4, 3, padding=1),
            nn.ReLU(),
        )
        # "time" keeps the frequency layout (mean over frames only); "global" averages both axes
        self.pool = descriptor.get("pool", "global")
        bands = self._pooled_bands(spectro.n_mels)
        self.head = nn.Linear(c4 * bands, descriptor["num_classes"])

    def features(self, wav: torch.Tensor) -> torch.Tensor:
        return (self.frontend(wav) - self.feat_mean) / self.feat_std

    def _pooled_bands(self, n_mels: int) -> int:
        if self.pool == "global":
            return 1
        with torch.no_grad():
            return self.body(torch.zeros(1, 1, n_mels, 32)).shape[2]

    def embed(self, feats: torch.Tensor) -> torch.Tensor:
        h = self.body(feats.unsqueeze(1))
        h = h.mean(dim=3) if self.pool == "time" else h.mean(dim=(2, 3))
        return h.flatten(1)

    def classify(self, feats: torch.Tensor) -> torch.Tensor:
        return self.head(self.embed(feats))

    def forward(self, wav: torch.Tensor) -> torch.Tensor:
        return self.classify(self.features(wav))


@dataclass
class ModelParams:
    """A classifier plus the descriptor needed to rebuild it."""

    module: SpectroCNN
    descriptor: dict
    train_config: dict = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return self.descriptor["num_classes"]

    @property
    def n_params(self) -> int:
        return sum(p.numel() for p in self.trainable())

    @property
    def dtype(self) -> torch.dtype:
        return next(self.module.parameters()).dtype

    def trainable(self) -> list[torch.Tensor]:
        return [p for p in self.module.parameters() if p.requires_grad]

    def flat(self) -> np.ndarray:
        return torch.cat([p.detach().reshape(-1) for p in self.trainable()]).cpu().numpy()

    def to(self, dtype: torch.dtype) -> "ModelParams":
        module = copy.deepcopy(self.module).to(dtype)
        return ModelParams(module, dict(self.descriptor), dict(self.train_config))

    def copy(self) -> "ModelParams":
        return ModelParams(copy.deepcopy(self.module), dict(self.descriptor), dict(self.train_config))


def init_model(descriptor: dict, seed: int) -> ModelParams:
    if descriptor.get("arch") != ARCH_NAME:
        raise CheckpointMismatchError(f"unknown architecture {descriptor.get('arch')!r}")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        module = SpectroCNN(descriptor)
    module.eval()
    return ModelParams(module, dict(descriptor))


def _as_tensor(x, dtype=torch.float32) -> torch.Tensor:
    if isinstance(x, AudioClip):
        x = x.samples
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def feature_stats(ds: LabeledDataset, descriptor: dict, max_items: int = 500) -> tuple[float, float]:
    frontend = LogMel(SpectroConfig.from_dict(descriptor["spectro"]), descriptor["log_offset"])
    x, _ = ds.waveforms("train")
    with torch.no_grad():
        feats = frontend(torch.from_numpy(x[:max_items]))
    return float(feats.mean()), float(feats.std())


def mixup_batch(
    x: torch.Tensor,
    y: torch.Tensor,
    alpha: float,
    rng: np.random.Generator,
    lam: float | None = None,
):
    """Mix a batch with a permuted copy of itself.

    ``y`` holds one-hot (or soft) label rows. Returns ``(x_mix, y_mix, lam, perm)``
    with ``lam ~ Beta(alpha, alpha)`` unless ``lam`` is given.
    """
    if x.shape[0] < 2:
        raise ValueError("mixup needs a batch of at least two")
    if lam is None:
        lam = float(rng.beta(alpha, alpha)) if alpha > 0 else 1.0
    perm = torch.from_numpy(rng.permutation(x.shape[0]))
    return lam * x + (1 - lam) * x[perm], lam * y + (1 - lam) * y[perm], lam, perm


def spec_masks(features, time_w: int, freq_w: int, rng: np.random.Generator):
    """Zero one random block of ``time_w`` frames and one of ``freq_w`` bands.

    Accepts a :class:`MelMatrix`, a numpy array or a torch tensor shaped
    ``(bands, frames)`` and returns the same kind; the input is not modified.
    """
    if isinstance(features, MelMatrix):
        return MelMatrix(spec_masks(features.values, time_w, freq_w, rng), features.config)
    n_bands, n_frames = features.shape[-2:]
    if time_w > n_frames or freq_w > n_bands or time_w < 0 or freq_w < 0:
        raise ValueError("mask widths must fit inside the matrix")
    out = features.clone() if isinstance(features, torch.Tensor) else np.array(features, copy=True)
    t0 = int(rng.integers(0, n_frames - time_w + 1))
    f0 = int(rng.integers(0, n_bands - freq_w + 1))
    if time_w:
        out[..., :, t0 : t0 + time_w] = 0
    if freq_w:
        out[..., f0 : f0 + freq_w, :] = 0
    return out


def evaluate_accuracy(params: ModelParams, x: np.ndarray, y: np.ndarray, batch_size: int = 256) -> float:
    preds = []
    params.module.eval()
    with torch.no_grad():
        for s in range(0, len(x), batch_size):
            logits = params.module(_as_tensor(x[s : s + batch_size], params.dtype))
            preds.append(logits.argmax(1).numpy())
    return float(np.mean(np.concatenate(preds) == y)) if len(x) else float("nan")


@dataclass
class TrainResult:
    params: ModelParams
    val_accuracy: float
    history: list[dict]


def train(
    ds: LabeledDataset,
    cfg: TrainConfig,
    descriptor: dict | None = None,
    progress: bool = False,
) -> TrainResult:
    """Train from a seeded initialization with Adam, mixup and spectrogram masking."""
    x_tr, y_tr = ds.waveforms("train")
    x_va, y_va = ds.waveforms("validation")
    if len(x_tr) == 0:
        raise TrainingError("empty training split")
    if descriptor is None:
        descriptor = default_descriptor(ds.num_classes)
        descriptor["feature_mean"], descriptor["feature_std"] = feature_stats(ds, descriptor)
    params = init_model(descriptor, cfg.seed)
    params.train_config = cfg.to_dict()
    model = params.module
    rng = np.random.default_rng(cfg.seed)
    history = []

    if cfg.epochs > 0:
        opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay)
        steps_per_epoch = math.ceil(len(x_tr) / cfg.batch_size)
        sched = torch.optim.lr_scheduler.OneCycleLR(
            opt, max_lr=cfg.lr, total_steps=cfg.epochs * steps_per_epoch, pct_start=0.15
        )
        x_all = torch.from_numpy(x_tr)
        y_all = F.one_hot(torch.from_numpy(y_tr), ds.num_classes).float()
        for epoch in range(cfg.epochs):
            model.train()
            order = rng.permutation(len(x_tr))
            total, seen = 0.0, 0
            for s in range(0, len(order), cfg.batch_size):
                idx = torch.from_numpy(order[s : s + cfg.batch_size])
                xb, yb = x_all[idx], y_all[idx]
                if cfg.mixup_alpha > 0 and len(idx) >= 2:
                    xb, yb, _, _ = mixup_batch(xb, yb, cfg.mixup_alpha, rng)
                feats = model.features(xb)
                if cfg.time_mask or cfg.freq_mask:
                    feats = torch.stack([spec_masks(f, cfg.time_mask, cfg.freq_mask, rng) for f in feats])
                loss = -(yb * F.log_softmax(model.classify(feats), dim=1)).sum(1).mean()
                if not torch.isfinite(loss):
                    raise TrainingError(f"loss became non-finite in epoch {epoch}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                sched.step()
                total += loss.item() * len(idx)
                seen += len(idx)
            model.eval()
            record = {"epoch": epoch, "train_loss": total / seen}
            if progress or epoch == cfg.epochs - 1:
                record["val_accuracy"] = evaluate_accuracy(params, x_va, y_va)
                log.info("epoch %d loss %.4f val %.4f", epoch, record["train_loss"], record["val_accuracy"])
            history.append(record)
    model.eval()
    return TrainResult(params, evaluate_accuracy(params, x_va, y_va), history)


def _loss(params: ModelParams, wav: torch.Tensor, label: int) -> torch.Tensor:
    logits = params.module(wav.unsqueeze(0))
    return F.cross_entropy(logits, torch.tensor([int(label)]))


def per_sample_gradient(params: ModelParams, clip: AudioClip, label: int) -> np.ndarray:
    """Cross-entropy gradient w.r.t. every trainable parameter, flattened in module order."""
    params.module.eval()
    wav = _as_tensor(clip, params.dtype)
    grads = torch.autograd.grad(_loss(params, wav, label), params.trainable())
    flat = torch.cat([g.reshape(-1) for g in grads])
    if not torch.all(torch.isfinite(flat)):
        raise NumericalError("non-finite parameter gradient")
    return flat.numpy()


def waveform_gradient(params: ModelParams, clip: AudioClip, label: int) -> np.ndarray:
    """Cross-entropy gradient w.r.t. the input samples."""
    params.module.eval()
    wav = _as_tensor(clip, params.dtype).requires_grad_(True)
    (g,) = torch.autograd.grad(_loss(params, wav, label), [wav])
    if not torch.all(torch.isfinite(g)):
        raise NumericalError("non-finite waveform gradient")
    return g.numpy()


def loss_value(params: ModelParams, clip: AudioClip | np.ndarray, label: int) -> float:
    params.module.eval()
    with torch.no_grad():
        return float(_loss(params, _as_tensor(clip, params.dtype), label))


def set_flat(params: ModelParams, flat: np.ndarray) -> None:
    """Overwrite the trainable parameters from a flat vector (module order)."""
    flat_t = torch.as_tensor(flat)
    offset = 0
    with torch.no_grad():
        for p in params.trainable():
            n = p.numel()
            p.copy_(flat_t[offset : offset + n].reshape(p.shape))
            offset += n


def logits(params: ModelParams, clips) -> np.ndarray:
    params.module.eval()
    x = np.stack([c.samples if isinstance(c, AudioClip) else np.asarray(c) for c in clips])
    with torch.no_grad():
        return params.module(_as_tensor(x, params.dtype)).double().numpy()


def topk_from_logits(z: np.ndarray, k: int) -> list[int]:
    """Indices of the ``k`` largest entries, descending, ties to the lower index."""
    z = np.asarray(z)
    if not 1 <= k <= z.shape[-1]:
        raise ValueError(f"k must lie in [1, {z.shape[-1]}]")
    order = np.lexsort((np.arange(z.shape[-1]), -z))
    return [int(c) for c in order[:k]]


def predict_topk(params: ModelParams, clip: AudioClip, k: int) -> list[int]:
    return topk_from_logits(logits(params, [clip])[0], k)


class TopKOracle:
    """Black-box view of a model: only ranked class lists come out."""

    def __init__(self, params: ModelParams):
        self._params = params

    @property
    def num_classes(self) -> int:
        return self._params.num_classes

    def __call__(self, clip: AudioClip, k: int) -> list[int]:
        return predict_topk(self._params, clip, k)

    def batch(self, clips, k: int) -> list[list[int]]:
        z = logits(self._params, clips)
        return [topk_from_logits(row, k) for row in z]


def save_checkpoint(params: ModelParams, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "descriptor": params.descriptor,
            "train_config": params.train_config,
            "state_dict": params.module.state_dict(),
        },
        path,
    )
    return path


def load_checkpoint(path: str | Path, expected: dict | None = None) -> ModelParams:
    blob = torch.load(Path(path), map_location="cpu", weights_only=False)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointMismatchError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    desc = blob["descriptor"]
    if desc.get("arch") != ARCH_NAME or desc.get("version") != ARCH_VERSION:
        raise CheckpointMismatchError(f"{path}: unsupported architecture {desc.get('arch')}/{desc.get('version')}")
    if expected is not None:
        keys = ("arch", "version", "num_classes", "channels", "spectro")
        diff = [k for k in keys if expected.get(k) != desc.get(k)]
        if diff:
            raise CheckpointMismatchError(f"{path}: descriptor mismatch on {diff}")
    params = init_model(desc, 0)
    params.module.load_state_dict(blob["state_dict"])
    params.train_config = blob.get("train_config", {})
    params.module.eval()
    return params
