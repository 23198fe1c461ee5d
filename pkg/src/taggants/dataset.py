"""Labeled audio datasets, poison-set selection and perturbation bookkeeping.

On disk a dataset is a directory holding ``manifest.csv`` (columns ``id``,
``path``, ``label``, ``split``; paths relative to the manifest) next to a
``dataset.json`` sidecar with ``num_classes``, ``sample_rate`` and
``duration``.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import warnings
from collections.abc import Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .audio_dsp import (
    AudioClip,
    fit_length,
    read_float_wav,
    read_wav,
    resample,
    write_float_wav,
    write_wav,
)

log = logging.getLogger(__name__)

SPLITS = ("train", "validation")
MANIFEST_FIELDS = ("id", "path", "label", "split")
MAX_FAILURE_RATE = 0.01


class IngestError(RuntimeError):
    def __init__(self, failures: list[tuple[int, str, str]], total: int):
        self.failures = failures
        self.total = total
        lines = [f"row {row} ({item_id}): {msg}" for row, item_id, msg in failures]
        super().__init__(
            f"{len(failures)} of {total} manifest rows failed to ingest:\n" + "\n".join(lines)
        )


class UnsatisfiablePlanError(ValueError):
    pass


@dataclass(frozen=True)
class Item:
    id: str
    clip: AudioClip
    label: int
    split: str = "train"


@dataclass(frozen=True)
class LabeledDataset:
    items: tuple[Item, ...]
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(self.items))
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        seen = set()
        for it in self.items:
            if it.id in seen:
                raise ValueError(f"duplicate item id {it.id!r}")
            seen.add(it.id)
            if not 0 <= it.label < self.num_classes:
                raise ValueError(f"item {it.id!r}: label {it.label} outside [0, {self.num_classes})")
            if it.split not in SPLITS:
                raise ValueError(f"item {it.id!r}: unknown split {it.split!r}")
        for split in SPLITS:
            if not any(it.split == split for it in self.items):
                raise ValueError(f"dataset has no {split} items")

    def __len__(self) -> int:
        return len(self.items)

    @property
    def train(self) -> list[Item]:
        return [it for it in self.items if it.split == "train"]

    @property
    def validation(self) -> list[Item]:
        return [it for it in self.items if it.split == "validation"]

    @property
    def sample_rate(self) -> int:
        return self.items[0].clip.sample_rate

    @property
    def clip_length(self) -> int:
        return len(self.items[0].clip)

    def index(self) -> dict[str, Item]:
        return {it.id: it for it in self.items}

    def waveforms(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        """Stack one split into ``(n, length)`` float32 samples and int64 labels."""
        items = [it for it in self.items if it.split == split]
        x = np.stack([it.clip.samples for it in items]).astype(np.float32)
        y = np.array([it.label for it in items], dtype=np.int64)
        return x, y


def clip_hash(clip: AudioClip) -> str:
    pcm = np.round(np.clip(clip.samples, -1, 1) * 32767).astype("<i2")
    return hashlib.sha256(pcm.tobytes()).hexdigest()


def _read_meta(manifest: Path) -> dict:
    meta_path = manifest.parent / "dataset.json"
    return json.loads(meta_path.read_text()) if meta_path.exists() else {}


def ingest(
    manifest_path: str | Path,
    num_classes: int | None = None,
    sample_rate: int | None = None,
    duration: float | None = None,
) -> LabeledDataset:
    """Load a manifest, resampling and trimming/padding every clip to a fixed length.

    Bad rows (missing or unreadable audio, out-of-range labels) are collected;
    if more than 1% of rows fail an :class:`IngestError` lists all of them,
    otherwise they are dropped with a warning.
    """
    manifest = Path(manifest_path)
    meta = _read_meta(manifest)
    num_classes = num_classes or meta.get("num_classes")
    sample_rate = sample_rate or meta.get("sample_rate", 16000)
    duration = duration or meta.get("duration", 1.0)
    with manifest.open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    if num_classes is None:
        num_classes = 1 + max(int(r["label"]) for r in rows)
    n_samples = int(round(sample_rate * duration))

    items, failures = [], []
    for row_no, row in enumerate(rows, start=2):
        item_id = row.get("id", "")
        try:
            label = int(row["label"])
            if not 0 <= label < num_classes:
                raise ValueError(f"label {label} outside [0, {num_classes})")
            split = row.get("split") or "train"
            if split not in SPLITS:
                raise ValueError(f"unknown split {split!r}")
            if not item_id or "/" in item_id or "\\" in item_id:
                raise ValueError("id must be a non-empty string without path separators")
            clip = read_wav(manifest.parent / row["path"])
            x = resample(clip.samples, clip.sample_rate, sample_rate)
            x = np.clip(fit_length(x, n_samples), -1.0, 1.0).astype(np.float32)
            items.append(Item(item_id, AudioClip(x, sample_rate), label, split))
        except Exception as exc:  # noqa: BLE001 - every row problem is reported, not raised
            failures.append((row_no, item_id, f"{type(exc).__name__}: {exc}"))

    if failures:
        if len(failures) > MAX_FAILURE_RATE * len(rows):
            raise IngestError(failures, len(rows))
        for row_no, item_id, msg in failures:
            log.warning("skipping manifest row %d (%s): %s", row_no, item_id, msg)
    items.sort(key=lambda it: it.id)
    return LabeledDataset(tuple(items), int(num_classes))


def export_protected(ds: LabeledDataset, out_dir: str | Path) -> Path:
    """Write 16-bit PCM WAVs plus manifest; returns the manifest path."""
    out = Path(out_dir)
    (out / "audio").mkdir(parents=True, exist_ok=True)
    manifest = out / "manifest.csv"
    with manifest.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_FIELDS)
        for it in ds.items:
            rel = f"audio/{it.id}.wav"
            write_wav(out / rel, it.clip)
            writer.writerow((it.id, rel, it.label, it.split))
    meta = {
        "num_classes": ds.num_classes,
        "sample_rate": ds.sample_rate,
        "duration": ds.clip_length / ds.sample_rate,
    }
    (out / "dataset.json").write_text(json.dumps(meta, indent=2))
    return manifest


@dataclass(frozen=True)
class PoisonPlan:
    """Assignment of poisoned training items to keys.

    ``partition[i]`` holds the ids crafted towards key ``i``; every such item
    carries the label of key ``i``.
    """

    epsilon: float
    partition: dict[int, tuple[str, ...]]
    key_labels: tuple[int, ...]
    seed: int
    n_train: int = 0

    @property
    def poison_ids(self) -> list[str]:
        return [i for ids in self.partition.values() for i in ids]

    def __len__(self) -> int:
        return sum(len(v) for v in self.partition.values())

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "seed": self.seed,
            "n_train": self.n_train,
            "key_labels": list(self.key_labels),
            "partition": {str(k): list(v) for k, v in self.partition.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PoisonPlan":
        return cls(
            epsilon=d["epsilon"],
            partition={int(k): tuple(v) for k, v in d["partition"].items()},
            key_labels=tuple(d["key_labels"]),
            seed=d["seed"],
            n_train=d.get("n_train", 0),
        )


def poison_budget(epsilon: float, n: int) -> int:
    # round half up; Python's round() is banker's rounding
    return int(math.floor(epsilon * n + 0.5))


def select_poison_set(
    ds: LabeledDataset, keys, epsilon: float, seed: int
) -> PoisonPlan:
    """Pick ``round(epsilon * N)`` label-matching training items and split them over keys.

    ``keys`` is a :class:`~taggants.keygen.KeySet` or a plain sequence of key
    labels. Items are drawn uniformly without replacement among training
    items whose label matches some key; keys sharing a label take the drawn
    items round-robin in draw order.
    """
    key_labels = tuple(int(y) for y in getattr(keys, "labels", keys))
    if not 0 < epsilon < 1:
        raise ValueError("epsilon must lie in (0, 1)")
    train = sorted(ds.train, key=lambda it: it.id)
    present = {it.label for it in train}
    for y in key_labels:
        if y not in present:
            raise UnsatisfiablePlanError(f"key label {y} has no training items")

    n = poison_budget(epsilon, len(train))
    label_set = set(key_labels)
    candidates = [it for it in train if it.label in label_set]
    if n > len(candidates):
        raise UnsatisfiablePlanError(
            f"poison budget {n} exceeds the {len(candidates)} items matching key labels"
        )
    if n < len(key_labels):
        warnings.warn(
            f"poison budget {n} is smaller than the key count {len(key_labels)}; some keys get no poisons",
            stacklevel=2,
        )

    owners: dict[int, list[int]] = {}
    for i, y in enumerate(key_labels):
        owners.setdefault(y, []).append(i)
    turn = {y: 0 for y in owners}
    partition: dict[int, list[str]] = {i: [] for i in range(len(key_labels))}
    rng = np.random.default_rng(seed)
    for j in rng.permutation(len(candidates))[:n]:
        it = candidates[j]
        keys_for_label = owners[it.label]
        partition[keys_for_label[turn[it.label] % len(keys_for_label)]].append(it.id)
        turn[it.label] += 1
    return PoisonPlan(
        epsilon=epsilon,
        partition={i: tuple(v) for i, v in partition.items()},
        key_labels=key_labels,
        seed=seed,
        n_train=len(train),
    )


@dataclass(frozen=True)
class PerturbationSet:
    deltas: dict[str, np.ndarray] = field(default_factory=dict)
    bound: float = 0.05

    def __post_init__(self):
        for k, d in self.deltas.items():
            d = np.asarray(d)
            if d.ndim != 1:
                raise ValueError(f"delta {k!r} must be 1-D")
            if np.max(np.abs(d), initial=0.0) > self.bound:
                raise ValueError(f"delta {k!r} exceeds bound {self.bound}")

    def __len__(self) -> int:
        return len(self.deltas)


def apply_perturbations(ds: LabeledDataset, perts: PerturbationSet) -> LabeledDataset:
    """Return a copy with ``clip + delta`` clamped to [-1, 1] on the perturbed ids."""
    index = ds.index()
    orphans = [k for k in perts.deltas if k not in index]
    if orphans:
        raise KeyError(f"perturbations reference unknown ids: {orphans[:5]}")
    items = []
    for it in ds.items:
        delta = perts.deltas.get(it.id)
        if delta is None:
            items.append(it)
            continue
        if len(delta) != len(it.clip):
            raise ValueError(f"delta for {it.id!r} has length {len(delta)}, clip has {len(it.clip)}")
        x = np.clip(it.clip.samples + delta, -1.0, 1.0).astype(it.clip.samples.dtype)
        items.append(replace(it, clip=AudioClip(x, it.clip.sample_rate)))
    return LabeledDataset(tuple(items), ds.num_classes)


def save_perturbations(
    perts: PerturbationSet, out_dir: str | Path, sample_rate: int, plan: PoisonPlan | None = None
) -> Path:
    out = Path(out_dir)
    (out / "deltas").mkdir(parents=True, exist_ok=True)
    for item_id, delta in perts.deltas.items():
        write_float_wav(out / "deltas" / f"{item_id}.wav", delta, sample_rate)
    meta = {
        "bound": perts.bound,
        "sample_rate": sample_rate,
        "ids": sorted(perts.deltas),
        "plan": plan.to_dict() if plan is not None else None,
    }
    path = out / "perturbations.json"
    path.write_text(json.dumps(meta, indent=2))
    return path


def load_perturbations(in_dir: str | Path) -> tuple[PerturbationSet, PoisonPlan | None]:
    src = Path(in_dir)
    meta = json.loads((src / "perturbations.json").read_text())
    deltas = {}
    for item_id in meta["ids"]:
        data, _ = read_float_wav(src / "deltas" / f"{item_id}.wav")
        deltas[item_id] = data
    plan = PoisonPlan.from_dict(meta["plan"]) if meta.get("plan") else None
    return PerturbationSet(deltas, meta["bound"]), plan


def from_arrays(
    waveforms: Sequence[np.ndarray],
    labels: Sequence[int],
    splits: Sequence[str],
    num_classes: int,
    sample_rate: int = 16000,
    prefix: str = "clip",
) -> LabeledDataset:
    items = tuple(
        Item(f"{prefix}_{i:05d}", AudioClip(np.asarray(x), sample_rate), int(y), s)
        for i, (x, y, s) in enumerate(zip(waveforms, labels, splits))
    )
    return LabeledDataset(items, num_classes)
