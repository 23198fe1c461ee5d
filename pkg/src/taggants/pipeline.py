"""End-to-end workflow: protect a dataset, train suspects, verify, and run the grid.

Every stage draws its seed from the master seed plus a stage name and
indices, so any single stage can be rerun on its own and give the same
result.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import shutil
import tempfile
import traceback
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .audio_dsp import snr_db
from .crafting import AlignmentTrace, CraftConfig, craft
from .dataset import (
    LabeledDataset,
    PerturbationSet,
    PoisonPlan,
    apply_perturbations,
    export_protected,
    ingest,
    save_perturbations,
    select_poison_set,
)
from .keygen import DISTRIBUTIONS, INTERPOLATIONS, KeyGenConfig, KeySet, generate_keyset, reference_mel_level, save_keyset
from .model import (
    DESK_SPECTRO,
    ModelParams,
    TopKOracle,
    TrainConfig,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .verify import DEFAULT_ALPHA, DEFAULT_K, build_report, fisher_combine, floor_pvalue, score_rankings, query_rankings

log = logging.getLogger(__name__)

STAGES = ("surrogate", "keygen", "plan", "craft", "victim", "benign", "desk")


def stage_seed(master: int, stage: str, *index: int) -> int:
    """Deterministic 31-bit seed for one stage of the pipeline."""
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    ss = np.random.SeedSequence([int(master), STAGES.index(stage), *map(int, index)])
    return int(ss.generate_state(1)[0] & 0x7FFFFFFF)


# ---------------------------------------------------------------- keys


def keygen_config_for(ds: LabeledDataset, d: int, distribution: str, interpolation: str, K: int, seed: int, **kw) -> KeyGenConfig:
    """Key configuration matched to a dataset: class count, clip length and mel level."""
    spectro = kw.pop("spectro", DESK_SPECTRO)
    level = reference_mel_level([it.clip for it in ds.train], spectro)
    return KeyGenConfig(
        d=d,
        distribution=distribution,
        interpolation=interpolation,
        K=K,
        C=ds.num_classes,
        seed=seed,
        spectro=spectro,
        clip_length=ds.clip_length,
        mel_level=level,
        **kw,
    )


# ---------------------------------------------------------------- protect


@dataclass
class ProtectResult:
    protected: LabeledDataset
    plan: PoisonPlan
    perturbations: PerturbationSet
    trace: AlignmentTrace
    snr: list[dict]

    @property
    def mean_snr_db(self) -> float:
        return float(np.mean([r["snr_db"] for r in self.snr]))


def snr_rows(clean: LabeledDataset, protected: LabeledDataset, plan: PoisonPlan) -> list[dict]:
    before, after = clean.index(), protected.index()
    owner = {item_id: i for i, ids in plan.partition.items() for item_id in ids}
    rows = []
    for item_id in plan.poison_ids:
        a, b = before[item_id].clip, after[item_id].clip
        rows.append(
            {
                "id": item_id,
                "label": before[item_id].label,
                "key": owner[item_id],
                "snr_db": snr_db(a, b),
                "max_abs_delta": float(np.max(np.abs(b.samples.astype(np.float64) - a.samples))),
            }
        )
    return rows


def protect(
    ds: LabeledDataset,
    keys: KeySet,
    surrogate: ModelParams,
    epsilon: float,
    craft_cfg: CraftConfig,
    plan_seed: int,
) -> ProtectResult:
    plan = select_poison_set(ds, keys, epsilon, seed=plan_seed)
    perts, trace = craft(surrogate, ds, plan, keys, craft_cfg)
    protected = apply_perturbations(ds, perts)
    return ProtectResult(protected, plan, perts, trace, snr_rows(ds, protected, plan))


def write_protect_outputs(result: ProtectResult, out_dir: str | Path, export: bool = True) -> Path:
    """Lay out a protect run; on any failure the partial directory is removed.

    ``protected/`` is the publishable dataset and never holds key material;
    ``owner/`` keeps the plan and deltas, which are private to the owner.
    """
    out = Path(out_dir)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        if export:
            export_protected(result.protected, tmp / "protected")
        owner = tmp / "owner"
        save_perturbations(result.perturbations, owner, result.protected.sample_rate, result.plan)
        (owner / "trace.json").write_text(json.dumps(result.trace.to_dict(), indent=2))
        write_tsv(owner / "snr.tsv", result.snr, ["id", "label", "key", "snr_db", "max_abs_delta"])
        if out.exists():
            shutil.rmtree(out)
        tmp.rename(out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return out


# ---------------------------------------------------------------- tables


def write_tsv(path: str | Path, rows: list[dict], columns: list[str]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, delimiter="\t", extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({c: _fmt(row.get(c)) for c in columns})
    return path


def read_tsv(path: str | Path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh, delimiter="\t"))


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


# ---------------------------------------------------------------- experiment


@dataclass(frozen=True)
class GridCell:
    d: int
    distribution: str
    interpolation: str

    def __post_init__(self):
        if self.d < 1 or self.distribution not in DISTRIBUTIONS or self.interpolation not in INTERPOLATIONS:
            raise ValueError(f"bad grid cell {self.d}:{self.distribution}:{self.interpolation}")

    @property
    def name(self) -> str:
        return f"d{self.d}-{self.distribution}-{self.interpolation}"

    @classmethod
    def parse(cls, text: str) -> "GridCell":
        """``"8:bernoulli:nearest"`` style."""
        try:
            d, dist, interp = text.split(":")
            return cls(int(d), dist, interp)
        except ValueError:
            raise ValueError(f"grid cell must look like D:DISTRIBUTION:INTERPOLATION, got {text!r}")


def full_grid(ds=(8, 16, 32, 64, 128)) -> list[GridCell]:
    return [GridCell(d, a, b) for d in ds for a in ("bernoulli", "uniform") for b in ("nearest", "bilinear")]


@dataclass
class ExperimentConfig:
    output_dir: str = "experiment"
    manifest: str | None = None
    grid: list[GridCell] = field(default_factory=lambda: [GridCell(8, "bernoulli", "nearest")])
    epsilon: float = 0.01
    K: int = 10
    k: int = DEFAULT_K
    alpha: float = DEFAULT_ALPHA
    repetitions: int = 3
    master_seed: int = 0
    craft: CraftConfig = field(default_factory=CraftConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    desk_train: int = 5000
    desk_validation: int = 1000
    figures: bool = True

    def __post_init__(self):
        self.grid = [g if isinstance(g, GridCell) else _cell(g) for g in self.grid]
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if not self.grid:
            raise ValueError("grid must not be empty")
        if not 0 < self.epsilon < 1 or not 0 < self.alpha < 1:
            raise ValueError("epsilon and alpha must lie in (0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = [asdict(g) for g in self.grid]
        d["craft"] = self.craft.to_dict()
        d["train"] = self.train.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        if "craft" in d:
            d["craft"] = d["craft"] if isinstance(d["craft"], CraftConfig) else CraftConfig(**d["craft"])
        if "train" in d:
            d["train"] = d["train"] if isinstance(d["train"], TrainConfig) else TrainConfig(**d["train"])
        return cls(**d)

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("output_dir")
        d.pop("figures")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


def _cell(g) -> GridCell:
    if isinstance(g, str):
        return GridCell.parse(g)
    return GridCell(int(g["d"]), g["distribution"], g["interpolation"])


RUN_COLUMNS = ["config_hash", "cell", "d", "distribution", "interpolation", "role", "rep", "seed", "val_accuracy"]
CELL_COLUMNS = [
    "config_hash", "cell", "d", "distribution", "interpolation", "status", "error",
    "n_poisons", "initial_loss", "final_loss", "mean_snr_db", "min_snr_db", "k", "alpha",
    "combined_p", "benign_combined_p", "fnr", "fpr", "victim_val_mean", "benign_val_mean", "val_delta",
]  # fmt: skip
CURVE_COLUMNS = ["config_hash", "cell", "k", "role", "mean_topk", "combined_p"]


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    runs: list[dict]
    cells: list[dict]
    curves: list[dict]
    output_dir: Path


def load_dataset(cfg: ExperimentConfig) -> LabeledDataset:
    if cfg.manifest:
        return ingest(cfg.manifest)
    from .desk import make_desk_dataset

    return make_desk_dataset(cfg.desk_train, cfg.desk_validation, seed=stage_seed(cfg.master_seed, "desk"))


def dataset_fingerprint(ds: LabeledDataset) -> str:
    h = hashlib.sha256()
    for it in ds.items:
        h.update(f"{it.id}|{it.label}|{it.split}|".encode())
        h.update(np.ascontiguousarray(it.clip.samples).tobytes())
    return h.hexdigest()


def train_or_load(ds: LabeledDataset, tcfg: TrainConfig, path: Path) -> tuple[ModelParams, float]:
    """Train once; a later call with the same data, config and path reuses the checkpoint."""
    meta = path.with_suffix(".json")
    stamp = {"train_config": tcfg.to_dict(), "data": dataset_fingerprint(ds)}
    if path.exists() and meta.exists():
        info = json.loads(meta.read_text())
        if all(info.get(k) == v for k, v in stamp.items()):
            return load_checkpoint(path), float(info["val_accuracy"])
    result = train(ds, tcfg)
    save_checkpoint(result.params, path)
    meta.write_text(json.dumps(dict(stamp, val_accuracy=result.val_accuracy)))
    return result.params, result.val_accuracy


def _run_rows(base: dict, role: str, rep: int, seed: int, val: float, scored, k_max: int) -> dict:
    row = dict(base, role=role, rep=rep, seed=seed, val_accuracy=val)
    for kk in range(1, k_max + 1):
        row[f"T_{kk}"] = scored.counts[kk]
        row[f"p_{kk}"] = scored.pvalues[kk]
    return row


def run_experiment(cfg: ExperimentConfig, dataset: LabeledDataset | None = None) -> ExperimentResult:
    """Run every grid cell and write ``runs.tsv``, ``cells.tsv`` and ``curves.tsv``.

    The surrogate and the benign models do not depend on the keys, so they
    are trained once and shared by all cells. A failing cell is recorded
    and the remaining cells still run.
    """
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    chash = cfg.config_hash()
    (out / "config.json").write_text(json.dumps(dict(cfg.to_dict(), config_hash=chash), indent=2))
    ds = dataset if dataset is not None else load_dataset(cfg)
    models = out / "models"
    models.mkdir(exist_ok=True)
    k_max = ds.num_classes

    surrogate, _ = train_or_load(
        ds, replace(cfg.train, seed=stage_seed(cfg.master_seed, "surrogate")), models / "surrogate.pt"
    )
    benign = []
    for i in range(cfg.repetitions):
        seed = stage_seed(cfg.master_seed, "benign", i)
        params, val = train_or_load(ds, replace(cfg.train, seed=seed), models / f"benign_{i}.pt")
        benign.append((seed, params, val))

    runs, cells, curves = [], [], []
    for ci, cell in enumerate(cfg.grid):
        base = {
            "config_hash": chash,
            "cell": cell.name,
            "d": cell.d,
            "distribution": cell.distribution,
            "interpolation": cell.interpolation,
        }
        cell_dir = out / "cells" / cell.name
        try:
            row, run_rows, curve_rows = _run_cell(cfg, ds, surrogate, benign, ci, cell, base, cell_dir, k_max)
        except Exception as exc:  # noqa: BLE001 - recorded per cell, grid continues
            log.error("cell %s failed: %s", cell.name, exc)
            cell_dir.mkdir(parents=True, exist_ok=True)
            (cell_dir / "error.txt").write_text(traceback.format_exc())
            row, run_rows, curve_rows = dict(base, status="failed", error=f"{type(exc).__name__}: {exc}"), [], []
        cells.append(row)
        runs.extend(run_rows)
        curves.extend(curve_rows)

    t_cols = [f"T_{kk}" for kk in range(1, k_max + 1)] + [f"p_{kk}" for kk in range(1, k_max + 1)]
    write_tsv(out / "runs.tsv", runs, RUN_COLUMNS + t_cols)
    write_tsv(out / "cells.tsv", cells, CELL_COLUMNS)
    write_tsv(out / "curves.tsv", curves, CURVE_COLUMNS)
    result = ExperimentResult(cfg, runs, cells, curves, out)
    if cfg.figures:
        from .plotting import render_figures

        render_figures(out)
    return result


def _run_cell(cfg, ds, surrogate, benign, ci, cell, base, cell_dir, k_max):
    kcfg = keygen_config_for(
        ds, cell.d, cell.distribution, cell.interpolation, cfg.K, stage_seed(cfg.master_seed, "keygen", ci)
    )
    keys = generate_keyset(kcfg)
    save_keyset(keys, cell_dir / "keys", force=True)
    craft_cfg = replace(cfg.craft, seed=stage_seed(cfg.master_seed, "craft", ci))
    res = protect(ds, keys, surrogate, cfg.epsilon, craft_cfg, stage_seed(cfg.master_seed, "plan", ci))
    write_protect_outputs(res, cell_dir / "protect", export=False)

    scored = {"protected": [], "benign": []}
    vals = {"protected": [], "benign": []}
    run_rows = []
    for i in range(cfg.repetitions):
        seed = stage_seed(cfg.master_seed, "victim", ci, i)
        params, val = train_or_load(res.protected, replace(cfg.train, seed=seed), cell_dir / f"victim_{i}.pt")
        s = score_rankings(query_rankings(TopKOracle(params), keys, k_max), keys.labels, ds.num_classes, f"victim_{i}")
        scored["protected"].append(s)
        vals["protected"].append(val)
        run_rows.append(_run_rows(base, "protected", i, seed, val, s, k_max))
    for i, (seed, params, val) in enumerate(benign):
        s = score_rankings(query_rankings(TopKOracle(params), keys, k_max), keys.labels, ds.num_classes, f"benign_{i}")
        scored["benign"].append(s)
        vals["benign"].append(val)
        run_rows.append(_run_rows(base, "benign", i, seed, val, s, k_max))

    reports = {
        role: build_report(scored[role], keys.ids, keys.labels, ds.num_classes, cfg.k, cfg.alpha) for role in scored
    }
    for role, rep in reports.items():
        (cell_dir / f"report_{role}.json").write_text(rep.to_json())

    def detected(s):
        return s.pvalues[cfg.k] <= cfg.alpha

    fnr = sum(not detected(s) for s in scored["protected"]) / len(scored["protected"])
    fpr = sum(detected(s) for s in scored["benign"]) / len(scored["benign"])
    snrs = [r["snr_db"] for r in res.snr]
    row = dict(
        base,
        status="ok",
        error="",
        n_poisons=len(res.plan),
        initial_loss=res.trace.initial_loss,
        final_loss=res.trace.final_loss,
        mean_snr_db=float(np.mean(snrs)),
        min_snr_db=float(np.min(snrs)),
        k=cfg.k,
        alpha=cfg.alpha,
        combined_p=reports["protected"].combined_p,
        benign_combined_p=reports["benign"].combined_p,
        fnr=fnr,
        fpr=fpr,
        victim_val_mean=float(np.mean(vals["protected"])),
        benign_val_mean=float(np.mean(vals["benign"])),
    )
    row["val_delta"] = row["victim_val_mean"] - row["benign_val_mean"]
    curve_rows = []
    for role, rep in reports.items():
        for kk in range(1, k_max + 1):
            curve_rows.append(
                dict(
                    config_hash=base["config_hash"],
                    cell=cell.name,
                    k=kk,
                    role=role,
                    mean_topk=float(np.mean([s.counts[kk] for s in scored[role]])),
                    combined_p=rep.combined_curve[kk],
                )
            )
    return row, run_rows, curve_rows


def combined_from_rows(rows: list[dict], k: int) -> float:
    """Recompute a cell's combined p-value from its run rows."""
    return fisher_combine([floor_pvalue(float(r[f"p_{k}"])) for r in rows])
