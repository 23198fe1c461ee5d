"""Figures rendered next to the experiment tables.

Everything here reads the TSV outputs only, so figures can be redrawn from
a finished run without touching models.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .pipeline import read_tsv  # noqa: E402

FIGURES = ("accuracy_vs_k.png", "pvalue_vs_k.png", "fnr.png", "val_accuracy.png")

ROLE_STYLE = {"protected": dict(ls="-", marker="o"), "benign": dict(ls="--", marker="x")}


def _curves(rows):
    out: dict[tuple[str, str], list[tuple[int, float, float]]] = {}
    for r in rows:
        out.setdefault((r["cell"], r["role"]), []).append((int(r["k"]), float(r["mean_topk"]), float(r["combined_p"])))
    return {key: sorted(v) for key, v in out.items()}


def _ok_cells(rows):
    return [r for r in rows if r.get("status") == "ok"]


def plot_accuracy_vs_k(curves, K: int, path: Path):
    fig, ax = plt.subplots(figsize=(6, 4))
    for (cell, role), pts in curves.items():
        ks = [p[0] for p in pts]
        ax.plot(ks, [p[1] / K for p in pts], label=f"{cell} ({role})", **ROLE_STYLE.get(role, {}))
    C = max((p[0] for pts in curves.values() for p in pts), default=1)
    ax.plot(range(1, C + 1), [k / C for k in range(1, C + 1)], color="grey", lw=0.8, label="chance")
    ax.set_xlabel("k")
    ax.set_ylabel("mean top-k key accuracy")
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_pvalue_vs_k(curves, alpha: float | None, path: Path):
    fig, ax = plt.subplots(figsize=(6, 4))
    for (cell, role), pts in curves.items():
        ax.plot([p[0] for p in pts], [max(p[2], 1e-300) for p in pts], label=f"{cell} ({role})", **ROLE_STYLE.get(role, {}))
    if alpha is not None:
        ax.axhline(alpha, color="red", lw=0.8, label=f"alpha = {alpha:g}")
    ax.set_yscale("log")
    ax.set_xlabel("k")
    ax.set_ylabel("combined p-value")
    ax.legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_fnr(cells, path: Path):
    fig, ax = plt.subplots(figsize=(6, 4))
    names = [c["cell"] for c in cells]
    ax.bar(range(len(cells)), [float(c["fnr"]) for c in cells], color="tab:blue")
    ax.set_xticks(range(len(cells)), names, rotation=45, ha="right", fontsize=7)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("FNR")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_val_accuracy(cells, path: Path):
    fig, ax = plt.subplots(figsize=(6, 4))
    names = [c["cell"] for c in cells]
    ax.bar(range(len(cells)), [100 * float(c["victim_val_mean"]) for c in cells], color="tab:blue", label="protected")
    if cells:
        base = 100 * sum(float(c["benign_val_mean"]) for c in cells) / len(cells)
        ax.axhline(base, color="tab:green", lw=2, label="benign mean")
    ax.set_xticks(range(len(cells)), names, rotation=45, ha="right", fontsize=7)
    ax.set_ylabel("validation accuracy (%)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_figures(results_dir: str | Path) -> list[Path]:
    """Draw the four summary figures from ``curves.tsv`` and ``cells.tsv``."""
    out = Path(results_dir)
    cells = _ok_cells(read_tsv(out / "cells.tsv"))
    curves = _curves(read_tsv(out / "curves.tsv"))
    K = _key_count(out)
    alpha = float(cells[0]["alpha"]) if cells else None
    paths = [out / name for name in FIGURES]
    plot_accuracy_vs_k(curves, K, paths[0])
    plot_pvalue_vs_k(curves, alpha, paths[1])
    plot_fnr(cells, paths[2])
    plot_val_accuracy(cells, paths[3])
    return paths


def _key_count(out: Path) -> int:
    cfg = out / "config.json"
    if cfg.exists():
        return int(json.loads(cfg.read_text()).get("K", 1)) or 1
    return 1
