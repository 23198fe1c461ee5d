"""``taggants`` command line.

Relative output paths are resolved under ``--output-root`` (or the
``TAGGANTS_OUTPUT_ROOT`` environment variable). A YAML file passed with
``--config`` supplies defaults per subcommand, for example::

    experiment:
      epsilon: 0.01
      grid: ["8:bernoulli:nearest", "128:uniform:bilinear"]
    train:
      epochs: 12
"""

from __future__ import annotations

import functools
import json
import logging
import sys
from pathlib import Path

import click
import yaml

from . import pipeline
from .crafting import CraftConfig
from .dataset import export_protected, ingest
from .keygen import DISTRIBUTIONS, INTERPOLATIONS, KeySetExistsError, generate_keyset, load_keyset, save_keyset
from .model import TopKOracle, TrainConfig, load_checkpoint, save_checkpoint, train
from .verify import LogOracle, read_prediction_log, verify as run_verify

EXIT_DETECTED, EXIT_NOT_DETECTED, EXIT_ERROR = 0, 1, 2
OUTPUT_ROOT_ENV = "TAGGANTS_OUTPUT_ROOT"


def _resolve(ctx: click.Context, path: str) -> Path:
    p = Path(path)
    if p.is_absolute():
        return p
    return Path(ctx.find_root().obj["output_root"]) / p


def train_options(f):
    d = TrainConfig()
    opts = [
        click.option("--epochs", type=int, default=d.epochs, show_default=True),
        click.option("--batch-size", type=int, default=d.batch_size, show_default=True),
        click.option("--lr", type=float, default=d.lr, show_default=True),
        click.option("--mixup-alpha", type=float, default=d.mixup_alpha, show_default=True),
        click.option("--time-mask", type=int, default=d.time_mask, show_default=True),
        click.option("--freq-mask", type=int, default=d.freq_mask, show_default=True),
        click.option("--train-seed", type=int, default=d.seed, show_default=True),
    ]
    for opt in reversed(opts):
        f = opt(f)
    return f


def craft_options(f):
    d = CraftConfig()
    opts = [
        click.option("--steps", type=int, default=d.steps, show_default=True),
        click.option("--step-size", type=float, default=d.step_size, show_default=True),
        click.option("--clip-bound", type=float, default=d.clip_bound, show_default=True),
        click.option("--restarts", type=int, default=d.restarts, show_default=True),
        click.option("--craft-batch", type=int, default=d.batch_size, show_default=True),
        click.option("--craft-seed", type=int, default=d.seed, show_default=True),
    ]
    for opt in reversed(opts):
        f = opt(f)
    return f


def _train_cfg(kw) -> TrainConfig:
    return TrainConfig(
        epochs=kw["epochs"],
        batch_size=kw["batch_size"],
        lr=kw["lr"],
        mixup_alpha=kw["mixup_alpha"],
        time_mask=kw["time_mask"],
        freq_mask=kw["freq_mask"],
        seed=kw["train_seed"],
    )


def _craft_cfg(kw) -> CraftConfig:
    return CraftConfig(
        steps=kw["steps"],
        step_size=kw["step_size"],
        clip_bound=kw["clip_bound"],
        restarts=kw["restarts"],
        batch_size=kw["craft_batch"],
        seed=kw["craft_seed"],
    )


def _errors_exit(f):
    """Turn library errors into a one-line message and exit status 2."""

    @functools.wraps(f)
    def wrapper(*args, **kwargs):
        try:
            return f(*args, **kwargs)
        except (click.exceptions.Exit, click.ClickException, click.exceptions.Abort):
            raise
        except Exception as exc:  # noqa: BLE001
            click.echo(f"error: {type(exc).__name__}: {exc}", err=True)
            sys.exit(EXIT_ERROR)

    return wrapper


def _param_names(group: click.Group, cmd: str, opts: dict) -> dict:
    """Map option spellings from a config file (``gl-iterations``, ``keys``) to parameter names."""
    command = group.commands.get(cmd)
    if command is None:
        raise click.BadParameter(f"unknown subcommand {cmd!r}", param_hint="--config")
    lookup = {}
    for p in command.params:
        lookup[p.name] = p.name
        for o in p.opts:
            lookup[o.lstrip("-")] = p.name
    out = {}
    for k, v in opts.items():
        name = lookup.get(k) or lookup.get(k.replace("_", "-"))
        if name is None:
            raise click.BadParameter(f"{cmd}: unknown option {k!r}", param_hint="--config")
        out[name] = v
    return out


@click.group()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), help="YAML defaults per subcommand.")
@click.option("--output-root", envvar=OUTPUT_ROOT_ENV, default=".", show_default=True, help="Base for relative output paths.")
@click.option("-v", "--verbose", is_flag=True)
@click.pass_context
def main(ctx, config_path, output_root, verbose):
    """Protect audio datasets with data taggants and verify suspect models."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    ctx.ensure_object(dict)
    ctx.obj["output_root"] = output_root
    if config_path:
        data = yaml.safe_load(Path(config_path).read_text()) or {}
        if not isinstance(data, dict):
            raise click.BadParameter("config file must hold a mapping of subcommand -> options", param_hint="--config")
        ctx.default_map = {cmd: _param_names(ctx.command, cmd, opts or {}) for cmd, opts in data.items()}


@main.command("desk-data")
@click.argument("out")
@click.option("--n-train", type=int, default=5000, show_default=True)
@click.option("--n-validation", type=int, default=1000, show_default=True)
@click.option("--num-classes", type=int, default=10, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.pass_context
@_errors_exit
def desk_data(ctx, out, n_train, n_validation, num_classes, seed):
    """Write the synthetic keyword corpus as WAVs plus manifest."""
    from .desk import make_desk_dataset

    ds = make_desk_dataset(n_train, n_validation, num_classes, seed=seed)
    manifest = export_protected(ds, _resolve(ctx, out))
    click.echo(str(manifest))


@main.command()
@click.argument("out")
@click.option("--dataset", "manifest", required=True, type=click.Path(exists=True), help="Manifest the keys are made for.")
@click.option("--d", "d", type=int, default=8, show_default=True)
@click.option("--distribution", type=click.Choice(DISTRIBUTIONS), default="bernoulli", show_default=True)
@click.option("--interpolation", type=click.Choice(INTERPOLATIONS), default="nearest", show_default=True)
@click.option("--keys", "K", type=int, default=10, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--gl-iterations", type=int, default=60, show_default=True)
@click.option("--force", is_flag=True, help="Overwrite an existing key set.")
@click.pass_context
@_errors_exit
def keygen(ctx, out, manifest, d, distribution, interpolation, K, seed, gl_iterations, force):
    """Generate a secret key set."""
    target = _resolve(ctx, out)
    if (target / "keyset.json").exists() and not force:
        raise KeySetExistsError(f"{target} already holds a key set; pass --force to overwrite")
    ds = ingest(manifest)
    cfg = pipeline.keygen_config_for(ds, d, distribution, interpolation, K, seed, gl_iterations=gl_iterations)
    click.echo(str(save_keyset(generate_keyset(cfg), target, force=force)))


@main.command("train")
@click.argument("manifest", type=click.Path(exists=True))
@click.argument("out")
@train_options
@click.pass_context
@_errors_exit
def train_cmd(ctx, manifest, out, **kw):
    """Train a classifier on a manifest and save a checkpoint."""
    ds = ingest(manifest)
    result = train(ds, _train_cfg(kw))
    path = save_checkpoint(result.params, _resolve(ctx, out))
    click.echo(json.dumps({"checkpoint": str(path), "val_accuracy": result.val_accuracy}))


@main.command()
@click.argument("manifest", type=click.Path(exists=True))
@click.argument("keyset", type=click.Path(exists=True, file_okay=False))
@click.argument("out")
@click.option("--epsilon", type=float, default=0.01, show_default=True)
@click.option("--surrogate", type=click.Path(exists=True, dir_okay=False), help="Surrogate checkpoint; trained on the clean data if omitted.")
@click.option("--plan-seed", type=int, default=0, show_default=True)
@craft_options
@train_options
@click.pass_context
@_errors_exit
def protect(ctx, manifest, keyset, out, epsilon, surrogate, plan_seed, **kw):
    """Craft taggants into a dataset and export the protected copy."""
    ds = ingest(manifest)
    keys = load_keyset(keyset)
    if surrogate:
        params = load_checkpoint(surrogate)
    else:
        params = train(ds, _train_cfg(kw)).params
    res = pipeline.protect(ds, keys, params, epsilon, _craft_cfg(kw), plan_seed)
    target = pipeline.write_protect_outputs(res, _resolve(ctx, out))
    if not surrogate:
        save_checkpoint(params, target / "owner" / "surrogate.pt")
    snrs = [r["snr_db"] for r in res.snr]
    click.echo(
        json.dumps(
            {
                "protected_manifest": str(target / "protected" / "manifest.csv"),
                "n_poisons": len(res.plan),
                "initial_loss": res.trace.initial_loss,
                "final_loss": res.trace.final_loss,
                "mean_snr_db": sum(snrs) / len(snrs),
                "min_snr_db": min(snrs),
            }
        )
    )


@main.command("verify")
@click.argument("keyset", type=click.Path(exists=True, file_okay=False))
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False))
@click.option("--predictions", type=click.Path(exists=True, dir_okay=False), help="CSV log with key_id,predictions.")
@click.option("--k", "k", type=int, default=10, show_default=True)
@click.option("--alpha", type=float, default=0.05, show_default=True)
@click.option("--report", "report_path", default=None, help="Where to write the JSON report.")
@click.pass_context
def verify_cmd(ctx, keyset, checkpoint, predictions, k, alpha, report_path):
    """Verify a suspect model. Exit 0 = detected, 1 = not detected, 2 = error."""
    try:
        if bool(checkpoint) == bool(predictions):
            raise ValueError("give exactly one of --checkpoint or --predictions")
        keys = load_keyset(keyset)
        if checkpoint:
            params = load_checkpoint(checkpoint)
            if params.num_classes != keys.config.C:
                raise ValueError(f"model has {params.num_classes} classes, keys expect {keys.config.C}")
            oracle, k_max = TopKOracle(params), keys.config.C
        else:
            oracle = LogOracle(read_prediction_log(predictions), keys)
            k_max = min(oracle.depth, keys.config.C)
        report = run_verify(oracle, keys, k=k, alpha=alpha, k_max=max(k, k_max))
        if report_path:
            target = _resolve(ctx, report_path)
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_text(report.to_json())
    except Exception as exc:  # noqa: BLE001 - every failure maps to exit 2
        click.echo(f"error: {type(exc).__name__}: {exc}", err=True)
        sys.exit(EXIT_ERROR)
    click.echo(
        json.dumps({"verdict": report.verdict, "k": k, "T_k": report.counts[k], "p_value": report.combined_p, "tau": report.tau})
    )
    sys.exit(EXIT_DETECTED if report.detected else EXIT_NOT_DETECTED)


@main.command()
@click.option("--output", default="experiment", show_default=True)
@click.option("--manifest", type=click.Path(exists=True), default=None, help="Dataset manifest; the synthetic corpus if omitted.")
@click.option("--grid", multiple=True, help="Cell as D:DISTRIBUTION:INTERPOLATION; repeatable.")
@click.option("--full-grid", is_flag=True, help="All d in {8,16,32,64,128} x both distributions x both interpolations.")
@click.option("--epsilon", type=float, default=0.01, show_default=True)
@click.option("--keys", "K", type=int, default=10, show_default=True)
@click.option("--k", "k", type=int, default=10, show_default=True)
@click.option("--alpha", type=float, default=0.05, show_default=True)
@click.option("--repetitions", type=int, default=3, show_default=True)
@click.option("--seed", "master_seed", type=int, default=0, show_default=True)
@click.option("--desk-train", type=int, default=5000, show_default=True)
@click.option("--desk-validation", type=int, default=1000, show_default=True)
@click.option("--figures/--no-figures", default=True, show_default=True)
@craft_options
@train_options
@click.pass_context
@_errors_exit
def experiment(ctx, output, manifest, grid, full_grid, epsilon, K, k, alpha, repetitions, master_seed, desk_train, desk_validation, figures, **kw):
    """Run the grid: protect, train victims and benign models, verify, tabulate."""
    if full_grid:
        cells = pipeline.full_grid()
    elif grid:
        cells = [pipeline.GridCell.parse(g) for g in grid]
    else:
        cells = [pipeline.GridCell(8, "bernoulli", "nearest")]
    cfg = pipeline.ExperimentConfig(
        output_dir=str(_resolve(ctx, output)),
        manifest=manifest,
        grid=cells,
        epsilon=epsilon,
        K=K,
        k=k,
        alpha=alpha,
        repetitions=repetitions,
        master_seed=master_seed,
        craft=_craft_cfg(kw),
        train=_train_cfg(kw),
        desk_train=desk_train,
        desk_validation=desk_validation,
        figures=figures,
    )
    result = pipeline.run_experiment(cfg)
    for row in result.cells:
        click.echo("\t".join(str(row.get(c, "")) for c in ("cell", "status", "combined_p", "fnr", "fpr", "mean_snr_db")))
    click.echo(str(result.output_dir))


@main.command()
@click.argument("results", type=click.Path(exists=True, file_okay=False))
@_errors_exit
def plot(results):
    """Redraw the figures of a finished experiment directory."""
    from .plotting import render_figures

    for p in render_figures(results):
        click.echo(str(p))


if __name__ == "__main__":
    main()
