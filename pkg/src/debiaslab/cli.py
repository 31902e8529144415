"""Command-line entry point.

Every command writes a run manifest (command, config snapshot, input hashes,
outputs, version, wall time) into the output directory before exiting,
success or failure. Exit codes: 0 success, 1 validation error, 2 runtime
failure. Config precedence: CLI flag > config file > built-in default.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
import time
from pathlib import Path

import click
import numpy as np

from . import __version__
from .bias import TrapSplit, build_environments, build_trap_split, correlation_report
from .errors import ValidationError
from .evaluation import (
    SweepConfig,
    SweepResult,
    evaluate_external,
    reference_sweep_preset,
    run_trap_sweep,
    scorecam,
)
from .manifest import load_manifest
from .model import SmallCNN, load_weights
from .noisecrop import NoiseCropConfig, batch_noisecrop
from .report import render_correlation_table, render_report, render_saliency_overlays
from .synthetic import SyntheticConfig, generate_synthetic
from .training import TrainConfig, load_image_tensor, train


def _hash_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _run(command: str, out: Path, config_snapshot: dict, inputs: list[Path], body):
    """Execute a command body, always writing a run manifest before exit."""
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": config_snapshot,
        "inputs": {str(p): _hash_file(p) for p in inputs if Path(p).is_file()},
        "outputs": [],
        "version": __version__,
        "wall_time": None,
        "status": "running",
        "error": None,
    }
    start = time.monotonic()
    exit_code = 0
    try:
        outputs = body()
        manifest["outputs"] = [str(p) for p in (outputs or [])]
        manifest["status"] = "ok"
    except ValidationError as exc:
        manifest["status"] = "validation-error"
        manifest["error"] = str(exc)
        click.echo(f"error: {exc}", err=True)
        exit_code = 1
    except Exception as exc:
        manifest["status"] = "runtime-failure"
        manifest["error"] = f"{type(exc).__name__}: {exc}"
        click.echo(f"failure: {manifest['error']}", err=True)
        exit_code = 2
    finally:
        manifest["wall_time"] = time.monotonic() - start
        (out / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    sys.exit(exit_code)


def _load_json_config(path: str | None) -> dict:
    if not path:
        return {}
    return json.loads(Path(path).read_text())


def _load_model(path: Path) -> tuple[SmallCNN, dict]:
    # read the header first so the model can be sized before loading
    with open(path, "rb") as fh:
        fh.readline()
        header = json.loads(fh.readline().decode())
    config = header.get("meta", {}).get("config", {})
    model = SmallCNN(feature_dim=int(config.get("feature_dim", 64)))
    meta = load_weights(model, path)
    return model, meta


@click.group()
@click.version_option(version=__version__)
def main():
    """Debiasing pipeline toolkit for artifact-biased binary image data."""


@main.command()
@click.option("--n", type=int, default=None, help="Number of samples.")
@click.option("--size", type=int, default=None, help="Square image size in pixels.")
@click.option("--seed", type=int, default=None)
@click.option("--signal", type=float, default=None, help="Lesion signal strength.")
@click.option("--prevalence", type=float, default=None)
@click.option("--rho", multiple=True, help="Artifact correlation, e.g. --rho ruler=0.5")
@click.option("--marginal", multiple=True, help="Artifact marginal, e.g. --marginal ruler=0.3")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--out", required=True, type=click.Path())
def synth(n, size, seed, signal, prevalence, rho, marginal, config_path, out):
    """Generate a synthetic biased dataset."""
    out = Path(out)
    cfg = _load_json_config(config_path)
    if n is not None:
        cfg["n_samples"] = n
    if size is not None:
        cfg["image_size"] = size
    if seed is not None:
        cfg["seed"] = seed
    if signal is not None:
        cfg["signal_strength"] = signal
    if prevalence is not None:
        cfg["class_prevalence"] = prevalence
    for kv, key in ((rho, "artifact_rho"), (marginal, "artifact_marginal")):
        if kv:
            cfg.setdefault(key, {})
            for item in kv:
                name, _, value = item.partition("=")
                cfg[key][name] = float(value)
    cfg.setdefault("n_samples", 2000)

    def body():
        config = SyntheticConfig(**cfg)
        manifest = generate_synthetic(config, out)
        click.echo(f"wrote {len(manifest)} samples to {out}")
        return [out / "manifest.csv", out / "config.json"]

    _run("synth", out, cfg, [Path(config_path)] if config_path else [], body)


@main.command()
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--split", "split_path", type=click.Path(exists=True), default=None,
              help="Optional trap split JSON; correlations are reported per side.")
@click.option("--out", required=True, type=click.Path())
def audit(manifest_path, split_path, out):
    """Report artifact-label correlations (Table-style layout)."""
    out = Path(out)

    def body():
        manifest = load_manifest(manifest_path, check_images=False)
        if split_path:
            split = TrapSplit.from_json(Path(split_path).read_text())
            splits = {"train": split.train_ids, "test": split.test_ids}
        else:
            splits = {"all": manifest.ids()}
        report = correlation_report(manifest, splits)
        return render_correlation_table(report, out / "correlations.csv", out / "correlations.png")

    _run("audit", out, {"manifest": str(manifest_path), "split": split_path},
         [Path(manifest_path)], body)


@main.command()
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--factor", type=float, required=True)
@click.option("--test-fraction", type=float, default=0.2, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--swap-budget", type=int, default=5000, show_default=True)
@click.option("--out", required=True, type=click.Path())
def split(manifest_path, factor, test_fraction, seed, swap_budget, out):
    """Build a tunable-bias trap train/test split."""
    out = Path(out)
    params = {"factor": factor, "test_fraction": test_fraction, "seed": seed,
              "swap_budget": swap_budget}

    def body():
        manifest = load_manifest(manifest_path, check_images=False)
        result = build_trap_split(manifest, factor, test_fraction, seed, swap_budget)
        (out / "split.json").write_text(result.to_json())
        files = render_correlation_table(result.report, out / "correlations.csv")
        click.echo(f"objective J = {result.objective:.4f}")
        return [out / "split.json", *files]

    _run("split", out, params, [Path(manifest_path)], body)


@main.command()
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--split", "split_path", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
def envs(manifest_path, split_path, out):
    """Partition training ids into (artifact bitmask, label) environments."""
    out = Path(out)

    def body():
        manifest = load_manifest(manifest_path, check_images=False)
        trap = TrapSplit.from_json(Path(split_path).read_text())
        partition = build_environments(manifest, trap.train_ids)
        payload = {
            key.as_str(): {"size": len(ids), "ids": list(ids)}
            for key, ids in partition.members.items()
        }
        (out / "environments.json").write_text(json.dumps(payload, indent=2, sort_keys=True))
        click.echo(f"{len(partition)} non-empty environments")
        return [out / "environments.json"]

    _run("envs", out, {"manifest": str(manifest_path), "split": split_path},
         [Path(manifest_path), Path(split_path)], body)


@main.command(name="train")
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--split", "split_path", required=True, type=click.Path(exists=True))
@click.option("--method", type=click.Choice(["erm", "groupdro", "rsc"]), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--out", required=True, type=click.Path())
def train_cmd(manifest_path, split_path, method, seed, config_path, out):
    """Train one model on the trap-train side of a split."""
    out = Path(out)
    cfg = _load_json_config(config_path)
    if method is not None:
        cfg["method"] = method
    if seed is not None:
        cfg["seed"] = seed

    def body():
        manifest = load_manifest(manifest_path)
        trap = TrapSplit.from_json(Path(split_path).read_text())
        config = TrainConfig.from_dict(cfg)
        environments = None
        if config.method == "groupdro":
            environments = build_environments(manifest, trap.train_ids)
        run = train(manifest, trap.train_ids, config, environments=environments, workdir=out)
        click.echo(
            f"best epoch {run.best_epoch} val AUC {run.best_val_auc:.4f} "
            f"({len(run.history)} epochs)"
        )
        return [out / "model.bin", out / "metrics.jsonl", out / "config.json"]

    _run("train", out, cfg, [Path(manifest_path), Path(split_path)], body)


@main.command(name="noisecrop")
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--size", type=int, default=224, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", required=True, type=click.Path())
def noisecrop_cmd(manifest_path, size, seed, out):
    """Censor every image in a manifest (convex-hull crop + noise background)."""
    out = Path(out)
    params = {"size": size, "seed": seed}

    def body():
        manifest = load_manifest(manifest_path)
        result = batch_noisecrop(manifest, NoiseCropConfig(output_size=size, seed=seed), out)
        click.echo(f"censored {len(result.manifest)} images, {len(result.failures)} failures")
        if result.failures:
            (out / "failures.json").write_text(json.dumps(result.failures, indent=2))
        return [out / "manifest.csv"]

    _run("noisecrop", out, params, [Path(manifest_path)], body)


@main.command(name="eval")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--noisecrop/--no-noisecrop", "use_noisecrop", default=False)
@click.option("--replicas", type=int, default=50, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", required=True, type=click.Path())
def eval_cmd(model_path, manifest_path, use_noisecrop, replicas, seed, out):
    """Evaluate a trained model on an external manifest."""
    out = Path(out)
    params = {"model": str(model_path), "noisecrop": use_noisecrop, "replicas": replicas,
              "seed": seed}

    def body():
        manifest = load_manifest(manifest_path)
        model, _ = _load_model(Path(model_path))
        report = evaluate_external(
            model, manifest, with_noisecrop=use_noisecrop, work_dir=out,
            n_replicas=replicas, seed=seed,
        )
        (out / "eval_report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
        click.echo(f"AUC {report.auc:.4f} on {report.n_samples} samples")
        return [out / "eval_report.json"]

    _run("eval", out, params, [Path(model_path), Path(manifest_path)], body)


@main.command()
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="Sweep config JSON (factors, methods, n_seeds, ...).")
@click.option("--reference-preset", is_flag=True, help="10 seeds, 50 TTA replicas.")
@click.option("--jobs", type=int, default=1, show_default=True)
@click.option("--seed", type=int, default=None)
@click.option("--out", required=True, type=click.Path())
def sweep(manifest_path, config_path, reference_preset, jobs, seed, out):
    """Bias-factor sweep: fresh splits, training and evaluation per cell."""
    out = Path(out)
    cfg = _load_json_config(config_path)
    train_cfgs = {
        method: TrainConfig.from_dict({"method": method} | dict(overrides))
        for method, overrides in cfg.pop("train_configs", {}).items()
    }
    for key in ("factors", "methods"):
        if key in cfg:
            cfg[key] = tuple(cfg[key])
    if seed is not None:
        cfg["seed"] = seed
    sweep_config = reference_sweep_preset(**cfg) if reference_preset else SweepConfig(**cfg)

    def body():
        manifest = load_manifest(manifest_path)
        result = run_trap_sweep(manifest, out, sweep_config, train_cfgs, jobs=jobs)
        files = render_report(out / "report", sweep=result)
        click.echo(f"{len(result.cells)} cells, {len(result.failures)} failures")
        return [out / "sweep_result.json", *files]

    _run("sweep", out, sweep_config.to_dict(), [Path(manifest_path)], body)


@main.command()
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--ids", default=None, help="Comma-separated sample ids (default: first 6).")
@click.option("--out", required=True, type=click.Path())
def saliency(model_path, manifest_path, ids, out):
    """ScoreCAM saliency overlays with prediction-correctness borders."""
    out = Path(out)

    def body():
        manifest = load_manifest(manifest_path)
        model, _ = _load_model(Path(model_path))
        wanted = ids.split(",") if ids else manifest.ids()[:6]
        images, maps, correct = [], [], []
        import torch
        for sample_id in wanted:
            record = manifest.by_id(sample_id)
            tensor = load_image_tensor(manifest.root / record.image_path)
            smap = scorecam(model, tensor, target_class=1)
            with torch.no_grad():
                prob = torch.softmax(model(tensor.unsqueeze(0)), dim=1)[0, 1].item()
            images.append((tensor.permute(1, 2, 0).numpy() * 255).astype(np.uint8))
            maps.append(smap)
            correct.append((prob >= 0.5) == (record.label == 1))
        path = render_saliency_overlays(images, maps, correct, out / "saliency.png", labels=wanted)
        return [path]

    _run("saliency", out, {"ids": ids}, [Path(model_path), Path(manifest_path)], body)


@main.command()
@click.option("--sweep-result", "sweep_path", type=click.Path(exists=True), default=None)
@click.option("--split", "split_path", type=click.Path(exists=True), default=None)
@click.option("--out", required=True, type=click.Path())
def report(sweep_path, split_path, out):
    """Render plots and tables from stored results."""
    out = Path(out)

    def body():
        sweep_result = None
        correlations = None
        if sweep_path:
            sweep_result = SweepResult.from_json(Path(sweep_path).read_text())
        if split_path:
            correlations = TrapSplit.from_json(Path(split_path).read_text()).report
        if sweep_result is None and correlations is None:
            raise ValidationError("nothing to render: pass --sweep-result and/or --split")
        return render_report(out, sweep=sweep_result, correlations=correlations)

    _run("report", out, {"sweep_result": sweep_path, "split": split_path},
         [Path(p) for p in (sweep_path, split_path) if p], body)


if __name__ == "__main__":
    main()
