"""Prediction, saliency and sweep experiments.

A sweep cell is one (bias factor, seed): build a fresh trap split and
environment partition, train each requested method, then measure trap-test
AUC on original and censored test images. Cells are independent, so the
sweep can run in parallel workers and still aggregate deterministically.
"""

from __future__ import annotations

import dataclasses
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .bias import build_environments, build_trap_split
from .errors import ValidationError
from .manifest import ARTIFACT_NAMES, DatasetManifest
from .metrics import PredictionSet, roc_auc
from .noisecrop import NoiseCropConfig, batch_noisecrop
from .seeding import derive_seed
from .training import TrainConfig, TrainRun, augment_batch, load_images, train

DEFAULT_FACTORS = (0.0, 0.5, 0.7, 0.9, 1.0)


def predict_tta(
    model,
    images: Sequence[torch.Tensor],
    n_replicas: int = 50,
    augment: bool = True,
    seed: int = 0,
    batch_size: int = 128,
) -> np.ndarray:
    """Melanoma probability averaged over augmented forward passes."""
    if n_replicas < 1:
        raise ValidationError("n_replicas must be >= 1")
    model.eval()
    total = np.zeros(len(images))
    with torch.no_grad():
        for r in range(n_replicas):
            gen = torch.Generator().manual_seed(derive_seed(seed, "tta", r))
            probs = []
            for start in range(0, len(images), batch_size):
                x = torch.stack(list(images[start: start + batch_size]))
                if augment:
                    x = augment_batch(x, gen)
                probs.append(torch.softmax(model(x), dim=1)[:, 1].numpy())
            total += np.concatenate(probs) if probs else np.zeros(0)
    return total / n_replicas


def predict_dataset(
    model,
    manifest: DatasetManifest,
    ids: Sequence[str] | None = None,
    n_replicas: int = 50,
    augment: bool = True,
    seed: int = 0,
    images: Mapping[str, torch.Tensor] | None = None,
) -> PredictionSet:
    ids = list(ids) if ids is not None else manifest.ids()
    if images is None:
        images = load_images(manifest, ids)
    probs = predict_tta(
        model, [images[i] for i in ids], n_replicas=n_replicas, augment=augment, seed=seed
    )
    return PredictionSet(
        ids=tuple(ids),
        probabilities=np.clip(probs, 0.0, 1.0),
        labels=manifest.labels(ids),
        provenance={"tta_replicas": n_replicas, "augment": augment},
    )


@dataclass
class SaliencyMap:
    """Non-negative class saliency grid, max-normalized to [0, 1]."""

    grid: np.ndarray
    target_class: int
    target_layer: str
    flat: bool = False  # all-zero activations: map is all-zero, flagged


def scorecam(model, image: torch.Tensor, target_layer: str = "conv3", target_class: int = 1) -> SaliencyMap:
    """Gradient-free saliency: each channel masks the input, the masked
    class scores are softmaxed into channel weights, and the map is the
    ReLU of the weighted activation sum."""
    if image.ndim != 3:
        raise ValidationError("image must be (C, H, W)")
    model.eval()
    with torch.no_grad():
        acts = model.spatial_activations(image.unsqueeze(0))[0]
        if acts.ndim != 3 or acts.shape[0] < 1:
            raise ValidationError("target layer must yield spatial activation channels")
        up = F.interpolate(
            acts.unsqueeze(0), size=image.shape[1:], mode="bilinear", align_corners=False
        )[0]
        spans = up.amax(dim=(1, 2)) - up.amin(dim=(1, 2))
        norm = torch.where(
            spans[:, None, None] > 0,
            (up - up.amin(dim=(1, 2), keepdim=True)) / spans[:, None, None].clamp(min=1e-12),
            torch.zeros_like(up),
        )
        masked = image.unsqueeze(0) * norm.unsqueeze(1)
        scores = model(masked)[:, target_class]
        weights = torch.softmax(scores, dim=0)
        grid = torch.relu((weights[:, None, None] * up).sum(dim=0))
        peak = grid.max()
        flat = bool(peak <= 0)
        if not flat:
            grid = grid / peak
    return SaliencyMap(
        grid=grid.numpy(), target_class=target_class, target_layer=target_layer, flat=flat
    )


@dataclass
class EvalReport:
    auc: float
    n_samples: int
    n_positive: int
    artifact_prevalence: dict[str, float]
    noisecrop: bool
    tta_replicas: int
    predictions: PredictionSet

    def to_dict(self) -> dict:
        return {
            "auc": self.auc,
            "n_samples": self.n_samples,
            "n_positive": self.n_positive,
            "artifact_prevalence": self.artifact_prevalence,
            "noisecrop": self.noisecrop,
            "tta_replicas": self.tta_replicas,
        }


def artifact_prevalence(manifest: DatasetManifest, ids: Sequence[str] | None = None) -> dict[str, float]:
    arts = manifest.artifact_matrix(ids)
    return {a: float(arts[:, j].mean()) for j, a in enumerate(ARTIFACT_NAMES)}


def evaluate_external(
    model,
    external: DatasetManifest,
    with_noisecrop: bool = False,
    noisecrop_config: NoiseCropConfig | None = None,
    work_dir: str | Path | None = None,
    n_replicas: int = 50,
    augment: bool = True,
    seed: int = 0,
) -> EvalReport:
    """AUC with TTA on an untouched external manifest, with an
    artifact-prevalence summary supporting overlap analysis."""
    manifest = external
    if with_noisecrop:
        if work_dir is None:
            raise ValidationError("with_noisecrop requires a work_dir for censored images")
        cfg = noisecrop_config or NoiseCropConfig(seed=seed)
        manifest = batch_noisecrop(external, cfg, Path(work_dir) / "noisecrop").manifest
    predictions = predict_dataset(
        model, manifest, n_replicas=n_replicas, augment=augment, seed=seed
    )
    return EvalReport(
        auc=roc_auc(predictions),
        n_samples=len(predictions.ids),
        n_positive=int(predictions.labels.sum()),
        artifact_prevalence=artifact_prevalence(external),
        noisecrop=with_noisecrop,
        tta_replicas=n_replicas,
        predictions=predictions,
    )


@dataclass(frozen=True)
class SweepConfig:
    factors: tuple[float, ...] = DEFAULT_FACTORS
    methods: tuple[str, ...] = ("erm", "groupdro", "rsc")
    n_seeds: int = 10
    with_noisecrop: bool = True
    test_fraction: float = 0.2
    swap_budget: int = 5000
    tta_replicas: int = 50
    tta_augment: bool = True
    noisecrop_size: int | None = None  # None: match the source image size
    seed: int = 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def reference_sweep_preset(**overrides) -> SweepConfig:
    """The protocol defaults: 10 seeds, 50 TTA replicas."""
    return SweepConfig(**({"n_seeds": 10, "tta_replicas": 50} | overrides))


@dataclass
class SweepResult:
    cells: list[dict]
    failures: list[dict] = field(default_factory=list)
    n_seeds: int = 0

    def aggregates(self) -> dict[tuple[float, str, str], dict]:
        """Mean and standard error over seeds per (factor, method, regime)."""
        grouped: dict[tuple[float, str, str], list[float]] = {}
        for cell in self.cells:
            for regime, auc in cell["auc"].items():
                grouped.setdefault((cell["factor"], cell["method"], regime), []).append(auc)
        out = {}
        for key in sorted(grouped):
            values = np.array(grouped[key])
            stderr = float(values.std(ddof=1) / np.sqrt(len(values))) if len(values) > 1 else 0.0
            out[key] = {"mean": float(values.mean()), "stderr": stderr, "n_seeds": len(values)}
        return out

    def to_json(self) -> str:
        aggregates = {
            f"{f}|{m}|{r}": v for (f, m, r), v in self.aggregates().items()
        }
        return json.dumps(
            {"cells": self.cells, "failures": self.failures, "n_seeds": self.n_seeds,
             "aggregates": aggregates},
            indent=2,
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "SweepResult":
        d = json.loads(text)
        return cls(cells=d["cells"], failures=d.get("failures", []), n_seeds=d.get("n_seeds", 0))


def _run_sweep_cell(args: tuple) -> dict:
    """One (factor, seed) cell: split, train every method, evaluate both regimes."""
    manifest, sweep_config, train_configs, out_dir, factor, seed_index = args
    split = build_trap_split(
        manifest,
        factor=factor,
        test_fraction=sweep_config.test_fraction,
        seed=derive_seed(sweep_config.seed, "split", factor, seed_index),
        swap_budget=sweep_config.swap_budget,
    )
    environments = build_environments(manifest, split.train_ids)
    images = load_images(manifest, manifest.ids())
    test_ids = list(split.test_ids)
    test_labels = manifest.labels(test_ids)

    censored_images = None
    if sweep_config.with_noisecrop:
        size = sweep_config.noisecrop_size or next(iter(images.values())).shape[-1]
        cell_dir = Path(out_dir) / f"factor_{factor}" / "noisecrop" / f"seed_{seed_index}"
        nc_cfg = NoiseCropConfig(
            output_size=size, seed=derive_seed(sweep_config.seed, "noisecrop", factor, seed_index)
        )
        censored = batch_noisecrop(manifest, nc_cfg, cell_dir, ids=test_ids)
        censored_images = load_images(censored.manifest, censored.manifest.ids())

    results = []
    for method in sweep_config.methods:
        base = train_configs.get(method, TrainConfig(method=method))
        config = dataclasses.replace(
            base,
            method=method,
            seed=derive_seed(sweep_config.seed, "train", factor, seed_index, method),
        )
        method_dir = Path(out_dir) / f"factor_{factor}" / method / f"seed_{seed_index}"
        run = train(
            manifest,
            split.train_ids,
            config,
            environments=environments,
            workdir=method_dir,
            images=images,
        )
        aucs = {}
        eval_seed = derive_seed(sweep_config.seed, "eval", factor, seed_index, method)
        probs = predict_tta(
            run.model,
            [images[i] for i in test_ids],
            n_replicas=sweep_config.tta_replicas,
            augment=sweep_config.tta_augment,
            seed=eval_seed,
        )
        aucs["original"] = roc_auc(probs, test_labels)
        if censored_images is not None:
            probs_nc = predict_tta(
                run.model,
                [censored_images[i] for i in test_ids],
                n_replicas=sweep_config.tta_replicas,
                augment=sweep_config.tta_augment,
                seed=eval_seed,
            )
            aucs["noisecrop"] = roc_auc(probs_nc, test_labels)
        cell = {
            "factor": factor,
            "method": method,
            "seed": seed_index,
            "auc": aucs,
            "objective": split.objective,
            "best_epoch": run.best_epoch,
            "val_auc": run.best_val_auc,
        }
        (method_dir / "result.json").write_text(json.dumps(cell, indent=2, sort_keys=True))
        results.append(cell)
    return {"cells": results, "error": None, "factor": factor, "seed": seed_index}


def run_trap_sweep(
    manifest: DatasetManifest,
    out_dir: str | Path,
    sweep_config: SweepConfig | None = None,
    train_configs: Mapping[str, TrainConfig] | None = None,
    jobs: int = 1,
) -> SweepResult:
    """Bias-factor sweep. Cell seeds are derived from the sweep config, so
    results are independent of the worker count."""
    sweep_config = sweep_config or SweepConfig()
    train_configs = dict(train_configs or {})
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "sweep_config.json").write_text(
        json.dumps(sweep_config.to_dict(), indent=2, sort_keys=True)
    )
    specs = [
        (manifest, sweep_config, train_configs, str(out_dir), factor, seed_index)
        for factor in sweep_config.factors
        for seed_index in range(sweep_config.n_seeds)
    ]
    outcomes = []
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for spec in specs:
                outcomes.append(pool.submit(_run_sweep_cell, spec))
        outcomes = [_collect(f) for f in outcomes]
    else:
        for spec in specs:
            try:
                outcomes.append(_run_sweep_cell(spec))
            except Exception as exc:
                outcomes.append(
                    {"cells": [], "error": f"{type(exc).__name__}: {exc}",
                     "factor": spec[4], "seed": spec[5]}
                )
    cells = []
    failures = []
    for outcome in outcomes:
        cells.extend(outcome["cells"])
        if outcome["error"]:
            failures.append(
                {"factor": outcome["factor"], "seed": outcome["seed"], "error": outcome["error"]}
            )
    cells.sort(key=lambda c: (c["factor"], c["method"], c["seed"]))
    result = SweepResult(cells=cells, failures=failures, n_seeds=sweep_config.n_seeds)
    (out_dir / "sweep_result.json").write_text(result.to_json())
    return result


def _collect(future) -> dict:
    try:
        return future.result()
    except Exception as exc:
        return {"cells": [], "error": f"{type(exc).__name__}: {exc}", "factor": None, "seed": None}
