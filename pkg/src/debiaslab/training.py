"""ERM, GroupDRO and RSC training with early stopping and grid search.

All three methods share one data pipeline (shuffling, augmentation, batching)
so that the reduction identities hold bit-for-bit: GroupDRO with a single
environment and RSC with p=0 or f=0 reproduce the ERM parameter trajectory
under the same seed.
"""

from __future__ import annotations

import copy
import dataclasses
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .bias import EnvironmentKey, EnvironmentPartition
from .errors import ConfigError, IntegrityError, TrainingDivergedError, ValidationError
from .manifest import DatasetManifest
from .metrics import roc_auc
from .model import SmallCNN, config_hash, save_weights
from .seeding import derive_seed

METHODS = ("erm", "groupdro", "rsc")

REFERENCE_LEARNING_RATES = (0.00001, 0.0001, 0.001)
REFERENCE_WEIGHT_DECAYS = (0.001, 0.01, 0.1, 1.0)
REFERENCE_ADJUSTMENTS = (0, 1, 2, 3, 4, 5)


@dataclass(frozen=True)
class TrainConfig:
    method: str = "erm"
    learning_rate: float = 1e-3
    weight_decay: float = 1e-3
    momentum: float = 0.9  # unstated in the protocol; recorded default
    max_epochs: int = 100
    patience: int = 22
    batch_size: int = 32
    groupdro_eta: float = 0.01
    groupdro_adjustment: float = 1.0
    rsc_percentile: float = 33.0
    rsc_fraction: float = 0.5
    seed: int = 0
    augment: bool = True
    val_fraction: float = 0.1
    feature_dim: int = 64

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if not 0 <= self.rsc_percentile < 100:
            raise ConfigError(f"rsc_percentile must be in [0, 100), got {self.rsc_percentile}")
        if not 0 <= self.rsc_fraction <= 1:
            raise ConfigError(f"rsc_fraction must be in [0, 1], got {self.rsc_fraction}")
        if not 0 < self.val_fraction < 1:
            raise ConfigError(f"val_fraction must be in (0, 1), got {self.val_fraction}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        return cls(**dict(d))


class GroupWeights:
    """Online exponentiated-gradient weights over environments.

    Weights stay on the probability simplex after every update. Each group
    carries a generalization adjustment C / sqrt(n_g) added to its loss
    before the exponentiation, encouraging fits of small groups.
    """

    def __init__(self, sizes: Mapping[EnvironmentKey, int], eta: float = 0.01, adjustment: float = 0.0):
        if not sizes:
            raise ValidationError("at least one environment is required")
        self.keys: tuple[EnvironmentKey, ...] = tuple(sizes)
        self._index = {k: i for i, k in enumerate(self.keys)}
        self.eta = float(eta)
        self.adjustments = np.array([adjustment / math.sqrt(sizes[k]) for k in self.keys])
        self.q = np.full(len(self.keys), 1.0 / len(self.keys))

    def adjustment_for(self, key: EnvironmentKey) -> float:
        return float(self.adjustments[self._index[key]])

    def weight_of(self, key: EnvironmentKey) -> float:
        try:
            return float(self.q[self._index[key]])
        except KeyError:
            raise IntegrityError(f"unknown environment key {key}") from None

    def update(self, group_losses: Mapping[EnvironmentKey, float]) -> None:
        """q_g <- q_g * exp(eta * (loss_g + C/sqrt(n_g))), renormalized over all groups."""
        if not group_losses:
            raise ValidationError("no batch groups intersect the known environments")
        for key, loss in group_losses.items():
            if key not in self._index:
                raise IntegrityError(f"unknown environment key {key}")
            i = self._index[key]
            self.q[i] *= math.exp(self.eta * (float(loss) + self.adjustments[i]))
        self.q /= self.q.sum()
        assert abs(self.q.sum() - 1.0) <= 1e-9 and (self.q >= 0).all()

    def as_mapping(self) -> dict[EnvironmentKey, float]:
        return {k: float(self.q[i]) for k, i in self._index.items()}


def erm_step(x: torch.Tensor, y: torch.Tensor, model, optimizer) -> float:
    """One SGD step on the mean cross-entropy of the batch."""
    if len(x) == 0:
        raise ValidationError("empty batch")
    logits = model(x)
    loss = F.cross_entropy(logits, y, reduction="none").mean()
    if not torch.isfinite(loss):
        raise TrainingDivergedError(f"non-finite loss {loss.item()!r}; aborting run")
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def groupdro_step(
    x: torch.Tensor,
    y: torch.Tensor,
    keys: Sequence[EnvironmentKey],
    model,
    optimizer,
    weights: GroupWeights,
) -> tuple[float, GroupWeights]:
    """Worst-group step: update q by exponentiated gradient, then descend on
    the q-weighted sum of per-group mean losses."""
    if len(x) == 0:
        raise ValidationError("empty batch")
    logits = model(x)
    losses = F.cross_entropy(logits, y, reduction="none")
    present: dict[EnvironmentKey, torch.Tensor] = {}
    for key in weights.keys:
        mask = torch.tensor([k == key for k in keys], dtype=torch.bool)
        if mask.any():
            present[key] = losses[mask].mean()
    for key in keys:
        if key not in weights._index:
            raise IntegrityError(f"batch sample has unknown environment key {key}")
    weights.update({k: float(v.detach()) for k, v in present.items()})
    loss = sum(weights.weight_of(k) * v for k, v in present.items())
    if not torch.isfinite(loss):
        raise TrainingDivergedError(f"non-finite loss {float(loss)!r}; aborting run")
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return float(loss.detach()), weights


def rsc_mute_mask(grad_z: torch.Tensor, percentile: float, treated: np.ndarray) -> torch.Tensor:
    """All-ones mask with the top ceil(p/100*d) gradient features zeroed per
    treated sample."""
    b, d = grad_z.shape
    k = math.ceil(percentile / 100.0 * d)
    mask = torch.ones_like(grad_z)
    if k > 0 and len(treated) > 0:
        rows = torch.as_tensor(treated, dtype=torch.long)
        top = torch.topk(grad_z[rows], k, dim=1).indices
        mask[rows.unsqueeze(1), top] = 0.0
    return mask


def rsc_step(
    x: torch.Tensor,
    y: torch.Tensor,
    model,
    optimizer,
    percentile: float,
    fraction: float,
    rng: np.random.Generator,
) -> float:
    """Self-challenging step: mute the highest-gradient representation
    features for a random fraction of the batch, then descend on the mixed
    batch loss."""
    if not 0 <= percentile < 100:
        raise ConfigError(f"percentile must be in [0, 100), got {percentile}")
    if not 0 <= fraction <= 1:
        raise ConfigError(f"fraction must be in [0, 1], got {fraction}")
    if len(x) == 0:
        raise ValidationError("empty batch")
    z = model.features(x)
    logits = model.head_forward(z)
    true_score = logits.gather(1, y.unsqueeze(1)).sum()
    (grad_z,) = torch.autograd.grad(true_score, z, retain_graph=True)
    n_treated = int(round(fraction * len(x)))
    treated = rng.permutation(len(x))[:n_treated]
    mask = rsc_mute_mask(grad_z, percentile, treated)
    loss = F.cross_entropy(model.head_forward(z, mask), y, reduction="none").mean()
    if not torch.isfinite(loss):
        raise TrainingDivergedError(f"non-finite loss {loss.item()!r}; aborting run")
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def load_image_tensor(path: str | Path) -> torch.Tensor:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1)


def load_images(manifest: DatasetManifest, ids: Sequence[str]) -> dict[str, torch.Tensor]:
    root = manifest.root
    return {i: load_image_tensor(root / manifest.by_id(i).image_path) for i in ids}


def augment_batch(x: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    """Shifts, quarter rotations, flips and color jitter (fixed ranges)."""
    b, _, h, w = x.shape
    quarters = torch.randint(0, 4, (b,), generator=gen)
    flips_h = torch.rand(b, generator=gen) < 0.5
    flips_v = torch.rand(b, generator=gen) < 0.5
    max_shift = max(1, h // 10)
    shifts = torch.randint(-max_shift, max_shift + 1, (b, 2), generator=gen)
    brightness = 1.0 + 0.2 * (torch.rand(b, generator=gen) * 2 - 1)
    contrast = 1.0 + 0.2 * (torch.rand(b, generator=gen) * 2 - 1)
    out = []
    for i in range(b):
        img = torch.rot90(x[i], int(quarters[i]), dims=(1, 2))
        if flips_h[i]:
            img = torch.flip(img, (2,))
        if flips_v[i]:
            img = torch.flip(img, (1,))
        dy, dx = int(shifts[i, 0]), int(shifts[i, 1])
        img = F.pad(img.unsqueeze(0), (max_shift,) * 4, mode="replicate").squeeze(0)
        img = img[:, max_shift + dy: max_shift + dy + h, max_shift + dx: max_shift + dx + w]
        img = ((img - 0.5) * contrast[i] + 0.5) * brightness[i]
        out.append(img.clamp(0.0, 1.0))
    return torch.stack(out)


@dataclass
class TrainRun:
    config: TrainConfig
    history: list[dict]
    best_epoch: int
    best_val_auc: float
    model: torch.nn.Module
    wall_time: float
    provenance: dict = field(default_factory=dict)


def _predict_probs(model, images: list[torch.Tensor], batch_size: int = 128) -> np.ndarray:
    model.eval()
    probs = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            x = torch.stack(images[start: start + batch_size])
            probs.append(torch.softmax(model(x), dim=1)[:, 1].numpy())
    return np.concatenate(probs) if probs else np.empty(0)


def stratified_val_split(ids: Sequence[str], labels: np.ndarray, val_fraction: float, seed: int) -> tuple[list[str], list[str]]:
    """(fit_ids, val_ids), stratified by class; at least one of each class in val."""
    rng = np.random.default_rng(derive_seed(seed, "valsplit"))
    ids = np.asarray(ids)
    val_mask = np.zeros(len(ids), dtype=bool)
    for cls in (0, 1):
        cls_idx = np.flatnonzero(labels == cls)
        if len(cls_idx) == 0:
            continue
        n_val = min(max(int(round(val_fraction * len(cls_idx))), 1), len(cls_idx) - 1)
        val_mask[rng.permutation(cls_idx)[:n_val]] = True
    return list(ids[~val_mask]), list(ids[val_mask])


def train(
    manifest: DatasetManifest,
    train_ids: Sequence[str],
    config: TrainConfig,
    environments: EnvironmentPartition | None = None,
    workdir: str | Path | None = None,
    images: Mapping[str, torch.Tensor] | None = None,
    model: torch.nn.Module | None = None,
) -> TrainRun:
    """Train one model with validation-AUC early stopping.

    Deterministic per config.seed. GroupDRO requires ``environments``; the
    other methods ignore it. ``images`` may carry preloaded tensors shared
    across runs.
    """
    start_time = time.monotonic()
    if config.method == "groupdro" and environments is None:
        raise ConfigError("GroupDRO requires an environment partition")
    train_ids = list(train_ids)
    labels = manifest.labels(train_ids)
    fit_ids, val_ids = stratified_val_split(train_ids, labels, config.val_fraction, config.seed)
    val_labels = manifest.labels(val_ids)
    if val_labels.min() == val_labels.max():
        raise ValidationError("validation set is missing a class; AUC undefined")

    if images is None:
        images = load_images(manifest, train_ids)
    fit_images = [images[i] for i in fit_ids]
    fit_labels = torch.as_tensor(manifest.labels(fit_ids))
    val_images = [images[i] for i in val_ids]
    fit_keys = [environments.key_of(i) for i in fit_ids] if environments is not None else None

    torch.manual_seed(derive_seed(config.seed, "init"))
    if model is None:
        model = SmallCNN(feature_dim=config.feature_dim)
    optimizer = torch.optim.SGD(
        model.parameters(),
        lr=config.learning_rate,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
    )
    weights = None
    if config.method == "groupdro":
        weights = GroupWeights(
            environments.sizes, eta=config.groupdro_eta, adjustment=config.groupdro_adjustment
        )
    shuffle_rng = np.random.default_rng(derive_seed(config.seed, "shuffle"))
    aug_gen = torch.Generator().manual_seed(derive_seed(config.seed, "aug"))
    rsc_rng = np.random.default_rng(derive_seed(config.seed, "rsc"))

    history: list[dict] = []
    best_auc = -np.inf
    best_epoch = 0
    best_state = None
    for epoch in range(1, config.max_epochs + 1):
        model.train()
        perm = shuffle_rng.permutation(len(fit_ids))
        epoch_losses = []
        group_losses: dict[str, list[float]] = {}
        for start in range(0, len(perm), config.batch_size):
            batch_idx = perm[start: start + config.batch_size]
            x = torch.stack([fit_images[i] for i in batch_idx])
            if config.augment:
                x = augment_batch(x, aug_gen)
            y = fit_labels[batch_idx]
            if config.method == "erm":
                loss = erm_step(x, y, model, optimizer)
            elif config.method == "groupdro":
                keys = [fit_keys[i] for i in batch_idx]
                loss, weights = groupdro_step(x, y, keys, model, optimizer, weights)
            else:
                loss = rsc_step(
                    x, y, model, optimizer, config.rsc_percentile, config.rsc_fraction, rsc_rng
                )
            epoch_losses.append(loss)
        val_probs = _predict_probs(model, val_images)
        val_auc = roc_auc(val_probs, val_labels)
        entry = {
            "epoch": epoch,
            "train_loss": float(np.mean(epoch_losses)),
            "val_auc": float(val_auc),
        }
        if weights is not None:
            entry["q"] = {k.as_str(): w for k, w in weights.as_mapping().items()}
        history.append(entry)
        if val_auc > best_auc:
            best_auc = val_auc
            best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())
        elif epoch - best_epoch >= config.patience:
            break
    if best_state is not None:
        model.load_state_dict(best_state)

    run = TrainRun(
        config=config,
        history=history,
        best_epoch=best_epoch,
        best_val_auc=float(best_auc),
        model=model,
        wall_time=time.monotonic() - start_time,
        provenance={
            "test_labels_read": False,
            "privileged": False,
            "config_hash": config_hash(config.to_dict()),
        },
    )
    if workdir is not None:
        workdir = Path(workdir)
        workdir.mkdir(parents=True, exist_ok=True)
        (workdir / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))
        with open(workdir / "metrics.jsonl", "w") as fh:
            for entry in history:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
        save_weights(
            model,
            workdir / "model.bin",
            meta={"config_hash": run.provenance["config_hash"], "config": config.to_dict()},
        )
    return run


def reference_grid(base: TrainConfig | None = None) -> list[TrainConfig]:
    """The protocol grid: 3 learning rates x 4 weight decays."""
    base = base or TrainConfig()
    return [
        dataclasses.replace(base, learning_rate=lr, weight_decay=wd)
        for lr in REFERENCE_LEARNING_RATES
        for wd in REFERENCE_WEIGHT_DECAYS
    ]


@dataclass
class GridSearchResult:
    best: TrainConfig
    leaderboard: list[dict]
    n_runs: int
    privileged: bool = False


def grid_search(
    manifest: DatasetManifest,
    train_ids: Sequence[str],
    grid: Sequence[TrainConfig],
    n_runs: int = 2,
    environments: EnvironmentPartition | None = None,
    images: Mapping[str, torch.Tensor] | None = None,
    train_fn: Callable[..., TrainRun] | None = None,
    select: str = "validation",
    trap_eval: Callable[[TrainRun], float] | None = None,
) -> GridSearchResult:
    """Grid search with n_runs per cell on validation splits carved from the
    training data (never from test).

    ``select='trap_test'`` is the privileged oracle mode: cells are ranked by
    ``trap_eval`` and the result is flagged accordingly.
    """
    if not grid:
        raise ValidationError("grid must be non-empty")
    if select not in ("validation", "trap_test"):
        raise ConfigError(f"unknown selection mode {select!r}")
    if select == "trap_test" and trap_eval is None:
        raise ConfigError("privileged selection requires a trap_eval callable")
    train_fn = train_fn or train
    leaderboard = []
    for cell in grid:
        cell_scores = []
        for r in range(n_runs):
            # each run gets a different validation partition and random seed
            run_config = dataclasses.replace(cell, seed=derive_seed(cell.seed, "gridrun", r))
            run = train_fn(manifest, train_ids, run_config, environments=environments, images=images)
            score = trap_eval(run) if select == "trap_test" else run.best_val_auc
            cell_scores.append(float(score))
        leaderboard.append(
            {
                "config": cell,
                "mean_score": float(np.mean(cell_scores)),
                "scores": cell_scores,
            }
        )
    leaderboard.sort(
        key=lambda e: (-e["mean_score"], e["config"].learning_rate, e["config"].weight_decay)
    )
    return GridSearchResult(
        best=leaderboard[0]["config"],
        leaderboard=leaderboard,
        n_runs=n_runs,
        privileged=(select == "trap_test"),
    )
