"""Artifact-label correlation auditing, trap splits, and environments.

The trap split construction is two-phase: a deterministic greedy assignment
(score samples by artifact alignment with the full-data correlation signs,
rank within class, then refine with same-class pairwise swaps maximizing an
explicit objective J), followed by per-sample Bernoulli(factor) mixing with a
random class-stratified placement. Factor 0 is a plain random split; factor 1
amplifies train correlations and reverses them in test.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import IntegrityError, UndefinedCorrelationError, ValidationError
from .manifest import ARTIFACT_NAMES, DatasetManifest
from .seeding import derive_seed, stable_id_hash


def spearman_binary(x: Sequence[int], y: Sequence[int]) -> float:
    """Spearman rank correlation with average-tie ranks.

    For binary sequences this equals the phi coefficient of the 2x2 table.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValidationError("sequences must be 1-d and of equal length")
    if len(x) < 2:
        raise ValidationError("need at least 2 observations")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise UndefinedCorrelationError("correlation undefined for a constant sequence")
    rx = rankdata(x)
    ry = rankdata(y)
    rx = rx - rx.mean()
    ry = ry - ry.mean()
    return float(rx @ ry / math.sqrt((rx @ rx) * (ry @ ry)))


@dataclass(frozen=True)
class CorrelationReport:
    """Per-split, per-artifact Spearman correlations (Table-style layout).

    Artifacts with constant presence in a split are stored as None
    (undefined), never as zero.
    """

    values: Mapping[str, Mapping[str, float | None]]
    counts: Mapping[str, int]

    def splits(self) -> list[str]:
        return list(self.values.keys())

    def to_rows(self) -> list[list]:
        rows = [["split", "n", *ARTIFACT_NAMES]]
        for split, vals in self.values.items():
            rows.append(
                [split, self.counts[split]]
                + [("" if vals[a] is None else round(vals[a], 4)) for a in ARTIFACT_NAMES]
            )
        return rows

    def to_dict(self) -> dict:
        return {"values": {s: dict(v) for s, v in self.values.items()}, "counts": dict(self.counts)}


def correlation_report(manifest: DatasetManifest, splits: Mapping[str, Iterable[str]]) -> CorrelationReport:
    """Correlations between each artifact and the label, per split."""
    values: dict[str, dict[str, float | None]] = {}
    counts: dict[str, int] = {}
    for split_name, ids in splits.items():
        ids = list(ids)
        if not ids:
            raise ValidationError(f"split {split_name!r} is empty")
        labels = manifest.labels(ids)
        arts = manifest.artifact_matrix(ids)
        row: dict[str, float | None] = {}
        for j, artifact in enumerate(ARTIFACT_NAMES):
            try:
                row[artifact] = spearman_binary(arts[:, j], labels)
            except UndefinedCorrelationError:
                row[artifact] = None
        values[split_name] = row
        counts[split_name] = len(ids)
    return CorrelationReport(values=values, counts=counts)


@dataclass(frozen=True)
class TrapSplit:
    factor: float
    train_ids: tuple[str, ...]
    test_ids: tuple[str, ...]
    test_fraction: float
    seed: int
    report: CorrelationReport
    objective: float

    def to_json(self) -> str:
        payload = {
            "factor": self.factor,
            "seed": self.seed,
            "test_fraction": self.test_fraction,
            "train_ids": list(self.train_ids),
            "test_ids": list(self.test_ids),
            "objective": self.objective,
            "correlations": self.report.to_dict(),
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrapSplit":
        d = json.loads(text)
        report = CorrelationReport(values=d["correlations"]["values"], counts=d["correlations"]["counts"])
        return cls(
            factor=d["factor"],
            train_ids=tuple(d["train_ids"]),
            test_ids=tuple(d["test_ids"]),
            test_fraction=d["test_fraction"],
            seed=d["seed"],
            report=report,
            objective=d["objective"],
        )


class _SideStats:
    """Incremental per-side contingency counts for fast phi updates."""

    def __init__(self, labels: np.ndarray, arts: np.ndarray, members: np.ndarray):
        self.n = int(members.sum())
        self.n_y1 = int(labels[members].sum())
        self.n_a1 = arts[members].sum(axis=0).astype(int)
        self.n_a1y1 = (arts[members] * labels[members, None]).sum(axis=0).astype(int)

    def move(self, label: int, flags: np.ndarray, sign: int):
        self.n += sign
        self.n_y1 += sign * label
        self.n_a1 += sign * flags
        self.n_a1y1 += sign * flags * label

    def phi(self) -> np.ndarray:
        """Phi per artifact; NaN where undefined (constant column)."""
        n = self.n
        num = n * self.n_a1y1 - self.n_a1 * self.n_y1
        den = self.n_a1 * (n - self.n_a1) * self.n_y1 * (n - self.n_y1)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(den > 0, num / np.sqrt(den.astype(float)), np.nan)


def _objective(signs: np.ndarray, train: _SideStats, test: _SideStats) -> float:
    """J = sum_a s_a * (corr_train(a, y) - corr_test(a, y)); undefined terms drop."""
    phi_tr = train.phi()
    phi_te = test.phi()
    diff = np.nan_to_num(phi_tr, nan=0.0) - np.nan_to_num(phi_te, nan=0.0)
    return float((signs * diff).sum())


def build_trap_split(
    manifest: DatasetManifest,
    factor: float,
    test_fraction: float = 0.2,
    seed: int = 0,
    swap_budget: int = 5000,
) -> TrapSplit:
    """Build a tunable-bias train/test partition.

    ``factor`` is the per-sample probability of following the trap assignment
    rather than a random class-stratified placement.
    """
    if not 0.0 <= factor <= 1.0:
        raise ValidationError(f"factor must be in [0, 1], got {factor}")
    if not 0.0 < test_fraction < 1.0:
        raise ValidationError(f"test_fraction must be in (0, 1), got {test_fraction}")
    ids = np.array(manifest.ids())
    labels = manifest.labels()
    arts = manifest.artifact_matrix()
    if labels.min() == labels.max():
        raise ValidationError("trap split requires both classes in the manifest")

    # full-data correlation signs; constant artifacts get s_a = 0, as do
    # artifacts whose correlation sits inside the null sampling band (their
    # sign carries no information and would dilute the objective)
    null_band = 2.0 / math.sqrt(len(ids))
    signs = np.zeros(len(ARTIFACT_NAMES), dtype=int)
    for j in range(len(ARTIFACT_NAMES)):
        try:
            corr = spearman_binary(arts[:, j], labels)
        except UndefinedCorrelationError:
            continue
        if abs(corr) >= null_band:
            signs[j] = int(np.sign(corr))

    # phase 1a: greedy score-then-rank assignment, per class
    scores = (arts * signs).sum(axis=1) * (2 * labels - 1)
    tie = np.array([stable_id_hash(i) for i in ids])
    in_test = np.zeros(len(ids), dtype=bool)
    test_targets: dict[int, int] = {}
    for cls in (0, 1):
        cls_idx = np.flatnonzero(labels == cls)
        n_test = int(round(test_fraction * len(cls_idx)))
        n_test = min(max(n_test, 1), len(cls_idx) - 1)
        test_targets[cls] = n_test
        order = cls_idx[np.lexsort((tie[cls_idx], -scores[cls_idx]))]
        in_test[order[len(cls_idx) - n_test:]] = True

    trap_test = in_test.copy()

    # phase 1b: same-class pairwise swap refinement, monotone in J
    train_stats = _SideStats(labels, arts, ~trap_test)
    test_stats = _SideStats(labels, arts, trap_test)
    best_j = _objective(signs, train_stats, test_stats)
    swap_rng = np.random.default_rng(derive_seed(seed, "swap"))
    by_class_side = {
        (cls, side): list(np.flatnonzero((labels == cls) & (trap_test == side)))
        for cls in (0, 1)
        for side in (False, True)
    }
    for _ in range(max(0, int(swap_budget))):
        cls = int(swap_rng.integers(0, 2))
        train_pool = by_class_side[(cls, False)]
        test_pool = by_class_side[(cls, True)]
        if not train_pool or not test_pool:
            continue
        ti = int(swap_rng.integers(0, len(train_pool)))
        si = int(swap_rng.integers(0, len(test_pool)))
        a, b = train_pool[ti], test_pool[si]
        for stats, out_idx, in_idx in ((train_stats, a, b), (test_stats, b, a)):
            stats.move(int(labels[out_idx]), arts[out_idx], -1)
            stats.move(int(labels[in_idx]), arts[in_idx], +1)
        new_j = _objective(signs, train_stats, test_stats)
        if new_j > best_j:
            best_j = new_j
            train_pool[ti], test_pool[si] = b, a
        else:  # revert
            for stats, out_idx, in_idx in ((train_stats, b, a), (test_stats, a, b)):
                stats.move(int(labels[out_idx]), arts[out_idx], -1)
                stats.move(int(labels[in_idx]), arts[in_idx], +1)
    trap_test = np.zeros(len(ids), dtype=bool)
    for cls in (0, 1):
        trap_test[by_class_side[(cls, True)]] = True

    # phase 2: per-sample Bernoulli(factor) mixing with random placement
    mix_rng = np.random.default_rng(derive_seed(seed, "mix"))
    final_test = np.zeros(len(ids), dtype=bool)
    for cls in (0, 1):
        cls_idx = np.flatnonzero(labels == cls)
        keep = mix_rng.random(len(cls_idx)) < factor
        kept_idx = cls_idx[keep]
        pool = cls_idx[~keep]
        final_test[kept_idx] = trap_test[kept_idx]
        remaining_test = test_targets[cls] - int(trap_test[kept_idx].sum())
        perm = mix_rng.permutation(len(pool))
        final_test[pool[perm[:remaining_test]]] = True

    train_ids = tuple(ids[~final_test])
    test_ids = tuple(ids[final_test])
    report = correlation_report(manifest, {"train": train_ids, "test": test_ids})
    final_train_stats = _SideStats(labels, arts, ~final_test)
    final_test_stats = _SideStats(labels, arts, final_test)
    objective = _objective(signs, final_train_stats, final_test_stats)
    return TrapSplit(
        factor=float(factor),
        train_ids=train_ids,
        test_ids=test_ids,
        test_fraction=float(test_fraction),
        seed=int(seed),
        report=report,
        objective=objective,
    )


@dataclass(frozen=True)
class EnvironmentKey:
    """(artifact bitmask, label) pair; at most 256 distinct keys."""

    artifact_bitmask: int
    label: int

    def __post_init__(self):
        if not 0 <= self.artifact_bitmask <= 127:
            raise ValidationError(f"bitmask out of range: {self.artifact_bitmask}")
        if self.label not in (0, 1):
            raise ValidationError(f"label must be binary, got {self.label}")

    def as_str(self) -> str:
        return f"{self.artifact_bitmask:03d}_{self.label}"


@dataclass(frozen=True)
class EnvironmentPartition:
    members: Mapping[EnvironmentKey, tuple[str, ...]]

    @property
    def sizes(self) -> dict[EnvironmentKey, int]:
        return {k: len(v) for k, v in self.members.items()}

    def key_of(self, sample_id: str) -> EnvironmentKey:
        try:
            return self._lookup[sample_id]
        except AttributeError:
            object.__setattr__(
                self, "_lookup", {i: k for k, ids in self.members.items() for i in ids}
            )
            return self.key_of(sample_id)
        except KeyError:
            raise IntegrityError(f"sample id {sample_id!r} not in any environment") from None

    def __len__(self) -> int:
        return len(self.members)


def build_environments(manifest: DatasetManifest, train_ids: Sequence[str]) -> EnvironmentPartition:
    """Group training samples by (artifact bitmask, label); empty keys omitted."""
    if not train_ids:
        raise ValidationError("train_ids must be non-empty")
    groups: dict[EnvironmentKey, list[str]] = {}
    for sample_id in train_ids:
        record = manifest.by_id(sample_id)
        key = EnvironmentKey(record.artifacts.bitmask, record.label)
        groups.setdefault(key, []).append(sample_id)
    return EnvironmentPartition({k: tuple(v) for k, v in sorted(groups.items(), key=lambda kv: (kv[0].artifact_bitmask, kv[0].label))})
