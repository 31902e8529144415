"""Manifest-based dataset representation.

A dataset is a CSV manifest of image records: binary diagnosis label, a fixed
7-bit artifact vector, and optional segmentation mask reference. The artifact
order is fixed everywhere (serialization, environment keys, reports).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import IntegrityError, SchemaError, ValidationError

ARTIFACT_NAMES: tuple[str, ...] = (
    "dark_corner",
    "hair",
    "gel_border",
    "gel_bubble",
    "ruler",
    "ink",
    "patches",
)

MANIFEST_COLUMNS: tuple[str, ...] = (
    "id",
    "image_path",
    "label",
    *ARTIFACT_NAMES,
    "mask_path",
    "annotation_source",
)

ANNOTATION_SOURCES = ("ground_truth", "inferred")


@dataclass(frozen=True)
class ArtifactVector:
    """Ordered presence flags for the 7 artifact types."""

    flags: tuple[bool, ...]

    def __post_init__(self):
        if len(self.flags) != len(ARTIFACT_NAMES):
            raise ValidationError(
                f"artifact vector needs {len(ARTIFACT_NAMES)} flags, got {len(self.flags)}"
            )
        object.__setattr__(self, "flags", tuple(bool(f) for f in self.flags))

    @property
    def bitmask(self) -> int:
        return sum(1 << i for i, f in enumerate(self.flags) if f)

    @classmethod
    def from_bitmask(cls, bitmask: int) -> "ArtifactVector":
        if not 0 <= bitmask <= 127:
            raise ValidationError(f"artifact bitmask out of range: {bitmask}")
        return cls(tuple(bool(bitmask >> i & 1) for i in range(len(ARTIFACT_NAMES))))

    def __getitem__(self, name: str) -> bool:
        return self.flags[ARTIFACT_NAMES.index(name)]


@dataclass(frozen=True)
class SampleRecord:
    """One image with its label, artifact annotations and optional mask."""

    id: str
    image_path: str
    label: int
    artifacts: ArtifactVector
    mask_path: str | None = None
    annotation_source: str = "ground_truth"
    extras: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValidationError(f"label must be 0 or 1, got {self.label!r} (id={self.id})")
        if self.annotation_source not in ANNOTATION_SOURCES:
            raise ValidationError(
                f"annotation_source must be one of {ANNOTATION_SOURCES}, "
                f"got {self.annotation_source!r} (id={self.id})"
            )


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[SampleRecord, ...]
    name: str = "unnamed"
    provenance: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not self.records:
            raise ValidationError("manifest must be non-empty")
        object.__setattr__(self, "records", tuple(self.records))
        seen = set()
        for r in self.records:
            if r.id in seen:
                raise IntegrityError(f"duplicate sample id {r.id!r}")
            seen.add(r.id)

    def __len__(self) -> int:
        return len(self.records)

    def ids(self) -> list[str]:
        return [r.id for r in self.records]

    def by_id(self, sample_id: str) -> SampleRecord:
        try:
            return self._index[sample_id]
        except AttributeError:
            object.__setattr__(self, "_index", {r.id: r for r in self.records})
            return self.by_id(sample_id)
        except KeyError:
            raise IntegrityError(f"unknown sample id {sample_id!r}") from None

    def labels(self, ids: Sequence[str] | None = None) -> np.ndarray:
        recs = self.records if ids is None else [self.by_id(i) for i in ids]
        return np.array([r.label for r in recs], dtype=np.int64)

    def artifact_matrix(self, ids: Sequence[str] | None = None) -> np.ndarray:
        """(n, 7) 0/1 matrix in the canonical artifact order."""
        recs = self.records if ids is None else [self.by_id(i) for i in ids]
        return np.array([[int(f) for f in r.artifacts.flags] for r in recs], dtype=np.int64)

    def subset(self, ids: Iterable[str], name: str | None = None) -> "DatasetManifest":
        recs = tuple(self.by_id(i) for i in ids)
        return DatasetManifest(recs, name=name or self.name, provenance=dict(self.provenance))

    @property
    def root(self) -> Path:
        """Directory image/mask paths are relative to."""
        return Path(self.provenance.get("root", "."))


def _parse_binary(value: str, column: str, row_id: str) -> int:
    if value not in ("0", "1"):
        raise ValidationError(f"column {column!r} must be 0 or 1, got {value!r} in row id={row_id!r}")
    return int(value)


def load_manifest(path: str | Path, check_images: bool = True, name: str | None = None) -> DatasetManifest:
    """Load a manifest CSV, validating the schema and basic invariants.

    Unknown trailing columns (e.g. the ``noisecrop`` provenance flag appended
    by the censoring stage) are preserved per-record in ``extras``.
    """
    path = Path(path)
    if not path.is_file():
        raise SchemaError(f"manifest file not found: {path}")
    base = path.parent
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in MANIFEST_COLUMNS:
            if col not in header:
                raise SchemaError(f"manifest {path} is missing required column {col!r}")
        extra_cols = [c for c in header if c not in MANIFEST_COLUMNS]
        records = []
        for row in reader:
            rid = row["id"]
            label = _parse_binary(row["label"], "label", rid)
            flags = tuple(_parse_binary(row[a], a, rid) for a in ARTIFACT_NAMES)
            source = row["annotation_source"] or "ground_truth"
            mask = row["mask_path"] or None
            extras = {c: row[c] for c in extra_cols if row.get(c)}
            if check_images and not (base / row["image_path"]).is_file():
                raise ValidationError(
                    f"image_path {row['image_path']!r} not resolvable for row id={rid!r}"
                )
            records.append(
                SampleRecord(
                    id=rid,
                    image_path=row["image_path"],
                    label=label,
                    artifacts=ArtifactVector(tuple(bool(f) for f in flags)),
                    mask_path=mask,
                    annotation_source=source,
                    extras=extras,
                )
            )
    if not records:
        raise SchemaError(f"manifest {path} has no rows")
    manifest = DatasetManifest(tuple(records), name=name or path.stem, provenance={"root": str(base)})
    labels = manifest.labels()
    if labels.min() == labels.max():
        raise ValidationError(f"manifest {path} contains a single class; both labels are required")
    return manifest


def save_manifest(manifest: DatasetManifest, path: str | Path) -> Path:
    """Write a manifest CSV in the canonical column order (round-trip stable)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    extra_cols = sorted({k for r in manifest.records for k in r.extras})
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(MANIFEST_COLUMNS) + extra_cols)
        for r in manifest.records:
            row = [r.id, r.image_path, r.label]
            row += [int(f) for f in r.artifacts.flags]
            row += [r.mask_path or "", r.annotation_source]
            row += [r.extras.get(c, "") for c in extra_cols]
            writer.writerow(row)
    return path
