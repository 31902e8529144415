"""Synthetic biased-image generator.

Produces a desk-scale dataset with the same bias structure as real dermoscopy
collections: a class-informative lesion in the foreground (benign = smooth
ellipse, malignant = irregular high-frequency boundary plus noisier interior)
and spuriously correlated artifacts rendered strictly in the background, so
test-time censoring can remove them without touching the class signal.

Per-sample randomness is derived from (global seed, sample id); generation is
deterministic and order-independent.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import FeasibilityError, ValidationError
from .manifest import ARTIFACT_NAMES, ArtifactVector, DatasetManifest, SampleRecord, save_manifest
from .seeding import derive_seed


def solve_contingency(rho: float, p_a: float, p_y: float) -> tuple[float, float]:
    """Conditionals (P(a|y=1), P(a|y=0)) hitting a target binary correlation.

    Uses phi-coefficient algebra on the 2x2 table:
    p11 = p_a*p_y + rho*sqrt(p_a(1-p_a)p_y(1-p_y)).
    """
    if not -1.0 <= rho <= 1.0:
        raise ValidationError(f"correlation must be in [-1, 1], got {rho}")
    if not (0.0 < p_a < 1.0 and 0.0 < p_y < 1.0):
        raise ValidationError("marginals must be in the open interval (0, 1)")
    p11 = p_a * p_y + rho * math.sqrt(p_a * (1 - p_a) * p_y * (1 - p_y))
    cells = {
        "P(a=1,y=1)": p11,
        "P(a=1,y=0)": p_a - p11,
        "P(a=0,y=1)": p_y - p11,
        "P(a=0,y=0)": 1.0 - p_a - p_y + p11,
    }
    eps = 1e-12
    for cell, value in cells.items():
        if value < -eps or value > 1.0 + eps:
            raise FeasibilityError(
                f"(rho={rho}, p_a={p_a}, p_y={p_y}) is infeasible: {cell} = {value:.6f}"
            )
    return (min(max(p11 / p_y, 0.0), 1.0), min(max((p_a - p11) / (1 - p_y), 0.0), 1.0))


@dataclass(frozen=True)
class SyntheticConfig:
    """Configuration for the synthetic generator.

    ``artifact_rho`` / ``artifact_marginal`` map artifact names to target
    label correlation and marginal prevalence; unnamed artifacts default to
    rho 0 and a small marginal.
    """

    n_samples: int
    image_size: int = 64
    class_prevalence: float = 0.5
    artifact_rho: Mapping[str, float] = field(default_factory=dict)
    artifact_marginal: Mapping[str, float] = field(default_factory=dict)
    signal_strength: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_samples <= 0:
            raise ValidationError("n_samples must be positive")
        if self.image_size < 16:
            raise ValidationError("image_size must be at least 16 pixels")
        for name in list(self.artifact_rho) + list(self.artifact_marginal):
            if name not in ARTIFACT_NAMES:
                raise ValidationError(f"unknown artifact name {name!r}")
        # fail fast on infeasible (rho, marginal, prevalence) triples
        for name in ARTIFACT_NAMES:
            solve_contingency(self.rho(name), self.marginal(name), self.class_prevalence)

    def rho(self, artifact: str) -> float:
        return float(self.artifact_rho.get(artifact, 0.0))

    def marginal(self, artifact: str) -> float:
        return float(self.artifact_marginal.get(artifact, 0.15))

    def to_json(self) -> str:
        payload = {
            "n_samples": self.n_samples,
            "image_size": self.image_size,
            "class_prevalence": self.class_prevalence,
            "artifact_rho": dict(self.artifact_rho),
            "artifact_marginal": dict(self.artifact_marginal),
            "signal_strength": self.signal_strength,
            "seed": self.seed,
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SyntheticConfig":
        return cls(**json.loads(text))


def _smooth_noise(rng: np.random.Generator, size: int, cells: int, lo: float, hi: float) -> np.ndarray:
    """Low-frequency noise field: coarse grid upsampled bilinearly."""
    coarse = rng.uniform(lo, hi, (cells, cells))
    out = ndimage.zoom(coarse, size / cells, order=1)
    return out[:size, :size]


def _lesion_mask(rng: np.random.Generator, size: int, label: int, strength: float) -> np.ndarray:
    """Boolean lesion region. Malignant boundaries are high-frequency irregular."""
    s = size
    cx = s * rng.uniform(0.42, 0.58)
    cy = s * rng.uniform(0.42, 0.58)
    r0 = s * rng.uniform(0.18, 0.28)
    aspect = rng.uniform(0.8, 1.25)
    yy, xx = np.mgrid[0:s, 0:s]
    dx = (xx - cx) / aspect
    dy = (yy - cy) * aspect
    theta = np.arctan2(dy, dx)
    dist = np.hypot(dx, dy)
    if label == 0:
        freqs, amp = (2, 3), 0.04
    else:
        freqs, amp = (5, 7, 9, 11), 0.05 + 0.13 * strength
    wobble = np.zeros_like(theta)
    for k in freqs:
        phase = rng.uniform(0, 2 * np.pi)
        wobble += rng.uniform(0.5, 1.0) * np.sin(k * theta + phase)
    wobble /= len(freqs)
    boundary = r0 * (1.0 + amp * wobble)
    return dist <= boundary


def _render_base(rng: np.random.Generator, size: int) -> np.ndarray:
    """Skin-toned background with gentle per-sample tint and texture."""
    base = np.array([205, 165, 145], dtype=float) + rng.uniform(-18, 18, 3)
    img = np.tile(base, (size, size, 1))
    texture = _smooth_noise(rng, size, 6, -10, 10)
    img += texture[..., None]
    return img


def _paint_lesion(rng: np.random.Generator, img: np.ndarray, mask: np.ndarray, label: int, strength: float):
    size = img.shape[0]
    tone = np.array([120, 80, 65], dtype=float) + rng.uniform(-15, 15, 3)
    interior = np.tile(tone, (size, size, 1))
    interior += _smooth_noise(rng, size, 5, -12, 12)[..., None]
    if label == 1:
        # higher interior texture variance is part of the class signal
        speckle = rng.normal(0.0, 14.0 + 22.0 * strength, (size, size, 1))
        interior += speckle
    img[mask] = interior[mask]


def _disk(xx: np.ndarray, yy: np.ndarray, x: float, y: float, r: float) -> np.ndarray:
    return (xx - x) ** 2 + (yy - y) ** 2 <= r * r


def _render_artifacts(rng: np.random.Generator, img: np.ndarray, bg: np.ndarray, flags: ArtifactVector):
    """Render each present artifact, restricted to background pixels."""
    size = img.shape[0]
    yy, xx = np.mgrid[0:size, 0:size]

    def paint(region: np.ndarray, color, alpha: float):
        region = region & bg
        img[region] = (1 - alpha) * img[region] + alpha * np.asarray(color, dtype=float)

    if flags["dark_corner"]:
        dist = np.hypot(xx - size / 2, yy - size / 2)
        vignette = np.clip((dist - 0.52 * size) / (0.25 * size), 0, 1)
        factor = 1.0 - 0.85 * vignette
        img[bg] *= factor[bg][:, None]
    if flags["hair"]:
        for _ in range(rng.integers(3, 7)):
            x0, y0 = rng.uniform(0, size, 2)
            ang = rng.uniform(0, 2 * np.pi)
            curve = rng.uniform(-0.03, 0.03)
            region = np.zeros((size, size), dtype=bool)
            for t in np.linspace(0, size * 0.9, 160):
                a = ang + curve * t
                px, py = x0 + t * np.cos(a), y0 + t * np.sin(a)
                if 0 <= px < size and 0 <= py < size:
                    region |= (xx - px) ** 2 + (yy - py) ** 2 <= 1.2
            paint(region, (35, 25, 20), 0.8)
    if flags["gel_border"]:
        edge = rng.integers(0, 4)
        width = int(size * rng.uniform(0.08, 0.14))
        region = np.zeros((size, size), dtype=bool)
        if edge == 0:
            region[:width, :] = True
        elif edge == 1:
            region[-width:, :] = True
        elif edge == 2:
            region[:, :width] = True
        else:
            region[:, -width:] = True
        paint(region, (235, 235, 245), 0.55)
    if flags["gel_bubble"]:
        for _ in range(rng.integers(3, 6)):
            bx, by = rng.uniform(0, size, 2)
            r = rng.uniform(0.02, 0.05) * size
            ring = _disk(xx, yy, bx, by, r + 1.2) & ~_disk(xx, yy, bx, by, r - 1.2)
            paint(_disk(xx, yy, bx, by, r), (240, 240, 250), 0.35)
            paint(ring, (255, 255, 255), 0.7)
    if flags["ruler"]:
        horizontal = rng.random() < 0.5
        pos = int(size * rng.uniform(0.06, 0.16))
        if rng.random() < 0.5:
            pos = size - 1 - pos
        tick_len = max(3, int(size * 0.07))
        spacing = max(4, int(size * 0.08))
        region = np.zeros((size, size), dtype=bool)
        for t in range(spacing // 2, size, spacing):
            if horizontal:
                region[max(0, pos - tick_len // 2): pos + tick_len // 2 + 1, t] = True
            else:
                region[t, max(0, pos - tick_len // 2): pos + tick_len // 2 + 1] = True
        paint(region, (20, 20, 25), 0.9)
    if flags["ink"]:
        corner = rng.integers(0, 4)
        bx = size * (0.15 if corner in (0, 2) else 0.85) + rng.uniform(-4, 4)
        by = size * (0.15 if corner in (0, 1) else 0.85) + rng.uniform(-4, 4)
        region = np.zeros((size, size), dtype=bool)
        for _ in range(4):
            ox, oy = rng.uniform(-0.05 * size, 0.05 * size, 2)
            region |= _disk(xx, yy, bx + ox, by + oy, rng.uniform(0.04, 0.08) * size)
        paint(region, (70, 40, 130), 0.75)
    if flags["patches"]:
        px = size * rng.uniform(0.1, 0.9)
        py = size * (rng.uniform(0.02, 0.12) if rng.random() < 0.5 else rng.uniform(0.88, 0.98))
        half = int(size * rng.uniform(0.06, 0.1))
        region = np.zeros((size, size), dtype=bool)
        x0, x1 = int(max(0, px - half)), int(min(size, px + half))
        y0, y1 = int(max(0, py - half)), int(min(size, py + half))
        region[y0:y1, x0:x1] = True
        paint(region, (250, 210, 60), 0.85)


def render_sample(config: SyntheticConfig, sample_id: str, label: int, flags: ArtifactVector) -> tuple[np.ndarray, np.ndarray]:
    """Render one (image, mask) pair. Deterministic in (config.seed, sample_id)."""
    rng = np.random.default_rng(derive_seed(config.seed, "render", sample_id))
    size = config.image_size
    img = _render_base(rng, size)
    mask = _lesion_mask(rng, size, label, config.signal_strength)
    _paint_lesion(rng, img, mask, label, config.signal_strength)
    _render_artifacts(rng, img, ~mask, flags)
    return np.clip(img, 0, 255).astype(np.uint8), mask


def generate_synthetic(config: SyntheticConfig, out_dir: str | Path, name: str = "synthetic") -> DatasetManifest:
    """Generate images, masks and a manifest CSV under ``out_dir``."""
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ValidationError(f"output directory not writable: {out}: {exc}") from exc

    conditionals = {}
    for a in ARTIFACT_NAMES:
        p_pos, p_neg = solve_contingency(config.rho(a), config.marginal(a), config.class_prevalence)
        conditionals[a] = {1: p_pos, 0: p_neg}
    records = []
    for i in range(config.n_samples):
        sample_id = f"s{i:05d}"
        rng = np.random.default_rng(derive_seed(config.seed, "sample", sample_id))
        label = int(rng.random() < config.class_prevalence)
        flags = ArtifactVector(
            tuple(rng.random() < conditionals[a][label] for a in ARTIFACT_NAMES)
        )
        img, mask = render_sample(config, sample_id, label, flags)
        image_rel = f"images/{sample_id}.png"
        mask_rel = f"masks/{sample_id}.png"
        Image.fromarray(img).save(out / image_rel)
        Image.fromarray((mask * 255).astype(np.uint8)).save(out / mask_rel)
        records.append(
            SampleRecord(
                id=sample_id,
                image_path=image_rel,
                label=label,
                artifacts=flags,
                mask_path=mask_rel,
                annotation_source="ground_truth",
            )
        )
    manifest = DatasetManifest(tuple(records), name=name, provenance={"root": str(out)})
    save_manifest(manifest, out / "manifest.csv")
    (out / "config.json").write_text(config.to_json())
    return manifest
