"""Test-time censoring: convex-hull lesion isolation, uniform-noise
background, aspect-preserving rescale.

The transform destroys background artifacts and lesion-size cues while
resampling the hull interior from the original image. Only test images should
be censored; enforcing that is the evaluation harness's job.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy import ndimage
from skimage.filters import threshold_otsu

from .errors import EmptyMaskError, ValidationError
from .manifest import DatasetManifest, SampleRecord, save_manifest
from .seeding import derive_seed

MASK_PROVENANCES = ("ground_truth", "inferred", "fallback")


@dataclass
class BitMask:
    grid: np.ndarray  # boolean (H, W)
    provenance: str = "ground_truth"
    low_confidence: bool = False

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=bool)
        if self.grid.ndim != 2:
            raise ValidationError("mask grid must be 2-d")
        if self.provenance not in MASK_PROVENANCES:
            raise ValidationError(f"mask provenance must be one of {MASK_PROVENANCES}")

    @property
    def height(self) -> int:
        return self.grid.shape[0]

    @property
    def width(self) -> int:
        return self.grid.shape[1]

    @classmethod
    def load(cls, path: str | Path, provenance: str = "ground_truth") -> "BitMask":
        arr = np.asarray(Image.open(path).convert("L"))
        return cls(arr > 0, provenance=provenance)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray((self.grid * 255).astype(np.uint8)).save(path)
        return path


@dataclass(frozen=True)
class NoiseCropConfig:
    output_size: int = 224
    noise_low: int = 0
    noise_high: int = 255  # inclusive, per channel
    seed: int = 0

    def __post_init__(self):
        if self.output_size <= 0:
            raise ValidationError("output size must be positive")
        if not self.noise_low < self.noise_high:
            raise ValidationError("noise_low must be below noise_high")


def _hull_vertices(points: np.ndarray) -> np.ndarray:
    """Convex hull vertices (counter-clockwise) via Andrew's monotone chain.

    Integer arithmetic throughout; input points are (x, y) pixel centers.
    """
    pts = np.unique(points, axis=0)
    if len(pts) <= 2:
        return pts

    def half(iterable):
        chain: list[np.ndarray] = []
        for p in iterable:
            while len(chain) >= 2:
                o, a = chain[-2], chain[-1]
                cross = (a[0] - o[0]) * (p[1] - o[1]) - (a[1] - o[1]) * (p[0] - o[0])
                if cross <= 0:
                    chain.pop()
                else:
                    break
            chain.append(p)
        return chain

    lower = half(pts)
    upper = half(pts[::-1])
    return np.array(lower[:-1] + upper[:-1])


def convex_hull(mask: BitMask) -> BitMask:
    """Filled convex hull of the foreground pixel centers.

    A superset of the input foreground; degenerate inputs (single pixel,
    collinear points) rasterize to exactly those pixels on the segment.
    """
    ys, xs = np.nonzero(mask.grid)
    if len(ys) == 0:
        raise EmptyMaskError("cannot take the convex hull of an empty mask")
    points = np.stack([xs, ys], axis=1).astype(np.int64)
    verts = _hull_vertices(points)
    out = np.zeros_like(mask.grid)
    x0, x1 = xs.min(), xs.max()
    y0, y1 = ys.min(), ys.max()
    yy, xx = np.mgrid[y0: y1 + 1, x0: x1 + 1]
    if len(verts) <= 2:
        # segment/pixel: points with zero cross product, within the bbox
        a = verts[0]
        b = verts[-1]
        cross = (b[0] - a[0]) * (yy - a[1]) - (b[1] - a[1]) * (xx - a[0])
        inside = cross == 0
    else:
        inside = np.ones(yy.shape, dtype=bool)
        for i in range(len(verts)):
            a = verts[i]
            b = verts[(i + 1) % len(verts)]
            cross = (b[0] - a[0]) * (yy - a[1]) - (b[1] - a[1]) * (xx - a[0])
            inside &= cross >= 0
    out[y0: y1 + 1, x0: x1 + 1] = inside
    return BitMask(out, provenance=mask.provenance, low_confidence=mask.low_confidence)


def _scaled_box(w: int, h: int, out_size: int) -> tuple[int, int]:
    """Scale (w, h) so the larger side equals out_size, aspect preserved."""
    if w >= h:
        return out_size, max(1, round(h * out_size / w))
    return max(1, round(w * out_size / h)), out_size


def noisecrop(
    image: np.ndarray,
    mask: BitMask,
    config: NoiseCropConfig,
    sample_id: str = "",
) -> np.ndarray:
    """Censor one image: crop to the hull box, rescale to fill the output
    canvas, fill everything outside the hull with i.i.d. uniform noise."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValidationError("image must be H x W x 3")
    if image.shape[:2] != mask.grid.shape:
        raise ValidationError("image and mask dimensions must agree")
    hull = convex_hull(mask)
    ys, xs = np.nonzero(hull.grid)
    y0, y1 = ys.min(), ys.max() + 1
    x0, x1 = xs.min(), xs.max() + 1
    crop = image[y0:y1, x0:x1]
    hull_crop = hull.grid[y0:y1, x0:x1]
    h, w = crop.shape[:2]
    out = config.output_size
    new_w, new_h = _scaled_box(w, h, out)
    if (new_w, new_h) == (w, h):
        resized = crop
        resized_hull = hull_crop
    else:
        resized = np.asarray(
            Image.fromarray(crop.astype(np.uint8)).resize((new_w, new_h), Image.BILINEAR)
        )
        resized_hull = (
            np.asarray(
                Image.fromarray((hull_crop * 255).astype(np.uint8)).resize(
                    (new_w, new_h), Image.NEAREST
                )
            )
            > 0
        )
    rng = np.random.default_rng(derive_seed(config.seed, "noise", sample_id))
    canvas = rng.integers(config.noise_low, config.noise_high + 1, (out, out, 3)).astype(np.uint8)
    oy = (out - new_h) // 2
    ox = (out - new_w) // 2
    window = canvas[oy: oy + new_h, ox: ox + new_w]
    window[resized_hull] = resized[resized_hull]
    return canvas


def fallback_segment(image: np.ndarray) -> BitMask:
    """Heuristic lesion segmentation used when no mask is available.

    Otsu threshold on luminance restricted to the center 80% of the frame,
    keeping the largest connected component. A uniform image yields a
    low-confidence center ellipse covering 40% of the frame.
    """
    image = np.asarray(image, dtype=float)
    h, w = image.shape[:2]
    lum = 0.299 * image[..., 0] + 0.587 * image[..., 1] + 0.114 * image[..., 2]
    my, mx = int(h * 0.1), int(w * 0.1)
    center = np.zeros((h, w), dtype=bool)
    center[my: h - my, mx: w - mx] = True
    region = lum[center]
    mask = np.zeros((h, w), dtype=bool)
    if region.size and region.max() - region.min() > 1e-6:
        thr = threshold_otsu(region)
        mask[center] = lum[center] < thr  # lesions are darker than skin
        labeled, n = ndimage.label(mask)
        if n > 0:
            sizes = ndimage.sum_labels(np.ones_like(labeled), labeled, index=range(1, n + 1))
            mask = labeled == (1 + int(np.argmax(sizes)))
            return BitMask(mask, provenance="fallback")
    # no usable component: center ellipse covering 40% of the frame
    yy, xx = np.mgrid[0:h, 0:w]
    c = np.sqrt(0.4 / np.pi)
    ellipse = ((xx - w / 2) / (c * w)) ** 2 + ((yy - h / 2) / (c * h)) ** 2 <= 1.0
    return BitMask(ellipse, provenance="fallback", low_confidence=True)


@dataclass
class BatchResult:
    manifest: DatasetManifest
    failures: list[tuple[str, str]] = field(default_factory=list)


def batch_noisecrop(
    manifest: DatasetManifest,
    config: NoiseCropConfig,
    out_dir: str | Path,
    ids: Sequence[str] | None = None,
) -> BatchResult:
    """Censor every record; per-image failures are collected, not fatal.

    Records without a usable mask take the fallback segmentation path and are
    tagged ``provenance=fallback`` in the new manifest.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    root = manifest.root
    records: list[SampleRecord] = []
    failures: list[tuple[str, str]] = []
    for sample_id in ids if ids is not None else manifest.ids():
        record = manifest.by_id(sample_id)
        try:
            image = np.asarray(Image.open(root / record.image_path).convert("RGB"))
            mask = None
            if record.mask_path:
                mask = BitMask.load(
                    root / record.mask_path,
                    provenance="ground_truth" if record.annotation_source == "ground_truth" else "inferred",
                )
                if not mask.grid.any():
                    mask = None
            if mask is None:
                mask = fallback_segment(image)
            censored = noisecrop(image, mask, config, sample_id=record.id)
            rel = f"images/{record.id}.png"
            Image.fromarray(censored).save(out / rel)
            extras = dict(record.extras)
            extras["noisecrop"] = "1"
            extras["mask_provenance"] = mask.provenance
            if mask.low_confidence:
                extras["mask_low_confidence"] = "1"
            records.append(
                SampleRecord(
                    id=record.id,
                    image_path=rel,
                    label=record.label,
                    artifacts=record.artifacts,
                    mask_path=record.mask_path,
                    annotation_source=record.annotation_source,
                    extras=extras,
                )
            )
        except Exception as exc:  # per-image failure; keep going
            failures.append((record.id, f"{type(exc).__name__}: {exc}"))
    if not records:
        raise ValidationError("every record failed the censoring transform")
    new_manifest = DatasetManifest(
        tuple(records), name=f"{manifest.name}-noisecrop", provenance={"root": str(out)}
    )
    save_manifest(new_manifest, out / "manifest.csv")
    return BatchResult(manifest=new_manifest, failures=failures)
