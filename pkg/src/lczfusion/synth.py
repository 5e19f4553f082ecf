"""Synthetic datasets exercising each stream in isolation and both together.

Three tasks share one on-disk format (cube + RGB patch + instance raster per
sample, plus a manifest):

* spectral: class determined by a per-class 10-band signature; the RGB scene
  is uninformative random blobs.  Only the spectral stream can learn it.
* layout: class determined by the blob arrangement (grid, single central
  cluster, ring); the cube is uninformative flat reflectance plus noise.
  Only the graph stream can learn it.
* product: class = spectral factor x layout factor, so either stream alone
  caps at its marginal while fusing both can resolve every class.

Every sample is generated from an rng derived from (seed, task, class, index)
alone, so regeneration is byte-identical and order-independent.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import GOOGLE_PATCH_SIZE, SENTINEL_BANDS, SENTINEL_PATCH_SIZE
from .dataio import SampleRecord, write_manifest
from .errors import DataError, DomainError
from .lczt import write_tensor
from .rng import derive_rng

TASKS = ("spectral", "layout", "product")
POLYGON_GROUP = 5          # consecutive samples sharing a polygon_id
BACKGROUND_GRAY = 120


@dataclass
class SynthConfig:
    task: str
    classes: int
    samples_per_class: int
    noise_sigma: float
    seed: int

    def validate(self) -> None:
        if self.task not in TASKS:
            raise DomainError(f"unknown synth task {self.task!r}")
        if self.classes < 2:
            raise DataError(f"need at least 2 classes, got {self.classes}")
        if self.samples_per_class < 1:
            raise DataError(
                f"need at least 1 sample per class, got {self.samples_per_class}"
            )
        if self.noise_sigma < 0:
            raise DataError(f"noise_sigma must be nonnegative, got {self.noise_sigma}")
        if self.task == "product" and product_factors(self.classes) is None:
            raise DataError(
                f"product task needs a composite class count >= 4, got {self.classes}"
            )


def product_factors(classes: int) -> tuple[int, int] | None:
    """(spectral, layout) factor counts; None when classes cannot be factored."""
    if classes < 4:
        return None
    best = None
    for s in range(2, int(np.sqrt(classes)) + 1):
        if classes % s == 0:
            best = (s, classes // s)
    return best


def spectral_template(cls: int, bands: int = SENTINEL_BANDS) -> np.ndarray:
    """Distinct per-class band signature: sine of class-dependent frequency/phase."""
    freq = 1 + cls // 2
    phase = np.pi * (cls % 2)
    b = np.arange(bands, dtype=np.float64)
    return 0.5 + 0.35 * np.sin(2.0 * np.pi * (b / bands) * freq + phase)


def make_cube(cls: int, noise_sigma: float, rng: np.random.Generator,
              informative: bool = True) -> np.ndarray:
    size = SENTINEL_PATCH_SIZE
    base = spectral_template(cls) if informative else np.full(SENTINEL_BANDS, 0.5)
    cube = np.broadcast_to(base, (size, size, SENTINEL_BANDS)).astype(np.float64)
    cube = cube + rng.normal(0.0, noise_sigma, size=cube.shape)
    return np.clip(cube, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# blob scenes
# ---------------------------------------------------------------------------

def _render_blobs(centers: np.ndarray, half_sizes: np.ndarray,
                  colors: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Axis-aligned colored rectangles on gray; raster ids follow draw order."""
    size = GOOGLE_PATCH_SIZE
    rgb = np.full((size, size, 3), BACKGROUND_GRAY, dtype=np.uint8)
    mask = np.zeros((size, size), dtype=np.uint16)
    for i in range(len(centers)):
        cx, cy = centers[i]
        hx, hy = half_sizes[i]
        x0 = max(int(round(cx - hx)), 0)
        x1 = min(int(round(cx + hx)), size)
        y0 = max(int(round(cy - hy)), 0)
        y1 = min(int(round(cy + hy)), size)
        if x1 <= x0 or y1 <= y0:
            continue
        rgb[y0:y1, x0:x1] = colors[i]
        mask[y0:y1, x0:x1] = i + 1
    return rgb, mask


def _layout_centers(arrangement: int, rng: np.random.Generator) -> np.ndarray:
    """Centroid pattern for one arrangement family, centered in the patch.

    0 = 4x4 grid with small jitter, 1 = tight central cluster, 2 = wide ring.
    Arrangements beyond 2 reuse the families at shrunken extents.
    """
    mid = GOOGLE_PATCH_SIZE / 2.0
    family, variant = arrangement % 3, arrangement // 3
    scale = 0.75 ** variant
    if family == 0:
        offsets = np.array([-54.0, -18.0, 18.0, 54.0]) * scale
        gx, gy = np.meshgrid(offsets, offsets)
        pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
        pts = pts + rng.uniform(-6.0, 6.0, size=pts.shape) * scale
    elif family == 1:
        n = 7
        radius = 26.0 * scale
        r = radius * np.sqrt(rng.uniform(0.0, 1.0, size=n))
        theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
        pts = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    else:
        n = 10
        radius = 130.0 * scale + rng.uniform(-4.0, 4.0, size=n)
        theta = 2.0 * np.pi * np.arange(n) / n + rng.uniform(-0.08, 0.08, size=n)
        pts = np.stack([radius * np.cos(theta), radius * np.sin(theta)], axis=1)
    return pts + mid


def make_scene(arrangement: int | None,
               rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """RGB patch + instance raster; None = uninformative random blobs."""
    size = GOOGLE_PATCH_SIZE
    if arrangement is None:
        n = int(rng.integers(4, 9))
        margin = 24.0
        centers = rng.uniform(margin, size - margin, size=(n, 2))
        half = rng.uniform(8.0, 20.0, size=(n, 2))
    else:
        centers = _layout_centers(arrangement, rng)
        n = len(centers)
        if arrangement % 3 == 1:
            half = rng.uniform(6.0, 10.0, size=(n, 2))
        else:
            half = rng.uniform(8.0, 14.0, size=(n, 2))
    colors = rng.integers(40, 216, size=(n, 3)).astype(np.uint8)
    return _render_blobs(centers, half, colors)


# ---------------------------------------------------------------------------
# dataset generation
# ---------------------------------------------------------------------------

def _sample_factors(cfg: SynthConfig, cls: int) -> tuple[int | None, int | None]:
    """(spectral class for the cube, arrangement for the scene)."""
    if cfg.task == "spectral":
        return cls, None
    if cfg.task == "layout":
        return None, cls
    n_spec, n_layout = product_factors(cfg.classes)
    return cls // n_layout, cls % n_layout


def synth_generate(cfg: SynthConfig, out_dir) -> list[SampleRecord]:
    """Write the dataset under out_dir and return its (unsplit) records."""
    cfg.validate()
    patches_dir = os.path.join(out_dir, "patches")
    os.makedirs(patches_dir, exist_ok=True)
    records = []
    for cls in range(cfg.classes):
        spec_cls, arrangement = _sample_factors(cfg, cls)
        for i in range(cfg.samples_per_class):
            rng = derive_rng(cfg.seed, f"{cfg.task}:c{cls}:s{i}")
            cube = make_cube(spec_cls or 0, cfg.noise_sigma, rng,
                             informative=spec_cls is not None)
            rgb, mask = make_scene(arrangement, rng)
            sample_id = f"{cfg.task}_c{cls:02d}_s{i:04d}"
            paths = {}
            for tag, arr in (("s2", cube), ("rgb", rgb), ("mask", mask)):
                rel = os.path.join("patches", f"{sample_id}.{tag}.lczt")
                write_tensor(os.path.join(out_dir, rel), arr)
                paths[tag] = rel
            records.append(SampleRecord(
                sample_id=sample_id,
                city="synthetic",
                lcz_class=cls,
                polygon_id=f"{cfg.task}_c{cls:02d}_p{i // POLYGON_GROUP:03d}",
                sentinel_path=paths["s2"],
                google_path=paths["rgb"],
                mask_path=paths["mask"],
            ))
    records.sort(key=lambda r: r.sample_id)
    write_manifest(records, os.path.join(out_dir, "manifest.jsonl"))
    return records
