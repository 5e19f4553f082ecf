"""Dataset plumbing: manifests, polygons, patch extraction, splits, augmentation.

A dataset on disk is a directory with a `manifest.jsonl` (one sample record
per line) plus the patch files it references by relative path: a 32x32x10
float32 reflectance cube, a 320x320x3 uint8 RGB patch and a 320x320 uint16
instance raster per sample, all in the LCZT container format.
"""

from __future__ import annotations

import json
import os
import warnings
from dataclasses import dataclass, replace

import numpy as np
import shapely
from shapely.geometry import Polygon as ShapelyPolygon, box as shapely_box

from . import (GOOGLE_PATCH_SIZE, NUM_LCZ_CLASSES, RESOLUTION_RATIO,
               SENTINEL_BANDS, SENTINEL_PATCH_SIZE)
from .errors import DataError, DimensionError, DomainError
from .graph import SceneGraph, build_graph, ingest_masks
from .lczt import read_tensor, write_tensor

REFLECTANCE_SCALE = 10000.0
DEFAULT_OVERLAP_MIN = 0.5
SPLIT_NAMES = ("train", "test", "val")
DEFAULT_RATIOS = (0.7, 0.2, 0.1)      # train, test, val

MANIFEST_FIELDS = ("sample_id", "city", "lcz_class", "polygon_id",
                   "sentinel_path", "google_path", "mask_path", "split")


# ---------------------------------------------------------------------------
# sample records and manifests
# ---------------------------------------------------------------------------

@dataclass
class SampleRecord:
    sample_id: str
    city: str
    lcz_class: int
    polygon_id: str
    sentinel_path: str
    google_path: str
    mask_path: str
    split: str | None = None

    def to_json_dict(self) -> dict:
        return {f: getattr(self, f) for f in MANIFEST_FIELDS}

    @classmethod
    def from_json_dict(cls, doc: dict) -> "SampleRecord":
        unknown = set(doc) - set(MANIFEST_FIELDS)
        if unknown:
            raise DataError(f"unknown manifest fields {sorted(unknown)}")
        try:
            rec = cls(
                sample_id=str(doc["sample_id"]),
                city=str(doc["city"]),
                lcz_class=int(doc["lcz_class"]),
                polygon_id=str(doc["polygon_id"]),
                sentinel_path=str(doc["sentinel_path"]),
                google_path=str(doc["google_path"]),
                mask_path=str(doc["mask_path"]),
                split=doc.get("split"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed sample record: {exc}") from exc
        if not 0 <= rec.lcz_class < NUM_LCZ_CLASSES:
            raise DataError(f"lcz_class {rec.lcz_class} outside 0..16 "
                            f"in sample {rec.sample_id!r}")
        if rec.split is not None and rec.split not in SPLIT_NAMES:
            raise DataError(f"split {rec.split!r} not one of {SPLIT_NAMES}")
        return rec


def write_manifest(records: list[SampleRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            json.dump(rec.to_json_dict(), fh, sort_keys=True)
            fh.write("\n")


def load_manifest(path, check_paths: bool = True) -> list[SampleRecord]:
    base = os.path.dirname(os.path.abspath(path))
    records = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: not valid JSON: {exc}") from exc
            rec = SampleRecord.from_json_dict(doc)
            if rec.sample_id in seen:
                raise DataError(f"duplicate sample_id {rec.sample_id!r} in manifest")
            seen.add(rec.sample_id)
            if check_paths:
                for p in (rec.sentinel_path, rec.google_path, rec.mask_path):
                    if not os.path.exists(os.path.join(base, p)):
                        raise DataError(
                            f"sample {rec.sample_id!r} references missing file {p}"
                        )
            records.append(rec)
    return records


# ---------------------------------------------------------------------------
# polygons
# ---------------------------------------------------------------------------

@dataclass
class LabeledPolygon:
    polygon_id: str
    lcz_class: int
    ring: list[tuple[float, float]]    # open ring, >= 3 distinct vertices


@dataclass
class PolygonSet:
    polygons: list[LabeledPolygon]

    def validate(self) -> None:
        ids = [p.polygon_id for p in self.polygons]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate polygon_id in polygon set")
        for poly in self.polygons:
            ring = list(poly.ring)
            if len(ring) >= 2 and tuple(ring[0]) == tuple(ring[-1]):
                ring = ring[:-1]
            if len(ring) < 3:
                raise DataError(
                    f"polygon {poly.polygon_id!r} has fewer than 3 vertices"
                )
            shp = ShapelyPolygon(ring)
            if not shp.is_valid:
                raise DataError(
                    f"polygon {poly.polygon_id!r} is not a valid simple ring: "
                    f"{shapely.is_valid_reason(shp)}"
                )
            if not 0 <= poly.lcz_class < NUM_LCZ_CLASSES:
                raise DataError(
                    f"polygon {poly.polygon_id!r} lcz_class {poly.lcz_class} invalid"
                )

    def save(self, path) -> None:
        doc = {"polygons": [
            {"polygon_id": p.polygon_id, "lcz_class": p.lcz_class,
             "ring": [list(v) for v in p.ring]}
            for p in self.polygons
        ]}
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "PolygonSet":
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        try:
            polys = [
                LabeledPolygon(
                    polygon_id=str(e["polygon_id"]),
                    lcz_class=int(e["lcz_class"]),
                    ring=[(float(x), float(y)) for x, y in e["ring"]],
                )
                for e in doc["polygons"]
            ]
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed polygon file: {exc}") from exc
        out = cls(polygons=polys)
        out.validate()
        return out


# ---------------------------------------------------------------------------
# normalization and patch extraction
# ---------------------------------------------------------------------------

def normalize_sentinel(dn: np.ndarray,
                       scale: float = REFLECTANCE_SCALE) -> np.ndarray:
    """Digital numbers to reflectance: divide by the scale, clamp to [0, 1]."""
    dn = np.asarray(dn)
    if dn.size and dn.min() < 0:
        raise DataError(f"digital numbers must be nonnegative, min is {dn.min()}")
    return np.clip(dn.astype(np.float32) / np.float32(scale), 0.0, 1.0)


def extract_patches(sentinel_scene: np.ndarray, google_scene: np.ndarray,
                    polygons: PolygonSet, per_polygon: int,
                    rng: np.random.Generator, out_dir,
                    overlap_min: float = DEFAULT_OVERLAP_MIN,
                    mask_scene: np.ndarray | None = None,
                    city: str = "scene",
                    max_attempts_per_sample: int = 500) -> list[SampleRecord]:
    """Sample aligned patch pairs centered inside each labeled polygon.

    Polygon coordinates are Google-raster pixels.  Candidate centers are drawn
    uniformly inside the polygon and kept when the 320x320 window fits the
    scene and overlaps the polygon by at least overlap_min of its area.
    Windows snap to the 10-pixel grid so the Google window maps exactly onto
    a 32x32 Sentinel window.  A polygon that cannot yield its quota gets a
    warning, not an error.
    """
    polygons.validate()
    gsize, ssize, ratio = GOOGLE_PATCH_SIZE, SENTINEL_PATCH_SIZE, RESOLUTION_RATIO
    gh, gw = google_scene.shape[0], google_scene.shape[1]
    sh, sw = sentinel_scene.shape[0], sentinel_scene.shape[1]
    if (gh, gw) != (sh * ratio, sw * ratio):
        raise DimensionError(
            f"google scene {gh}x{gw} is not {ratio}x the sentinel scene {sh}x{sw}"
        )
    if google_scene.ndim != 3 or google_scene.shape[2] != 3:
        raise DimensionError(f"google scene must be HxWx3, got {google_scene.shape}")
    if sentinel_scene.ndim != 3 or sentinel_scene.shape[2] != SENTINEL_BANDS:
        raise DimensionError(
            f"sentinel scene must be HxWx{SENTINEL_BANDS}, got {sentinel_scene.shape}"
        )
    if mask_scene is not None and mask_scene.shape != (gh, gw):
        raise DimensionError(
            f"mask scene {mask_scene.shape} does not match google scene {gh}x{gw}"
        )
    if not 0.0 < overlap_min <= 1.0:
        raise DomainError(f"overlap_min must lie in (0, 1], got {overlap_min}")

    patches_dir = os.path.join(out_dir, "patches")
    os.makedirs(patches_dir, exist_ok=True)
    records = []
    for poly in polygons.polygons:
        shp = ShapelyPolygon(poly.ring)
        minx, miny, maxx, maxy = shp.bounds
        kept = 0
        budget = max_attempts_per_sample * per_polygon
        while kept < per_polygon and budget > 0:
            budget -= 1
            cx = rng.uniform(minx, maxx)
            cy = rng.uniform(miny, maxy)
            if not shp.contains(shapely.points(cx, cy)):
                continue
            # snap to the coarse grid; the window is centered on the snapped cell
            gx0 = ratio * (int(round(cx / ratio)) - ssize // 2)
            gy0 = ratio * (int(round(cy / ratio)) - ssize // 2)
            if gx0 < 0 or gy0 < 0 or gx0 + gsize > gw or gy0 + gsize > gh:
                continue
            window = shapely_box(gx0, gy0, gx0 + gsize, gy0 + gsize)
            if window.intersection(shp).area / window.area < overlap_min:
                continue
            sx0, sy0 = gx0 // ratio, gy0 // ratio
            sample_id = f"{poly.polygon_id}_{kept:03d}"
            cube = normalize_sentinel(
                sentinel_scene[sy0:sy0 + ssize, sx0:sx0 + ssize, :]
            )
            rgb = np.ascontiguousarray(
                google_scene[gy0:gy0 + gsize, gx0:gx0 + gsize, :]
            ).astype(np.uint8)
            if mask_scene is None:
                mask = np.zeros((gsize, gsize), dtype=np.uint16)
            else:
                mask = np.ascontiguousarray(
                    mask_scene[gy0:gy0 + gsize, gx0:gx0 + gsize]
                ).astype(np.uint16)
            paths = {}
            for tag, arr in (("s2", cube), ("rgb", rgb), ("mask", mask)):
                rel = os.path.join("patches", f"{sample_id}.{tag}.lczt")
                write_tensor(os.path.join(out_dir, rel), arr)
                paths[tag] = rel
            records.append(SampleRecord(
                sample_id=sample_id, city=city, lcz_class=poly.lcz_class,
                polygon_id=poly.polygon_id, sentinel_path=paths["s2"],
                google_path=paths["rgb"], mask_path=paths["mask"],
            ))
            kept += 1
        if kept < per_polygon:
            warnings.warn(
                f"polygon {poly.polygon_id!r}: kept {kept}/{per_polygon} samples "
                f"(too small for overlap_min={overlap_min})"
            )
    return records


# ---------------------------------------------------------------------------
# split strategies
# ---------------------------------------------------------------------------

def _apportion(n: int, ratios: tuple[float, float, float]) -> list[int]:
    """Largest-remainder split of n items; ties favor earlier entries."""
    exact = [n * r for r in ratios]
    counts = [int(np.floor(e)) for e in exact]
    remainders = [e - c for e, c in zip(exact, counts)]
    short = n - sum(counts)
    # stable sort: equal remainders resolve in ratio order (train > test > val)
    order = sorted(range(len(ratios)), key=lambda i: -remainders[i])
    for i in range(short):
        counts[order[i]] += 1
    return counts


def _check_ratios(ratios) -> tuple[float, float, float]:
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise DataError(f"need three positive ratios, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError(f"ratios {ratios} sum to {sum(ratios)}, not 1")
    return ratios


def split(records: list[SampleRecord], strategy: str,
          ratios=DEFAULT_RATIOS, rng: np.random.Generator = None,
          ) -> list[SampleRecord]:
    """Assign train/test/val per class at the given ratios (in that order).

    sample_pool stratifies the samples of each class directly; polygon_pool
    partitions each class's polygons first and every sample inherits its
    polygon's assignment, so no polygon ever spans two splits.
    """
    ratios = _check_ratios(ratios)
    if strategy not in ("sample_pool", "polygon_pool"):
        raise DomainError(f"unknown split strategy {strategy!r}")
    if rng is None:
        raise DataError("split requires a seeded generator")
    if not records:
        raise DataError("cannot split zero records")

    out = [replace(r) for r in records]
    classes = sorted({r.lcz_class for r in out})
    if strategy == "sample_pool":
        for cls in classes:
            idx = [i for i, r in enumerate(out) if r.lcz_class == cls]
            idx = [idx[j] for j in rng.permutation(len(idx))]
            counts = _apportion(len(idx), ratios)
            pos = 0
            for name, count in zip(SPLIT_NAMES, counts):
                for i in idx[pos:pos + count]:
                    out[i].split = name
                pos += count
    else:
        assignment: dict[str, str] = {}
        for cls in classes:
            seen: list[str] = []
            for r in out:
                if r.lcz_class == cls and r.polygon_id not in seen:
                    seen.append(r.polygon_id)
            if len(seen) < 3:
                warnings.warn(
                    f"class {cls} has only {len(seen)} polygons; "
                    f"assignment priority is train > test > val"
                )
            order = [seen[j] for j in rng.permutation(len(seen))]
            counts = _apportion(len(order), ratios)
            pos = 0
            for name, count in zip(SPLIT_NAMES, counts):
                for pid in order[pos:pos + count]:
                    assignment[pid] = name
                pos += count
        for r in out:
            r.split = assignment[r.polygon_id]
    return out


# ---------------------------------------------------------------------------
# dihedral augmentation
# ---------------------------------------------------------------------------

TRANSFORMS = ("identity", "rot90", "rot180", "rot270",
              "flip_h", "flip_v", "transpose", "anti_transpose")

# center-relative linear action of each transform on (u, v) = (x, y) - S/2
_MATRICES = {
    "identity": np.array([[1, 0], [0, 1]]),
    "rot90": np.array([[0, 1], [-1, 0]]),
    "rot180": np.array([[-1, 0], [0, -1]]),
    "rot270": np.array([[0, -1], [1, 0]]),
    "flip_h": np.array([[-1, 0], [0, 1]]),
    "flip_v": np.array([[1, 0], [0, -1]]),
    "transpose": np.array([[0, 1], [1, 0]]),
    "anti_transpose": np.array([[0, -1], [-1, 0]]),
}


def _require_transform(name: str) -> None:
    if name not in TRANSFORMS:
        raise DomainError(f"unknown dihedral transform {name!r}")


def transform_cube(cube: np.ndarray, name: str) -> np.ndarray:
    """Apply the transform on the two leading (spatial) axes; bands untouched."""
    _require_transform(name)
    if name == "identity":
        return cube.copy()
    if name in ("rot90", "rot180", "rot270"):
        k = ("rot90", "rot180", "rot270").index(name) + 1
        return np.ascontiguousarray(np.rot90(cube, k, axes=(0, 1)))
    if name == "flip_h":
        return np.ascontiguousarray(np.flip(cube, axis=1))
    if name == "flip_v":
        return np.ascontiguousarray(np.flip(cube, axis=0))
    swapped = np.swapaxes(cube, 0, 1)
    if name == "transpose":
        return np.ascontiguousarray(swapped)
    return np.ascontiguousarray(np.rot90(swapped, 2, axes=(0, 1)))


def transform_points(points: np.ndarray, name: str, size: float) -> np.ndarray:
    """Map continuous (x, y) patch coordinates by the same isometry."""
    _require_transform(name)
    pts = np.asarray(points, dtype=np.float64)
    centered = pts - size / 2.0
    return centered @ _MATRICES[name].T.astype(np.float64) + size / 2.0


def compose_transforms(first: str, then: str) -> str:
    """Name of the single transform equal to `first` followed by `then`."""
    _require_transform(first)
    _require_transform(then)
    m = _MATRICES[then] @ _MATRICES[first]
    for name, cand in _MATRICES.items():
        if np.array_equal(cand, m):
            return name
    raise AssertionError("dihedral group is closed; unreachable")


def transform_graph(graph: SceneGraph, name: str) -> SceneGraph:
    """Move node coordinates analytically; colors and adjacency are unchanged.

    The adjacency depends only on pairwise centroid distances, which every
    dihedral transform preserves, so it is copied rather than rebuilt.
    """
    _require_transform(name)
    feats = graph.node_features.copy()
    feats[:, 3:5] = transform_points(
        graph.node_features[:, 3:5], name, 1.0
    ).astype(feats.dtype)
    return SceneGraph(node_features=feats, adjacency=graph.adjacency.copy())


def augment_pair(cube: np.ndarray, graph: SceneGraph,
                 name: str) -> tuple[np.ndarray, SceneGraph]:
    return transform_cube(cube, name), transform_graph(graph, name)


# ---------------------------------------------------------------------------
# in-memory dataset loading
# ---------------------------------------------------------------------------

@dataclass
class LoadedSample:
    sample_id: str
    polygon_id: str
    label: int
    split: str | None
    cube: np.ndarray | None
    graph: SceneGraph | None


def load_sample(record: SampleRecord, base_dir,
                stream: str | None = None) -> LoadedSample:
    """Read one sample's tensors; stream limits loading to one modality."""
    cube = graph = None
    if stream in (None, "sentinel"):
        cube = read_tensor(os.path.join(base_dir, record.sentinel_path))
        if cube.shape != (SENTINEL_PATCH_SIZE, SENTINEL_PATCH_SIZE, SENTINEL_BANDS):
            raise DimensionError(
                f"sample {record.sample_id!r}: cube shape {cube.shape}"
            )
        if cube.min() < 0.0 or cube.max() > 1.0:
            raise DataError(
                f"sample {record.sample_id!r}: reflectance outside [0, 1]"
            )
    if stream in (None, "google"):
        rgb = read_tensor(os.path.join(base_dir, record.google_path))
        mask = read_tensor(os.path.join(base_dir, record.mask_path))
        inst = ingest_masks(mask, rgb, patch_id=record.sample_id)
        graph = build_graph(inst, fallback_rgb=tuple(rgb.mean(axis=(0, 1))))
    return LoadedSample(
        sample_id=record.sample_id, polygon_id=record.polygon_id,
        label=record.lcz_class, split=record.split, cube=cube, graph=graph,
    )


def load_dataset(manifest_path, stream: str | None = None,
                 splits: tuple[str, ...] | None = None) -> list[LoadedSample]:
    base = os.path.dirname(os.path.abspath(manifest_path))
    records = load_manifest(manifest_path)
    if splits is not None:
        records = [r for r in records if r.split in splits]
    return [load_sample(r, base, stream) for r in records]
