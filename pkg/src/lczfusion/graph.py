"""Instance graphs from mask-annotated RGB patches and their GCN classifier.

A 320x320 instance-id raster (produced upstream by a segmentation model and
shipped as a file) is reduced to one node per instance -- bounding-box center
and mean RGB -- and the nodes become a graph whose edge weights decay with
centroid distance.  Three graph convolution layers with skip connections, mean
pooling over nodes and a dense softmax head turn the graph into a class
probability vector.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import GOOGLE_PATCH_SIZE, NUM_LCZ_CLASSES
from .errors import DataError, DimensionError, SingularDegreeError
from .layers import (Dense, cross_entropy, cross_entropy_backward, he_uniform,
                     relu_backward, relu_forward, softmax, softmax_backward)
from .params import ParamStore

DEFAULT_KNN = 8
GCN_HIDDEN = 32
NODE_FEATURES = 5


@dataclass(frozen=True)
class Instance:
    instance_id: int
    bbox: tuple[int, int, int, int]        # x, y, w, h in pixels
    centroid: tuple[float, float]          # bbox center (c_x, c_y)
    mean_rgb: tuple[float, float, float]   # in [0, 255]


@dataclass
class InstanceSet:
    patch_id: str
    instances: list[Instance]

    def validate(self) -> None:
        ids = [i.instance_id for i in self.instances]
        if len(set(ids)) != len(ids):
            raise DataError(f"duplicate instance ids in patch {self.patch_id!r}")
        for inst in self.instances:
            if inst.instance_id <= 0:
                raise DataError(f"instance id must be positive, got {inst.instance_id}")
            x, y, w, h = inst.bbox
            if w <= 0 or h <= 0 or x < 0 or y < 0 \
                    or x + w > GOOGLE_PATCH_SIZE or y + h > GOOGLE_PATCH_SIZE:
                raise DataError(f"bbox {inst.bbox} outside the "
                                f"{GOOGLE_PATCH_SIZE}x{GOOGLE_PATCH_SIZE} patch frame")
            cx, cy = inst.centroid
            if not (x <= cx <= x + w and y <= cy <= y + h):
                raise DataError(f"centroid {inst.centroid} outside bbox {inst.bbox}")

    def to_json_dict(self) -> dict:
        return {
            "patch_id": self.patch_id,
            "instances": [
                {
                    "id": i.instance_id,
                    "bbox": list(i.bbox),
                    "centroid": list(i.centroid),
                    "mean_rgb": list(i.mean_rgb),
                }
                for i in self.instances
            ],
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "InstanceSet":
        try:
            instances = [
                Instance(
                    instance_id=int(e["id"]),
                    bbox=tuple(int(v) for v in e["bbox"]),
                    centroid=tuple(float(v) for v in e["centroid"]),
                    mean_rgb=tuple(float(v) for v in e["mean_rgb"]),
                )
                for e in doc["instances"]
            ]
            out = cls(patch_id=str(doc["patch_id"]), instances=instances)
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed instance-set document: {exc}") from exc
        out.validate()
        return out

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "InstanceSet":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json_dict(json.load(fh))


def ingest_masks(raster: np.ndarray, rgb_patch: np.ndarray,
                 patch_id: str = "") -> InstanceSet:
    """One instance per distinct positive raster id.

    bbox is the tight bounding box of the id's pixels, the centroid is the
    bbox center, and mean_rgb averages the RGB patch over the id's pixels.
    """
    size = GOOGLE_PATCH_SIZE
    if raster.shape != (size, size):
        raise DimensionError(f"instance raster must be {size}x{size}, got {raster.shape}")
    if rgb_patch.shape != (size, size, 3):
        raise DimensionError(
            f"rgb patch must be {size}x{size}x3, got {rgb_patch.shape}"
        )
    if raster.size and raster.min() < 0:
        raise DataError("instance raster ids must be 0 (background) or positive")
    rgb = rgb_patch.astype(np.float64, copy=False)
    instances = []
    for inst_id in np.unique(raster):
        if inst_id == 0:
            continue
        mask = raster == inst_id
        rows, cols = np.nonzero(mask)
        x0, x1 = int(cols.min()), int(cols.max())
        y0, y1 = int(rows.min()), int(rows.max())
        w, h = x1 - x0 + 1, y1 - y0 + 1
        mean = rgb[mask].mean(axis=0)
        instances.append(Instance(
            instance_id=int(inst_id),
            bbox=(x0, y0, w, h),
            centroid=(x0 + w / 2.0, y0 + h / 2.0),
            mean_rgb=(float(mean[0]), float(mean[1]), float(mean[2])),
        ))
    out = InstanceSet(patch_id=patch_id, instances=instances)
    out.validate()
    return out


@dataclass
class SceneGraph:
    node_features: np.ndarray   # (N, 5): r, g, b, c_x, c_y each scaled to [0, 1]
    adjacency: np.ndarray       # (N, N) symmetric, entries in [0, 1], unit diagonal

    @property
    def num_nodes(self) -> int:
        return self.node_features.shape[0]

    def validate(self, atol: float = 1e-6) -> None:
        x, a = self.node_features, self.adjacency
        n = x.shape[0]
        if n < 1 or x.shape != (n, NODE_FEATURES) or a.shape != (n, n):
            raise DimensionError(f"inconsistent graph shapes X{x.shape} A{a.shape}")
        if not np.allclose(a, a.T, atol=atol):
            raise DataError("adjacency is not symmetric")
        if a.min() < -atol or a.max() > 1 + atol:
            raise DataError("adjacency entries outside [0, 1]")
        if not np.allclose(np.diag(a), 1.0, atol=atol):
            raise DataError("adjacency diagonal must be 1 (self-loops)")


def gaussian_knn_adjacency(centroids: np.ndarray, k: int = DEFAULT_KNN,
                           sigma="median") -> np.ndarray:
    """Distance-kernel adjacency over centroid positions in pixel units.

    Edge weight exp(-d^2 / (2 sigma^2)) is kept for each node's k nearest
    neighbors (union-symmetrized), zero elsewhere; the diagonal is 1.  The
    bandwidth is the median pairwise distance unless a fixed positive float
    is given.
    """
    n = centroids.shape[0]
    a = np.zeros((n, n), dtype=np.float32)
    np.fill_diagonal(a, 1.0)
    if n < 2:
        return a
    diff = centroids[:, None, :] - centroids[None, :, :]
    d = np.sqrt((diff ** 2).sum(axis=-1))
    if sigma == "median":
        bandwidth = float(np.median(d[np.triu_indices(n, k=1)]))
    else:
        bandwidth = float(sigma)
        if bandwidth <= 0:
            raise DataError(f"kernel bandwidth must be positive, got {sigma}")
    # zero bandwidth (coincident medians) degrades to: weight 1 iff d == 0
    bandwidth = max(bandwidth, 1e-12)
    kernel = np.exp(-(d ** 2) / (2.0 * bandwidth ** 2))
    keep = np.zeros((n, n), dtype=bool)
    order = np.argsort(d + np.where(np.eye(n, dtype=bool), np.inf, 0.0),
                       axis=1, kind="stable")
    neighbors = order[:, : min(k, n - 1)]
    rows = np.repeat(np.arange(n), neighbors.shape[1])
    keep[rows, neighbors.ravel()] = True
    keep |= keep.T
    np.fill_diagonal(keep, False)
    a[keep] = kernel[keep].astype(np.float32)
    return a


def build_graph(inst: InstanceSet, k: int = DEFAULT_KNN, sigma="median",
                fallback_rgb: tuple[float, float, float] = (128.0, 128.0, 128.0),
                ) -> SceneGraph:
    """Node features plus Gaussian-kernel kNN adjacency for an instance set.

    An empty instance set (segmentation found nothing) yields a single
    synthetic whole-patch node at the patch center so downstream stages stay
    total; ``fallback_rgb`` should then be the patch's mean color.
    """
    size = float(GOOGLE_PATCH_SIZE)
    if inst.instances:
        rgb = np.array([i.mean_rgb for i in inst.instances], dtype=np.float64)
        centroids = np.array([i.centroid for i in inst.instances], dtype=np.float64)
    else:
        rgb = np.array([fallback_rgb], dtype=np.float64)
        centroids = np.array([[size / 2, size / 2]], dtype=np.float64)
    features = np.concatenate([rgb / 255.0, centroids / size], axis=1)
    adjacency = gaussian_knn_adjacency(centroids, k=k, sigma=sigma)
    g = SceneGraph(node_features=features.astype(np.float32), adjacency=adjacency)
    g.validate()
    return g


def normalize_adjacency(a: np.ndarray) -> np.ndarray:
    """Symmetric degree normalization D^{-1/2} A D^{-1/2}."""
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"adjacency must be square, got {a.shape}")
    degrees = a.sum(axis=1)
    if np.any(degrees <= 0):
        raise SingularDegreeError(
            f"zero-degree rows {np.nonzero(degrees <= 0)[0].tolist()} cannot be normalized"
        )
    inv_sqrt = 1.0 / np.sqrt(degrees)
    return a * inv_sqrt[:, None] * inv_sqrt[None, :]


# ---------------------------------------------------------------------------
# GCN layers and model
# ---------------------------------------------------------------------------

def gcsconv_forward(h: np.ndarray, a_norm, w1: np.ndarray, w2: np.ndarray,
                    b: np.ndarray) -> np.ndarray:
    """ReLU(A_norm @ h @ w1 + h @ w2 + b); the skip term uses un-aggregated h."""
    if h.ndim != 2 or h.shape[1] != w1.shape[0] or h.shape[1] != w2.shape[0]:
        raise DimensionError(
            f"gcsconv: features {h.shape} vs weights {w1.shape}/{w2.shape}"
        )
    aggregated = a_norm @ h
    return relu_forward(aggregated @ w1 + h @ w2 + b)


class GCSConv:
    """Graph convolution with a skip connection through a second weight matrix."""

    def __init__(self, store: ParamStore, name: str, f_in: int, f_out: int,
                 rng: np.random.Generator, dtype=np.float32) -> None:
        self.w1 = store.add(f"{name}.w1", he_uniform(rng, (f_in, f_out), f_in, dtype))
        self.w2 = store.add(f"{name}.w2", he_uniform(rng, (f_in, f_out), f_in, dtype))
        self.b = store.add(f"{name}.b", np.zeros(f_out, dtype=dtype))
        self._cache = None

    def forward(self, h: np.ndarray, a_norm) -> np.ndarray:
        aggregated = a_norm @ h
        pre = aggregated @ self.w1.value + h @ self.w2.value + self.b.value
        self._cache = (h, aggregated, pre, a_norm)
        return relu_forward(pre)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        h, aggregated, pre, a_norm = self._cache
        dpre = relu_backward(dout, pre)
        self.w1.accumulate_grad(aggregated.T @ dpre)
        self.w2.accumulate_grad(h.T @ dpre)
        self.b.accumulate_grad(dpre.sum(axis=0))
        # a_norm is symmetric, so the adjoint of (A @ .) is itself
        dh = a_norm @ (dpre @ self.w1.value.T) + dpre @ self.w2.value.T
        return dh


@dataclass
class GraphBatch:
    """Disjoint union of graphs: block-diagonal adjacency plus a segment vector."""

    node_features: np.ndarray
    a_norm: sp.csr_array
    segments: np.ndarray
    counts: np.ndarray

    @property
    def num_graphs(self) -> int:
        return len(self.counts)


def batch_graphs(graphs: list[SceneGraph]) -> GraphBatch:
    if not graphs:
        raise DataError("cannot batch zero graphs")
    features = np.concatenate([g.node_features for g in graphs], axis=0)
    blocks = [normalize_adjacency(g.adjacency.astype(np.float64)) for g in graphs]
    a_norm = sp.block_diag(blocks, format="csr")
    counts = np.array([g.num_nodes for g in graphs], dtype=np.int64)
    segments = np.repeat(np.arange(len(graphs)), counts)
    return GraphBatch(
        node_features=features,
        a_norm=sp.csr_array(a_norm.astype(features.dtype)),
        segments=segments,
        counts=counts,
    )


def segment_mean(h: np.ndarray, segments: np.ndarray, counts: np.ndarray) -> np.ndarray:
    pooled = np.zeros((len(counts), h.shape[1]), dtype=h.dtype)
    np.add.at(pooled, segments, h)
    return pooled / counts[:, None]


class GcnModel:
    """Three GCSConv layers, mean pooling over nodes, dense softmax head."""

    KIND = "gcn"

    def __init__(self, rng: np.random.Generator, num_classes: int = NUM_LCZ_CLASSES,
                 hidden: int = GCN_HIDDEN, dtype=np.float32) -> None:
        self.num_classes = num_classes
        self.hidden = hidden
        self.store = ParamStore()
        self.convs = [
            GCSConv(self.store, f"gcs{i}",
                    NODE_FEATURES if i == 0 else hidden, hidden, rng, dtype)
            for i in range(3)
        ]
        self.head = Dense(self.store, "head", hidden, num_classes, rng, dtype)
        self._cache = None

    def meta(self) -> dict:
        return {"kind": self.KIND, "num_classes": self.num_classes,
                "hidden": self.hidden}

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def forward(self, graphs: list[SceneGraph] | GraphBatch,
                mode: str = "infer") -> np.ndarray:
        batch = graphs if isinstance(graphs, GraphBatch) else batch_graphs(graphs)
        h = batch.node_features
        for conv in self.convs:
            h = conv.forward(h, batch.a_norm)
        pooled = segment_mean(h, batch.segments, batch.counts)
        logits = self.head.forward(pooled)
        probs = softmax(logits)
        self._cache = (batch, probs)
        return probs

    def backward(self, dprobs: np.ndarray) -> None:
        batch, probs = self._cache
        dlogits = softmax_backward(dprobs, probs)
        dpooled = self.head.backward(dlogits)
        dh = dpooled[batch.segments] / batch.counts[batch.segments, None]
        for conv in reversed(self.convs):
            dh = conv.backward(dh)

    def loss_and_grads(self, graphs, labels) -> float:
        """Mean cross-entropy plus gradient accumulation, one call."""
        probs = self.forward(graphs, mode="train")
        loss = cross_entropy(probs, labels)
        self.backward(cross_entropy_backward(probs, labels))
        return loss


def gcn_forward(graph: SceneGraph, model: GcnModel) -> np.ndarray:
    """Probability vector for a single graph."""
    return model.forward([graph])[0]
