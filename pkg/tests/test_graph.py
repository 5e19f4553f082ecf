"""Instance ingestion, graph construction, GCSConv and the graph model."""

import numpy as np
import pytest

from lczfusion import GOOGLE_PATCH_SIZE
from lczfusion.errors import (
    DataError,
    DimensionError,
    SingularDegreeError,
)
from lczfusion.graph import (
    GcnModel,
    GCSConv,
    Instance,
    InstanceSet,
    SceneGraph,
    batch_graphs,
    build_graph,
    gaussian_knn_adjacency,
    gcn_forward,
    gcsconv_forward,
    ingest_masks,
    normalize_adjacency,
    segment_mean,
)
from lczfusion.params import ParamStore
from lczfusion.rng import make_rng

from oracles import (
    adjacency_naive,
    degree_normalize_naive,
    gcsconv_naive,
    instance_stats_naive,
    segment_mean_naive,
)

S = GOOGLE_PATCH_SIZE


def _random_raster(rng, n_rects=5):
    raster = np.zeros((S, S), dtype=np.int32)
    rgb = rng.integers(0, 256, size=(S, S, 3)).astype(np.uint8)
    for i in range(n_rects):
        w, h = rng.integers(10, 60, size=2)
        x = int(rng.integers(0, S - w))
        y = int(rng.integers(0, S - h))
        raster[y:y + h, x:x + w] = i + 1     # later rectangles overwrite
    return raster, rgb


# ---------------------------------------------------------------------------
# instances
# ---------------------------------------------------------------------------

def test_ingest_matches_per_pixel_oracle():
    rng = make_rng(0)
    raster, rgb = _random_raster(rng)
    inst = ingest_masks(raster, rgb, patch_id="p0")
    ref = instance_stats_naive(raster, rgb.astype(np.float64))
    assert {i.instance_id for i in inst.instances} == set(ref)
    for i in inst.instances:
        e = ref[i.instance_id]
        assert i.bbox == e["bbox"]
        np.testing.assert_allclose(i.centroid, e["centroid"])
        np.testing.assert_allclose(i.mean_rgb, e["mean_rgb"], atol=1e-9)


def test_ingest_single_pixel_instance():
    raster = np.zeros((S, S), dtype=np.int32)
    raster[7, 11] = 3
    rgb = np.full((S, S, 3), 9, dtype=np.uint8)
    inst = ingest_masks(raster, rgb)
    (only,) = inst.instances
    assert only.instance_id == 3
    assert only.bbox == (11, 7, 1, 1)
    assert only.centroid == (11.5, 7.5)
    assert only.mean_rgb == (9.0, 9.0, 9.0)


def test_ingest_empty_raster():
    inst = ingest_masks(np.zeros((S, S), dtype=np.int32),
                        np.zeros((S, S, 3), dtype=np.uint8))
    assert inst.instances == []


def test_ingest_shape_and_sign_checks():
    with pytest.raises(DimensionError):
        ingest_masks(np.zeros((S, S - 1)), np.zeros((S, S, 3)))
    with pytest.raises(DimensionError):
        ingest_masks(np.zeros((S, S)), np.zeros((S, S, 4)))
    bad = np.zeros((S, S), dtype=np.int32)
    bad[0, 0] = -2
    with pytest.raises(DataError):
        ingest_masks(bad, np.zeros((S, S, 3)))


def test_instance_set_validation():
    ok = Instance(1, (0, 0, 10, 10), (5.0, 5.0), (1.0, 2.0, 3.0))
    InstanceSet("p", [ok]).validate()
    with pytest.raises(DataError, match="duplicate"):
        InstanceSet("p", [ok, ok]).validate()
    with pytest.raises(DataError, match="positive"):
        InstanceSet("p", [Instance(0, (0, 0, 1, 1), (0.5, 0.5), (0, 0, 0))]).validate()
    with pytest.raises(DataError, match="frame"):
        InstanceSet("p", [Instance(1, (315, 0, 10, 5), (320.0, 2.5), (0, 0, 0))]).validate()
    with pytest.raises(DataError, match="centroid"):
        InstanceSet("p", [Instance(1, (0, 0, 10, 10), (50.0, 5.0), (0, 0, 0))]).validate()


def test_instance_set_json_roundtrip(tmp_path):
    rng = make_rng(1)
    raster, rgb = _random_raster(rng, n_rects=3)
    inst = ingest_masks(raster, rgb, patch_id="berlin_c03_s0007")
    p = tmp_path / "x.instances.json"
    inst.save(p)
    back = InstanceSet.load(p)
    assert back.patch_id == inst.patch_id
    assert len(back.instances) == len(inst.instances)
    for a, b in zip(inst.instances, back.instances):
        assert a.instance_id == b.instance_id and a.bbox == b.bbox
        np.testing.assert_allclose(a.centroid, b.centroid)
        np.testing.assert_allclose(a.mean_rgb, b.mean_rgb)


def test_instance_set_malformed_document():
    with pytest.raises(DataError):
        InstanceSet.from_json_dict({"patch_id": "p"})
    with pytest.raises(DataError):
        InstanceSet.from_json_dict(
            {"patch_id": "p", "instances": [{"id": 1, "bbox": [0, 0, 1]}]}
        )


# ---------------------------------------------------------------------------
# adjacency
# ---------------------------------------------------------------------------

def test_adjacency_matches_naive():
    rng = make_rng(2)
    for n in [2, 3, 5, 12, 25]:
        cents = rng.uniform(0, S, size=(n, 2))
        fast = gaussian_knn_adjacency(cents, k=4)
        slow = adjacency_naive([tuple(c) for c in cents], k=4)
        np.testing.assert_allclose(fast, slow, atol=1e-6)


def test_adjacency_fixed_sigma_matches_naive():
    rng = make_rng(3)
    cents = rng.uniform(0, S, size=(8, 2))
    fast = gaussian_knn_adjacency(cents, k=3, sigma=40.0)
    slow = adjacency_naive([tuple(c) for c in cents], k=3, sigma=40.0)
    np.testing.assert_allclose(fast, slow, atol=1e-6)


def test_adjacency_structure():
    rng = make_rng(4)
    cents = rng.uniform(0, S, size=(20, 2))
    a = gaussian_knn_adjacency(cents, k=5)
    np.testing.assert_array_equal(np.diag(a), np.ones(20))
    np.testing.assert_allclose(a, a.T)
    assert np.all(a >= 0) and np.all(a <= 1)
    # each node keeps at least its own k nearest (union may add more)
    assert np.all((a > 0).sum(axis=1) >= 6)


def test_adjacency_single_node():
    a = gaussian_knn_adjacency(np.array([[10.0, 20.0]]))
    np.testing.assert_array_equal(a, [[1.0]])


def test_adjacency_k_larger_than_graph():
    cents = np.array([[0.0, 0.0], [3.0, 4.0], [6.0, 8.0]])
    a = gaussian_knn_adjacency(cents, k=8)
    assert np.all(a > 0)        # fully connected


def test_adjacency_coincident_points():
    """All-identical centroids give a zero median distance; the bandwidth
    floor keeps weights finite (1 for every kept coincident pair)."""
    cents = np.zeros((4, 2))
    a = gaussian_knn_adjacency(cents, k=2)
    assert np.isfinite(a).all()
    np.testing.assert_allclose(a, a.T)
    np.testing.assert_array_equal(np.diag(a), np.ones(4))
    kept = a[~np.eye(4, dtype=bool)]
    assert set(np.unique(kept)) <= {0.0, 1.0}
    assert (kept == 1.0).sum() >= 2 * 2     # at least k edges, symmetrized


def test_adjacency_rejects_bad_sigma():
    with pytest.raises(DataError):
        gaussian_knn_adjacency(np.zeros((3, 2)), sigma=-1.0)


def test_normalize_matches_naive():
    rng = make_rng(5)
    a = gaussian_knn_adjacency(rng.uniform(0, S, size=(9, 2)), k=3)
    np.testing.assert_allclose(normalize_adjacency(a.astype(np.float64)),
                               degree_normalize_naive(a), atol=1e-12)


def test_normalize_rejects_zero_degree():
    a = np.array([[1.0, 0.0], [0.0, 0.0]])
    with pytest.raises(SingularDegreeError):
        normalize_adjacency(a)
    with pytest.raises(DimensionError):
        normalize_adjacency(np.zeros((2, 3)))


# ---------------------------------------------------------------------------
# graph building
# ---------------------------------------------------------------------------

def test_build_graph_feature_layout():
    inst = InstanceSet("p", [
        Instance(1, (0, 0, 20, 10), (10.0, 5.0), (255.0, 0.0, 127.5)),
        Instance(2, (100, 200, 40, 40), (120.0, 220.0), (0.0, 51.0, 255.0)),
    ])
    g = build_graph(inst)
    assert g.node_features.shape == (2, 5)
    np.testing.assert_allclose(
        g.node_features[0], [1.0, 0.0, 0.5, 10 / 320, 5 / 320], atol=1e-6)
    np.testing.assert_allclose(
        g.node_features[1], [0.0, 0.2, 1.0, 120 / 320, 220 / 320], atol=1e-6)


def test_build_graph_empty_fallback():
    g = build_graph(InstanceSet("p", []), fallback_rgb=(51.0, 102.0, 204.0))
    assert g.num_nodes == 1
    np.testing.assert_allclose(
        g.node_features[0], [0.2, 0.4, 0.8, 0.5, 0.5], atol=1e-6)
    np.testing.assert_array_equal(g.adjacency, [[1.0]])


def test_scene_graph_validation():
    with pytest.raises(DimensionError):
        SceneGraph(np.zeros((2, 4), dtype=np.float32),
                   np.eye(2, dtype=np.float32)).validate()
    with pytest.raises(DataError):
        a = np.eye(2, dtype=np.float32)
        a[0, 1] = 0.5                       # asymmetric
        SceneGraph(np.zeros((2, 5), dtype=np.float32), a).validate()


# ---------------------------------------------------------------------------
# GCSConv and batching
# ---------------------------------------------------------------------------

def _toy_graph(rng, n):
    cents = rng.uniform(0, S, size=(n, 2))
    feats = rng.uniform(0, 1, size=(n, 5)).astype(np.float32)
    a = gaussian_knn_adjacency(cents, k=3)
    return SceneGraph(node_features=feats, adjacency=a)


def test_gcsconv_matches_naive():
    rng = make_rng(6)
    g = _toy_graph(rng, 7)
    a_norm = normalize_adjacency(g.adjacency.astype(np.float64))
    w1 = rng.normal(size=(5, 4))
    w2 = rng.normal(size=(5, 4))
    b = rng.normal(size=4)
    h = g.node_features.astype(np.float64)
    fast = gcsconv_forward(h, a_norm, w1, w2, b)
    slow = gcsconv_naive(h, a_norm, w1, w2, b)
    np.testing.assert_allclose(fast, slow, atol=1e-12)


def test_gcsconv_layer_matches_function():
    rng = make_rng(7)
    g = _toy_graph(rng, 5)
    a_norm = normalize_adjacency(g.adjacency.astype(np.float64))
    store = ParamStore()
    layer = GCSConv(store, "c", 5, 6, make_rng(8), dtype=np.float64)
    h = g.node_features.astype(np.float64)
    np.testing.assert_allclose(
        layer.forward(h, a_norm),
        gcsconv_forward(h, a_norm, layer.w1.value, layer.w2.value, layer.b.value),
    )


def test_segment_mean_matches_naive():
    rng = make_rng(9)
    h = rng.normal(size=(10, 3))
    segments = np.array([0, 0, 0, 1, 1, 2, 2, 2, 2, 3])
    counts = np.array([3, 2, 4, 1])
    np.testing.assert_allclose(segment_mean(h, segments, counts),
                               segment_mean_naive(h, segments, 4), atol=1e-12)


def test_batch_graphs_block_structure():
    rng = make_rng(10)
    graphs = [_toy_graph(rng, n) for n in (3, 5, 2)]
    batch = batch_graphs(graphs)
    assert batch.node_features.shape == (10, 5)
    np.testing.assert_array_equal(batch.counts, [3, 5, 2])
    np.testing.assert_array_equal(batch.segments,
                                  [0, 0, 0, 1, 1, 1, 1, 1, 2, 2])
    dense = batch.a_norm.toarray()
    # off-diagonal blocks stay exactly zero
    assert not dense[:3, 3:].any() and not dense[3:, :3].any()
    np.testing.assert_allclose(
        dense[3:8, 3:8],
        normalize_adjacency(graphs[1].adjacency.astype(np.float64)),
        atol=1e-6,
    )


def test_batch_graphs_empty_rejected():
    with pytest.raises(DataError):
        batch_graphs([])


def test_model_batched_forward_equals_single():
    """Stacking graphs into one batch must not change per-graph outputs."""
    rng = make_rng(11)
    model = GcnModel(make_rng(12), num_classes=6, hidden=8)
    graphs = [_toy_graph(rng, n) for n in (4, 7, 3)]
    together = model.forward(graphs)
    for i, g in enumerate(graphs):
        alone = model.forward([g])
        np.testing.assert_allclose(together[i], alone[0], atol=1e-5)


def test_model_output_is_distribution():
    rng = make_rng(13)
    model = GcnModel(make_rng(14), num_classes=17)
    probs = model.forward([_toy_graph(rng, 6)])
    assert probs.shape == (1, 17)
    np.testing.assert_allclose(probs.sum(), 1.0, atol=1e-5)
    single = gcn_forward(_toy_graph(make_rng(11), 6), model)
    assert single.shape == (17,)


def test_model_meta_and_buffers():
    model = GcnModel(make_rng(15), num_classes=4, hidden=16)
    assert model.meta() == {"kind": "gcn", "num_classes": 4, "hidden": 16}
    assert model.buffers() == {}
    # 3 convs x (w1, w2, b) + head (w, b)
    assert len(model.store) == 11
