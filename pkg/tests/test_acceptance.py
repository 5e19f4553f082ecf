"""Acceptance gate: ten numbered end-to-end checks with pinned tolerances.

Each check prints (and records for the terminal summary) exactly one line:

    ACCEPTANCE <n> <PASS|FAIL> <name>: <measured values>

The checks cover gradient correctness, oracle agreement for the convolution
and metric paths, fusion identities, graph invariances, learnability of the
three synthetic tasks, byte-level training determinism and the split
contracts.  Tolerances and budgets are module constants; nothing here is
tuned at runtime.
"""

import os
import shutil
import tempfile
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from oracles import conv3d_naive, kappa_naive, per_class_naive

from lczfusion.cli import EXIT_OK, main
from lczfusion.conv3d import conv3d_forward
from lczfusion.dataio import SampleRecord, load_dataset, split, write_manifest
from lczfusion.fusion import alpha_grid, classify, sweep_alpha, weighted_fuse
from lczfusion.gradcheck import FD_SEEDS, FD_THRESHOLD, run_suite
from lczfusion.graph import GcnModel, SceneGraph, gaussian_knn_adjacency
from lczfusion.metrics import compute_metrics
from lczfusion.rng import derive_rng
from lczfusion.synth import SynthConfig, synth_generate
from lczfusion.train import TrainConfig, evaluate, predict, train_stream

# pinned tolerances and budgets
GRAD_TOL = 1e-4            # max relative error, central differences, float64
GRAD_MIN_SEEDS = 10
GRAD_BUDGET_S = 120.0
CONV_TOL = 1e-5
CONV_MIN_COMBOS = 10
METRIC_TOL = 1e-12
FUSE_SUM_TOL = 1e-9
PERM_TOL = 1e-5
RIGID_TOL = 1e-9
SPECTRAL_MIN_ACC = 0.95
SPECTRAL_MAX_EPOCHS = 30
SPECTRAL_BUDGET_S = 900.0
LAYOUT_MIN_ACC = 0.80
LAYOUT_MAX_EPOCHS = 50
SINGLE_STREAM_MAX_ACC = 0.60
FUSED_MIN_ACC = 0.90
SPLIT_SLACK = 1.0          # per-class deviation from exact 7:2:1 shares

SMALL_WIDTHS = (4, 4, 8, 16)


def _verdict(num: int, name: str, ok: bool, detail: str) -> None:
    line = f"ACCEPTANCE {num:2d} {'PASS' if ok else 'FAIL'} {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def _synth_split(task, classes, per_class, seed, request):
    base = tempfile.mkdtemp(prefix=f"accept_{task}_")
    request.addfinalizer(lambda: shutil.rmtree(base, ignore_errors=True))
    cfg = SynthConfig(task=task, classes=classes, samples_per_class=per_class,
                      noise_sigma=0.05, seed=seed)
    records = synth_generate(cfg, base)
    records = split(records, "sample_pool", rng=derive_rng(seed, "split"))
    manifest = os.path.join(base, "manifest.jsonl")
    write_manifest(records, manifest)
    return manifest


@pytest.fixture(scope="module")
def spectral_manifest(request):
    return _synth_split("spectral", 4, 500, 42, request)


@pytest.fixture(scope="module")
def layout_manifest(request):
    return _synth_split("layout", 3, 500, 43, request)


@pytest.fixture(scope="module")
def product_manifest(request):
    return _synth_split("product", 4, 150, 44, request)


# -------------------------------------------------------------- criterion 1

def test_01_gradient_suite():
    t0 = time.perf_counter()
    results = run_suite()
    wall = time.perf_counter() - t0
    names = {r.name for r in results}
    required = {"dense", "softmax_ce", "batchnorm", "conv3d",
                "gcsconv", "gcn_model", "resnet_model"}
    worst = max(r.max_rel_err for r in results)
    ok = (required <= names
          and all(r.passed for r in results)
          and worst < GRAD_TOL
          and FD_THRESHOLD == GRAD_TOL
          and len(FD_SEEDS) >= GRAD_MIN_SEEDS
          and wall < GRAD_BUDGET_S)
    _verdict(1, "gradient-suite", ok,
             f"{len(results)} checks, {len(FD_SEEDS)} seeds, "
             f"worst rel err {worst:.3e} (tol {GRAD_TOL:g}), "
             f"{wall:.1f}s (budget {GRAD_BUDGET_S:g}s)")


# -------------------------------------------------------------- criterion 2

def test_02_conv3d_oracle():
    rng = np.random.default_rng(20)
    worst = 0.0
    combos = 0
    for i in range(12):
        d, h, w = rng.integers(3, 7, size=3)
        c_in, c_out = rng.integers(1, 4, size=2)
        kd, kh, kw = rng.integers(1, 4, size=3)
        stride = tuple(int(s) for s in rng.integers(1, 3, size=3))
        padding = "same" if i % 2 == 0 else "valid"
        x = rng.standard_normal((2, d, h, w, c_in))
        kernel = rng.standard_normal((kd, kh, kw, c_in, c_out))
        bias = rng.standard_normal(c_out)
        got = conv3d_forward(x, kernel, bias, stride=stride, padding=padding)
        want = conv3d_naive(x, kernel, bias, stride=stride, padding=padding)
        worst = max(worst, float(np.abs(got - want).max()))
        combos += 1
    ok = combos >= CONV_MIN_COMBOS and worst < CONV_TOL
    _verdict(2, "conv3d-oracle", ok,
             f"{combos} shape/stride/padding combos, "
             f"worst abs diff {worst:.3e} (tol {CONV_TOL:g})")


# -------------------------------------------------------------- criterion 3

def _labels_from_cm(cm: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    k = cm.shape[0]
    true = np.repeat(np.arange(k), cm.sum(axis=1))
    pred = np.concatenate([np.repeat(np.arange(k), cm[i]) for i in range(k)])
    return true, pred


def test_03_metric_oracle():
    rng = np.random.default_rng(21)
    worst = 0.0

    def gap(a, b):
        if a is None and b is None:
            return 0.0
        if a is None or b is None:
            return np.inf
        return abs(a - b)

    for _ in range(20):
        cm = rng.integers(0, 31, size=(17, 17))
        cm[0, 0] += 1        # guard against an all-zero draw
        true, pred = _labels_from_cm(cm)
        rep = compute_metrics(true, pred, 17)
        assert np.array_equal(rep.confusion, cm)
        total = cm.sum()
        worst = max(worst, gap(rep.overall_accuracy,
                               np.trace(cm) / total))
        worst = max(worst, gap(rep.kappa, kappa_naive(cm)))
        naive = per_class_naive(cm)
        for got, want in zip(rep.per_class, naive):
            for key in ("precision", "recall", "f1"):
                worst = max(worst, gap(got[key], want[key]))
        f1s = [s["f1"] for s in naive if s["f1"] is not None]
        worst = max(worst, gap(rep.avg_f1,
                               sum(f1s) / len(f1s) if f1s else None))

    hand = np.array([[40, 10], [20, 30]])
    true, pred = _labels_from_cm(hand)
    hand_kappa = compute_metrics(true, pred, 2).kappa
    hand_gap = abs(hand_kappa - 0.4)
    ok = worst < METRIC_TOL and hand_gap < METRIC_TOL
    _verdict(3, "metric-oracle", ok,
             f"20 random 17x17 matrices, worst gap {worst:.3e} "
             f"(tol {METRIC_TOL:g}); hand case kappa={hand_kappa!r} "
             f"(|gap| {hand_gap:.1e})")


# -------------------------------------------------------------- criterion 4

def test_04_fusion_identities():
    rng = np.random.default_rng(22)
    a = rng.random((100, 17)) + 1e-6
    b = rng.random((100, 17)) + 1e-6
    a /= a.sum(axis=1, keepdims=True)
    b /= b.sum(axis=1, keepdims=True)
    lo = weighted_fuse(a, b, 0.0)
    hi = weighted_fuse(a, b, 1.0)
    endpoints_ok = (np.array_equal(lo, b) and np.array_equal(hi, a)
                    and lo is not b and hi is not a)
    worst_sum = 0.0
    for alpha in alpha_grid(0.05):
        fused = weighted_fuse(a, b, float(alpha))
        worst_sum = max(worst_sum,
                        float(np.abs(fused.sum(axis=1) - 1.0).max()))
    ok = endpoints_ok and worst_sum < FUSE_SUM_TOL
    _verdict(4, "fusion-identities", ok,
             f"100 simplex pairs, endpoints bitwise={endpoints_ok}, "
             f"worst row-sum gap {worst_sum:.3e} (tol {FUSE_SUM_TOL:g})")


# -------------------------------------------------------------- criterion 5

def _random_scene_graph(rng, n):
    centroids = rng.random((n, 2)) * 320.0
    colors = rng.random((n, 3))
    feats = np.concatenate([colors, centroids / 320.0], axis=1)
    adj = gaussian_knn_adjacency(centroids)
    return SceneGraph(feats, adj)


def test_05_graph_invariances():
    rng = np.random.default_rng(23)
    model = GcnModel(derive_rng(0, "accept:perm"), num_classes=5, hidden=16,
                     dtype=np.float64)
    worst_perm = 0.0
    for _ in range(50):
        g = _random_scene_graph(rng, int(rng.integers(3, 21)))
        perm = rng.permutation(g.num_nodes)
        gp = SceneGraph(g.node_features[perm],
                        g.adjacency[np.ix_(perm, perm)])
        out = model.forward([g], mode="infer")
        outp = model.forward([gp], mode="infer")
        worst_perm = max(worst_perm, float(np.abs(out - outp).max()))

    worst_rigid = 0.0
    for _ in range(20):
        pts = rng.random((int(rng.integers(5, 41)), 2)) * 320.0
        theta = rng.uniform(0, 2 * np.pi)
        rot = np.array([[np.cos(theta), -np.sin(theta)],
                        [np.sin(theta), np.cos(theta)]])
        moved = pts @ rot.T + rng.uniform(-50, 50, size=2)
        a1 = gaussian_knn_adjacency(pts)
        a2 = gaussian_knn_adjacency(moved)
        worst_rigid = max(worst_rigid, float(np.abs(a1 - a2).max()))

    ok = worst_perm < PERM_TOL and worst_rigid < RIGID_TOL
    _verdict(5, "graph-invariances", ok,
             f"permutation worst {worst_perm:.3e} (tol {PERM_TOL:g}, "
             f"50 graphs); rigid-motion worst {worst_rigid:.3e} "
             f"(tol {RIGID_TOL:g}, 20 sets)")


# -------------------------------------------------------------- criterion 6

def test_06_spectral_learnability(spectral_manifest):
    t0 = time.perf_counter()
    cfg = TrainConfig(batch_size=64, max_epochs=8, lr=0.01, seed=0,
                      widths=SMALL_WIDTHS, early_stop_patience=3,
                      lr_patience=2)
    model, log = train_stream("sentinel", spectral_manifest, cfg)
    test = load_dataset(spectral_manifest, stream="sentinel",
                        splits=("test",))
    _, oa, _ = evaluate(model, test, cfg.batch_size)
    wall = time.perf_counter() - t0
    epochs = len(log.epochs)
    ok = (oa >= SPECTRAL_MIN_ACC and epochs <= SPECTRAL_MAX_EPOCHS
          and wall < SPECTRAL_BUDGET_S)
    _verdict(6, "spectral-learnability", ok,
             f"test acc {oa:.4f} (need >= {SPECTRAL_MIN_ACC}) after "
             f"{epochs} epochs (cap {SPECTRAL_MAX_EPOCHS}), "
             f"{wall:.0f}s (budget {SPECTRAL_BUDGET_S:g}s), "
             f"{len(test)} test samples")


# -------------------------------------------------------------- criterion 7

def test_07_layout_learnability(layout_manifest):
    cfg = TrainConfig(batch_size=64, max_epochs=50, lr=0.01, seed=0,
                      hidden=32, early_stop_patience=6, lr_patience=3)
    model, log = train_stream("google", layout_manifest, cfg)
    test = load_dataset(layout_manifest, stream="google", splits=("test",))
    _, oa, _ = evaluate(model, test, cfg.batch_size)
    epochs = len(log.epochs)
    ok = oa >= LAYOUT_MIN_ACC and epochs <= LAYOUT_MAX_EPOCHS
    _verdict(7, "layout-learnability", ok,
             f"test acc {oa:.4f} (need >= {LAYOUT_MIN_ACC}) after "
             f"{epochs} epochs (cap {LAYOUT_MAX_EPOCHS}), "
             f"{len(test)} test samples")


# -------------------------------------------------------------- criterion 8

def test_08_fusion_synergy(product_manifest):
    cfg_g = TrainConfig(batch_size=64, max_epochs=40, lr=0.01, seed=0,
                        hidden=32, early_stop_patience=6, lr_patience=3)
    model_g, _ = train_stream("google", product_manifest, cfg_g)
    cfg_s = TrainConfig(batch_size=64, max_epochs=6, lr=0.01, seed=0,
                        widths=SMALL_WIDTHS, early_stop_patience=3,
                        lr_patience=2)
    model_s, _ = train_stream("sentinel", product_manifest, cfg_s)

    test = load_dataset(product_manifest, stream=None, splits=("test",))
    labels = np.array([s.label for s in test])
    probs_g = predict(model_g, test, 64)
    probs_s = predict(model_s, test, 64)
    acc_g = float((classify(probs_g) == labels).mean())
    acc_s = float((classify(probs_s) == labels).mean())
    acc_f = float((classify(weighted_fuse(probs_g, probs_s, 0.5))
                   == labels).mean())

    rows = sweep_alpha(probs_g, probs_s, labels, step=0.05, num_classes=4)
    oas = [row["oa"] for row in rows]
    peak = int(np.argmax(oas))
    unimodal = (all(oas[i + 1] >= oas[i] - 1e-9 for i in range(peak))
                and all(oas[i + 1] <= oas[i] + 1e-9
                        for i in range(peak, len(oas) - 1)))

    ok = (acc_g <= SINGLE_STREAM_MAX_ACC and acc_s <= SINGLE_STREAM_MAX_ACC
          and acc_f >= FUSED_MIN_ACC and unimodal)
    _verdict(8, "fusion-synergy", ok,
             f"google {acc_g:.4f} / sentinel {acc_s:.4f} "
             f"(each <= {SINGLE_STREAM_MAX_ACC}), fused@0.5 {acc_f:.4f} "
             f"(need >= {FUSED_MIN_ACC}), sweep unimodal-or-flat={unimodal}")


# -------------------------------------------------------------- criterion 9

def test_09_training_determinism(layout_manifest, tmp_path):
    blobs = []
    for name in ("first", "second"):
        out = tmp_path / name
        code = main(["train", "--stream", "google", "--data",
                     layout_manifest, "--out", str(out), "--seed", "7",
                     "--max-epochs", "3", "--hidden", "8",
                     "--batch-size", "16", "--lr", "0.01",
                     "--widths", "4,4,6,8"])
        assert code == EXIT_OK
        blobs.append(((out / "google.ckpt").read_bytes(),
                      (out / "trainlog.csv").read_bytes()))
    ckpt_same = blobs[0][0] == blobs[1][0]
    log_same = blobs[0][1] == blobs[1][1]
    ok = ckpt_same and log_same
    _verdict(9, "training-determinism", ok,
             f"seed 7 twice: checkpoint bytes identical={ckpt_same} "
             f"({len(blobs[0][0])} bytes), trainlog identical={log_same}")


# ------------------------------------------------------------- criterion 10

def _pool_records(rng, seed):
    records = []
    for cls in range(int(rng.integers(3, 6))):
        n = int(rng.integers(30, 61))
        i = 0
        poly = 0
        while i < n:
            take = min(int(rng.integers(2, 7)), n - i)
            for _ in range(take):
                records.append(SampleRecord(
                    sample_id=f"s{seed}_{cls}_{i}", city="syn",
                    lcz_class=cls, polygon_id=f"p{seed}_{cls}_{poly}",
                    sentinel_path="a.lczt", google_path="b.lczt",
                    mask_path="c.lczt"))
                i += 1
            poly += 1
    return records


def test_10_split_contracts():
    worst_dev = 0.0
    broken_polygons = 0
    for seed in range(10):
        rng = np.random.default_rng(1000 + seed)
        records = _pool_records(rng, seed)

        assigned = split(records, "sample_pool",
                         rng=derive_rng(seed, "accept:sp"))
        for cls in {r.lcz_class for r in assigned}:
            mine = [r for r in assigned if r.lcz_class == cls]
            n = len(mine)
            for part, share in (("train", 0.7), ("test", 0.2), ("val", 0.1)):
                got = sum(1 for r in mine if r.split == part)
                worst_dev = max(worst_dev, abs(got - share * n))

        assigned = split(records, "polygon_pool",
                         rng=derive_rng(seed, "accept:pp"))
        by_poly = {}
        for r in assigned:
            by_poly.setdefault(r.polygon_id, set()).add(r.split)
        broken_polygons += sum(1 for parts in by_poly.values()
                               if len(parts) != 1)

    ok = worst_dev <= SPLIT_SLACK + 1e-9 and broken_polygons == 0
    _verdict(10, "split-contracts", ok,
             f"10 seeded pools: sample_pool worst per-class deviation "
             f"{worst_dev:.2f} (slack {SPLIT_SLACK:g}); polygons split "
             f"across partitions: {broken_polygons}")
