"""Finite-difference verification of every analytic gradient path.

All checks run in float64 with central differences.  Tensors are sampled at a
deterministic subset of entries so whole-model checks stay fast; shapes are
deliberately tiny.  A check passes when the worst relative error over all
sampled entries stays under the threshold.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .conv3d import conv3d_backward, conv3d_forward, _conv3d_forward_ctx
from .graph import GCSConv, GcnModel, SceneGraph, gaussian_knn_adjacency
from .layers import (batchnorm_backward, batchnorm_forward, cross_entropy,
                     cross_entropy_backward, dense_backward, dense_forward,
                     relu_backward, relu_forward, softmax, softmax_backward)
from .params import ParamStore
from .resnet3d import ResNet3DModel
from .rng import derive_rng

FD_STEP = 1e-5
FD_THRESHOLD = 1e-4
FD_SEEDS = tuple(range(10))
REL_ERR_FLOOR = 1e-6
MAX_ENTRIES_PER_TENSOR = 15


def rel_error(analytic: np.ndarray, numeric: np.ndarray,
              floor: float = REL_ERR_FLOOR) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    scale = np.maximum(np.abs(a) + np.abs(n), floor)
    return float(np.max(np.abs(a - n) / scale))


def sampled_numerical_grad(f, x: np.ndarray, indices: np.ndarray,
                           step: float = FD_STEP) -> np.ndarray:
    """Central differences of scalar f() at the given flat indices of x.

    x is perturbed in place and restored; f must read x through the same
    array object.
    """
    flat = x.reshape(-1)
    out = np.empty(len(indices), dtype=np.float64)
    for j, i in enumerate(indices):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        out[j] = (fp - fm) / (2.0 * step)
    return out


def _sample_indices(rng: np.random.Generator, size: int,
                    limit: int = MAX_ENTRIES_PER_TENSOR) -> np.ndarray:
    if size <= limit:
        return np.arange(size)
    return rng.choice(size, size=limit, replace=False)


def _compare(f, x: np.ndarray, analytic: np.ndarray,
             rng: np.random.Generator, step: float) -> float:
    idx = _sample_indices(rng, x.size)
    numeric = sampled_numerical_grad(f, x, idx, step)
    return rel_error(analytic.reshape(-1)[idx], numeric)


def _check_store(store: ParamStore, pure_loss, rng: np.random.Generator,
                 step: float) -> float:
    worst = 0.0
    for name, param in store.items():
        if param.grad is None:
            raise AssertionError(f"no gradient populated for {name}")
        worst = max(worst, _compare(pure_loss, param.value, param.grad, rng, step))
    return worst


# ---------------------------------------------------------------------------
# individual checks; each returns its worst relative error
# ---------------------------------------------------------------------------

def check_dense(seed: int, step: float = FD_STEP) -> float:
    rng = derive_rng(seed, "gradcheck:dense")
    x = rng.normal(size=(4, 6))
    w = rng.normal(size=(6, 3)) * 0.5
    b = rng.normal(size=3) * 0.1
    r = rng.normal(size=(4, 3))
    loss = lambda: float((dense_forward(x, w, b) * r).sum())
    dx, dw, db = dense_backward(r, x, w)
    worst = _compare(loss, x, dx, rng, step)
    worst = max(worst, _compare(loss, w, dw, rng, step))
    return max(worst, _compare(loss, b, db, rng, step))


def check_relu(seed: int, step: float = FD_STEP) -> float:
    rng = derive_rng(seed, "gradcheck:relu")
    x = rng.normal(size=(5, 7))
    x += 0.2 * np.sign(x)          # keep preactivations clear of the kink
    r = rng.normal(size=x.shape)
    loss = lambda: float((relu_forward(x) * r).sum())
    dx = relu_backward(r, x)
    return _compare(loss, x, dx, rng, step)


def check_softmax_ce(seed: int, step: float = FD_STEP) -> float:
    rng = derive_rng(seed, "gradcheck:softmax_ce")
    logits = rng.normal(size=(6, 5))
    labels = rng.integers(0, 5, size=6)
    loss = lambda: cross_entropy(softmax(logits), labels)
    probs = softmax(logits)
    dlogits = softmax_backward(cross_entropy_backward(probs, labels), probs)
    return _compare(loss, logits, dlogits, rng, step)


def check_batchnorm(seed: int, step: float = FD_STEP) -> float:
    rng = derive_rng(seed, "gradcheck:batchnorm")
    x = rng.normal(size=(8, 4))
    gamma = 1.0 + 0.2 * rng.normal(size=4)
    beta = 0.1 * rng.normal(size=4)
    r = rng.normal(size=x.shape)
    run_m, run_v = np.zeros(4), np.ones(4)

    def loss():
        out, _ = batchnorm_forward(x, gamma, beta, run_m, run_v, "train",
                                   update_running=False)
        return float((out * r).sum())

    out, cache = batchnorm_forward(x, gamma, beta, run_m, run_v, "train",
                                   update_running=False)
    dx, dgamma, dbeta = batchnorm_backward(r, cache)
    worst = _compare(loss, x, dx, rng, step)
    worst = max(worst, _compare(loss, gamma, dgamma, rng, step))
    return max(worst, _compare(loss, beta, dbeta, rng, step))


def check_conv3d(seed: int, step: float = FD_STEP) -> float:
    rng = derive_rng(seed, "gradcheck:conv3d")
    worst = 0.0
    for c_in, c_out, ksize, stride, padding in [
        (1, 2, 3, 1, "same"),
        (2, 2, 3, 2, "same"),
        (2, 1, 2, 1, "valid"),
    ]:
        x = rng.normal(size=(2, 4, 4, 3, c_in))
        kernel = rng.normal(size=(ksize, ksize, ksize, c_in, c_out)) * 0.3
        bias = rng.normal(size=c_out) * 0.1
        out, ctx = _conv3d_forward_ctx(x, kernel, bias,
                                       (stride,) * 3, padding)
        r = rng.normal(size=out.shape)
        loss = lambda: float(
            (conv3d_forward(x, kernel, bias, stride, padding) * r).sum()
        )
        dx, dk, db = conv3d_backward(r, ctx)
        worst = max(worst, _compare(loss, x, dx, rng, step))
        worst = max(worst, _compare(loss, kernel, dk, rng, step))
        worst = max(worst, _compare(loss, bias, db, rng, step))
    return worst


def _random_graph(rng: np.random.Generator, n_nodes: int,
                  features: int = 5) -> SceneGraph:
    centroids = rng.uniform(20, 300, size=(n_nodes, 2))
    x = rng.uniform(0.0, 1.0, size=(n_nodes, features)).astype(np.float64)
    a = gaussian_knn_adjacency(centroids, k=min(3, n_nodes - 1) or 1)
    return SceneGraph(node_features=x, adjacency=a.astype(np.float64))


def check_gcsconv(seed: int, step: float = FD_STEP) -> float:
    from .graph import normalize_adjacency
    for attempt in range(20):
        rng = derive_rng(seed, f"gradcheck:gcsconv:{attempt}")
        g = _random_graph(rng, 5)
        a_norm = normalize_adjacency(g.adjacency)
        store = ParamStore()
        layer = GCSConv(store, "gcs", 5, 3, rng, dtype=np.float64)
        h = g.node_features + 0.05
        layer.forward(h, a_norm)
        if float(np.abs(layer._cache[2]).min()) > 100 * FD_STEP:
            break
    r = rng.normal(size=(5, 3))
    loss = lambda: float((gcsconv_eval(h, a_norm, layer) * r).sum())

    def gcsconv_eval(hh, aa, ly):
        return relu_forward(aa @ hh @ ly.w1.value + hh @ ly.w2.value + ly.b.value)

    store.zero_grads()
    layer.forward(h, a_norm)
    dh = layer.backward(r)
    worst = _compare(loss, h, dh, rng, step)
    return max(worst, _check_store(store, loss, rng, step))


def _gcn_kink_distance(model: GcnModel) -> float:
    """Smallest |preactivation| seen by any ReLU in the cached forward."""
    return min(float(np.abs(conv._cache[2]).min()) for conv in model.convs)


def _resnet_kink_distance(model: ResNet3DModel) -> float:
    vals = [float(np.abs(model._cache[0]).min())]
    for block in model.blocks:
        y, pre = block._cache
        vals.append(float(np.abs(y).min()))
        vals.append(float(np.abs(pre).min()))
    return min(vals)


# Finite differences at a ReLU kink measure the average of the two one-sided
# slopes, not the gradient, so probe data is redrawn (deterministically) until
# every preactivation clears the kink by a margin much larger than the step.
KINK_MARGIN = 100 * FD_STEP


def check_gcn_model(seed: int, step: float = FD_STEP) -> float:
    for attempt in range(20):
        rng = derive_rng(seed, f"gradcheck:gcn_model:{attempt}")
        model = GcnModel(rng, num_classes=4, hidden=6, dtype=np.float64)
        graphs = [_random_graph(rng, int(n)) for n in rng.integers(2, 6, size=3)]
        labels = rng.integers(0, 4, size=3)
        model.forward(graphs, mode="train")
        if _gcn_kink_distance(model) > KINK_MARGIN:
            break
    pure = lambda: cross_entropy(model.forward(graphs, mode="train"), labels)
    model.store.zero_grads()
    model.loss_and_grads(graphs, labels)
    return _check_store(model.store, pure, rng, step)


def check_resnet_model(seed: int, step: float = FD_STEP) -> float:
    for attempt in range(20):
        rng = derive_rng(seed, f"gradcheck:resnet_model:{attempt}")
        model = ResNet3DModel(rng, num_classes=3, widths=(2, 2, 3, 4),
                              dtype=np.float64)
        cubes = rng.uniform(0.0, 1.0, size=(2, 5, 5, 4))
        labels = rng.integers(0, 3, size=2)
        model.forward(cubes, mode="train")
        if _resnet_kink_distance(model) > KINK_MARGIN:
            break
    pure = lambda: cross_entropy(model.forward(cubes, mode="train"), labels)
    model.store.zero_grads()
    model.loss_and_grads(cubes, labels)
    return _check_store(model.store, pure, rng, step)


CHECKS = {
    "dense": check_dense,
    "relu": check_relu,
    "softmax_ce": check_softmax_ce,
    "batchnorm": check_batchnorm,
    "conv3d": check_conv3d,
    "gcsconv": check_gcsconv,
    "gcn_model": check_gcn_model,
    "resnet_model": check_resnet_model,
}


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    threshold: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.threshold


def run_suite(names=None, seeds=FD_SEEDS, step: float = FD_STEP,
              threshold: float = FD_THRESHOLD) -> list[CheckResult]:
    results = []
    for name in names or CHECKS:
        fn = CHECKS[name]
        start = time.perf_counter()
        worst = max(fn(seed, step) for seed in seeds)
        results.append(CheckResult(
            name=name, max_rel_err=worst, threshold=threshold,
            seconds=time.perf_counter() - start,
        ))
    return results
