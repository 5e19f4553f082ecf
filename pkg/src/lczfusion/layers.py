"""Shared neural layers with explicit forward and backward passes.

Everything operates on plain numpy arrays (float32 for training, float64 when
the gradient checker asks for it).  Layer classes own their parameters through
a :class:`~lczfusion.params.ParamStore` and cache whatever the backward pass
needs; the free functions underneath them are the actual math and are what the
finite-difference checker exercises.
"""

from __future__ import annotations

import numpy as np

from .errors import DataError, DegenerateBatchError, DimensionError
from .params import ParamStore

BN_MOMENTUM = 0.9
BN_EPS = 1e-5
CE_PROB_FLOOR = 1e-12


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int,
               dtype=np.float32) -> np.ndarray:
    limit = np.sqrt(6.0 / max(1, fan_in))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


# ---------------------------------------------------------------------------
# dense
# ---------------------------------------------------------------------------

def dense_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``x @ w + b`` for ``x`` of shape (B, F_in), ``w`` (F_in, F_out)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(
            f"dense: input {x.shape} does not conform with weight {w.shape}"
        )
    if b.shape != (w.shape[1],):
        raise DimensionError(f"dense: bias {b.shape} does not match weight {w.shape}")
    return x @ w + b


def dense_backward(dout: np.ndarray, x: np.ndarray, w: np.ndarray):
    dx = dout @ w.T
    dw = x.T @ dout
    db = dout.sum(axis=0)
    return dx, dw, db


class Dense:
    def __init__(self, store: ParamStore, name: str, f_in: int, f_out: int,
                 rng: np.random.Generator, dtype=np.float32) -> None:
        self.w = store.add(f"{name}.w", he_uniform(rng, (f_in, f_out), f_in, dtype))
        self.b = store.add(f"{name}.b", np.zeros(f_out, dtype=dtype))
        self._x: np.ndarray | None = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        return dense_forward(x, self.w.value, self.b.value)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        dx, dw, db = dense_backward(dout, self._x, self.w.value)
        self.w.accumulate_grad(dw)
        self.b.accumulate_grad(db)
        return dx


# ---------------------------------------------------------------------------
# relu / softmax / cross-entropy
# ---------------------------------------------------------------------------

def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(dout: np.ndarray, x: np.ndarray) -> np.ndarray:
    return dout * (x > 0)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max-subtraction; rows sum to 1 for finite input."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(dout: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. logits given the cached softmax output."""
    inner = (dout * probs).sum(axis=-1, keepdims=True)
    return probs * (dout - inner)


def cross_entropy(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean negative log-probability of the true class over the batch.

    Probabilities are floored at 1e-12 before the log so a confidently wrong
    prediction yields a large but finite loss.
    """
    labels = np.asarray(labels)
    if labels.ndim != 1 or probs.ndim != 2 or labels.shape[0] != probs.shape[0]:
        raise DimensionError(
            f"cross_entropy: probs {probs.shape} vs labels {labels.shape}"
        )
    if labels.size and (labels.min() < 0 or labels.max() >= probs.shape[1]):
        raise DataError(
            f"cross_entropy: label outside [0, {probs.shape[1]}): "
            f"range [{labels.min()}, {labels.max()}]"
        )
    picked = probs[np.arange(probs.shape[0]), labels]
    return float(np.mean(-np.log(np.maximum(picked, CE_PROB_FLOOR))))


def cross_entropy_backward(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Gradient of :func:`cross_entropy` w.r.t. ``probs``.

    Entries the floor clamped (true-class probability below 1e-12) get zero
    gradient, matching the flat region of the clamp.
    """
    labels = np.asarray(labels)
    batch = probs.shape[0]
    picked = probs[np.arange(batch), labels]
    dpicked = np.where(picked > CE_PROB_FLOOR, -1.0 / (batch * np.maximum(picked, CE_PROB_FLOOR)), 0.0)
    dprobs = np.zeros_like(probs)
    dprobs[np.arange(batch), labels] = dpicked.astype(probs.dtype)
    return dprobs


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

def batchnorm_forward(x, gamma, beta, running_mean, running_var, mode,
                      momentum=BN_MOMENTUM, eps=BN_EPS, update_running=True):
    """Normalize over every axis except the trailing channel axis.

    Train mode uses batch statistics and (optionally) folds them into the
    running estimates with the given momentum; infer mode uses the running
    estimates.  Returns ``(out, cache)`` where cache feeds backward.
    """
    if x.shape[-1] != gamma.shape[0]:
        raise DimensionError(
            f"batchnorm: channels {x.shape[-1]} vs gamma {gamma.shape}"
        )
    axes = tuple(range(x.ndim - 1))
    if mode == "train":
        if x.shape[0] < 2:
            raise DegenerateBatchError(
                "batchnorm train mode needs a batch of at least 2"
            )
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        if update_running:
            running_mean *= momentum
            running_mean += (1.0 - momentum) * mean
            running_var *= momentum
            running_var += (1.0 - momentum) * var
    elif mode == "infer":
        mean = running_mean
        var = running_var
    else:
        raise DataError(f"batchnorm: unknown mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    out = gamma * xhat + beta
    cache = (xhat, gamma, inv_std, mode)
    return out.astype(x.dtype, copy=False), cache


def batchnorm_backward(dout, cache):
    """Gradients w.r.t. input, gamma and beta from the cached forward."""
    xhat, gamma, inv_std, mode = cache
    axes = tuple(range(dout.ndim - 1))
    dbeta = dout.sum(axis=axes)
    dgamma = (dout * xhat).sum(axis=axes)
    dxhat = dout * gamma
    if mode == "infer":
        return dxhat * inv_std, dgamma, dbeta
    m = dout.size // dout.shape[-1]
    dx = (inv_std / m) * (
        m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes)
    )
    return dx.astype(dout.dtype, copy=False), dgamma, dbeta


class BatchNorm:
    """Channel-wise batch normalization with running statistics."""

    def __init__(self, store: ParamStore, name: str, channels: int,
                 momentum: float = BN_MOMENTUM, eps: float = BN_EPS,
                 dtype=np.float32) -> None:
        self.gamma = store.add(f"{name}.gamma", np.ones(channels, dtype=dtype))
        self.beta = store.add(f"{name}.beta", np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps
        self._cache = None

    def forward(self, x: np.ndarray, mode: str) -> np.ndarray:
        out, self._cache = batchnorm_forward(
            x, self.gamma.value, self.beta.value,
            self.running_mean, self.running_var, mode,
            momentum=self.momentum, eps=self.eps,
        )
        return out

    def backward(self, dout: np.ndarray) -> np.ndarray:
        dx, dgamma, dbeta = batchnorm_backward(dout, self._cache)
        self.gamma.accumulate_grad(dgamma)
        self.beta.accumulate_grad(dbeta)
        return dx

    def buffers(self) -> dict[str, np.ndarray]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}
