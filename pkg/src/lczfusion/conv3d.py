"""3D convolution over spatial-spectral volumes.

Layout: inputs are (batch, x, y, z, channels_in); kernels are
(kx, ky, kz, channels_in, channels_out).  The value at an output position is
the triple sum over kernel offsets and input channels of
``kernel[h, w, c] * input[x*s + h, y*s + w, z*s + c]`` plus a per-channel
bias -- correlation indexing, no kernel flip.  Activation is applied by the
caller.

The inner loop runs one matmul per kernel offset against a strided slice of
the padded input, which keeps peak memory at one input-sized copy instead of
an im2col buffer ``kx*ky*kz`` times larger.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError
from .layers import he_uniform
from .params import ParamStore

_Triple = tuple[int, int, int]


def _as_triple(v, name: str) -> _Triple:
    if isinstance(v, int):
        return (v, v, v)
    t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise DimensionError(f"{name} must be an int or a length-3 tuple, got {v!r}")
    return t


def _resolve_padding(padding, in_dims: _Triple, kernel_dims: _Triple,
                     stride: _Triple) -> tuple[tuple[int, int], ...]:
    """Per-axis (before, after) padding.

    "same" follows the ceil(in/stride) output-size convention with any odd
    padding going after; "valid" and numeric paddings are symmetric.
    """
    if padding == "same":
        pads = []
        for n, k, s in zip(in_dims, kernel_dims, stride):
            out = -(-n // s)
            total = max((out - 1) * s + k - n, 0)
            pads.append((total // 2, total - total // 2))
        return tuple(pads)
    if padding == "valid":
        padding = 0
    p = _as_triple(padding, "padding")
    return tuple((pi, pi) for pi in p)


def _out_dims(in_dims, kernel_dims, stride, pads) -> _Triple:
    out = []
    for n, k, s, (pb, pa) in zip(in_dims, kernel_dims, stride, pads):
        padded = n + pb + pa
        if padded < k:
            raise DimensionError(
                f"kernel extent {k} exceeds padded input extent {padded}"
            )
        out.append((padded - k) // s + 1)
    return tuple(out)


def _check_operands(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray,
                    stride: _Triple) -> None:
    if x.ndim != 5:
        raise DimensionError(f"conv3d input must be 5-D (B,X,Y,Z,C), got {x.shape}")
    if kernel.ndim != 5:
        raise DimensionError(
            f"conv3d kernel must be 5-D (H,W,C,C_in,C_out), got {kernel.shape}"
        )
    if x.shape[-1] != kernel.shape[3]:
        raise DimensionError(
            f"conv3d: input channels {x.shape[-1]} vs kernel expecting {kernel.shape[3]}"
        )
    if bias.shape != (kernel.shape[4],):
        raise DimensionError(
            f"conv3d: bias {bias.shape} vs output channels {kernel.shape[4]}"
        )
    if min(stride) < 1:
        raise DimensionError(f"conv3d: stride must be >= 1, got {stride}")


def conv3d_forward(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray,
                   stride=1, padding=0) -> np.ndarray:
    out, _ = _conv3d_forward_ctx(x, kernel, bias, stride, padding)
    return out


def _conv3d_forward_ctx(x, kernel, bias, stride=1, padding=0):
    stride = _as_triple(stride, "stride")
    _check_operands(x, kernel, bias, stride)
    kdims = kernel.shape[:3]
    pads = _resolve_padding(padding, x.shape[1:4], kdims, stride)
    odims = _out_dims(x.shape[1:4], kdims, stride, pads)
    x_pad = np.pad(x, ((0, 0), *pads, (0, 0)))
    batch = x.shape[0]
    c_out = kernel.shape[4]
    out = np.zeros((batch, *odims, c_out), dtype=x_pad.dtype)
    out_flat = out.reshape(-1, c_out)
    for h in range(kdims[0]):
        for w in range(kdims[1]):
            for c in range(kdims[2]):
                sl = _offset_slice(x_pad, (h, w, c), stride, odims)
                out_flat += sl.reshape(-1, sl.shape[-1]) @ kernel[h, w, c]
    out += bias
    ctx = (x_pad, x.shape, kernel, stride, pads, odims)
    return out, ctx


def _offset_slice(x_pad, offset, stride, odims):
    h, w, c = offset
    sx, sy, sz = stride
    ox, oy, oz = odims
    return x_pad[:, h:h + sx * ox:sx, w:w + sy * oy:sy, c:c + sz * oz:sz, :]


def conv3d_backward(dout: np.ndarray, ctx):
    """Gradients (dx, dkernel, dbias) for a cached forward pass."""
    x_pad, x_shape, kernel, stride, pads, odims = ctx
    kdims = kernel.shape[:3]
    c_in, c_out = kernel.shape[3], kernel.shape[4]
    dout_flat = dout.reshape(-1, c_out)
    dbias = dout_flat.sum(axis=0)
    dkernel = np.zeros_like(kernel)
    dx_pad = np.zeros_like(x_pad)
    for h in range(kdims[0]):
        for w in range(kdims[1]):
            for c in range(kdims[2]):
                sl = _offset_slice(x_pad, (h, w, c), stride, odims)
                dkernel[h, w, c] = sl.reshape(-1, c_in).T @ dout_flat
                dsl = _offset_slice(dx_pad, (h, w, c), stride, odims)
                dsl += (dout_flat @ kernel[h, w, c].T).reshape(dsl.shape)
    crops = tuple(
        slice(pb, pb + n) for (pb, _), n in zip(pads, x_shape[1:4])
    )
    dx = dx_pad[(slice(None), *crops, slice(None))]
    return np.ascontiguousarray(dx), dkernel, dbias


class Conv3D:
    """Convolution layer owning its kernel and bias in a ParamStore."""

    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int,
                 rng: np.random.Generator, kernel_size=3, stride=1,
                 padding="same", dtype=np.float32) -> None:
        ksize = _as_triple(kernel_size, "kernel_size")
        fan_in = ksize[0] * ksize[1] * ksize[2] * c_in
        self.kernel = store.add(
            f"{name}.kernel",
            he_uniform(rng, (*ksize, c_in, c_out), fan_in, dtype),
        )
        self.bias = store.add(f"{name}.bias", np.zeros(c_out, dtype=dtype))
        self.stride = _as_triple(stride, "stride")
        self.padding = padding
        self._ctx = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        out, self._ctx = _conv3d_forward_ctx(
            x, self.kernel.value, self.bias.value, self.stride, self.padding
        )
        return out

    def backward(self, dout: np.ndarray) -> np.ndarray:
        dx, dk, db = conv3d_backward(dout, self._ctx)
        self.kernel.accumulate_grad(dk)
        self.bias.accumulate_grad(db)
        return dx
