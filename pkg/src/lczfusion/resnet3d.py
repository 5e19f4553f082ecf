"""Residual 3D CNN over 32x32x10 multispectral cubes.

The cube is treated as a single-channel 3D volume so convolutions mix the
spectral axis the same way they mix the two spatial axes.  A strided stem
convolution feeds three residual stages whose widths double as resolution
halves, then global average pooling and a dense softmax head produce class
probabilities.
"""

from __future__ import annotations

import numpy as np

from . import NUM_LCZ_CLASSES, SENTINEL_BANDS, SENTINEL_PATCH_SIZE
from .conv3d import Conv3D
from .errors import DimensionError
from .layers import (BatchNorm, Dense, cross_entropy, cross_entropy_backward,
                     relu_backward, relu_forward, softmax, softmax_backward)
from .params import ParamStore

DEFAULT_WIDTHS = (64, 64, 128, 256)   # stem, stage 1, stage 2, stage 3


class ResidualBlock3D:
    """conv-BN-ReLU-conv-BN plus a shortcut, ReLU after the sum.

    The first convolution carries the block's stride.  When the stride or the
    channel count changes, the shortcut becomes a strided 1x1x1 convolution
    with its own batch norm; otherwise it is the identity.
    """

    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int,
                 stride: int, rng: np.random.Generator, dtype=np.float32) -> None:
        self.conv1 = Conv3D(store, f"{name}.conv1", c_in, c_out, rng,
                            kernel_size=3, stride=stride, padding="same", dtype=dtype)
        self.bn1 = BatchNorm(store, f"{name}.bn1", c_out, dtype=dtype)
        self.conv2 = Conv3D(store, f"{name}.conv2", c_out, c_out, rng,
                            kernel_size=3, stride=1, padding="same", dtype=dtype)
        self.bn2 = BatchNorm(store, f"{name}.bn2", c_out, dtype=dtype)
        self.projects = stride != 1 or c_in != c_out
        if self.projects:
            self.conv_p = Conv3D(store, f"{name}.proj", c_in, c_out, rng,
                                 kernel_size=1, stride=stride, padding="valid",
                                 dtype=dtype)
            self.bn_p = BatchNorm(store, f"{name}.bnp", c_out, dtype=dtype)
        self._cache = None

    def forward(self, x: np.ndarray, mode: str) -> np.ndarray:
        y = self.bn1.forward(self.conv1.forward(x), mode)
        y_act = relu_forward(y)
        main = self.bn2.forward(self.conv2.forward(y_act), mode)
        shortcut = self.bn_p.forward(self.conv_p.forward(x), mode) \
            if self.projects else x
        pre = main + shortcut
        self._cache = (y, pre)
        return relu_forward(pre)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        y, pre = self._cache
        dpre = relu_backward(dout, pre)
        dy_act = self.conv2.backward(self.bn2.backward(dpre))
        dy = relu_backward(dy_act, y)
        dx = self.conv1.backward(self.bn1.backward(dy))
        if self.projects:
            dx = dx + self.conv_p.backward(self.bn_p.backward(dpre))
        else:
            dx = dx + dpre
        return dx

    def bn_layers(self):
        layers = [self.bn1, self.bn2]
        if self.projects:
            layers.append(self.bn_p)
        return layers


class ResNet3DModel:
    """Stem conv-BN-ReLU, three residual stages (strides 1, 2, 2), GAP, softmax."""

    KIND = "resnet3d"

    def __init__(self, rng: np.random.Generator, num_classes: int = NUM_LCZ_CLASSES,
                 widths: tuple[int, int, int, int] = DEFAULT_WIDTHS,
                 dtype=np.float32) -> None:
        self.num_classes = num_classes
        self.widths = tuple(int(w) for w in widths)
        self.store = ParamStore()
        w0, w1, w2, w3 = self.widths
        self.stem = Conv3D(self.store, "stem", 1, w0, rng,
                           kernel_size=3, stride=1, padding="same", dtype=dtype)
        self.stem_bn = BatchNorm(self.store, "stem_bn", w0, dtype=dtype)
        self.blocks = [
            ResidualBlock3D(self.store, "block1", w0, w1, 1, rng, dtype),
            ResidualBlock3D(self.store, "block2", w1, w2, 2, rng, dtype),
            ResidualBlock3D(self.store, "block3", w2, w3, 2, rng, dtype),
        ]
        self.head = Dense(self.store, "head", w3, num_classes, rng, dtype)
        self._cache = None

    def meta(self) -> dict:
        return {"kind": self.KIND, "num_classes": self.num_classes,
                "widths": list(self.widths)}

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        named = [("stem_bn", self.stem_bn)]
        for i, block in enumerate(self.blocks, start=1):
            for bn, tag in zip(block.bn_layers(), ("bn1", "bn2", "bnp")):
                named.append((f"block{i}.{tag}", bn))
        for name, bn in named:
            for key, arr in bn.buffers().items():
                out[f"{name}.{key}"] = arr
        return out

    def forward(self, cubes: np.ndarray, mode: str = "infer") -> np.ndarray:
        if cubes.ndim == 3:
            cubes = cubes[None]
        if cubes.ndim != 4:
            raise DimensionError(
                f"expected cubes shaped (batch, x, y, bands), got {cubes.shape}"
            )
        x = cubes[..., None]           # single input channel
        s = self.stem_bn.forward(self.stem.forward(x), mode)
        h = relu_forward(s)
        for block in self.blocks:
            h = block.forward(h, mode)
        pooled = h.mean(axis=(1, 2, 3))
        logits = self.head.forward(pooled)
        probs = softmax(logits)
        self._cache = (s, h.shape, probs)
        return probs

    def backward(self, dprobs: np.ndarray) -> None:
        s, h_shape, probs = self._cache
        dlogits = softmax_backward(dprobs, probs)
        dpooled = self.head.backward(dlogits)
        spatial = h_shape[1] * h_shape[2] * h_shape[3]
        dh = np.broadcast_to(
            dpooled[:, None, None, None, :] / spatial, h_shape
        ).astype(dpooled.dtype)
        for block in reversed(self.blocks):
            dh = block.backward(dh)
        ds = relu_backward(dh, s)
        self.stem.backward(self.stem_bn.backward(ds))

    def loss_and_grads(self, cubes: np.ndarray, labels: np.ndarray) -> float:
        probs = self.forward(cubes, mode="train")
        loss = cross_entropy(probs, labels)
        self.backward(cross_entropy_backward(probs, labels))
        return loss


def check_cube_shape(cubes: np.ndarray) -> None:
    """Validate the native cube geometry (batch or single)."""
    expected = (SENTINEL_PATCH_SIZE, SENTINEL_PATCH_SIZE, SENTINEL_BANDS)
    shape = cubes.shape[-3:]
    if shape != expected:
        raise DimensionError(f"cube geometry {shape} does not match {expected}")
