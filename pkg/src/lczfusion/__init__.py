"""Dual-stream local climate zone (LCZ) classifier.

Two independently trained streams -- a graph convolutional network over
ground-instance graphs extracted from high-resolution RGB patches, and a 3D
residual CNN over 32x32x10 multispectral reflectance cubes -- are combined by
decision-level weighted fusion into a single 17-class LCZ prediction.
"""

__version__ = "0.1.0"

NUM_LCZ_CLASSES = 17
BUILT_CLASSES = tuple(range(10))      # LCZ1..LCZ10
NATURAL_CLASSES = tuple(range(10, 17))  # LCZA..LCZG

GOOGLE_PATCH_SIZE = 320
SENTINEL_PATCH_SIZE = 32
SENTINEL_BANDS = 10
RESOLUTION_RATIO = GOOGLE_PATCH_SIZE // SENTINEL_PATCH_SIZE

LCZ_CLASS_NAMES = tuple(
    [f"LCZ{i}" for i in range(1, 11)] + [f"LCZ{c}" for c in "ABCDEFG"]
)
