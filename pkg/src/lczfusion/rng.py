"""Seeded, platform-independent random number generation.

All randomness in the package flows from a single 64-bit seed.  Philox is a
counter-based generator whose output depends only on (key, counter), so the
same seed yields the same draw sequence on every platform.  Component-specific
sub-seeds are derived by hashing the component name together with the root
seed, which keeps independent consumers (splitting, init, batching, ...)
decoupled from each other's draw counts.
"""

from __future__ import annotations

import hashlib

import numpy as np


def make_rng(seed: int) -> np.random.Generator:
    """Generator for a 64-bit seed with reproducible cross-platform output."""
    return np.random.Generator(np.random.Philox(key=np.uint64(seed & 0xFFFFFFFFFFFFFFFF)))


def derive_seed(seed: int, name: str) -> int:
    """Stable 64-bit sub-seed for a named component."""
    digest = hashlib.sha256(f"{seed}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_rng(seed: int, name: str) -> np.random.Generator:
    return make_rng(derive_seed(seed, name))
