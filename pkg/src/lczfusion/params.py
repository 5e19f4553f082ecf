"""Named parameter storage and the Adam update rule.

Every trainable tensor lives in a :class:`ParamStore` under a unique name,
together with its gradient accumulator and Adam moment estimates.  Gradients
start unpopulated; ``zero_grads`` populates them with zeros and backward
passes accumulate into them, so ``adam_step`` can detect a missing backward
pass instead of silently applying a stale update.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConsistencyError, DimensionError

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-7


@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray | None = None
    adam_m: np.ndarray = field(init=False)
    adam_v: np.ndarray = field(init=False)
    step_count: int = 0

    def __post_init__(self) -> None:
        self.adam_m = np.zeros_like(self.value)
        self.adam_v = np.zeros_like(self.value)

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.value.shape:
            raise DimensionError(
                f"gradient shape {g.shape} does not match value shape {self.value.shape}"
            )
        if self.grad is None:
            self.grad = g.astype(self.value.dtype, copy=True)
        else:
            self.grad += g


class ParamStore:
    """Ordered mapping of unique names to :class:`Param` entries."""

    def __init__(self) -> None:
        self._entries: dict[str, Param] = {}

    def add(self, name: str, value: np.ndarray) -> Param:
        if name in self._entries:
            raise ConsistencyError(f"duplicate parameter name {name!r}")
        p = Param(value=value)
        self._entries[name] = p
        return p

    def __getitem__(self, name: str) -> Param:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def zero_grads(self) -> None:
        for p in self._entries.values():
            p.grad = np.zeros_like(p.value)

    def num_values(self) -> int:
        return sum(p.value.size for p in self._entries.values())


def adam_step(
    store: ParamStore,
    lr: float,
    beta1: float = ADAM_BETA1,
    beta2: float = ADAM_BETA2,
    eps: float = ADAM_EPS,
) -> None:
    """One bias-corrected Adam update over every entry of ``store``.

    Gradients are left untouched; the caller zeroes them between steps.
    """
    for name, p in store.items():
        if p.grad is None:
            raise ConsistencyError(f"parameter {name!r} has no populated gradient")
    for p in store._entries.values():
        g = p.grad
        p.step_count += 1
        t = p.step_count
        p.adam_m *= beta1
        p.adam_m += (1.0 - beta1) * g
        p.adam_v *= beta2
        p.adam_v += (1.0 - beta2) * np.square(g)
        m_hat = p.adam_m / (1.0 - beta1**t)
        v_hat = p.adam_v / (1.0 - beta2**t)
        p.value -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.value.dtype, copy=False)
