"""Decision-level fusion of the two stream outputs."""

from __future__ import annotations

import numpy as np

from .errors import DataError, DimensionError, DomainError


def weighted_fuse(probs_g: np.ndarray, probs_s: np.ndarray,
                  alpha: float) -> np.ndarray:
    """alpha * graph-stream probabilities + (1 - alpha) * spectral-stream ones.

    alpha 0.0 and 1.0 return exact copies of the corresponding input so the
    endpoints are bitwise faithful to the single streams.
    """
    if not 0.0 <= alpha <= 1.0:
        raise DomainError(f"fusion weight must lie in [0, 1], got {alpha}")
    if probs_g.shape != probs_s.shape:
        raise DimensionError(
            f"stream shapes differ: {probs_g.shape} vs {probs_s.shape}"
        )
    if alpha == 1.0:
        return probs_g.copy()
    if alpha == 0.0:
        return probs_s.copy()
    return alpha * probs_g + (1.0 - alpha) * probs_s


def classify(probs: np.ndarray) -> np.ndarray:
    """Argmax over the last axis; ties resolve to the lowest class index."""
    if probs.ndim < 1:
        raise DimensionError("probabilities need at least one axis")
    return np.argmax(probs, axis=-1)


def alpha_grid(step: float) -> list[float]:
    """0, step, 2*step, ... with both endpoints 0.0 and 1.0 exact."""
    if not 0.0 < step <= 1.0:
        raise DomainError(f"sweep step must lie in (0, 1], got {step}")
    grid, i = [], 0
    while i * step < 1.0 - 1e-12:
        grid.append(i * step)
        i += 1
    grid.append(1.0)
    return grid


def sweep_alpha(probs_g: np.ndarray, probs_s: np.ndarray, labels: np.ndarray,
                step: float = 0.05, num_classes: int | None = None) -> list[dict]:
    """Full metric row for each fusion weight on a regular grid.

    The 0.0 and 1.0 rows reproduce the single-stream metrics exactly because
    weighted_fuse returns the untouched stream output at the endpoints.
    """
    from .metrics import compute_metrics

    labels = np.asarray(labels)
    if labels.shape[0] != probs_g.shape[0]:
        raise DataError(
            f"{labels.shape[0]} labels for {probs_g.shape[0]} probability rows"
        )
    if num_classes is None:
        num_classes = probs_g.shape[-1]
    rows = []
    for alpha in alpha_grid(step):
        fused = weighted_fuse(probs_g, probs_s, float(alpha))
        rep = compute_metrics(labels, classify(fused), num_classes=num_classes)
        rows.append({
            "alpha": float(alpha),
            "oa": rep.overall_accuracy,
            "oa_bu": rep.built_accuracy,
            "oa_n": rep.natural_accuracy,
            "kappa": rep.kappa,
            "avg_f1": rep.avg_f1,
        })
    return rows


def sweep_to_csv(rows: list[dict]) -> str:
    """CSV text with header alpha,oa,oa_bu,oa_n,kappa,avg_f1 (blank = undefined)."""
    lines = ["alpha,oa,oa_bu,oa_n,kappa,avg_f1"]
    for r in rows:
        cells = [r["alpha"], r["oa"], r["oa_bu"], r["oa_n"], r["kappa"], r["avg_f1"]]
        lines.append(",".join("" if c is None else repr(float(c)) for c in cells))
    return "\n".join(lines) + "\n"
