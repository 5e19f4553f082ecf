"""Two-phase training: fit each stream alone, freeze both, evaluate fusion.

Phase one trains a single stream with mini-batch Adam, per-sample dihedral
augmentation, reduce-on-plateau learning-rate decay and early stopping, all
keyed on validation loss; the kept parameters are those of the best
validation epoch.  Phase two loads two frozen checkpoints, predicts the
evaluation split once per stream and reports fused metrics plus the full
alpha sweep.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .checkpoint import checkpoint_bytes, load_checkpoint
from .dataio import (TRANSFORMS, LoadedSample, load_dataset, transform_cube,
                     transform_graph)
from .errors import ConsistencyError, DataError, DomainError, NumericError
from .fusion import classify, sweep_alpha, weighted_fuse
from .graph import GcnModel
from .layers import cross_entropy
from .metrics import compute_metrics
from .params import adam_step
from .resnet3d import DEFAULT_WIDTHS, ResNet3DModel
from .rng import derive_rng

STREAMS = ("google", "sentinel")


@dataclass
class TrainConfig:
    batch_size: int = 64
    max_epochs: int = 100
    lr: float = 0.002
    lr_decay_factor: float = 0.4
    lr_patience: int = 5
    early_stop_patience: int = 10
    seed: int = 0
    alpha: float = 0.6
    augment: bool = True
    hidden: int = 32                       # GCN width
    widths: tuple = DEFAULT_WIDTHS         # spectral-stream stage widths

    def validate(self) -> None:
        if self.batch_size < 2:
            raise DataError("batch_size must be >= 2 (batch norm needs pairs)")
        if not 0.0 < self.lr_decay_factor < 1.0:
            raise DataError(
                f"lr_decay_factor must lie in (0, 1), got {self.lr_decay_factor}"
            )
        if not 0.0 <= self.alpha <= 1.0:
            raise DataError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.lr <= 0 or self.max_epochs < 1:
            raise DataError("lr must be positive and max_epochs at least 1")
        if self.lr_patience < 1 or self.early_stop_patience < 1:
            raise DataError("patience values must be at least 1")
        if len(self.widths) != 4 or any(int(w) < 1 for w in self.widths):
            raise DataError(f"widths must be four positive ints, got {self.widths}")


@dataclass
class EpochStat:
    epoch: int
    train_loss: float
    val_loss: float
    val_oa: float
    lr: float


@dataclass
class TrainLog:
    epochs: list[EpochStat] = field(default_factory=list)
    stop_reason: str = ""

    def to_csv(self) -> str:
        lines = ["epoch,train_loss,val_loss,val_oa,lr"]
        for e in self.epochs:
            lines.append(",".join([
                str(e.epoch), repr(e.train_loss), repr(e.val_loss),
                repr(e.val_oa), repr(e.lr),
            ]))
        lines.append(f"# stop_reason={self.stop_reason}")
        return "\n".join(lines) + "\n"


def _epoch_batches(n: int, batch_size: int,
                   rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    chunks = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    # a singleton tail would break train-mode batch norm; fold it back
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
        chunks.pop()
    return chunks


def _batch_inputs(samples: list[LoadedSample], idx: np.ndarray, stream: str,
                  transforms: list[str] | None):
    if stream == "sentinel":
        if transforms is None:
            return np.stack([samples[i].cube for i in idx])
        return np.stack([
            transform_cube(samples[i].cube, t)
            for i, t in zip(idx, transforms)
        ])
    if transforms is None:
        return [samples[i].graph for i in idx]
    return [transform_graph(samples[i].graph, t)
            for i, t in zip(idx, transforms)]


def _make_model(stream: str, num_classes: int, cfg: TrainConfig,
                rng: np.random.Generator):
    if stream == "google":
        return GcnModel(rng, num_classes=num_classes, hidden=cfg.hidden)
    return ResNet3DModel(rng, num_classes=num_classes,
                         widths=tuple(int(w) for w in cfg.widths))


def predict(model, samples: list[LoadedSample],
            batch_size: int = 64) -> np.ndarray:
    """Infer-mode class probabilities, rows aligned with the sample list."""
    out = []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        if model.KIND == GcnModel.KIND:
            probs = model.forward([s.graph for s in chunk], mode="infer")
        else:
            probs = model.forward(np.stack([s.cube for s in chunk]),
                                  mode="infer")
        out.append(probs)
    probs = np.concatenate(out, axis=0)
    if not np.all(np.isfinite(probs)):
        raise NumericError("non-finite probabilities during prediction")
    return probs


def evaluate(model, samples: list[LoadedSample],
             batch_size: int = 64) -> tuple[float, float, np.ndarray]:
    labels = np.array([s.label for s in samples])
    probs = predict(model, samples, batch_size)
    loss = cross_entropy(probs, labels)
    oa = float((classify(probs) == labels).mean())
    return loss, oa, probs


def train_stream(stream: str, manifest_path, cfg: TrainConfig,
                 ) -> tuple[object, TrainLog]:
    """Fit one stream on the manifest's train split, tracking the val split.

    Returns the model holding its best-validation-loss parameters plus the
    per-epoch log.
    """
    if stream not in STREAMS:
        raise DomainError(f"stream must be one of {STREAMS}, got {stream!r}")
    cfg.validate()
    train = load_dataset(manifest_path, stream=stream, splits=("train",))
    val = load_dataset(manifest_path, stream=stream, splits=("val",))
    if not train or not val:
        raise DataError(
            f"manifest needs nonempty train and val splits, "
            f"got {len(train)} train / {len(val)} val"
        )
    labels = np.array([s.label for s in train])
    num_classes = int(max(
        max(s.label for s in train), max(s.label for s in val)
    )) + 1
    model = _make_model(stream, num_classes, cfg,
                        derive_rng(cfg.seed, f"init:{stream}"))

    log = TrainLog()
    lr = cfg.lr
    best_val = np.inf
    best_params = None
    best_buffers = None
    plateau = 0
    stop_reason = "max_epochs"
    for epoch in range(1, cfg.max_epochs + 1):
        shuffle_rng = derive_rng(cfg.seed, f"shuffle:{stream}:{epoch}")
        aug_rng = derive_rng(cfg.seed, f"augment:{stream}:{epoch}")
        loss_sum = 0.0
        for idx in _epoch_batches(len(train), cfg.batch_size, shuffle_rng):
            transforms = None
            if cfg.augment:
                picks = aug_rng.integers(0, len(TRANSFORMS), size=len(idx))
                transforms = [TRANSFORMS[p] for p in picks]
            x = _batch_inputs(train, idx, stream, transforms)
            model.store.zero_grads()
            batch_loss = model.loss_and_grads(x, labels[idx])
            if not np.isfinite(batch_loss):
                raise NumericError(
                    f"non-finite training loss in epoch {epoch} ({stream})"
                )
            adam_step(model.store, lr)
            loss_sum += batch_loss * len(idx)
        train_loss = loss_sum / len(train)
        val_loss, val_oa, _ = evaluate(model, val, cfg.batch_size)
        if not np.isfinite(val_loss):
            raise NumericError(f"non-finite validation loss in epoch {epoch}")
        log.epochs.append(EpochStat(epoch, float(train_loss), float(val_loss),
                                    float(val_oa), float(lr)))
        if val_loss < best_val:
            best_val = val_loss
            plateau = 0
            best_params = {n: p.value.copy() for n, p in model.store.items()}
            best_buffers = {n: a.copy() for n, a in model.buffers().items()}
        else:
            plateau += 1
            if plateau >= cfg.early_stop_patience:
                stop_reason = "early_stop"
                break
            if plateau % cfg.lr_patience == 0:
                lr *= cfg.lr_decay_factor
    log.stop_reason = stop_reason

    for name, param in model.store.items():
        param.value[...] = best_params[name]
    buffers = model.buffers()
    for name, arr in best_buffers.items():
        buffers[name][...] = arr
    return model, log


def two_phase_fit(google_ckpt, sentinel_ckpt, manifest_path, cfg: TrainConfig,
                  split: str = "val", sweep_step: float = 0.05) -> dict:
    """Frozen-stream fusion report on one split of the manifest.

    Loads both checkpoints, predicts each stream once, and evaluates the
    fused combination at cfg.alpha plus the whole alpha grid.  Parameters are
    verified untouched by byte comparison.
    """
    cfg.validate()
    model_g = load_checkpoint(google_ckpt)
    model_s = load_checkpoint(sentinel_ckpt)
    if model_g.KIND != GcnModel.KIND or model_s.KIND == GcnModel.KIND:
        raise ConsistencyError(
            f"expected a graph-stream and a spectral-stream checkpoint, "
            f"got kinds {model_g.KIND!r} and {model_s.KIND!r}"
        )
    if model_g.num_classes != model_s.num_classes:
        raise ConsistencyError(
            f"class-count mismatch: graph stream has {model_g.num_classes}, "
            f"spectral stream has {model_s.num_classes}"
        )
    frozen_g = checkpoint_bytes(model_g)
    frozen_s = checkpoint_bytes(model_s)

    samples = load_dataset(manifest_path, stream=None, splits=(split,))
    if not samples:
        raise DataError(f"manifest has no samples in split {split!r}")
    labels = np.array([s.label for s in samples])
    num_classes = model_g.num_classes

    probs_g = predict(model_g, samples, cfg.batch_size)
    probs_s = predict(model_s, samples, cfg.batch_size)
    fused = weighted_fuse(probs_g, probs_s, cfg.alpha)

    report = {
        "split": split,
        "n_samples": len(samples),
        "num_classes": num_classes,
        "alpha": cfg.alpha,
        "fused": compute_metrics(labels, classify(fused),
                                 num_classes).to_json_dict(),
        "google_only": compute_metrics(labels, classify(probs_g),
                                       num_classes).to_json_dict(),
        "sentinel_only": compute_metrics(labels, classify(probs_s),
                                         num_classes).to_json_dict(),
        "sweep": sweep_alpha(probs_g, probs_s, labels, step=sweep_step,
                             num_classes=num_classes),
    }
    if checkpoint_bytes(model_g) != frozen_g or \
            checkpoint_bytes(model_s) != frozen_s:
        raise ConsistencyError("fusion evaluation mutated frozen parameters")
    return report


def save_trainlog(log: TrainLog, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(log.to_csv())
