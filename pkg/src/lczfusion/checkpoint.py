"""Single-file model checkpoints.

Layout: a little-endian u32 giving the JSON header length, the JSON header,
then the referenced tensor blobs back to back.  The header carries the format
version, the model's construction metadata and a directory of tensors (sorted
by name) with byte offsets relative to the end of the header.  Tensor blobs
reuse the LCZT container, so each is self-describing as well.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import ConsistencyError, FormatError
from .graph import GcnModel
from .lczt import tensor_from_bytes, tensor_to_bytes
from .resnet3d import ResNet3DModel
from .rng import make_rng

CHECKPOINT_VERSION = 1
BUFFER_PREFIX = "buffer:"


def _named_tensors(model) -> dict[str, np.ndarray]:
    out = {name: p.value for name, p in model.store.items()}
    for name, arr in model.buffers().items():
        out[BUFFER_PREFIX + name] = arr
    return out


def checkpoint_bytes(model) -> bytes:
    tensors = _named_tensors(model)
    directory = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        blob = tensor_to_bytes(np.asarray(tensors[name], dtype=np.float32))
        directory.append({
            "name": name,
            "shape": list(tensors[name].shape),
            "offset": offset,
            "length": len(blob),
        })
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({
        "format_version": CHECKPOINT_VERSION,
        "model": model.meta(),
        "tensors": directory,
    }, sort_keys=True).encode("utf-8")
    return struct.pack("<I", len(header)) + header + b"".join(blobs)


def save_checkpoint(path, model) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model))


def _parse(raw: bytes) -> tuple[dict, bytes]:
    if len(raw) < 4:
        raise FormatError("checkpoint shorter than its length prefix")
    (header_len,) = struct.unpack_from("<I", raw, 0)
    if len(raw) < 4 + header_len:
        raise FormatError("checkpoint truncated inside the JSON header")
    try:
        header = json.loads(raw[4:4 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"checkpoint header is not valid JSON: {exc}") from exc
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise FormatError(
            f"unsupported checkpoint version {header.get('format_version')}"
        )
    return header, raw[4 + header_len:]


def peek_meta(path) -> dict:
    with open(path, "rb") as fh:
        raw = fh.read()
    header, _ = _parse(raw)
    return header["model"]


def _construct(meta: dict):
    kind = meta.get("kind")
    if kind == GcnModel.KIND:
        return GcnModel(make_rng(0), num_classes=int(meta["num_classes"]),
                        hidden=int(meta["hidden"]))
    if kind == ResNet3DModel.KIND:
        return ResNet3DModel(make_rng(0), num_classes=int(meta["num_classes"]),
                             widths=tuple(meta["widths"]))
    raise FormatError(f"checkpoint describes unknown model kind {kind!r}")


def load_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    header, payload = _parse(raw)
    model = _construct(header["model"])
    tensors = _named_tensors(model)
    listed = {e["name"] for e in header["tensors"]}
    missing = sorted(set(tensors) - listed)
    extra = sorted(listed - set(tensors))
    if missing or extra:
        raise ConsistencyError(
            f"checkpoint tensor directory mismatch: missing {missing}, "
            f"unexpected {extra}"
        )
    for entry in header["tensors"]:
        blob = payload[entry["offset"]:entry["offset"] + entry["length"]]
        if len(blob) != entry["length"]:
            raise FormatError(f"checkpoint truncated at tensor {entry['name']!r}")
        arr = tensor_from_bytes(blob)
        target = tensors[entry["name"]]
        if arr.shape != target.shape:
            raise ConsistencyError(
                f"tensor {entry['name']!r} has shape {arr.shape}, "
                f"model expects {target.shape}"
            )
        target[...] = arr
    return model
