"""Bit-exact binary checkpoint format.

Layout, all integers little-endian:

    magic "GMAP" (4 bytes)
    format_version u32
    metadata_len u32, metadata (UTF-8 JSON: config, removed set,
        original-index map, provenance string)
    tensor_count u32
    per tensor: name_len u16, name UTF-8, dtype u8 (0=f32, 1=f64),
        rank u8, dims u32 each, payload row-major

Tensors are written in a fixed order (model-level tensors, then each
retained layer's tensors), and the metadata JSON uses sorted keys with
canonical separators, so save -> load -> save round-trips byte-identically.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, InputError
from .model import (LAYER_TENSOR_NAMES, DecoderLayer, ModelConfig,
                    TransformerModel)

MAGIC = b"GMAP"
FORMAT_VERSION = 1

_MODEL_TENSORS = ("embedding", "pos_embedding", "lm_head", "final_norm")


def _tensor_order(retained: list[int]) -> list[str]:
    names = list(_MODEL_TENSORS)
    for i in retained:
        names.extend(f"layers.{i}.{t}" for t in LAYER_TENSOR_NAMES)
    return names


def save_checkpoint(model: TransformerModel, path) -> None:
    """Serialize the model at its configured storage precision."""
    cfg = model.config
    store_f32 = cfg.precision == "f32"
    dtype_code = 0 if store_f32 else 1
    np_dtype = "<f4" if store_f32 else "<f8"
    retained = list(model.retained_indices)
    metadata = {
        "config": cfg.to_dict(),
        "removed": sorted(model.removed),
        "original_indices": retained,
        "provenance": model.provenance,
    }
    meta_bytes = json.dumps(metadata, sort_keys=True,
                            separators=(",", ":")).encode("utf-8")
    params = model.parameters()
    chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION),
              struct.pack("<I", len(meta_bytes)), meta_bytes,
              struct.pack("<I", len(params))]
    for name in _tensor_order(retained):
        arr = params[name]
        name_b = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(name_b)))
        chunks.append(name_b)
        chunks.append(struct.pack("<BB", dtype_code, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=np_dtype).tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.data):
            raise FormatError(
                f"truncated checkpoint: needed {n} bytes for {what} "
                f"at offset {self.offset}, file has {len(self.data)}")
        out = self.data[self.offset:self.offset + n]
        self.offset += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self.take(2, what))[0]

    def u8(self, what: str) -> int:
        return self.take(1, what)[0]


def load_checkpoint(path) -> TransformerModel:
    """Parse a checkpoint; f32 payloads are upcast to float64 in memory."""
    data = Path(path).read_bytes()
    r = _Reader(data)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(
            f"bad magic {magic!r} at offset 0, expected {MAGIC!r}")
    version = r.u32("format version")
    if version != FORMAT_VERSION:
        raise FormatError(
            f"unsupported format version {version} at offset 4, "
            f"expected {FORMAT_VERSION}")
    meta_len = r.u32("metadata length")
    meta_off = r.offset
    try:
        metadata = json.loads(r.take(meta_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unparseable metadata at offset {meta_off}: {exc}") from exc
    try:
        cfg = ModelConfig(**metadata["config"])
        removed = frozenset(int(i) for i in metadata["removed"])
        retained = [int(i) for i in metadata["original_indices"]]
        provenance = str(metadata.get("provenance", ""))
    except (KeyError, TypeError, InputError) as exc:
        raise FormatError(f"invalid metadata at offset {meta_off}: {exc}") from exc

    count = r.u32("tensor count")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len = r.u16("tensor name length")
        name = r.take(name_len, "tensor name").decode("utf-8")
        dtype_code = r.u8(f"dtype of {name}")
        if dtype_code not in (0, 1):
            raise FormatError(
                f"unknown dtype code {dtype_code} for tensor {name!r} "
                f"at offset {r.offset - 1}")
        rank = r.u8(f"rank of {name}")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, f"dims of {name}"))
        np_dtype = "<f4" if dtype_code == 0 else "<f8"
        n_items = int(np.prod(dims)) if dims else 1
        payload = r.take(n_items * (4 if dtype_code == 0 else 8),
                         f"payload of {name}")
        arr = np.frombuffer(payload, dtype=np_dtype).reshape(dims)
        tensors[name] = arr.astype(np.float64)
    if r.offset != len(data):
        raise FormatError(
            f"{len(data) - r.offset} trailing bytes at offset {r.offset}")

    expected = _tensor_order(retained)
    missing = [n for n in expected if n not in tensors]
    if missing or len(tensors) != len(expected):
        raise FormatError(
            f"tensor table mismatch: missing {missing}, "
            f"got {len(tensors)} tensors, expected {len(expected)}")

    layers = []
    for i in retained:
        fields = {t: tensors[f"layers.{i}.{t}"] for t in LAYER_TENSOR_NAMES}
        layers.append((i, DecoderLayer(**{k: _freeze(v) for k, v in fields.items()})))
    try:
        return TransformerModel(
            config=cfg,
            embedding=_freeze(tensors["embedding"]),
            pos_embedding=_freeze(tensors["pos_embedding"]),
            final_norm=_freeze(tensors["final_norm"]),
            lm_head=_freeze(tensors["lm_head"]),
            layers=tuple(layers),
            removed=removed,
            provenance=provenance,
        )
    except InputError as exc:
        raise FormatError(f"inconsistent checkpoint contents: {exc}") from exc


def _freeze(arr: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise FormatError("checkpoint contains non-finite values")
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr
