"""Single-file tensor container and JSON model descriptor.

File layout (compatible with the common ``.safetensors`` container)::

    u64 little-endian N | N bytes of JSON header | raw little-endian data

The header maps each tensor name to ``{"dtype", "shape", "data_offsets"}``;
offsets are relative to the start of the data region. Tensors are laid out in
name-sorted order and the header is serialized with sorted keys, so writing
the same store twice yields identical bytes.
"""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import (
    MalformedHeaderError,
    OverlappingOffsetsError,
    ShapeError,
    StoreError,
    TruncatedStoreError,
    UnknownDtypeError,
)

DTYPES = {"F32": np.dtype("<f4"), "F64": np.dtype("<f8")}
HEADER_ALIGN = 8


class NonFiniteTensorError(StoreError):
    code = "nonfinite"


@dataclass(frozen=True)
class Tensor:
    dtype: str
    shape: tuple[int, ...]
    data: bytes

    def __post_init__(self):
        if self.dtype not in DTYPES:
            raise UnknownDtypeError(f"unsupported dtype {self.dtype!r}")
        if any(d < 0 for d in self.shape):
            raise ShapeError(f"negative dimension in shape {self.shape}")
        expected = math.prod(self.shape) * DTYPES[self.dtype].itemsize
        if len(self.data) != expected:
            raise ShapeError(
                f"tensor data is {len(self.data)} bytes, shape {self.shape} "
                f"{self.dtype} needs {expected}"
            )

    @classmethod
    def from_array(cls, array, dtype: str = "F32") -> "Tensor":
        if dtype not in DTYPES:
            raise UnknownDtypeError(f"unsupported dtype {dtype!r}")
        arr = np.ascontiguousarray(np.asarray(array, dtype=DTYPES[dtype]))
        return cls(dtype, tuple(int(d) for d in arr.shape), arr.tobytes())

    def to_array(self) -> np.ndarray:
        """Float64 copy of the data (conversion happens on load)."""
        arr = np.frombuffer(self.data, dtype=DTYPES[self.dtype]).reshape(self.shape)
        out = arr.astype(np.float64)
        out.setflags(write=False)
        return out


@dataclass(frozen=True)
class TensorStore:
    entries: Mapping[str, Tensor] = field(default_factory=dict)

    def __post_init__(self):
        for name in self.entries:
            if not isinstance(name, str) or not name:
                raise ShapeError(f"tensor names must be nonempty strings, got {name!r}")
        object.__setattr__(self, "entries", dict(self.entries))

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], dtype: str = "F32") -> "TensorStore":
        return cls({name: Tensor.from_array(a, dtype) for name, a in arrays.items()})

    def __contains__(self, name) -> bool:
        return name in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def names(self) -> list[str]:
        return sorted(self.entries)

    def array(self, name: str) -> np.ndarray:
        return self.entries[name].to_array()

    def shape(self, name: str) -> tuple[int, ...]:
        return self.entries[name].shape

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: self.array(name) for name in self.names()}

    def param_count(self) -> int:
        return sum(math.prod(t.shape) for t in self.entries.values())


def _header_bytes(store: TensorStore) -> tuple[bytes, list[bytes]]:
    header = {}
    chunks = []
    offset = 0
    for name in store.names():
        t = store.entries[name]
        header[name] = {
            "dtype": t.dtype,
            "shape": list(t.shape),
            "data_offsets": [offset, offset + len(t.data)],
        }
        chunks.append(t.data)
        offset += len(t.data)
    raw = json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    raw = raw.encode("utf-8")
    raw += b" " * (-len(raw) % HEADER_ALIGN)
    return raw, chunks


def serialize(store: TensorStore) -> bytes:
    for name in store.names():
        t = store.entries[name]
        arr = np.frombuffer(t.data, dtype=DTYPES[t.dtype])
        if not np.all(np.isfinite(arr)):
            raise NonFiniteTensorError(f"tensor {name!r} has non-finite entries")
    header, chunks = _header_bytes(store)
    return struct.pack("<Q", len(header)) + header + b"".join(chunks)


def write_store(store: TensorStore, path) -> int:
    """Write atomically (temp file + rename); returns bytes written."""
    payload = serialize(store)
    path = Path(path)
    try:
        fd, tmp = tempfile.mkstemp(dir=path.parent or Path("."), prefix=f".{path.name}.")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(payload)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as exc:
        if isinstance(exc, StoreError):
            raise
        raise StoreError(f"cannot write {path}: {exc}") from exc
    return len(payload)


def deserialize(blob: bytes) -> TensorStore:
    if len(blob) < 8:
        raise TruncatedStoreError(f"file is {len(blob)} bytes, shorter than the 8-byte length prefix")
    (n,) = struct.unpack("<Q", blob[:8])
    if 8 + n > len(blob):
        raise TruncatedStoreError(f"header length {n} exceeds file size {len(blob)}")
    try:
        header = json.loads(blob[8:8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeaderError(f"header is not valid JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise MalformedHeaderError("header must be a JSON object")
    header.pop("__metadata__", None)
    data = blob[8 + n:]
    spans = []
    entries = {}
    for name, info in header.items():
        try:
            dtype = info["dtype"]
            shape = tuple(int(d) for d in info["shape"])
            begin, end = (int(o) for o in info["data_offsets"])
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedHeaderError(f"bad header entry for {name!r}: {exc}") from exc
        if dtype not in DTYPES:
            raise UnknownDtypeError(f"tensor {name!r} has unknown dtype {dtype!r}")
        if not 0 <= begin <= end:
            raise MalformedHeaderError(f"tensor {name!r} has invalid offsets [{begin}, {end}]")
        if end > len(data):
            raise TruncatedStoreError(
                f"tensor {name!r} ends at {end} but data region is {len(data)} bytes"
            )
        try:
            entries[name] = Tensor(dtype, shape, bytes(data[begin:end]))
        except ShapeError as exc:
            raise MalformedHeaderError(f"tensor {name!r}: {exc}") from exc
        if end > begin:
            spans.append((begin, end, name))
    spans.sort()
    for (b0, e0, n0), (b1, e1, n1) in zip(spans, spans[1:]):
        if b1 < e0:
            raise OverlappingOffsetsError(f"tensors {n0!r} and {n1!r} overlap")
    return TensorStore(entries)


def read_store(path) -> TensorStore:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise StoreError(f"cannot read {path}: {exc}") from exc
    return deserialize(blob)


# --- model descriptor -------------------------------------------------------

LAYER_KINDS = ("linear", "relu", "readout")


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    in_dim: int
    out_dim: int
    has_bias: bool = True

    @property
    def is_linear(self) -> bool:
        return self.kind in ("linear", "readout")


@dataclass(frozen=True)
class ModelSpec:
    """Ordered layer list; linear layers own ``<name>.weight`` (out x in)
    and optionally ``<name>.bias``."""

    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ShapeError("model has no layers")
        for layer in self.layers:
            if layer.kind not in LAYER_KINDS:
                raise ShapeError(f"layer {layer.name!r}: unknown kind {layer.kind!r}")
            if layer.kind == "relu" and layer.in_dim != layer.out_dim:
                raise ShapeError(f"relu layer {layer.name!r} must keep its width")
        for prev, cur in zip(self.layers, self.layers[1:]):
            if prev.out_dim != cur.in_dim:
                raise ShapeError(
                    f"layer {cur.name!r} expects {cur.in_dim} inputs but "
                    f"{prev.name!r} produces {prev.out_dim}"
                )

    @classmethod
    def mlp(cls, dims: Iterable[int], has_bias: bool = True) -> "ModelSpec":
        """linear-relu-...-readout stack with the given widths."""
        dims = list(dims)
        layers = []
        for i, (a, b) in enumerate(zip(dims, dims[1:])):
            last = i == len(dims) - 2
            layers.append(LayerSpec(f"fc{i + 1}", "readout" if last else "linear", a, b, has_bias))
            if not last:
                layers.append(LayerSpec(f"act{i + 1}", "relu", b, b, False))
        return cls(tuple(layers))

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    def linear_layers(self) -> list[LayerSpec]:
        return [layer for layer in self.layers if layer.is_linear]

    def to_json(self) -> dict:
        return {
            "layers": [
                {
                    "name": l.name,
                    "kind": l.kind,
                    "in_dim": l.in_dim,
                    "out_dim": l.out_dim,
                    "has_bias": l.has_bias,
                }
                for l in self.layers
            ]
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ModelSpec":
        try:
            return cls(tuple(LayerSpec(**layer) for layer in obj["layers"]))
        except (KeyError, TypeError) as exc:
            raise MalformedHeaderError(f"bad model descriptor: {exc}") from exc

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "ModelSpec":
        try:
            return cls.from_json(json.loads(Path(path).read_text()))
        except OSError as exc:
            raise StoreError(f"cannot read {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise MalformedHeaderError(f"{path} is not valid JSON: {exc}") from exc
