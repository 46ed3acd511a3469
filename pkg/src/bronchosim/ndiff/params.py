"""Named parameter storage and the binary checkpoint format.

Checkpoint layout: magic ``NDCK``, u32 version, u64 header length, a JSON
header listing {name, shape, dtype, offset, nbytes} per entry (sorted by
name) plus free-form metadata, then one little-endian binary blob.
Round-tripping is bit-exact.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .tensor import Tensor, default_dtype

_MAGIC = b"NDCK"
_VERSION = 1
_DTYPES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8")}


class ParamStore:
    """Named parameter tensors with paired gradient buffers."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self.step_count = 0

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(value), requires_grad=True, dtype=default_dtype())
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self):
        return ((n, self._params[n]) for n in self.names())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def set_requires_grad(self, flag: bool, prefix: str = "") -> None:
        for n, t in self._params.items():
            if n.startswith(prefix):
                t.requires_grad = flag
                if not flag:
                    t.grad = None

    def subset(self, prefix: str) -> "ParamStore":
        """View-like store sharing the underlying tensors under a prefix."""
        sub = ParamStore()
        for n, t in self._params.items():
            if n.startswith(prefix):
                sub._params[n] = t
        sub.step_count = self.step_count
        return sub

    def merge(self, other: "ParamStore") -> None:
        for n, t in other._params.items():
            if n in self._params:
                raise ValueError(f"merge collision on {n!r}")
            self._params[n] = t

    def state_bytes(self, prefixes: tuple[str, ...] | None = None) -> bytes:
        """Canonical serialization of (a prefix subset of) the parameters."""
        chunks = []
        for n in self.names():
            if prefixes is not None and not any(n.startswith(p) for p in prefixes):
                continue
            t = self._params[n]
            arr = np.ascontiguousarray(t.data)
            chunks.append(n.encode() + b"\0" + str(arr.dtype).encode() + b"\0"
                          + repr(arr.shape).encode() + b"\0" + arr.tobytes())
        return b"".join(chunks)

    def content_hash(self, prefixes: tuple[str, ...] | None = None) -> str:
        return hashlib.sha256(self.state_bytes(prefixes)).hexdigest()


def _dtype_tag(dt: np.dtype) -> str:
    if dt == np.float32:
        return "f4"
    if dt == np.float64:
        return "f8"
    raise ValueError(f"unsupported checkpoint dtype {dt}")


def save_checkpoint(store: ParamStore, path: str | Path, meta: dict | None = None) -> None:
    entries = []
    blobs = []
    offset = 0
    for name in store.names():
        arr = np.ascontiguousarray(store[name].data)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": _dtype_tag(arr.dtype),
            "offset": offset,
            "nbytes": len(raw),
        })
        blobs.append(raw)
        offset += len(raw)
    header = {
        "version": _VERSION,
        "step_count": store.step_count,
        "meta": meta or {},
        "entries": entries,
    }
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", _VERSION))
        f.write(struct.pack("<Q", len(hdr)))
        f.write(hdr)
        for raw in blobs:
            f.write(raw)


def load_checkpoint(path: str | Path) -> tuple[ParamStore, dict]:
    """Load a checkpoint; returns (store, meta). Bit-exact w.r.t. save."""
    with open(path, "rb") as f:
        if f.read(4) != _MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", f.read(4))
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode())
        blob = f.read()
    store = ParamStore()
    store.step_count = int(header.get("step_count", 0))
    for e in header["entries"]:
        dt = _DTYPES[e["dtype"]]
        arr = np.frombuffer(blob, dtype=dt, count=int(np.prod(e["shape"])) if e["shape"] else 1,
                            offset=e["offset"]).reshape(e["shape"])
        t = Tensor(arr.copy(), requires_grad=True, dtype=dt)
        store._params[e["name"]] = t
    return store, header.get("meta", {})
