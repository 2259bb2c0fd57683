"""Named parameter collections and the binary checkpoint format.

Checkpoint layout: 4-byte magic ``DLCK``, little-endian uint64 header
length, UTF-8 JSON header (format version, user metadata, name -> shape
table with byte offsets), then raw little-endian float32 payloads in
header order. Round-trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .tensor import Tensor

MAGIC = b"DLCK"
FORMAT_VERSION = 1


class ParamStore:
    """name -> Tensor map with stable, insertion-ordered iteration."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name: {name}")
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._params.items())

    def tensors(self) -> Iterator[Tensor]:
        return iter(self._params.values())

    def zero_grads(self):
        for t in self._params.values():
            t.grad = None

    def n_values(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def subset(self, prefix: str) -> "ParamStore":
        sub = ParamStore()
        for name, t in self._params.items():
            if name.startswith(prefix):
                sub._params[name] = t
        return sub

    def state_bytes(self) -> bytes:
        """Concatenated little-endian float32 payload, for bitwise compares."""
        return b"".join(
            np.ascontiguousarray(t.data, dtype="<f4").tobytes()
            for t in self._params.values()
        )


def save_checkpoint(path, params: ParamStore, meta: Optional[dict] = None):
    entries = []
    offset = 0
    payloads = []
    for name, t in params.items():
        raw = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(t.data.shape),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        payloads.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "meta": meta or {},
        "tensors": entries,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        for raw in payloads:
            f.write(raw)


def load_checkpoint(path) -> tuple[ParamStore, dict]:
    """Returns (params, meta). Tensors are created with requires_grad=True."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise ValueError(f"not a checkpoint file: bad magic {magic!r}")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        if header["format_version"] != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header['format_version']}")
        payload = f.read()
    params = ParamStore()
    for entry in header["tensors"]:
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]).copy()
        params.add(entry["name"], Tensor(arr, requires_grad=True))
    return params, header["meta"]


def load_into(path, params: ParamStore, prefix: str = ""):
    """Overwrite matching parameters in-place from a checkpoint.

    Returns the list of names loaded. Shapes must agree exactly.
    """
    loaded, _ = load_checkpoint(path)
    names = []
    for name, src in loaded.items():
        if not name.startswith(prefix) or name not in params:
            continue
        dst = params[name]
        if dst.data.shape != src.data.shape:
            raise ValueError(
                f"shape mismatch for {name}: {dst.data.shape} vs {src.data.shape}"
            )
        dst.data[...] = src.data
        names.append(name)
    return names
