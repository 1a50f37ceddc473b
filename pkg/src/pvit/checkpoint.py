"""Binary checkpoint container shared by the transformer and prior models.

Layout, all integers little-endian u32:

    magic "PVIT" | format version | JSON length | JSON header bytes
    | tensor count | per tensor: name length, name, rank, dims..., f32 data

Compute stays float64; storage is float32, so a save/load round trip
reproduces model outputs to f32 quantization.  The JSON header carries
the model kind, its configuration, and training progress counters.
"""

from __future__ import annotations

import json
import struct
from typing import Mapping

import numpy as np

from .errors import FormatError

MAGIC = b"PVIT"
FORMAT_VERSION = 1


def save_checkpoint(path: str, header: dict, tensors: Mapping[str, np.ndarray]) -> None:
    """Write tensors in the mapping's iteration order (the declared order)."""
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            arr = np.asarray(arr)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f4").tobytes())


def load_checkpoint(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    """Read header and tensors back; values are upcast to float64."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {data[:4]!r}, expected {MAGIC!r}")
    off = 4

    def read_u32() -> int:
        nonlocal off
        if off + 4 > len(data):
            raise FormatError(f"{path}: truncated checkpoint")
        value = struct.unpack_from("<I", data, off)[0]
        off += 4
        return value

    version = read_u32()
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    json_len = read_u32()
    if off + json_len > len(data):
        raise FormatError(f"{path}: truncated checkpoint header")
    try:
        header = json.loads(data[off : off + json_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt checkpoint header: {exc}") from None
    off += json_len

    tensors: dict[str, np.ndarray] = {}
    for _ in range(read_u32()):
        name_len = read_u32()
        name = data[off : off + name_len].decode("utf-8")
        off += name_len
        rank = read_u32()
        dims = [read_u32() for _ in range(rank)]
        count = int(np.prod(dims)) if dims else 1
        end = off + 4 * count
        if end > len(data):
            raise FormatError(f"{path}: truncated tensor {name!r}")
        arr = np.frombuffer(data[off:end], dtype="<f4").astype(np.float64).reshape(dims)
        off = end
        tensors[name] = arr
    return header, tensors
