"""Tensor file format shared by checkpoints, corpus payloads, mel outputs and
the embedding cache.

Byte layout::

    8 bytes   magic  b"MOATTS\\x00\\x01"
    8 bytes   header length H, unsigned little-endian
    H bytes   UTF-8 JSON header {"meta": {...}, "tensors": [{name, shape, offset, count}]}
    rest      every tensor's values as little-endian float64, in header order

``offset`` and ``count`` are in elements from the start of the payload.
Round trips are bit-exact.
"""

import json
import os
import struct
import tempfile
from collections import OrderedDict
from pathlib import Path
from typing import Mapping, Tuple, Union

import numpy as np

from core.errors import LoadError

MAGIC = b"MOATTS\x00\x01"
FLOAT = np.dtype("<f8")

PathLike = Union[str, Path]


def atomic_write_bytes(path: PathLike, payload: bytes) -> None:
    """Write to a sibling temp file then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def encode_tensors(tensors: Mapping[str, np.ndarray], meta: Mapping = None) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, array in tensors.items():
        array = np.ascontiguousarray(array, dtype=FLOAT)
        entries.append({"name": name, "shape": list(array.shape), "offset": offset, "count": int(array.size)})
        chunks.append(array.tobytes(order="C"))
        offset += int(array.size)
    header = json.dumps({"meta": dict(meta or {}), "tensors": entries}, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(chunks)


def decode_tensors(blob: bytes, source: str = "<bytes>") -> Tuple["OrderedDict[str, np.ndarray]", dict]:
    if len(blob) < 16 or blob[:8] != MAGIC:
        raise LoadError(f"{source}: not a tensor file (bad magic)")
    (header_len,) = struct.unpack("<Q", blob[8:16])
    try:
        header = json.loads(blob[16:16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise LoadError(f"{source}: corrupt header ({exc})") from None
    body = blob[16 + header_len:]
    payload = np.frombuffer(body[:len(body) - len(body) % FLOAT.itemsize], dtype=FLOAT)
    if not isinstance(header, dict) or not isinstance(header.get("tensors"), list):
        raise LoadError(f"{source}: header lists no tensors")
    tensors = OrderedDict()
    for entry in header["tensors"]:
        start, count = entry["offset"], entry["count"]
        if start + count > payload.size:
            raise LoadError(f"{source}: truncated payload for {entry['name']}")
        tensors[entry["name"]] = payload[start:start + count].reshape(entry["shape"]).astype(np.float64)
    return tensors, header.get("meta", {})


def save_tensors(path: PathLike, tensors: Mapping[str, np.ndarray], meta: Mapping = None) -> None:
    atomic_write_bytes(path, encode_tensors(tensors, meta))


def load_tensors(path: PathLike) -> Tuple["OrderedDict[str, np.ndarray]", dict]:
    path = Path(path)
    if not path.is_file():
        raise LoadError(f"{path}: no such tensor file")
    return decode_tensors(path.read_bytes(), source=str(path))

