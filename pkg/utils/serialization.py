"""
On-disk tensor and checkpoint formats.

RIMT tensor::

    b"RIMT" | version u8 = 1 | dtype u8 | rank u8 | rank x u64 dims | payload

dtype codes: 0 = f32, 1 = f64, 2 = complex64, 3 = complex128 (complex values
interleaved re, im). Everything is little-endian and row-major.

Checkpoint: one line of compact UTF-8 JSON (terminated by ``\\n``) followed by
the RIMT blobs of every named parameter in index order. Index offsets count
from the first byte after the header line.
"""
import json
import logging
import os
import struct
from collections import OrderedDict
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

logging.basicConfig()
logger = logging.getLogger(__name__)
logger.setLevel(logging.DEBUG)

MAGIC = b"RIMT"
VERSION = 1
CHECKPOINT_SCHEMA = 1

DTYPE_CODES = {"f32": 0, "f64": 1, "c64": 2, "c128": 3}
NUMPY_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<c8"), 3: np.dtype("<c16")}
_HEADER = struct.Struct("<4sBBB")


class CorruptArtifactError(ValueError):
    """A file exists but does not parse as the expected format."""


def _default_code(array: np.ndarray) -> int:
    if np.iscomplexobj(array):
        return 2 if array.dtype == np.complex64 else 3
    return 0 if array.dtype == np.float32 else 1


def encode_rimt(array: np.ndarray, dtype: Optional[str] = None) -> bytes:
    array = np.asarray(array)
    if dtype is None:
        code = _default_code(array)
    elif dtype in DTYPE_CODES:
        code = DTYPE_CODES[dtype]
    else:
        raise ValueError(f"unknown RIMT dtype {dtype}, expected one of {sorted(DTYPE_CODES)}")
    if np.iscomplexobj(array) and code < 2:
        raise ValueError("complex array cannot be stored with a real RIMT dtype")
    if array.ndim > 255:
        raise ValueError(f"rank {array.ndim} too large for RIMT")

    header = _HEADER.pack(MAGIC, VERSION, code, array.ndim) + struct.pack(f"<{array.ndim}Q", *array.shape)
    payload = np.ascontiguousarray(array, dtype=NUMPY_DTYPES[code]).tobytes(order="C")
    return header + payload


def decode_rimt(buffer: bytes, offset: int = 0) -> Tuple[np.ndarray, int]:
    """Parse one RIMT tensor starting at ``offset``; returns (array, end offset)."""
    if len(buffer) - offset < _HEADER.size:
        raise CorruptArtifactError("truncated RIMT header")
    magic, version, code, rank = _HEADER.unpack_from(buffer, offset)
    if magic != MAGIC:
        raise CorruptArtifactError(f"bad RIMT magic {magic!r}")
    if version != VERSION:
        raise CorruptArtifactError(f"unsupported RIMT version {version}")
    if code not in NUMPY_DTYPES:
        raise CorruptArtifactError(f"unknown RIMT dtype code {code}")
    pos = offset + _HEADER.size
    if len(buffer) - pos < 8 * rank:
        raise CorruptArtifactError("truncated RIMT dims")
    dims = struct.unpack_from(f"<{rank}Q", buffer, pos)
    pos += 8 * rank

    dtype = NUMPY_DTYPES[code]
    n_bytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(buffer) - pos < n_bytes:
        raise CorruptArtifactError(f"RIMT payload has {len(buffer) - pos} bytes, expected {n_bytes}")
    array = np.frombuffer(buffer, dtype=dtype, count=n_bytes // dtype.itemsize, offset=pos).reshape(dims)
    return array.astype(dtype.newbyteorder("="), copy=True), pos + n_bytes


def write_rimt(path: str, array: np.ndarray, dtype: Optional[str] = None) -> None:
    with open(path, "wb") as file:
        file.write(encode_rimt(array, dtype))


def read_rimt(path: str) -> np.ndarray:
    with open(path, "rb") as file:
        buffer = file.read()
    array, end = decode_rimt(buffer)
    if end != len(buffer):
        raise CorruptArtifactError(f"{path}: {len(buffer) - end} trailing bytes after RIMT payload")
    return array


def save_checkpoint(path: str, params: Mapping[str, np.ndarray], header: Dict, dtype: str = "f64") -> None:
    """Write ``params`` (name -> array, in iteration order) with a JSON header.

    The file appears atomically: it is written next to ``path`` and renamed.
    """
    if dtype not in ("f32", "f64"):
        raise ValueError(f"checkpoint parameters are real, got dtype {dtype}")
    blobs = list()
    index = list()
    offset = 0
    for name, value in params.items():
        blob = encode_rimt(np.asarray(getattr(value, "data", value)), dtype)
        index.append({"name": name, "offset": offset, "length": len(blob)})
        blobs.append(blob)
        offset += len(blob)

    head = dict(header)
    head.update({"schema_version": CHECKPOINT_SCHEMA, "dtype": dtype, "index": index})
    line = json.dumps(head, ensure_ascii=False, separators=(",", ":"), sort_keys=True).encode("utf-8") + b"\n"

    tmp_path = f"{path}.tmp"
    with open(tmp_path, "wb") as file:
        file.write(line)
        for blob in blobs:
            file.write(blob)
    os.replace(tmp_path, path)
    logger.debug(f"saved {len(index)} tensors to {path}")


def load_checkpoint(path: str) -> Tuple[Dict, "OrderedDict[str, np.ndarray]"]:
    """Returns (header, name -> float64 array). Parameter names are not
    validated against any model here."""
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path, "rb") as file:
        buffer = file.read()

    newline = buffer.find(b"\n")
    if newline < 0:
        raise CorruptArtifactError(f"{path}: missing checkpoint header line")
    try:
        header = json.loads(buffer[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptArtifactError(f"{path}: unreadable checkpoint header ({e})")
    if not isinstance(header, dict) or header.get("schema_version") != CHECKPOINT_SCHEMA or "index" not in header:
        raise CorruptArtifactError(f"{path}: unsupported checkpoint header")

    body = buffer[newline + 1:]
    params = OrderedDict()
    for entry in header["index"]:
        name = entry["name"]
        if name in params:
            raise CorruptArtifactError(f"{path}: parameter {name} stored twice")
        array, end = decode_rimt(body, entry["offset"])
        if end - entry["offset"] != entry["length"]:
            raise CorruptArtifactError(f"{path}: length of {name} disagrees with the index")
        params[name] = array.astype(np.float64)
    return header, params
