"""
Self-describing weight container shared by target models, explainers,
SAEs and projection sets.

Layout: b"SXCK" magic, uint32 little-endian header length, a UTF-8 JSON
header ({"config": ..., "tensors": [{"name", "shape", "offset"}]}), then the
raw little-endian float32 data of every tensor in row-major order.
"""

import json
import logging
import os
import struct
from typing import Dict, Tuple

import numpy as np

logger = logging.getLogger(__name__)

MAGIC = b"SXCK"


class CheckpointFormatError(ValueError):
    pass


def save_checkpoint(path: str, config: Dict, tensors: Dict[str, np.ndarray]) -> None:
    """Write `tensors` (sorted by name) and `config` to `path`."""
    entries = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        array = np.ascontiguousarray(tensors[name], dtype="<f4")
        entries.append({"name": name, "shape": list(array.shape), "offset": offset})
        blob = array.tobytes(order="C")
        blobs.append(blob)
        offset += len(blob)

    header = json.dumps({"config": config, "tensors": entries}, sort_keys=True).encode("utf-8")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)
    logger.info(f"Saved checkpoint with {len(entries)} tensors to {path}")


def load_checkpoint(path: str) -> Tuple[Dict, Dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MAGIC:
        raise CheckpointFormatError(f"{path} is not a checkpoint container (bad magic)")
    (header_len,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8:8 + header_len].decode("utf-8"))
    data_start = 8 + header_len

    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = data_start + entry["offset"]
        array = np.frombuffer(raw, dtype="<f4", count=count, offset=start)
        tensors[entry["name"]] = array.reshape(shape).astype(np.float32)
    return header["config"], tensors
