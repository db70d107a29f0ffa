"""
Helper functions for artifact serialization.

Every artifact writer goes through here so reruns produce byte-identical files.
"""

import base64
import json
import os
from typing import Dict, Iterable, List

import numpy as np
import pandas as pd


def encode_vector(vector: np.ndarray) -> str:
    """Base64 of the little-endian float32 bytes."""
    return base64.b64encode(np.asarray(vector, dtype="<f4").tobytes()).decode("ascii")


def decode_vector(text: str) -> np.ndarray:
    return np.frombuffer(base64.b64decode(text), dtype="<f4").astype(np.float32)


def _ensure_parent(path: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)


def write_jsonl(path: str, rows: Iterable[Dict]) -> int:
    _ensure_parent(path)
    count = 0
    with open(path, "w") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")
            count += 1
    return count


def read_jsonl(path: str) -> List[Dict]:
    with open(path, "r") as f:
        return [json.loads(line) for line in f if line.strip()]


def write_json(path: str, payload) -> None:
    _ensure_parent(path)
    with open(path, "w") as f:
        json.dump(payload, f, sort_keys=True, indent=2)
        f.write("\n")


def read_json(path: str):
    with open(path, "r") as f:
        return json.load(f)


def write_table(path: str, frame: pd.DataFrame, sort_by: List[str] = None) -> None:
    """CSV with fixed float formatting; rows sorted by `sort_by` when given."""
    _ensure_parent(path)
    if sort_by:
        frame = frame.sort_values(sort_by, kind="mergesort").reset_index(drop=True)
    frame.to_csv(path, index=False, float_format="%.6f")
