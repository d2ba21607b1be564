"""Shared plumbing: hashing, seeded RNG streams, deterministic JSON/CSV output."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_U64_MASK = 0xFFFFFFFFFFFFFFFF

# Named RNG streams. Every random draw in the pipeline comes from
# default_rng(SeedSequence((seed, stream, index))) so reruns with the same
# seed replay byte-identically and streams never alias each other.
STREAM_INIT_TEXT = 1
STREAM_INIT_AUDIO = 2
STREAM_BATCH = 3
STREAM_EVAL = 4
STREAM_APM_INIT = 5
STREAM_APM_BATCH = 6
STREAM_APM_EVAL = 7
STREAM_SENSITIVITY = 8
STREAM_SPLIT = 9
STREAM_PROJECT = 10
STREAM_GRADCHECK = 11


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a hash."""
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & _U64_MASK
    return h


def stream_rng(seed: int, stream: int, index: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, stream, index)))


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def write_json(path, obj) -> None:
    """Write JSON with sorted keys; output bytes depend only on the value."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def write_csv(path, header, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_format_cell(c) for c in row])


def _format_cell(value):
    if isinstance(value, (np.floating, float)):
        return repr(float(value))
    if isinstance(value, (np.integer, int)):
        return int(value)
    return value
