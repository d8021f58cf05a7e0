"""Checkpoint container: magic, JSON header line, raw float32 payload.

Layout: the 8-byte magic "STNLAB01", a UTF-8 JSON header terminated by a
single newline, then every parameter as little-endian float32 in declaration
order. Shapes live in the header under "param_shapes".
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..errors import LoadError

MAGIC = b"STNLAB01"


def save_params(path, header: dict, params) -> None:
    arrays = [np.asarray(p.data if hasattr(p, "data") else p) for p in params]
    header = dict(header)
    header["param_shapes"] = [list(a.shape) for a in arrays]
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def load_params(path) -> tuple[dict, list[np.ndarray]]:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:len(MAGIC)] != MAGIC:
        raise LoadError(f"{path}: bad magic, not a checkpoint file")
    nl = raw.find(b"\n", len(MAGIC))
    if nl < 0:
        raise LoadError(f"{path}: missing header terminator")
    try:
        header = json.loads(raw[len(MAGIC):nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise LoadError(f"{path}: malformed header ({exc})") from exc
    shapes = header.get("param_shapes")
    if shapes is None:
        raise LoadError(f"{path}: header lacks param_shapes")
    payload = raw[nl + 1:]
    counts = [int(np.prod(s)) if s else 1 for s in shapes]
    expected = 4 * sum(counts)
    if len(payload) < expected:
        raise LoadError(f"{path}: truncated payload "
                        f"({len(payload)} bytes, expected {expected})")
    if len(payload) > expected:
        raise LoadError(f"{path}: trailing bytes after payload")
    params = []
    offset = 0
    for shape, count in zip(shapes, counts):
        flat = np.frombuffer(payload, dtype="<f4", count=count, offset=offset)
        params.append(flat.reshape(shape).astype(np.float32))
        offset += 4 * count
    return header, params
