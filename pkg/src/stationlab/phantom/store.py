"""Case directory layout: meta.json + three headerless raw payloads.

image.raw is little-endian float32, organs.raw / stations.raw are uint8; all
three are x-fastest with shapes taken from meta.json. Round trips are bitwise
lossless.
"""

from __future__ import annotations

import json
import warnings as _warnings
from pathlib import Path

import numpy as np

from ..errors import LoadError
from .generate import CaseRecord

META_NAME = "meta.json"


def save_case(case: CaseRecord, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    nx, ny, nz = case.extents
    meta = {
        "case_id": case.case_id,
        "extents": [nx, ny, nz],
        "spacing": list(case.spacing),
        "array_order": "zyx",
        "ln_instances": [{"centroid": list(c), "station": s}
                         for c, s in case.ln_instances],
        **case.meta,
    }
    (directory / META_NAME).write_text(json.dumps(meta, indent=2, sort_keys=True))
    (directory / "image.raw").write_bytes(
        np.ascontiguousarray(case.image, dtype="<f4").tobytes())
    (directory / "organs.raw").write_bytes(
        np.ascontiguousarray(case.organ_labels, dtype=np.uint8).tobytes())
    (directory / "stations.raw").write_bytes(
        np.ascontiguousarray(case.station_labels, dtype=np.uint8).tobytes())
    return directory


def _read_raw(path: Path, dtype, count: int) -> np.ndarray:
    if not path.exists():
        raise LoadError(f"{path}: missing payload file")
    raw = path.read_bytes()
    itemsize = np.dtype(dtype).itemsize
    if len(raw) < count * itemsize:
        raise LoadError(f"{path}: truncated payload "
                        f"({len(raw)} bytes, expected {count * itemsize})")
    if len(raw) > count * itemsize:
        raise LoadError(f"{path}: trailing bytes after payload")
    return np.frombuffer(raw, dtype=dtype, count=count)


def load_case(directory, expected_config_hash: str | None = None) -> CaseRecord:
    directory = Path(directory)
    meta_path = directory / META_NAME
    if not meta_path.exists():
        raise LoadError(f"{meta_path}: missing metadata file")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise LoadError(f"{meta_path}: malformed header ({exc})") from exc
    try:
        nx, ny, nz = meta["extents"]
        spacing = tuple(meta["spacing"])
        case_id = meta["case_id"]
        instances = [(tuple(item["centroid"]), int(item["station"]))
                     for item in meta["ln_instances"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise LoadError(f"{meta_path}: malformed header ({exc})") from exc
    if expected_config_hash is not None and meta.get("config_hash") != expected_config_hash:
        _warnings.warn(
            f"{directory}: case config hash {meta.get('config_hash')!r} does not "
            f"match expected {expected_config_hash!r}", UserWarning, stacklevel=2)
    count = nx * ny * nz
    image = _read_raw(directory / "image.raw", "<f4", count).reshape(nz, ny, nx)
    organs = _read_raw(directory / "organs.raw", np.uint8, count).reshape(nz, ny, nx)
    stations = _read_raw(directory / "stations.raw", np.uint8, count).reshape(nz, ny, nx)
    extra = {k: v for k, v in meta.items()
             if k not in ("case_id", "extents", "spacing", "array_order", "ln_instances")}
    return CaseRecord(
        case_id=case_id,
        image=image.astype(np.float32),
        organ_labels=organs.copy(),
        station_labels=stations.copy(),
        spacing=spacing,
        ln_instances=instances,
        meta=extra,
    )
