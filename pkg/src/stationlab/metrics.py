"""Overlap and surface-distance metrics with anisotropic voxel spacing.

Volumes are indexed (z, y, x) with spacing given as (sx, sy, sz) mm per axis.
Surface distances are measured between centers of boundary voxels, where a
boundary voxel is a foreground voxel with at least one 6-neighbour outside
the mask. The distance transform is exact (separable lower-envelope of
parabolas in squared millimetres), not a chamfer approximation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .errors import ConfigurationError, ContractViolation, EmptyMaskError, NoInstancesError

_FAR = 1e300


@numba.njit(cache=True)
def _edt_lines(g, w2, v, z, f):
    """In-place 1D squared-distance pass over the rows of g, weight w2 per step."""
    m, n = g.shape
    for r in range(m):
        for i in range(n):
            f[i] = g[r, i]
        k = 0
        v[0] = 0
        z[0] = -_FAR
        z[1] = _FAR
        for q in range(1, n):
            s = 0.0
            while True:
                vk = v[k]
                s = ((f[q] + w2 * q * q) - (f[vk] + w2 * vk * vk)) / (2.0 * w2 * (q - vk))
                if s <= z[k] and k > 0:
                    k -= 1
                else:
                    break
            k += 1
            v[k] = q
            z[k] = s
            z[k + 1] = _FAR
        k = 0
        for q in range(n):
            while z[k + 1] < q:
                k += 1
            d = q - v[k]
            g[r, q] = w2 * d * d + f[v[k]]


def _squared_distance_field(mask: np.ndarray, spacing) -> np.ndarray:
    sx, sy, sz = (float(spacing[0]), float(spacing[1]), float(spacing[2]))
    g = np.where(mask, 0.0, _FAR)
    nz, ny, nx = g.shape
    scratch = max(nz, ny, nx)
    v = np.zeros(scratch, dtype=np.int64)
    z = np.zeros(scratch + 1, dtype=np.float64)
    f = np.zeros(scratch, dtype=np.float64)
    _edt_lines(g.reshape(nz * ny, nx), sx * sx, v, z, f)
    g = np.ascontiguousarray(g.transpose(0, 2, 1))  # (z, x, y)
    _edt_lines(g.reshape(nz * nx, ny), sy * sy, v, z, f)
    g = np.ascontiguousarray(g.transpose(1, 2, 0))  # (x, y, z)
    _edt_lines(g.reshape(nx * ny, nz), sz * sz, v, z, f)
    return np.ascontiguousarray(g.transpose(2, 1, 0))


def distance_transform(mask: np.ndarray, spacing) -> np.ndarray:
    """Exact Euclidean distance (mm) to the nearest foreground voxel center."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 3:
        raise ContractViolation(f"mask must be 3D, got shape {mask.shape}")
    if not mask.any():
        raise EmptyMaskError("distance transform of an empty mask")
    return np.sqrt(_squared_distance_field(mask, spacing))


def boundary_mask(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with a 6-neighbour outside the set (volume border counts)."""
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1, constant_values=False)
    covered = (padded[:-2, 1:-1, 1:-1] & padded[2:, 1:-1, 1:-1]
               & padded[1:-1, :-2, 1:-1] & padded[1:-1, 2:, 1:-1]
               & padded[1:-1, 1:-1, :-2] & padded[1:-1, 1:-1, 2:])
    return mask & ~covered


def dice(a: np.ndarray, b: np.ndarray) -> float:
    """2|A.B| / (|A|+|B|); both empty -> 1.0, exactly one empty -> 0.0."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ContractViolation(f"extent mismatch: {a.shape} vs {b.shape}")
    ca = int(a.sum())
    cb = int(b.sum())
    if ca == 0 and cb == 0:
        return 1.0
    if ca == 0 or cb == 0:
        return 0.0
    inter = int(np.logical_and(a, b).sum())
    return 2.0 * inter / (ca + cb)


def _surface_distances(a, b, spacing):
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ContractViolation(f"extent mismatch: {a.shape} vs {b.shape}")
    if not a.any() or not b.any():
        raise EmptyMaskError("surface distance needs two non-empty masks")
    ba = boundary_mask(a)
    bb = boundary_mask(b)
    dist_to_b = np.sqrt(_squared_distance_field(bb, spacing))
    dist_to_a = np.sqrt(_squared_distance_field(ba, spacing))
    a_to_b = dist_to_b[ba]
    b_to_a = dist_to_a[bb]
    return a_to_b, b_to_a


def hausdorff(a: np.ndarray, b: np.ndarray, spacing, percentile: float | None = None) -> float:
    """Symmetric boundary-to-boundary maximum distance in mm.

    `percentile` (e.g. 95) swaps the exact maximum for a percentile variant;
    the default is the exact maximum.
    """
    a_to_b, b_to_a = _surface_distances(a, b, spacing)
    if percentile is None:
        return float(max(a_to_b.max(), b_to_a.max()))
    pooled = np.concatenate([a_to_b, b_to_a])
    return float(np.percentile(pooled, percentile))


def asd(a: np.ndarray, b: np.ndarray, spacing) -> float:
    """Pooled symmetric mean of boundary-voxel distances, in mm.

    The pool is sorted before averaging so the result is exactly symmetric
    in its arguments (float summation order would otherwise leak through).
    """
    a_to_b, b_to_a = _surface_distances(a, b, spacing)
    pooled = np.sort(np.concatenate([a_to_b, b_to_a]))
    return float(pooled.mean())


def zone_accuracy(ln_instances, predicted_stations: np.ndarray, zones: dict) -> float:
    """Fraction of node instances whose centroid lands in the right zone.

    An instance is a (centroid_xyz, true_station) pair. The prediction at the
    centroid voxel must map to the same zone as the true station; a centroid
    on background (label 0) is always wrong.
    """
    instances = list(ln_instances)
    if not instances:
        raise NoInstancesError("no node instances to score")
    zones = {int(k): v for k, v in zones.items()}
    labels = np.asarray(predicted_stations)
    correct = 0
    for centroid, true_station in instances:
        true_station = int(true_station)
        if true_station not in zones:
            raise ConfigurationError(f"zone map lacks station {true_station}")
        x, y, z = (int(centroid[0]), int(centroid[1]), int(centroid[2]))
        pred = int(labels[z, y, x])
        if pred == 0:
            continue
        if pred not in zones:
            raise ConfigurationError(f"zone map lacks station {pred}")
        if zones[pred] == zones[true_station]:
            correct += 1
    return correct / len(instances)


@dataclass
class RowStats:
    mean: float
    std: float
    count: int


def format_mean_std(mean: float, std: float, percent: bool = False) -> str:
    if percent:
        return f"{100 * mean:.1f} ± {100 * std:.1f}"
    return f"{mean:.1f} ± {std:.1f}"


METRIC_KEYS = ("dice", "hd", "asd")


def summarize(per_case_metrics: list[dict]) -> dict:
    """Aggregate per-case, per-class metrics into mean +- population std rows.

    Input: one dict per case mapping class key -> {"dice": d, "hd": h, "asd": a}
    (hd/asd may be NaN when undefined for that case). Output maps class key ->
    {metric -> RowStats or None}, plus an "Average" row over class means.
    Classes absent from every case are marked None and excluded from Average.
    """
    if not per_case_metrics:
        raise ContractViolation("summarize needs at least one case")
    class_keys: list = []
    for case in per_case_metrics:
        for key in case:
            if key not in class_keys:
                class_keys.append(key)
    report: dict = {}
    for key in class_keys:
        row = {}
        for metric in METRIC_KEYS:
            values = np.array([case[key][metric] for case in per_case_metrics
                               if key in case and metric in case[key]
                               and np.isfinite(case[key][metric])])
            if values.size == 0:
                row[metric] = None
            else:
                row[metric] = RowStats(float(values.mean()),
                                       float(values.std(ddof=0)), int(values.size))
        report[key] = row
    average = {}
    for metric in METRIC_KEYS:
        means = [row[metric].mean for row in report.values() if row[metric] is not None]
        stds = [row[metric].std for row in report.values() if row[metric] is not None]
        if means:
            average[metric] = RowStats(float(np.mean(means)), float(np.mean(stds)),
                                       len(means))
        else:
            average[metric] = None
    report["Average"] = average
    return report
