"""Shared independent oracles and checking utilities for the test suite.

Everything here is deliberately written the slow, obvious way (nested loops,
all-pairs scans) so it stays independent of the implementation under test.
"""

from __future__ import annotations

import numpy as np


def conv3d_reference(x, w, b, stride=1, pad=0):
    """Six-nested-loop direct cross-correlation, float64 accumulation."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    cout, cin, k = w.shape[0], w.shape[1], w.shape[2]
    d, h, wd = x.shape[1:]
    do = (d + 2 * pad - k) // stride + 1
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((cout, do, ho, wo))
    for co in range(cout):
        for zo in range(do):
            for yo in range(ho):
                for xo in range(wo):
                    acc = b[co]
                    for ci in range(cin):
                        for kz in range(k):
                            for ky in range(k):
                                for kx in range(k):
                                    zi = zo * stride - pad + kz
                                    yi = yo * stride - pad + ky
                                    xi = xo * stride - pad + kx
                                    if 0 <= zi < d and 0 <= yi < h and 0 <= xi < wd:
                                        acc += w[co, ci, kz, ky, kx] * x[ci, zi, yi, xi]
                    out[co, zo, yo, xo] = acc
    return out


def finite_difference_grads(f, tensors, h=1e-3):
    """Central differences of scalar-valued f() w.r.t. each tensor's entries.

    f must rebuild its graph from the tensors' current .data on every call.
    """
    grads = []
    for t in tensors:
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f())
            flat[i] = orig - h
            fm = float(f())
            flat[i] = orig
            gf[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def assert_grads_close(analytic, reference, rel=1e-4, abs_floor=1e-6):
    analytic = np.asarray(analytic, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    tol = np.maximum(rel * np.abs(reference), abs_floor)
    diff = np.abs(analytic - reference)
    worst = np.max(diff - tol)
    assert np.all(diff <= tol), (
        f"gradient mismatch: worst excess {worst:.3e}, "
        f"max diff {diff.max():.3e}, max ref {np.abs(reference).max():.3e}")


def brute_force_distance_field(mask, spacing):
    """All-pairs exact anisotropic distance (mm) to the nearest mask voxel."""
    mask = np.asarray(mask, dtype=bool)
    sz, sy, sx = (np.float64(spacing[2]), np.float64(spacing[1]),
                  np.float64(spacing[0]))
    fz, fy, fx = np.nonzero(mask)
    assert fz.size > 0, "oracle needs a non-empty mask"
    out = np.empty(mask.shape, dtype=np.float64)
    for z in range(mask.shape[0]):
        for y in range(mask.shape[1]):
            d2 = ((z - fz) * (z - fz) * (sz * sz)
                  + (y - fy) * (y - fy) * (sy * sy))
            for x in range(mask.shape[2]):
                best = np.min(d2 + (x - fx) * (x - fx) * (sx * sx))
                out[z, y, x] = np.sqrt(best)
    return out


def boundary_voxels(mask):
    """Foreground voxels with at least one 6-neighbour outside the mask."""
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1, constant_values=False)
    inner = padded[1:-1, 1:-1, 1:-1]
    covered = (padded[:-2, 1:-1, 1:-1] & padded[2:, 1:-1, 1:-1]
               & padded[1:-1, :-2, 1:-1] & padded[1:-1, 2:, 1:-1]
               & padded[1:-1, 1:-1, :-2] & padded[1:-1, 1:-1, 2:])
    return inner & ~covered


def small_phantom_dict():
    """A 32x32x16 phantom with the default nine-organ structure, scaled down.

    Keeps the anchor/non-anchor contrast budget and the key/predicate/decoy
    roles of the default config while running an order of magnitude faster.
    """
    return {
        "extents": [32, 32, 16],
        "spacing": [1.0, 1.0, 2.0],
        "noise_sigma": 10.0,
        "body_jitter": [2.0, 2.0, 1.0],
        "organs": [
            {"name": "airway", "shape": "tube", "center": [13, 15, 15],
             "size": [1.8, 1.8, 15], "intensity": -60.0, "anchor": True,
             "air": True, "center_jitter": [1, 1, 1]},
            {"name": "spine", "shape": "tube", "center": [16, 26, 15],
             "size": [2.8, 2.8, 15], "intensity": 55.0, "anchor": True,
             "center_jitter": [1, 1, 1]},
            {"name": "sternum", "shape": "box", "center": [16, 5, 15],
             "size": [5, 1.5, 13], "intensity": 50.0, "anchor": True,
             "center_jitter": [1, 1, 1]},
            {"name": "heart", "shape": "ellipsoid", "center": [21, 17, 11],
             "size": [5.5, 4.5, 5.5], "intensity": 45.0, "anchor": True,
             "center_jitter": [1, 1, 1]},
            {"name": "esophagus", "shape": "tube", "center": [15, 20, 15],
             "size": [1.4, 1.4, 15], "intensity": 12.0,
             "center_jitter": [2, 2, 1]},
            {"name": "aorta", "shape": "tube", "center": [10, 18, 15],
             "size": [2.1, 2.1, 15], "intensity": 15.0,
             "center_jitter": [2, 2, 1]},
            {"name": "thymus", "shape": "ellipsoid", "center": [15, 9, 21],
             "size": [4, 2.5, 3.5], "intensity": -12.0,
             "center_jitter": [2, 2, 1.5]},
            {"name": "fat", "shape": "ellipsoid", "center": [25, 26, 22],
             "size": [3, 2.5, 3], "intensity": -15.0,
             "center_jitter": [1.5, 1.5, 1.5]},
            {"name": "muscle", "shape": "box", "center": [5, 27, 11],
             "size": [2.5, 2, 6], "intensity": 10.0,
             "center_jitter": [1.5, 1.5, 1.5]},
        ],
        "stations": [
            {"station": "st_para_eso", "source": "esophagus", "band": [1.0, 4.5],
             "predicates": [["spine", "y", "below"]]},
            {"station": "st_para_aorta", "source": "aorta", "band": [1.0, 4.0],
             "predicates": [["sternum", "z", "above"]]},
            {"station": "st_anterior", "source": "thymus", "band": [1.0, 5.0],
             "predicates": [["heart", "z", "above"]]},
            {"station": "st_peri_eso", "source": "esophagus", "band": [4.5, 9.0],
             "predicates": []},
        ],
        "key_organs": ["esophagus", "aorta", "thymus"],
        "zones": {"st_para_eso": "esophageal", "st_para_aorta": "aortic",
                  "st_anterior": "anterior", "st_peri_eso": "esophageal"},
        "node_count_range": [2, 4],
        "node_radius_range": [1, 2],
        "node_intensity": 50.0,
    }


def small_experiment_dict(**overrides):
    base = {
        "phantom": small_phantom_dict(),
        "cohort_count": 6,
        "fold_count": 2,
        "arms": ["ct_only", "organs_gt"],
        "schedules": {"anchor_epochs": 2, "nonanchor_epochs": 2, "joint_epochs": 2,
                      "lns_epochs": 2, "lr": 3e-3, "search_total": 3,
                      "search_freeze": 1},
        "master_seed": 5,
    }
    base.update(overrides)
    return base


def brute_force_surface_distances(a, b, spacing):
    """(hausdorff, asd) via explicit all-pairs over boundary voxels."""
    ba = np.argwhere(boundary_voxels(a)).astype(np.float64)
    bb = np.argwhere(boundary_voxels(b)).astype(np.float64)
    scale = np.array([spacing[2], spacing[1], spacing[0]], dtype=np.float64)
    pa = ba * scale
    pb = bb * scale
    d = np.sqrt(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(axis=2))
    a_to_b = d.min(axis=1)
    b_to_a = d.min(axis=0)
    hd = max(a_to_b.max(), b_to_a.max())
    asd = np.concatenate([a_to_b, b_to_a]).mean()
    return hd, asd
