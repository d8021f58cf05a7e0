"""Case generation: rasterized organs, derived station labels, node instances.

Everything is a pure function of (config, seed). Noise comes from a
counter-based generator (Philox) keyed by the seed, so values are independent
of evaluation order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigurationError
from ..metrics import distance_transform
from ..seeds import mix, rng_for
from .config import OrganSpec, PhantomConfig, StationRule


@dataclass
class CaseRecord:
    case_id: str
    image: np.ndarray               # float32 (z, y, x)
    organ_labels: np.ndarray        # uint8, 0 background
    station_labels: np.ndarray      # uint8, 0 none
    spacing: tuple[float, float, float]
    ln_instances: list[tuple[tuple[int, int, int], int]]   # ((x,y,z), station id)
    meta: dict = field(default_factory=dict)

    @property
    def extents(self) -> tuple[int, int, int]:
        nz, ny, nx = self.image.shape
        return (nx, ny, nz)


def _coordinate_grids(extents, spacing):
    nx, ny, nz = extents
    sx, sy, sz = spacing
    zz, yy, xx = np.meshgrid(np.arange(nz) * sz, np.arange(ny) * sy,
                             np.arange(nx) * sx, indexing="ij")
    return xx, yy, zz


def _rasterize_organ(spec: OrganSpec, center, size, grids) -> np.ndarray:
    xx, yy, zz = grids
    cx, cy, cz = center
    rx, ry, rz = size
    if spec.shape == "ellipsoid":
        return (((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2
                + ((zz - cz) / rz) ** 2) <= 1.0
    if spec.shape == "tube":
        radial = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2
        return (radial <= 1.0) & (np.abs(zz - cz) <= rz)
    if spec.shape == "box":
        return ((np.abs(xx - cx) <= rx) & (np.abs(yy - cy) <= ry)
                & (np.abs(zz - cz) <= rz))
    raise ConfigurationError(f"unknown shape family {spec.shape!r}")


def _organ_centroid_mm(mask: np.ndarray, spacing) -> np.ndarray:
    zz, yy, xx = np.nonzero(mask)
    sx, sy, sz = spacing
    return np.array([xx.mean() * sx, yy.mean() * sy, zz.mean() * sz])


def lns_from_organs(organ_labels: np.ndarray, legend: dict[str, int],
                    rules: list[StationRule], spacing) -> np.ndarray:
    """Assign station labels from organ labels via band + half-space rules.

    A voxel gets station s iff it lies in rule s's distance band from the
    source organ, satisfies every half-space predicate, is not inside any
    organ, and no earlier rule claimed it. Stations whose source or predicate
    organ is absent from the map come out empty.
    """
    for rule in rules:
        if rule.source not in legend:
            raise ConfigurationError(
                f"rule {rule.station!r} references organ {rule.source!r} "
                "missing from the legend")
        for organ, _, _ in rule.predicates:
            if organ not in legend:
                raise ConfigurationError(
                    f"rule {rule.station!r} predicate references organ {organ!r} "
                    "missing from the legend")
    labels = np.asarray(organ_labels)
    out = np.zeros(labels.shape, dtype=np.uint8)
    nz, ny, nx = labels.shape
    grids = _coordinate_grids((nx, ny, nz), spacing)
    free = labels == 0
    claimed = np.zeros(labels.shape, dtype=bool)
    for sid, rule in enumerate(rules, start=1):
        source_mask = labels == legend[rule.source]
        if not source_mask.any():
            continue
        dist = distance_transform(source_mask, spacing)
        inner, outer = rule.band
        region = (dist >= inner) & (dist < outer)
        ok = True
        for organ, axis, side in rule.predicates:
            organ_mask = labels == legend[organ]
            if not organ_mask.any():
                ok = False
                break
            centroid = _organ_centroid_mm(organ_mask, spacing)
            coord = grids["xyz".index(axis)]
            pivot = centroid["xyz".index(axis)]
            region &= (coord < pivot) if side == "below" else (coord >= pivot)
        if not ok:
            continue
        region &= free & ~claimed
        out[region] = sid
        claimed |= region
    return out


def margin_infer_baseline(predicted_organ_labels: np.ndarray, legend: dict[str, int],
                          rules: list[StationRule], spacing) -> np.ndarray:
    """Infer stations by applying the margin rules to *predicted* organ labels.

    Same engine as the ground-truth derivation; the comparison baseline simply
    consumes imperfect organ masks (and, typically, perturbed margins).
    """
    return lns_from_organs(predicted_organ_labels, legend, rules, spacing)


def perturb_rules(rules: list[StationRule], fraction: float, seed: int) -> list[StationRule]:
    """Scale every band edge by an independent factor in [1-f, 1+f]."""
    out = []
    for i, rule in enumerate(rules):
        rng = rng_for(seed, "margin", i)
        fi, fo = 1.0 + fraction * rng.uniform(-1.0, 1.0, size=2)
        inner = max(rule.band[0] * fi, 0.0)
        outer = max(rule.band[1] * fo, inner + 0.5)
        out.append(StationRule(rule.station, rule.source, (inner, outer),
                               rule.predicates))
    return out


def station_voxel_counts(station_labels: np.ndarray, rules) -> dict[str, int]:
    return {rule.station: int((station_labels == sid).sum())
            for sid, rule in enumerate(rules, start=1)}


def generate_case(config: PhantomConfig, seed: int, case_id: str | None = None) -> CaseRecord:
    """Deterministically build one synthetic case from (config, seed)."""
    config.validate()
    nx, ny, nz = config.extents
    spacing = config.spacing
    grids = _coordinate_grids(config.extents, spacing)
    legend = config.organ_legend()

    pose_rng = rng_for(seed, "pose")
    body_shift = pose_rng.uniform(-1.0, 1.0, size=3) * np.array(config.body_jitter)

    organ_labels = np.zeros((nz, ny, nx), dtype=np.uint8)
    image = np.full((nz, ny, nx), config.background, dtype=np.float64)
    for spec in config.organs:
        org_rng = rng_for(seed, "organ", spec.name)
        center = (np.array(spec.center) + body_shift
                  + org_rng.uniform(-1.0, 1.0, size=3) * np.array(spec.center_jitter))
        scale = 1.0 + spec.scale_jitter * org_rng.uniform(-1.0, 1.0)
        size = np.maximum(np.array(spec.size) * scale, 0.5)
        mask = _rasterize_organ(spec, center, size, grids)
        mask &= organ_labels == 0          # earlier organs keep their claim
        organ_labels[mask] = legend[spec.name]
        image[mask] += spec.intensity

    station_labels = lns_from_organs(organ_labels, legend, config.stations, spacing)
    warnings = [f"station {rule.station!r} produced no voxels"
                for rule, count in zip(config.stations,
                                       station_voxel_counts(station_labels,
                                                            config.stations).values())
                if count == 0]

    node_rng = rng_for(seed, "nodes")
    lo, hi = config.node_count_range
    n_nodes = int(node_rng.integers(lo, hi + 1))
    station_ids = [sid for sid, rule in enumerate(config.stations, start=1)
                   if (station_labels == sid).any()]
    ln_instances: list[tuple[tuple[int, int, int], int]] = []
    zz_idx, yy_idx, xx_idx = None, None, None
    for _ in range(n_nodes):
        if not station_ids:
            break
        sid = int(node_rng.choice(station_ids))
        zz_idx, yy_idx, xx_idx = np.nonzero(station_labels == sid)
        pick = int(node_rng.integers(0, zz_idx.size))
        cz, cy, cx = int(zz_idx[pick]), int(yy_idx[pick]), int(xx_idx[pick])
        radius = int(node_rng.integers(config.node_radius_range[0],
                                       config.node_radius_range[1] + 1))
        z0, z1 = max(cz - radius, 0), min(cz + radius + 1, nz)
        y0, y1 = max(cy - radius, 0), min(cy + radius + 1, ny)
        x0, x1 = max(cx - radius, 0), min(cx + radius + 1, nx)
        zb, yb, xb = np.meshgrid(np.arange(z0, z1), np.arange(y0, y1),
                                 np.arange(x0, x1), indexing="ij")
        sphere = ((zb - cz) ** 2 + (yb - cy) ** 2 + (xb - cx) ** 2) <= radius ** 2
        patch = image[z0:z1, y0:y1, x0:x1]
        patch[sphere] += config.node_intensity
        ln_instances.append(((cx, cy, cz), sid))

    if config.noise_sigma > 0:
        noise_rng = rng_for(seed, "noise")
        image += noise_rng.standard_normal(image.shape) * config.noise_sigma

    meta = {
        "seed": int(seed),
        "config_hash": config.hash(),
        "key_organs": list(config.key_organs),
        "warnings": warnings,
        "organ_legend": legend,
        "station_legend": config.station_legend(),
        "zones": dict(config.zones),
    }
    return CaseRecord(
        case_id=case_id or f"case_{seed:016x}",
        image=image.astype(np.float32),
        organ_labels=organ_labels,
        station_labels=station_labels,
        spacing=tuple(spacing),
        ln_instances=ln_instances,
        meta=meta,
    )


def cohort_seeds(master_seed: int, count: int) -> list[int]:
    """Per-case seeds derived from the master seed by index mixing."""
    return [mix(master_seed, "case", i) for i in range(count)]
