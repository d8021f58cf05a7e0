"""Phantom configuration: organ layout, station rules, contrast budget.

Coordinates are physical millimetres with voxel centers at index*spacing;
extents and spacing are given (x, y, z) while arrays are stored (z, y, x),
x-fastest. The y axis reads anterior (small) to posterior (large).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

from ..errors import ConfigurationError

SHAPE_FAMILIES = ("ellipsoid", "tube", "box")
AXES = ("x", "y", "z")
SIDES = ("below", "above")


@dataclass
class OrganSpec:
    """One geometric organ: a shape family plus pose/size jitter ranges.

    `size` means radii for an ellipsoid, (radius, radius, half-length) for a
    z-aligned tube, and half-extents for a box, all in mm. `intensity` is the
    offset from the background level.
    """

    name: str
    shape: str
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    intensity: float
    anchor: bool = False
    air: bool = False
    center_jitter: tuple[float, float, float] = (2.0, 2.0, 2.0)
    scale_jitter: float = 0.15


@dataclass
class StationRule:
    """A distance band from a source organ cut by half-space predicates.

    `band` is [inner, outer) in mm from the source organ's voxels. Each
    predicate (organ, axis, side) keeps voxels on the given side of that
    organ's centroid along the axis ("above" means coordinate >= centroid).
    Organ voxels, including air-filled organs, are always excluded. Earlier
    rules claim voxels first.
    """

    station: str
    source: str
    band: tuple[float, float]
    predicates: tuple[tuple[str, str, str], ...] = ()


@dataclass
class PhantomConfig:
    extents: tuple[int, int, int] = (64, 64, 32)          # (x, y, z) voxels
    spacing: tuple[float, float, float] = (1.0, 1.0, 2.0)  # mm per axis
    background: float = 0.0
    noise_sigma: float = 10.0
    body_jitter: tuple[float, float, float] = (5.0, 5.0, 3.0)
    organs: list[OrganSpec] = field(default_factory=list)
    stations: list[StationRule] = field(default_factory=list)
    key_organs: tuple[str, ...] = ()
    zones: dict[str, str] = field(default_factory=dict)
    node_count_range: tuple[int, int] = (2, 5)
    node_radius_range: tuple[int, int] = (1, 2)
    node_intensity: float = 50.0

    def organ_legend(self) -> dict[str, int]:
        return {spec.name: i + 1 for i, spec in enumerate(self.organs)}

    def station_legend(self) -> dict[str, int]:
        return {rule.station: i + 1 for i, rule in enumerate(self.stations)}

    def anchor_names(self) -> list[str]:
        return [o.name for o in self.organs if o.anchor]

    def nonanchor_names(self) -> list[str]:
        return [o.name for o in self.organs if not o.anchor]

    def validate(self) -> None:
        names = [o.name for o in self.organs]
        if len(set(names)) != len(names):
            raise ConfigurationError("organ names must be unique")
        if any(e <= 0 for e in self.extents) or any(s <= 0 for s in self.spacing):
            raise ConfigurationError("extents and spacing must be positive")
        if self.noise_sigma < 0:
            raise ConfigurationError("noise sigma must be non-negative")
        if self.noise_sigma > 0:
            for o in self.organs:
                ratio = abs(o.intensity) / self.noise_sigma
                if o.anchor and ratio < 4.0:
                    raise ConfigurationError(
                        f"anchor organ {o.name!r} contrast {ratio:.2f} sigma < 4")
                if not o.anchor and ratio > 1.5:
                    raise ConfigurationError(
                        f"non-anchor organ {o.name!r} contrast {ratio:.2f} sigma > 1.5")
        for o in self.organs:
            if o.shape not in SHAPE_FAMILIES:
                raise ConfigurationError(f"unknown shape family {o.shape!r}")
        station_names = [r.station for r in self.stations]
        if len(set(station_names)) != len(station_names):
            raise ConfigurationError("station names must be unique")
        for rule in self.stations:
            inner, outer = rule.band
            if not 0 <= inner < outer:
                raise ConfigurationError(
                    f"rule {rule.station!r}: band must satisfy 0 <= inner < outer")
            if rule.source not in names:
                raise ConfigurationError(
                    f"rule {rule.station!r} references unknown organ {rule.source!r}")
            for organ, axis, side in rule.predicates:
                if organ not in names:
                    raise ConfigurationError(
                        f"rule {rule.station!r} predicate references unknown organ {organ!r}")
                if axis not in AXES or side not in SIDES:
                    raise ConfigurationError(
                        f"rule {rule.station!r} has invalid predicate ({organ}, {axis}, {side})")
        for key in self.key_organs:
            if key not in names:
                raise ConfigurationError(f"key organ {key!r} not declared")
        for station in self.zones:
            if station not in station_names:
                raise ConfigurationError(f"zone map references unknown station {station!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True, default=str)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def config_from_dict(data: dict) -> PhantomConfig:
    organs = [OrganSpec(**{**o, "center": tuple(o["center"]), "size": tuple(o["size"]),
                           "center_jitter": tuple(o.get("center_jitter", (2.0, 2.0, 2.0)))})
              for o in data.get("organs", [])]
    stations = [StationRule(station=r["station"], source=r["source"],
                            band=tuple(r["band"]),
                            predicates=tuple(tuple(p) for p in r.get("predicates", ())))
                for r in data.get("stations", [])]
    kwargs = {k: v for k, v in data.items() if k not in ("organs", "stations")}
    for key in ("extents", "spacing", "body_jitter", "key_organs",
                "node_count_range", "node_radius_range"):
        if key in kwargs:
            kwargs[key] = tuple(kwargs[key])
    cfg = PhantomConfig(organs=organs, stations=stations, **kwargs)
    cfg.validate()
    return cfg


def default_phantom_config() -> PhantomConfig:
    """Nine organs, four stations derived from three key organs.

    Anchors carry >= 4 sigma of contrast (the air tube is dark), non-anchors
    sit within 1.5 sigma of background. Station bands grow from the three
    low-contrast key organs; half-space cuts reference the visible anchors.
    The air tube and two other organs are used by no rule.
    """
    organs = [
        OrganSpec("airway", "tube", (52.0, 16.0, 31.0), (3.5, 3.5, 31.0), -60.0,
                  anchor=True, air=True),
        OrganSpec("spine", "tube", (32.0, 52.0, 31.0), (5.5, 5.5, 31.0), 55.0,
                  anchor=True, center_jitter=(2.0, 5.0, 2.0)),
        OrganSpec("sternum", "box", (32.0, 10.0, 30.0), (10.0, 2.5, 26.0), 50.0,
                  anchor=True, center_jitter=(2.0, 2.0, 6.0)),
        OrganSpec("heart", "ellipsoid", (42.0, 34.0, 22.0), (11.0, 9.0, 11.0), 45.0,
                  anchor=True, center_jitter=(2.0, 2.0, 4.0)),
        OrganSpec("esophagus", "tube", (30.0, 40.0, 31.0), (2.8, 2.8, 31.0), 12.0,
                  center_jitter=(4.0, 4.0, 2.0)),
        OrganSpec("aorta", "tube", (20.0, 36.0, 31.0), (4.2, 4.2, 31.0), 15.0,
                  center_jitter=(4.0, 4.0, 2.0)),
        OrganSpec("thymus", "ellipsoid", (30.0, 18.0, 42.0), (8.0, 5.0, 7.0), -12.0,
                  center_jitter=(4.0, 4.0, 3.0)),
        OrganSpec("fat", "ellipsoid", (50.0, 52.0, 44.0), (4.0, 3.5, 4.0), -15.0,
                  center_jitter=(3.0, 3.0, 3.0)),
        OrganSpec("muscle", "box", (10.0, 54.0, 22.0), (3.5, 3.0, 7.0), 10.0,
                  center_jitter=(3.0, 3.0, 3.0)),
    ]
    stations = [
        StationRule("st_para_eso", "esophagus", (2.0, 9.0),
                    (("spine", "y", "below"),)),
        StationRule("st_para_aorta", "aorta", (2.0, 8.0),
                    (("sternum", "z", "above"),)),
        StationRule("st_anterior", "thymus", (2.0, 10.0),
                    (("heart", "z", "above"),)),
        StationRule("st_peri_eso", "esophagus", (9.0, 16.0),
                    (("heart", "y", "below"),)),
    ]
    cfg = PhantomConfig(
        organs=organs,
        stations=stations,
        key_organs=("esophagus", "aorta", "thymus"),
        zones={"st_para_eso": "esophageal", "st_para_aorta": "aortic",
               "st_anterior": "anterior", "st_peri_eso": "esophageal"},
    )
    cfg.validate()
    return cfg
