"""Deterministic generator of synthetic building collections with ground
truth planes, expected segments and repetition flags.

Buildings are unions of axis-aligned boxes (a base massing plus optional
rooftop boxes) minus alcove boxes carved into vertical walls, posed by a
rotation about z and a translation. Exposed faces are computed exactly with
rectilinear boolean operations, then sampled with Gaussian position noise.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field as dc_field
from typing import Optional, Sequence

import numpy as np
from shapely import contains_xy
from shapely.geometry import box as shapely_box
from shapely.geometry import Polygon, MultiPolygon
from shapely.ops import unary_union

from .geometry import Plane, PointCloud, rotation_about_z

log = logging.getLogger(__name__)


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class Box:
    center: tuple[float, float, float]
    size: tuple[float, float, float]

    def __post_init__(self):
        if any(s <= 0 for s in self.size):
            raise SceneError("box sizes must be positive")

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.center) - 0.5 * np.asarray(self.size)

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.center) + 0.5 * np.asarray(self.size)


@dataclass(frozen=True)
class BuildingSpec:
    """One parametric building: base boxes are unioned, rooftop boxes sit on
    a base roof, alcove boxes are carved into a vertical base wall."""

    name: str
    base: tuple[Box, ...]
    rooftops: tuple[Box, ...] = ()
    alcoves: tuple[Box, ...] = ()
    rotation_deg: float = 0.0
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)


@dataclass(frozen=True)
class SceneSpec:
    name: str
    buildings: tuple[BuildingSpec, ...]
    noise_sigma: float = 0.0
    density: float = 50.0
    seed: int = 0

    def __post_init__(self):
        if self.density <= 0:
            raise SceneError("density must be positive")
        if self.noise_sigma < 0:
            raise SceneError("noise_sigma must be non-negative")


@dataclass(frozen=True)
class TruthPlane:
    """A ground-truth exposed face: supporting plane plus polygon."""

    plane: Plane
    polygon_world: np.ndarray  # (k, 3) exterior ring
    holes_world: tuple[np.ndarray, ...]
    area: float
    component: str  # base / rooftop<i> / alcove<i>

    @property
    def is_vertical(self) -> bool:
        return abs(self.plane.normal[2]) < 0.5


@dataclass(frozen=True)
class TruthSegment:
    name: str
    plane_ids: tuple[int, ...]  # vertical ground-truth faces (hitlist-visible)
    all_plane_ids: tuple[int, ...]
    repetitive: bool
    volume: float  # enclosed volume of the component, m^3


@dataclass(frozen=True)
class BuildingTruth:
    name: str
    planes: tuple[TruthPlane, ...]
    segments: tuple[TruthSegment, ...]


@dataclass(frozen=True)
class GeneratedBuilding:
    name: str
    cloud: PointCloud
    truth: BuildingTruth


@dataclass(frozen=True)
class Scene:
    spec: SceneSpec
    buildings: tuple[GeneratedBuilding, ...]

    def clouds(self) -> list[PointCloud]:
        return [b.cloud for b in self.buildings]


# ---------------------------------------------------------------------------
# Exact exposed-surface construction for axis-aligned box CSG.
# ---------------------------------------------------------------------------

_AXES = ((1, 2), (0, 2), (0, 1))  # in-plane axes per face axis


def _face_rect(box: Box, axis: int, side: int) -> tuple[float, Polygon]:
    a, b = _AXES[axis]
    lo, hi = box.lo, box.hi
    coord = float(hi[axis] if side else lo[axis])
    return coord, shapely_box(lo[a], lo[b], hi[a], hi[b])


def _cross_section(box: Box, axis: int) -> Polygon:
    a, b = _AXES[axis]
    return shapely_box(box.lo[a], box.lo[b], box.hi[a], box.hi[b])


def _interval_overlap(lo1, hi1, lo2, hi2) -> float:
    return min(hi1, hi2) - max(lo1, lo2)


def _validate(spec: BuildingSpec):
    eps = 1e-9
    for i, pa in enumerate(spec.base):
        for pb in spec.base[i + 1 :]:
            ov = [_interval_overlap(pa.lo[d], pa.hi[d], pb.lo[d], pb.hi[d]) for d in range(3)]
            if all(o > eps for o in ov):
                continue  # full-dimensional union overlap
            if min(ov) < -eps:
                continue  # disjoint with a gap
            zero = [abs(o) <= eps for o in ov]
            if zero.count(True) == 1 and all(o > eps for o, z in zip(ov, zero) if not z):
                continue  # clean face-to-face glue
            raise SceneError(f"non-manifold union between base boxes of {spec.name}")
    for r in spec.rooftops:
        hosts = [
            b
            for b in spec.base
            if abs(r.lo[2] - b.hi[2]) <= eps
            and r.lo[0] > b.lo[0] + eps
            and r.hi[0] < b.hi[0] - eps
            and r.lo[1] > b.lo[1] + eps
            and r.hi[1] < b.hi[1] - eps
        ]
        if len(hosts) != 1:
            raise SceneError(f"rooftop box of {spec.name} must sit strictly inside one roof")
    for al in spec.alcoves:
        if _alcove_host(spec, al) is None:
            raise SceneError(
                f"alcove box of {spec.name} must open through exactly one vertical wall"
            )


def _alcove_host(spec: BuildingSpec, al: Box) -> Optional[tuple[Box, int, int]]:
    """(host box, axis, side) of the wall the alcove opens through."""
    eps = 1e-9
    for b in spec.base:
        for axis in (0, 1):
            a1, a2 = _AXES[axis]
            inside_side = (
                al.lo[a1] > b.lo[a1] + eps
                and al.hi[a1] < b.hi[a1] - eps
                and al.lo[a2] > b.lo[a2] + eps
                and al.hi[a2] < b.hi[a2] - eps
            )
            if not inside_side:
                continue
            if abs(al.hi[axis] - b.hi[axis]) <= eps and al.lo[axis] > b.lo[axis] + eps:
                return b, axis, 1
            if abs(al.lo[axis] - b.lo[axis]) <= eps and al.hi[axis] < b.hi[axis] - eps:
                return b, axis, 0
    return None


def _exposed_faces(spec: BuildingSpec) -> list[tuple[Plane, Polygon, str]]:
    """Exposed surface as (plane, in-plane polygon, component tag) triples,
    coplanar same-orientation faces merged. In-plane coordinates follow
    _AXES order for the face axis."""
    _validate(spec)
    positives = list(spec.base) + list(spec.rooftops)
    pos_tags = ["base"] * len(spec.base) + [f"rooftop{i}" for i in range(len(spec.rooftops))]
    eps = 1e-9

    # Group coplanar faces of equal orientation, subtract occluders, merge.
    buckets: dict[tuple[int, int, float], list[tuple[Polygon, str]]] = {}
    for bi, pbox in enumerate(positives):
        for axis in range(3):
            for side in (0, 1):
                coord, rect = _face_rect(pbox, axis, side)
                piece: Polygon | MultiPolygon = rect
                outward = 1.0 if side else -1.0
                for oj, other in enumerate(positives):
                    if oj == bi:
                        continue
                    # Occlusion: the other box covers this face where its
                    # axis-interval strictly contains the plane or touches it
                    # from the outer side.
                    olo, ohi = other.lo[axis], other.hi[axis]
                    crosses = olo + eps < coord < ohi - eps
                    glued_outside = (
                        abs((olo if side else ohi) - coord) <= eps
                    )
                    if crosses or glued_outside:
                        piece = piece.difference(_cross_section(other, axis))
                for al in spec.alcoves:
                    host = _alcove_host(spec, al)
                    if host and host[0] is pbox and host[1] == axis and host[2] == side:
                        piece = piece.difference(_cross_section(al, axis))
                if piece.is_empty or piece.area <= eps:
                    continue
                key = (axis, side, round(coord, 9))
                buckets.setdefault(key, []).append((piece, pos_tags[bi]))

    faces: list[tuple[Plane, Polygon, str]] = []
    for (axis, side, coord), pieces in sorted(buckets.items()):
        geom = unary_union([p for p, _ in pieces])
        tag = pieces[0][1]
        parts = list(geom.geoms) if isinstance(geom, MultiPolygon) else [geom]
        n = np.zeros(3)
        n[axis] = 1.0 if side else -1.0
        for part in sorted(parts, key=lambda g: (-g.area, g.bounds)):
            faces.append((_plane_for(axis, side, coord), part, tag))

    # Alcove cavity faces: the five non-mouth faces, normals into the cavity.
    for ai, al in enumerate(spec.alcoves):
        host_box, haxis, hside = _alcove_host(spec, al)
        for axis in range(3):
            for side in (0, 1):
                if axis == haxis and side == hside:
                    continue  # mouth
                coord, rect = _face_rect(al, axis, side)
                # Outward from the solid = into the cavity = opposite of the
                # box-outward direction.
                faces.append((_plane_for(axis, 1 - side, coord), rect, f"alcove{ai}"))
    return faces


def _plane_for(axis: int, side: int, coord: float) -> Plane:
    n = np.zeros(3)
    n[axis] = 1.0 if side else -1.0
    return Plane(n, float(n[axis] * coord))


def _lift(axis: int, coord: float, xy: np.ndarray) -> np.ndarray:
    a, b = _AXES[axis]
    out = np.zeros((len(xy), 3))
    out[:, axis] = coord
    out[:, a] = xy[:, 0]
    out[:, b] = xy[:, 1]
    return out


def _sample_polygon(poly: Polygon, n: int, rng: np.random.Generator) -> np.ndarray:
    from .sampling import sample_polygon

    return sample_polygon(poly, n, rng)


def generate_building(spec: BuildingSpec, scene: SceneSpec, index: int) -> GeneratedBuilding:
    rng = np.random.default_rng([scene.seed, index])
    faces = _exposed_faces(spec)
    R = rotation_about_z(np.radians(spec.rotation_deg))
    t = np.asarray(spec.translation, dtype=float)

    pts_parts = []
    nrm_parts = []
    truth_planes: list[TruthPlane] = []
    for plane, poly, tag in faces:
        axis = int(np.argmax(np.abs(plane.normal)))
        coord = plane.offset * plane.normal[axis]
        n_pts = max(4, int(round(scene.density * poly.area)))
        xy = _sample_polygon(poly, n_pts, rng)
        local3 = _lift(axis, coord, xy)
        world = local3 @ R.T + t
        normal_w = R @ plane.normal
        pts_parts.append(world)
        nrm_parts.append(np.tile(normal_w, (len(world), 1)))

        ext = np.asarray(poly.exterior.coords[:-1])
        holes = tuple(
            _lift(axis, coord, np.asarray(ring.coords[:-1])) @ R.T + t
            for ring in poly.interiors
        )
        truth_planes.append(
            TruthPlane(
                plane=Plane.from_point_normal(
                    R @ _lift(axis, coord, ext[:1])[0] + t, normal_w
                ),
                polygon_world=_lift(axis, coord, ext) @ R.T + t,
                holes_world=holes,
                area=float(poly.area),
                component=tag,
            )
        )

    points = np.concatenate(pts_parts)
    if scene.noise_sigma > 0:
        points = points + rng.normal(0.0, scene.noise_sigma, points.shape)
    normals = np.concatenate(nrm_parts)
    cloud = PointCloud(points, normals)

    segments = _truth_segments(spec, truth_planes)
    return GeneratedBuilding(
        name=spec.name,
        cloud=cloud,
        truth=BuildingTruth(name=spec.name, planes=tuple(truth_planes), segments=segments),
    )


def _truth_segments(spec: BuildingSpec, planes: Sequence[TruthPlane]) -> tuple[TruthSegment, ...]:
    def ids_for(tag: str, vertical_only: bool) -> tuple[int, ...]:
        return tuple(
            i
            for i, p in enumerate(planes)
            if p.component == tag and (p.is_vertical or not vertical_only)
        )

    segs = [
        TruthSegment(
            name="main",
            plane_ids=ids_for("base", True),
            all_plane_ids=ids_for("base", False),
            repetitive=False,
            volume=float(sum(np.prod(b.size) for b in spec.base)),
        )
    ]
    for i, r in enumerate(spec.rooftops):
        tag = f"rooftop{i}"
        segs.append(
            TruthSegment(
                name=tag,
                plane_ids=ids_for(tag, True),
                all_plane_ids=ids_for(tag, False),
                repetitive=False,
                volume=float(np.prod(r.size)),
            )
        )
    for i, a in enumerate(spec.alcoves):
        tag = f"alcove{i}"
        segs.append(
            TruthSegment(
                name=tag,
                plane_ids=ids_for(tag, True),
                all_plane_ids=ids_for(tag, False),
                repetitive=False,
                volume=float(np.prod(a.size)),
            )
        )
    return tuple(segs)


def _mark_repetitive(buildings: list[GeneratedBuilding], specs: Sequence[BuildingSpec]):
    sizes: dict[tuple, int] = {}
    keys_per_building: list[list[tuple]] = []
    for spec in specs:
        keys = []
        for seg_src, boxes in (("rooftop", spec.rooftops), ("alcove", spec.alcoves)):
            for b in boxes:
                key = (seg_src, tuple(round(s, 6) for s in sorted(b.size)))
                sizes[key] = sizes.get(key, 0) + 1
                keys.append(key)
        keys_per_building.append(keys)
    out = []
    for gb, spec, keys in zip(buildings, specs, keys_per_building):
        new_segs = []
        ki = 0
        for seg in gb.truth.segments:
            if seg.name == "main":
                new_segs.append(seg)
                continue
            key = keys[ki]
            ki += 1
            new_segs.append(
                TruthSegment(
                    name=seg.name,
                    plane_ids=seg.plane_ids,
                    all_plane_ids=seg.all_plane_ids,
                    repetitive=sizes[key] >= 2,
                    volume=seg.volume,
                )
            )
        out.append(
            GeneratedBuilding(
                name=gb.name,
                cloud=gb.cloud,
                truth=BuildingTruth(gb.truth.name, gb.truth.planes, tuple(new_segs)),
            )
        )
    return out


def generate(spec: SceneSpec) -> Scene:
    """Deterministically sample the scene; identical spec -> identical bytes."""
    buildings = [generate_building(b, spec, i) for i, b in enumerate(spec.buildings)]
    buildings = _mark_repetitive(buildings, spec.buildings)
    return Scene(spec=spec, buildings=tuple(buildings))


def truth_to_dict(scene: Scene) -> dict:
    out = {"scene": scene.spec.name, "buildings": []}
    for b in scene.buildings:
        planes = [
            {
                "normal": p.plane.normal.tolist(),
                "offset": p.plane.offset,
                "area": p.area,
                "component": p.component,
                "vertical": bool(p.is_vertical),
            }
            for p in b.truth.planes
        ]
        segs = [
            {
                "name": s.name,
                "plane_ids": list(s.plane_ids),
                "all_plane_ids": list(s.all_plane_ids),
                "repetitive": s.repetitive,
                "volume": s.volume,
            }
            for s in b.truth.segments
        ]
        out["buildings"].append({"name": b.name, "planes": planes, "segments": segs})
    return out


def save_truth(scene: Scene, path) -> None:
    with open(path, "w") as fh:
        json.dump(truth_to_dict(scene), fh, indent=1, sort_keys=True)


# ---------------------------------------------------------------------------
# Canonical fixtures: one per hard mechanism of the pipeline.
# ---------------------------------------------------------------------------


def twin_towers(seed: int = 7) -> SceneSpec:
    """Four identical towers with a small rooftop box: the repetition test
    for joint LOD0 selection (drop the rooftop everywhere or nowhere)."""
    buildings = []
    rotations = (0.0, 90.0, 30.0, 0.0)
    for i in range(4):
        buildings.append(
            BuildingSpec(
                name=f"tower{i}",
                base=(Box((5.0, 5.0, 5.0), (10.0, 10.0, 10.0)),),
                rooftops=(Box((5.0, 5.0, 11.0), (2.0, 2.0, 2.0)),),
                rotation_deg=rotations[i],
                translation=(18.0 * i, 0.0, 0.0),
            )
        )
    return SceneSpec(
        name="twin-towers", buildings=tuple(buildings), noise_sigma=0.01, density=40.0, seed=seed
    )


def alcove_row(seed: int = 11) -> SceneSpec:
    """Three identical cross-shaped buildings with a recessed doorway.

    Every wall piece of the cross lies between 80 and 200 m^2, so the
    default area threshold keeps them upright while a 200 m^2 threshold
    inverts them, which lets the concave notches consume structural walls
    (the degradation mode of overgrown thresholds). The doorway alcove
    faces are 12 to 24 m^2: undetectable at 10, detected at 80."""
    h = 13.0
    slab_x = Box((0.0, 0.0, h / 2), (23.0, 9.0, h))  # arms along x
    slab_y = Box((0.0, 0.0, h / 2), (9.0, 23.0, h))  # arms along y
    alcove = Box((0.0, 10.5, 4.0), (4.0, 2.0, 6.0))  # carved into the north end wall
    buildings = []
    rotations = (0.0, 0.0, 90.0)
    for i in range(3):
        buildings.append(
            BuildingSpec(
                name=f"cross{i}",
                base=(slab_x, slab_y),
                alcoves=(alcove,),
                rotation_deg=rotations[i],
                translation=(30.0 * i, 0.0, 0.0),
            )
        )
    return SceneSpec(
        name="alcove-row", buildings=tuple(buildings), noise_sigma=0.01, density=28.0, seed=seed
    )


def mixed_campus(seed: int = 23) -> SceneSpec:
    """Eight buildings with rooftop appendages in two shape classes, the
    substrate for three-layer spectral assignment."""
    big = (4.0, 3.0, 1.5)  # slab-like appendages -> LOD1
    small = (1.5, 1.5, 1.0)  # cube-like appendages -> LOD2
    buildings = []
    layouts = [
        ((12.0, 12.0, 12.0), [("big", (-2.5, 0.0)), ("small", (3.5, 3.5))]),
        ((11.0, 13.0, 11.0), [("big", (0.0, -3.0))]),
        ((13.0, 11.0, 12.0), [("small", (-3.5, -2.5)), ("small", (3.0, 2.0))]),
        ((12.0, 12.0, 13.0), [("big", (2.5, -2.0)), ("small", (-3.5, 3.0))]),
        ((11.0, 11.0, 12.0), [("big", (0.0, 2.5))]),
        ((13.0, 13.0, 11.0), [("small", (4.0, -3.5))]),
        ((12.0, 11.0, 12.0), [("big", (-2.0, 2.0)), ("small", (3.5, -3.0))]),
        ((11.0, 12.0, 11.0), [("big", (2.0, 2.5)), ("big", (-3.0, -2.5))]),
    ]
    rotations = (0.0, 30.0, 0.0, 60.0, 90.0, 0.0, 45.0, 0.0)
    for i, (base_size, apps) in enumerate(layouts):
        bx, by, bz = base_size
        rooftops = []
        for kind, (ax, ay) in apps:
            w, d, hh = big if kind == "big" else small
            rooftops.append(Box((ax, ay, bz + hh / 2), (w, d, hh)))
        buildings.append(
            BuildingSpec(
                name=f"campus{i}",
                base=(Box((0.0, 0.0, bz / 2), (bx, by, bz)),),
                rooftops=tuple(rooftops),
                rotation_deg=rotations[i],
                translation=(22.0 * (i % 4), 24.0 * (i // 4), 0.0),
            )
        )
    return SceneSpec(
        name="mixed-campus", buildings=tuple(buildings), noise_sigma=0.015, density=55.0, seed=seed
    )


FIXTURES = {
    "twin-towers": twin_towers,
    "alcove-row": alcove_row,
    "mixed-campus": mixed_campus,
}
