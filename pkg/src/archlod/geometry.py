"""Core geometric types and primitive queries shared by all pipeline stages.

All coordinates are metric (meters). Types are immutable after construction
and safe for concurrent use.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


class GeometryError(ValueError):
    """Raised for degenerate or empty geometric input."""


def _as_unit(v, tol: float = 1e-6) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v)
    if not np.isfinite(n) or n < tol:
        raise GeometryError("zero-length vector cannot be normalized")
    return v / n


@dataclass(frozen=True)
class PointCloud:
    """Oriented point sample of a building surface.

    points and normals are parallel (N, 3) arrays; normals unit length.
    """

    points: np.ndarray
    normals: np.ndarray

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=float)
        nrm = np.ascontiguousarray(self.normals, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) == 0:
            raise GeometryError("point cloud must be a non-empty (N, 3) array")
        if nrm.shape != pts.shape:
            raise GeometryError("normals must match points in shape")
        if not np.all(np.isfinite(pts)):
            raise GeometryError("point cloud contains non-finite coordinates")
        lens = np.linalg.norm(nrm, axis=1)
        if np.any(np.abs(lens - 1.0) > 1e-6):
            raise GeometryError("normals must be unit length (within 1e-6)")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "normals", nrm)

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class Plane:
    """Oriented plane {x : normal . x = offset}; the normal points outward."""

    normal: np.ndarray
    offset: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float)
        if abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise GeometryError("plane normal must be unit length (within 1e-9)")
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "offset", float(self.offset))

    @staticmethod
    def from_point_normal(point, normal) -> "Plane":
        n = _as_unit(normal)
        return Plane(n, float(np.dot(n, np.asarray(point, dtype=float))))

    def signed_distance(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.normal - self.offset

    def reversed(self) -> "Plane":
        return Plane(-self.normal, -self.offset)


@dataclass(frozen=True)
class AABB:
    """Axis-aligned bounding box, min <= max componentwise."""

    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.min, dtype=float)
        hi = np.asarray(self.max, dtype=float)
        if lo.shape != (3,) or hi.shape != (3,):
            raise GeometryError("AABB corners must be 3-vectors")
        if np.any(lo > hi):
            raise GeometryError("AABB min must not exceed max")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    @property
    def extent(self) -> np.ndarray:
        return self.max - self.min

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.extent))

    @property
    def volume(self) -> float:
        return float(np.prod(self.extent))

    def inflated(self, fraction: float) -> "AABB":
        pad = self.extent * fraction
        return AABB(self.min - pad, self.max + pad)

    def contains(self, points, tol: float = 0.0) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=float))
        ok = np.all(p >= self.min - tol, axis=1) & np.all(p <= self.max + tol, axis=1)
        return ok


@dataclass(frozen=True)
class Ray:
    """Half-line from origin along a unit direction."""

    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=float)
        d = np.asarray(self.direction, dtype=float)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise GeometryError("ray direction must be unit length (within 1e-9)")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)

    def at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction

    def transformed(self, rotation, translation) -> "Ray":
        R = np.asarray(rotation, dtype=float)
        return Ray(R @ self.origin + np.asarray(translation, dtype=float), R @ self.direction)


def plane_frame(normal) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic orthonormal in-plane basis (u, v) with u x v = normal."""
    n = np.asarray(normal, dtype=float)
    seed = np.array([0.0, 0.0, 1.0]) if abs(n[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = _as_unit(np.cross(seed, n))
    v = np.cross(n, u)
    return u, v


@dataclass(frozen=True)
class PlaneRegion:
    """A primary plane with its inlier points and footprint polygon.

    The footprint is stored as rings of 2D coordinates in the plane's local
    frame: the exterior ring is counter-clockwise (positive signed area) and
    hole rings are clockwise. ``area`` is the footprint area with holes
    subtracted.
    """

    plane: Plane
    inliers: np.ndarray
    frame_origin: np.ndarray
    frame_u: np.ndarray
    frame_v: np.ndarray
    rings: tuple[np.ndarray, ...]
    area: float
    reversed: bool = False
    orientation_confidence: float = 1.0

    def __post_init__(self):
        if not self.rings or any(len(r) < 3 for r in self.rings):
            raise GeometryError("footprint needs at least one ring of >= 3 vertices")
        if self.area <= 0:
            raise GeometryError("footprint area must be positive")

    # -- coordinate conversions -------------------------------------------

    def to_local(self, points) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=float)) - self.frame_origin
        return np.stack([p @ self.frame_u, p @ self.frame_v], axis=-1)

    def to_world(self, xy) -> np.ndarray:
        xy = np.atleast_2d(np.asarray(xy, dtype=float))
        return (
            self.frame_origin
            + xy[:, :1] * self.frame_u
            + xy[:, 1:2] * self.frame_v
        )

    def footprint_vertices(self) -> list[np.ndarray]:
        """Footprint rings lifted back to 3D, exterior first."""
        return [self.to_world(r) for r in self.rings]

    # -- membership --------------------------------------------------------

    def contains_local(self, xy, boundary_tol: float = 0.0) -> bool:
        """Winding-number containment test; boundary points count as inside."""
        wn = 0
        for ring in self.rings:
            wn += _winding_number(ring, xy)
        if wn != 0:
            return True
        if boundary_tol > 0.0:
            for ring in self.rings:
                if _distance_to_ring(ring, xy) <= boundary_tol:
                    return True
        return False

    def with_orientation_flipped(self) -> "PlaneRegion":
        """Flip normal and footprint winding (alcove handling)."""
        rings = tuple(np.ascontiguousarray(r[::-1]) for r in self.rings)
        # Mirror the local v axis so u x v still matches the flipped normal.
        return PlaneRegion(
            plane=self.plane.reversed(),
            inliers=self.inliers,
            frame_origin=self.frame_origin,
            frame_u=self.frame_u,
            frame_v=-self.frame_v,
            rings=tuple(np.ascontiguousarray(r * np.array([1.0, -1.0])) for r in rings),
            area=self.area,
            reversed=not self.reversed,
            orientation_confidence=self.orientation_confidence,
        )

    def transformed(self, rotation, translation) -> "PlaneRegion":
        R = np.asarray(rotation, dtype=float)
        t = np.asarray(translation, dtype=float)
        return PlaneRegion(
            plane=Plane.from_point_normal(R @ self.frame_origin + t, R @ self.plane.normal),
            inliers=self.inliers,
            frame_origin=R @ self.frame_origin + t,
            frame_u=R @ self.frame_u,
            frame_v=R @ self.frame_v,
            rings=self.rings,
            area=self.area,
            reversed=self.reversed,
            orientation_confidence=self.orientation_confidence,
        )


def _winding_number(ring: np.ndarray, xy) -> int:
    """Sunday winding number of point xy with respect to a closed ring."""
    x, y = float(xy[0]), float(xy[1])
    wn = 0
    n = len(ring)
    for i in range(n):
        x0, y0 = ring[i]
        x1, y1 = ring[(i + 1) % n]
        if y0 <= y:
            if y1 > y and (x1 - x0) * (y - y0) - (x - x0) * (y1 - y0) > 0:
                wn += 1
        elif y1 <= y and (x1 - x0) * (y - y0) - (x - x0) * (y1 - y0) < 0:
            wn -= 1
    return wn


def _distance_to_ring(ring: np.ndarray, xy) -> float:
    p = np.asarray(xy, dtype=float)
    a = ring
    b = np.roll(ring, -1, axis=0)
    e = b - a
    w = p - a
    ee = np.einsum("ij,ij->i", e, e)
    s = np.clip(np.einsum("ij,ij->i", w, e) / np.maximum(ee, 1e-300), 0.0, 1.0)
    proj = a + s[:, None] * e
    return float(np.min(np.linalg.norm(proj - p, axis=1)))


def region_from_polygon(
    vertices3d,
    normal=None,
    holes: Sequence = (),
    inliers=None,
) -> PlaneRegion:
    """Build a PlaneRegion from an explicit 3D polygon (mostly for tests
    and the synthetic generator). Vertices must be coplanar; the exterior
    ring is re-oriented CCW about the normal, holes CW."""
    verts = np.asarray(vertices3d, dtype=float)
    if verts.ndim != 2 or verts.shape[1] != 3 or len(verts) < 3:
        raise GeometryError("polygon needs >= 3 3D vertices")
    if normal is None:
        # Newell normal: robust for noisy near-planar loops.
        nxt = np.roll(verts, -1, axis=0)
        n = np.array(
            [
                np.sum((verts[:, 1] - nxt[:, 1]) * (verts[:, 2] + nxt[:, 2])),
                np.sum((verts[:, 2] - nxt[:, 2]) * (verts[:, 0] + nxt[:, 0])),
                np.sum((verts[:, 0] - nxt[:, 0]) * (verts[:, 1] + nxt[:, 1])),
            ]
        )
        n = _as_unit(n)
    else:
        n = _as_unit(normal)
    origin = verts.mean(axis=0)
    plane = Plane.from_point_normal(origin, n)
    u, v = plane_frame(n)

    def local(ring3d):
        r = np.asarray(ring3d, dtype=float) - origin
        return np.stack([r @ u, r @ v], axis=-1)

    ext = local(verts)
    if ring_area(ext) < 0:
        ext = ext[::-1].copy()
    rings = [ext]
    area = ring_area(ext)
    for h in holes:
        hr = local(h)
        if ring_area(hr) > 0:
            hr = hr[::-1].copy()
        rings.append(hr)
        area += ring_area(hr)
    if area <= 0:
        raise GeometryError("degenerate polygon (non-positive area)")
    return PlaneRegion(
        plane=plane,
        inliers=np.asarray(inliers if inliers is not None else [], dtype=np.int64),
        frame_origin=origin,
        frame_u=u,
        frame_v=v,
        rings=tuple(np.ascontiguousarray(r) for r in rings),
        area=float(area),
    )


def ring_area(ring: np.ndarray) -> float:
    """Signed area of a 2D ring (positive = CCW)."""
    x = ring[:, 0]
    y = ring[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def bounding_box(regions: Sequence[PlaneRegion]) -> AABB:
    """Tight AABB over all footprint vertices of all regions."""
    if not regions:
        raise GeometryError("no geometry")
    pts = []
    for reg in regions:
        pts.extend(reg.footprint_vertices())
    allp = np.concatenate(pts, axis=0)
    if len(allp) == 0:
        raise GeometryError("no geometry")
    return AABB(allp.min(axis=0), allp.max(axis=0))


@dataclass(frozen=True)
class RayHit:
    t: float
    front_facing: bool


def ray_region_intersect(ray: Ray, region: PlaneRegion) -> Optional[RayHit]:
    """First intersection of a ray with a region footprint.

    Returns the parametric distance t > 1e-9 where the ray pierces the
    supporting plane inside the footprint (boundary counts as inside), or
    None. ``front_facing`` is True when the ray origin lies on the interior
    side of the plane (signed distance < 0), i.e. the hit would count as a
    valid interior hit in the visibility stage.
    """
    n = region.plane.normal
    denom = float(np.dot(n, ray.direction))
    if abs(denom) < 1e-12:
        return None
    t = (region.plane.offset - float(np.dot(n, ray.origin))) / denom
    if t <= 1e-9:
        return None
    pt = ray.at(t)
    xy = region.to_local(pt)[0]
    if not region.contains_local(xy, boundary_tol=1e-9):
        return None
    return RayHit(t=float(t), front_facing=float(np.dot(n, ray.origin)) - region.plane.offset < 0.0)


def rotation_about_z(angle_rad: float) -> np.ndarray:
    c, s = np.cos(angle_rad), np.sin(angle_rad)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def fit_plane_pca(points) -> Plane:
    """Least-squares plane through points via PCA (normal = smallest axis)."""
    pts = np.asarray(points, dtype=float)
    if len(pts) < 3:
        raise GeometryError("plane fit needs >= 3 points")
    centroid = pts.mean(axis=0)
    cov = np.cov((pts - centroid).T)
    w, vecs = np.linalg.eigh(cov)
    return Plane.from_point_normal(centroid, vecs[:, 0])
