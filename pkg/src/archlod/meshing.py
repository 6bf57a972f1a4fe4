"""Watertight polygonal mesh extraction.

A layer's planes partition the building bounding box into convex cells
(binary space partitioning restricted to cells the plane actually crosses,
which yields the plane arrangement). Cells are labeled interior/exterior by
ray voting against the layer footprints, the largest connected interior
component is kept, and its boundary faces are stitched into a watertight
polygonal mesh with coplanar faces merged.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field as dc_field
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree
from shapely.geometry import Polygon, MultiPolygon
from shapely.geometry.polygon import orient as shapely_orient
from shapely.ops import unary_union

from . import kernels
from .geometry import AABB, GeometryError, Plane, PlaneRegion, plane_frame

log = logging.getLogger(__name__)

MAX_CELLS = 1_000_000
SPLIT_TOL = 1e-9
WELD_TOL = 1e-6


class MeshExtractionError(RuntimeError):
    pass


@dataclass
class CellFace:
    plane_key: int  # >= 0: input plane index; -1..-6: bounding box walls
    verts: np.ndarray  # (k, 3) loop, CCW about the outward normal
    normal: np.ndarray  # outward unit normal
    offset: float

    def centroid(self) -> np.ndarray:
        return self.verts.mean(axis=0)


@dataclass
class ConvexCell:
    id: int
    faces: list

    _volume: Optional[float] = dc_field(default=None, repr=False)
    _centroid: Optional[np.ndarray] = dc_field(default=None, repr=False)

    @property
    def volume(self) -> float:
        if self._volume is None:
            self._volume, self._centroid = _volume_centroid(self.faces)
        return self._volume

    @property
    def centroid(self) -> np.ndarray:
        if self._centroid is None:
            self._volume, self._centroid = _volume_centroid(self.faces)
        return self._centroid

    def min_slack(self, point) -> float:
        """Smallest halfspace margin; >= 0 means the point is inside."""
        p = np.asarray(point, dtype=float)
        return min(f.offset - float(f.normal @ p) for f in self.faces)


def _volume_centroid(faces) -> tuple[float, np.ndarray]:
    vol = 0.0
    cent = np.zeros(3)
    for f in faces:
        v = f.verts
        for i in range(1, len(v) - 1):
            a, b, c = v[0], v[i], v[i + 1]
            t = float(np.dot(a, np.cross(b, c))) / 6.0
            vol += t
            cent += t * (a + b + c) / 4.0
    if vol <= 0:
        return 0.0, np.zeros(3)
    return vol, cent / vol


def _face_from_loop(plane_key: int, verts: np.ndarray, outward: np.ndarray) -> CellFace:
    n = np.asarray(outward, dtype=float)
    n = n / np.linalg.norm(n)
    loop = np.asarray(verts, dtype=float)
    if _loop_normal(loop) @ n < 0:
        loop = loop[::-1].copy()
    return CellFace(plane_key=plane_key, verts=loop, normal=n, offset=float(n @ loop[0]))


def _loop_normal(verts: np.ndarray) -> np.ndarray:
    nxt = np.roll(verts, -1, axis=0)
    n = np.array(
        [
            np.sum((verts[:, 1] - nxt[:, 1]) * (verts[:, 2] + nxt[:, 2])),
            np.sum((verts[:, 2] - nxt[:, 2]) * (verts[:, 0] + nxt[:, 0])),
            np.sum((verts[:, 0] - nxt[:, 0]) * (verts[:, 1] + nxt[:, 1])),
        ]
    )
    norm = np.linalg.norm(n)
    return n / norm if norm > 0 else np.array([0.0, 0.0, 1.0])


def cell_from_bbox(bbox: AABB, cell_id: int = 0) -> ConvexCell:
    lo, hi = bbox.min, bbox.max
    corners = {
        (i, j, k): np.array(
            [hi[0] if i else lo[0], hi[1] if j else lo[1], hi[2] if k else lo[2]]
        )
        for i in (0, 1)
        for j in (0, 1)
        for k in (0, 1)
    }
    quads = [
        (-1, [(0, 0, 0), (0, 0, 1), (0, 1, 1), (0, 1, 0)], [-1, 0, 0]),
        (-2, [(1, 0, 0), (1, 1, 0), (1, 1, 1), (1, 0, 1)], [1, 0, 0]),
        (-3, [(0, 0, 0), (1, 0, 0), (1, 0, 1), (0, 0, 1)], [0, -1, 0]),
        (-4, [(0, 1, 0), (0, 1, 1), (1, 1, 1), (1, 1, 0)], [0, 1, 0]),
        (-5, [(0, 0, 0), (0, 1, 0), (1, 1, 0), (1, 0, 0)], [0, 0, -1]),
        (-6, [(0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1)], [0, 0, 1]),
    ]
    faces = [
        _face_from_loop(key, np.stack([corners[c] for c in cs]), np.asarray(n, float))
        for key, cs, n in quads
    ]
    return ConvexCell(id=cell_id, faces=faces)


def _clip_loop(verts: np.ndarray, n: np.ndarray, d: float, keep_below: bool):
    """Sutherland-Hodgman clip of a loop against n.x <= d (or >= d)."""
    sd = verts @ n - d
    if keep_below:
        inside = sd <= SPLIT_TOL
    else:
        inside = sd >= -SPLIT_TOL
    out = []
    cap_pts = []
    k = len(verts)
    for i in range(k):
        j = (i + 1) % k
        vi, vj = verts[i], verts[j]
        si, sj = sd[i], sd[j]
        ini, inj = inside[i], inside[j]
        if ini:
            out.append(vi)
            if abs(si) <= SPLIT_TOL:
                cap_pts.append(vi)
        if ini != inj and abs(si) > SPLIT_TOL and abs(sj) > SPLIT_TOL:
            t = si / (si - sj)
            p = vi + t * (vj - vi)
            out.append(p)
            cap_pts.append(p)
    if len(out) < 3:
        return None, cap_pts
    return np.asarray(out), cap_pts


def split_cell(cell: ConvexCell, plane: Plane, plane_key: int, next_id) -> Optional[tuple]:
    """Split a convex cell by a plane; None when the plane misses its
    interior. Children get fresh ids from next_id()."""
    n, d = plane.normal, plane.offset
    has_below = False
    has_above = False
    for f in cell.faces:
        sd = f.verts @ n - d
        if np.any(sd < -SPLIT_TOL):
            has_below = True
        if np.any(sd > SPLIT_TOL):
            has_above = True
        if has_below and has_above:
            break
    if not (has_below and has_above):
        return None
    below_faces = []
    above_faces = []
    cap: list[np.ndarray] = []
    for f in cell.faces:
        lo, cap_lo = _clip_loop(f.verts, n, d, keep_below=True)
        hi, _ = _clip_loop(f.verts, n, d, keep_below=False)
        if lo is not None:
            below_faces.append(_face_from_loop(f.plane_key, lo, f.normal))
        if hi is not None:
            above_faces.append(_face_from_loop(f.plane_key, hi, f.normal))
        cap.extend(cap_lo)
    cap_ring = _order_cap(cap, n)
    if cap_ring is None or not below_faces or not above_faces:
        return None
    below_faces.append(_face_from_loop(plane_key, cap_ring, n))
    above_faces.append(_face_from_loop(plane_key, cap_ring[::-1].copy(), -n))
    below = ConvexCell(id=next_id(), faces=below_faces)
    above = ConvexCell(id=next_id(), faces=above_faces)
    if below.volume <= 1e-12 or above.volume <= 1e-12:
        return None
    return below, above


def _order_cap(points: list, n: np.ndarray) -> Optional[np.ndarray]:
    if len(points) < 3:
        return None
    pts = np.asarray(points)
    # dedupe
    keep = []
    for p in pts:
        if not any(np.linalg.norm(p - q) < 1e-9 for q in keep):
            keep.append(p)
    if len(keep) < 3:
        return None
    pts = np.asarray(keep)
    u, v = plane_frame(n)
    c = pts.mean(axis=0)
    ang = np.arctan2((pts - c) @ v, (pts - c) @ u)
    return pts[np.argsort(ang, kind="stable")]


def dedupe_planes(planes: Sequence[Plane], angle_deg: float = 1.0, offset_tol: float = 1e-3):
    """Merge near-identical planes (either orientation); returns the kept
    planes and, per input, the index of its representative."""
    cos_thr = np.cos(np.radians(angle_deg))
    kept: list[int] = []
    mapping = np.full(len(planes), -1, dtype=np.int64)
    for i, p in enumerate(planes):
        rep = -1
        for j in kept:
            q = planes[j]
            dot = float(p.normal @ q.normal)
            if dot >= cos_thr and abs(p.offset - q.offset) < offset_tol:
                rep = j
                break
            if dot <= -cos_thr and abs(p.offset + q.offset) < offset_tol:
                rep = j
                break
        mapping[i] = rep if rep >= 0 else i
        if rep < 0:
            kept.append(i)
    return kept, mapping


def bsp_partition(bbox: AABB, planes: Sequence[Plane], areas=None) -> list[ConvexCell]:
    """Partition the bounding box by the (deduplicated) planes.

    Split order is by descending plane area when areas are given; each
    plane splits only the subtree cells it crosses, so the result is the
    plane arrangement restricted to the box.
    """
    if len(planes) == 0:
        raise GeometryError("bsp_partition needs at least one plane")
    kept, _ = dedupe_planes(planes)
    if areas is not None:
        kept = sorted(kept, key=lambda i: -float(areas[i]))
    counter = {"next": 1, "cells": 0}

    def next_id():
        counter["next"] += 1
        return counter["next"] - 1

    leaves: list[ConvexCell] = []

    def recurse(cell: ConvexCell, cand: list[int]):
        if counter["cells"] > MAX_CELLS:
            raise MeshExtractionError("partition explosion")
        for pos, i in enumerate(cand):
            res = split_cell(cell, planes[i], i, next_id)
            if res is not None:
                below, above = res
                counter["cells"] += 1
                rest = cand[pos + 1 :]
                recurse(below, rest)
                recurse(above, rest)
                return
        leaves.append(cell)

    recurse(cell_from_bbox(bbox, next_id()), list(kept))
    for new_id, cell in enumerate(leaves):
        cell.id = new_id
    return leaves


# ---------------------------------------------------------------------------
# Interior labeling
# ---------------------------------------------------------------------------


def label_cells(
    cells: Sequence[ConvexCell], regions: Sequence[PlaneRegion], n_r: int
) -> np.ndarray:
    """Interior flag per cell: more than half of n_r sphere-uniform rays
    from the centroid must first-hit a footprint with the centroid on its
    interior side."""
    if not cells:
        return np.zeros(0, dtype=bool)
    pack = kernels.RegionPack.build(regions)
    dirs = kernels.fibonacci_sphere(n_r)
    origins = np.asarray([c.centroid for c in cells])
    hit, _ = kernels.first_hits(origins, dirs, pack)
    valid = kernels.interior_side_hits(origins, hit, pack)
    h_v = valid.sum(axis=1)
    return 2 * h_v > n_r


def label_cell(centroid, regions: Sequence[PlaneRegion], n_r: int) -> bool:
    """Single-point version of :func:`label_cells`."""
    cell = ConvexCell(id=0, faces=[])
    cell._centroid = np.asarray(centroid, dtype=float)
    cell._volume = 1.0
    return bool(label_cells([cell], regions, n_r)[0])


# ---------------------------------------------------------------------------
# Connectivity
# ---------------------------------------------------------------------------


def cell_adjacency(cells: Sequence[ConvexCell], eps: float = 1e-6):
    """Neighbor cell id (or -1) for every face of every cell, found by
    nudging the face centroid outward and locating the containing cell."""
    ids = [c.id for c in cells]
    neighbors: dict[int, list[int]] = {c.id: [] for c in cells}
    for c in cells:
        nb_per_face = []
        for f in c.faces:
            q = f.centroid() + eps * f.normal
            best_slack = -np.inf
            best = -1
            for other in cells:
                if other.id == c.id:
                    continue
                s = other.min_slack(q)
                if s > best_slack:
                    best_slack = s
                    best = other.id
            nb = best if best_slack >= -1e-9 else -1
            nb_per_face.append(nb)
        neighbors[c.id] = nb_per_face
    return neighbors


def largest_interior_component(cells: Sequence[ConvexCell], labels=None) -> list[ConvexCell]:
    """Largest-volume connected component of interior cells (ties go to the
    component holding the smallest cell id)."""
    if labels is None:
        labels = [getattr(c, "label", False) for c in cells]
    interior = [c for c, lab in zip(cells, labels) if lab]
    if not interior:
        raise MeshExtractionError("empty model at this layer")
    adj = cell_adjacency(interior)
    by_id = {c.id: c for c in interior}
    seen: set[int] = set()
    components: list[list[int]] = []
    for c in interior:
        if c.id in seen:
            continue
        comp = []
        stack = [c.id]
        seen.add(c.id)
        while stack:
            cur = stack.pop()
            comp.append(cur)
            for nb in adj[cur]:
                if nb >= 0 and nb in by_id and nb not in seen:
                    seen.add(nb)
                    stack.append(nb)
        components.append(sorted(comp))
    components.sort(key=lambda comp: (-sum(by_id[i].volume for i in comp), min(comp)))
    return [by_id[i] for i in components[0]]


# ---------------------------------------------------------------------------
# Mesh assembly
# ---------------------------------------------------------------------------


@dataclass
class PolyMesh:
    """Watertight polygonal mesh: planar faces as vertex index loops."""

    vertices: np.ndarray
    faces: list  # list of index lists, CCW about the outward normal
    face_planes: list  # source plane per face (bbox walls negative)
    face_convex: list

    @property
    def n_polygons(self) -> int:
        return len(self.faces)

    @property
    def triangle_count(self) -> int:
        return sum(len(f) - 2 for f in self.faces)

    def face_loop(self, i: int) -> np.ndarray:
        return self.vertices[np.asarray(self.faces[i], dtype=np.int64)]

    def volume(self) -> float:
        vol = 0.0
        for i in range(len(self.faces)):
            v = self.face_loop(i)
            for j in range(1, len(v) - 1):
                vol += float(np.dot(v[0], np.cross(v[j], v[j + 1]))) / 6.0
        return vol

    def bounds(self) -> AABB:
        return AABB(self.vertices.min(axis=0), self.vertices.max(axis=0))


@dataclass
class MeshCheck:
    edge_manifold: bool
    oriented: bool
    euler_characteristic: int
    n_vertices: int
    n_edges: int
    n_faces: int
    offending_edges: list

    @property
    def watertight(self) -> bool:
        return self.edge_manifold and self.oriented


def validate_mesh(mesh: PolyMesh) -> MeshCheck:
    """Edge-manifoldness (every edge on exactly two faces, once per
    direction) and the Euler characteristic."""
    counts: dict[tuple, list] = {}
    for face in mesh.faces:
        k = len(face)
        for i in range(k):
            a, b = int(face[i]), int(face[(i + 1) % k])
            key = (min(a, b), max(a, b))
            rec = counts.setdefault(key, [0, 0])
            rec[0] += 1
            rec[1] += 1 if a < b else -1
    bad = [k for k, (c, o) in counts.items() if c != 2 or o != 0]
    V = len(np.unique(np.concatenate([np.asarray(f) for f in mesh.faces])))
    E = len(counts)
    F = len(mesh.faces)
    return MeshCheck(
        edge_manifold=all(c == 2 for c, _ in counts.values()),
        oriented=all(o == 0 for _, o in counts.values()),
        euler_characteristic=V - E + F,
        n_vertices=V,
        n_edges=E,
        n_faces=F,
        offending_edges=[(mesh.vertices[a], mesh.vertices[b]) for a, b in bad[:4]],
    )


def extract_mesh(component: Sequence[ConvexCell]) -> PolyMesh:
    """Boundary surface of a cell component as a watertight polygon mesh.

    Coplanar boundary faces from the same source plane are merged into
    maximal simple polygons (groups whose union develops holes fall back to
    the unmerged convex pieces). T-junction vertices are inserted so every
    edge is shared by exactly two faces.
    """
    if not component:
        raise MeshExtractionError("empty cell component")
    boundary = _boundary_faces(component)
    merged = _merge_coplanar(boundary)
    loops = [m[0] for m in merged]
    keys = [m[1] for m in merged]
    convex = [m[2] for m in merged]
    normals = [m[3] for m in merged]

    verts, index_loops = _weld(loops)
    index_loops = _refine_edges(verts, index_loops)

    faces = []
    face_planes = []
    face_convex = []
    for loop, key, cvx, n_out in zip(index_loops, keys, convex, normals):
        if len(loop) < 3:
            continue
        pts = verts[np.asarray(loop)]
        if _polygon_area(pts) < 1e-12:
            continue
        if _loop_normal(pts) @ n_out < 0:
            loop = loop[::-1]
        faces.append(loop)
        face_planes.append(key)
        face_convex.append(cvx)
    mesh = PolyMesh(
        vertices=verts, faces=faces, face_planes=face_planes, face_convex=face_convex
    )
    check = validate_mesh(mesh)
    if not check.watertight:
        raise MeshExtractionError(
            f"non-manifold junction at edges {check.offending_edges[:2]}"
        )
    return mesh


def _polygon_area(pts: np.ndarray) -> float:
    nxt = np.roll(pts, -1, axis=0)
    s = np.cross(pts, nxt).sum(axis=0)
    return 0.5 * float(np.linalg.norm(s))


def _boundary_faces(component: Sequence[ConvexCell]):
    comp = list(component)
    out = []
    for c in comp:
        for f in c.faces:
            q = f.centroid() + 1e-6 * f.normal
            inside_comp = False
            for other in comp:
                if other.id != c.id and other.min_slack(q) >= -1e-9:
                    inside_comp = True
                    break
            if not inside_comp:
                out.append(f)
    return out


def _merge_coplanar(faces):
    """Group faces by (source plane, orientation) and union them in-plane.

    Returns tuples (loop3d, plane_key, convex, outward_normal)."""
    groups: dict[tuple, list] = {}
    for f in faces:
        rep = f.normal.round(6)
        sign_key = tuple(rep) + (round(f.offset, 6), f.plane_key)
        groups.setdefault(sign_key, []).append(f)
    out = []
    for key in sorted(groups, key=str):
        members = groups[key]
        plane_key = members[0].plane_key
        n = members[0].normal
        u, v = plane_frame(n)
        origin = members[0].verts[0]
        polys = []
        for f in members:
            loc = np.stack([(f.verts - origin) @ u, (f.verts - origin) @ v], axis=1)
            p = Polygon(loc)
            if p.is_valid and p.area > 1e-12:
                polys.append(p)
        if not polys:
            continue
        union = unary_union(polys)
        parts = list(union.geoms) if isinstance(union, MultiPolygon) else [union]
        if any(len(p.interiors) > 0 for p in parts):
            # Holes cannot be expressed as a single loop; keep raw pieces.
            for f in members:
                out.append((f.verts, plane_key, True, n))
            continue
        for p in sorted(parts, key=lambda g: (-g.area, g.bounds)):
            p = shapely_orient(p.simplify(1e-9), 1.0)
            ring = np.asarray(p.exterior.coords[:-1])
            loop3d = origin + ring[:, :1] * u + ring[:, 1:2] * v
            out.append((loop3d, plane_key, _ring_is_convex(ring), n))
    return out


def _ring_is_convex(ring: np.ndarray) -> bool:
    k = len(ring)
    sign = 0
    for i in range(k):
        a, b, c = ring[i], ring[(i + 1) % k], ring[(i + 2) % k]
        cr = (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0])
        if abs(cr) < 1e-12:
            continue
        s = 1 if cr > 0 else -1
        if sign == 0:
            sign = s
        elif s != sign:
            return False
    return True


def _weld(loops):
    """Merge vertices within WELD_TOL across all loops."""
    stacked = np.concatenate(loops)
    tree = cKDTree(stacked)
    pairs = tree.query_pairs(WELD_TOL, output_type="ndarray")
    parent = np.arange(len(stacked))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for a, b in pairs:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    roots = np.asarray([find(i) for i in range(len(stacked))])
    uniq_roots, new_index = np.unique(roots, return_inverse=True)
    verts = stacked[uniq_roots]
    index_loops = []
    pos = 0
    for loop in loops:
        k = len(loop)
        idx = new_index[pos : pos + k]
        pos += k
        cleaned = []
        for i in idx:
            if not cleaned or cleaned[-1] != int(i):
                cleaned.append(int(i))
        if len(cleaned) > 1 and cleaned[0] == cleaned[-1]:
            cleaned.pop()
        index_loops.append(cleaned)
    return verts, index_loops


def _refine_edges(verts: np.ndarray, loops):
    """Insert vertices lying in the interior of face edges (T-junctions)."""
    refined = []
    for loop in loops:
        new_loop = []
        k = len(loop)
        for i in range(k):
            a, b = loop[i], loop[(i + 1) % k]
            new_loop.append(a)
            pa, pb = verts[a], verts[b]
            e = pb - pa
            ee = float(e @ e)
            if ee < 1e-300:
                continue
            t = (verts - pa) @ e / ee
            on = (t > 1e-9) & (t < 1 - 1e-9)
            if not on.any():
                continue
            cand = np.nonzero(on)[0]
            d = np.linalg.norm(verts[cand] - (pa + t[cand, None] * e), axis=1)
            cand = cand[d <= WELD_TOL]
            cand = cand[(cand != a) & (cand != b)]
            if len(cand):
                order = np.argsort(t[cand], kind="stable")
                new_loop.extend(int(c) for c in cand[order])
        refined.append(new_loop)
    return refined
